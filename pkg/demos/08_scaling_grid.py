# A miniature scaling grid: three decoder sizes at two bitrates, one frozen
# tokenizer per bitrate.  The acceptance suite runs the full-size version.

import json
import tempfile
from pathlib import Path

from gacodec import ic1
from gacodec import signal as S
from gacodec import stage1 as s1

out = Path(tempfile.mkdtemp(prefix="gac_grid_"))
clips = S.make_corpus(240, seed=3)
F = S.corpus_features(clips)

points = []
for K, s in ((128, 2), (128, 1)):
    m, _ = s1.train_stage1(clips, s1.Stage1Config(codebook_size=K, downsample=s, steps=800), 1,
                           features=F)
    (out / f"s1_{s}.gacp").write_bytes(m.to_bytes())
    (out / f"s1_{s}.gacp.json").write_text(m.config_json())
    points.append({"K": K, "s": s, "stage1": f"s1_{s}.gacp"})

doc = {"points": points, "seeds": [1, 2], "steps": 800, "ode_steps": 16, "mmd_frames": 800}
(out / "grid.json").write_text(json.dumps(doc, indent=2))
grid = ic1.ScalingGrid.from_json(doc, base=out)
rows, report = ic1.run_scaling_experiment(grid, clips, out / "runs")
print(report)
print("files in", out / "runs", ":", sorted(p.name for p in (out / "runs").iterdir()))
