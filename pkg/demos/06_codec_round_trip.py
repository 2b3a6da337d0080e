# Whole codec on a small corpus: train both stages briefly, push one clip
# through encode -> bitstream -> decode, and score the held-out set.

import numpy as np

from gacodec import codec, evalkit, ic1
from gacodec import signal as S
from gacodec import stage1 as s1
from gacodec import stage2 as s2

clips = S.make_corpus(480, seed=2)
F = S.corpus_features(clips)
labels = np.array([c.label for c in clips])
train, test = evalkit.stratified_split(labels, 0)

m, _ = s1.train_stage1([clips[i] for i in train], s1.Stage1Config(codebook_size=128, steps=2000),
                       1, features=F[train])
v, tlog = s2.train_stage2(None, m, s2.Stage2Config(tier="medium", steps=2000), features=F[train])
print(f"stage 2 loss {tlog.final_loss:.3f} -> {tlog.L_bits_per_token:.2f} bits/token")

i = int(test[0])
blob = codec.encode_clip(m, clips[i].waveform)
rec = codec.decode_clip(m, v, blob, 32, 7)
print(f"clip {i}: {len(blob)} bytes on the wire, LSD {evalkit.lsd(F[i], rec):.2f} dB")

ctx = ic1.EvalContext(F, labels, mmd_frames=1000, judge_steps=1500)
report, _ = ic1.evaluate_decoder(ctx, m, v, 32, 1)
print(f"held-out: LSD {report.lsd:.2f} dB, MMD {report.mmd:.2e}, judge "
      f"{report.judge_accuracy:.3f} (ground truth {ctx.judge_gt:.3f}), "
      f"perplexity {report.perplexity:.1f}")
