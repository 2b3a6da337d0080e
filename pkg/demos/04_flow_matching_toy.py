# Rectified flow on a 2-D four-blob mixture, sampled with Euler steps.

import numpy as np

from gacodec import evalkit
from gacodec import stage2 as s2
from gacodec.tensorkit import PrngStream

root = PrngStream(0)
means = np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
data = means[root.split("c").integers(0, 4, 2000)] + 0.4 * root.split("n").normal((2000, 2))

cfg = s2.Stage2Config(tier="medium", steps=4000, batch_size=256, seed=0)
v = s2.init_velocity(cfg, 2, 0, root.split("init"), np.zeros(2), np.ones(2))
losses = s2.fit_velocity(v, data[:, None, :], None, cfg, root.split("train"))
print(f"flow loss: first 100 steps {np.mean(losses[:100]):.3f}, last 100 {np.mean(losses[-100:]):.3f}")

x0 = root.split("prior").normal((2000, 2))
base = evalkit.mmd_frames(x0, data)
for n in (1, 4, 16, 64):
    out = s2.euler_sample(v, None, n, x0=x0)
    print(f"Euler n={n:3d}: MMD to data {evalkit.mmd_frames(out, data):.4f} (prior {base:.4f})")

# which blob did each sample land in?
out = s2.euler_sample(v, None, 64, x0=x0)
blob = np.argmin(((out[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
print("samples per blob:", np.bincount(blob, minlength=4).tolist())
