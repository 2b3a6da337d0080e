# Stage 1: encoder -> vector quantizer -> label head.
#
# Perplexity is the effective number of codes in use.  Dead-code restarts
# already keep most of the codebook alive, so the info term (beta) moves it
# only a little on this short run; the full run is 20k steps.

import numpy as np

from gacodec import signal as S
from gacodec import stage1 as s1

clips = S.make_corpus(480, seed=1)
F = S.corpus_features(clips)

for beta in (0.0, 0.25):
    cfg = s1.Stage1Config(codebook_size=64, beta=beta, steps=1500)
    model, log = s1.train_stage1(clips, cfg, seed=1, features=F)
    print(f"beta={beta}: perplexity {log.final_perplexity:5.1f} of 64, "
          f"final semantic CE {np.mean(log.semantic[-100:]):.3f}")

tokens = s1.tokenize(model, F[0])
print("clip 0 tokens:", tokens.tolist())

# downsampling s groups frames: 31 tokens at s=1, 16 at s=2
m2, _ = s1.train_stage1(clips, s1.Stage1Config(codebook_size=128, downsample=2, steps=300),
                        seed=1, features=F)
print("s=2 tokens per clip:", len(s1.tokenize(m2, F[0])))
