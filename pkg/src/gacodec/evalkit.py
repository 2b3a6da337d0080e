"""Desk-scale quality metrics: log-spectral distance, frame MMD, codebook
perplexity and a frozen label judge."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import signal
from .stage1 import _cross_entropy, codebook_perplexity, feature_stats
from .tensorkit import (AdamState, MlpParams, PrngStream, adam_step, init_mlp,
                        mlp_backward, mlp_forward)

DB_PER_NEPER = 10.0 / math.log(10.0)

__all__ = ["lsd", "mmd_frames", "median_bandwidth", "codebook_perplexity", "JudgeModel",
           "train_judge", "judge_accuracy", "stratified_split", "MetricReport"]


def lsd(ref, rec) -> float:
    """Log-spectral distance in dB between two natural-log feature matrices."""
    ref = np.asarray(ref, float)
    rec = np.asarray(rec, float)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {rec.shape}")
    diff_db = DB_PER_NEPER * (np.atleast_2d(ref) - np.atleast_2d(rec))
    return float(np.mean(np.sqrt(np.mean(diff_db ** 2, axis=-1))))


def median_bandwidth(A, B) -> float:
    d = pdist(np.concatenate([A, B], axis=0))
    return float(np.median(d))


def mmd_frames(A, B, sigma: float | None = None, paired: bool = False) -> float:
    """Unbiased squared MMD with a Gaussian kernel.

    ``sigma`` defaults to the median pairwise distance over A and B pooled.
    With ``paired`` (equal sizes, row i of A drawn together with row i of B,
    e.g. a reconstruction and its reference) the cross term skips the i == j
    pairs, which keeps the estimate unbiased under that dependence.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    m, n = len(A), len(B)
    if m < 2 or n < 2:
        raise ValueError("need at least two samples per set")
    if sigma is None:
        sigma = median_bandwidth(A, B)
    if not sigma > 0:
        raise ValueError("degenerate sets: zero bandwidth")
    g = -0.5 / sigma ** 2
    saa = (_kernel_sum(A, A, g) - m) / (m * (m - 1))
    sbb = (_kernel_sum(B, B, g) - n) / (n * (n - 1))
    if paired:
        if m != n:
            raise ValueError("paired sets must have equal size")
        diag = np.exp(g * np.sum((A - B) ** 2, axis=1)).sum()
        return float(saa + sbb - 2.0 * (_kernel_sum(A, B, g) - diag) / (m * (m - 1)))
    return float(saa + sbb - 2.0 * _kernel_sum(A, B, g) / (m * n))


def _kernel_sum(X, Y, g, chunk=2048) -> float:
    # row blocks keep memory at chunk * len(Y) for large frame sets
    return float(sum(np.exp(g * cdist(X[i:i + chunk], Y, "sqeuclidean")).sum()
                     for i in range(0, len(X), chunk)))


# ---------------------------------------------------------------------------
# judge


@dataclass
class JudgeModel:
    net: MlpParams
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def logits(self, features) -> np.ndarray:
        """Features (T, F) or (N, T, F) -> logits; frames are mean-pooled."""
        f = np.asarray(features, float)
        pooled = f.mean(axis=-2)
        out, _ = mlp_forward(self.net, (pooled - self.feat_mean) / self.feat_std)
        return out

    def predict(self, features) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.logits(features)), axis=-1)


def judge_loss_and_grad(net: MlpParams, pooled, labels):
    logits, cache = mlp_forward(net, pooled)
    loss, dlogits = _cross_entropy(logits, labels)
    grads, _ = mlp_backward(net, cache, dlogits)
    return loss, grads


def stratified_split(labels, seed: int, frac_test: float = 0.2):
    """Per-class seeded shuffle; the first ``frac_test`` of each class is held
    out.  Returns sorted (train_idx, test_idx)."""
    labels = np.asarray(labels)
    st = PrngStream(seed).split("split")
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[st.split(int(c)).permutation(len(idx))]
        k = int(round(frac_test * len(idx)))
        test.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def train_judge(features, labels, seed: int, steps: int = 3000, hidden: int = 64,
                batch_size: int = 64, lr: float = 3e-3) -> JudgeModel:
    """Classifier on mean-pooled ground-truth frames.  Callers pass only the
    training split."""
    features = np.asarray(features, float)
    labels = np.asarray(labels)
    pooled = features.mean(axis=1)
    mean, std = feature_stats(pooled[:, None, :])
    x = (pooled - mean) / std
    st = PrngStream(seed).split("judge")
    net = init_mlp([x.shape[1], hidden, signal.N_CLASSES], ["tanh", "identity"],
                   st.split("init"))
    opt = AdamState.for_params(net, lr=lr)
    batches = st.split("batches")
    bs = min(batch_size, len(x))
    for _ in range(steps):
        idx = np.sort(batches.integers(0, len(x), bs))
        _, grads = judge_loss_and_grad(net, x[idx], labels[idx])
        adam_step(opt, net, grads)
    return JudgeModel(net, mean, std)


def judge_accuracy(j: JudgeModel, features, labels) -> float:
    pred = j.predict(features)
    return float(np.mean(pred == np.asarray(labels)))


@dataclass
class MetricReport:
    lsd: float
    mmd: float
    judge_accuracy: float
    perplexity: float

    def __post_init__(self):
        for name in ("lsd", "mmd", "judge_accuracy", "perplexity"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")
