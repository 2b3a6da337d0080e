"""Semantic bottleneck: frame encoder, vector quantizer, label head and the
semantic + information-constraint training objective."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import signal
from .tensorkit import (AdamState, MlpParams, PrngStream, ShapeError, adam_step,
                        dump_checkpoint, init_mlp, load_checkpoint, mlp_backward,
                        mlp_forward)

log = logging.getLogger(__name__)

N_FRAMES = 31
N_BANDS = 32
CONTEXT = 3


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Stage1Config:
    latent_dim: int = 16
    codebook_size: int = 64
    downsample: int = 1
    beta: float = 0.25
    commitment: float = 0.25
    tau: float = 1.0
    enc_hidden: int = 64
    head_hidden: int = 64
    ema_decay: float = 0.99
    dead_code_threshold: float = 0.05
    steps: int = 20000
    batch_size: int = 16
    lr: float = 1e-3

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.downsample not in (1, 2, 4):
            raise ValueError("downsample must be 1, 2 or 4")
        if self.beta < 0 or self.commitment < 0:
            raise ValueError("beta and commitment must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def n_blocks(self) -> int:
        return math.ceil(N_FRAMES / self.downsample)


@dataclass
class Stage1Model:
    encoder: MlpParams
    codebook: np.ndarray  # (K, d)
    head: MlpParams
    feat_mean: np.ndarray  # (F,)
    feat_std: np.ndarray
    cfg: Stage1Config

    def to_bytes(self) -> bytes:
        blocks = {"enc.norm_mean": self.feat_mean, "enc.norm_std": self.feat_std}
        blocks.update(self.encoder.blocks("enc"))
        blocks["cb"] = self.codebook
        blocks.update(self.head.blocks("head"))
        return dump_checkpoint(blocks)

    def config_json(self) -> str:
        return json.dumps(asdict(self.cfg), indent=2, sort_keys=True)

    @classmethod
    def from_bytes(cls, data: bytes, cfg: Stage1Config) -> "Stage1Model":
        b = load_checkpoint(data)
        enc = MlpParams.from_blocks(b, "enc", ["tanh", "identity"])
        head = MlpParams.from_blocks(b, "head", ["tanh", "identity"])
        return cls(enc, b["cb"], head, b["enc.norm_mean"].ravel(),
                   b["enc.norm_std"].ravel(), cfg)


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    semantic: list[float] = field(default_factory=list)
    info: list[float] = field(default_factory=list)
    commit: list[float] = field(default_factory=list)
    perplexity: list[float] = field(default_factory=list)
    final_perplexity: float = float("nan")
    final_info: float = float("nan")


def init_model(cfg: Stage1Config, feat_mean, feat_std, stream: PrngStream) -> Stage1Model:
    in_dim = CONTEXT * N_BANDS * cfg.downsample
    enc = init_mlp([in_dim, cfg.enc_hidden, cfg.latent_dim], ["tanh", "identity"],
                   stream.split("enc"))
    head = init_mlp([cfg.latent_dim, cfg.head_hidden, signal.N_CLASSES],
                    ["tanh", "identity"], stream.split("head"))
    cb = stream.split("cb").normal((cfg.codebook_size, cfg.latent_dim))
    return Stage1Model(enc, cb, head, np.asarray(feat_mean, float),
                       np.asarray(feat_std, float), cfg)


# ---------------------------------------------------------------------------
# encoder side


def block_inputs(f: np.ndarray, s: int) -> np.ndarray:
    """(..., T, F) normalised features -> (..., ceil(T/s), 3*F*s) encoder rows.

    Each frame is joined with its left and right neighbour (edges repeated);
    frames are then grouped s at a time, the last group zero-padded.
    """
    T = f.shape[-2]
    left = np.concatenate([f[..., :1, :], f[..., :-1, :]], axis=-2)
    right = np.concatenate([f[..., 1:, :], f[..., -1:, :]], axis=-2)
    win = np.concatenate([left, f, right], axis=-1)
    nb = math.ceil(T / s)
    pad = nb * s - T
    if pad:
        zeros = np.zeros(win.shape[:-2] + (pad, win.shape[-1]))
        win = np.concatenate([win, zeros], axis=-2)
    return win.reshape(win.shape[:-2] + (nb, s * win.shape[-1]))


def normalize(m: Stage1Model, f: np.ndarray) -> np.ndarray:
    return (np.asarray(f, float) - m.feat_mean) / m.feat_std


def encode_frames(m: Stage1Model, f: np.ndarray) -> np.ndarray:
    """Features (T, F) -> latents (ceil(T/s), d); also accepts (N, T, F)."""
    f = np.asarray(f, float)
    if f.shape[-2:] != (N_FRAMES, N_BANDS):
        raise ShapeError(f"features must be {N_FRAMES}x{N_BANDS}, got {f.shape}")
    x = block_inputs(normalize(m, f), m.cfg.downsample)
    lead = x.shape[:-1]
    z, _ = mlp_forward(m.encoder, x.reshape(-1, x.shape[-1]))
    return z.reshape(lead + (z.shape[-1],))


def _sq_dist(latents, cb):
    d = (np.sum(latents ** 2, axis=1, keepdims=True) - 2.0 * latents @ cb.T
         + np.sum(cb ** 2, axis=1)[None, :])
    return np.maximum(d, 0.0)


def _softmax(logits):
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def vq_quantize(cb: np.ndarray, latents: np.ndarray, tau: float = 1.0):
    """Nearest-code assignment.

    Returns ``(tokens, quantized, soft_assign)`` where ``soft_assign`` is
    softmax(-dist / tau).  ``np.argmin`` picks the lowest index on ties.
    """
    latents = np.atleast_2d(np.asarray(latents, float))
    cb = np.asarray(cb, float)
    if latents.shape[1] != cb.shape[1]:
        raise ShapeError("latent dim does not match codebook")
    dist = _sq_dist(latents, cb)
    tokens = np.argmin(dist, axis=1)
    return tokens, cb[tokens], _softmax(-dist / tau)


def tokenize(m: Stage1Model, f: np.ndarray) -> np.ndarray:
    """Features (T, F) or (N, T, F) -> token indices."""
    z = encode_frames(m, f)
    tokens, _, _ = vq_quantize(m.codebook, z.reshape(-1, z.shape[-1]), m.cfg.tau)
    return tokens.reshape(z.shape[:-1])


# ---------------------------------------------------------------------------
# losses


def info_loss(soft_assign: np.ndarray) -> float:
    """KL(mean soft assignment || uniform) = ln K + sum p ln p."""
    return info_loss_and_grad(soft_assign)[0]


def info_loss_and_grad(soft_assign: np.ndarray):
    p = np.atleast_2d(np.asarray(soft_assign, float))
    if np.any(p < -1e-12) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("soft assignment rows must be probability vectors")
    R, K = p.shape
    pbar = p.mean(axis=0)
    safe = np.where(pbar > 0, pbar, 1.0)
    loss = math.log(K) + float(np.sum(pbar * np.log(safe)))
    grad = np.broadcast_to((np.log(np.maximum(pbar, 1e-300)) + 1.0) / R, p.shape)
    return loss, grad


def _cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits`` (B, C)."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError("class id out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    B = logits.shape[0]
    loss = float(np.mean(logz - shifted[np.arange(B), labels]))
    g = np.exp(shifted - logz[:, None])
    g[np.arange(B), labels] -= 1.0
    return loss, g / B


def semantic_loss(m: Stage1Model, quantized: np.ndarray, label) -> float:
    """Cross-entropy of the label head on time-pooled quantized codes.

    ``quantized`` is (blocks, d) for one clip or (B, blocks, d) with a label
    array of length B.
    """
    q = np.asarray(quantized, float)
    if q.ndim == 2:
        q = q[None]
    logits, _ = mlp_forward(m.head, q.mean(axis=1))
    return _cross_entropy(logits, label)[0]


def stage1_objective(m: Stage1Model, x_blocks: np.ndarray, labels, bypass: bool = False):
    """Full loss on a batch of encoder rows ``(B, nb, in)``.

    Returns ``(loss, enc_grads, head_grads, parts, tokens, latents)``.  The
    quantizer is straight-through: the semantic gradient taken at the
    quantized codes is handed to the latents unchanged.  With ``bypass`` the
    quantized codes are replaced by the latents themselves.
    """
    cfg = m.cfg
    B, nb, _ = x_blocks.shape
    z, enc_cache = mlp_forward(m.encoder, x_blocks.reshape(B * nb, -1))
    dist = _sq_dist(z, m.codebook)
    if not np.all(np.isfinite(dist)):
        raise TrainingDiverged("non-finite latent distances")
    tokens = np.argmin(dist, axis=1)
    soft = _softmax(-dist / cfg.tau)
    q = z if bypass else m.codebook[tokens]

    pooled = q.reshape(B, nb, -1).mean(axis=1)
    logits, head_cache = mlp_forward(m.head, pooled)
    sem, dlogits = _cross_entropy(logits, labels)
    head_grads, dpooled = mlp_backward(m.head, head_cache, dlogits)
    dz = np.repeat(dpooled / nb, nb, axis=0)

    info, dsoft = info_loss_and_grad(soft)
    if cfg.beta > 0:
        # soft = softmax(-dist/tau), d dist_k / dz = 2 (z - c_k)
        g = cfg.beta * dsoft
        dlogit = soft * (g - np.sum(soft * g, axis=1, keepdims=True))
        ddist = -dlogit / cfg.tau
        dz += 2.0 * (ddist.sum(axis=1, keepdims=True) * z - ddist @ m.codebook)

    diff = z - m.codebook[tokens] if not bypass else np.zeros_like(z)
    commit = float(np.mean(np.sum(diff * diff, axis=1)))
    dz += cfg.commitment * 2.0 * diff / (B * nb)

    enc_grads, _ = mlp_backward(m.encoder, enc_cache, dz)
    loss = sem + cfg.beta * info + cfg.commitment * commit
    parts = {"semantic": sem, "info": info, "commit": commit}
    return loss, enc_grads, head_grads, parts, tokens, z


# ---------------------------------------------------------------------------
# training


def codebook_perplexity(tokens, K: int) -> float:
    counts = np.bincount(np.asarray(tokens).ravel(), minlength=K).astype(float)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


class _EmaCodebook:
    def __init__(self, cb, decay, threshold, eps=1e-5):
        self.cb = cb
        self.size = np.ones(cb.shape[0])
        self.sums = cb.copy()
        self.decay = decay
        self.threshold = threshold
        self.eps = eps

    def update(self, z, tokens, stream: PrngStream):
        K = self.cb.shape[0]
        onehot = np.zeros((z.shape[0], K))
        onehot[np.arange(z.shape[0]), tokens] = 1.0
        self.size = self.decay * self.size + (1 - self.decay) * onehot.sum(axis=0)
        self.sums = self.decay * self.sums + (1 - self.decay) * (onehot.T @ z)
        n = self.size.sum()
        smoothed = (self.size + self.eps) / (n + K * self.eps) * n
        self.cb = self.sums / smoothed[:, None]
        dead = np.flatnonzero(self.size < self.threshold)
        if dead.size:
            # restart unused codes on random latents from this batch
            pick = stream.integers(0, z.shape[0], dead.size)
            jitter = 1e-3 * stream.normal((dead.size, z.shape[1]))
            self.cb[dead] = z[pick] + jitter
            self.size[dead] = 1.0
            self.sums[dead] = self.cb[dead]
        return self.cb


def feature_stats(features: np.ndarray):
    flat = features.reshape(-1, features.shape[-1])
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), 1e-6)


def train_stage1(corpus, cfg: Stage1Config, seed: int, features=None,
                 log_every: int = 0) -> tuple[Stage1Model, TrainLog]:
    """Minimise semantic CE + beta * info + commitment with Adam on encoder
    and head, and EMA updates (with dead-code restarts) on the codebook."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if features is None:
        features = signal.corpus_features(corpus)
    labels = np.array([c.label for c in corpus])
    root = PrngStream(seed).split("stage1")
    mean, std = feature_stats(features)
    m = init_model(cfg, mean, std, root.split("init"))
    X = block_inputs((features - mean) / std, cfg.downsample)

    # initialise codes on encoder outputs so none start far from the data
    init_rows = X[root.split("cb_init").integers(0, len(X), 64)].reshape(-1, X.shape[-1])
    z0, _ = mlp_forward(m.encoder, init_rows)
    pick = root.split("cb_pick").permutation(len(z0))[:cfg.codebook_size]
    if len(pick) < cfg.codebook_size:
        pick = root.split("cb_pick").integers(0, len(z0), cfg.codebook_size)
    m.codebook = z0[pick] + 1e-3 * root.split("cb_jitter").normal(
        (cfg.codebook_size, cfg.latent_dim))
    ema = _EmaCodebook(m.codebook.copy(), cfg.ema_decay, cfg.dead_code_threshold)

    opt_enc = AdamState.for_params(m.encoder, lr=cfg.lr)
    opt_head = AdamState.for_params(m.head, lr=cfg.lr)
    batches = root.split("batches")
    restarts = root.split("restarts")
    tlog = TrainLog()
    bs = min(cfg.batch_size, len(corpus))
    for step in range(cfg.steps):
        idx = np.sort(batches.integers(0, len(corpus), bs))
        loss, g_enc, g_head, parts, tokens, z = stage1_objective(m, X[idx], labels[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"stage-1 loss became {loss} at step {step}")
        adam_step(opt_enc, m.encoder, g_enc)
        adam_step(opt_head, m.head, g_head)
        m.codebook = ema.update(z, tokens, restarts)
        tlog.loss.append(loss)
        tlog.semantic.append(parts["semantic"])
        tlog.info.append(parts["info"])
        tlog.commit.append(parts["commit"])
        tlog.perplexity.append(codebook_perplexity(tokens, cfg.codebook_size))
        if log_every and step % log_every == 0:
            log.info("stage1 step %d loss %.4f sem %.4f info %.4f ppl %.1f", step, loss,
                     parts["semantic"], parts["info"], tlog.perplexity[-1])

    z_all = encode_frames(m, features).reshape(-1, cfg.latent_dim)
    tokens, _, soft = vq_quantize(m.codebook, z_all, cfg.tau)
    tlog.final_perplexity = codebook_perplexity(tokens, cfg.codebook_size)
    tlog.final_info = info_loss(soft)
    return m, tlog
