"""Generative decoder: per-frame conditional rectified flow and Euler sampling."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import signal
from .stage1 import N_FRAMES, Stage1Model, TrainingDiverged, feature_stats, tokenize
from .tensorkit import (AdamState, MlpParams, PrngStream, ShapeError, adam_step,
                        dump_checkpoint, init_mlp, load_checkpoint, mlp_backward,
                        mlp_forward)

log = logging.getLogger(__name__)

TIERS = {"small": (32, 2), "medium": (64, 3), "large": (128, 4)}
T_EMBED = 5


@dataclass
class Stage2Config:
    tier: str = "medium"
    window: int = 3
    activation: str = "relu"
    ode_steps: int = 32
    steps: int = 20000
    batch_size: int = 8  # clips per step (all frames of each clip are used)
    lr: float = 1e-3
    lr_final_frac: float = 0.1  # cosine decay to this fraction of lr
    weight_ema: float = 0.999  # 0 keeps the last iterate
    seed: int = 0

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.ode_steps < 1:
            raise ValueError("ode_steps must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd number")
        if not 0.0 <= self.weight_ema < 1.0:
            raise ValueError("weight_ema must be in [0, 1)")

    @property
    def width(self) -> int:
        return TIERS[self.tier][0]

    @property
    def depth(self) -> int:
        return TIERS[self.tier][1]


@dataclass
class VelocityModel:
    net: MlpParams
    feat_mean: np.ndarray
    feat_std: np.ndarray
    cfg: Stage2Config

    @property
    def feat_dim(self) -> int:
        return self.net.out_dim

    @property
    def cond_dim(self) -> int:
        return self.net.in_dim - self.feat_dim - T_EMBED

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def to_bytes(self) -> bytes:
        blocks = {"vel.norm_mean": self.feat_mean, "vel.norm_std": self.feat_std}
        blocks.update(self.net.blocks("vel"))
        return dump_checkpoint(blocks)

    def config_json(self) -> str:
        return json.dumps(asdict(self.cfg), indent=2, sort_keys=True)

    @classmethod
    def from_bytes(cls, data: bytes, cfg: Stage2Config) -> "VelocityModel":
        b = load_checkpoint(data)
        acts = [cfg.activation] * cfg.depth + ["identity"]
        net = MlpParams.from_blocks(b, "vel", acts)
        return cls(net, b["vel.norm_mean"].ravel(), b["vel.norm_std"].ravel(), cfg)


def init_velocity(cfg: Stage2Config, feat_dim: int, cond_dim: int,
                  stream: PrngStream, feat_mean=None, feat_std=None) -> VelocityModel:
    dims = [feat_dim + T_EMBED + cond_dim] + [cfg.width] * cfg.depth + [feat_dim]
    acts = [cfg.activation] * cfg.depth + ["identity"]
    net = init_mlp(dims, acts, stream)
    mean = np.zeros(feat_dim) if feat_mean is None else np.asarray(feat_mean, float)
    std = np.ones(feat_dim) if feat_std is None else np.asarray(feat_std, float)
    return VelocityModel(net, mean, std, cfg)


def t_embed(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, float))
    w = 2.0 * np.pi * t
    return np.stack([t, np.sin(w), np.cos(w), np.sin(2 * w), np.cos(2 * w)], axis=-1)


def interpolate(x0, x1, t):
    """Straight-line path point t*x1 + (1-t)*x0.  ``t`` may be per-row."""
    x0 = np.asarray(x0, float)
    x1 = np.asarray(x1, float)
    if x0.shape != x1.shape:
        raise ShapeError("x0 and x1 differ in shape")
    t = np.asarray(t, float)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return t * x1 + (1.0 - t) * x0


def velocity(v: VelocityModel, x, t, cond):
    """Evaluate the velocity net on rows of state ``x`` (B, F)."""
    x = np.atleast_2d(x)
    te = np.broadcast_to(t_embed(t), (x.shape[0], T_EMBED)) if np.ndim(t) == 0 else t_embed(t)
    cond = np.zeros((x.shape[0], 0)) if cond is None else np.atleast_2d(cond)
    inp = np.concatenate([x, te, cond], axis=1)
    return mlp_forward(v.net, inp)


@dataclass
class FlowBatch:
    """Arrays of ``FlowBatchItem`` fields, one row per item."""
    x1: np.ndarray
    cond: np.ndarray
    x0: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if np.any(self.t < 0) or np.any(self.t > 1):
            raise ValueError("t must lie in [0, 1]")
        if len(self.x1) == 0:
            raise ValueError("empty batch")


def fm_loss_and_grad(v: VelocityModel, batch: FlowBatch):
    xt = interpolate(batch.x0, batch.x1, batch.t)
    pred, cache = velocity(v, xt, batch.t, batch.cond)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite velocity")
    err = pred - (batch.x1 - batch.x0)
    n = len(err)
    loss = float(np.sum(err * err) / n)
    grads, _ = mlp_backward(v.net, cache, 2.0 * err / n)
    return loss, grads


def fm_loss(v: VelocityModel, batch: FlowBatch) -> float:
    """Mean over items of ||v(x_t, t, cond) - (x1 - x0)||^2."""
    return fm_loss_and_grad(v, batch)[0]


def euler_sample(v: VelocityModel, cond, n: int, seed: int | None = None, x0=None):
    """Integrate dx/dt = v(x, t, cond) from t=0 to 1 with ``n`` left-endpoint
    Euler steps, one row per condition vector.  Starts from seeded standard
    normals unless ``x0`` is given.  Output is mapped back to feature units."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cond = None if cond is None else np.atleast_2d(np.asarray(cond, float))
    if x0 is None:
        rows = 1 if cond is None else len(cond)
        x0 = PrngStream(seed).split("euler").normal((rows, v.feat_dim))
    x = np.array(x0, dtype=float, ndmin=2)
    dt = 1.0 / n
    for i in range(n):
        vel, _ = velocity(v, x, i / n, cond)
        x = x + dt * vel
    return x * v.feat_std + v.feat_mean


# ---------------------------------------------------------------------------
# conditioning


def token_conditions(s1: Stage1Model, tokens, window: int = 3, n_frames: int = N_FRAMES):
    """Tokens (blocks,) -> per-frame conditions (T, window*d + 1).

    Tokens are repeated ``s`` times to frame rate, each frame takes the codes
    of its ``window`` neighbouring frames (edges repeated) plus its
    normalised position in the clip.
    """
    tokens = np.asarray(tokens)
    s = s1.cfg.downsample
    per_frame = np.repeat(tokens, s, axis=-1)[..., :n_frames]
    half = window // 2
    idx = np.clip(np.arange(n_frames)[:, None] + np.arange(-half, half + 1)[None, :],
                  0, n_frames - 1)
    codes = s1.codebook[per_frame[..., idx]]  # (..., T, window, d)
    codes = codes.reshape(codes.shape[:-2] + (-1,))
    pos = np.broadcast_to(np.linspace(0.0, 1.0, n_frames)[:, None],
                          codes.shape[:-1] + (1,))
    return np.concatenate([codes, pos], axis=-1)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    final_loss: float = float("nan")  # mean squared velocity error per frame
    L_nats_per_frame: float = float("nan")
    L_bits_per_frame: float = float("nan")
    L_bits_per_token: float = float("nan")
    plateaued: bool = False
    tokens_seen: int = 0


def _lr_at(cfg: Stage2Config, step: int) -> float:
    frac = step / max(1, cfg.steps - 1)
    return cfg.lr * (cfg.lr_final_frac + (1 - cfg.lr_final_frac)
                     * 0.5 * (1 + math.cos(math.pi * frac)))


def fit_velocity(v: VelocityModel, x1: np.ndarray, cond: np.ndarray | None,
                 cfg: Stage2Config, stream: PrngStream, log_every: int = 0) -> list[float]:
    """Adam on fm_loss.  ``x1`` is grouped data (N, G, F) in normalised units;
    each step draws ``batch_size`` groups and uses all their rows.  Noise and
    times for step ``k`` come from ``stream.split(("step", k))``.  With
    ``cfg.weight_ema`` the returned net holds the running average of the
    weights rather than the last iterate."""
    N, G, F = x1.shape
    opt = AdamState.for_params(v.net, lr=cfg.lr)
    avg = v.net.copy() if cfg.weight_ema else None
    bs = min(cfg.batch_size, N)
    losses = []
    for step in range(cfg.steps):
        st = stream.split(("step", step))
        idx = np.sort(st.integers(0, N, bs))
        rows = bs * G
        batch = FlowBatch(
            x1=x1[idx].reshape(rows, F),
            cond=None if cond is None else cond[idx].reshape(rows, -1),
            x0=st.normal((rows, F)),
            t=st.uniform(rows),
        )
        loss, grads = fm_loss_and_grad(v, batch)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"flow loss became {loss} at step {step}")
        opt.lr = _lr_at(cfg, step)
        adam_step(opt, v.net, grads)
        if avg is not None:
            # bias-corrected warm start: plain mean over the first 1/(1-ema) steps
            a = min(cfg.weight_ema, step / (step + 1.0))
            for dst, src in zip(avg.arrays(), v.net.arrays()):
                dst *= a
                dst += (1.0 - a) * src
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("stage2[%s] step %d loss %.4f", cfg.tier, step, loss)
    if avg is not None:
        v.net = avg
    return losses


def summarize_losses(losses, downsample: int, window: int = 1000) -> TrainLog:
    tlog = TrainLog(loss=list(losses))
    w = min(window, len(losses))
    final = float(np.mean(losses[-w:]))
    tlog.final_loss = final
    # Gaussian-equivalent NLL proxy: half the squared error, summed over bands
    tlog.L_nats_per_frame = 0.5 * final
    tlog.L_bits_per_frame = tlog.L_nats_per_frame / math.log(2)
    tlog.L_bits_per_token = tlog.L_bits_per_frame * downsample
    if len(losses) >= 2 * window:
        prev = float(np.mean(losses[-2 * window:-window]))
        tlog.plateaued = abs(prev - final) / max(abs(prev), 1e-12) < 0.01
    return tlog


def train_stage2(corpus, frozen: Stage1Model, cfg: Stage2Config, features=None,
                 log_every: int = 0) -> tuple[VelocityModel, TrainLog]:
    """Train the conditional velocity net on feature frames; the Stage-1 model
    is only read (its tokens are computed once up front)."""
    if features is None:
        features = signal.corpus_features(corpus)
    mean, std = feature_stats(features)
    tokens = tokenize(frozen, features)
    cond = token_conditions(frozen, tokens, cfg.window)
    root = PrngStream(cfg.seed).split("stage2")
    v = init_velocity(cfg, features.shape[-1], cond.shape[-1], root.split("init"),
                      mean, std)
    losses = fit_velocity(v, (features - mean) / std, cond, cfg, root.split("train"),
                          log_every)
    tlog = summarize_losses(losses, frozen.cfg.downsample)
    tlog.tokens_seen = cfg.steps * min(cfg.batch_size, len(features)) * tokens.shape[-1]
    return v, tlog


def decode_tokens(s1: Stage1Model, v: VelocityModel, tokens, n: int, seed: int):
    """Tokens of one clip -> reconstructed (T, F) features."""
    cond = token_conditions(s1, tokens, v.cfg.window)
    return euler_sample(v, cond, n, seed)
