"""Dense-math substrate: seeded streams, MLPs with hand-written backprop, Adam,
gradient checking and the ``GACP`` checkpoint format."""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# seeded streams


def _tag_word(tag) -> int:
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class PrngStream:
    """Deterministic random stream.

    Backed by numpy's PCG64 seeded through ``SeedSequence``.  ``split(tag)``
    derives a child whose entropy is the parent's entropy plus a 64-bit word
    taken from SHA-256 of ``repr(tag)``, so children are independent of how
    many draws the parent has made.  Normals use numpy's ziggurat transform.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed] + [_tag_word(t) for t in self.path]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def split(self, tag) -> "PrngStream":
        return PrngStream(self.seed, self.path + (tag,))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def prng_stream(seed: int) -> PrngStream:
    return PrngStream(seed)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"bad layer shapes W{self.W.shape} b{self.b.shape}")


@dataclass
class MlpParams:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {a.W.shape} -> {b.W.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def n_params(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend([l.W, l.b])
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.W.copy(), l.b.copy(), l.act) for l in self.layers])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([Layer(np.zeros_like(l.W), np.zeros_like(l.b), l.act)
                          for l in self.layers])

    def blocks(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, l in enumerate(self.layers):
            out[f"{prefix}.{i}.W"] = l.W
            out[f"{prefix}.{i}.b"] = l.b
        return out

    @classmethod
    def from_blocks(cls, blocks: dict, prefix: str, acts: list[str]) -> "MlpParams":
        layers = []
        for i, act in enumerate(acts):
            W = np.asarray(blocks[f"{prefix}.{i}.W"])
            b = np.asarray(blocks[f"{prefix}.{i}.b"]).ravel()
            layers.append(Layer(W, b, act))
        return cls(layers)


# gradients share the parameter container
GradBundle = MlpParams


def init_mlp(dims: list[int], acts: list[str], stream: PrngStream) -> MlpParams:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    if len(acts) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for i, act in enumerate(acts):
        fan_in, fan_out = dims[i], dims[i + 1]
        W = stream.normal((fan_out, fan_in)) / np.sqrt(fan_in)
        layers.append(Layer(W, np.zeros(fan_out), act))
    return MlpParams(layers)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a, da):
    if name == "tanh":
        return da * (1.0 - a * a)
    if name == "relu":
        return da * (z > 0)
    return da


def mlp_forward(p: MlpParams, x):
    """Run the net on a vector ``(in,)`` or a batch ``(B, in)``.

    Returns ``(y, cache)``; the cache keeps each layer's input, pre-activation
    and output for :func:`mlp_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_dim or x.ndim not in (1, 2):
        raise ShapeError(f"input shape {x.shape} does not match in_dim {p.in_dim}")
    cache = []
    h = x
    for l in p.layers:
        z = h @ l.W.T + l.b
        a = _act(l.act, z)
        cache.append((h, z, a))
        h = a
    return h, cache


def mlp_backward(p: MlpParams, cache, dy):
    """Reverse-mode pass.  For batched input the parameter gradients are
    summed over rows.  Returns ``(grads, dx)``."""
    if len(cache) != len(p.layers):
        raise ShapeError("cache does not belong to these params")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache[-1][2].shape:
        raise ShapeError(f"dy shape {dy.shape} != output shape {cache[-1][2].shape}")
    grads = []
    da = dy
    for l, (h, z, a) in zip(reversed(p.layers), reversed(cache)):
        if h.shape[-1] != l.W.shape[1] or z.shape[-1] != l.W.shape[0]:
            raise ShapeError("stale cache")
        dz = _act_grad(l.act, z, a, da)
        if dz.ndim == 1:
            dW = np.outer(dz, h)
            db = dz.copy()
        else:
            dW = dz.T @ h
            db = dz.sum(axis=0)
        grads.append(Layer(dW, db, l.act))
        da = dz @ l.W
    grads.reverse()
    return MlpParams(grads), da


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, p: MlpParams, lr: float = 1e-3, **kw) -> "AdamState":
        arrs = p.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs],
                   lr=lr, **kw)


def adam_step(s: AdamState, p: MlpParams, g: GradBundle):
    """Bias-corrected Adam, applied in place.  Returns ``(s, p)``."""
    params, grads = p.arrays(), g.arrays()
    if len(params) != len(grads) or len(params) != len(s.m):
        raise ShapeError("parameter / gradient / state count mismatch")
    s.step += 1
    c1 = 1.0 - s.beta1 ** s.step
    c2 = 1.0 - s.beta2 ** s.step
    for w, dw, m, v in zip(params, grads, s.m, s.v):
        if w.shape != dw.shape or w.shape != m.shape:
            raise ShapeError(f"shape mismatch {w.shape} vs {dw.shape}")
        m *= s.beta1
        m += (1.0 - s.beta1) * dw
        v *= s.beta2
        v += (1.0 - s.beta2) * dw * dw
        w -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
    return s, p


# ---------------------------------------------------------------------------
# gradient check


def finite_diff_check(loss_fn: Callable, p: MlpParams, eps: float = 1e-5) -> float:
    """Compare backprop against central differences on every scalar in ``p``.

    ``loss_fn(p)`` must return ``(loss, grads)`` with ``grads`` shaped like
    ``p``.  Returns max |g_fd - g_bp| / max(1e-8, |g_fd| + |g_bp|).
    """
    loss, grads = loss_fn(p)
    if not np.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    worst = 0.0
    for w, g in zip(p.arrays(), grads.arrays()):
        flat_w = w.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_w.size):
            orig = flat_w[i]
            flat_w[i] = orig + eps
            lp = loss_fn(p)[0]
            flat_w[i] = orig - eps
            lm = loss_fn(p)[0]
            flat_w[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError("loss is not finite")
            fd = (lp - lm) / (2.0 * eps)
            err = abs(fd - flat_g[i]) / max(1e-8, abs(fd) + abs(flat_g[i]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"GACP" | version u8 | n_blocks u32 | blocks | crc32 u32
# block:  name_len u16 | name utf-8 | rows u32 | cols u32 | rows*cols f64, all LE

CKPT_MAGIC = b"GACP"
CKPT_VERSION = 1


def dump_checkpoint(blocks: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"block {name!r} has {arr.ndim} dims")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def load_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 13 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a GACP checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, n = struct.unpack_from("<BI", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 9
    blocks = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + ln].decode("utf-8")
            off += ln
            rows, cols = struct.unpack_from("<II", body, off)
            off += 8
            nbytes = rows * cols * 8
            if off + nbytes > len(body):
                raise CheckpointError("truncated checkpoint")
            blocks[name] = np.frombuffer(body, dtype="<f8", count=rows * cols,
                                         offset=off).reshape(rows, cols).astype(np.float64)
            off += nbytes
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return blocks
