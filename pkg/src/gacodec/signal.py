"""Synthetic labelled corpus and the log band-energy front-end."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .tensorkit import PrngStream

SAMPLE_RATE = 8000
CLIP_LEN = 5120
N_PITCH = 8
N_CLASSES = 24


class Family(enum.IntEnum):
    TONE = 0
    CHIRP = 1
    NOISE_BURST = 2


def pitch_hz(pitch_bucket: int) -> float:
    return 110.0 * 2.0 ** (pitch_bucket / 2.0)


@dataclass(frozen=True)
class ClipSpec:
    family: Family
    pitch_bucket: int
    amp: float = 1.0
    attack: float = 0.0  # fraction of clip length; 0 means no ramp
    decay: float = 0.0
    harmonics: int = 1
    sweep_rate: float = 0.0  # Hz/s

    def __post_init__(self):
        if not 0 <= self.pitch_bucket < N_PITCH:
            raise ValueError(f"pitch_bucket {self.pitch_bucket} out of range")
        if not 0.0 < self.amp <= 1.0:
            raise ValueError(f"amp {self.amp} out of range")
        if not (0.0 <= self.attack < 1.0 and 0.0 <= self.decay < 1.0
                and self.attack + self.decay <= 1.0):
            raise ValueError("envelope fractions out of range")
        if not 1 <= self.harmonics <= 3:
            raise ValueError("harmonics must be in [1, 3]")

    @property
    def f0(self) -> float:
        return pitch_hz(self.pitch_bucket)

    @property
    def class_id(self) -> int:
        return label_of(self.family, self.pitch_bucket)


def label_of(family, pitch_bucket: int) -> int:
    return int(family) * N_PITCH + int(pitch_bucket)


def family_of(class_id: int) -> tuple[Family, int]:
    if not 0 <= class_id < N_CLASSES:
        raise ValueError(f"class_id {class_id} out of range")
    return Family(class_id // N_PITCH), class_id % N_PITCH


def _envelope(spec: ClipSpec) -> np.ndarray:
    env = np.ones(CLIP_LEN)
    na = int(round(spec.attack * CLIP_LEN))
    nd = int(round(spec.decay * CLIP_LEN))
    if na > 0:
        env[:na] = np.arange(1, na + 1) / na
    if nd > 0:
        env[CLIP_LEN - nd:] = np.minimum(env[CLIP_LEN - nd:], np.arange(nd, 0, -1) / nd)
    return env


def _bandpass(x: np.ndarray, f0: float, q: float = 4.0) -> np.ndarray:
    # RBJ biquad, constant 0 dB peak gain
    w0 = 2.0 * np.pi * f0 / SAMPLE_RATE
    alpha = np.sin(w0) / (2.0 * q)
    b = np.array([alpha, 0.0, -alpha])
    a = np.array([1.0 + alpha, -2.0 * np.cos(w0), 1.0 - alpha])
    return sps.lfilter(b / a[0], a / a[0], x)


def synth_clip(spec: ClipSpec, seed: int) -> np.ndarray:
    """Render one clip of 5120 samples, peak-normalised to ``spec.amp``.

    Only NoiseBurst consumes ``seed``; tones and chirps start at phase 0.
    """
    t = np.arange(CLIP_LEN) / SAMPLE_RATE
    f0 = spec.f0
    if spec.family == Family.TONE:
        x = sum(np.sin(2.0 * np.pi * k * f0 * t) / k for k in range(1, spec.harmonics + 1))
    elif spec.family == Family.CHIRP:
        x = np.sin(2.0 * np.pi * (f0 * t + 0.5 * spec.sweep_rate * t * t))
    else:
        noise = PrngStream(seed).split("noise").normal(CLIP_LEN)
        x = _bandpass(noise, f0)
    x = x * _envelope(spec)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak * spec.amp
    return x


def random_spec(stream: PrngStream, family=None, pitch_bucket=None) -> ClipSpec:
    """Draw a clip spec.  Every field is drawn (even if fixed by the caller)
    so the stream position does not depend on stratification."""
    fam = int(stream.integers(0, 3))
    pb = int(stream.integers(0, N_PITCH))
    amp = float(stream.uniform(low=0.1, high=1.0))
    attack = float(stream.uniform(low=0.02, high=0.2))
    decay = float(stream.uniform(low=0.1, high=0.5))
    harmonics = int(stream.integers(1, 4))
    rel_sweep = float(stream.uniform(low=0.3, high=0.6))
    fam = Family(fam if family is None else family)
    pb = pb if pitch_bucket is None else int(pitch_bucket)
    return ClipSpec(
        family=fam,
        pitch_bucket=pb,
        amp=amp,
        attack=attack,
        decay=decay,
        harmonics=harmonics if fam == Family.TONE else 1,
        # upward sweep; ends below the next bucket's f0 (sqrt 2 apart)
        sweep_rate=rel_sweep * pitch_hz(pb) if fam == Family.CHIRP else 0.0,
    )


@dataclass
class Clip:
    waveform: np.ndarray
    label: int
    spec: ClipSpec
    seed: int


def make_corpus(n_clips: int, seed: int, stratified: bool = False) -> list[Clip]:
    """Deterministic labelled corpus.  Each clip has its own sub-stream, so
    clips can be rendered independently.  With ``stratified`` the class of
    clip ``i`` is ``i % 24``."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    root = PrngStream(seed).split("corpus")
    clips = []
    for i in range(n_clips):
        st = root.split(i)
        if stratified:
            fam, pb = family_of(i % N_CLASSES)
            spec = random_spec(st, fam, pb)
        else:
            spec = random_spec(st)
        clip_seed = int(st.integers(0, 2**63 - 1))
        clips.append(Clip(synth_clip(spec, clip_seed), spec.class_id, spec, clip_seed))
    return clips


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureConfig:
    frame_len: int = 320
    hop: int = 160
    n_bands: int = 32
    log_floor: float = 1e-8
    linear_max_hz: float = 500.0

    def n_frames(self, n_samples: int = CLIP_LEN) -> int:
        return 1 + (n_samples - self.frame_len) // self.hop

    @property
    def frame_rate(self) -> float:
        return SAMPLE_RATE / self.hop


def _warp(f, knee):
    f = np.asarray(f, dtype=np.float64)
    return np.where(f <= knee, f, knee * (1.0 + np.log(np.maximum(f, knee) / knee)))


def _unwarp(m, knee):
    m = np.asarray(m, dtype=np.float64)
    return np.where(m <= knee, m, knee * np.exp(m / knee - 1.0))


def band_edges(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """``n_bands + 2`` corner frequencies; band ``k`` rises from edge ``k``,
    peaks at ``k + 1`` and falls to ``k + 2``."""
    nyq = SAMPLE_RATE / 2.0
    pts = np.linspace(0.0, float(_warp(nyq, cfg.linear_max_hz)), cfg.n_bands + 2)
    return _unwarp(pts, cfg.linear_max_hz)


def band_centers(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return band_edges(cfg)[1:-1]


def filterbank(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Triangular weights, shape (n_bands, frame_len // 2 + 1)."""
    n_bins = cfg.frame_len // 2 + 1
    freqs = np.arange(n_bins) * SAMPLE_RATE / cfg.frame_len
    e = band_edges(cfg)
    fb = np.zeros((cfg.n_bands, n_bins))
    for k in range(cfg.n_bands):
        lo, c, hi = e[k], e[k + 1], e[k + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[k] = np.maximum(0.0, np.minimum(up, down))
    return fb


def extract_features(w, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log band energies, shape (T, n_bands).  Accepts a single waveform or a
    stack (N, 5120), in which case the result is (N, T, n_bands)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != CLIP_LEN:
        raise ValueError(f"waveform length {w.shape[-1]} != {CLIP_LEN}")
    T = cfg.n_frames(w.shape[-1])
    idx = np.arange(T)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]
    frames = w[..., idx] * sps.get_window("hann", cfg.frame_len)
    power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2
    energy = power @ filterbank(cfg).T
    return np.log(np.maximum(energy, cfg.log_floor))


def corpus_features(clips, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return extract_features(np.stack([c.waveform for c in clips]), cfg)


# ---------------------------------------------------------------------------
# corpus file
#
# header:  b"GACC" | version u8 | n_clips u32 | seed u64
# record:  label u8 | family u8 | pitch u8 | harmonics u8 | amp f64 | attack f64
#          | decay f64 | sweep_rate f64 | clip_seed u64 | 5120 x i16 PCM, all LE

CORPUS_MAGIC = b"GACC"
_HEAD = struct.Struct("<4sBIQ")
_REC = struct.Struct("<BBBBddddQ")


class CorpusFormatError(ValueError):
    pass


def to_pcm16(w: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(w) * 32767.0), -32768, 32767).astype("<i2")


def dump_corpus(clips: list[Clip], seed: int) -> bytes:
    parts = [_HEAD.pack(CORPUS_MAGIC, 1, len(clips), seed)]
    for c in clips:
        s = c.spec
        parts.append(_REC.pack(c.label, int(s.family), s.pitch_bucket, s.harmonics,
                               s.amp, s.attack, s.decay, s.sweep_rate, c.seed))
        parts.append(to_pcm16(c.waveform).tobytes())
    return b"".join(parts)


def load_corpus(data: bytes) -> tuple[list[Clip], int]:
    """Inverse of :func:`dump_corpus`; waveforms come back as PCM / 32767."""
    if len(data) < _HEAD.size:
        raise CorpusFormatError("truncated corpus header")
    magic, version, n, seed = _HEAD.unpack_from(data, 0)
    if magic != CORPUS_MAGIC or version != 1:
        raise CorpusFormatError("not a GACC corpus file")
    rec_size = _REC.size + 2 * CLIP_LEN
    if len(data) != _HEAD.size + n * rec_size:
        raise CorpusFormatError("corpus length does not match clip count")
    clips = []
    off = _HEAD.size
    for _ in range(n):
        label, fam, pb, harm, amp, att, dec, sweep, cseed = _REC.unpack_from(data, off)
        off += _REC.size
        pcm = np.frombuffer(data, dtype="<i2", count=CLIP_LEN, offset=off)
        off += 2 * CLIP_LEN
        try:
            spec = ClipSpec(Family(fam), pb, amp, att, dec, harm, sweep)
        except ValueError as exc:
            raise CorpusFormatError(str(exc)) from exc
        if spec.class_id != label:
            raise CorpusFormatError("label does not match clip spec")
        clips.append(Clip(pcm.astype(np.float64) / 32767.0, label, spec, cseed))
    return clips, seed
