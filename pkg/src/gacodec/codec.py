"""Bit-exact token bitstream, clip encode/decode pipelines and rate accounting.

Stream layout (little-endian)::

    magic "GACB" | version u8 | sample_rate u32 | hop u16 | K u16 | s u8
    | bits_per_token u8 | num_tokens u32                      (19 bytes)
    payload: tokens MSB-first at bits_per_token bits each, zero-padded to a byte
    crc32 u32 over header + payload (zlib polynomial 0xEDB88320, reflected)
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import signal
from .stage1 import Stage1Model, tokenize
from .stage2 import VelocityModel, decode_tokens

MAGIC = b"GACB"
VERSION = 1
_HEADER = struct.Struct("<4sBIHHBBI")
HEADER_BYTES = _HEADER.size
OVERHEAD_BITS = 8 * HEADER_BYTES
CRC_BYTES = 4


class BitstreamError(ValueError):
    pass


class FormatError(BitstreamError):
    pass


class CorruptionError(BitstreamError):
    pass


class TruncationError(BitstreamError):
    pass


def bits_per_token(K: int) -> int:
    """ceil(log2 K) for K >= 2."""
    if K < 2:
        raise ValueError("K must be >= 2")
    return (K - 1).bit_length()


@dataclass(frozen=True)
class BitstreamHeader:
    codebook_size: int
    downsample: int
    num_tokens: int
    sample_rate: int = signal.SAMPLE_RATE
    hop: int = 160
    version: int = VERSION

    def __post_init__(self):
        if not 2 <= self.codebook_size <= 0xFFFF:
            raise FormatError(f"codebook size {self.codebook_size} out of range")
        if self.downsample not in (1, 2, 4):
            raise FormatError(f"downsample {self.downsample} not in (1, 2, 4)")
        if self.sample_rate <= 0 or self.hop <= 0:
            raise FormatError("sample_rate and hop must be positive")

    @property
    def bits_per_token(self) -> int:
        return bits_per_token(self.codebook_size)

    @property
    def payload_bytes(self) -> int:
        return (self.num_tokens * self.bits_per_token + 7) // 8


@dataclass
class TokenStream:
    tokens: np.ndarray
    K: int
    s: int = 1
    frame_rate: float = signal.SAMPLE_RATE / 160

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).ravel()

    @property
    def tokens_per_second(self) -> float:
        return self.frame_rate / self.s

    def __eq__(self, other):
        return (isinstance(other, TokenStream) and self.K == other.K and self.s == other.s
                and np.array_equal(self.tokens, other.tokens))


def pack(ts: TokenStream, sample_rate: int = signal.SAMPLE_RATE, hop: int = 160) -> bytes:
    tokens = ts.tokens
    if tokens.size and (tokens.min() < 0 or tokens.max() >= ts.K):
        raise ValueError(f"token out of range [0, {ts.K})")
    h = BitstreamHeader(ts.K, ts.s, int(tokens.size), sample_rate, hop)
    w = h.bits_per_token
    head = _HEADER.pack(MAGIC, VERSION, sample_rate, hop, ts.K, ts.s, w, h.num_tokens)
    shifts = np.arange(w - 1, -1, -1)
    bits = ((tokens[:, None] >> shifts[None, :]) & 1).astype(np.uint8).ravel()
    payload = np.packbits(bits, bitorder="big").tobytes()
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body))


def unpack(data: bytes) -> tuple[BitstreamHeader, TokenStream]:
    data = bytes(data)
    if len(data) < HEADER_BYTES + CRC_BYTES:
        raise TruncationError(f"stream of {len(data)} bytes is shorter than header + crc")
    magic, version, sr, hop, K, s, w, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    h = BitstreamHeader(K, s, n, sr, hop, version)
    if w != h.bits_per_token:
        raise FormatError(f"bits_per_token {w} inconsistent with K={K}")
    expected = HEADER_BYTES + h.payload_bytes + CRC_BYTES
    if len(data) < expected:
        raise TruncationError(f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after stream")
    body = data[:-CRC_BYTES]
    (crc,) = struct.unpack("<I", data[-CRC_BYTES:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("CRC32 mismatch")
    payload = np.frombuffer(body, dtype=np.uint8, offset=HEADER_BYTES)
    bits = np.unpackbits(payload, bitorder="big")
    used = n * w
    if np.any(bits[used:]):
        raise FormatError("non-zero pad bits")
    weights = 1 << np.arange(w - 1, -1, -1, dtype=np.int64)
    tokens = bits[:used].reshape(n, w).astype(np.int64) @ weights if n else np.zeros(0, np.int64)
    if tokens.size and tokens.max() >= K:
        raise FormatError("decoded token >= K")
    return h, TokenStream(tokens, K, s, sr / hop)


def bitrate(h: BitstreamHeader) -> float:
    """Token bitrate in bits/s; header and CRC are not counted."""
    return (h.sample_rate / h.hop) / h.downsample * h.bits_per_token


def compression_ratio(h: BitstreamHeader, source_bits_per_second: float) -> float:
    if source_bits_per_second <= 0:
        raise ValueError("source rate must be positive")
    r = bitrate(h)
    if r == 0:
        raise ZeroDivisionError("zero bitrate")
    return source_bits_per_second / r


def rate_header(K: int, s: int, sample_rate: int = signal.SAMPLE_RATE, hop: int = 160):
    return BitstreamHeader(K, s, 0, sample_rate, hop)


# ---------------------------------------------------------------------------
# pipelines


def encode_clip(s1: Stage1Model, w, cfg: signal.FeatureConfig = signal.FeatureConfig()) -> bytes:
    """Waveform -> features -> latents -> tokens -> bytes."""
    f = signal.extract_features(w, cfg)
    tokens = tokenize(s1, f)
    return pack(TokenStream(tokens, s1.cfg.codebook_size, s1.cfg.downsample,
                            cfg.frame_rate), signal.SAMPLE_RATE, cfg.hop)


def decode_clip(s1: Stage1Model, v: VelocityModel, data: bytes, n_steps: int,
                seed: int) -> np.ndarray:
    """Bytes -> tokens -> code lookups -> Euler sampling -> (31, 32) features."""
    h, ts = unpack(data)
    if h.codebook_size != s1.cfg.codebook_size or h.downsample != s1.cfg.downsample:
        raise FormatError(
            f"stream has K={h.codebook_size}, s={h.downsample}; model expects "
            f"K={s1.cfg.codebook_size}, s={s1.cfg.downsample}")
    if ts.tokens.size != s1.cfg.n_blocks:
        raise FormatError(f"expected {s1.cfg.n_blocks} tokens, got {ts.tokens.size}")
    return decode_tokens(s1, v, ts.tokens, n_steps, seed)
