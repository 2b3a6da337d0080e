# Token streams on the wire: 19-byte header, MSB-first payload, CRC32.

import numpy as np

from gacodec import codec

rng = np.random.default_rng(0)
ts = codec.TokenStream(rng.integers(0, 128, 16), K=128, s=2)
blob = codec.pack(ts)
h, back = codec.unpack(blob)
print(f"{len(ts.tokens)} tokens x {h.bits_per_token} bits -> {len(blob)} bytes "
      f"({codec.HEADER_BYTES} header + {h.payload_bytes} payload + 4 crc)")
print("round trip exact:", back == ts)

for K, s in ((128, 2), (2048, 2), (128, 1), (64, 1)):
    hr = codec.rate_header(K, s)
    print(f"K={K:5d} s={s}: {codec.bitrate(hr):6.1f} bps, "
          f"{codec.compression_ratio(hr, 32000 * 16):7.1f}x against 32 kHz 16-bit PCM")

# every single-bit flip is caught
caught = 0
for bit in range(8 * len(blob)):
    bad = bytearray(blob)
    bad[bit // 8] ^= 1 << (bit % 8)
    try:
        codec.unpack(bytes(bad))
    except codec.BitstreamError as exc:
        caught += 1
        last = type(exc).__name__
print(f"{caught}/{8 * len(blob)} flips rejected (e.g. {last})")

try:
    codec.unpack(blob[:-1])
except codec.TruncationError as exc:
    print("truncated:", exc)
