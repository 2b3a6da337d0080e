# The capacity bookkeeping: eta = D (H - L) / N per record, a pooled eta,
# and how far each record sits from H = R + eta N / D.

from gacodec import ic1

rows = [
    # tier, N params, D tokens, H, L (bits/token), bitrate
    ("small", 2_888, 4_960_000, 45.8, 12.4, 175.0),
    ("medium", 11_744, 4_960_000, 45.8, 6.9, 175.0),
    ("large", 57_888, 4_960_000, 45.8, 4.5, 175.0),
    ("small", 2_984, 9_920_000, 22.9, 12.3, 350.0),
    ("large", 58_272, 9_920_000, 22.9, 4.4, 350.0),
]
recs = [ic1.CapacityRecord(N=N, D=D, H=H, L=L, R=7.0, tier=t, K=128,
                           s=2 if bps == 175.0 else 1, seed=1, bitrate_bps=bps,
                           metric=L / 100)
        for t, N, D, H, L, bps in rows]

for r in recs:
    print(f"{r.tier:<7} {r.bitrate_bps:5.0f} bps  eta = {ic1.capacity_fit(r):12.1f}")

print()
print(ic1.tradeoff_table(recs).to_text())
