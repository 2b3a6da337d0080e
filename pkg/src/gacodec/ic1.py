"""Information-capacity bookkeeping and the frozen-encoder scaling experiment.

A :class:`CapacityRecord` holds one (N, D, H, L, R) tuple; ``eta = D (H - L) / N``
and the rate/computation balance is checked as ``H - R - eta N / D``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, evalkit, signal
from .stage1 import Stage1Config, Stage1Model, codebook_perplexity, tokenize
from .stage2 import Stage2Config, TIERS, decode_tokens, train_stage2

log = logging.getLogger(__name__)

BITS_PER_PARAM = 64
CSV_FIELDS = ["tier", "K", "s", "seed", "N_params", "D_tokens", "R_bps", "L_bits",
              "H_bits", "eta", "lsd", "mmd", "judge_acc", "perplexity"]


class ConfigError(ValueError):
    pass


@dataclass
class CapacityRecord:
    N: float  # decoder scalar parameter count
    D: float  # training tokens consumed
    H: float  # bits / token
    L: float  # bits / token
    R: float  # bits / token
    tier: str = ""
    K: int = 0
    s: int = 0
    seed: int = 0
    bitrate_bps: float = 0.0
    metric: float = float("nan")  # quality metric used for ranking (lower is better)

    def __post_init__(self):
        if not (self.N > 0 and self.D > 0):
            raise ValueError("N and D must be positive")
        if self.H < 0 or self.L < 0:
            raise ValueError("H and L must be non-negative")


def capacity_fit(r: CapacityRecord) -> float:
    if r.N == 0 or r.D == 0:
        raise ZeroDivisionError("N and D must be non-zero")
    return r.D * (r.H - r.L) / r.N


def entropy_estimate(features, downsample: int = 1) -> float:
    """Gaussian per-band entropy proxy in bits per token, floored at zero.

    Band variances are taken over every frame; bands with variance below
    1e-12 are skipped.
    """
    f = np.asarray(features, float)
    flat = f.reshape(-1, f.shape[-1])
    var = flat.var(axis=0)
    keep = var >= 1e-12
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} bands with degenerate variance")
    per_frame = float(np.sum(0.5 * np.log2(2 * math.pi * math.e * var[keep])))
    return max(0.0, per_frame * downsample)


@dataclass
class TradeoffTable:
    rows: list[dict]
    eta_pooled: float
    rankings: dict[float, list[str]] = field(default_factory=dict)

    def to_text(self) -> str:
        out = [f"pooled eta (median, per parameter): {self.eta_pooled:.6g}",
               f"pooled eta (per bit):               {self.eta_pooled / BITS_PER_PARAM:.6g}",
               "",
               f"{'tier':>8} {'K':>6} {'s':>3} {'seed':>4} {'R':>6} {'N':>9} {'L':>9} "
               f"{'eta':>12} {'residual':>12}"]
        for r in self.rows:
            out.append(f"{r['tier']:>8} {r['K']:>6} {r['s']:>3} {r['seed']:>4} {r['R']:>6g} "
                       f"{r['N']:>9g} {r['L']:>9.4f} {r['eta']:>12.6g} {r['residual']:>12.6g}")
        if self.rankings:
            out.append("")
            for bps, tiers in sorted(self.rankings.items()):
                out.append(f"{bps:g} bps: " + " > ".join(tiers))
        return "\n".join(out)


def tradeoff_table(records: list[CapacityRecord]) -> TradeoffTable:
    """Per-record eta and the residual of H = R + eta N / D at the pooled
    (median) eta, plus a per-bitrate ranking of tiers by mean metric."""
    if len(records) < 2:
        raise ValueError("need at least two records")
    etas = [capacity_fit(r) for r in records]
    pooled = statistics.median(etas)
    rows = []
    for r, eta in zip(records, etas):
        rows.append({
            "tier": r.tier, "K": r.K, "s": r.s, "seed": r.seed, "R": r.R, "N": r.N,
            "L": r.L, "eta": eta, "eta_per_bit": eta / BITS_PER_PARAM,
            "residual": r.H - r.R - pooled * r.N / r.D,
        })
    rankings = {}
    by_rate: dict[float, dict[str, list[float]]] = {}
    for r in records:
        if r.tier and math.isfinite(r.metric):
            by_rate.setdefault(r.bitrate_bps, {}).setdefault(r.tier, []).append(r.metric)
    for bps, tiers in by_rate.items():
        rankings[bps] = sorted(tiers, key=lambda t: (np.mean(tiers[t]), t))
    return TradeoffTable(rows, pooled, rankings)


# ---------------------------------------------------------------------------
# scaling experiment


@dataclass
class BitratePoint:
    K: int
    s: int
    stage1: str  # checkpoint path; config sidecar at <path>.json

    @property
    def bps(self) -> float:
        return codec.bitrate(codec.rate_header(self.K, self.s))


@dataclass
class ScalingGrid:
    points: list[BitratePoint]
    tiers: list[str] = field(default_factory=lambda: ["small", "medium", "large"])
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    steps: int = 20000
    batch_size: int = 8
    lr: float = 1e-3
    ode_steps: int = 32
    split_seed: int = 0
    judge_seed: int = 0
    mmd_frames: int = 2000

    def __post_init__(self):
        for t in self.tiers:
            if t not in TIERS:
                raise ConfigError(f"unknown tier {t!r}")
        if not self.points:
            raise ConfigError("grid has no bitrate points")

    @classmethod
    def from_json(cls, doc: dict, base: Path | None = None) -> "ScalingGrid":
        doc = dict(doc)
        allowed = set(cls.__dataclass_fields__) | {"corpus"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        doc.pop("corpus", None)
        pts = []
        for p in doc.pop("points", []):
            path = Path(p["stage1"])
            if base is not None and not path.is_absolute():
                path = base / path
            pts.append(BitratePoint(int(p["K"]), int(p["s"]), str(path)))
        return cls(points=pts, **doc)

    def cells(self):
        for p in self.points:
            for tier in self.tiers:
                for seed in self.seeds:
                    yield p, tier, seed


def load_stage1(path: str | Path) -> Stage1Model:
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if not path.exists() or not sidecar.exists():
        raise ConfigError(f"missing stage-1 checkpoint or sidecar: {path}")
    cfg = Stage1Config(**json.loads(sidecar.read_text()))
    return Stage1Model.from_bytes(path.read_bytes(), cfg)


class EvalContext:
    """Data shared by all cells: features, split, judge, reference frames."""

    def __init__(self, features, labels, split_seed=0, judge_seed=0, mmd_frames=2000,
                 judge_steps=3000):
        self.features = np.asarray(features, float)
        self.labels = np.asarray(labels)
        self.train, self.test = evalkit.stratified_split(self.labels, split_seed)
        self.judge = evalkit.train_judge(self.features[self.train], self.labels[self.train],
                                         judge_seed, steps=judge_steps)
        self.judge_gt = evalkit.judge_accuracy(self.judge, self.features[self.test],
                                               self.labels[self.test])
        ref = self.features[self.test].reshape(-1, self.features.shape[-1])
        self.frame_pick = evalkit_pick(len(ref), mmd_frames, split_seed)
        self.ref_frames = ref[self.frame_pick]

    @classmethod
    def for_grid(cls, clips, grid: ScalingGrid) -> "EvalContext":
        return cls(signal.corpus_features(clips), [c.label for c in clips], grid.split_seed,
                   grid.judge_seed, grid.mmd_frames)


def evalkit_pick(n: int, k: int, seed: int) -> np.ndarray:
    from .tensorkit import PrngStream
    if n <= k:
        return np.arange(n)
    return np.sort(PrngStream(seed).split("mmd_pick").permutation(n)[:k])


def evaluate_decoder(ctx: EvalContext, s1: Stage1Model, v, ode_steps: int, seed: int):
    """Decode every held-out clip and score it.  Returns (MetricReport, decoded)."""
    test_feats = ctx.features[ctx.test]
    tokens = tokenize(s1, test_feats)
    decoded = np.stack([
        decode_tokens(s1, v, tokens[i], ode_steps, _decode_seed(seed, int(clip)))
        for i, clip in enumerate(ctx.test)])
    frames = decoded.reshape(-1, decoded.shape[-1])[ctx.frame_pick]
    report = evalkit.MetricReport(
        lsd=float(np.mean([evalkit.lsd(a, b) for a, b in zip(test_feats, decoded)])),
        mmd=evalkit.mmd_frames(frames, ctx.ref_frames, paired=True),
        judge_accuracy=evalkit.judge_accuracy(ctx.judge, decoded, ctx.labels[ctx.test]),
        perplexity=codebook_perplexity(tokens, s1.cfg.codebook_size),
    )
    return report, decoded


def _decode_seed(seed: int, clip: int) -> int:
    return seed * 1_000_003 + clip


def run_cell(ctx: EvalContext, grid: ScalingGrid, point: BitratePoint, tier: str,
             seed: int) -> dict:
    s1 = load_stage1(point.stage1)
    if (s1.cfg.codebook_size, s1.cfg.downsample) != (point.K, point.s):
        raise ConfigError(f"checkpoint {point.stage1} is K={s1.cfg.codebook_size}, "
                          f"s={s1.cfg.downsample}, grid says K={point.K}, s={point.s}")
    cfg = Stage2Config(tier=tier, steps=grid.steps, batch_size=grid.batch_size, lr=grid.lr,
                       ode_steps=grid.ode_steps, seed=seed)
    train_feats = ctx.features[ctx.train]
    try:
        v, tlog = train_stage2(None, s1, cfg, features=train_feats)
    except Exception as exc:
        raise RuntimeError(f"cell tier={tier} K={point.K} s={point.s} seed={seed}: {exc}") from exc
    report, _ = evaluate_decoder(ctx, s1, v, grid.ode_steps, seed)
    H = entropy_estimate((train_feats - v.feat_mean) / v.feat_std, point.s)
    rec = CapacityRecord(N=v.n_params, D=tlog.tokens_seen, H=H, L=tlog.L_bits_per_token,
                         R=codec.bits_per_token(point.K), tier=tier, K=point.K, s=point.s,
                         seed=seed, bitrate_bps=point.bps, metric=report.mmd)
    log.info("cell %s K=%d s=%d seed=%d mmd=%.5f lsd=%.2f judge=%.3f", tier, point.K,
             point.s, seed, report.mmd, report.lsd, report.judge_accuracy)
    return {
        "tier": tier, "K": point.K, "s": point.s, "seed": seed,
        "N_params": v.n_params, "D_tokens": tlog.tokens_seen, "R_bps": point.bps,
        "L_bits": tlog.L_bits_per_token, "H_bits": H, "eta": capacity_fit(rec),
        "lsd": report.lsd, "mmd": report.mmd, "judge_acc": report.judge_accuracy,
        "perplexity": report.perplexity, "plateaued": tlog.plateaued,
        "judge_gt": ctx.judge_gt,
    }


_WORKER_CTX = None


def _worker_init(clips, grid):
    global _WORKER_CTX
    _WORKER_CTX = EvalContext.for_grid(clips, grid)


def _worker_cell(args):
    grid, point, tier, seed = args
    return run_cell(_WORKER_CTX, grid, point, tier, seed)


def run_scaling_experiment(grid: ScalingGrid, clips, out_dir: str | Path | None = None,
                           jobs: int = 1):
    """Train and score every (point, tier, seed) cell.

    Returns ``(rows, report_markdown)``; with ``out_dir`` also writes
    ``records.csv`` and ``report.md``.  Rows come back in grid order
    whatever ``jobs`` is.
    """
    for p in grid.points:
        load_stage1(p.stage1)
    cells = list(grid.cells())
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_worker_init,
                                 initargs=(clips, grid)) as pool:
            rows = list(pool.map(_worker_cell, [(grid, p, t, s) for p, t, s in cells]))
    else:
        ctx = EvalContext.for_grid(clips, grid)
        rows = [run_cell(ctx, grid, p, t, s) for p, t, s in cells]
    report = scaling_report(rows, grid, judge_gt=rows[0]["judge_gt"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "records.csv").write_text(records_csv(rows))
        (out / "report.md").write_text(report)
    return rows, report


def records_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_records_csv(text: str) -> list[CapacityRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_FIELDS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    recs = []
    for row in reader:
        K, s = int(row["K"]), int(row["s"])
        recs.append(CapacityRecord(
            N=float(row["N_params"]), D=float(row["D_tokens"]), H=float(row["H_bits"]),
            L=float(row["L_bits"]), R=float(codec.bits_per_token(K)), tier=row["tier"],
            K=K, s=s, seed=int(row["seed"]), bitrate_bps=float(row["R_bps"]),
            metric=float(row["mmd"])))
    return recs


def cell_stats(rows, metric: str):
    """{(bps, tier): (mean, sd)} over seeds."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["R_bps"], r["tier"]), []).append(r[metric])
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
            for k, v in groups.items()}


def scaling_report(rows, grid: ScalingGrid, judge_gt: float | None = None) -> str:
    rates = sorted({r["R_bps"] for r in rows})
    tiers = [t for t in grid.tiers]
    lines = ["# Scaling experiment", "",
             f"Tiers {', '.join(tiers)}; seeds {grid.seeds}; {grid.steps} steps per cell; "
             "identical frozen stage-1 encoder per bitrate.", ""]
    for metric, better in (("mmd", "lower"), ("lsd", "lower"), ("judge_acc", "higher")):
        st = cell_stats(rows, metric)
        lines += [f"## {metric} (mean ± sd over seeds, {better} is better)", "",
                  "| bitrate (bps) | " + " | ".join(tiers) + " |",
                  "|---" * (len(tiers) + 1) + "|"]
        for bps in rates:
            cells = [f"{st[(bps, t)][0]:.5g} ± {st[(bps, t)][1]:.2g}" for t in tiers]
            lines.append(f"| {bps:g} | " + " | ".join(cells) + " |")
        lines.append("")
    # min-max normalised quality per metric, 1 = best cell
    st = cell_stats(rows, "mmd")
    vals = [v[0] for v in st.values()]
    lo, hi = min(vals), max(vals)
    lines += ["## normalised quality (min-max over cells of mean MMD, 1 = best)", "",
              "| bitrate (bps) | " + " | ".join(tiers) + " |",
              "|---" * (len(tiers) + 1) + "|"]
    for bps in rates:
        q = [1.0 - (st[(bps, t)][0] - lo) / (hi - lo) if hi > lo else 1.0 for t in tiers]
        lines.append(f"| {bps:g} | " + " | ".join(f"{x:.3f}" for x in q) + " |")
    lines.append("")
    trend = scaling_trend(rows, tiers)
    lines += ["## trend checks", "",
              f"- tier comparisons with non-increasing mean MMD: {trend['holds']}"
              f" of {trend['total']}"]
    if trend["cross"] is not None:
        verdict = "pass" if trend["cross"] else "warn"
        lines.append(f"- largest tier at lowest bitrate vs smallest tier at highest bitrate: "
                     f"{verdict}")
    if judge_gt is not None:
        lines.append(f"- judge accuracy on ground-truth held-out features: {judge_gt:.4f}")
    flagged = [r for r in rows if not r.get("plateaued", True)]
    for r in flagged:
        lines.append(f"- not plateaued (>1% change over last 2000 steps): {r['tier']} "
                     f"K={r['K']} s={r['s']} seed={r['seed']}")
    recs = [CapacityRecord(N=r["N_params"], D=r["D_tokens"], H=r["H_bits"], L=r["L_bits"],
                           R=codec.bits_per_token(r["K"]), tier=r["tier"], K=r["K"], s=r["s"],
                           seed=r["seed"], bitrate_bps=r["R_bps"], metric=r["mmd"])
            for r in rows]
    if len(recs) >= 2:
        lines += ["", "## capacity table", "", "```", tradeoff_table(recs).to_text(), "```"]
    return "\n".join(lines) + "\n"


def scaling_trend(rows, tiers: list[str]):
    """Pairwise tier comparisons of mean MMD at each bitrate.

    Every ordered pair (smaller tier, larger tier) counts once per bitrate;
    it holds when the larger tier's mean MMD is not above the smaller's.
    ``cross`` compares the largest tier at the lowest rate with the smallest
    tier at the highest rate.
    """
    st = cell_stats(rows, "mmd")
    rates = sorted({r["R_bps"] for r in rows})
    holds = total = 0
    for bps in rates:
        for i in range(len(tiers)):
            for j in range(i + 1, len(tiers)):
                total += 1
                holds += st[(bps, tiers[j])][0] <= st[(bps, tiers[i])][0]
    cross = None
    if len(rates) >= 2 and len(tiers) >= 2:
        cross = st[(rates[0], tiers[-1])][0] <= st[(rates[-1], tiers[0])][0]
    return {"holds": holds, "total": total, "cross": cross}
