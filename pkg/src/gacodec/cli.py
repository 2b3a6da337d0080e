"""``gac`` command line: data generation, training, coding, evaluation and
the scaling experiment.

Exit codes: 0 success, 2 config error, 3 data/format error, 4 training
divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, evalkit, ic1, signal
from .config import RunConfig, defaults_text
from .ic1 import ConfigError
from .stage1 import Stage1Model, TrainingDiverged, train_stage1
from .stage2 import Stage2Config, VelocityModel, train_stage2
from .tensorkit import CheckpointError

log = logging.getLogger("gac")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


class DataError(Exception):
    pass


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc


def _write(path, data: bytes | str):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        p.write_text(data)
    else:
        p.write_bytes(data)


def _load_corpus(path):
    clips, seed = signal.load_corpus(_read(path))
    return clips, signal.corpus_features(clips)


def _train_split(clips, cfg: RunConfig):
    labels = np.array([c.label for c in clips])
    return evalkit.stratified_split(labels, cfg.eval.split_seed)


def _load_stage1(path) -> Stage1Model:
    sidecar = Path(str(path) + ".json")
    from .stage1 import Stage1Config
    try:
        cfg = Stage1Config(**json.loads(_read(sidecar)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad stage-1 sidecar {sidecar}: {exc}") from exc
    return Stage1Model.from_bytes(_read(path), cfg)


def _load_stage2(path) -> VelocityModel:
    sidecar = Path(str(path) + ".json")
    try:
        cfg = Stage2Config(**json.loads(_read(sidecar)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad stage-2 sidecar {sidecar}: {exc}") from exc
    return VelocityModel.from_bytes(_read(path), cfg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig):
    clips = signal.make_corpus(cfg.corpus.n_clips, cfg.seed, cfg.corpus.stratified)
    _write(args.corpus_out, signal.dump_corpus(clips, cfg.seed))
    log.info("wrote %d clips to %s", len(clips), args.corpus_out)


def cmd_train_stage1(args, cfg: RunConfig):
    clips, feats = _load_corpus(args.corpus)
    train, _ = _train_split(clips, cfg)
    m, tlog = train_stage1([clips[i] for i in train], cfg.stage1, cfg.seed,
                           features=feats[train], log_every=args.log_every)
    _write(args.out, m.to_bytes())
    _write(str(args.out) + ".json", m.config_json())
    log.info("stage-1 done: corpus perplexity %.2f, info %.4f", tlog.final_perplexity,
             tlog.final_info)


def cmd_train_stage2(args, cfg: RunConfig):
    clips, feats = _load_corpus(args.corpus)
    s1 = _load_stage1(args.stage1)
    train, _ = _train_split(clips, cfg)
    s2cfg = cfg.stage2
    if args.tier:
        s2cfg = Stage2Config(**{**s2cfg.__dict__, "tier": args.tier})
    v, tlog = train_stage2(None, s1, s2cfg, features=feats[train], log_every=args.log_every)
    _write(args.out, v.to_bytes())
    _write(str(args.out) + ".json", v.config_json())
    log.info("stage-2 done: final loss %.4f (%.3f bits/token), plateaued=%s", tlog.final_loss,
             tlog.L_bits_per_token, tlog.plateaued)


def cmd_encode(args, cfg: RunConfig):
    clips, _ = signal.load_corpus(_read(args.corpus))
    if not 0 <= args.input < len(clips):
        raise DataError(f"clip index {args.input} out of range [0, {len(clips)})")
    s1 = _load_stage1(args.stage1)
    data = codec.encode_clip(s1, clips[args.input].waveform)
    _write(args.out, data)
    h, _ = codec.unpack(data)
    log.info("clip %d -> %d tokens, %d bytes, %.0f bps", args.input, h.num_tokens, len(data),
             codec.bitrate(h))


def features_csv(f: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"band_{k}" for k in range(f.shape[1])])
    for row in f:
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def cmd_decode(args, cfg: RunConfig):
    s1 = _load_stage1(args.stage1)
    v = _load_stage2(args.stage2)
    feats = codec.decode_clip(s1, v, _read(args.input), args.steps, args.seed)
    _write(args.features_out, features_csv(feats))


def cmd_eval(args, cfg: RunConfig):
    clips, feats = _load_corpus(args.corpus)
    s1 = _load_stage1(args.stage1)
    v = _load_stage2(args.stage2)
    ctx = ic1.EvalContext(feats, [c.label for c in clips], cfg.eval.split_seed,
                          cfg.eval.judge_seed, cfg.eval.mmd_frames, cfg.eval.judge_steps)
    report, _ = ic1.evaluate_decoder(ctx, s1, v, cfg.eval.ode_steps, v.cfg.seed)
    bps = codec.bitrate(codec.rate_header(s1.cfg.codebook_size, s1.cfg.downsample))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tier", "K", "s", "seed", "bitrate_bps", "lsd", "mmd", "judge_accuracy",
                "perplexity"])
    w.writerow([v.cfg.tier, s1.cfg.codebook_size, s1.cfg.downsample, v.cfg.seed, repr(bps),
                repr(report.lsd), repr(report.mmd), repr(report.judge_accuracy),
                repr(report.perplexity)])
    _write(args.csv_out, buf.getvalue())
    log.info("eval: lsd %.3f dB, mmd %.5f, judge %.3f, perplexity %.1f", report.lsd,
             report.mmd, report.judge_accuracy, report.perplexity)


def cmd_scaling(args, cfg: RunConfig):
    grid_path = Path(args.grid)
    try:
        doc = json.loads(grid_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {grid_path}: {exc}") from exc
    if "corpus" not in doc:
        raise ConfigError("grid needs a 'corpus' path")
    corpus_path = Path(doc["corpus"])
    if not corpus_path.is_absolute():
        corpus_path = grid_path.parent / corpus_path
    grid = ic1.ScalingGrid.from_json(doc, base=grid_path.parent)
    clips, _ = signal.load_corpus(_read(corpus_path))
    _, report = ic1.run_scaling_experiment(grid, clips, args.out_dir, jobs=args.jobs)
    print(report)


def cmd_ic1_fit(args, cfg: RunConfig):
    try:
        recs = ic1.read_records_csv(Path(args.records).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {args.records}: {exc.strerror}") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad records file: {exc}") from exc
    print(ic1.tradeoff_table(recs).to_text())


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gac", description="Desk-scale generative audio compression.",
        epilog=defaults_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="step logs on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, config=True):
        sp = sub.add_parser(name, help=help_, epilog=defaults_text() if config else None,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        if config:
            sp.add_argument("--config", help="run config JSON (defaults below)")
        sp.add_argument("--log-every", type=int, default=0, help="log every N training steps")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the synthetic corpus")
    sp.add_argument("--corpus-out", required=True)

    sp = add("train-stage1", cmd_train_stage1, "train encoder, codebook and label head")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-stage2", cmd_train_stage2, "train the flow decoder on a frozen stage 1")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--tier", choices=["small", "medium", "large"])
    sp.add_argument("--out", required=True)

    sp = add("encode", cmd_encode, "encode one corpus clip to a .gacb stream", config=False)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--in", dest="input", type=int, required=True, help="clip index")
    sp.add_argument("--out", required=True)

    sp = add("decode", cmd_decode, "decode a .gacb stream to features", config=False)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--steps", type=int, default=32)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--features-out", required=True)

    sp = add("eval", cmd_eval, "score a decoder on the held-out split")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--csv-out", required=True)

    sp = add("scaling", cmd_scaling, "run the tier x bitrate x seed grid", config=False)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("ic1-fit", cmd_ic1_fit, "print the capacity table of a records.csv", config=False)
    sp.add_argument("--records", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.log_every else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(getattr(args, "config", None))
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"gac: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, codec.BitstreamError, signal.CorpusFormatError, CheckpointError) as exc:
        print(f"gac: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"gac: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
