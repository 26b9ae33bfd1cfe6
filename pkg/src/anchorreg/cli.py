"""Command-line entry point: ``anchorreg {synth,mine,register,train,bench}``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 algorithmic failure. ``register`` reports a failed estimator with 3 and a
pair that produced too few feature matches to start with 4.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import formats, pipeline
from .config import ConfigError, RunConfig, load_config
from .errors import AlgorithmError, DivergedError, EmptySeedError

log = logging.getLogger("anchorreg")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_ALGORITHM = 3
EXIT_NO_SEEDS = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which means I/O here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag -> RunConfig key
_OVERRIDES = {
    "seed": "seed",
    "jobs": "jobs",
    "out": "out",
    "rre_thresh": "rre_thresh",
    "rte_thresh": "rte_thresh",
    "voxel": "voxel",
    "sparse_factor": "sparse_factor",
    "top_k": "top_k",
    "max_iters": "max_iters",
    "tau_c": "tau_c",
    "lambda_corr": "lambda_corr",
    "lambda_1": "lambda_1",
    "count": "count",
}


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", metavar="PATH", help="key = value file")
    g.add_argument("--seed", type=int, metavar="N")
    g.add_argument("--jobs", type=int, metavar="N")
    g.add_argument("--out", metavar="DIR")
    g.add_argument("--rre-thresh", type=float, metavar="DEG")
    g.add_argument("--rte-thresh", type=float, metavar="M")
    g.add_argument("--voxel", type=float, metavar="M")
    g.add_argument("--sparse-factor", type=float, metavar="F")
    g.add_argument("--top-k", type=int, metavar="N")
    g.add_argument("--max-iters", type=int, metavar="N")
    g.add_argument("--tau-c", type=float, metavar="M")
    g.add_argument("--lambda-corr", type=float, metavar="F")
    g.add_argument("--lambda-1", type=float, metavar="F")
    g.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any configuration key; repeatable",
    )
    g.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anchorreg", description="Unsupervised point-cloud registration toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic pair corpus")
    p.add_argument("--scans", metavar="DIR", help="directory of .bin/.ply scans (default: procedural scenes)")
    p.add_argument("--count", type=int, metavar="N")
    _common(p)

    p = sub.add_parser("mine", help="mine pseudo-labels for a corpus")
    p.add_argument("corpus", help="corpus directory or manifest.csv")
    p.add_argument("--head", metavar="FILE", help="teacher head (default: initial head)")
    _common(p)

    p = sub.add_parser("register", help="register two clouds and print the pose")
    p.add_argument("cloud_a")
    p.add_argument("cloud_b")
    p.add_argument("--head", metavar="FILE")
    p.add_argument("--report", metavar="FILE", help="write a one-row CSV with match statistics")
    _common(p)

    p = sub.add_parser("train", help="train a student head on mined pseudo-labels")
    p.add_argument("corpus")
    p.add_argument("labels", help="directory of .label files written by 'mine'")
    _common(p)

    p = sub.add_parser("bench", help="benchmark a head on a corpus with ground truth")
    p.add_argument("corpus")
    p.add_argument("--head", metavar="FILE")
    _common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, flag, None) for flag, key in _OVERRIDES.items()}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip().replace("-", "_")] = value.strip()
    return load_config(args.config, overrides)


def _head(args, cfg: RunConfig):
    path = getattr(args, "head", None)
    return formats.read_head(path) if path else pipeline.initial_head(cfg)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> int:
    scans = []
    if args.scans:
        d = Path(args.scans)
        if not d.is_dir():
            raise OSError(f"scan directory {d} not found")
        scans = [p for p in d.iterdir() if p.suffix.lower() in (".bin", ".ply")]
        if not scans:
            raise OSError(f"no .bin or .ply scans in {d}")
    written, skipped = pipeline.synth_corpus(cfg.out, cfg, scans)
    log.info("wrote %d pairs (%d skipped) to %s", written, skipped, cfg.out)
    return EXIT_OK


def cmd_mine(args, cfg: RunConfig) -> int:
    records = pipeline.read_manifest(args.corpus)
    head = _head(args, cfg)
    rows = pipeline.mine_corpus(records, cfg, head)
    out = Path(cfg.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for row in rows:
        if row.label is not None:
            formats.write_pseudo_labels(out / "labels" / f"{row.pair_id}.label", [row.label])
    formats.write_csv(
        out / "mining_report.csv", "mining_report", formats.MINING_HEADER, [r.csv_row() for r in rows]
    )
    n_ok = sum(r.status == "ok" for r in rows)
    log.info("mined %d of %d pairs", n_ok, len(rows))
    return EXIT_OK if n_ok or not rows else EXIT_ALGORITHM


def cmd_register(args, cfg: RunConfig) -> int:
    P = formats.read_cloud(args.cloud_a)
    Q = formats.read_cloud(args.cloud_b)
    head = _head(args, cfg)
    try:
        res = pipeline.register_clouds(P, Q, head, cfg)
    except EmptySeedError as err:
        print(f"anchorreg: {err}", file=sys.stderr)
        return EXIT_NO_SEEDS
    print(formats.format_pose(res.pose))
    if args.report:
        n_in = int((res.correspondences.labels == 1).sum())
        formats.write_csv(
            args.report, "register", ("n_points_a", "n_points_b", "n_matches", "n_inliers"),
            [(len(res.P), len(res.Q), len(res.correspondences), n_in)],
        )
    return EXIT_OK


def _read_labels(label_dir) -> dict:
    d = Path(label_dir)
    if not d.is_dir():
        raise OSError(f"label directory {d} not found")
    labels = {}
    for path in sorted(d.glob("*.label")):
        for lb in formats.read_pseudo_labels(path):
            labels[lb.pair_id] = lb
    return labels


def cmd_train(args, cfg: RunConfig) -> int:
    records = pipeline.read_manifest(args.corpus)
    labels = _read_labels(args.labels)
    usable = [r for r in records if r.pair_id in labels]
    if not usable:
        raise OSError(f"no pseudo-labels in {args.labels} match the corpus")
    examples = [pipeline.training_example(r, labels[r.pair_id], cfg) for r in usable]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        head, logs = pipeline.train_head(examples, cfg)
    except DivergedError as err:
        formats.write_training_log(out / "training_log.csv", getattr(err, "partial_log", []))
        raise
    formats.write_head(out / "head.bin", head)
    formats.write_training_log(out / "training_log.csv", logs)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    records = pipeline.read_manifest(args.corpus)
    head = _head(args, cfg)
    rows, summary = pipeline.bench_corpus(records, cfg, head)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_csv(out / "pairs.csv", "bench_pairs", formats.PAIRS_HEADER, [r.csv_row() for r in rows])
    if summary is None:
        log.error("no pair could be scored")
        return EXIT_ALGORITHM
    formats.write_summary(out / "summary.csv", summary)
    log.info("mRR %.3f over %d pairs", summary.mrr, sum(summary.n_per_bin.values()))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "mine": cmd_mine,
    "register": cmd_register,
    "train": cmd_train,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
    except ConfigError as err:
        print(f"anchorreg: configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"anchorreg: cannot read configuration: {err}", file=sys.stderr)
        return EXIT_IO
    try:
        return COMMANDS[args.command](args, cfg)
    except (OSError, formats.FormatError) as err:
        print(f"anchorreg: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except AlgorithmError as err:
        print(f"anchorreg: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ALGORITHM


if __name__ == "__main__":
    sys.exit(main())
