"""Command-line entry point: ``nam <subcommand> --manifest run.ini``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric/training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from . import pipeline as pl
from .core_math import NoActiveViewError, ShapeError
from .evaluation import MODES
from .ingest import IngestError
from .training import CheckpointError, TrainingError, load_checkpoint
from .views import ViewParseError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("nam")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", "-m", help="run manifest (INI)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--strict", action="store_true",
                        help="single-threaded, fixed-order reductions")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any manifest value")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="nam", description="Attentive multiview item similarity")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ingest", parents=[common], help="parse inputs, write catalog/baskets/views")
    sub.add_parser("train-cf", parents=[common], help="item2vec pretraining of the CF view")
    sub.add_parser("train-phase1", parents=[common], help="per-view tower training")
    sub.add_parser("train-phase2", parents=[common], help="attentive multiview training")
    p = sub.add_parser("split-cold", parents=[common], help="simulate a cold catalog")
    p.add_argument("--fraction", type=float)
    p = sub.add_parser("evaluate", parents=[common], help="HR@K / MRR@K report")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=MODES, default="nam")
    p.add_argument("--k", help='K list, e.g. "1-20" or "10,20"')
    p.add_argument("--no-split", action="store_true", help="ignore an existing cold split")
    p = sub.add_parser("recommend", parents=[common], help="top-k items for one query")
    p.add_argument("item")
    p.add_argument("--checkpoint")
    p.add_argument("--top-k", "--k", dest="top_k", type=int, default=10)
    p.add_argument("--mode", choices=MODES, default="nam")
    p = sub.add_parser("cross-validate", parents=[common], help="k-fold full pipeline")
    p.add_argument("--mode", choices=MODES, default="nam")
    p.add_argument("--k", help="K list")
    p.add_argument("--fraction", type=float)
    p.add_argument("--no-cold", action="store_true")
    p = sub.add_parser("selftest", parents=[common], help="gradient and invariant checks")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    return parser


def _manifest(args):
    if not args.manifest:
        raise _UsageError("--manifest is required for this command")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise _UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key] = value
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out:
        overrides["run.out"] = str(Path(args.out).resolve())
    if getattr(args, "k", None):
        overrides["eval.k"] = args.k
    if getattr(args, "fraction", None) is not None:
        overrides["eval.fraction"] = args.fraction
    return pl.Manifest.load(args.manifest, overrides)


class _UsageError(Exception):
    pass


def _thread_limit(args):
    limit = 1 if args.strict else args.threads
    if not limit:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def run(args) -> int:
    cmd = args.command
    if cmd == "selftest":
        from .diagnostics import selftest
        rep = selftest(instances=args.instances, seed=args.seed or 0,
                       corrupt=args.corrupt_backward)
        for line in rep.lines():
            print(line)
        print("selftest:", "PASS" if rep.ok else "FAIL")
        return EXIT_OK if rep.ok else EXIT_NUMERIC

    m = _manifest(args)
    m.out.mkdir(parents=True, exist_ok=True)
    if cmd == "ingest":
        counts = pl.ingest(m)
        for k, v in sorted(counts.items()):
            print(f"{k:>16}: {v}")
    elif cmd == "split-cold":
        split = pl.split_cold(m, args.fraction)
        print(f"warm items: {len(split.warm_items)}  cold items: {len(split.cold_items)}  "
              f"seed: {split.seed}")
    elif cmd == "train-cf":
        model = pl.train_cf(m)
        print(f"item2vec: {int(model.seen.sum())} items, dim {model.d}, "
              f"final loss {model.loss_trace[-1] if model.loss_trace else float('nan'):.5f}")
    elif cmd == "train-phase1":
        _, digest = pl.run_phase1(m)
        print(f"phase1 checkpoint {m.out / 'phase1.ckpt'} sha256={digest}")
    elif cmd == "train-phase2":
        _, digest = pl.run_phase2(m)
        print(f"phase2 checkpoint {m.out / 'phase2.ckpt'} sha256={digest}")
    elif cmd == "evaluate":
        rep = pl.run_evaluate(m, args.checkpoint, args.mode, not args.no_split)
        print(rep.table())
        if rep.no_common_view:
            print(f"({rep.no_common_view} pairs without a common view counted as misses)")
    elif cmd == "recommend":
        ckpt = Path(args.checkpoint) if args.checkpoint else m.out / "phase2.ckpt"
        if not ckpt.is_file():
            raise pl.PrerequisiteError(f"{ckpt} not found; run `train-phase2` first")
        registry = pl.load_registry(m)
        model, _ = load_checkpoint(ckpt, registry)
        recs = pl.recommend(model, registry, args.item, args.top_k, args.mode)
        _print_recommendations(recs, model.view_names, m.out / f"recommend_{args.item}.csv")
    elif cmd == "cross-validate":
        reports, mean, std = pl.run_cross_validate(m, args.mode, not args.no_cold)
        mean.to_csv(m.out / f"cv_{args.mode}_mean.csv", f"seed={m.seed} folds={m.folds}")
        std.to_csv(m.out / f"cv_{args.mode}_std.csv", f"seed={m.seed} folds={m.folds}")
        print(mean.table())
    return EXIT_OK


def _print_recommendations(recs, views, csv_path):
    head = f"{'rank':>4} {'item':<12} {'psi':>9} " + " ".join(
        f"{v + ':a':>9} {v + ':mu':>9} {v + ':s':>9}" for v in views)
    print(head)
    lines = ["rank,item,psi," + ",".join(f"{v}_a,{v}_mu,{v}_s" for v in views)]
    for r in recs:
        cells = " ".join(f"{r.views[v][0]:9.4f} {r.views[v][1]:9.4f} {r.views[v][2]:9.4f}"
                         for v in views)
        print(f"{r.rank:>4} {r.item:<12} {r.psi:9.4f} {cells}")
        lines.append(f"{r.rank},{r.item},{r.psi!r}," + ",".join(
            f"{r.views[v][0]!r},{r.views[v][1]!r},{r.views[v][2]!r}" for v in views))
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args):
            return run(args)
    except _UsageError as exc:
        print(f"nam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NoActiveViewError, FloatingPointError) as exc:
        print(f"nam: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IngestError, ViewParseError, CheckpointError, ShapeError,
            pl.PrerequisiteError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"nam: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
