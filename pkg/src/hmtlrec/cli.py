"""Command-line entry point: ``hmtlrec {train,evaluate,predict,gradcheck,sweep-candidates}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import DataError
from .evaluation import CandidatePolicy

logger = logging.getLogger("hmtlrec")

EXIT_USAGE = 2
EXIT_DATA = 6


def _policy(args) -> CandidatePolicy | None:
    if args.policy is None:
        return None
    if args.policy == "full":
        return CandidatePolicy("full")
    if args.policy == "category-topk":
        return CandidatePolicy("category", k=args.k)
    if args.n is None:
        raise ConfigError("--policy random needs --n")
    return CandidatePolicy("random", size=args.n, seed=args.seed)


def cmd_train(args) -> int:
    from .workflows import run_train

    cfg = load_config(args.config)
    result = run_train(cfg, out_dir=args.out, resume=args.resume, max_epochs=args.epochs)
    print(f"trained {result.epochs} epochs; best epoch {result.best_epoch} "
          f"valid MRR@20 {result.best_valid_mrr:.4f}")
    print(f"checkpoint: {result.best_checkpoint}")
    return 0


def _print_report(report) -> None:
    print(f"[{report.meta.get('policy', '')}] MRR@20={report.mrr_at_20:.4f} HITS@20={report.hits_at_20:.4f} "
          f"Recall@20={report.recall_at_20:.4f} candidates={report.candidate_fraction:.4f} "
          f"containment={report.gt_containment:.4f}")


def cmd_evaluate(args) -> int:
    from .workflows import run_evaluate, write_json

    report = run_evaluate(args.checkpoint, args.test, _policy(args), final_only=args.final_only or None)
    if args.out:
        write_json(args.out, report)
    _print_report(report)
    return 0


def cmd_sweep(args) -> int:
    from .workflows import run_sweep, write_json

    reports = run_sweep(args.checkpoint, args.test, ks=args.ks, with_random=not args.no_random, seed=args.seed)
    out = Path(args.out_dir)
    for report in reports:
        write_json(out / f"metrics_{report.meta['policy']}.json", report)
        _print_report(report)
    return 0


def cmd_predict(args) -> int:
    from .workflows import run_predict, write_json

    doc = run_predict(args.checkpoint, args.items, args.top_n, args.top_k)
    if args.out:
        write_json(args.out, doc)
    print(json.dumps(doc, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(n_probes=args.probes, seed=args.seed)
    ok = True
    for name, report in results:
        status = "PASS" if report.passed else "FAIL"
        ok &= report.passed
        print(f"{status} {name}: probes={len(report.checked)} excluded={len(report.excluded)} "
              f"max_rel_error={report.max_rel_error:.2e}")
        if args.verbose or not report.passed:
            print(report.summary())
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmtlrec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: output.dir from the config)")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--epochs", type=int, help="stop after this many total epochs")
    p.set_defaults(func=cmd_train)

    def policy_flags(p):
        p.add_argument("--policy", choices=["full", "category-topk", "random"])
        p.add_argument("--k", type=int, default=3, help="categories per level for category-topk")
        p.add_argument("--n", type=int, help="candidate count for random")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="compute MRR/HITS/Recall@20 on test sessions")
    p.add_argument("checkpoint")
    p.add_argument("--test", help="events file (default: the config's test split)")
    p.add_argument("--out", help="write the metrics document here")
    p.add_argument("--final-only", action="store_true", help="score only each session's last transition")
    policy_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-candidates", help="category top-k sweep with matched random baselines")
    p.add_argument("checkpoint")
    p.add_argument("--test")
    p.add_argument("--ks", type=int, nargs="+", default=[1, 2, 5, 10])
    p.add_argument("--no-random", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict", help="top items and categories for one session")
    p.add_argument("checkpoint")
    p.add_argument("items", nargs="+", help="external item ids in session order")
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference verification of every gradient")
    p.add_argument("--probes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
