"""Command-line entry point.

Subcommands: generate-data, train, evaluate, diagnose-gap, report. All
hyperparameters come from the JSON config file; flags carry only paths, the
seed and the resume checkpoint. Exit codes: 0 success, 1 validation or
configuration error, 2 runtime divergence. Failures print one
machine-parseable line `error code=<CODE> msg="..."` to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import describe_keys, load_config, save_config, RunConfig
from .datasets import load_dataset, save_dataset, synth_generate
from .errors import DivergenceError, ValidationError
from .orchestrator import alternate_train, diagnose_gap, evaluate_run, write_report


def _fail(code: str, message: str, exit_code: int) -> int:
    one_line = str(message).replace("\n", " ")
    print(f'error code={code} msg="{one_line}"', file=sys.stderr)
    return exit_code


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config)
    ds = synth_generate(cfg.dataset.to_synth_config())
    manifest = save_dataset(ds, args.out)
    print(f"wrote dataset manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.orchestrator.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    artifacts = alternate_train(cfg, out, resume_from=args.resume)
    evals = artifacts.history_by_phase("eval")
    for rec in evals:
        gap = rec["gap"]["d_hat"]
        gap_text = "n/a" if gap is None else f"{gap:.4f}"
        print(f"alternation {rec['k']}: miou={rec['miou']:.4f} gap={gap_text}")
    print(f"checkpoints: {len(artifacts.checkpoint_dirs)}; report: {artifacts.report_path}")
    return 0


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.data)
    table = evaluate_run(args.ckpt, ds, out_path=args.out)
    print(json.dumps(table, indent=1, sort_keys=True))
    return 0


def cmd_diagnose_gap(args) -> int:
    ds = load_dataset(args.data)
    result = diagnose_gap(args.ckpt, ds, seed=args.seed or 0)
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    log_path = run_dir / "run_log.jsonl"
    if not log_path.exists():
        raise ValidationError(f"run log not found: {log_path}", code="RUN")
    history = [json.loads(line) for line in log_path.read_text().splitlines() if line]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = write_report(out_dir, history)
    print(f"report written: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaseg",
        description="Unsupervised domain-adaptive segmentation: synthetic data, "
                    "alternating translation/feature-transfer training, evaluation.",
        epilog="config keys (JSON sections, with defaults):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="generate a synthetic two-domain dataset")
    p.add_argument("--config", required=True, help="JSON config path")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="run the alternating training pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--seed", type=int, default=None, help="override orchestrator.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", default=None, help="metric table output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose-gap", help="estimate the source/target feature gap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose_gap)

    p = sub.add_parser("report", help="rebuild the report from a run directory")
    p.add_argument("--run", required=True, help="run directory with run_log.jsonl")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        return _fail(e.code, str(e), 1)
    except DivergenceError as e:
        return _fail(e.code, str(e), 2)
    except FileNotFoundError as e:
        return _fail("MISSING_FILE", str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
