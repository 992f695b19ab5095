"""Command-line entry point.

Verbs: gen-data, train, eval, ablate, report. Configuration layering is
defaults < --config file < explicit flags. Every run writes a run.json
with the resolved configuration so it can be reproduced exactly from
that file alone. Exit codes: 0 success, 1 usage error, 2 runtime
failure. LOLA_LOG (error|info|debug) controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import TrainConfig

log = logging.getLogger("minivla")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1 (2 is reserved for runtime failures)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("LOLA_LOG", "info").lower()
    if level not in _LOG_LEVELS:
        raise SystemExit(f"LOLA_LOG must be one of {sorted(_LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=_LOG_LEVELS[level],
                        format="%(asctime)s %(name)s %(message)s")


def _build_parser() -> _Parser:
    parser = _Parser(prog="minivla", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate an expert demonstration dataset")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", help="JSON config file (TrainConfig keys)")
    p.add_argument("--data", help="episodes JSONL path")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("eval", help="evaluate a trained policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rollouts", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--config", help="base JSON config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--variants", default="full,no_mf,no_salr,no_state,frozen_vl")
    p.add_argument("--rollouts", type=int, default=100)

    p = sub.add_parser("report", help="re-emit reports from stored metrics")
    p.add_argument("--data", required=True, help="metrics.json path")
    p.add_argument("--out", required=True)
    return parser


def _load_config(path: str | None, **overrides) -> TrainConfig:
    cfg = TrainConfig() if path is None else TrainConfig.from_json(
        Path(path).read_text(encoding="utf-8"))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replaced(**overrides) if overrides else cfg.validate()


def _write_run_json(out_dir, args: argparse.Namespace, cfg: TrainConfig | None,
                    seed: int) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": args.verb,
        "argv": sys.argv[1:],
        "config": None if cfg is None else json.loads(cfg.to_json()),
        "seed": seed,
        "version": __version__,
    }
    with open(out_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_gen_data(args) -> int:
    from .dataset import generate_dataset

    out = Path(args.out)
    _write_run_json(out, args, None, args.seed)
    summary = generate_dataset(args.episodes, args.seed, out / "episodes.jsonl")
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    from .report import plot_loss_curve
    from .training import train

    cfg = _load_config(args.config, dataset=args.data, seed=args.seed,
                       checkpoint_dir=args.out)
    if not cfg.dataset:
        raise SystemExit2("train needs --data or a config with a dataset path")
    _write_run_json(args.out, args, cfg, cfg.seed)
    try:
        final = train(cfg, args.out, resume=args.checkpoint)
    except KeyboardInterrupt:
        log.warning("interrupted; checkpoint saved")
        return 0
    plot_loss_curve(Path(args.out) / "loss.csv")
    print(f"final checkpoint: {final}")
    return 0


def _cmd_eval(args) -> int:
    from . import world
    from .evaluate import evaluate_policy
    from .report import emit_report
    from .training import load_checkpoint

    policy, step = load_checkpoint(args.checkpoint)
    _write_run_json(args.out, args, policy.cfg, args.seed)
    report = evaluate_policy(policy, world.FAMILIES, args.rollouts, args.seed,
                             variant=f"checkpoint@{step + 1}")
    paths = emit_report([report], args.out)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(f"report written: {paths['md']}")
    return 0


def _cmd_ablate(args) -> int:
    from .evaluate import run_ablation_grid, variant_delta

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        variant_delta(v)  # validate names before any training starts
    cfg = _load_config(args.config, dataset=args.data, seed=args.seed)
    _write_run_json(args.out, args, cfg, cfg.seed)
    reports = run_ablation_grid(cfg, args.data, variants, cfg.seed, args.out,
                                n_per_family=args.rollouts)
    for r in reports:
        print(f"{r.variant}: average success {100 * r.average_success:.1f}%")
    return 0


def _cmd_report(args) -> int:
    from .evaluate import EvalReport
    from .report import emit_report

    with open(args.data, encoding="utf-8") as fh:
        reports = [EvalReport.from_dict(d) for d in json.load(fh)]
    _write_run_json(args.out, args, None, reports[0].seed if reports else 0)
    paths = emit_report(reports, args.out)
    print(f"report written: {paths['md']}")
    return 0


class SystemExit2(RuntimeError):
    """Runtime failure that should exit with code 2."""


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    try:
        _setup_logging()
    except SystemExit as exc:
        print(exc, file=sys.stderr)
        return 1
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.verb](args)
    except KeyboardInterrupt:
        log.warning("interrupted")
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("%s", exc, exc_info=os.environ.get("LOLA_LOG") == "debug")
        return 2


if __name__ == "__main__":
    sys.exit(main())
