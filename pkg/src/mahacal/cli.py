"""Command-line front end.

Settings are resolved in this order, later sources winning: built-in
defaults, the ``--config`` file, then individual flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .linalg import CovarianceError
from .tasks import dump_task_csv, sample_task

logger = logging.getLogger("mahacal")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

EPILOG = """\
precedence: built-in defaults < --config FILE < command-line flags.
exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
environment: MMC_THREADS caps the number of experiment cells run in parallel.
"""


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", choices=runner.SUITES)
    p.add_argument("--head", help="mahalanobis, protonet, protonet_sn, shrinkage_class or shrinkage_shared")
    p.add_argument("--rank", type=int)
    p.add_argument("--episodes", type=int, help="episode count for this command")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--mc-samples", type=int, dest="mc_samples")
    p.add_argument("--tmax", type=int, dest="t_max")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mahacal", description="Meta-learned Mahalanobis covariances for calibrated few-shot classification.",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("train", "train a model and tune its temperature"),
        ("eval", "evaluate a checkpoint on fresh episodes"),
        ("plot", "entropy surface, covariance ellipses and eigenvalue histogram"),
        ("dump-task", "write sampled tasks as CSV"),
    ):
        p = sub.add_parser(name, help=text, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        if name in ("eval", "plot"):
            p.add_argument("--checkpoint", type=Path, help="checkpoint path (default OUT/model.mmc)")
    p = sub.add_parser("experiment", help="train and evaluate the model grid over seeds",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("suite", help=f"one of {', '.join(runner.SUITES)}")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per model (default 5)")
    p.add_argument("--perturb-episodes", type=int, default=10, dest="perturb_episodes")
    _common(p)
    return parser


def explicit_settings(args: argparse.Namespace) -> dict:
    """Keys set by the config file or by flags, flags taking precedence."""
    settings = {}
    if args.config is not None:
        loaded = RunConfig.load(args.config)
        settings.update({k: getattr(loaded, k) for k in RunConfig.keys_in(args.config.read_text())})
    flags = {
        "seed": args.seed, "dataset": args.dataset, "head": args.head, "rank": args.rank,
        "mc_samples": args.mc_samples, "t_max": args.t_max,
        "out_dir": str(args.out) if args.out is not None else None,
    }
    settings.update({k: v for k, v in flags.items() if v is not None})
    return settings


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    settings = explicit_settings(args)
    return base.replace(**settings) if base is not None else RunConfig(**settings)


def _checkpoint_path(args, cfg: RunConfig) -> Path:
    return args.checkpoint if getattr(args, "checkpoint", None) else Path(cfg.out_dir) / "model.mmc"


def cmd_train(args, cfg: RunConfig) -> int:
    if args.episodes is not None:
        cfg = cfg.replace(train_episodes=args.episodes)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = runner.train(cfg, log_path=out / "train_log.csv")
    runner.save_run(result.model, cfg, out / "model.mmc")
    model = result.model
    temp = f"T={model.temperature}" if model.uses_energy else f"tau={model.logit_temperature:.4f}"
    print(f"trained {cfg.head} on {cfg.dataset}: {cfg.train_episodes} episodes in {result.seconds:.1f}s, "
          f"final accuracy {result.final_accuracy():.4f}, {temp}")
    print(f"wrote {out / 'model.mmc'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    path = _checkpoint_path(args, cfg)
    model, saved = runner.load_run(path)
    cfg = resolve_config(args, saved)
    if args.episodes is not None:
        cfg = cfg.replace(eval_episodes=args.episodes)
    if cfg.eval_episodes < 1:
        raise ConfigError("evaluation needs at least one episode")
    report = runner.evaluate(model, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner.write_report(report, out / "report.csv")
    print(runner.REPORT_HEADER)
    for key, value in report.row().items():
        print(f"{key:>12}: {value}")
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig) -> int:
    from . import plots

    path = _checkpoint_path(args, cfg)
    model, saved = runner.load_run(path)
    cfg = resolve_config(args, saved)
    streams = runner.seed_streams(cfg.seed)
    task = sample_task(streams["plot"], runner.task_config(cfg))
    written = plots.render_all(model, task, Path(cfg.out_dir) / "plots", streams["mc"],
                               cfg.plot_resolution, cfg.ood_margin, cfg.mc_samples)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_dump_task(args, cfg: RunConfig) -> int:
    n = 1 if args.episodes is None else args.episodes
    if n < 1:
        raise ConfigError("dump-task needs at least one episode")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = runner.seed_streams(cfg.seed)["eval"]
    tcfg = runner.task_config(cfg)
    for i in range(n):
        path = out / f"{cfg.dataset}_task{i:03d}.csv"
        dump_task_csv(sample_task(rng, tcfg), path)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_experiment(args, cfg: RunConfig) -> int:
    if args.suite not in runner.SUITES:
        raise ConfigError(f"unknown suite {args.suite!r}; available suites: {', '.join(runner.SUITES)}")
    if args.episodes is not None:
        cfg = cfg.replace(train_episodes=args.episodes)
    base_seed = cfg.seed
    seeds = range(base_seed, base_seed + args.seeds)
    cells = runner.run_experiment(args.suite, cfg, seeds, perturb_episodes=args.perturb_episodes)
    rows = runner.summarize(cells)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner.write_table(rows, out / f"{args.suite}_table.csv")
    runner.write_cells(cells, out / f"{args.suite}_cells.csv")
    print(runner.REPORT_HEADER)
    print(runner.format_table(rows))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "dump-task": cmd_dump_task,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError, CovarianceError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
