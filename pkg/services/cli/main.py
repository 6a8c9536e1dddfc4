"""dmada: command-line entry point for data generation, training, evaluation and plots."""

from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from services.cli.config import settings
from services.cli.plots import plot_run, plot_sensitivity
from services.data.tasks import build_domain_pair, write_domain_pair
from services.evaluator.ablation import run_ablation, run_sensitivity, table4_spec, table5_spec
from services.evaluator.evaluate import (
    evaluate_run,
    export_embeddings,
    export_generated,
    load_run,
)
from services.trainer.run_dir import RunDirectory
from services.trainer.trainer import source_only_baseline, train
from shared.config_file import load_run_config, run_config_from_text
from shared.errors import DmAdaError
from shared.logging_config import get_logger, setup_logging
from shared.schemas import DataConfig, ProbeKind, RunConfig, TaskKind

logger = get_logger(__name__)

PRESETS = {"table4": table4_spec, "table5": table5_spec}


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        return load_run_config(args.config, args.set)
    return run_config_from_text("", source="<defaults>", overrides=args.set)


def gen_data(args: argparse.Namespace) -> int:
    shift = args.shift or ("30" if args.task == TaskKind.MOONS else "invert")
    data = DataConfig(
        task=args.task,
        shift=shift,
        n=args.n,
        noise=args.noise,
        idx_images=args.images,
        idx_labels=args.labels,
        pad_to=args.pad_to,
        downsample=args.downsample,
        n_source=args.n_source,
        n_target=args.n_target,
    )
    pair = build_domain_pair(data, args.seed)
    default = f"{data.task.value}-{shift}-seed{args.seed}"
    out = args.out or settings.output_root / "data" / default
    write_domain_pair(pair, out, data.task, data.shift, args.seed)
    print(out)
    return 0


def train_cmd(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    pair = build_domain_pair(cfg.data, cfg.data_seed)
    label = "source-only" if args.source_only else cfg.toggles.label()
    out = args.out or settings.output_root / f"{cfg.data.task.value}-{label}-seed{cfg.seed}"
    run = RunDirectory.create(out, cfg.source_only() if args.source_only else cfg)
    if args.source_only:
        source_only_baseline(pair, cfg, run)
    else:
        train(pair, cfg, run)
    print(run.path)
    return 0


def eval_cmd(args: argparse.Namespace) -> int:
    report = evaluate_run(args.run, ProbeKind(args.probe))
    print(report.model_dump_json())
    if args.export_generated:
        _, _, pair, models = load_run(args.run)
        export_generated(
            models, pair.target, args.run / "generated.idx", np.random.default_rng(args.seed)
        )
    if report.logged_accuracy is not None and not report.matches_log:
        print(
            f"dmada eval: accuracy {report.target_accuracy} differs from logged "
            f"{report.logged_accuracy}",
            file=sys.stderr,
        )
        return 1
    return 0


def export_cmd(args: argparse.Namespace) -> int:
    _, _, pair, models = load_run(args.run)
    path = args.out or args.run / "embeddings.csv"
    export_embeddings(models, {"source": pair.source, "target": pair.target}, path)
    print(path)
    return 0


def ablate_cmd(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = args.out or settings.output_root / "ablation"
    workers = args.workers or settings.ablation_workers
    if args.sensitivity:
        cells = run_sensitivity(seeds=args.seeds, cfg=cfg, out_dir=out, workers=workers)
        print(f"{out} ({len(cells)} sensitivity cells)")
        return 0
    spec = PRESETS[args.preset](args.seeds, cfg.data.task.value)
    rows = run_ablation(spec, cfg, out_dir=out, workers=workers)
    for row in rows:
        print(
            f"{row.combination:<28} acc {row.mean_accuracy:.4f} +- {row.std_accuracy:.4f}"
            f"  d_A {row.mean_a_distance:.3f}"
        )
    return 0


def plot_cmd(args: argparse.Namespace) -> int:
    if args.sensitivity:
        out = args.out or settings.output_root
        print(plot_sensitivity(args.sources, out))
        return 0
    for source in args.sources:
        for path in plot_run(source, args.out):
            print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmada", description="Domain-mixup adaptation at desk scale"
    )
    parser.add_argument("--log-level", default=None, help="Override DMADA_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="Run config file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="Override a config key (section.key for nested keys); repeatable",
        )
        p.add_argument("--out", type=Path, default=None, help="Output directory")

    p = sub.add_parser("gen-data", help="Write a source/target pair as IDX files plus manifest")
    p.add_argument(
        "--task", choices=[t.value for t in TaskKind if t is not TaskKind.MANIFEST], default="moons"
    )
    p.add_argument(
        "--shift", default=None, help="Moons angle (30), or a chain such as rotate:25+noise:0.05"
    )
    p.add_argument("--n", type=int, default=1000, help="Points per domain (moons)")
    p.add_argument("--noise", type=float, default=0.1, help="Moons noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=Path, default=None, help="IDX images (idx task)")
    p.add_argument("--labels", type=Path, default=None, help="IDX labels (idx task)")
    p.add_argument("--pad-to", type=int, default=32)
    p.add_argument("--downsample", type=int, default=2)
    p.add_argument("--n-source", type=int, default=None)
    p.add_argument("--n-target", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=gen_data)

    p = sub.add_parser("train", help="Train one run")
    config_flags(p)
    p.add_argument("--source-only", action="store_true", help="Train the source-only baseline")
    p.set_defaults(handler=train_cmd)

    p = sub.add_parser("eval", help="Re-evaluate a run from its snapshot and last checkpoint")
    p.add_argument("run", type=Path)
    p.add_argument("--probe", choices=[k.value for k in ProbeKind], default="logistic")
    p.add_argument("--export-generated", action="store_true")
    p.add_argument("--seed", type=int, default=0, help="Noise seed for --export-generated")
    p.set_defaults(handler=eval_cmd)

    p = sub.add_parser("ablate", help="Run an ablation grid or an omega/phi sweep")
    config_flags(p)
    p.add_argument("--preset", choices=list(PRESETS), default="table4")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--sensitivity", action="store_true")
    p.set_defaults(handler=ablate_cmd)

    p = sub.add_parser("export-embeddings", help="Write [mu, sigma] features of both domains")
    p.add_argument("run", type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=export_cmd)

    p = sub.add_parser("plot", help="Plot run curves or a sensitivity sweep")
    p.add_argument("sources", type=Path, nargs="+", help="Run directories or a sensitivity.csv")
    p.add_argument("--sensitivity", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=plot_cmd)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(settings.service_name, args.log_level or settings.log_level, settings.log_json)
    try:
        return args.handler(args)
    except (DmAdaError, ValidationError) as exc:
        logger.error("command_failed", command=args.command, error=str(exc))
        print(f"dmada {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("command_crashed", command=args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
