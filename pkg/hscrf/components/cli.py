import argparse
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from hscrf.components.report import emit_journey, emit_report, emit_shapes
from hscrf.services.dataset import Dataset, dataset_summary, load_dataset, write_json
from hscrf.services.harness import (
    compare_predictions,
    complementarity_grid,
    component_sweep,
    default_journey,
    evaluate_predictions,
    execute_experiment,
    journey,
    load_predictions,
    run_ablation_suite,
    save_experiment,
)
from hscrf.services.potentials import ProviderStores
from hscrf.services.shape_priors import shape_table
from hscrf.services.synth import generate_dataset, write_synth
from hscrf.utils.config import (
    ExperimentConfig,
    GeneratorConfig,
    load_experiment_config,
    load_generator_config,
    load_grid,
    load_sequence,
)
from hscrf.utils.errors import EXIT_OK, DataError, HscrfRuntimeError, UsageError
from hscrf.utils.logger import get_logger
from hscrf.utils.session import RunSession

logger = get_logger(__name__)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (overrides HSCRF_SEED)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (overrides HSCRF_JOBS)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--timing", action="store_true", help="fill the seconds column of reports")

    parser = CliParser(prog="hscrf", description="Holistic scene CRF ablation engine")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset and provider stores")
    gen.add_argument("--config", type=Path, help="generator TOML (defaults if omitted)")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--n-train", type=int, default=None)
    gen.add_argument("--n-test", type=int, default=None)

    run = sub.add_parser("run", parents=[common], help="learn, infer and evaluate one configuration")
    run.add_argument("--config", type=Path, help="experiment TOML (all-machine if omitted)")
    run.add_argument("--data", type=Path, required=True)
    run.add_argument("--out", type=Path)

    ablate = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    ablate.add_argument("--grid", type=Path, required=True)
    ablate.add_argument("--data", type=Path, help="dataset directory (overrides the grid's `data`)")
    ablate.add_argument("--out", type=Path)
    ablate.add_argument("--complementarity", action="store_true", help="add the segment/super-segment hybrid rows")

    seq = sub.add_parser("journey", parents=[common], help="run a cumulative ladder of configurations")
    seq.add_argument("--seq", type=Path, help="sequence TOML (default segmentation ladder if omitted)")
    seq.add_argument("--data", type=Path)
    seq.add_argument("--out", type=Path)

    shapes = sub.add_parser("shapes", parents=[common], help="compare shape priors on test objects")
    shapes.add_argument("--data", type=Path, required=True)
    shapes.add_argument("--out", type=Path)

    ev = sub.add_parser("eval", parents=[common], help="score a predictions file against a dataset")
    ev.add_argument("--pred", type=Path, required=True)
    ev.add_argument("--gt", type=Path, required=True, help="dataset directory")
    ev.add_argument("--pred-b", type=Path, help="second predictions file for confusion comparison")
    ev.add_argument("--out", type=Path)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    if args.jobs is not None and args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return args


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _load(data: Optional[Path], session: RunSession) -> Tuple[Dataset, ProviderStores]:
    if data is None:
        raise UsageError("no dataset directory given (--data or `data` in the file)")
    dataset = load_dataset(data)
    logger.info(f"Dataset summary: {dataset_summary(dataset)}")
    return dataset, ProviderStores.from_directory(data, dataset, seed=session.seed)


def _out_dir(args: argparse.Namespace, session: RunSession, fallback: Optional[str] = None) -> Path:
    if args.out is not None:
        return Path(args.out)
    if fallback:
        return Path(fallback)
    return Path(session.output_dir) / args.command


def cmd_gen(args: argparse.Namespace, session: RunSession) -> int:
    cfg = load_generator_config(args.config) if args.config else GeneratorConfig()
    update: Dict[str, int] = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.n_train is not None:
        update["n_train"] = args.n_train
    if args.n_test is not None:
        update["n_test"] = args.n_test
    if update:
        cfg = GeneratorConfig.model_validate({**cfg.model_dump(), **update})
    write_synth(generate_dataset(cfg, session), args.out)
    return EXIT_OK


def cmd_run(args: argparse.Namespace, session: RunSession) -> int:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    dataset, stores = _load(args.data, session)
    result = execute_experiment(cfg, dataset, stores, session, timing=args.timing)
    out = _out_dir(args, session, cfg.output_dir)
    save_experiment(result, out)
    emit_report([result.row], out)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, session: RunSession) -> int:
    grid = load_grid(args.grid)
    configs: List[ExperimentConfig] = list(grid.experiment)
    for component in grid.sweep:
        configs.extend(component_sweep(component, grid.base))
    if args.complementarity:
        configs.extend(complementarity_grid(grid.base))
    if not configs:
        configs = [grid.base]
    dataset, stores = _load(args.data or (Path(grid.data) if grid.data else None), session)
    suite = run_ablation_suite(configs, dataset, stores, session, timing=args.timing)
    if not suite.rows:
        for label, reason in suite.failures:
            logger.error(f"'{label}': {reason}")
        raise HscrfRuntimeError("every configuration in the grid failed")
    emit_report(suite.rows, _out_dir(args, session, grid.output_dir), suite.failures)
    return EXIT_OK


def cmd_journey(args: argparse.Namespace, session: RunSession) -> int:
    if args.seq:
        sequence = load_sequence(args.seq)
        steps, data, output_dir = list(sequence.step), sequence.data, sequence.output_dir
    else:
        steps, data, output_dir = default_journey(), None, None
    dataset, stores = _load(args.data or (Path(data) if data else None), session)
    emit_journey(journey(steps, dataset, stores, session, timing=args.timing), _out_dir(args, session, output_dir))
    return EXIT_OK


def cmd_shapes(args: argparse.Namespace, session: RunSession) -> int:
    dataset, stores = _load(args.data, session)
    rows = shape_table(dataset.test, dataset.label_space, stores.masks, stores.edges)
    for row in rows:
        logger.info(f"{row.prior:>20}: normalized {row.normalized:.4f}, pixel {row.pixel:.4f} ({row.objects} objects)")
    emit_shapes(rows, _out_dir(args, session))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, session: RunSession) -> int:
    dataset = load_dataset(args.gt)
    predictions = load_predictions(args.pred)
    if not predictions:
        raise DataError("predictions file has no instances", path=str(args.pred))
    metrics = evaluate_predictions(predictions, dataset.instances, dataset.label_space)
    if args.pred_b:
        other = load_predictions(args.pred_b)
        metrics.update(compare_predictions(predictions, other, dataset.instances, dataset.label_space.C))
    for name, value in sorted(metrics.items()):
        logger.info(f"{name}: {value:.6f}")
    out = _out_dir(args, session, str(Path(args.pred).parent))
    write_json(out / "eval.json", metrics)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunSession], int]] = {
    "gen": cmd_gen,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "journey": cmd_journey,
    "shapes": cmd_shapes,
    "eval": cmd_eval,
}


def dispatch(args: argparse.Namespace, session: RunSession) -> int:
    logger.info(f"Running command '{args.command}'")
    return COMMANDS[args.command](args, session)
