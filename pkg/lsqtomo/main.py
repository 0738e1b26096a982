"""lsqtomo entry point: simulate, build kernels, reconstruct and sweep the L-curve from a config file."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from lsqtomo.config import ExperimentConfig, config_hash, dump_config, load_config, validate_config
from lsqtomo.database import Database
from lsqtomo.errors import ConfigError, TomographyError
from lsqtomo.services.experiment_service import ExperimentService
from lsqtomo.services.storage_service import StorageService
from lsqtomo.tomography.kernels import KernelKind
from lsqtomo.tomography.simulator import RawEvents

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
    datefmt="%H:%M:%S",
)
log = logging.getLogger("lsqtomo")


# --- Commands ---


def _setup(config: ExperimentConfig) -> tuple[ExperimentService, StorageService]:
    service = ExperimentService(config)
    storage = StorageService(config.output_dir)
    dump_config(config, Path(config.output_dir) / "config.yaml")
    return service, storage


def _read_dataset(args: argparse.Namespace):
    if not args.dataset:
        raise ConfigError("--dataset DIR is required for this command")
    return StorageService(args.dataset).read_dataset()


def cmd_simulate(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, float]:
    service, storage = _setup(config)
    dataset = service.simulate()
    storage.write_dataset(dataset, service.state, extra={"seed": config.seed, "config_hash": config_hash(config)})
    events = dataset.totals.sum() if isinstance(dataset, RawEvents) else dataset.counts.sum()
    log.info("Simulated %d recorded events", int(events))
    return {"events": float(events)}


def cmd_kernels(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, float]:
    service, storage = _setup(config)
    kernels = service.kernels
    x = np.linspace(config.export.plot_x_min, config.export.plot_x_max, config.export.plot_points)
    levels = [(n, n) for n in config.export.kernel_levels]
    if kernels[0].kind is KernelKind.SPATIAL_PER_CLASS:
        storage.write_kernels(kernels, x)
    else:
        storage.write_kernels(kernels, x, times=service.timing.times, pairs=levels)

    condition = max(k.condition_estimate for k in kernels)
    deviation = max(k.biorthogonality_error() for k in kernels)
    log.info("Kernel sets: %d, max condition %.3e, max biorthogonality deviation %.3e",
             len(kernels), condition, deviation)

    if config.export.plots and levels:
        t0 = float(service.timing.times[0])
        curves = {}
        for pair in levels:
            kset = next(k for k in kernels if pair in k.index_map.pairs)
            curves[f"n={pair[0]}"] = kset.kernel(pair, x, t0)
        from lsqtomo.ui.renderer import Renderer
        Renderer(config).plot_kernels(x, curves, Path(config.output_dir) / "kernels.svg")
    return {"max_condition_estimate": condition, "max_biorthogonality_error": deviation}


def _finish_result(service: ExperimentService, storage: StorageService, config: ExperimentConfig,
                   dataset, truth) -> dict[str, float]:
    result = service.run(dataset)
    storage.write_result(result, truth)
    if config.export.plots:
        from lsqtomo.ui.renderer import Renderer
        renderer = Renderer(config)
        out = Path(config.output_dir)
        renderer.plot_elements(result, out / "populations.svg", 0, truth)
        if service.n_max > 0 and all(result.covered[n, n + 1] for n in range(service.n_max)):
            renderer.plot_elements(result, out / "coherences.svg", 1, truth)
    metrics = service.metrics(result, truth)
    if config.export.truncation:
        offsets = service.truncation_offsets()
        metrics["max_truncation_offset"] = storage.write_truncation(offsets)
        log.info("Largest predicted truncation offset %.3e", metrics["max_truncation_offset"])
    if config.export.baseline:
        metrics.update(storage.write_baseline(result, service.baseline(), truth))
        log.info("Time-averaged baseline: std ratio %.3f", metrics["baseline_std_ratio"])
    return metrics


def cmd_reconstruct(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, float]:
    dataset, truth, _ = _read_dataset(args)
    service, storage = _setup(config)
    return _finish_result(service, storage, config, dataset, truth)


def cmd_pipeline(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, float]:
    service, storage = _setup(config)
    dataset = service.simulate()
    storage.write_dataset(dataset, service.state, extra={"seed": config.seed, "config_hash": config_hash(config)})
    return _finish_result(service, storage, config, dataset, service.state)


def cmd_lcurve(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, float]:
    if args.dataset:
        dataset, _, _ = _read_dataset(args)
        service, storage = _setup(config)
    else:
        service, storage = _setup(config)
        dataset = service.simulate()
    curve = service.lcurve(dataset, list(config.reconstruction.lambdas))
    storage.write_lcurve(curve)
    storage.write_tradeoff(service.tradeoff(dataset, list(config.reconstruction.lambdas)))
    if config.export.plots:
        from lsqtomo.ui.renderer import Renderer
        Renderer(config).plot_lcurve(curve, Path(config.output_dir) / "lcurve.svg")
    log.info("L-curve corner at lambda=%s", curve.corner)
    metrics = {"points": float(len(curve.points))}
    if curve.corner is not None:
        metrics["corner"] = curve.corner
    return metrics


COMMANDS: dict[str, Callable[[ExperimentConfig, argparse.Namespace], dict[str, float]]] = {
    "simulate": cmd_simulate,
    "kernels": cmd_kernels,
    "reconstruct": cmd_reconstruct,
    "lcurve": cmd_lcurve,
    "pipeline": cmd_pipeline,
}


# --- Arguments ---


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML (default: ./config.yaml if present)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--plots", action="store_true", help="write SVG figures")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="lsqtomo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a measurement dataset")
    sub.add_parser("kernels", parents=[common], help="export sampling kernels and condition report")
    rec = sub.add_parser("reconstruct", parents=[common], help="reconstruct from a stored dataset")
    rec.add_argument("--dataset", help="directory written by 'simulate'")
    lc = sub.add_parser("lcurve", parents=[common], help="Tikhonov L-curve sweep")
    lc.add_argument("--dataset", help="directory written by 'simulate' (simulated afresh if omitted)")
    lc.add_argument("--lambda", dest="lambdas", type=float, nargs="+", help="lambda values, ascending")
    sub.add_parser("pipeline", parents=[common], help="simulate, reconstruct and compare in one run")
    return parser


def configure(args: argparse.Namespace) -> ExperimentConfig:
    """Config file, then environment, then command-line flags; validated."""
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.output_dir = args.out
    if args.plots:
        config.export.plots = True
    if getattr(args, "lambdas", None):
        config.reconstruction.lambdas = list(args.lambdas)
    return validate_config(config)


async def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = configure(args)
    except TomographyError as e:
        log.error("Invalid configuration: %s", e)
        return e.exit_code

    db = Database(config)
    try:
        await db.initialize()
    except TomographyError as e:
        log.error("%s", e)
        return e.exit_code

    run_id = await db.start_run(args.command)
    try:
        metrics = await asyncio.to_thread(COMMANDS[args.command], config, args)
    except TomographyError as e:
        log.error("%s failed: %s", args.command, e)
        await db.finish_run(run_id, "failed")
        return e.exit_code
    else:
        await db.save_metrics(run_id, metrics)
        await db.finish_run(run_id, "ok")
        log.info("%s finished; outputs in %s", args.command, config.output_dir)
        return 0
    finally:
        await db.close()


def run():
    sys.exit(asyncio.run(main()))


if __name__ == "__main__":
    run()
