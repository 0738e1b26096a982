"""Storage service: CSV tables and YAML metadata for datasets, kernels, results and L-curves.

Every float is written with 17 significant digits so that values survive a write/read cycle
bit for bit. Each output directory carries a ``*.yaml`` metadata file with ``schema_version``;
readers refuse any other version.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from lsqtomo.config import SCHEMA_VERSION
from lsqtomo.errors import SchemaVersionError, StorageError
from lsqtomo.tomography.kernels import SamplingKernelSet
from lsqtomo.tomography.lsq_core import LCurve, LCurvePoint
from lsqtomo.tomography.reconstruct import Diagnostics, ReconstructionResult
from lsqtomo.tomography.simulator import (
    DensityMatrix,
    GridCounts,
    MeasurementDataset,
    MeasurementGeometry,
    RawEvents,
    SmearingWindows,
    TimeSampling,
)

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

DATASET_META = "dataset.yaml"
TIMES_CSV = "times.csv"
EVENTS_CSV = "events.csv"
POSITIONS_CSV = "positions.csv"
COUNTS_CSV = "counts.csv"
TRUTH_CSV = "truth.csv"
KERNELS_META = "kernels.yaml"
KERNELS_CSV = "kernels.csv"
RESULT_META = "result.yaml"
RESULT_CSV = "result.csv"
COMPARISON_CSV = "comparison.csv"
BASELINE_CSV = "baseline.csv"
TRUNCATION_CSV = "truncation.csv"
TRADEOFF_CSV = "tradeoff.csv"
LCURVE_META = "lcurve.yaml"
LCURVE_CSV = "lcurve.csv"


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return FLOAT_FORMAT % float(value)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def _read_csv(path: Path) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except FileNotFoundError:
        raise StorageError(f"missing file {path}") from None
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e


def _column(rows: list[dict[str, str]], name: str, dtype=float) -> np.ndarray:
    try:
        return np.array([dtype(r[name]) for r in rows], dtype=dtype)
    except (KeyError, ValueError) as e:
        raise StorageError(f"bad or missing column {name!r}: {e}") from e


def _write_meta(path: Path, kind: str, body: dict) -> None:
    meta = {"schema_version": SCHEMA_VERSION, "kind": kind, **body}
    try:
        with open(path, "w") as f:
            yaml.safe_dump(meta, f, sort_keys=False)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def _read_meta(path: Path, kind: str | None = None) -> dict:
    try:
        with open(path) as f:
            meta = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise StorageError(f"missing metadata file {path}") from None
    except (OSError, yaml.YAMLError) as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    if kind is not None and meta.get("kind") != kind:
        raise StorageError(f"{path} holds {meta.get('kind')!r}, expected {kind!r}")
    return meta


def _matrix_rows(entries: np.ndarray) -> list[tuple]:
    dim = entries.shape[0]
    return [(n, m, entries[n, m].real, entries[n, m].imag) for n in range(dim) for m in range(dim)]


def _read_matrix(rows: list[dict[str, str]], real: str = "real", imag: str = "imag") -> np.ndarray:
    n, m = _column(rows, "n", int), _column(rows, "n_prime", int)
    dim = int(max(n.max(), m.max())) + 1 if rows else 0
    out = np.zeros((dim, dim), dtype=complex)
    out[n, m] = _column(rows, real) + 1j * _column(rows, imag)
    return out


class StorageService:
    """Reads and writes one output directory."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)

    def _ensure(self) -> Path:
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"cannot create output directory {self.directory}: {e}") from e
        return self.directory

    # --- Datasets ---

    def write_dataset(self, dataset: MeasurementDataset, truth: DensityMatrix | None = None,
                      extra: dict | None = None) -> Path:
        out = self._ensure()
        if isinstance(dataset, RawEvents):
            timing = dataset.timing
            body = {
                "mode": "events",
                "bounds": [float(b) for b in dataset.bounds],
                "events_per_time": [int(n) for n in sorted(set(dataset.totals.tolist()))],
            }
            _write_csv(out / EVENTS_CSV, ["time_index", "time", "position"],
                       ((k, t, x) for k, (t, xs) in enumerate(zip(timing.times, dataset.events)) for x in xs))
        else:
            g = dataset.geometry
            timing = g.timing
            windows = dataset.windows or SmearingWindows()
            body = {
                "mode": "grid",
                "total": int(dataset.total),
                "sigma_t": float(windows.sigma_t),
                "sigma_x": float(windows.sigma_x),
            }
            _write_csv(out / POSITIONS_CSV, ["index", "position", "weight"],
                       zip(range(g.positions.size), g.positions, g.position_weights))
            n_t, n_x = dataset.counts.shape
            _write_csv(out / COUNTS_CSV, ["time_index", "position_index", "count"],
                       ((k, l, int(dataset.counts[k, l])) for k in range(n_t) for l in range(n_x)))
        body["duration"] = float(timing.duration)
        body["stationary"] = bool(timing.stationary)
        body["has_truth"] = truth is not None
        body.update(extra or {})
        _write_csv(out / TIMES_CSV, ["index", "time", "weight"],
                   zip(range(len(timing)), timing.times, timing.weights))
        if truth is not None:
            _write_csv(out / TRUTH_CSV, ["n", "n_prime", "real", "imag"], _matrix_rows(truth.entries))
        _write_meta(out / DATASET_META, "dataset", body)
        log.info("Wrote %s dataset to %s", body["mode"], out)
        return out

    def read_dataset(self) -> tuple[MeasurementDataset, DensityMatrix | None, dict]:
        meta = _read_meta(self.directory / DATASET_META, "dataset")
        times = _read_csv(self.directory / TIMES_CSV)
        timing = TimeSampling(_column(times, "time"), _column(times, "weight"),
                              float(meta["duration"]), stationary=bool(meta.get("stationary", False)))

        if meta.get("mode") == "events":
            rows = _read_csv(self.directory / EVENTS_CSV)
            index, positions = _column(rows, "time_index", int), _column(rows, "position")
            if rows and not np.allclose(_column(rows, "time"), timing.times[index], rtol=1e-12, atol=1e-12):
                raise StorageError(f"{EVENTS_CSV} times disagree with {TIMES_CSV}")
            events = tuple(positions[index == k] for k in range(len(timing)))
            dataset = RawEvents(timing, events, tuple(meta["bounds"]))
        elif meta.get("mode") == "grid":
            rows = _read_csv(self.directory / POSITIONS_CSV)
            geometry = MeasurementGeometry(_column(rows, "position"), _column(rows, "weight"), timing)
            cells = _read_csv(self.directory / COUNTS_CSV)
            counts = np.zeros(geometry.shape, dtype=np.int64)
            counts[_column(cells, "time_index", int), _column(cells, "position_index", int)] = \
                _column(cells, "count", int)
            windows = SmearingWindows(float(meta.get("sigma_t", 0.0)), float(meta.get("sigma_x", 0.0)))
            dataset = GridCounts(geometry, counts, int(meta["total"]), None if windows.is_trivial else windows)
        else:
            raise StorageError(f"unknown dataset mode {meta.get('mode')!r}")

        truth = None
        if meta.get("has_truth"):
            truth = DensityMatrix(_read_matrix(_read_csv(self.directory / TRUTH_CSV)))
        log.info("Read %s dataset from %s", meta["mode"], self.directory)
        return dataset, truth, meta

    # --- Kernels ---

    def write_kernels(self, kernel_sets: Sequence[SamplingKernelSet], x: np.ndarray,
                      times: Sequence[float] | None = None,
                      pairs: Sequence[tuple[int, int]] | None = None) -> Path:
        """Kernel values on ``x``; space-time kernels at each of ``times``, spatial ones once (time = nan)."""
        out = self._ensure()
        rows = []
        sets = []
        for kset in kernel_sets:
            spatial = times is None
            for t in ([float("nan")] if spatial else times):
                values = kset.evaluate(x, 0.0 if spatial else t)
                for i, (n, m) in enumerate(kset.index_map):
                    if pairs is not None and (n, m) not in pairs:
                        continue
                    omega = kset.omega if kset.omega is not None else float("nan")
                    rows.extend((n, m, omega, t, xv, v.real, v.imag) for xv, v in zip(x, values[i]))
            sets.append({
                "omega": None if kset.omega is None else float(kset.omega),
                "elements": [list(p) for p in kset.index_map],
                "condition_estimate": float(kset.condition_estimate),
                "biorthogonality_error": kset.biorthogonality_error(),
            })
        _write_csv(out / KERNELS_CSV, ["n", "n_prime", "omega", "time", "x", "real", "imag"], rows)
        _write_meta(out / KERNELS_META, "kernels", {
            "kernel_kind": kernel_sets[0].kind.name.lower(),
            "regularization": kernel_sets[0].regularization.describe(),
            "max_condition_estimate": max(s["condition_estimate"] for s in sets),
            "max_biorthogonality_error": max(s["biorthogonality_error"] for s in sets),
            "sets": sets,
        })
        log.info("Wrote %d kernel sets (%d rows) to %s", len(sets), len(rows), out)
        return out

    def read_kernel_table(self) -> list[dict[str, float]]:
        _read_meta(self.directory / KERNELS_META, "kernels")
        return [{k: float(v) for k, v in r.items()} for r in _read_csv(self.directory / KERNELS_CSV)]

    # --- Results ---

    def write_result(self, result: ReconstructionResult, truth: DensityMatrix | None = None,
                     extra: dict | None = None) -> Path:
        out = self._ensure()
        est = result.estimate.entries
        dim = est.shape[0]
        bias = result.bias if result.bias is not None else np.full((dim, dim), np.nan + 0j)
        rows = [
            (n, m, est[n, m].real, est[n, m].imag, result.std_real[n, m], result.std_imag[n, m],
             result.std_total[n, m], bool(result.covered[n, m]), bias[n, m].real, bias[n, m].imag)
            for n in range(dim) for m in range(dim)
        ]
        _write_csv(out / RESULT_CSV, ["n", "n_prime", "real", "imag", "std_real", "std_imag", "std_total",
                                      "covered", "bias_real", "bias_imag"], rows)
        d = result.diagnostics
        body = {
            "n_max": dim - 1,
            "trace": d.trace,
            "min_eigenvalue": d.min_eigenvalue,
            "condition_estimate": d.condition_estimate,
            "regularization": dict(d.regularization),
            "asymmetry": d.asymmetry,
            "negative_diagonals": list(d.negative_diagonals),
            "has_bias": result.bias is not None,
        }
        if truth is not None:
            body["max_abs_error"] = self.write_comparison(result, truth)
        body.update(extra or {})
        _write_meta(out / RESULT_META, "result", body)
        log.info("Wrote reconstruction (n_max=%d) to %s", dim - 1, out)
        return out

    def write_comparison(self, result: ReconstructionResult, truth: DensityMatrix) -> float:
        """Estimate against truth with z-scores per part; returns the largest absolute deviation."""
        est = result.estimate.entries
        dim = est.shape[0]
        ref = truth.padded(dim - 1).entries
        diff = est - ref
        with np.errstate(divide="ignore", invalid="ignore"):
            z_re = np.where(result.std_real > 0, diff.real / result.std_real, np.nan)
            z_im = np.where(result.std_imag > 0, diff.imag / result.std_imag, np.nan)
        rows = [
            (n, m, est[n, m].real, est[n, m].imag, ref[n, m].real, ref[n, m].imag,
             result.std_real[n, m], result.std_imag[n, m], z_re[n, m], z_im[n, m])
            for n in range(dim) for m in range(dim)
        ]
        _write_csv(self._ensure() / COMPARISON_CSV,
                   ["n", "n_prime", "estimate_real", "estimate_imag", "truth_real", "truth_imag",
                    "std_real", "std_imag", "z_real", "z_imag"], rows)
        return float(np.max(np.abs(diff)))

    def read_result(self) -> ReconstructionResult:
        meta = _read_meta(self.directory / RESULT_META, "result")
        rows = _read_csv(self.directory / RESULT_CSV)
        estimate = _read_matrix(rows)
        std_re = _read_matrix(rows, "std_real", "std_imag").real
        std_im = _read_matrix(rows, "std_imag", "std_real").real
        covered = _read_matrix(rows, "covered", "covered").real.astype(bool)
        bias = _read_matrix(rows, "bias_real", "bias_imag") if meta.get("has_bias") else None
        diagnostics = Diagnostics(
            trace=float(meta["trace"]),
            min_eigenvalue=float(meta["min_eigenvalue"]),
            condition_estimate=float(meta["condition_estimate"]),
            regularization=dict(meta["regularization"]),
            asymmetry=float(meta["asymmetry"]),
            negative_diagonals=tuple(meta.get("negative_diagonals", ())),
        )
        return ReconstructionResult(DensityMatrix(estimate), estimate, std_re, std_im, covered, diagnostics, bias)

    def write_baseline(self, result: ReconstructionResult, baseline: ReconstructionResult,
                       truth: DensityMatrix | None = None) -> dict[str, float]:
        """Populations and their std next to the time-averaged baseline; returns summary ratios."""
        est, ref = result.estimate.diagonal, baseline.estimate.diagonal
        std, ref_std = np.diag(result.std_total), np.diag(baseline.std_total)
        dim = est.size
        target = truth.padded(dim - 1).diagonal if truth is not None else np.full(dim, np.nan)
        _write_csv(self._ensure() / BASELINE_CSV,
                   ["n", "estimate", "std", "baseline", "baseline_std", "truth"],
                   zip(range(dim), est, std, ref, ref_std, target))
        summary = {"baseline_std_ratio": float(np.linalg.norm(std) / np.linalg.norm(ref_std))}
        if truth is not None:
            summary["baseline_error_ratio"] = float(np.linalg.norm(est - target) / np.linalg.norm(ref - target))
        return summary

    def write_truncation(self, offsets: np.ndarray) -> float:
        """Predicted truncation offsets per element; returns the largest magnitude."""
        _write_csv(self._ensure() / TRUNCATION_CSV, ["n", "n_prime", "real", "imag"], _matrix_rows(offsets))
        return float(np.max(np.abs(offsets))) if offsets.size else 0.0

    # --- L-curve ---

    def write_lcurve(self, curve: LCurve) -> Path:
        out = self._ensure()
        _write_csv(out / LCURVE_CSV, ["lambda", "residual_norm", "solution_norm"],
                   ((p.lam, p.residual_norm, p.solution_norm) for p in curve.points))
        _write_meta(out / LCURVE_META, "lcurve", {"corner": curve.corner, "points": len(curve.points)})
        log.info("Wrote L-curve (%d points, corner %s) to %s", len(curve.points), curve.corner, out)
        return out

    def write_tradeoff(self, rows: Sequence) -> Path:
        """Bias and std norms per lambda, rows as produced by the regularization sweep."""
        out = self._ensure()
        _write_csv(out / TRADEOFF_CSV, ["lambda", "bias_norm", "std_norm"],
                   ((r.lam, r.bias_norm, r.std_norm) for r in rows))
        return out

    def read_lcurve(self) -> LCurve:
        meta = _read_meta(self.directory / LCURVE_META, "lcurve")
        rows = _read_csv(self.directory / LCURVE_CSV)
        points = [LCurvePoint(float(r["lambda"]), float(r["residual_norm"]), float(r["solution_norm"]))
                  for r in rows]
        return LCurve(points, meta.get("corner"))
