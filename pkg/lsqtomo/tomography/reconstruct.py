"""Density-matrix estimates from measured distributions, with predicted errors and diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum, auto
from typing import Callable, Protocol, Sequence

import numpy as np
from numpy.typing import ArrayLike

from lsqtomo.errors import ConfigError, GeometryMismatchError
from lsqtomo.tomography.kernels import (
    ContaminationTable,
    KernelKind,
    SamplingKernelSet,
    class_kernel_sets,
    contamination_matrix,
    frequency_classes,
    time_biorthonormal,
)
from lsqtomo.tomography.lsq_core import DEFAULT_BIAS_REPLICATES, bias_estimate
from lsqtomo.tomography.oscillators import OscillatorModel, build_grid
from lsqtomo.tomography.rng import Seed
from lsqtomo.tomography.simulator import (
    DensityMatrix,
    DistributionTable,
    GridCounts,
    MeasurementGeometry,
    RawEvents,
    TimeSampling,
)

log = logging.getLogger(__name__)

FREQUENCY_TOL = 1e-9
PERIOD_TOL = 1e-9

Source = DistributionTable | RawEvents | GridCounts


class ProjectionScheme(Enum):
    PERIOD = auto()
    BIORTHONORMAL = auto()


@dataclass(frozen=True, eq=False)
class ProjectedDistribution:
    """p^(k) as point masses: mass_j = quantum_j * count_j at positions_j.

    Stochastic sources contribute one quantum per recorded count, which is what the
    variance propagation needs; exact tables carry their quadrature mass with count 1.
    """

    omega: float
    positions: np.ndarray
    quanta: np.ndarray
    counts: np.ndarray
    position_weights: np.ndarray | None = None
    stochastic: bool = False

    @property
    def masses(self) -> np.ndarray:
        return self.quanta * self.counts

    def values(self) -> np.ndarray:
        """p^(k)(x_l) for table sources."""
        if self.position_weights is None:
            raise ConfigError("projected values are only defined for tabulated sources")
        return self.masses / self.position_weights


@dataclass(frozen=True)
class Diagnostics:
    trace: float
    min_eigenvalue: float
    condition_estimate: float
    regularization: dict
    asymmetry: float
    negative_diagonals: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    estimate: DensityMatrix
    raw: np.ndarray
    std_real: np.ndarray
    std_imag: np.ndarray
    covered: np.ndarray
    diagnostics: Diagnostics
    bias: np.ndarray | None = None

    @property
    def std_total(self) -> np.ndarray:
        return np.hypot(self.std_real, self.std_imag)

    def with_bias(self, bias: np.ndarray) -> ReconstructionResult:
        return replace(self, bias=np.asarray(bias, dtype=complex))


def _timing(source: Source) -> TimeSampling:
    if isinstance(source, RawEvents):
        return source.timing
    return source.geometry.timing


def _require_whole_periods(duration: float, frequencies: Sequence[float]) -> None:
    """The 1/T projection separates classes only when T spans whole periods of every frequency."""
    for w in frequencies:
        if abs(w) <= FREQUENCY_TOL:
            continue
        cycles = duration * abs(w) / (2 * math.pi)
        if round(cycles) < 1 or abs(cycles - round(cycles)) > PERIOD_TOL * cycles:
            raise ConfigError(
                f"interval T={duration:.6g} spans {cycles:.6g} periods of w={w:.6g}, not a whole number; "
                "use the biorthonormal scheme"
            )


def _time_weights(timing: TimeSampling, omega: float, scheme: ProjectionScheme,
                  frequencies: Sequence[float] | None) -> np.ndarray:
    """Complex weights c_k with p^(k)(x) = sum_k c_k p(x, t_k)."""
    if timing.stationary:
        if abs(omega) > FREQUENCY_TOL:
            raise ConfigError("time-averaged data only carry the w = 0 class")
        return timing.weights.astype(complex)
    if scheme is ProjectionScheme.PERIOD:
        _require_whole_periods(timing.duration, [omega, *(frequencies or ())])
        return timing.weights * np.exp(1j * omega * timing.times) / timing.duration
    if frequencies is None:
        raise ConfigError("the biorthonormal scheme needs the full list of transition frequencies")
    basis = time_biorthonormal(frequencies, timing.duration, timing.times, timing.weights)
    return timing.weights * basis.evaluate(timing.times)[basis.row_for(omega)]


def fourier_project(source: Source, omega: float, scheme: ProjectionScheme = ProjectionScheme.PERIOD,
                    frequencies: Sequence[float] | None = None) -> ProjectedDistribution:
    """Project time-dependent data onto the class of transition frequency ``omega``."""
    weights = _time_weights(_timing(source), omega, scheme, frequencies)

    if isinstance(source, DistributionTable):
        g = source.geometry
        masses = (weights @ source.values) * g.position_weights
        return ProjectedDistribution(omega, g.positions, masses, np.ones(masses.size), g.position_weights)

    if isinstance(source, GridCounts):
        g = source.geometry
        quanta = weights[:, None] / source.cell_exposure * np.outer(np.ones(len(g.timing)), g.position_weights)
        positions = np.broadcast_to(g.positions, source.counts.shape)
        return ProjectedDistribution(omega, positions.ravel(), quanta.ravel(),
                                     source.counts.ravel().astype(float), stochastic=True)

    totals = source.totals
    if np.any(totals == 0):
        raise ConfigError("every measurement time needs at least one recorded event")
    quanta = np.repeat(weights / totals, totals)
    positions = np.concatenate(source.events)
    return ProjectedDistribution(omega, positions, quanta, np.ones(positions.size), stochastic=True)


def propagate_variance(kernel: ArrayLike, counts: ArrayLike,
                       totals: ArrayLike | float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Var(Re f) = sum_l Re(K_l)^2 n_l / N_l^2 with the plug-in Var(n_l) = |n_l|; likewise Im.

    ``kernel`` has the counted cells along its last axis.
    """
    scaled = np.asarray(kernel) / totals
    counts = np.abs(np.asarray(counts, dtype=float))
    return (scaled.real ** 2) @ counts, (scaled.imag ** 2) @ counts


def _complete(raw: np.ndarray, var_re: np.ndarray, var_im: np.ndarray,
              covered: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hermitian completion; both orientations present are averaged, one is mirrored."""
    mirrored = raw.conj().T
    both = covered & covered.T
    estimate = np.where(both, 0.5 * (raw + mirrored), np.where(covered, raw, np.where(covered.T, mirrored, 0)))
    # Mirrored orientations of real data are fully correlated: the averaged variance is kept.
    v_re = np.where(both, 0.5 * (var_re + var_re.T), np.where(covered, var_re, var_re.T))
    v_im = np.where(both, 0.5 * (var_im + var_im.T), np.where(covered, var_im, var_im.T))
    return estimate, np.sqrt(v_re), np.sqrt(v_im)


def _finish(raw: np.ndarray, var_re: np.ndarray, var_im: np.ndarray, covered: np.ndarray,
            condition: float, regularization: dict) -> ReconstructionResult:
    estimate, std_re, std_im = _complete(raw, var_re, var_im, covered)
    state = DensityMatrix(estimate)
    both = covered & covered.T
    asymmetry = float(np.max(np.abs(raw - raw.conj().T)[both])) if both.any() else 0.0
    diag = state.diagonal
    negative = tuple(int(n) for n in np.flatnonzero((diag < 0) & np.diag(covered)))
    if negative:
        log.warning("negative populations at levels %s (kept, not clipped)", list(negative))
    diagnostics = Diagnostics(
        trace=float(state.trace.real),
        min_eigenvalue=state.min_eigenvalue(),
        condition_estimate=condition,
        regularization=regularization,
        asymmetry=asymmetry,
        negative_diagonals=negative,
    )
    return ReconstructionResult(state, raw, std_re, std_im, covered, diagnostics)


def reconstruct_factorable(projections: Sequence[ProjectedDistribution],
                           kernel_sets: Sequence[SamplingKernelSet]) -> ReconstructionResult:
    """rho_e = integral of K_e(x) p^(k)(x) dx for every class kernel set."""
    if not kernel_sets:
        raise ConfigError("no kernel sets to reconstruct with")
    n_max = kernel_sets[0].index_map.n_max
    dim = n_max + 1
    raw = np.zeros((dim, dim), dtype=complex)
    var_re = np.zeros((dim, dim))
    var_im = np.zeros((dim, dim))
    covered = np.zeros((dim, dim), dtype=bool)

    for kset in kernel_sets:
        if kset.kind is not KernelKind.SPATIAL_PER_CLASS or kset.index_map.n_max != n_max:
            raise ConfigError("factorable reconstruction needs per-class kernels of one truncation")
        proj = _matching_projection(projections, kset.omega)
        values = kset.evaluate(proj.positions)
        rows, cols = kset.index_map.rows, kset.index_map.cols
        raw[rows, cols] = values @ proj.masses
        if proj.stochastic:
            vr, vi = propagate_variance(values * proj.quanta, proj.counts)
            var_re[rows, cols], var_im[rows, cols] = vr, vi
        covered[rows, cols] = True

    condition = max(k.condition_estimate for k in kernel_sets)
    return _finish(raw, var_re, var_im, covered, condition, kernel_sets[0].regularization.describe())


def _matching_projection(projections: Sequence[ProjectedDistribution], omega: float) -> ProjectedDistribution:
    for proj in projections:
        if abs(proj.omega - omega) <= FREQUENCY_TOL * max(1.0, abs(omega)):
            return proj
    raise ConfigError(f"no projected distribution for the class w={omega:.9g}")


def reconstruct_by_class(source: Source, kernel_sets: Sequence[SamplingKernelSet], model: OscillatorModel,
                         scheme: ProjectionScheme = ProjectionScheme.PERIOD) -> ReconstructionResult:
    """Project ``source`` onto every kernel class and reconstruct."""
    if not kernel_sets:
        raise ConfigError("no kernel sets to reconstruct with")
    n_max = kernel_sets[0].index_map.n_max
    frequencies = [c.omega for c in frequency_classes(model, n_max)]
    projections = [fourier_project(source, k.omega, scheme, frequencies) for k in kernel_sets]
    return reconstruct_factorable(projections, kernel_sets)


def _check_compatible(source: Source, kernels: SamplingKernelSet) -> None:
    if kernels.kind is KernelKind.SPATIAL_PER_CLASS:
        raise ConfigError("space-time reconstruction needs space-time kernels")
    if isinstance(source, RawEvents):
        if not kernels.geometry.timing.matches(source.timing):
            raise GeometryMismatchError("event times do not match the kernel time grid")
        if kernels.kind is KernelKind.SMEARED_SPACE_TIME:
            raise GeometryMismatchError("smeared kernels need gridded counts")
        return
    if not kernels.geometry.matches(source.geometry):
        raise GeometryMismatchError("dataset geometry does not match the kernel geometry")
    data_windows = source.windows if isinstance(source, GridCounts) else None
    data_smeared = data_windows is not None and not data_windows.is_trivial
    if data_smeared != (kernels.kind is KernelKind.SMEARED_SPACE_TIME):
        raise GeometryMismatchError("dataset and kernels disagree on instrument smearing")
    if data_smeared and data_windows != kernels.windows:
        raise GeometryMismatchError(f"dataset windows {data_windows} differ from kernel windows {kernels.windows}")


def statistical_errors(kernels: SamplingKernelSet, dataset: Source) -> tuple[np.ndarray, np.ndarray]:
    """Predicted std of Re and Im of every element of ``kernels.index_map``; zero for exact tables."""
    size = len(kernels.index_map)
    if isinstance(dataset, DistributionTable):
        return np.zeros(size), np.zeros(size)
    if isinstance(dataset, GridCounts):
        timing = dataset.geometry.timing
        if dataset.total <= 0:
            raise ConfigError("zero total count")
        table = kernels.table.reshape(size, -1)
        var_re, var_im = propagate_variance(table, dataset.counts.ravel(), dataset.total / timing.duration)
        return np.sqrt(var_re), np.sqrt(var_im)

    var_re, var_im = np.zeros(size), np.zeros(size)
    for t, u, xs in zip(dataset.timing.times, dataset.timing.weights, dataset.events):
        if xs.size == 0:
            raise ConfigError(f"zero events recorded at t={t}")
        vr, vi = propagate_variance(u * kernels.evaluate(xs, float(t)), np.ones(xs.size), xs.size)
        var_re += vr
        var_im += vi
    return np.sqrt(var_re), np.sqrt(var_im)


def reconstruct_spacetime(source: Source, kernels: SamplingKernelSet) -> ReconstructionResult:
    """rho_e = sum_{k,l} u_k w_l K_e(x_l, t_k) p(x_l, t_k), or its event-average form."""
    _check_compatible(source, kernels)
    if isinstance(source, RawEvents):
        vector = kernels.estimate_events(source.timing, source.events)
    elif isinstance(source, GridCounts):
        vector = kernels.estimate(source.estimate().values)
    else:
        vector = kernels.estimate(source.values)
    std_re, std_im = statistical_errors(kernels, source)

    dim = kernels.index_map.n_max + 1
    rows, cols = kernels.index_map.rows, kernels.index_map.cols
    raw = np.zeros((dim, dim), dtype=complex)
    var_re, var_im = np.zeros((dim, dim)), np.zeros((dim, dim))
    covered = np.zeros((dim, dim), dtype=bool)
    raw[rows, cols] = vector
    var_re[rows, cols], var_im[rows, cols] = std_re ** 2, std_im ** 2
    covered[rows, cols] = True
    return _finish(raw, var_re, var_im, covered, kernels.condition_estimate, kernels.regularization.describe())


# -- systematic errors --------------------------------------------------------------------


def truncation_error(state: DensityMatrix, tables: Sequence[ContaminationTable], n_max: int) -> np.ndarray:
    """Predicted offsets sum over probes of rho_{m,m'} times the kernel overlap, per element."""
    offsets = np.zeros((n_max + 1, n_max + 1), dtype=complex)
    for table in tables:
        weights = np.array([
            state.entries[m, mp] if max(m, mp) <= state.n_max else 0.0 for m, mp in table.probes
        ], dtype=complex)
        contribution = table.overlaps @ weights if weights.size else np.zeros(len(table.elements))
        for (n, np_), value in zip(table.elements, contribution):
            offsets[n, np_] = value
    return offsets


class Pipeline(Protocol):
    """Forward model and solver for bias estimation.

    ``replicate`` must be linear in ``state`` on average: no clipping, no renormalization.
    """

    def replicate(self, state: DensityMatrix, seed: Seed) -> Source: ...

    def solve(self, dataset: Source) -> ReconstructionResult: ...


def regularization_bias(pipeline: Pipeline, result: ReconstructionResult,
                        replicates: int = DEFAULT_BIAS_REPLICATES, seed: Seed = 0) -> np.ndarray:
    """Mean of reconstructions from data synthesized out of ``result`` minus ``result`` itself."""
    return bias_estimate(
        solve=lambda dataset: pipeline.solve(dataset).estimate.entries,
        forward_model=lambda entries, child: pipeline.replicate(DensityMatrix(entries), child),
        solution=result.estimate.entries,
        replicates=replicates,
        seed=seed,
    )


def resolution_bias(state: DensityMatrix, kernel_sets: Sequence[SamplingKernelSet]) -> np.ndarray:
    """Noise-free bias (C G - 1) rho of ``state`` for each kernel set, Hermitian-completed."""
    rho = state.entries
    dim = rho.shape[0]
    raw = np.zeros((dim, dim), dtype=complex)
    covered = np.zeros((dim, dim), dtype=bool)
    for kset in kernel_sets:
        if kset.index_map.n_max != dim - 1:
            raise GeometryMismatchError(f"kernel truncation {kset.index_map.n_max} differs from the state's {dim - 1}")
        rows, cols = kset.index_map.rows, kset.index_map.cols
        vector = rho[rows, cols]
        raw[rows, cols] = kset.coefficients @ (kset.gram @ vector) - vector
        covered[rows, cols] = True
    zeros = np.zeros((dim, dim))
    bias, _, _ = _complete(raw, zeros, zeros, covered)
    return bias


@dataclass(frozen=True, eq=False)
class DiscretizationReport:
    max_abs: float
    difference: np.ndarray


def discretization_error(geometry: MeasurementGeometry,
                         make_table: Callable[[MeasurementGeometry], DistributionTable],
                         make_kernels: Callable[[MeasurementGeometry], SamplingKernelSet]) -> DiscretizationReport:
    """Exact-data reconstructions on ``geometry`` and on its doubled-resolution refinement, compared."""
    coarse = reconstruct_spacetime(make_table(geometry), make_kernels(geometry))
    fine_geometry = geometry.refined()
    fine = reconstruct_spacetime(make_table(fine_geometry), make_kernels(fine_geometry))
    difference = fine.estimate.entries - coarse.estimate.entries
    return DiscretizationReport(float(np.max(np.abs(difference))), difference)


@dataclass(frozen=True)
class TruncationScanRow:
    n_max: int
    statistical_norm: float
    systematic_norm: float


def truncation_scan(state: DensityMatrix, model: OscillatorModel, source: Source, n_values: Sequence[int],
                    probe_max: int, classes: str = "diagonal",
                    scheme: ProjectionScheme = ProjectionScheme.PERIOD) -> list[TruncationScanRow]:
    """Per truncation level: norm of predicted std against norm of the predicted truncation offsets.

    The useful n_max is the smallest one whose systematic norm falls below the statistical one.
    """
    rows = []
    for n_max in n_values:
        grid = build_grid(model, n_max)
        kernel_sets = class_kernel_sets(model, n_max, grid, classes)
        result = reconstruct_by_class(source, kernel_sets, model, scheme)
        tables = [contamination_matrix(k, model, probe_max) for k in kernel_sets]
        offsets = truncation_error(state, tables, n_max)
        stat = float(np.linalg.norm(result.std_total[result.covered]))
        syst = float(np.linalg.norm(offsets))
        log.debug("n_max=%d: statistical %.3e, systematic %.3e", n_max, stat, syst)
        rows.append(TruncationScanRow(n_max, stat, syst))
    return rows
