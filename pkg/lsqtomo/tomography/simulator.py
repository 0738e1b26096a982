"""Ground-truth states, their evolution, position distributions and simulated measurements."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum, auto

import numpy as np
from numpy.typing import ArrayLike
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import eigvalsh, expm
from scipy.stats import norm

from lsqtomo.errors import ConfigError, GeometryMismatchError
from lsqtomo.tomography.oscillators import (
    OscillatorModel,
    SpatialGrid,
    bound_state_count,
    composite_gauss_legendre,
    eigenfrequencies,
    eigenfunctions,
)
from lsqtomo.tomography.rng import Seed, derive_rng

log = logging.getLogger(__name__)

GROUND_TRUTH_TOL = 1e-12
NEGATIVE_NOISE_TOL = 1e-12
NORMALIZATION_TOL = 1e-6
SMEARING_PADDING = 6.5  # window widths; Gaussian mass beyond this is < 1e-10
TIME_MATCH_TOL = 1e-12


# -- states -------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=complex)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ConfigError(f"density matrix must be square, got shape {entries.shape}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def pure(cls, amplitudes: ArrayLike) -> DensityMatrix:
        c = np.asarray(amplitudes, dtype=complex)
        return cls(np.outer(c, c.conj()))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def n_max(self) -> int:
        return self.dim - 1

    @property
    def trace(self) -> complex:
        return complex(np.trace(self.entries))

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.entries).real.copy()

    def asymmetry(self) -> float:
        """max |rho - rho^H|."""
        return float(np.max(np.abs(self.entries - self.entries.conj().T)))

    def hermitian_part(self) -> DensityMatrix:
        return DensityMatrix(0.5 * (self.entries + self.entries.conj().T))

    def min_eigenvalue(self) -> float:
        return float(eigvalsh(self.hermitian_part().entries)[0])

    def truncated(self, n_max: int) -> DensityMatrix:
        if n_max > self.n_max:
            raise ConfigError(f"cannot truncate a {self.dim}-level state to n_max={n_max}")
        return DensityMatrix(self.entries[: n_max + 1, : n_max + 1])

    def padded(self, n_max: int) -> DensityMatrix:
        out = np.zeros((n_max + 1, n_max + 1), dtype=complex)
        k = min(n_max, self.n_max) + 1
        out[:k, :k] = self.entries[:k, :k]
        return DensityMatrix(out)

    def check_physical(self, tol: float = GROUND_TRUTH_TOL) -> None:
        """Ground-truth contract: Hermitian, unit trace, positive semidefinite."""
        if self.asymmetry() > tol:
            raise ConfigError(f"state is not Hermitian (asymmetry {self.asymmetry():.2e})")
        if abs(self.trace - 1) > tol:
            raise ConfigError(f"state trace {self.trace.real:.15f} is not 1")
        if self.min_eigenvalue() < -tol:
            raise ConfigError(f"state has negative eigenvalue {self.min_eigenvalue():.2e}")


def prepare_state(alpha: complex, n_max: int) -> DensityMatrix:
    """Pure state with amplitudes proportional to alpha^n / sqrt(n!), n <= n_max."""
    if n_max < 0:
        raise ConfigError(f"n_max must be >= 0, got {n_max}")
    c = np.empty(n_max + 1, dtype=complex)
    c[0] = 1.0
    for n in range(1, n_max + 1):
        c[n] = c[n - 1] * alpha / math.sqrt(n)
    c /= np.linalg.norm(c)
    return DensityMatrix.pure(c)


# -- evolution ----------------------------------------------------------------------------


class LiouvillianKind(Enum):
    UNITARY = auto()
    AMPLITUDE_DAMPING = auto()


@dataclass(frozen=True)
class LiouvillianSpec:
    kind: LiouvillianKind = LiouvillianKind.UNITARY
    rate: float = 0.0

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigError(f"damping rate must be >= 0, got {self.rate}")

    @classmethod
    def unitary(cls) -> LiouvillianSpec:
        return cls()

    @classmethod
    def amplitude_damping(cls, gamma: float) -> LiouvillianSpec:
        return cls(LiouvillianKind.AMPLITUDE_DAMPING, float(gamma))


@dataclass(frozen=True, eq=False)
class Propagator:
    """U(t) acting on row-major vectorized density matrices: vec(rho)[m * dim + m'] = rho[m, m']."""

    times: np.ndarray
    tensors: np.ndarray
    n_max: int

    @property
    def dim(self) -> int:
        return self.n_max + 1

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.abs(self.times - t) <= TIME_MATCH_TOL * max(1.0, abs(t)))
        if hits.size == 0:
            raise GeometryMismatchError(f"propagator has no entry for t={t!r}")
        return int(hits[0])

    def apply(self, state: DensityMatrix, index: int) -> DensityMatrix:
        if state.dim != self.dim:
            raise GeometryMismatchError(f"state has {state.dim} levels, propagator {self.dim}")
        return DensityMatrix((self.tensors[index] @ state.entries.ravel()).reshape(self.dim, self.dim))

    def trace_error(self) -> float:
        """max over times and (n, n') of |sum_m U_{mm;nn'} - delta_nn'|."""
        diag_rows = np.arange(self.dim) * (self.dim + 1)
        traced = self.tensors[:, diag_rows, :].sum(axis=1)
        identity = np.eye(self.dim).ravel()
        return float(np.max(np.abs(traced - identity[None, :])))


def liouvillian_matrix(model: OscillatorModel, n_max: int, spec: LiouvillianSpec) -> np.ndarray:
    """-i[H, .] plus the ladder dissipator gamma (a . a^H - {a^H a, .}/2) in the energy basis.

    For Morse models the same ladder operator (a_{n-1,n} = sqrt(n)) is used on the truncated
    eigenbasis; it is trace-preserving but only illustrative of molecular relaxation.
    """
    dim = n_max + 1
    eye = np.eye(dim)
    hamiltonian = np.diag(eigenfrequencies(model, n_max))
    generator = -1j * (np.kron(hamiltonian, eye) - np.kron(eye, hamiltonian.T))
    if spec.kind is LiouvillianKind.AMPLITUDE_DAMPING and spec.rate > 0:
        lower = np.diag(np.sqrt(np.arange(1, dim)), k=1)
        number = lower.T @ lower
        generator = generator + spec.rate * (
            np.kron(lower, lower) - 0.5 * np.kron(number, eye) - 0.5 * np.kron(eye, number.T)
        )
    return generator


def build_propagator(model: OscillatorModel, n_max: int, spec: LiouvillianSpec,
                     times: ArrayLike) -> Propagator:
    times = np.asarray(times, dtype=float)
    if n_max > bound_state_count(model):
        raise ConfigError(f"n_max={n_max} exceeds the bound range of the model")
    dim = n_max + 1
    if spec.kind is LiouvillianKind.UNITARY or spec.rate == 0:
        omega = eigenfrequencies(model, n_max)
        gaps = (omega[:, None] - omega[None, :]).ravel()
        tensors = np.zeros((times.size, dim * dim, dim * dim), dtype=complex)
        idx = np.arange(dim * dim)
        tensors[:, idx, idx] = np.exp(-1j * np.outer(times, gaps))
    else:
        generator = liouvillian_matrix(model, n_max, spec)
        tensors = np.stack([expm(generator * t) for t in times])
    log.debug("propagator: %d times on %d levels (%s)", times.size, dim, spec.kind.name)
    return Propagator(times, tensors, n_max)


def evolve(state: DensityMatrix, model: OscillatorModel, t: float,
           propagator: Propagator | None = None) -> DensityMatrix:
    if propagator is not None:
        return propagator.apply(state, propagator.index_of(t))
    omega = eigenfrequencies(model, state.n_max)
    phases = np.exp(-1j * (omega[:, None] - omega[None, :]) * t)
    return DensityMatrix(state.entries * phases)


# -- geometries and tables ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeSampling:
    """Measurement times with quadrature weights over an acquisition interval of length ``duration``."""

    times: np.ndarray
    weights: np.ndarray
    duration: float
    stationary: bool = False

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if times.shape != weights.shape or times.size == 0:
            raise ConfigError("times and time weights must be non-empty and of equal length")
        if np.any(weights <= 0) or not self.duration > 0:
            raise ConfigError("time weights and duration must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.times.size

    @classmethod
    def midpoints(cls, duration: float, count: int) -> TimeSampling:
        """t_k = (k + 1/2) T / N_t with weights T / N_t."""
        if count < 1 or not duration > 0:
            raise ConfigError(f"need duration > 0 and at least one time, got T={duration}, N_t={count}")
        step = duration / count
        return cls((np.arange(count) + 0.5) * step, np.full(count, step), float(duration))

    @classmethod
    def gauss_legendre(cls, start: float, stop: float, panels: int, order: int = 8) -> TimeSampling:
        rule = composite_gauss_legendre((start, stop), panels, order)
        return cls(rule.nodes, rule.weights, float(stop - start))

    @classmethod
    def time_averaged(cls) -> TimeSampling:
        """Single pseudo-time standing for the infinite-time average."""
        return cls(np.zeros(1), np.ones(1), 1.0, stationary=True)

    def matches(self, other: TimeSampling) -> bool:
        return (self.stationary == other.stationary and self.times.shape == other.times.shape
                and np.allclose(self.times, other.times, rtol=0, atol=1e-12)
                and np.allclose(self.weights, other.weights, rtol=1e-12, atol=0))


@dataclass(frozen=True, eq=False)
class MeasurementGeometry:
    positions: np.ndarray
    position_weights: np.ndarray
    timing: TimeSampling

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        weights = np.asarray(self.position_weights, dtype=float)
        if positions.ndim != 1 or positions.shape != weights.shape or positions.size == 0:
            raise ConfigError("positions and position weights must be equal-length vectors")
        if np.any(np.diff(positions) <= 0) or np.any(weights <= 0):
            raise ConfigError("positions must increase strictly and weights be positive")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "position_weights", weights)

    @classmethod
    def on_grid(cls, grid: SpatialGrid, timing: TimeSampling) -> MeasurementGeometry:
        return cls(grid.nodes, grid.weights, timing)

    @classmethod
    def cells(cls, bounds: tuple[float, float], count: int, timing: TimeSampling) -> MeasurementGeometry:
        """N_x equidistant measurement points on [x_min, x_max], each weighted by the spacing."""
        lo, hi = bounds
        if count < 2 or not hi > lo:
            raise ConfigError(f"need x_max > x_min and N_x >= 2, got {bounds}, {count}")
        positions = np.linspace(lo, hi, count)
        return cls(positions, np.full(count, (hi - lo) / (count - 1)), timing)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.timing), self.positions.size

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.positions[0]), float(self.positions[-1])

    def matches(self, other: MeasurementGeometry) -> bool:
        return (self.positions.shape == other.positions.shape
                and np.allclose(self.positions, other.positions, rtol=0, atol=1e-12)
                and np.allclose(self.position_weights, other.position_weights, rtol=1e-12, atol=0)
                and self.timing.matches(other.timing))

    def refined(self) -> MeasurementGeometry:
        """Doubled resolution in x and t over the same ranges."""
        lo, hi = self.bounds
        count = 2 * self.positions.size - 1
        timing = self.timing
        if not timing.stationary:
            timing = TimeSampling.midpoints(timing.duration, 2 * len(timing))
        return MeasurementGeometry.cells((lo, hi), count, timing)


@dataclass(frozen=True, eq=False)
class DistributionTable:
    """p(x_l, t_k) on a measurement geometry, shape (N_t, L)."""

    geometry: MeasurementGeometry
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.geometry.shape:
            raise GeometryMismatchError(f"table shape {values.shape} does not match geometry {self.geometry.shape}")
        object.__setattr__(self, "values", values)

    def normalization(self) -> np.ndarray:
        return self.values @ self.geometry.position_weights

    def scaled(self, factor: float) -> DistributionTable:
        return DistributionTable(self.geometry, factor * self.values)


@dataclass(frozen=True)
class SmearingWindows:
    """Gaussian instrument windows; widths are standard deviations, zero means no smearing."""

    sigma_t: float = 0.0
    sigma_x: float = 0.0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_x < 0:
            raise ConfigError(f"window widths must be >= 0, got sigma_t={self.sigma_t}, sigma_x={self.sigma_x}")

    @property
    def is_trivial(self) -> bool:
        return self.sigma_t == 0 and self.sigma_x == 0

    @property
    def time_padding(self) -> float:
        return SMEARING_PADDING * self.sigma_t

    @property
    def position_padding(self) -> float:
        return SMEARING_PADDING * self.sigma_x

    def time_window(self, s: ArrayLike) -> np.ndarray:
        """Unit-area V(s)."""
        return norm.pdf(s, scale=self.sigma_t)

    def position_window(self, s: ArrayLike) -> np.ndarray:
        """Unit-area W(s)."""
        return norm.pdf(s, scale=self.sigma_x)


def position_distribution(state: DensityMatrix, model: OscillatorModel, x: ArrayLike | SpatialGrid,
                          t: float, propagator: Propagator | None = None) -> np.ndarray:
    """p(x, t) = sum_{n,n'} psi_n(x) psi_n'(x) rho_{n,n'}(t); noise below zero is clipped."""
    positions = x.nodes if isinstance(x, SpatialGrid) else np.asarray(x, dtype=float)
    phi = eigenfunctions(model, state.n_max, positions)
    rho_t = evolve(state, model, t, propagator).entries
    return _clip_noise(np.sum(phi * (rho_t @ phi), axis=0).real)


def _clip_noise(values: np.ndarray) -> np.ndarray:
    low = float(values.min()) if values.size else 0.0
    if low < -NEGATIVE_NOISE_TOL:
        log.warning("position distribution dips to %.3e; clipping negative values", low)
    return np.maximum(values, 0.0)


def distribution_table(state: DensityMatrix, model: OscillatorModel, geometry: MeasurementGeometry,
                       propagator: Propagator | None = None, clip: bool = True) -> DistributionTable:
    """Exact p on every (t_k, x_l) of the geometry; ``clip=False`` keeps it linear in ``state``."""
    if geometry.timing.stationary:
        if propagator is not None:
            raise ConfigError("time-averaged tables are defined for unitary evolution only")
        return time_averaged_table(state, model, geometry, clip)
    phi = eigenfunctions(model, state.n_max, geometry.positions)
    values = np.empty(geometry.shape)
    for k, t in enumerate(geometry.timing.times):
        rho_t = evolve(state, model, float(t), propagator).entries
        values[k] = np.sum(phi * (rho_t @ phi), axis=0).real
    return DistributionTable(geometry, _clip_noise(values) if clip else values)


def time_averaged_table(state: DensityMatrix, model: OscillatorModel,
                        geometry: MeasurementGeometry | SpatialGrid, clip: bool = True) -> DistributionTable:
    """Infinite-time average of p: only populations survive (no degenerate transitions)."""
    if isinstance(geometry, SpatialGrid):
        geometry = MeasurementGeometry.on_grid(geometry, TimeSampling.time_averaged())
    elif not geometry.timing.stationary:
        geometry = MeasurementGeometry(geometry.positions, geometry.position_weights,
                                       TimeSampling.time_averaged())
    phi = eigenfunctions(model, state.n_max, geometry.positions)
    values = state.diagonal @ phi ** 2
    values = values[None, :]
    return DistributionTable(geometry, _clip_noise(values) if clip else values)


# -- instrument smearing ------------------------------------------------------------------


def _require_cover(source: np.ndarray, target: np.ndarray, padding: float, axis: str) -> None:
    slack = 0.01 * padding
    need_lo, need_hi = target.min() - padding, target.max() + padding
    if source.min() > need_lo + slack or source.max() < need_hi - slack:
        raise ConfigError(
            f"{axis} table covers [{source.min():.4g}, {source.max():.4g}] but smearing needs "
            f"[{need_lo:.4g}, {need_hi:.4g}]: pad the input by {padding:.4g} ({SMEARING_PADDING} widths)"
        )


def _selection(source: np.ndarray, target: np.ndarray, axis: str) -> np.ndarray:
    hits = np.abs(target[:, None] - source[None, :]) <= 1e-12 * np.maximum(1.0, np.abs(target[:, None]))
    if not np.all(hits.any(axis=1)):
        raise ConfigError(f"unsmeared {axis} axis: output points must coincide with input points")
    first = hits.argmax(axis=1)
    out = np.zeros((target.size, source.size))
    out[np.arange(target.size), first] = 1.0
    return out


def smear_distribution(table: DistributionTable, windows: SmearingWindows,
                       target: MeasurementGeometry | None = None) -> DistributionTable:
    """p_bar(x, t) = integral of V(t' - t) W(x' - x) p(x', t') by the table's own quadrature.

    The input must extend ``SMEARING_PADDING`` window widths beyond the target range on each
    smeared axis; an unsmeared axis requires the target points to be input points.
    """
    source = table.geometry
    target = target or source
    src_t, tgt_t = source.timing.times, target.timing.times
    src_x, tgt_x = source.positions, target.positions

    if windows.sigma_x > 0:
        _require_cover(src_x, tgt_x, windows.position_padding, "position")
        spatial = windows.position_window(src_x[None, :] - tgt_x[:, None]) * source.position_weights
    else:
        spatial = _selection(src_x, tgt_x, "position")
    if windows.sigma_t > 0:
        _require_cover(src_t, tgt_t, windows.time_padding, "time")
        temporal = windows.time_window(src_t[None, :] - tgt_t[:, None]) * source.timing.weights
    else:
        temporal = _selection(src_t, tgt_t, "time")

    log.debug("smearing %s -> %s (sigma_t=%g, sigma_x=%g)", source.shape, target.shape,
              windows.sigma_t, windows.sigma_x)
    return DistributionTable(target, temporal @ table.values @ spatial.T)


# -- datasets -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RawEvents:
    """Positions recorded at each measurement time."""

    timing: TimeSampling
    events: tuple[np.ndarray, ...]
    bounds: tuple[float, float]
    seed: int | None = None

    def __post_init__(self):
        if len(self.events) != len(self.timing):
            raise GeometryMismatchError(f"{len(self.events)} event lists for {len(self.timing)} times")

    @property
    def totals(self) -> np.ndarray:
        return np.array([e.size for e in self.events])


@dataclass(frozen=True, eq=False)
class GridCounts:
    """Poisson counts n_{l,k} on measurement cells, shape (N_t, N_x).

    ``signed`` counts come from replicates of an unphysical estimate and may be negative.
    """

    geometry: MeasurementGeometry
    counts: np.ndarray
    total: int
    windows: SmearingWindows | None = None
    seed: int | None = None
    signed: bool = False

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != self.geometry.shape:
            raise GeometryMismatchError(f"counts shape {counts.shape} does not match geometry {self.geometry.shape}")
        if not self.signed and np.any(counts < 0):
            raise ConfigError("counts must be nonnegative")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def cell_exposure(self) -> np.ndarray:
        """N_tot dx dt / T per cell: expected count per unit probability density."""
        g = self.geometry
        return self.total * np.outer(g.timing.weights, g.position_weights) / g.timing.duration

    def estimate(self) -> DistributionTable:
        """p_tilde = n T / (N_tot dx dt)."""
        return DistributionTable(self.geometry, self.counts / self.cell_exposure)


MeasurementDataset = RawEvents | GridCounts


def sample_events(table: DistributionTable, events_per_time: int, seed: int) -> RawEvents:
    """Inverse-CDF draws from p(., t_k) at every time, linear between grid nodes."""
    if events_per_time < 1:
        raise ConfigError(f"events per time must be >= 1, got {events_per_time}")
    norms = table.normalization()
    worst = float(np.max(np.abs(norms - 1)))
    if worst > NORMALIZATION_TOL:
        raise ConfigError(f"distribution is not normalized (deviation {worst:.2e})")

    x = table.geometry.positions
    events = []
    for k, p in enumerate(table.values):
        cdf = cumulative_trapezoid(p, x, initial=0.0)
        cdf /= cdf[-1]
        u = derive_rng(seed, k).random(events_per_time)
        events.append(np.interp(u, cdf, x))
    log.debug("sampled %d events at each of %d times", events_per_time, len(events))
    return RawEvents(table.geometry.timing, tuple(events), table.geometry.bounds, seed)


def grid_counts(table: DistributionTable, total: int, seed: int,
                windows: SmearingWindows | None = None) -> GridCounts:
    """Independent Poisson counts with mean N_tot (dx dt / T) p_bar(x_l, t_k).

    ``table`` holds the (already smeared) distribution at the measurement cells.
    """
    if total < 1:
        raise ConfigError(f"total event count must be >= 1, got {total}")
    geometry = table.geometry
    exposure = total * np.outer(geometry.timing.weights, geometry.position_weights) / geometry.timing.duration
    mean = exposure * np.clip(table.values, 0.0, None)
    counts = np.empty(mean.shape, dtype=np.int64)
    for k in range(mean.shape[0]):
        counts[k] = derive_rng(seed, k).poisson(mean[k])
    log.debug("gridded %d counts (expected %.1f)", int(counts.sum()), float(mean.sum()))
    return GridCounts(geometry, counts, total, windows, seed)


def signed_counts(table: DistributionTable, total: int, seed: Seed,
                  windows: SmearingWindows | None = None) -> GridCounts:
    """Counts with mean N_tot (dx dt / T) p_bar for any real p_bar, negative values included.

    Each cell draws Poisson(|mean|) and carries the sign of its mean, so the expected counts
    are linear in the table.
    """
    if total < 1:
        raise ConfigError(f"total event count must be >= 1, got {total}")
    geometry = table.geometry
    exposure = total * np.outer(geometry.timing.weights, geometry.position_weights) / geometry.timing.duration
    mean = exposure * table.values
    counts = np.empty(mean.shape, dtype=np.int64)
    for k in range(mean.shape[0]):
        counts[k] = np.sign(mean[k]).astype(np.int64) * derive_rng(seed, k).poisson(np.abs(mean[k]))
    negative = int(np.count_nonzero(mean < 0))
    if negative:
        log.debug("%d cells with negative expected counts", negative)
    return GridCounts(geometry, counts, total, windows, signed=True)
