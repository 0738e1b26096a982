"""Sampling kernels: least-squares inverses of the response functions S_{n,n'}(x, t).

A response family maps density-matrix elements to the measurable distribution,

    p(x, t) = sum_e S_e(x, t) rho_e,

and a kernel set holds F = G^-1 (or its regularized form) for the Gram matrix
G_ef = sum_{k,l} u_k w_l conj(S_e(x_l, t_k)) S_f(x_l, t_k) on a measurement geometry.
Kernels K_e = sum_f F_ef conj(S_f) are evaluated on demand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum, auto
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike

from lsqtomo.errors import ConfigError, GeometryMismatchError, LevelOutOfRangeError, QuasiSingularError
from lsqtomo.tomography.lsq_core import RegularizationConfig, condition_number, normal_inverse
from lsqtomo.tomography.oscillators import (
    OscillatorKind,
    OscillatorModel,
    SpatialGrid,
    bound_state_count,
    build_grid,
    eigenfrequencies,
    eigenfunctions,
)
from lsqtomo.tomography.simulator import MeasurementGeometry, Propagator, SmearingWindows, TimeSampling

log = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-9


class KernelKind(Enum):
    SPATIAL_PER_CLASS = auto()
    SPACE_TIME = auto()
    SMEARED_SPACE_TIME = auto()


@dataclass(frozen=True, eq=False)
class ElementIndexMap:
    """Ordered element pairs (n, n').

    ``hermitian`` maps hold only pairs with n <= n'; the conjugates are filled in downstream.
    """

    pairs: tuple[tuple[int, int], ...]
    n_max: int
    hermitian: bool = False

    def __post_init__(self):
        pairs = tuple((int(n), int(m)) for n, m in self.pairs)
        if len(set(pairs)) != len(pairs):
            raise ConfigError("element index map contains duplicate pairs")
        for n, m in pairs:
            if not (0 <= n <= self.n_max and 0 <= m <= self.n_max):
                raise ConfigError(f"pair ({n}, {m}) outside 0..{self.n_max}")
        if self.hermitian and any(n > m for n, m in pairs):
            raise ConfigError("hermitian index map stores pairs with n <= n' only")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def full(cls, n_max: int) -> ElementIndexMap:
        """All (n_max + 1)^2 ordered pairs, row-major."""
        return cls(tuple((n, m) for n in range(n_max + 1) for m in range(n_max + 1)), n_max)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self.pairs)

    @cached_property
    def _positions(self) -> dict[tuple[int, int], int]:
        return {pair: i for i, pair in enumerate(self.pairs)}

    def index(self, pair: tuple[int, int]) -> int:
        try:
            return self._positions[tuple(pair)]
        except KeyError:
            raise ConfigError(f"pair {pair} is not reconstructed by this kernel set") from None

    @property
    def rows(self) -> np.ndarray:
        return np.array([n for n, _ in self.pairs], dtype=int)

    @property
    def cols(self) -> np.ndarray:
        return np.array([m for _, m in self.pairs], dtype=int)


@dataclass(frozen=True)
class FrequencyClass:
    omega: float
    members: tuple[tuple[int, int], ...]

    def index_map(self, n_max: int) -> ElementIndexMap:
        return ElementIndexMap(self.members, n_max)


def response_function(model: OscillatorModel, n: int, n_prime: int, x: ArrayLike, t: float) -> np.ndarray:
    """S_{n,n'}(x, t) = psi_n(x) psi_n'(x) exp(-i (w_n - w_n') t)."""
    top = max(n, n_prime)
    if min(n, n_prime) < 0:
        raise LevelOutOfRangeError(min(n, n_prime), bound_state_count(model))
    phi = eigenfunctions(model, top, x)
    omega = eigenfrequencies(model, top)
    return phi[n] * phi[n_prime] * np.exp(-1j * (omega[n] - omega[n_prime]) * t)


def frequency_classes(model: OscillatorModel, n_max: int, tol: float = DEGENERACY_TOL) -> list[FrequencyClass]:
    """Partition of all ordered pairs by transition frequency, sorted by frequency.

    ``tol`` is relative to the largest level frequency; members are grouped against the
    first member of their class so near-degeneracies do not chain.
    """
    if not tol > 0:
        raise ConfigError(f"degeneracy tolerance must be > 0, got {tol}")
    omega = eigenfrequencies(model, n_max)
    absolute = tol * float(np.max(np.abs(omega)))
    pairs = [(n, m) for n in range(n_max + 1) for m in range(n_max + 1)]
    gaps = np.array([omega[n] - omega[m] for n, m in pairs])
    order = np.argsort(gaps, kind="stable")

    classes: list[FrequencyClass] = []
    group: list[int] = []
    for idx in order:
        if group and gaps[idx] - gaps[group[0]] > absolute:
            classes.append(_make_class(group, pairs, gaps))
            group = []
        group.append(int(idx))
    classes.append(_make_class(group, pairs, gaps))
    return classes


def _make_class(group: list[int], pairs: list[tuple[int, int]], gaps: np.ndarray) -> FrequencyClass:
    members = sorted((pairs[i] for i in group), key=lambda p: (p[1], p[0]))
    return FrequencyClass(float(np.mean(gaps[group])), tuple(members))


# -- response families --------------------------------------------------------------------


def _pair_products(model: OscillatorModel, index_map: ElementIndexMap, x: np.ndarray) -> np.ndarray:
    phi = eigenfunctions(model, index_map.n_max, x)
    return phi[index_map.rows] * phi[index_map.cols]


@dataclass(frozen=True, eq=False)
class SeparableResponses:
    """S_e(x, t) = X_e(x) a_e exp(-i w_e t): unitary responses, optionally instrument-smeared."""

    model: OscillatorModel
    index_map: ElementIndexMap
    amplitudes: np.ndarray | None = None
    windows: SmearingWindows | None = None
    grid: SpatialGrid | None = None
    normalize: bool = True

    def __post_init__(self):
        if self.amplitudes is None:
            object.__setattr__(self, "amplitudes", np.ones(len(self.index_map)))
        if self.windows is not None and self.windows.sigma_x > 0 and self.grid is None:
            raise ConfigError("position smearing needs a quadrature grid")

    @cached_property
    def frequencies(self) -> np.ndarray:
        omega = eigenfrequencies(self.model, self.index_map.n_max)
        return omega[self.index_map.rows] - omega[self.index_map.cols]

    @property
    def smeared(self) -> bool:
        return self.windows is not None and not self.windows.is_trivial

    def spatial(self, x: ArrayLike) -> np.ndarray:
        """X_e(x), shape (E, len(x)); the window-averaged product when sigma_x > 0."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.windows is None or self.windows.sigma_x == 0:
            return _pair_products(self.model, self.index_map, x)
        nodes, weights = self.grid.nodes, self.grid.weights
        offsets = nodes[None, :] - x[:, None]
        window = self.windows.position_window(offsets)
        if not self.normalize:
            window = window * (np.sqrt(2 * np.pi) * self.windows.sigma_x)
        return _pair_products(self.model, self.index_map, nodes) @ (window * weights).T

    def temporal(self, t: ArrayLike) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.amplitudes[:, None] * np.exp(-1j * np.outer(self.frequencies, t))

    def evaluate(self, x: ArrayLike, t: float = 0.0) -> np.ndarray:
        return self.spatial(x) * self.temporal(t)

    def gram(self, geometry: MeasurementGeometry) -> np.ndarray:
        spatial = self.spatial(geometry.positions)
        temporal = self.temporal(geometry.timing.times)
        g_x = (spatial.conj() * geometry.position_weights) @ spatial.T
        g_t = (temporal.conj() * geometry.timing.weights) @ temporal.T
        return g_x * g_t

    def project(self, values: np.ndarray, geometry: MeasurementGeometry) -> np.ndarray:
        """A^H W p: sum_{k,l} u_k w_l conj(S_e(x_l, t_k)) p_kl."""
        weighted = geometry.timing.weights[:, None] * values * geometry.position_weights[None, :]
        per_time = weighted @ self.spatial(geometry.positions).conj().T
        return np.einsum("ek,ke->e", self.temporal(geometry.timing.times).conj(), per_time)

    def project_events(self, timing: TimeSampling, events: Sequence[np.ndarray]) -> np.ndarray:
        """Event analogue of ``project``: time weight u_k / N_k per recorded position."""
        out = np.zeros(len(self.index_map), dtype=complex)
        temporal = self.temporal(timing.times).conj()
        for k, xs in enumerate(events):
            if xs.size:
                out += temporal[:, k] * self.spatial(xs).conj().sum(axis=1) * (timing.weights[k] / xs.size)
        return out


@dataclass(frozen=True, eq=False)
class DampedResponses:
    """S_e(x, t) = sum_{m,m'} psi_m(x) psi_m'(x) U_{mm';e}(t) for a master-equation propagator."""

    model: OscillatorModel
    index_map: ElementIndexMap
    propagator: Propagator

    windows = None
    smeared = False

    def __post_init__(self):
        if self.index_map.n_max != self.propagator.n_max:
            raise GeometryMismatchError(
                f"index map truncates at {self.index_map.n_max}, propagator at {self.propagator.n_max}"
            )

    @cached_property
    def _all_pairs(self) -> ElementIndexMap:
        return ElementIndexMap.full(self.propagator.n_max)

    @cached_property
    def _columns(self) -> np.ndarray:
        return self.index_map.rows * self.propagator.dim + self.index_map.cols

    def _block(self, t: float) -> np.ndarray:
        return self.propagator.tensors[self.propagator.index_of(t)][:, self._columns]

    def _products(self, x: np.ndarray) -> np.ndarray:
        return _pair_products(self.model, self._all_pairs, x)

    def evaluate(self, x: ArrayLike, t: float = 0.0) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self._block(t).T @ self._products(x)

    def gram(self, geometry: MeasurementGeometry) -> np.ndarray:
        products = self._products(geometry.positions)
        overlap = (products * geometry.position_weights) @ products.T
        out = np.zeros((len(self.index_map),) * 2, dtype=complex)
        for t, u in zip(geometry.timing.times, geometry.timing.weights):
            block = self._block(float(t))
            out += u * (block.conj().T @ overlap @ block)
        return out

    def project(self, values: np.ndarray, geometry: MeasurementGeometry) -> np.ndarray:
        products = self._products(geometry.positions)
        weighted = geometry.timing.weights[:, None] * values * geometry.position_weights[None, :]
        per_time = weighted @ products.T
        out = np.zeros(len(self.index_map), dtype=complex)
        for k, t in enumerate(geometry.timing.times):
            out += self._block(float(t)).conj().T @ per_time[k]
        return out

    def project_events(self, timing: TimeSampling, events: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros(len(self.index_map), dtype=complex)
        for k, xs in enumerate(events):
            if xs.size:
                summed = self._products(xs).sum(axis=1)
                out += self._block(float(timing.times[k])).conj().T @ summed * (timing.weights[k] / xs.size)
        return out


ResponseFamily = SeparableResponses | DampedResponses


def smeared_responses(responses: ResponseFamily, windows: SmearingWindows, grid: SpatialGrid,
                      normalize: bool = True) -> SeparableResponses:
    """S_bar_e = V_e(t) W_e(x) for Gaussian windows.

    V_e(t) = sqrt(2 pi) sigma_t exp(-sigma_t^2 w_e^2 / 2) exp(-i w_e t) in closed form and
    W_e(x) = integral of W(x' - x) X_e(x') by quadrature on ``grid``. With ``normalize`` the
    windows have unit area (the sqrt(2 pi) sigma factors drop out). A zero width is a delta window.
    """
    if isinstance(responses, DampedResponses):
        raise ConfigError("smearing is defined for unitary (separable) responses only")
    if responses.smeared:
        raise ConfigError("responses are already smeared")
    amplitudes = np.ones(len(responses.index_map))
    if windows.sigma_t > 0:
        amplitudes = np.exp(-0.5 * windows.sigma_t ** 2 * responses.frequencies ** 2)
        if not normalize:
            amplitudes = amplitudes * np.sqrt(2 * np.pi) * windows.sigma_t
    return replace(responses, amplitudes=responses.amplitudes * amplitudes,
                   windows=windows, grid=grid, normalize=normalize)


def damped_responses(propagator: Propagator, model: OscillatorModel,
                     index_map: ElementIndexMap | None = None,
                     times: ArrayLike | None = None) -> DampedResponses:
    """Responses of the propagated elements; every requested time must be tabulated in the propagator."""
    index_map = index_map or ElementIndexMap.full(propagator.n_max)
    if propagator.n_max > bound_state_count(model):
        raise GeometryMismatchError(f"propagator truncation {propagator.n_max} exceeds the bound range")
    if times is not None:
        for t in np.atleast_1d(times):
            propagator.index_of(float(t))
    return DampedResponses(model, index_map, propagator)


# -- kernel sets --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SamplingKernelSet:
    responses: ResponseFamily
    kind: KernelKind
    geometry: MeasurementGeometry
    gram: np.ndarray
    coefficients: np.ndarray
    condition_estimate: float
    regularization: RegularizationConfig = field(default_factory=RegularizationConfig.none)
    omega: float | None = None

    @property
    def index_map(self) -> ElementIndexMap:
        return self.responses.index_map

    @property
    def windows(self) -> SmearingWindows | None:
        return self.responses.windows

    def evaluate(self, x: ArrayLike, t: float = 0.0) -> np.ndarray:
        """K_e(x, t) for every element, shape (E, len(x))."""
        return self.coefficients @ self.responses.evaluate(x, t).conj()

    def kernel(self, pair: tuple[int, int], x: ArrayLike, t: float = 0.0) -> np.ndarray:
        return self.evaluate(x, t)[self.index_map.index(pair)]

    @cached_property
    def table(self) -> np.ndarray:
        """Kernel values on the geometry: (E, L) for spatial kernels, (E, N_t, L) otherwise."""
        x = self.geometry.positions
        if self.kind is KernelKind.SPATIAL_PER_CLASS:
            return self.evaluate(x)
        return np.stack([self.evaluate(x, float(t)) for t in self.geometry.timing.times], axis=1)

    def biorthogonality_error(self) -> float:
        """max |F G - I|: deviation of sum u w K_e S_f from delta_ef on the geometry."""
        product = self.coefficients @ self.gram
        return float(np.max(np.abs(product - np.eye(product.shape[0]))))

    def estimate(self, values: np.ndarray) -> np.ndarray:
        """Element estimates sum_{k,l} u_k w_l K_e(x_l, t_k) p_kl for a table on the geometry."""
        return self.coefficients @ self.responses.project(values, self.geometry)

    def estimate_events(self, timing: TimeSampling, events: Sequence[np.ndarray]) -> np.ndarray:
        return self.coefficients @ self.responses.project_events(timing, events)

    def with_regularization(self, reg: RegularizationConfig) -> SamplingKernelSet:
        return replace(self, coefficients=_invert(self.gram, reg, _hint(self.kind)), regularization=reg)


def _hint(kind: KernelKind) -> str:
    if kind is KernelKind.SPATIAL_PER_CLASS:
        return "use a regularized inversion"
    return "regularize the space-time inversion (Tikhonov or SVD truncation)"


def _invert(gram: np.ndarray, reg: RegularizationConfig, hint: str) -> np.ndarray:
    try:
        return normal_inverse(gram, reg)
    except QuasiSingularError as e:
        raise QuasiSingularError(e.condition, hint) from e


def _assemble(responses: ResponseFamily, kind: KernelKind, geometry: MeasurementGeometry,
              reg: RegularizationConfig | None, omega: float | None = None) -> SamplingKernelSet:
    reg = reg or RegularizationConfig.none()
    gram = responses.gram(geometry)
    cond = condition_number(gram)
    coefficients = _invert(gram, reg, _hint(kind))
    log.debug("%s kernels: %d elements, condition %.3e, %s",
              kind.name, len(responses.index_map), cond, reg.describe())
    return SamplingKernelSet(responses, kind, geometry, gram, coefficients, cond, reg, omega)


def _spatial_geometry(grid: SpatialGrid) -> MeasurementGeometry:
    return MeasurementGeometry.on_grid(grid, TimeSampling.time_averaged())


def harmonic_kernels(model: OscillatorModel, n_max: int, k: int, grid: SpatialGrid,
                     reg: RegularizationConfig | None = None) -> SamplingKernelSet:
    """Kernels K_n^(k)(x) for rho_{n, n+k}, n = 0 .. n_max - k; the class oscillates at -k w."""
    if model.kind is not OscillatorKind.HARMONIC:
        raise ConfigError("harmonic_kernels needs a harmonic model")
    if not 0 <= k <= n_max:
        raise ConfigError(f"diagonal index k={k} outside 0..{n_max}")
    index_map = ElementIndexMap(tuple((n, n + k) for n in range(n_max - k + 1)), n_max, hermitian=True)
    return _assemble(SeparableResponses(model, index_map), KernelKind.SPATIAL_PER_CLASS,
                     _spatial_geometry(grid), reg, omega=-k * model.frequency)


def anharmonic_kernels(model: OscillatorModel, fclass: FrequencyClass, n_max: int, grid: SpatialGrid,
                       reg: RegularizationConfig | None = None) -> SamplingKernelSet:
    if not fclass.members:
        raise ConfigError("frequency class is empty")
    if any(n > m for n, m in fclass.members):
        raise ConfigError(f"class w={fclass.omega:.6g} holds pairs with n > n'; reconstruct its conjugate class")
    index_map = ElementIndexMap(fclass.members, n_max, hermitian=True)
    return _assemble(SeparableResponses(model, index_map), KernelKind.SPATIAL_PER_CLASS,
                     _spatial_geometry(grid), reg, omega=fclass.omega)


def class_kernel_sets(model: OscillatorModel, n_max: int, grid: SpatialGrid, classes: str = "diagonal",
                      reg: RegularizationConfig | None = None) -> list[SamplingKernelSet]:
    """Kernels for the diagonal class only, or for every class with w <= 0 (pairs n <= n')."""
    if classes not in ("diagonal", "all"):
        raise ConfigError(f"classes must be 'diagonal' or 'all', got {classes!r}")
    if model.kind is OscillatorKind.HARMONIC:
        top = 0 if classes == "diagonal" else n_max
        return [harmonic_kernels(model, n_max, k, grid, reg) for k in range(top + 1)]
    found = frequency_classes(model, n_max)
    scale = DEGENERACY_TOL * float(np.max(np.abs(eigenfrequencies(model, n_max))))
    if classes == "diagonal":
        wanted = [c for c in found if abs(c.omega) <= scale]
    else:
        wanted = [c for c in found if c.omega <= scale]
    return [anharmonic_kernels(model, c, n_max, grid, reg) for c in wanted]


def spacetime_kernels(responses: ResponseFamily, geometry: MeasurementGeometry,
                      reg: RegularizationConfig | None = None) -> SamplingKernelSet:
    """Nonfactorable kernels K_e(x, t) inverting the full space-time Gram on ``geometry``."""
    if geometry.timing.stationary:
        raise ConfigError("space-time kernels need real measurement times")
    kind = KernelKind.SMEARED_SPACE_TIME if responses.smeared else KernelKind.SPACE_TIME
    return _assemble(responses, kind, geometry, reg)


# -- finite-interval time functions -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeBiorthonormal:
    """f_k(t) = sum_l F_kl exp(+i w_l t), biorthonormal to g_l(t) = exp(-i w_l t) on [0, T]."""

    frequencies: np.ndarray
    duration: float
    gram: np.ndarray
    coefficients: np.ndarray
    condition_estimate: float

    def evaluate(self, t: ArrayLike) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.coefficients @ np.exp(1j * np.outer(self.frequencies, t))

    def row_for(self, omega: float) -> int:
        """Row index of the time function selecting frequency ``omega``."""
        hits = np.flatnonzero(np.isclose(self.frequencies, omega, rtol=DEGENERACY_TOL, atol=DEGENERACY_TOL))
        if hits.size == 0:
            raise ConfigError(f"frequency {omega} is not in the biorthonormal set")
        return int(hits[0])

    def biorthogonality_error(self) -> float:
        return float(np.max(np.abs(self.coefficients @ self.gram - np.eye(self.frequencies.size))))


def time_biorthonormal(frequencies: ArrayLike, duration: float, times: ArrayLike | None = None,
                       weights: ArrayLike | None = None) -> TimeBiorthonormal:
    """Biorthonormal time functions for distinct frequencies on [0, T].

    The Gram G_kl = integral of exp(i (w_k - w_l) t) over [0, T] is evaluated in closed form;
    with ``times``/``weights`` the discrete sums of a measurement schedule are used instead.
    """
    freq = np.asarray(frequencies, dtype=float)
    if not duration > 0:
        raise ConfigError(f"interval length must be > 0, got {duration}")
    if np.unique(freq).size != freq.size:
        raise ConfigError("frequencies must be distinct")
    delta = freq[:, None] - freq[None, :]
    if times is None:
        safe = np.where(delta == 0, 1.0, delta)
        gram = np.where(delta == 0, duration, (np.exp(1j * safe * duration) - 1) / (1j * safe))
    else:
        times = np.asarray(times, dtype=float)
        weights = np.full(times.size, duration / times.size) if weights is None else np.asarray(weights, float)
        gram = np.einsum("j,klj->kl", weights, np.exp(1j * delta[:, :, None] * times[None, None, :]))
    cond = condition_number(gram)
    try:
        coefficients = normal_inverse(gram)
    except QuasiSingularError as e:
        raise QuasiSingularError(
            e.condition, "lengthen the interval T or use the nonfactorable space-time path"
        ) from e
    return TimeBiorthonormal(freq, float(duration), gram, coefficients, cond)


# -- truncation leakage -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ContaminationTable:
    """Overlaps of class kernels with above-truncation products psi_m psi_m' of the same frequency."""

    omega: float
    elements: tuple[tuple[int, int], ...]
    probes: tuple[tuple[int, int], ...]
    overlaps: np.ndarray


def contamination_matrix(kernels: SamplingKernelSet, model: OscillatorModel, n_probe_max: int,
                         grid: SpatialGrid | None = None) -> ContaminationTable:
    """int K_e(x) psi_m(x) psi_m'(x) dx for pairs (m, m') beyond n_max sharing the class frequency."""
    if kernels.kind is not KernelKind.SPATIAL_PER_CLASS:
        raise ConfigError("contamination tables are defined for per-class spatial kernels")
    n_max = kernels.index_map.n_max
    if n_probe_max <= n_max:
        raise ConfigError(f"probe range {n_probe_max} must exceed the truncation n_max={n_max}")
    if n_probe_max > bound_state_count(model):
        raise LevelOutOfRangeError(n_probe_max, bound_state_count(model))

    omega = eigenfrequencies(model, n_probe_max)
    scale = DEGENERACY_TOL * float(np.max(np.abs(omega)))
    probes = tuple(
        (m, mp) for mp in range(n_probe_max + 1) for m in range(n_probe_max + 1)
        if max(m, mp) > n_max and abs(omega[m] - omega[mp] - kernels.omega) <= scale
    )
    if grid is None:
        grid = build_grid(model, n_probe_max, cover=kernels.geometry.bounds)
    if not probes:
        overlaps = np.zeros((len(kernels.index_map), 0), dtype=complex)
    else:
        probe_map = ElementIndexMap(probes, n_probe_max)
        products = _pair_products(model, probe_map, grid.nodes)
        overlaps = (kernels.evaluate(grid.nodes) * grid.weights) @ products.T
    return ContaminationTable(float(kernels.omega), kernels.index_map.pairs, probes, overlaps)
