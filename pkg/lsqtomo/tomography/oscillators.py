"""Harmonic and Morse oscillators: spectra, eigenfunctions and the shared quadrature grid.

Units are dimensionless throughout (hbar = m = 1).  The Morse potential is
U(x) = (exp(-a x) - 1)^2 / (2 a^2), whose bound levels are

    w_n = (n + 1/2) - (a^2 / 2) (n + 1/2)^2,   n = 0 .. n_M,   n_M = floor(a^-2 - 1/2).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum, auto

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import eval_genlaguerre, gammaln

from lsqtomo.errors import ConfigError, LevelOutOfRangeError

log = logging.getLogger(__name__)

ORTHONORMALITY_TOL = 1e-8
DEFAULT_PANELS = 64
DEFAULT_ORDER = 8
MAX_PANELS = 8192
SCAN_STEP = 0.25
TAIL_MARGIN = 1.0
MAX_EXTENT = 1e4


class OscillatorKind(Enum):
    HARMONIC = auto()
    MORSE = auto()


@dataclass(frozen=True)
class OscillatorModel:
    kind: OscillatorKind
    frequency: float = 1.0
    anharmonicity: float = 0.0
    # Harmonic spectra are unbounded; this caps the levels the library will evaluate.
    max_level: int = 64

    def __post_init__(self):
        if self.kind is OscillatorKind.HARMONIC and not self.frequency > 0:
            raise ConfigError(f"harmonic frequency must be > 0, got {self.frequency}")
        if self.kind is OscillatorKind.MORSE and not self.anharmonicity > 0:
            raise ConfigError(f"Morse anharmonicity must be > 0, got {self.anharmonicity}")
        if self.max_level < 0:
            raise ConfigError(f"max_level must be >= 0, got {self.max_level}")

    @classmethod
    def harmonic(cls, frequency: float = 1.0, max_level: int = 64) -> OscillatorModel:
        return cls(OscillatorKind.HARMONIC, frequency=frequency, max_level=max_level)

    @classmethod
    def morse(cls, anharmonicity: float) -> OscillatorModel:
        return cls(OscillatorKind.MORSE, anharmonicity=anharmonicity)

    @property
    def is_morse(self) -> bool:
        return self.kind is OscillatorKind.MORSE

    def describe(self) -> dict:
        if self.is_morse:
            return {"kind": "morse", "anharmonicity": self.anharmonicity}
        return {"kind": "harmonic", "frequency": self.frequency, "max_level": self.max_level}


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Composite Gauss-Legendre rule on [x_min, x_max]."""

    nodes: np.ndarray
    weights: np.ndarray
    bounds: tuple[float, float]
    panels: int
    order: int

    def __len__(self) -> int:
        return self.nodes.size

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature along the last axis."""
        return np.asarray(values) @ self.weights

    def refined(self) -> SpatialGrid:
        return composite_gauss_legendre(self.bounds, 2 * self.panels, self.order)


def bound_state_count(model: OscillatorModel) -> int:
    """n_M for Morse (levels 0..n_M are bound); the configured cap for harmonic models."""
    if model.is_morse:
        return int(math.floor(model.anharmonicity ** -2 - 0.5))
    return model.max_level


def _check_level(model: OscillatorModel, n: int) -> None:
    limit = bound_state_count(model)
    if n < 0 or n > limit:
        raise LevelOutOfRangeError(n, limit)


def eigenfrequency(model: OscillatorModel, n: int) -> float:
    _check_level(model, n)
    return float(eigenfrequencies(model, n)[n])


def eigenfrequencies(model: OscillatorModel, n_max: int) -> np.ndarray:
    """w_0 .. w_{n_max}."""
    _check_level(model, n_max)
    half = np.arange(n_max + 1) + 0.5
    if model.is_morse:
        return half - 0.5 * model.anharmonicity ** 2 * half ** 2
    return half * model.frequency


def transition_gap(model: OscillatorModel) -> float:
    """w_1 - w_0; the unit in which the experiment captions quote times."""
    return eigenfrequency(model, 1) - eigenfrequency(model, 0)


def revival_time(model: OscillatorModel) -> float:
    """First fractional revival of a Morse wave packet; the classical period for harmonic models."""
    if not model.is_morse:
        return 2 * math.pi / model.frequency
    a = model.anharmonicity
    return 2 * math.pi * (bound_state_count(model) + 0.5) / (1 - a ** 2 / 2)


def potential(model: OscillatorModel, x: ArrayLike) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if model.is_morse:
        a = model.anharmonicity
        return np.expm1(-a * x) ** 2 / (2 * a ** 2)
    return 0.5 * model.frequency ** 2 * x ** 2


def turning_points(model: OscillatorModel, n: int) -> tuple[float, float]:
    """Classical turning points of level n."""
    energy = eigenfrequency(model, n)
    if model.is_morse:
        a = model.anharmonicity
        s = math.sqrt(2 * a ** 2 * energy)
        return -math.log1p(s) / a, -math.log1p(-s) / a
    reach = math.sqrt(2 * energy) / model.frequency
    return -reach, reach


def eigenfunctions(model: OscillatorModel, n_max: int, x: ArrayLike) -> np.ndarray:
    """Table of psi_0 .. psi_{n_max} at x, shape (n_max + 1,) + x.shape."""
    _check_level(model, n_max)
    x = np.asarray(x, dtype=float)
    if model.is_morse:
        return _morse_table(model.anharmonicity, n_max, x)
    return _hermite_table(model.frequency, n_max, x)


def eigenfunction(model: OscillatorModel, n: int, x: ArrayLike) -> np.ndarray:
    _check_level(model, n)
    return eigenfunctions(model, n, x)[n][()]


def _hermite_table(omega: float, n_max: int, x: np.ndarray) -> np.ndarray:
    # Normalized Hermite functions by upward recurrence; no factorials, no overflow.
    xi = math.sqrt(omega) * x
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = (omega / math.pi) ** 0.25 * np.exp(-0.5 * xi ** 2)
    if n_max >= 1:
        out[1] = math.sqrt(2.0) * xi * out[0]
    for n in range(1, n_max):
        out[n + 1] = math.sqrt(2.0 / (n + 1)) * xi * out[n] - math.sqrt(n / (n + 1)) * out[n - 1]
    return out


def _morse_table(a: float, n_max: int, x: np.ndarray) -> np.ndarray:
    lam = a ** -2
    log_z = math.log(2 * lam) - a * x
    z = np.exp(np.minimum(log_z, 700.0))
    out = np.empty((n_max + 1,) + x.shape)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for n in range(n_max + 1):
            b = 2 * lam - 2 * n - 1
            log_norm = 0.5 * (math.log(a) + math.log(b) + gammaln(n + 1) - gammaln(n + b + 1))
            envelope = np.exp(log_norm - 0.5 * z + 0.5 * b * log_z)
            out[n] = np.where(envelope > 0, envelope * eval_genlaguerre(n, b, z), 0.0)
    return out


def composite_gauss_legendre(bounds: tuple[float, float], panels: int,
                             order: int = DEFAULT_ORDER) -> SpatialGrid:
    lo, hi = float(bounds[0]), float(bounds[1])
    if not hi > lo or panels < 1 or order < 1:
        raise ConfigError(f"invalid quadrature layout: bounds={bounds}, panels={panels}, order={order}")
    t, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return SpatialGrid(nodes, weights, (lo, hi), panels, order)


def orthonormality_error(model: OscillatorModel, grid: SpatialGrid, n_max: int) -> float:
    """max |sum_j w_j psi_n psi_m - delta_nm| over n, m <= n_max."""
    phi = eigenfunctions(model, n_max, grid.nodes)
    overlap = (phi * grid.weights) @ phi.T
    return float(np.max(np.abs(overlap - np.eye(n_max + 1))))


def _scan_extent(model: OscillatorModel, n_max: int, tail_tol: float, direction: int) -> float:
    decades = abs(math.log(tail_tol)) + 10.0
    if not model.is_morse:
        return math.sqrt(2 * decades + 4 * n_max + 10) / math.sqrt(model.frequency) + 5.0
    a = model.anharmonicity
    if direction < 0:
        return 10.0 / a + 5.0
    # psi_n ~ exp(-a b x / 2) on the dissociation side; b shrinks with n.
    b_min = 2 * a ** -2 - 2 * n_max - 1
    return 2 * decades / (a * b_min) + 20.0


def _tail_bound(model: OscillatorModel, n_max: int, tail_tol: float, direction: int) -> float:
    left, right = turning_points(model, n_max)
    start = right if direction > 0 else left
    extent = _scan_extent(model, n_max, tail_tol, direction)
    if extent > MAX_EXTENT:
        raise ConfigError(f"eigenfunction tails decay too slowly to bound (scan extent {extent:.0f})")
    xs = start + direction * np.arange(0.0, extent, SCAN_STEP)
    peak = np.max(np.abs(eigenfunctions(model, n_max, xs)), axis=0)
    above = np.nonzero(peak >= tail_tol)[0]
    if above.size and above[-1] == xs.size - 1:
        raise ConfigError(f"|psi| stays above tail_tol={tail_tol:g} over the whole scan")
    last = above[-1] if above.size else 0
    return float(xs[last] + direction * (SCAN_STEP + TAIL_MARGIN))


def build_grid(model: OscillatorModel, n_max: int, tail_tol: float = 1e-10,
               panels: int = DEFAULT_PANELS, order: int = DEFAULT_ORDER,
               max_panels: int = MAX_PANELS,
               cover: tuple[float, float] | None = None) -> SpatialGrid:
    """Quadrature grid on which psi_0..psi_{n_max} are orthonormal to ORTHONORMALITY_TOL.

    The interval is chosen so that every |psi_n| < tail_tol outside it (and so that it
    contains ``cover`` if given); panels are doubled until the orthonormality check passes.
    """
    _check_level(model, n_max)
    if not tail_tol > 0:
        raise ConfigError(f"tail_tol must be > 0, got {tail_tol}")
    lo = _tail_bound(model, n_max, tail_tol, -1)
    hi = _tail_bound(model, n_max, tail_tol, +1)
    if not model.is_morse:
        # Symmetric grids keep the parity of the Hermite functions exact.
        half = max(-lo, hi)
        lo, hi = -half, half
    if cover is not None:
        lo, hi = min(lo, cover[0]), max(hi, cover[1])

    while True:
        grid = composite_gauss_legendre((lo, hi), panels, order)
        err = orthonormality_error(model, grid, n_max)
        log.debug("grid [%.2f, %.2f] x %d panels: orthonormality error %.2e", lo, hi, panels, err)
        if err < ORTHONORMALITY_TOL:
            return grid
        if 2 * panels > max_panels:
            raise ConfigError(
                f"orthonormality error {err:.2e} still above {ORTHONORMALITY_TOL:g} "
                f"at {panels} panels on [{lo:.2f}, {hi:.2f}]"
            )
        panels *= 2
