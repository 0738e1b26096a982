"""Weighted least squares, Tikhonov and truncated-eigenvalue inversion, L-curve and bias estimation.

All solvers go through the normal equations G f = A^H W y with G = A^H W A, factored by
Cholesky (or an eigendecomposition for truncation) and never inverted explicitly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum, auto
from typing import Any, Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh, eigvalsh

from lsqtomo.errors import ConfigError, QuasiSingularError
from lsqtomo.tomography.rng import Seed, derive_sequence

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
DEFAULT_BIAS_REPLICATES = 20


class RegularizationMethod(Enum):
    NONE = auto()
    TIKHONOV = auto()
    SVD = auto()


@dataclass(frozen=True)
class RegularizationConfig:
    """Tikhonov strength is lambda; SVD strength is the eigenvalue cut sigma_0."""

    method: RegularizationMethod = RegularizationMethod.NONE
    strength: float = 0.0

    def __post_init__(self):
        if self.method is RegularizationMethod.TIKHONOV and not self.strength > 0:
            raise ConfigError(f"Tikhonov lambda must be > 0, got {self.strength}")
        if self.method is RegularizationMethod.SVD and not self.strength >= 0:
            raise ConfigError(f"SVD cut sigma_0 must be >= 0, got {self.strength}")

    @classmethod
    def none(cls) -> RegularizationConfig:
        return cls()

    @classmethod
    def tikhonov(cls, lam: float) -> RegularizationConfig:
        return cls(RegularizationMethod.TIKHONOV, float(lam))

    @classmethod
    def svd(cls, sigma0: float) -> RegularizationConfig:
        return cls(RegularizationMethod.SVD, float(sigma0))

    @property
    def is_regularized(self) -> bool:
        return self.method is not RegularizationMethod.NONE

    def describe(self) -> dict:
        return {"method": self.method.name.lower(), "strength": self.strength}


@dataclass(frozen=True, eq=False)
class LinearSystem:
    design: np.ndarray
    data: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design))
        data = np.asarray(self.data)
        m0, n0 = design.shape
        if m0 < n0:
            raise ConfigError(f"system is underdetermined: {m0} rows for {n0} unknowns")
        if data.shape[0] != m0:
            raise ConfigError(f"data length {data.shape[0]} does not match {m0} design rows")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "data", data)
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float)
            if weights.shape != (m0,) or np.any(weights <= 0):
                raise ConfigError("weights must be a positive vector with one entry per row")
            object.__setattr__(self, "weights", weights)

    @property
    def shape(self) -> tuple[int, int]:
        return self.design.shape

    def _weighted(self, values: np.ndarray) -> np.ndarray:
        if self.weights is None:
            return values
        return (self.weights * values.T).T

    @property
    def normal_matrix(self) -> np.ndarray:
        return self.design.conj().T @ self._weighted(self.design)

    @property
    def normal_rhs(self) -> np.ndarray:
        return self.design.conj().T @ self._weighted(self.data)

    def residual(self, solution: np.ndarray) -> np.ndarray:
        return self.data - self.design @ solution

    def normal_residual(self, solution: np.ndarray) -> float:
        """|| A^H W (y - A f) ||."""
        return float(np.linalg.norm(self.design.conj().T @ self._weighted(self.residual(solution))))


@dataclass(frozen=True)
class LCurvePoint:
    lam: float
    residual_norm: float
    solution_norm: float


@dataclass(frozen=True)
class LCurve:
    points: list[LCurvePoint]
    corner: float | None


def condition_number(gram: np.ndarray) -> float:
    """Spectral condition of a Hermitian positive semidefinite matrix; inf when singular."""
    evals = eigvalsh(gram)
    top = float(np.max(np.abs(evals)))
    low = float(np.min(evals))
    if top == 0 or low <= 0:
        return float("inf")
    return top / low


def _cholesky_solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        factor = cho_factor(matrix, lower=True, check_finite=False)
    except LinAlgError as e:
        raise QuasiSingularError(float("inf")) from e
    return cho_solve(factor, rhs, check_finite=False)


def solve_normal(gram: np.ndarray, rhs: np.ndarray,
                 reg: RegularizationConfig | None = None) -> np.ndarray:
    """Solve G f = rhs for Hermitian G under the given regularization; rhs may carry columns."""
    reg = reg or RegularizationConfig.none()
    gram = np.asarray(gram)
    rhs = np.asarray(rhs)

    if reg.method is RegularizationMethod.NONE:
        cond = condition_number(gram)
        log.debug("normal matrix %s, condition %.3e", gram.shape, cond)
        if cond > CONDITION_LIMIT:
            raise QuasiSingularError(cond)
        return _cholesky_solve(gram, rhs)

    if reg.method is RegularizationMethod.TIKHONOV:
        shifted = gram + reg.strength ** 2 * np.eye(gram.shape[0])
        return _cholesky_solve(shifted, rhs)

    evals, evecs = eigh(gram)
    keep = (evals >= reg.strength) & (evals > 0)
    log.debug("SVD cut %.3e keeps %d of %d modes", reg.strength, int(keep.sum()), evals.size)
    vk = evecs[:, keep]
    projected = vk.conj().T @ rhs
    return vk @ (projected / (evals[keep] if rhs.ndim == 1 else evals[keep][:, None]))


def normal_inverse(gram: np.ndarray, reg: RegularizationConfig | None = None) -> np.ndarray:
    """F = G^-1, (lambda^2 I + G)^-1, or the truncated pseudoinverse of G."""
    return solve_normal(gram, np.eye(np.asarray(gram).shape[0], dtype=np.asarray(gram).dtype), reg)


def ls_solve(system: LinearSystem) -> np.ndarray:
    return solve_normal(system.normal_matrix, system.normal_rhs)


def tikhonov_solve(system: LinearSystem, lam: float) -> np.ndarray:
    """(lambda^2 I + A^H W A)^-1 A^H W y; W is the identity unless the system carries weights."""
    return solve_normal(system.normal_matrix, system.normal_rhs, RegularizationConfig.tikhonov(lam))


def svd_solve(system: LinearSystem, sigma0: float) -> np.ndarray:
    return solve_normal(system.normal_matrix, system.normal_rhs, RegularizationConfig.svd(sigma0))


def solve(system: LinearSystem, reg: RegularizationConfig | None = None) -> np.ndarray:
    return solve_normal(system.normal_matrix, system.normal_rhs, reg)


def poisson_weights(counts: ArrayLike, floor: float = 1.0) -> np.ndarray:
    """Inverse Poisson variances 1/max(n, floor) for count data."""
    counts = np.asarray(counts, dtype=float)
    return 1.0 / np.maximum(counts, floor)


def lcurve_corner(points: Sequence[LCurvePoint]) -> float | None:
    """Interior point of maximum signed curvature on the log-log (residual, solution) curve.

    Curvature at point i comes from the circle through points i-1, i, i+1, so the two end
    points of the sweep are never candidates. Ties go to the larger lambda.
    """
    if len(points) < 3:
        return None
    tiny = np.finfo(float).tiny
    x = np.log(np.maximum([p.residual_norm for p in points], tiny))
    y = np.log(np.maximum([p.solution_norm for p in points], tiny))
    ax, ay = x[1:-1] - x[:-2], y[1:-1] - y[:-2]
    bx, by = x[2:] - x[1:-1], y[2:] - y[1:-1]
    cross = ax * by - ay * bx
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = 2 * cross / (np.hypot(ax, ay) * np.hypot(bx, by) * np.hypot(x[2:] - x[:-2], y[2:] - y[:-2]))
    kappa = np.where(np.isfinite(kappa), kappa, -np.inf)
    if not np.any(np.isfinite(kappa)):
        return None
    best = 1 + np.flatnonzero(kappa == kappa.max())[-1]
    return float(points[best].lam)


def l_curve(system: LinearSystem, lambdas: Sequence[float]) -> LCurve:
    lambdas = [float(v) for v in lambdas]
    if not lambdas or any(v <= 0 for v in lambdas):
        raise ConfigError("L-curve lambdas must be positive")
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ConfigError("L-curve lambdas must be strictly ascending")

    # One eigendecomposition serves the whole sweep.
    gram, rhs = system.normal_matrix, system.normal_rhs
    evals, evecs = eigh(gram)
    projected = evecs.conj().T @ rhs
    points = []
    for lam in lambdas:
        f = evecs @ (projected / (evals + lam ** 2))
        points.append(LCurvePoint(lam, float(np.linalg.norm(system.residual(f))), float(np.linalg.norm(f))))
    corner = lcurve_corner(points)
    log.debug("L-curve over %d lambdas, corner %s", len(points), corner)
    return LCurve(points, corner)


def bias_estimate(solve: Callable[[Any], np.ndarray],
                  forward_model: Callable[[np.ndarray, np.random.SeedSequence], Any],
                  solution: np.ndarray, replicates: int = DEFAULT_BIAS_REPLICATES,
                  seed: Seed = 0) -> np.ndarray:
    """Mean of re-solved synthetic replicates minus the original solution.

    ``forward_model(solution, seed)`` synthesizes a dataset of the original shape; replicate r
    gets the seed sequence derived from (seed, r), so results do not depend on evaluation order.
    """
    if replicates < 2:
        raise ConfigError(f"bias estimation needs at least 2 replicates, got {replicates}")
    solution = np.asarray(solution)
    total = np.zeros_like(solution, dtype=np.result_type(solution, float))
    for r in range(replicates):
        total = total + solve(forward_model(solution, derive_sequence(seed, r)))
    return total / replicates - solution
