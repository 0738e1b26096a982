"""Experiment service: turns an ExperimentConfig into model, grid, state, datasets, kernels and results."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from lsqtomo.config import ExperimentConfig, validate_config
from lsqtomo.errors import ConfigError, GeometryMismatchError
from lsqtomo.tomography.kernels import (
    ElementIndexMap,
    KernelKind,
    SamplingKernelSet,
    SeparableResponses,
    class_kernel_sets,
    contamination_matrix,
    damped_responses,
    smeared_responses,
    spacetime_kernels,
)
from lsqtomo.tomography.lsq_core import (
    LCurve,
    LinearSystem,
    RegularizationConfig,
    l_curve,
    poisson_weights,
)
from lsqtomo.tomography.oscillators import (
    OscillatorModel,
    SpatialGrid,
    build_grid,
    transition_gap,
)
from lsqtomo.tomography.reconstruct import (
    ProjectionScheme,
    ReconstructionResult,
    reconstruct_by_class,
    reconstruct_spacetime,
    regularization_bias,
    resolution_bias,
    truncation_error,
)
from lsqtomo.tomography.rng import Seed
from lsqtomo.tomography.simulator import (
    NORMALIZATION_TOL,
    DensityMatrix,
    DistributionTable,
    GridCounts,
    LiouvillianSpec,
    MeasurementDataset,
    MeasurementGeometry,
    Propagator,
    RawEvents,
    SmearingWindows,
    TimeSampling,
    build_propagator,
    distribution_table,
    grid_counts,
    prepare_state,
    sample_events,
    signed_counts,
    smear_distribution,
    time_averaged_table,
)

log = logging.getLogger(__name__)

SMEARING_TIME_STEP = 0.5  # panel length of the time quadrature feeding the smearing window


@dataclass(frozen=True)
class TradeoffRow:
    lam: float
    bias_norm: float
    std_norm: float


class ExperimentService:
    """One configured experiment; also the re-runnable pipeline used for bias estimation."""

    def __init__(self, config: ExperimentConfig):
        self.config = validate_config(config)

    # --- Setup ---

    @cached_property
    def model(self) -> OscillatorModel:
        m = self.config.model
        if m.kind == "morse":
            return OscillatorModel.morse(m.anharmonicity)
        return OscillatorModel.harmonic(m.frequency, m.max_level)

    @property
    def n_max(self) -> int:
        """Truncation of the reconstruction; the simulated state may carry more levels."""
        n_max = self.config.reconstruction.n_max
        return self.config.state.n_max if n_max is None else n_max

    def to_time(self, value: float, units: str) -> float:
        """Absolute time of ``value`` given in ``units`` (``pi_over_gap`` means multiples of pi / (w_1 - w_0))."""
        if units == "pi_over_gap":
            return value * math.pi / transition_gap(self.model)
        return value

    @cached_property
    def windows(self) -> SmearingWindows:
        ms = self.config.measurement
        return SmearingWindows(self.to_time(ms.sigma_t, ms.time_units), ms.sigma_x)

    @property
    def smeared(self) -> bool:
        return not self.windows.is_trivial

    @cached_property
    def grid(self) -> SpatialGrid:
        """Quadrature grid for the simulated levels; padded for position smearing when needed."""
        g, ms = self.config.grid, self.config.measurement
        cover = None
        if ms.mode == "grid":
            pad = self.windows.position_padding
            cover = (ms.x_min - pad, ms.x_max + pad)
        return build_grid(self.model, self.config.state.n_max, g.tail_tol, g.panels, g.order, cover=cover)

    @cached_property
    def timing(self) -> TimeSampling:
        e = self.config.evolution
        if self.config.measurement.time_averaged:
            return TimeSampling.time_averaged()
        return TimeSampling.midpoints(self.to_time(e.duration, e.time_units), e.n_times)

    @cached_property
    def geometry(self) -> MeasurementGeometry:
        """Where the data live: quadrature nodes for events, equidistant cells for gridded counts."""
        ms = self.config.measurement
        if ms.mode == "events":
            return MeasurementGeometry.on_grid(self.grid, self.timing)
        return MeasurementGeometry.cells((ms.x_min, ms.x_max), ms.n_positions, self.timing)

    @cached_property
    def state(self) -> DensityMatrix:
        s = self.config.state
        state = prepare_state(complex(s.alpha, s.alpha_imag), s.n_max)
        state.check_physical()
        return state

    def _propagator(self, n_max: int) -> Propagator | None:
        gamma = self.config.evolution.damping
        if gamma == 0:
            return None
        return build_propagator(self.model, n_max, LiouvillianSpec.amplitude_damping(gamma), self.timing.times)

    @cached_property
    def propagator(self) -> Propagator | None:
        """Evolution of the simulated state."""
        return self._propagator(self.config.state.n_max)

    @cached_property
    def response_propagator(self) -> Propagator | None:
        """Evolution at the reconstruction truncation; damping only feeds lower levels, so it matches."""
        if self.n_max == self.config.state.n_max:
            return self.propagator
        return self._propagator(self.n_max)

    @property
    def regularization(self) -> RegularizationConfig:
        r = self.config.reconstruction
        if r.regularization == "tikhonov":
            return RegularizationConfig.tikhonov(r.strength)
        if r.regularization == "svd":
            return RegularizationConfig.svd(r.strength)
        return RegularizationConfig.none()

    # --- Simulation ---

    def _smearing_source(self) -> MeasurementGeometry:
        """Padded fine geometry that the instrument windows average over."""
        target = self.geometry
        timing = target.timing
        if self.windows.sigma_t > 0:
            pad = self.windows.time_padding
            span = timing.duration + 2 * pad
            timing = TimeSampling.gauss_legendre(-pad, timing.duration + pad,
                                                 max(8, math.ceil(span / SMEARING_TIME_STEP)))
        if self.windows.sigma_x > 0:
            return MeasurementGeometry.on_grid(self.grid, timing)
        return MeasurementGeometry(target.positions, target.position_weights, timing)

    def distribution(self, state: DensityMatrix | None = None, clip: bool = True) -> DistributionTable:
        """The (smeared) distribution on the measurement geometry."""
        state = state or self.state
        state = state.padded(max(state.n_max, self.config.state.n_max))
        if not self.smeared:
            return distribution_table(state, self.model, self.geometry, self.propagator, clip)
        source = distribution_table(state, self.model, self._smearing_source(), clip=clip)
        return smear_distribution(source, self.windows, target=self.geometry)

    def simulate(self, state: DensityMatrix | None = None, seed: Seed | None = None) -> MeasurementDataset:
        seed = self.config.seed if seed is None else seed
        table = self.distribution(state)
        ms = self.config.measurement
        if ms.mode == "grid":
            return grid_counts(table, ms.total_events, seed, self.windows if self.smeared else None)
        norms = table.normalization()
        if np.max(np.abs(norms - 1)) > NORMALIZATION_TOL:
            # Caller-supplied states need not have unit trace.
            log.warning("renormalizing distribution before sampling (deviation %.2e)",
                        float(np.max(np.abs(norms - 1))))
            table = DistributionTable(table.geometry, table.values / norms[:, None])
        return sample_events(table, ms.events_per_time, seed)

    def replicate(self, state: DensityMatrix, seed: Seed) -> GridCounts:
        """Counts around the unclipped expected data of ``state``, for bias replicates.

        Event data are replaced by counts on the quadrature nodes with the same events per time.
        """
        table = self.distribution(state, clip=False)
        ms = self.config.measurement
        if ms.mode == "grid":
            return signed_counts(table, ms.total_events, seed, self.windows if self.smeared else None)
        return signed_counts(table, ms.events_per_time * len(self.timing), seed)

    # --- Kernels ---

    def responses(self):
        index_map = ElementIndexMap.full(self.n_max)
        if self.response_propagator is not None:
            return damped_responses(self.response_propagator, self.model, index_map, self.timing.times)
        responses = SeparableResponses(self.model, index_map)
        if self.smeared:
            responses = smeared_responses(responses, self.windows, self.grid)
        return responses

    def build_kernels(self, reg: RegularizationConfig | None = None) -> list[SamplingKernelSet]:
        reg = reg or self.regularization
        r = self.config.reconstruction
        if r.kernels == "factorable":
            return class_kernel_sets(self.model, self.n_max, self.grid, r.classes, reg)
        return [spacetime_kernels(self.responses(), self.geometry, reg)]

    @cached_property
    def kernels(self) -> list[SamplingKernelSet]:
        return self.build_kernels()

    # --- Reconstruction ---

    def check_dataset(self, dataset: MeasurementDataset) -> None:
        mode = "events" if isinstance(dataset, RawEvents) else "grid"
        if mode != self.config.measurement.mode:
            raise GeometryMismatchError(f"dataset holds {mode} data but the config measures {self.config.measurement.mode}")

    def reconstruct(self, dataset: MeasurementDataset,
                    kernels: list[SamplingKernelSet] | None = None) -> ReconstructionResult:
        self.check_dataset(dataset)
        return self.solve(dataset, kernels)

    def solve(self, dataset: MeasurementDataset, kernels: list[SamplingKernelSet] | None = None) -> ReconstructionResult:
        """Reconstruct without the measurement-mode check; bias replicates arrive as counts."""
        kernels = kernels or self.kernels
        if kernels[0].kind is KernelKind.SPATIAL_PER_CLASS:
            scheme = ProjectionScheme[self.config.reconstruction.scheme.upper()]
            return reconstruct_by_class(dataset, kernels, self.model, scheme)
        return reconstruct_spacetime(dataset, kernels[0])

    def bias(self, result: ReconstructionResult) -> np.ndarray | None:
        """Regularization bias from re-simulated replicates, or None when not requested."""
        replicates = self.config.reconstruction.bias_replicates
        if replicates == 0 or not self.regularization.is_regularized:
            return None
        log.info("Estimating regularization bias from %d replicates", replicates)
        return regularization_bias(self, result, replicates, seed=self.config.seed)

    def tradeoff(self, dataset: MeasurementDataset, lambdas: list[float] | None = None) -> list[TradeoffRow]:
        """Per Tikhonov lambda: norm of the predicted std, and norm of the noise-free bias.

        The bias is taken of one reference state for every lambda: the estimate at the smallest one.
        """
        self.check_dataset(dataset)
        lambdas = sorted(lambdas or self.config.reconstruction.lambdas)
        base = self.build_kernels(RegularizationConfig.tikhonov(lambdas[0]))
        sweep = [[k.with_regularization(RegularizationConfig.tikhonov(lam)) for k in base] for lam in lambdas]
        results = [self.solve(dataset, kernels) for kernels in sweep]
        reference = results[0].estimate
        rows = []
        for lam, kernels, result in zip(lambdas, sweep, results):
            bias = resolution_bias(reference, kernels)
            rows.append(TradeoffRow(lam, float(np.linalg.norm(bias)), float(np.linalg.norm(result.std_total))))
            log.debug("lambda=%g: bias %.3e, std %.3e", lam, rows[-1].bias_norm, rows[-1].std_norm)
        return rows

    # --- Baselines ---

    def baseline_dataset(self, seed: Seed | None = None) -> MeasurementDataset:
        """Time-averaged data with the same total number of events as the time-resolved run."""
        seed = self.config.seed if seed is None else seed
        ms = self.config.measurement
        timing = TimeSampling.time_averaged()
        if ms.mode == "events":
            geometry = MeasurementGeometry.on_grid(self.grid, timing)
            table = time_averaged_table(self.state, self.model, geometry)
            return sample_events(table, ms.events_per_time * len(self.timing), seed)
        geometry = MeasurementGeometry.cells((ms.x_min, ms.x_max), ms.n_positions, timing)
        return grid_counts(time_averaged_table(self.state, self.model, geometry), ms.total_events, seed)

    def baseline(self, seed: Seed | None = None) -> ReconstructionResult:
        """Diagonal factorable reconstruction from ``baseline_dataset``."""
        kernels = class_kernel_sets(self.model, self.n_max, self.grid, "diagonal")
        return reconstruct_by_class(self.baseline_dataset(seed), kernels, self.model, ProjectionScheme.PERIOD)

    def truncation_offsets(self) -> np.ndarray:
        """Predicted estimate-minus-truth offsets from the state's levels above ``n_max``."""
        if self.kernels[0].kind is not KernelKind.SPATIAL_PER_CLASS:
            raise ConfigError("truncation offsets are predicted for factorable kernels")
        state_max = self.config.state.n_max
        if state_max <= self.n_max:
            return np.zeros((self.n_max + 1, self.n_max + 1), dtype=complex)
        tables = [contamination_matrix(k, self.model, state_max, self.grid) for k in self.kernels]
        return truncation_error(self.state, tables, self.n_max)

    def run(self, dataset: MeasurementDataset) -> ReconstructionResult:
        result = self.reconstruct(dataset)
        bias = self.bias(result)
        return result if bias is None else result.with_bias(bias)

    # --- L-curve ---

    def linear_system(self, dataset: MeasurementDataset) -> LinearSystem:
        """Rows are measurement cells scaled by sqrt(u_k w_l); A^H A is the space-time Gram."""
        if not isinstance(dataset, GridCounts):
            raise ConfigError("the L-curve is defined on gridded counts")
        if self.config.reconstruction.kernels != "spacetime":
            raise ConfigError("the L-curve sweeps the space-time inversion")
        self.check_dataset(dataset)
        geometry = self.geometry
        if not geometry.matches(dataset.geometry):
            raise GeometryMismatchError("dataset geometry does not match the configured geometry")
        responses = self.responses()
        scale = np.sqrt(np.outer(geometry.timing.weights, geometry.position_weights))
        design = np.concatenate([
            (responses.evaluate(geometry.positions, float(t)) * scale[k]).T
            for k, t in enumerate(geometry.timing.times)
        ])
        data = (scale * dataset.estimate().values).ravel()
        weights = None
        if self.config.reconstruction.poisson_weights:
            weights = poisson_weights(dataset.counts.ravel())
            weights = weights / weights.mean()
        return LinearSystem(design, data, weights)

    def lcurve(self, dataset: MeasurementDataset, lambdas: list[float] | None = None) -> LCurve:
        lambdas = lambdas or list(self.config.reconstruction.lambdas)
        if len(lambdas) < 3:
            raise ConfigError(f"the L-curve needs at least 3 lambda values, got {len(lambdas)}")
        return l_curve(self.linear_system(dataset), lambdas)

    # --- Summaries ---

    def metrics(self, result: ReconstructionResult, truth: DensityMatrix | None = None) -> dict[str, float]:
        d = result.diagnostics
        out = {
            "trace": d.trace,
            "min_eigenvalue": d.min_eigenvalue,
            "condition_estimate": d.condition_estimate,
            "asymmetry": d.asymmetry,
            "max_std": float(np.max(result.std_total)),
        }
        if truth is not None:
            out["max_abs_error"] = float(np.max(np.abs(result.estimate.entries - truth.padded(self.n_max).entries)))
        if result.bias is not None:
            out["max_abs_bias"] = float(np.max(np.abs(result.bias)))
        return out
