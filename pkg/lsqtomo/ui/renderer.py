"""Static SVG figures: kernel line plots, element bar charts with error bars, the L-curve."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from lsqtomo.config import ExperimentConfig  # noqa: E402
from lsqtomo.errors import StorageError  # noqa: E402
from lsqtomo.tomography.lsq_core import LCurve  # noqa: E402
from lsqtomo.tomography.reconstruct import ReconstructionResult  # noqa: E402
from lsqtomo.tomography.simulator import DensityMatrix  # noqa: E402
from lsqtomo.ui import theme as style  # noqa: E402

log = logging.getLogger(__name__)


class Renderer:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.theme = config.theme
        self.rc = style.rc_params(self.theme)

    def _save(self, fig, path: Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as e:
            raise StorageError(f"cannot write plot {path}: {e}") from e
        finally:
            plt.close(fig)
        log.info("Wrote plot %s", path)
        return path

    def plot_kernels(self, x: np.ndarray, curves: Mapping[str, np.ndarray], path: Path,
                     title: str = "Sampling kernels") -> Path:
        """One line per kernel; complex kernels are drawn by their real part."""
        palette = ["primary", "accent", "info", "success", "warning", "error"]
        with plt.rc_context(self.rc):
            fig, ax = plt.subplots(figsize=(style.FIGURE_WIDTH, style.FIGURE_HEIGHT))
            for i, (label, values) in enumerate(curves.items()):
                ax.plot(x, np.real(values), color=self.theme.color(palette[i % len(palette)]), label=label)
            ax.axhline(0.0, color=self.theme.color("text_dim"), linewidth=0.6)
            ax.set_xlabel("x")
            ax.set_ylabel("K(x)")
            ax.set_title(title)
            ax.legend(frameon=False)
            fig.tight_layout()
        return self._save(fig, path)

    def plot_elements(self, result: ReconstructionResult, path: Path, offset: int = 0,
                      truth: DensityMatrix | None = None) -> Path:
        """Re rho_{n, n+offset} against n with +-1 std error bars, truth beside it when known."""
        est = result.estimate.entries
        n = np.arange(est.shape[0] - offset)
        values = est[n, n + offset].real
        errors = result.std_real[n, n + offset]
        with plt.rc_context(self.rc):
            fig, ax = plt.subplots(figsize=(style.FIGURE_WIDTH, style.FIGURE_HEIGHT))
            shift = style.BAR_WIDTH / 2 if truth is not None else 0.0
            ax.bar(n - shift, values, style.BAR_WIDTH, yerr=errors, capsize=style.ERROR_CAPSIZE,
                   color=self.theme.color("primary"), ecolor=self.theme.color("text"), label="estimate")
            if truth is not None:
                ref = truth.padded(est.shape[0] - 1).entries[n, n + offset].real
                ax.bar(n + shift, ref, style.BAR_WIDTH, color=self.theme.color("accent"), label="truth")
                ax.legend(frameon=False)
            ax.set_xlabel("n")
            ax.set_ylabel(f"Re rho(n, n+{offset})" if offset else "rho(n, n)")
            ax.set_xticks(n)
            fig.tight_layout()
        return self._save(fig, path)

    def plot_lcurve(self, curve: LCurve, path: Path) -> Path:
        residual = [p.residual_norm for p in curve.points]
        solution = [p.solution_norm for p in curve.points]
        with plt.rc_context(self.rc):
            fig, ax = plt.subplots(figsize=(style.LCURVE_SIZE, style.LCURVE_SIZE))
            ax.loglog(residual, solution, marker="o", markersize=style.MARKER_SIZE,
                      color=self.theme.color("primary"))
            for p in curve.points:
                ax.annotate(f"{p.lam:g}", (p.residual_norm, p.solution_norm), fontsize=style.FONT_SIZE - 2,
                            xytext=(4, 4), textcoords="offset points")
            if curve.corner is not None:
                best = next(p for p in curve.points if p.lam == curve.corner)
                ax.loglog([best.residual_norm], [best.solution_norm], marker="o", linestyle="none",
                          markersize=2 * style.MARKER_SIZE, color=self.theme.color("accent"))
            ax.set_xlabel("residual norm")
            ax.set_ylabel("solution norm")
            ax.set_title("L-curve")
            fig.tight_layout()
        return self._save(fig, path)
