"""Figure layout and style constants."""

from __future__ import annotations

from lsqtomo.config import ThemeConfig

# Figure geometry (inches)
FIGURE_WIDTH = 6.4
FIGURE_HEIGHT = 4.0
LCURVE_SIZE = 4.8

# Strokes
LINE_WIDTH = 1.4
MARKER_SIZE = 5
BAR_WIDTH = 0.38
ERROR_CAPSIZE = 3

FONT_SIZE = 10
TITLE_SIZE = 11


def rc_params(theme: ThemeConfig) -> dict:
    """matplotlib rc overrides for the configured palette."""
    return {
        "figure.facecolor": theme.color("background"),
        "axes.facecolor": theme.color("background"),
        "axes.edgecolor": theme.color("text_dim"),
        "axes.labelcolor": theme.color("text"),
        "text.color": theme.color("text"),
        "xtick.color": theme.color("text_dim"),
        "ytick.color": theme.color("text_dim"),
        "font.size": FONT_SIZE,
        "axes.titlesize": TITLE_SIZE,
        "lines.linewidth": LINE_WIDTH,
        "svg.hashsalt": "lsqtomo",
    }
