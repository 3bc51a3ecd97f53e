"""
Plot module for serialroc
Renders ROC curves (and an optional error band) to SVG with a log FAR axis.
Presentation only: nothing here feeds back into numeric outputs.
"""

import io
import logging
from typing import Dict, Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from modules.error_model import ErrorBand
from modules.roc import RocCurve

logger = logging.getLogger(__name__)

# fixed id salt and no date so repeated renders are identical
plt.rcParams['svg.hashsalt'] = 'serialroc'


class PlotError(Exception):
    """Custom exception for plotting errors"""
    pass


def render_svg(curves: Dict[str, RocCurve], band: Optional[ErrorBand] = None,
               title: str = 'ROC') -> str:
    """FRR against log-scaled FAR for every named curve; points with far == 0 are dropped"""
    if not curves and band is None:
        raise PlotError("nothing to plot")

    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    try:
        plotted = 0
        if band is not None:
            visible = band.far_low > 0
            ax.fill_betweenx(band.frr[visible], band.far_low[visible], band.far_high[visible],
                             step='post', alpha=0.2, color='tab:gray', label='error band')
            plotted += int(visible.sum())

        for name, curve in curves.items():
            visible = curve.far > 0
            if not visible.any():
                logger.warning(f"⚠️ Curve {name!r} has no point with far > 0; skipped on the log axis")
                continue
            ax.step(curve.far[visible], curve.frr[visible], where='post', label=name)
            plotted += int(visible.sum())

        if plotted == 0:
            raise PlotError("no plottable points (every far value is 0)")

        ax.set_xscale('log')
        ax.set_xlabel('FAR')
        ax.set_ylabel('FRR')
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        ax.grid(True, which='both', alpha=0.3)
        ax.legend(loc='upper right')

        buffer = io.StringIO()
        fig.savefig(buffer, format='svg', metadata={'Date': None})
        return buffer.getvalue()
    finally:
        plt.close(fig)
