"""
Bland-Altman charts for the agreement indicators.

Chart data is built first as a JSON-serializable dict; the SVG renderer
draws only what that dict holds, so every number printed on a figure is
the same value written to bland_altman.csv.
"""

import io
import logging
from typing import Optional

from matplotlib import rc_context
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from fedseg.losses import LIMIT_Z, BlandAltmanResult

logger = logging.getLogger(__name__)

INDICATOR_LABELS = {
    'eem_area': ('EEM Area', 'mm²'),
    'lumen_area': ('Lumen Area', 'mm²'),
    'plaque_area': ('Plaque Area', 'mm²'),
    'burden_index': ('Plaque Burden Index', ''),
    'eem_volume': ('EEM Volume', 'mm³'),
    'lumen_volume': ('Lumen Volume', 'mm³'),
    'plaque_volume': ('Plaque Volume', 'mm³'),
}

POINT_COLOR = '#1f77b4'
MEAN_COLOR = '#333333'
LIMIT_COLOR = '#d62728'


def format_value(value: float) -> str:
    """Annotation format shared with the CSV columns."""
    return f"{value:.4f}"


def get_bland_altman_chart_data(result: BlandAltmanResult, indicator: str) -> dict:
    """
    Get data for one Bland-Altman scatter.

    Args:
        result: Agreement statistics of the indicator
        indicator: Indicator key, e.g. 'plaque_area'

    Returns:
        Dictionary with 'title', 'x_label', 'y_label', 'points', 'mean',
        'upper', 'lower' and the three annotation 'labels'
    """
    title, unit = INDICATOR_LABELS.get(indicator, (indicator.replace('_', ' ').title(), ''))
    suffix = f" ({unit})" if unit else ''
    return {
        'indicator': indicator,
        'title': title,
        'x_label': f"Mean of manual and automatic{suffix}",
        'y_label': f"Automatic - manual{suffix}",
        'points': [[float(x), float(y)] for x, y in result.points],
        'mean': result.mean_diff,
        'upper': result.upper_limit,
        'lower': result.lower_limit,
        'labels': {
            'mean': f"mean {format_value(result.mean_diff)}",
            'upper': f"+{LIMIT_Z:.2f} SD {format_value(result.upper_limit)}",
            'lower': f"-{LIMIT_Z:.2f} SD {format_value(result.lower_limit)}",
        },
    }


def render_bland_altman_svg(chart: dict, width_in: float = 6.0, height_in: float = 4.0) -> str:
    """
    Render chart data to an SVG document.

    Points live in the group ``points`` (one marker each); the reference
    lines are ``mean-line``, ``upper-limit`` and ``lower-limit`` and their
    annotations ``mean-label``, ``upper-label`` and ``lower-label``.
    Output is byte-stable for equal input.
    """
    with rc_context({'svg.fonttype': 'none', 'svg.hashsalt': f"fedseg-{chart['indicator']}"}):
        fig = Figure(figsize=(width_in, height_in))
        FigureCanvasSVG(fig)
        ax = fig.add_subplot(1, 1, 1)
        xs = [p[0] for p in chart['points']]
        ys = [p[1] for p in chart['points']]
        ax.plot(xs, ys, linestyle='none', marker='o', markersize=4, color=POINT_COLOR, gid='points')
        ax.axhline(chart['mean'], color=MEAN_COLOR, linewidth=1.0, gid='mean-line')
        ax.axhline(chart['upper'], color=LIMIT_COLOR, linewidth=1.0, linestyle='--', gid='upper-limit')
        ax.axhline(chart['lower'], color=LIMIT_COLOR, linewidth=1.0, linestyle='--', gid='lower-limit')

        # labels sit at the right edge, in axes x / data y
        transform = ax.get_yaxis_transform()
        for key, value in (('mean', chart['mean']), ('upper', chart['upper']), ('lower', chart['lower'])):
            ax.text(0.99, value, chart['labels'][key], transform=transform, ha='right', va='bottom',
                    fontsize=8, gid=f"{key}-label")

        ax.set_title(chart['title'])
        ax.set_xlabel(chart['x_label'])
        ax.set_ylabel(chart['y_label'])
        span = max(abs(chart['upper']), abs(chart['lower']), *(abs(y) for y in ys or [0.0]))
        pad = span * 0.25 if span > 0 else 1.0
        ax.set_ylim(min(chart['lower'], *(ys or [0.0])) - pad, max(chart['upper'], *(ys or [0.0])) + pad)
        fig.tight_layout()

        buffer = io.StringIO()
        fig.savefig(buffer, format='svg', metadata={'Date': None})
    return buffer.getvalue()


def write_bland_altman_svg(result: BlandAltmanResult, indicator: str, path: str,
                           chart: Optional[dict] = None) -> dict:
    """Write one indicator's SVG to ``path`` and return the chart data used."""
    chart = chart or get_bland_altman_chart_data(result, indicator)
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(render_bland_altman_svg(chart))
    logger.debug("Wrote Bland-Altman chart for %s to %s", indicator, path)
    return chart
