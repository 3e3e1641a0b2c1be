"""Minimal deterministic SVG rendering of value grids."""

from xml.sax.saxutils import escape

import numpy as np

__all__ = ["value_color", "heatmap_svg"]

LOW = (49, 54, 149)
HIGH = (215, 48, 39)
MISSING = "#dddddd"


def value_color(value, vmin, vmax):
    """Hex colour on a straight blue-to-red ramp; NaN maps to light grey."""
    if not np.isfinite(value):
        return MISSING
    span = vmax - vmin
    s = 0.5 if span <= 0 else min(max((value - vmin) / span, 0.0), 1.0)
    r, g, b = (round(lo + s * (hi - lo)) for lo, hi in zip(LOW, HIGH))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(grids, title="", cell=24, gap=16, vmin=None, vmax=None):
    """Render ``[(label, 2-D array)]`` side by side on one shared colour scale.

    NaN cells (padding) are drawn grey and excluded from the scale.
    """
    arrays = [np.asarray(g, dtype=np.float64) for _, g in grids]
    finite = np.concatenate([a[np.isfinite(a)] for a in arrays]) if arrays else np.array([])
    if vmin is None:
        vmin = float(finite.min()) if finite.size else 0.0
    if vmax is None:
        vmax = float(finite.max()) if finite.size else 1.0
    lo, hi = vmin, vmax
    top = 40
    rows = max((a.shape[0] for a in arrays), default=0)
    width = gap + sum(a.shape[1] * cell + gap for a in arrays)
    height = top + rows * cell + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{gap}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>',
    ]
    x0 = gap
    for (label, _), a in zip(grids, arrays):
        parts.append(f'<text x="{x0}" y="{top - 6}" font-family="sans-serif" font-size="11">{escape(str(label))}</text>')
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                v = a[i, j]
                tip = "" if not np.isfinite(v) else f"<title>{v:.6g}</title>"
                parts.append(
                    f'<rect x="{x0 + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                    f'fill="{value_color(v, lo, hi)}">{tip}</rect>'
                )
        x0 += a.shape[1] * cell + gap
    parts.append(
        f'<text x="{gap}" y="{height - 10}" font-family="sans-serif" font-size="10">'
        f"min {lo:.6g}  max {hi:.6g}</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
