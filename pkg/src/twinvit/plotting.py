"""Loss-curve rendering to a standalone SVG document."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .errors import DataError
from .trainer import epoch_means, read_loss_log

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=170, top=30, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def load_series(paths) -> list[tuple[str, list[tuple[int, float]]]]:
    """(label, per-epoch mean loss) for each loss CSV; the label is the file stem."""
    series = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"loss log {path} does not exist")
        records = read_loss_log(path)
        if not records:
            raise DataError(f"loss log {path} has no rows")
        series.append((path.stem, epoch_means(records)))
    return series


def render_svg(series, title: str = "Training loss", xlabel: str = "epoch", ylabel: str = "mean loss") -> str:
    """One polyline per series.  Higher loss is drawn higher on the canvas,
    so SVG y coordinates fall as values rise."""
    if not series:
        raise DataError("nothing to plot")
    xs = [e for _, pts in series for e, _ in pts]
    ys = [v for _, pts in series for _, v in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{left - 6}" y="{_fmt(sy(yv) + 4)}" text-anchor="end" font-size="10">{yv:.3g}</text>')
        out.append(f'<text x="{_fmt(sx(xv))}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.0f}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.0f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.0f})">{escape(ylabel)}</text>')
    for i, (label, pts) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{_fmt(sx(e))},{_fmt(sy(v))}" for e, v in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        if len(pts) == 1:
            e, v = pts[0]
            out.append(f'<circle cx="{_fmt(sx(e))}" cy="{_fmt(sy(v))}" r="2.5" fill="{color}"/>')
        ly = top + 14 + 18 * i
        lx = left + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_loss_logs(paths, out) -> None:
    Path(out).write_text(render_svg(load_series(paths)))
