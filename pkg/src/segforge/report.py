"""Hand-rolled SVG curve figures and markdown run summaries.

No plotting dependency: the four-panel figure (train/val x loss/accuracy)
is emitted as standalone SVG text, byte-stable for fixed inputs, with the
raw values always available next to it as CSV.
"""

from xml.sax.saxutils import escape

PANELS = (
    ("train_loss", "loss (train)"),
    ("train_acc", "accuracy (train)"),
    ("val_loss", "loss (validation)"),
    ("val_acc", "accuracy (validation)"),
)

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

_PANEL_W, _PANEL_H = 420, 260
_MARGIN_L, _MARGIN_B, _MARGIN_T, _PAD = 56, 36, 30, 18


def _fmt(v):
    return f"{v:.2f}"


def _tick_label(v):
    a = abs(v)
    if a != 0 and (a < 0.01 or a >= 1000):
        return f"{v:.1e}"
    return f"{v:.3g}"


def _panel(x0, y0, title, series):
    """One axes box with a polyline per (label, xs, ys) series."""
    parts = [f'<g transform="translate({x0},{y0})">']
    plot_w = _PANEL_W - _MARGIN_L - _PAD
    plot_h = _PANEL_H - _MARGIN_T - _MARGIN_B
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys]
    if not all_x:
        all_x, all_y = [0, 1], [0, 1]
    x_min, x_max = min(all_x), max(all_x)
    y_min, y_max = min(all_y), max(all_y)
    if x_max == x_min:
        x_max = x_min + 1
    if y_max == y_min:
        y_max = y_min + 1

    def sx(v):
        return _MARGIN_L + (v - x_min) / (x_max - x_min) * plot_w

    def sy(v):
        return _MARGIN_T + plot_h - (v - y_min) / (y_max - y_min) * plot_h

    parts.append(
        f'<text x="{_MARGIN_L + plot_w / 2:.0f}" y="16" text-anchor="middle" '
        f'font-size="13" font-family="sans-serif">{escape(title)}</text>'
    )
    parts.append(
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#444444" stroke-width="1"/>'
    )
    for frac in (0.0, 0.5, 1.0):
        yv = y_min + frac * (y_max - y_min)
        parts.append(
            f'<text x="{_MARGIN_L - 6}" y="{sy(yv) + 4:.2f}" text-anchor="end" '
            f'font-size="10" font-family="sans-serif">{_tick_label(yv)}</text>'
        )
        xv = x_min + frac * (x_max - x_min)
        parts.append(
            f'<text x="{sx(xv):.2f}" y="{_MARGIN_T + plot_h + 16}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{_tick_label(xv)}</text>'
        )
    parts.append(
        f'<text x="{_MARGIN_L + plot_w / 2:.0f}" y="{_PANEL_H - 6}" text-anchor="middle" '
        'font-size="11" font-family="sans-serif">epoch</text>'
    )
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        points = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5">'
            f"<title>{escape(label)}</title></polyline>"
        )
    parts.append("</g>")
    return "".join(parts)


def curve_figure(named_logs):
    """Four-panel SVG of per-epoch curves; legend order follows input order."""
    width = 2 * _PANEL_W + 20
    legend_h = 24
    height = 2 * _PANEL_H + legend_h + 16
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    x = 12
    for i, (label, _) in enumerate(named_logs):
        color = COLORS[i % len(COLORS)]
        parts.append(f'<line x1="{x}" y1="14" x2="{x + 22}" y2="14" stroke="{color}" stroke-width="2"/>')
        x += 26
        parts.append(
            f'<text x="{x}" y="18" font-size="12" font-family="sans-serif">{escape(label)}</text>'
        )
        x += 9 * len(label) + 18
    for p, (column, title) in enumerate(PANELS):
        px = (p % 2) * (_PANEL_W + 20)
        py = legend_h + (p // 2) * (_PANEL_H + 8)
        series = []
        for label, log in named_logs:
            series.append((label, log.column("epoch"), log.column(column)))
        parts.append(_panel(px, py, title, series))
    parts.append("</svg>")
    return "".join(parts) + "\n"


def summary_markdown(named_logs):
    lines = [
        "# Training run summary",
        "",
        "| run | epochs | final train loss | final val loss | final val acc | best val Dice |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for label, log in named_logs:
        if not log.rows:
            lines.append(f"| {label} | 0 | - | - | - | - |")
            continue
        last = log.rows[-1]
        best = max(log.column("val_dice"))
        lines.append(
            f"| {label} | {len(log.rows)} | {last[2]:.4f} | {last[4]:.4f} | {last[5]:.4f} | {best:.4f} |"
        )
    return "\n".join(lines) + "\n"
