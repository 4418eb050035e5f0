"""Learning-curve figures: a dependency-free SVG and a matplotlib PNG."""

from xml.sax.saxutils import escape

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def curves_svg(curves, width=640, height=400, margin=56):
    """One ``<polyline>`` per variant (median success rate against epoch), with labeled axes.

    Output depends only on the curve values, so identical inputs give identical bytes.
    """
    named = [(name, c.median) for name, c in curves.items() if c.failed is None and c.median]
    n_epochs = max((len(m) for _, m in named), default=1)
    pw, ph = width - 2 * margin, height - 2 * margin

    def xy(epoch, value):
        x = margin + (pw * (epoch - 1) / (n_epochs - 1) if n_epochs > 1 else pw / 2)
        y = margin + ph * (1.0 - value)
        return f"{x:.2f},{y:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{margin}" y1="{margin + ph}" x2="{margin + pw}" y2="{margin + ph}" stroke="black"/>',
           f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{margin + ph}" stroke="black"/>']
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin + ph * (1.0 - tick)
        out.append(f'<text x="{margin - 6}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{tick:g}</text>')
    for epoch in sorted({1, n_epochs, (n_epochs + 1) // 2}):
        x = xy(epoch, 0.0).split(",")[0]
        out.append(f'<text x="{x}" y="{margin + ph + 16}" font-size="11" text-anchor="middle">{epoch}</text>')
    out.append(f'<text x="{margin + pw / 2:.2f}" y="{height - 12}" font-size="13" '
               f'text-anchor="middle">epoch</text>')
    out.append(f'<text x="16" y="{margin + ph / 2:.2f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {margin + ph / 2:.2f})">median success rate</text>')
    for i, (name, median) in enumerate(named):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(xy(e, v) for e, v in enumerate(median, 1))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}">'
                   f'<title>{escape(name)}</title></polyline>')
        out.append(f'<text x="{margin + pw - 4}" y="{margin + 14 + 16 * i}" font-size="12" '
                   f'text-anchor="end" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_curves(curves, path, title=None):
    """Median success with the per-seed min/max band, saved to ``path``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i, (name, c) in enumerate(curves.items()):
        if c.failed is not None or not c.raw:
            continue
        raw = np.asarray(c.raw, dtype=float)
        epochs = np.arange(1, raw.shape[1] + 1)
        color = COLORS[i % len(COLORS)]
        ax.fill_between(epochs, raw.min(axis=0), raw.max(axis=0), color=color, alpha=0.15, linewidth=0)
        ax.plot(epochs, np.median(raw, axis=0), color=color, label=f"{name} (n={len(raw)})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
