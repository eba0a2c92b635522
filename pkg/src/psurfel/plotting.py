"""Static figures for RD sweeps, rendered straight to image files."""
from __future__ import annotations

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def plot_sweep(rows: list[dict], path) -> None:
    """Two panels: PSNR against bpp, and the bit composition per lambda."""
    fig = Figure(figsize=(9, 3.6), dpi=120)
    FigureCanvasAgg(fig)
    ax_rd, ax_bits = fig.subplots(1, 2)

    bpp = [r["bpp"] for r in rows]
    ax_rd.plot(bpp, [r["d1_db"] for r in rows], "o-", label="D1")
    ax_rd.plot(bpp, [r["d2_db"] for r in rows], "s--", label="D2")
    ax_rd.set_xlabel("bits per point")
    ax_rd.set_ylabel("PSNR (dB)")
    ax_rd.grid(alpha=0.3)
    ax_rd.legend()

    labels = [f"{r['lambda']:g}" for r in rows]
    bottom = [0.0] * len(rows)
    for key, name in (("octree_bits", "octree"), ("surfel_bits", "surfel"), ("flag_bits", "flags")):
        vals = [r[key] / max(r["bpp"] * r["n_points"], 1e-12) for r in rows]
        ax_bits.bar(labels, vals, bottom=bottom, label=name)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax_bits.set_xlabel("lambda")
    ax_bits.set_ylabel("share of coded bits")
    ax_bits.set_ylim(0, 1.05)
    ax_bits.legend(fontsize="small")

    fig.tight_layout()
    fig.savefig(path)
