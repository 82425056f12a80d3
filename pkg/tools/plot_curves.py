#!/usr/bin/env python3
"""Plot recall-vs-recompute curves and degree histograms from eval TSVs.

Usage: python tools/plot_curves.py EVAL_DIR [OUT.png]

Reads every curve_*.tsv in EVAL_DIR (as written by `slimvec eval --out` or
the ablation harness) plus degree_histograms.tsv when present. Requires
matplotlib, which is intentionally not a package dependency.
"""

from __future__ import annotations

import sys
from pathlib import Path


def load_tsv(path: Path) -> list[dict]:
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def main() -> int:
    if len(sys.argv) < 2:
        print(__doc__)
        return 2
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is required for plotting: pip install matplotlib")
        return 1

    eval_dir = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else eval_dir / "curves.png"
    curve_files = sorted(eval_dir.glob("curve_*.tsv"))
    hist_file = eval_dir / "degree_histograms.tsv"
    n_panels = 1 + hist_file.exists()
    fig, axes = plt.subplots(1, n_panels, figsize=(6 * n_panels, 4.5))
    ax_curve = axes[0] if n_panels > 1 else axes

    for path in curve_files:
        variant = path.stem.removeprefix("curve_")
        rows = load_tsv(path)
        series: dict[tuple, list] = {}
        for row in rows:
            key = (row["mode"], row["alpha"])
            series.setdefault(key, []).append(
                (float(row["recomputations"]), float(row["recall"]))
            )
        for (mode, alpha), points in sorted(series.items()):
            points.sort()
            ax_curve.plot(
                [p[0] for p in points], [p[1] for p in points],
                marker="o", label=f"{variant} {mode} a={alpha}",
            )
    ax_curve.set_xlabel("mean recomputations per query")
    ax_curve.set_ylabel("recall@k")
    ax_curve.set_title("recall vs recompute")
    ax_curve.grid(alpha=0.3)
    ax_curve.legend(fontsize=7)

    if hist_file.exists():
        ax_hist = axes[1]
        rows = load_tsv(hist_file)
        variants: dict[str, list] = {}
        for row in rows:
            variants.setdefault(row["variant"], []).append(
                (int(row["degree"]), int(row["count"]))
            )
        for variant, points in sorted(variants.items()):
            points.sort()
            ax_hist.semilogy(
                [p[0] for p in points], [p[1] for p in points],
                marker=".", label=variant,
            )
        ax_hist.set_xlabel("out-degree")
        ax_hist.set_ylabel("node count")
        ax_hist.set_title("degree distribution")
        ax_hist.grid(alpha=0.3)
        ax_hist.legend(fontsize=8)

    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
