"""CSV -> SVG figures.

Output is a pure function of the input: matplotlib's SVG writer gets a fixed
hash salt and no date stamp, so identical CSVs give identical files.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("scatter", "line")
SVG_METADATA = {"Date": None, "Creator": None}


def read_columns(path) -> dict[str, list]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        cols = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in reader.fieldnames:
                cols[name].append(row[name])
    return cols


def _numeric(values, name):
    try:
        return [float(v) for v in values]
    except ValueError:
        raise ValueError(f"column {name!r} is not numeric") from None


def plot_csv(csv_path, out_path, kind: str = "scatter", x: str | None = None,
             y: str | None = None, group: str | None = None, title: str | None = None):
    """Render two columns of ``csv_path`` as a scatter or line plot.

    Defaults: ``x_1``/``x_2`` for scatter, first two columns for line.
    ``group`` splits the points by the values of another column.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}")
    cols = read_columns(csv_path)
    names = list(cols)
    if x is None or y is None:
        if kind == "scatter" and "x_1" in cols and "x_2" in cols:
            x, y = x or "x_1", y or "x_2"
        elif len(names) >= 2:
            x, y = x or names[0], y or names[1]
        else:
            raise ValueError("need two columns to plot")
    for name in (x, y, group):
        if name is not None and name not in cols:
            raise ValueError(f"no column {name!r} in {csv_path}")
    xs, ys = _numeric(cols[x], x), _numeric(cols[y], y)
    keys = cols[group] if group else [""] * len(xs)

    with plt.rc_context({"svg.hashsalt": "stdlab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for key in sorted(set(keys), key=lambda k: (len(k), k)):
            px = [a for a, k in zip(xs, keys) if k == key]
            py = [b for b, k in zip(ys, keys) if k == key]
            label = f"{group}={key}" if group else None
            if kind == "scatter":
                ax.scatter(px, py, s=4, alpha=0.6, label=label)
            else:
                ax.plot(px, py, lw=1.2, label=label)
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        if title:
            ax.set_title(title)
        if group:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata=SVG_METADATA)
        plt.close(fig)
    return out_path
