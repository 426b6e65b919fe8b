#!/usr/bin/env python3
"""Log-log convergence figures from benchmark CSV runs.

Reads one or more result files with columns
step,ndofs,error_T,eta,effectivity,newton_iters,h_max, draws error and
estimator curves against the dof count with dashed reference-slope lines
anchored at the last data point, and prints the least-squares slope of each
error series over a configurable tail window.

    plot_convergence.py --inputs a.csv b.csv --labels "p=2" "p=3" \
        --slopes -0.5 -1 --tail 5 --out fig.svg
"""

import argparse
import csv
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

COLUMNS = ("step", "ndofs", "error_T", "eta", "effectivity",
           "newton_iters", "h_max")


class PlotError(Exception):
    pass


def read_run(path):
    """Parse one results CSV; malformed rows fail with their row number."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(COLUMNS):
            raise PlotError("%s: expected header %s" % (path, ",".join(COLUMNS)))
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(COLUMNS):
                raise PlotError("%s: row %d has %d fields, expected %d"
                                % (path, lineno, len(row), len(COLUMNS)))
            try:
                rows.append((int(row[1]), float(row[2]), float(row[3])))
            except ValueError as exc:
                raise PlotError("%s: row %d: %s" % (path, lineno, exc)) from None
    if not rows:
        raise PlotError("%s: no data rows" % path)
    ndofs = np.array([r[0] for r in rows], dtype=float)
    return ndofs, np.array([r[1] for r in rows]), np.array([r[2] for r in rows])


def tail_slope(ndofs, values, tail):
    """Least-squares slope of log(values) against log(ndofs) over the last
    ``tail`` entries (all of them if fewer)."""
    n = min(max(tail, 2), len(ndofs))
    keep = values[-n:] > 0
    if keep.sum() < 2:
        raise PlotError("need at least two positive values for a slope")
    x = np.log(ndofs[-n:][keep])
    y = np.log(values[-n:][keep])
    return float(np.polyfit(x, y, 1)[0])


def plot_convergence(inputs, labels=None, slopes=(), tail=5, out="convergence.svg"):
    """Render the figure and return the printed slopes per input series."""
    if not inputs:
        raise PlotError("at least one input CSV is required")
    if labels and len(labels) != len(inputs):
        raise PlotError("number of labels must match number of inputs")
    labels = labels or [path for path in inputs]

    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    computed = []
    anchor = None
    for path, label in zip(inputs, labels):
        ndofs, err, eta = read_run(path)
        slope = tail_slope(ndofs, err, tail)
        computed.append(slope)
        print("%s: error slope %.6f" % (label, slope))
        ax.loglog(ndofs, err, "o-", label="error (%s)" % label)
        ax.loglog(ndofs, eta, "s--", fillstyle="none",
                  label="estimator (%s)" % label)
        anchor = (ndofs[-1], err[-1])
    for rate in slopes:
        n0, e0 = anchor
        ns = np.array([n0 / 16.0, n0])
        ax.loglog(ns, e0 * (ns / n0) ** rate, "k--", linewidth=0.8)
        ax.annotate("slope %g" % rate, xy=(ns[0], e0 * (ns[0] / n0) ** rate),
                    fontsize=8)
    ax.set_xlabel("degrees of freedom")
    ax.set_ylabel("error / estimator")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return computed


def main(argv=None):
    par = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    par.add_argument("--inputs", nargs="+", required=True)
    par.add_argument("--labels", nargs="*", default=None)
    par.add_argument("--slopes", nargs="*", type=float, default=[])
    par.add_argument("--tail", type=int, default=5)
    par.add_argument("--out", default="convergence.svg")
    args = par.parse_args(argv)
    try:
        plot_convergence(args.inputs, args.labels, args.slopes, args.tail,
                         args.out)
    except PlotError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
