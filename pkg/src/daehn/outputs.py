"""Artifact serialization: CSV schemas, metrics.json, SVG emission.

Schemas (header rows are fixed; empty cell where a column does not apply):
  learning_curve.csv  epoch,split,mse_data,mse_derivative,abs_violation,nonconverged_fraction
  parity.csv          quantity,true,predicted
  heatmap.csv         x1,x2,true,predicted,abs_error,abs_violation
  predictions.csv     split,<axis names...>,<output>_true...,<output>_pred...
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .svg import line_plot_svg


def _cell(v):
    if v is None:
        return ""
    return format(float(v), ".17g")


def emit_learning_curve(rows, path):
    """rows: CurveRow list."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["epoch", "split", "mse_data", "mse_derivative", "abs_violation",
             "nonconverged_fraction"]
        )
        for r in rows:
            m = r.metrics
            w.writerow(
                [r.epoch, r.split, _cell(m.mse_data), _cell(m.mse_derivative),
                 _cell(m.abs_violation), _cell(m.nonconverged_fraction)]
            )


def emit_parity(pairs, path):
    """pairs: (quantity, true array, predicted array)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "true", "predicted"])
        for name, t, p in pairs:
            for tv, pv in zip(t, p):
                w.writerow([name, _cell(tv), _cell(pv)])


def emit_heatmap(grid, path):
    """grid: iterable of (x1, x2, true, predicted, abs_error, abs_violation)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "true", "predicted", "abs_error", "abs_violation"])
        for row in grid:
            w.writerow([_cell(v) for v in row])


def emit_predictions(axes_names, output_names, X, Y_true, Y_pred, split, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = (
            ["split"] + list(axes_names)
            + [f"{n}_true" for n in output_names]
            + [f"{n}_pred" for n in output_names]
        )
        w.writerow(header)
        for i in range(len(X)):
            w.writerow(
                [split[i]] + [_cell(v) for v in X[i]]
                + [_cell(v) for v in Y_true[i]] + [_cell(v) for v in Y_pred[i]]
            )


def emit_metrics_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_curve_plots(rows, out_dir):
    out_dir = Path(out_dir)
    epochs = {"train": [], "val": []}
    mse = {"train": [], "val": []}
    viol = {"train": [], "val": []}
    for r in rows:
        epochs[r.split].append(r.epoch)
        mse[r.split].append(r.metrics.mse_data)
        viol[r.split].append(r.metrics.abs_violation)
    svg = line_plot_svg(
        [("train", epochs["train"], mse["train"]),
         ("validation", epochs["val"], mse["val"])],
        "Data MSE", "epoch", "mse",
    )
    (out_dir / "learning_curve_mse.svg").write_text(svg)
    svg = line_plot_svg(
        [("train", epochs["train"], viol["train"]),
         ("validation", epochs["val"], viol["val"])],
        "Mean absolute constraint violation", "epoch", "violation",
    )
    (out_dir / "learning_curve_violation.svg").write_text(svg)
