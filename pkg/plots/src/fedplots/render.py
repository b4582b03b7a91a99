"""Render metrics CSVs into publication-style vector figures.

Three figure kinds are supported:

* ``variance-curves``   -- client-loss variance against round, one curve
  per input CSV (synchronization quality over training).
* ``accuracy-curves``   -- test accuracy against round, one curve per
  input CSV.
* ``kappa-summary``     -- bar chart of the best test accuracy per sweep
  cell, read from a single sweep-summary CSV.

Input CSVs must carry the simulation CLI's column schema; a missing
column is reported by name.  Output is SVG (vector) so figures diff
cleanly.  Rendering never mutates its inputs, and the plotted values are
a pure function of the CSV contents.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

FIGURE_KINDS = ("variance-curves", "accuracy-curves", "kappa-summary")

_CURVE_COLUMNS = {
    "variance-curves": ("round", "loss_variance"),
    "accuracy-curves": ("round", "test_accuracy"),
}
_CURVE_YLABEL = {
    "variance-curves": "client loss variance",
    "accuracy-curves": "test accuracy",
}
_SUMMARY_COLUMNS = ("cell", "kappa0", "max_test_accuracy", "best_round")


class SchemaError(ValueError):
    """An input CSV does not match the expected metrics schema."""


@dataclass(frozen=True)
class PlotSpec:
    """What to draw: inputs with labels, figure kind, output path."""

    inputs: tuple
    output: str
    kind: str
    labels: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}")
        if not self.inputs:
            raise ValueError("at least one input CSV is required")
        if self.labels and len(self.labels) != len(self.inputs):
            raise ValueError("one label per input CSV is required")

    def resolved_labels(self) -> tuple:
        if self.labels:
            return self.labels
        return tuple(Path(p).stem for p in self.inputs)


@dataclass(frozen=True)
class Series:
    label: str
    x: tuple
    y: tuple


@dataclass(frozen=True)
class RenderResult:
    """The values a figure was drawn from, for cross-checking."""

    kind: str
    output: str
    series: tuple = field(default=())


def _read_csv(path) -> tuple:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: file is empty, no header row")
    return rows[0], rows[1:]


def _column(header, rows, name, path) -> list:
    if name not in header:
        raise SchemaError(f"{path}: missing column '{name}'")
    idx = header.index(name)
    return [row[idx] for row in rows]


def _load_curve(path, x_col: str, y_col: str) -> tuple:
    header, rows = _read_csv(path)
    if not rows:
        raise SchemaError(f"{path}: no data rows (header only)")
    xs = [float(v) for v in _column(header, rows, x_col, path)]
    pairs = [(x, float(y)) for x, y
             in zip(xs, _column(header, rows, y_col, path)) if y != ""]
    if not pairs:
        raise SchemaError(f"{path}: column '{y_col}' carries no values")
    return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)


def _render_curves(spec: PlotSpec) -> RenderResult:
    x_col, y_col = _CURVE_COLUMNS[spec.kind]
    series = []
    for path, label in zip(spec.inputs, spec.resolved_labels()):
        xs, ys = _load_curve(path, x_col, y_col)
        series.append(Series(label, xs, ys))

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for s in series:
        ax.plot(s.x, s.y, label=s.label, linewidth=1.6)
    ax.set_xlabel("round")
    ax.set_ylabel(_CURVE_YLABEL[spec.kind])
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(spec.output, format="svg")
    plt.close(fig)
    return RenderResult(spec.kind, spec.output, tuple(series))


def _render_kappa_summary(spec: PlotSpec) -> RenderResult:
    if len(spec.inputs) != 1:
        raise ValueError("kappa-summary takes exactly one sweep summary CSV")
    path = spec.inputs[0]
    header, rows = _read_csv(path)
    if not rows:
        raise SchemaError(f"{path}: no data rows (header only)")
    for name in _SUMMARY_COLUMNS:
        if name not in header:
            raise SchemaError(f"{path}: missing column '{name}'")
    cells = _column(header, rows, "cell", path)
    kappas = _column(header, rows, "kappa0", path)
    accs = [float(v) for v in _column(header, rows, "max_test_accuracy",
                                      path)]
    labels = tuple(k if k else "no-sync" for k in kappas)
    series = tuple(Series(label, (cell,), (acc,))
                   for label, cell, acc in zip(labels, cells, accs))

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    positions = range(len(accs))
    ax.bar(positions, accs, color="#4878b0")
    for pos, acc in zip(positions, accs):
        ax.annotate(f"{acc:.3f}", (pos, acc), ha="center", va="bottom",
                    fontsize=8)
    ax.set_xticks(list(positions))
    ax.set_xticklabels(labels)
    ax.set_xlabel("coupling strength")
    ax.set_ylabel("max test accuracy")
    fig.tight_layout()
    fig.savefig(spec.output, format="svg")
    plt.close(fig)
    return RenderResult(spec.kind, spec.output, series)


def render(spec: PlotSpec) -> RenderResult:
    """Draw the requested figure; raises before writing on bad inputs."""
    if spec.kind == "kappa-summary":
        return _render_kappa_summary(spec)
    return _render_curves(spec)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedplot",
        description="Render fedsync metrics CSVs to SVG figures.")
    parser.add_argument("inputs", nargs="+", help="metrics CSV paths")
    parser.add_argument("--kind", required=True, choices=FIGURE_KINDS)
    parser.add_argument("--out", required=True, help="output SVG path")
    parser.add_argument("--labels", nargs="*", default=[],
                        help="series labels, one per input CSV")
    args = parser.parse_args(argv)
    try:
        result = render(PlotSpec(inputs=tuple(args.inputs), output=args.out,
                                 kind=args.kind, labels=tuple(args.labels)))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result.output} ({len(result.series)} series)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
