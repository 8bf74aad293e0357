"""Figure rendering from the documented CSV schemas.

Each render writes the image plus a sidecar CSV re-serializing exactly
the numbers that were plotted, in the canonical shortest-repr float
format. For canonically formatted inputs (everything the analysis CLI
emits) the sidecar is byte-identical to the input, so a plotted-data
regression is a simple file comparison.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class SchemaError(ValueError):
    pass


def _float_or_none(raw: str):
    return None if raw == "" else float(raw)


_SCHEMAS = {
    "distribution": OrderedDict(
        node=int, homophily=_float_or_none, degree=int),
    "bucket-accuracy": OrderedDict(
        bucket=int, lo=float, hi=float, count=int, model=str,
        accuracy=_float_or_none),
    "expert-weights": OrderedDict(
        bucket=int, lo=float, hi=float, count=int, expert=str,
        mean_weight=_float_or_none),
    "walk-sweep": OrderedDict(
        walk_length=int, mean_acc=float, std_acc=float, runs=int),
    "ablation": OrderedDict(
        arm=str, kind=str, mean_acc=float, std_acc=float, runs=int),
}

FIGURE_KINDS = tuple(_SCHEMAS)


@dataclass
class FigureSpec:
    kind: str
    input_path: str
    output_path: str
    title: str = ""
    sidecar_path: str = ""

    def __post_init__(self):
        if self.kind not in _SCHEMAS:
            raise SchemaError(f"unknown figure kind: {self.kind!r}; "
                              f"expected one of {FIGURE_KINDS}")
        if not self.sidecar_path:
            self.sidecar_path = self.output_path + ".data.csv"


def parse_table(path: str, kind: str) -> tuple[list[str], list[dict]]:
    schema = _SCHEMAS[kind]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [col for col in schema if col not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        rows = []
        for raw in reader:
            record = dict(zip(header, raw))
            rows.append({col: conv(record[col])
                         for col, conv in schema.items()})
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return list(schema), rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_sidecar(path: str, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in header])


def _bucket_labels(rows: list[dict]) -> list[str]:
    seen = OrderedDict()
    for row in rows:
        seen.setdefault(row["bucket"], (row["lo"], row["hi"]))
    return [f"{b}\n[{lo:.2f}, {hi:.2f}]" for b, (lo, hi) in seen.items()]


def _grouped_bars(ax, rows, group_key, series_key, value_key):
    groups = list(OrderedDict((r[group_key], None) for r in rows))
    series = list(OrderedDict((r[series_key], None) for r in rows))
    width = 0.8 / len(series)
    x = np.arange(len(groups))
    for s, name in enumerate(series):
        values = []
        for g in groups:
            match = [r[value_key] for r in rows
                     if r[group_key] == g and r[series_key] == name]
            value = match[0] if match and match[0] is not None else np.nan
            values.append(value)
        ax.bar(x + (s - (len(series) - 1) / 2) * width, values, width,
               label=name)
    ax.set_xticks(x)
    return groups, series


def _render_distribution(rows, spec):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    homophily = [r["homophily"] for r in rows if r["homophily"] is not None]
    degrees = [r["degree"] for r in rows]
    axes[0].hist(homophily, bins=20, color="#4878d0")
    axes[0].set_xlabel("node homophily")
    axes[0].set_ylabel("count")
    axes[1].hist(degrees, bins=20, color="#ee854a")
    axes[1].set_xlabel("degree")
    axes[1].set_ylabel("count")
    return fig


def _render_bucket_accuracy(rows, spec):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    _grouped_bars(ax, rows, "bucket", "model", "accuracy")
    ax.set_xticklabels(_bucket_labels(rows))
    ax.set_xlabel("homophily bucket")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    return fig


def _render_expert_weights(rows, spec):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    _grouped_bars(ax, rows, "bucket", "expert", "mean_weight")
    ax.set_xticklabels(_bucket_labels(rows))
    ax.set_xlabel("homophily bucket")
    ax.set_ylabel("mean expert weight")
    ax.set_ylim(0, 1)
    ax.legend()
    return fig


def _render_walk_sweep(rows, spec):
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = sorted(rows, key=lambda r: r["walk_length"])
    lengths = [r["walk_length"] for r in rows]
    means = [r["mean_acc"] for r in rows]
    stds = [r["std_acc"] for r in rows]
    ax.errorbar(lengths, means, yerr=stds, marker="o", capsize=4)
    ax.set_xlabel("max walk length")
    ax.set_ylabel("test accuracy")
    ax.set_xticks(lengths)
    return fig


def _render_ablation(rows, spec):
    fig, ax = plt.subplots(figsize=(5, 4))
    arms = [r["arm"] for r in rows]
    means = [r["mean_acc"] for r in rows]
    stds = [r["std_acc"] for r in rows]
    colors = ["#4878d0" if arm == "full" else "#d65f5f" for arm in arms]
    ax.bar(arms, means, yerr=stds, color=colors, capsize=4)
    ax.set_ylabel("test accuracy")
    kinds = {r["kind"] for r in rows}
    ax.set_xlabel(" / ".join(sorted(kinds)))
    return fig


_RENDERERS = {
    "distribution": _render_distribution,
    "bucket-accuracy": _render_bucket_accuracy,
    "expert-weights": _render_expert_weights,
    "walk-sweep": _render_walk_sweep,
    "ablation": _render_ablation,
}


def render(spec: FigureSpec) -> str:
    """Render one figure; returns the image path, writes the sidecar."""
    header, rows = parse_table(spec.input_path, spec.kind)
    fig = _RENDERERS[spec.kind](rows, spec)
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    fig.savefig(spec.output_path, dpi=120)
    plt.close(fig)
    write_sidecar(spec.sidecar_path, header, rows)
    return spec.output_path
