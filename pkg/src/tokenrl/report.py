"""Load seed run directories, validate them, aggregate curves and draw SVGs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import evalscheme as ev
from .errors import ConfigError, ContractViolation

# keys that may legitimately differ between runs being aggregated
_PER_RUN_KEYS = {"seed"}

# metrics whose values must lie in [0, 1]
_UNIT_COLUMNS = {"train_acc", "accuracy", *ev.RATIO_NAMES}


@dataclass
class RunLog:
    path: Path
    config: dict
    train_rows: list[dict]
    eval_rows: list[dict]


def _parse_cell(value: str, column: str, where: str) -> Optional[float]:
    if value == "":
        return None
    try:
        x = float(value)
    except ValueError:
        raise ContractViolation(f"{where}: column {column!r} is not numeric: {value!r}") from None
    if not math.isfinite(x):
        raise ContractViolation(f"{where}: column {column!r} is not finite: {value!r}")
    if column in _UNIT_COLUMNS and not 0.0 <= x <= 1.0:
        raise ContractViolation(f"{where}: column {column!r} = {value} outside [0, 1]")
    if column.startswith("count_") or column == "mean_len":
        if x < 0:
            raise ContractViolation(f"{where}: column {column!r} = {value} is negative")
    return x


def _read_csv(path: Path, text_columns: Sequence[str] = ()) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, raw in enumerate(reader, start=2):
            where = f"{path.name} row {lineno}"
            row = {}
            for k, v in raw.items():
                row[k] = v if k in text_columns else _parse_cell(v, k, where)
            rows.append(row)
    return rows


def load_run(run_dir: str | Path) -> RunLog:
    run_dir = Path(run_dir)
    manifest = run_dir / "MANIFEST.json"
    if not manifest.exists():
        raise ConfigError(f"{run_dir} is not a run directory (no MANIFEST.json)")
    status = json.loads(manifest.read_text(encoding="utf-8")).get("status")
    if status != "complete":
        raise ConfigError(f"{run_dir} is marked {status!r}, not complete")
    config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    train_rows = _read_csv(run_dir / "metrics_train.csv")
    eval_rows = _read_csv(run_dir / "metrics_eval.csv", text_columns=("split", "config_id"))
    return RunLog(run_dir, config, train_rows, eval_rows)


def config_diff(a: dict, b: dict) -> list[str]:
    lines = []
    for key in sorted(set(a) | set(b)):
        if key in _PER_RUN_KEYS:
            continue
        if a.get(key, "<missing>") != b.get(key, "<missing>"):
            lines.append(f"  {key}: {a.get(key, '<missing>')!r} != {b.get(key, '<missing>')!r}")
    return lines


def check_compatible(runs: Sequence[RunLog]) -> None:
    if not runs:
        raise ConfigError("report needs at least one completed run directory")
    base = runs[0]
    for other in runs[1:]:
        diff = config_diff(base.config, other.config)
        if diff:
            raise ConfigError(
                f"runs {base.path} and {other.path} have incompatible configs:\n" + "\n".join(diff)
            )


def _train_curves(run: RunLog) -> dict[str, tuple[list[float], list[Optional[float]]]]:
    """Metric -> (x, y). train_acc is keyed by epoch, the rest by generation step."""
    curves: dict[str, tuple[list[float], list[Optional[float]]]] = {}
    last_per_epoch: dict[float, Optional[float]] = {}
    for row in run.train_rows:
        last_per_epoch[row["epoch"]] = row["train_acc"]
    curves["train_acc"] = (list(last_per_epoch), list(last_per_epoch.values()))
    if run.train_rows:
        cols = [c for c in run.train_rows[0] if c not in ("epoch", "generation_step", "train_acc")]
        for c in cols:
            curves[c] = ([r["generation_step"] for r in run.train_rows], [r[c] for r in run.train_rows])
    return curves


def _eval_curves(run: RunLog) -> dict[str, tuple[list[float], list[Optional[float]]]]:
    curves: dict[str, tuple[list[float], list[Optional[float]]]] = {}
    for row in run.eval_rows:
        name = f"eval_{row['split']}_{row['config_id']}"
        xs, ys = curves.setdefault(name, ([], []))
        xs.append(row["epoch"])
        ys.append(row["accuracy"])
    return curves


def run_curves(run: RunLog) -> dict[str, tuple[list[float], list[Optional[float]]]]:
    return {**_train_curves(run), **_eval_curves(run)}


def aggregate(runs: Sequence[RunLog]) -> list[tuple[str, float, Optional[float], Optional[float]]]:
    """Rows of (metric, x, mean, std) for every metric at every x."""
    per_run = [run_curves(r) for r in runs]
    metrics = list(per_run[0])
    rows = []
    for m in metrics:
        curves = [c[m] for c in per_run if m in c]
        has_null = any(v is None for _, ys in curves for v in ys)
        same_grid = all(list(x) == list(curves[0][0]) for x, _ in curves)
        if has_null or not same_grid:
            # pointwise over whichever runs report a value at that x
            xs = sorted(set().union(*[set(x) for x, _ in curves]))
            lookup = [dict(zip(x, y)) for x, y in curves]
            for x in xs:
                mean, std = ev.aggregate_nullable([d.get(x) for d in lookup])
                rows.append((m, x, mean, std))
        else:
            agg = ev.aggregate_runs([(x, y) for x, y in curves])
            rows.extend((m, float(x), float(mu), float(sd)) for x, mu, sd in zip(agg.x, agg.mean, agg.std))
    return rows


def write_aggregate(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "x", "mean", "std"])
        for m, x, mean, std in rows:
            w.writerow([m, repr(float(x)), ev.format_optional(mean), ev.format_optional(std)])


PLOT_FAMILIES = {
    "train_accuracy": (["train_acc"], "epoch"),
    "response_length": (["mean_len"], "generation step"),
    "reflection_ratios": (["reflection_ratio", "reflection_ratio_in_correct_answers"], "generation step"),
}


def plot_families(rows, out_dir: str | Path) -> list[Path]:
    """One SVG per metric family; mean line with a +-std band."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "tokenrl"
    by_metric: dict[str, list[tuple[float, float, float]]] = {}
    for m, x, mean, std in rows:
        if mean is not None:
            by_metric.setdefault(m, []).append((x, mean, std or 0.0))
    families = dict(PLOT_FAMILIES)
    for m in sorted(by_metric):
        if m.startswith("eval_"):
            families[m] = ([m], "epoch")
    out_dir = Path(out_dir)
    written = []
    for name, (metrics, xlabel) in families.items():
        present = [m for m in metrics if m in by_metric]
        if not present:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for m in present:
            pts = sorted(by_metric[m])
            xs = [p[0] for p in pts]
            mu = [p[1] for p in pts]
            sd = [p[2] for p in pts]
            ax.plot(xs, mu, label=m)
            ax.fill_between(xs, [a - b for a, b in zip(mu, sd)], [a + b for a, b in zip(mu, sd)], alpha=0.25)
        ax.set_xlabel(xlabel)
        ax.set_title(name)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def build_report(run_dirs: Sequence[str | Path], out_dir: str | Path, plots: bool = True) -> Path:
    runs = [load_run(d) for d in run_dirs]
    check_compatible(runs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = aggregate(runs)
    path = out_dir / "aggregate.csv"
    write_aggregate(rows, path)
    if plots:
        plot_families(rows, out_dir)
    return path
