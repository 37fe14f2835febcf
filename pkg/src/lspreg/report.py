"""Run-directory loading, comparison tables, curve CSVs and matplotlib figures."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import FormatError  # noqa: E402
from .train import LOG_COLUMNS, TrainLog  # noqa: E402

MANIFEST = "manifest.json"
TRAINLOG = "trainlog.csv"
ROBUSTNESS = "robustness.csv"
TABLE_COLUMNS = ("Clean", "FGSM", "PGD", "CW")
ROBUSTNESS_FIELDS = ("name", "model", "model_sha256", "manifest", "dataset", "dataset_fingerprint",
                     "attack", "norm", "epsilon", "steps", "step_size", "random_init", "seed",
                     "n", "clean_acc", "robust_acc")


@dataclass
class Run:
    name: str
    path: Path
    manifest: dict
    log: TrainLog
    attacks: dict = field(default_factory=dict)


def load_run(run_dir) -> Run:
    path = Path(run_dir)
    if not (path / TRAINLOG).is_file():
        raise FormatError(f"run {path}: missing {TRAINLOG}")
    if not (path / MANIFEST).is_file():
        raise FormatError(f"run {path}: {TRAINLOG} has no {MANIFEST} (orphaned log)")
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        log = TrainLog.from_csv(path / TRAINLOG)
    except (ValueError, KeyError) as exc:
        raise FormatError(f"run {path}: unreadable log or manifest ({exc})") from None
    outputs = {Path(o["path"]).name for o in manifest.get("outputs", {}).values()}
    if TRAINLOG not in outputs:
        raise FormatError(f"run {path}: {TRAINLOG} is not listed in {MANIFEST}")
    attacks = {}
    if (path / ROBUSTNESS).is_file():
        with open(path / ROBUSTNESS, newline="") as fh:
            for row in csv.DictReader(fh):
                attacks[row["attack"]] = row
    name = manifest.get("name") or path.name
    return Run(name, path, manifest, log, attacks)


def append_robustness_row(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROBUSTNESS_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: row.get(k, "") for k in ROBUSTNESS_FIELDS})


def table_rows(runs: list[Run]) -> list[dict]:
    rows = []
    for run in runs:
        row = {"Method": run.name}
        clean = next((a["clean_acc"] for a in run.attacks.values()), None)
        if clean is None and len(run.log):
            clean = run.log.records[-1]["clean_acc"]
        row["Clean"] = _fmt(clean)
        for col, key in (("FGSM", "fgsm"), ("PGD", "pgd"), ("CW", "cw")):
            row[col] = _fmt(run.attacks[key]["robust_acc"]) if key in run.attacks else "-"
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if v is None or v == "":
        return "-"
    v = float(v)
    return "-" if v != v else f"{100 * v:.2f}"


def markdown_table(rows: list[dict]) -> str:
    cols = ("Method",) + TABLE_COLUMNS
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(str(r[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def write_curves(run: Run, path) -> None:
    """Per-epoch series of one run, copied as logged (no smoothing)."""
    run.log.to_csv(path)


def plot_series(runs: list[Run], column: str, path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=120)
    for run in runs:
        ax.plot(run.log.column("epoch"), run.log.column(column), label=run.name, lw=1.4)
    ax.set_xlabel("epoch")
    ax.set_ylabel(column)
    ax.set_title(title or column)
    ax.grid(alpha=0.3)
    if len(runs) > 1:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_report(run_dirs, out_dir) -> dict:
    """Merge runs into report.md / report.csv, per-run curves and figures."""
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise FormatError("report needs at least one run directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = table_rows(runs)
    (out / "report.md").write_text(markdown_table(rows))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("Method",) + TABLE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    written = {"table": str(out / "report.md"), "table_csv": str(out / "report.csv")}
    seen: dict[str, int] = {}
    for run in runs:
        k = seen.get(run.name, 0)
        seen[run.name] = k + 1
        sub = out / (run.name if k == 0 else f"{run.name}_{k}")
        sub.mkdir(exist_ok=True)
        write_curves(run, sub / "curves.csv")
        written[f"curves:{sub.name}"] = str(sub / "curves.csv")
    for column, title in (("lsp", "monitored LSP loss"), ("ce", "cross-entropy"),
                          ("purity", "neighbor purity"), ("robust_acc", "validation PGD accuracy")):
        p = out / f"{column}_curves.png"
        plot_series(runs, column, p, title)
        written[f"figure:{column}"] = str(p)
    return written


__all__ = ["LOG_COLUMNS", "Run", "load_run", "build_report", "markdown_table", "table_rows",
           "append_robustness_row", "plot_series"]
