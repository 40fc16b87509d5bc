"""
Run artifacts on disk.

    <run dir>/metrics.csv       epoch, train_loss, test_loss, mre, mse
    <run dir>/report.json       RunReport (config, status, events, wall times)
    <run dir>/checkpoint.npz    see networks.checkpoint

CSV files are UTF-8, comma separated, floats written as %.16e (17 significant
digits). Wall times are kept out of the CSV so repeated runs write identical files.
"""

import glob
import logging
import os

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "surrogate-services"
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from surrogate_services.errors import UsageError  # noqa: E402
from surrogate_services.experiments.schemas import RunReport  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.16e"
METRICS_FILE = "metrics.csv"
REPORT_FILE = "report.json"
CHECKPOINT_FILE = "checkpoint.npz"
CSV_COLUMNS = ["epoch", "train_loss", "test_loss", "mre", "mse"]

OPTIMIZER_LABELS = {"adam": "Adam", "sgd": "SGD", "lbfgs": "L-BFGS", "ngd": "NGD"}
PRECONDITIONING_LABELS = {"none": "✗", "frame_unstable": "✓ (H^T A H)", "frame_stable": "✓ (D^T C D)"}
PRECISION_LABELS = {"f16": "float16", "f32": "float32", "f64": "float64"}


def write_frame(frame: pd.DataFrame, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8", lineterminator="\n")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


def write_rows(rows: list, path: str, columns: list = None) -> str:
    """Writes a list of dicts as CSV with the fixed float format."""
    return write_frame(pd.DataFrame(rows, columns=columns), path)


def write_metrics(report: RunReport, directory: str) -> str:
    rows = [record.model_dump(include=set(CSV_COLUMNS)) for record in report.records]
    return write_rows(rows, os.path.join(directory, METRICS_FILE), columns=CSV_COLUMNS)


def write_report(report: RunReport, directory: str) -> str:
    path = os.path.join(directory, REPORT_FILE)
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(report.model_dump_json(indent=2))
    return path


def load_report(directory: str) -> RunReport:
    path = os.path.join(directory, REPORT_FILE)
    if not os.path.exists(path):
        raise UsageError(f"no {REPORT_FILE} in {directory}")
    with open(path, encoding="utf-8") as handle:
        return RunReport.model_validate_json(handle.read())


def read_metrics(directory: str) -> pd.DataFrame:
    return pd.read_csv(os.path.join(directory, METRICS_FILE))


def find_runs(root: str) -> list:
    """Run directories below ``root`` (those holding a report), sorted by path."""
    return sorted(os.path.dirname(p) for p in glob.glob(os.path.join(root, "**", REPORT_FILE), recursive=True))


def _format(value) -> str:
    return "n/a" if value is None or value != value else f"{value:.2e}"


def summary_table(root: str) -> pd.DataFrame:
    rows = []
    for directory in find_runs(root):
        report = load_report(directory)
        final = report.final
        run = report.config.run
        rows.append({
            "Run": run.name,
            "Optimizer": OPTIMIZER_LABELS[report.config.optimizer.name.value],
            "Precond.": PRECONDITIONING_LABELS[run.preconditioning.value],
            "Precision": PRECISION_LABELS[run.precision],
            "MRE": None if final is None else final.mre,
            "MSE": None if final is None else final.mse,
            "Loss": None if final is None else final.test_loss,
            "Status": report.status,
        })
    return pd.DataFrame(rows, columns=["Run", "Optimizer", "Precond.", "Precision", "MRE", "MSE", "Loss", "Status"])


def markdown_table(table: pd.DataFrame) -> str:
    """Optimizer | Precond. | Precision | MRE | MSE | Loss, diverged runs marked."""
    lines = ["| Optimizer | Precond. | Precision | MRE | MSE | Loss |", "|---|---|---|---|---|---|"]
    for row in table.itertuples(index=False):
        loss = _format(row.Loss) + (" (diverged)" if row.Status == "diverged" else "")
        lines.append(f"| {row.Optimizer} | {row[2]} | {row.Precision} | {_format(row.MRE)} | "
                     f"{_format(row.MSE)} | {loss} |")
    return "\n".join(lines) + "\n"


def plot_loss_curves(root: str, path: str) -> str:
    """Test loss against epoch for every run below ``root``, log scale, as SVG."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for directory in find_runs(root):
        metrics = read_metrics(directory)
        if metrics.empty:
            continue
        ax.semilogy(metrics["epoch"], metrics["test_loss"], label=load_report(directory).config.run.name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test loss (float64)")
    ax.grid(True, which="both", alpha=0.3)
    if ax.lines:
        ax.legend(fontsize="small")
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("wrote %s", path)
    return path


def render_report(root: str) -> str:
    """Writes ``summary.md`` and ``loss_curves.svg`` into ``root``; returns the markdown."""
    runs = find_runs(root)
    if not runs:
        raise UsageError(f"no run directories below {root}")
    text = markdown_table(summary_table(root))
    with open(os.path.join(root, "summary.md"), "w", encoding="utf-8") as handle:
        handle.write(text)
    plot_loss_curves(root, os.path.join(root, "loss_curves.svg"))
    return text
