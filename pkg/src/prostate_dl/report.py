"""Static report assets from persisted run directories.

Everything here is recomputed from ``predictions.bin``; nothing is read from
training-time state.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import ExperimentConfig, load_predictions, read_metrics_csv  # noqa: E402
from .objectives import SingleClassError, confusion_ordinal, roc_auc  # noqa: E402
from .training import SEG_THRESHOLD, EmptyFoldError, metrics_from_predictions  # noqa: E402

SEQ_COLUMNS = (("ADC", "ADC"), ("T2W", "T2W"), ("ADC_T2W", "ADC+T2W"))

# Fold-averaged values published for the private clinical cohort. They are
# printed beside synthetic results for orientation only.
REFERENCE = {
    **{f"bin:{l}:WR:{s}": v for l, row in {
        "A": (0.863, 0.730, 0.839), "B": (0.840, 0.772, 0.830), "C": (0.737, 0.592, 0.701),
        "D": (0.725, 0.679, 0.749), "E": (0.856, 0.776, 0.844), "F": (0.855, 0.815, 0.828),
        "G": (0.762, 0.706, 0.760), "H": (0.818, 0.640, 0.757)}.items()
       for s, v in zip(("ADC", "T2W", "ADC_T2W"), row)},
    **{f"bin:{l}:NR:{s}": v for l, row in {
        "A": (0.834, 0.741, 0.818), "B": (0.839, 0.825, 0.830), "C": (0.620, 0.627, 0.676),
        "E": (0.870, 0.750, 0.818), "F": (0.820, 0.803, 0.814), "G": (0.631, 0.656, 0.655)}.items()
       for s, v in zip(("ADC", "T2W", "ADC_T2W"), row)},
    **{f"pirads:{l}:{s}": v for l, row in {"E": (0.631, 0.658, 0.644), "F": (0.644, 0.664, 0.651)}.items()
       for s, v in zip(("ADC", "T2W", "ADC_T2W"), row)},
    **{f"seg:{l}:{m}:noaug:{s}": v for (m, l), row in {
        ("unet", "A"): (0.893, 0.889), ("unet", "B"): (0.898, 0.911), ("unet", "C"): (0.873, 0.882),
        ("unet", "D"): (0.893, 0.908), ("resnet", "A"): (0.895, 0.886), ("resnet", "B"): (0.888, 0.886),
        ("resnet", "C"): (0.876, 0.888), ("resnet", "D"): (0.872, 0.891)}.items()
       for s, v in zip(("ADC", "T2W"), row)},
    **{f"seg:{l}:unet:aug:{s}": v for l, row in {"A": (0.902, 0.900), "B": (0.915, 0.910)}.items()
       for s, v in zip(("ADC", "T2W"), row)},
    **{f"lesionseg:{l}:{m}:noaug:{s}": v for (m, l), row in {
        ("unet", "A"): (0.500, 0.500), ("unet", "B"): (0.674, 0.530), ("unet", "C"): (0.630, 0.511),
        ("unet", "D"): (0.652, 0.516), ("resnet", "A"): (0.500, 0.385), ("resnet", "B"): (0.501, 0.438),
        ("resnet", "C"): (0.500, 0.501), ("resnet", "D"): (0.500, 0.503)}.items()
       for s, v in zip(("ADC", "T2W"), row)},
    **{f"lesionseg:{l}:unet:aug:{s}": v for l, row in {"A": (0.690, 0.491), "B": (0.681, 0.526)}.items()
       for s, v in zip(("ADC", "T2W"), row)},
}
REFERENCE_NOTE = ("Reference values come from a private clinical cohort and are shown for "
                  "orientation only; they are not pass/fail targets for synthetic runs.")

PRIMARY_METRIC = {"binary": "auc", "pirads": "accuracy", "prostate_seg": "dice", "lesion_seg": "dice"}

# correct / missed by one class / missed by more
CONFUSION_COLORS = ("#4caf50", "#ffd54f", "#e57373")


@dataclass
class ReportBundle:
    results_dir: Path
    artifacts: dict[str, str] = field(default_factory=dict)
    metrics: dict[int, dict[str, float] | None] = field(default_factory=dict)


def _save(fig, base: Path) -> list[str]:
    fig.savefig(base.with_suffix(".png"), dpi=100)
    fig.savefig(base.with_suffix(".svg"), metadata={"Date": None})
    plt.close(fig)
    return [base.with_suffix(".png").name, base.with_suffix(".svg").name]


def plot_roc(curve, fold: int, base: Path) -> list[str]:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(curve.fpr, curve.tpr, drawstyle="default", lw=2)
    ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=1)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"Fold {fold + 1}")
    ax.text(0.55, 0.08, f"AUC = {curve.auc:.3f}", transform=ax.transAxes)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    fig.tight_layout()
    return _save(fig, base)


def confusion_colors(n: int = 5) -> np.ndarray:
    """Category per cell: 0 correct, 1 missed by one class, 2 missed by more."""
    i, j = np.indices((n, n))
    return np.minimum(np.abs(i - j), 2)


def plot_confusion(conf, title: str, base: Path) -> list[str]:
    mat = conf.matrix
    n = mat.shape[0]
    cats = confusion_colors(n)
    rgb = np.array([matplotlib.colors.to_rgb(CONFUSION_COLORS[c]) for c in cats.ravel()]).reshape(n, n, 3)
    fig, ax = plt.subplots(figsize=(4.2, 4))
    ax.imshow(rgb)
    for r in range(n):
        for c in range(n):
            ax.text(c, r, str(int(mat[r, c])), ha="center", va="center")
    ax.set_xticks(range(n), [str(k + 1) for k in range(n)])
    ax.set_yticks(range(n), [str(k + 1) for k in range(n)])
    ax.set_xlabel("Predicted PIRADS")
    ax.set_ylabel("Target PIRADS")
    ax.set_title(f"{title}\ncorrect {conf.correct}, missed by 1 class {conf.missed_by_1}, "
                 f"by more {conf.missed_by_more}", fontsize=8)
    fig.tight_layout()
    return _save(fig, base)


def montage_slice(target: np.ndarray) -> int:
    """Slice with the most ground-truth voxels (middle slice when the mask is empty)."""
    counts = target.reshape(target.shape[0], -1).sum(axis=1)
    return int(np.argmax(counts)) if counts.max() > 0 else target.shape[0] // 2


def plot_overlay(image: np.ndarray, pred: np.ndarray, target: np.ndarray, title: str, base: Path) -> list[str]:
    """Prediction on the left, ground truth on the right, both over the same slice."""
    fig, axes = plt.subplots(1, 2, figsize=(6, 3.2))
    for ax, mask, name in ((axes[0], pred, "prediction"), (axes[1], target, "ground truth")):
        ax.imshow(image, cmap="gray")
        ax.imshow(np.ma.masked_where(mask == 0, mask), cmap="autumn", alpha=0.45, vmin=0, vmax=1)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, base)


def emit_report(results_dir: str | Path) -> ReportBundle:
    """Plots and a Markdown summary for one run directory.

    Binary runs get one ROC plot (PNG + SVG) and ROC CSV per fold; PIRADS runs
    a confusion matrix per fold plus a pooled one; segmentation runs one
    overlay montage per test patient.
    """
    run_dir = Path(results_dir)
    config = ExperimentConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    preds = load_predictions(run_dir)
    index = json.loads((run_dir / "predictions.json").read_text())
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    bundle = ReportBundle(run_dir)
    files: list[str] = []
    for fold in sorted(preds):
        p, t = preds[fold]["predictions"], preds[fold]["targets"]
        try:
            bundle.metrics[fold] = metrics_from_predictions(config.task, p, t)
        except (SingleClassError, EmptyFoldError):
            bundle.metrics[fold] = None
        if len(p) == 0:
            continue
        if config.task == "binary":
            if bundle.metrics[fold] is None:
                continue
            curve = roc_auc(p, t)
            curve.to_csv(out / f"roc_fold{fold}.csv")
            files += [f"roc_fold{fold}.csv"] + plot_roc(curve, fold, out / f"roc_fold{fold}")
        elif config.task == "pirads":
            conf = confusion_ordinal(np.argmax(p, axis=1) + 1, t + 1)
            files += plot_confusion(conf, f"Fold {fold + 1}", out / f"confusion_fold{fold}")
        else:
            images = preds[fold]["images"]
            pids = index["patient_ids"][str(fold)]
            for k, pid in enumerate(pids):
                z = montage_slice(t[k])
                files += plot_overlay(images[k, z], (p[k, z] >= SEG_THRESHOLD).astype(np.uint8),
                                      t[k, z], f"{pid} slice {z}", out / f"overlay_{pid}")
    if config.task == "pirads":
        allp = np.concatenate([np.argmax(preds[f]["predictions"], axis=1) + 1 for f in sorted(preds)])
        allt = np.concatenate([preds[f]["targets"] + 1 for f in sorted(preds)])
        files += plot_confusion(confusion_ordinal(allp, allt), "All folds", out / "confusion_all")
    summary = out / "summary.md"
    summary.write_text(_summary_markdown(config, bundle.metrics))
    files.append(summary.name)
    bundle.artifacts = {f"report/{name}": f"report/{name}" for name in files}
    return bundle


def _summary_markdown(config: ExperimentConfig, metrics: dict[int, dict | None]) -> str:
    names = sorted({k for m in metrics.values() if m for k in m})
    lines = [f"# {config.config_code}", "", "| fold | " + " | ".join(names) + " |",
             "|---|" + "---|" * len(names)]
    for fold in sorted(metrics):
        m = metrics[fold]
        cells = [f"{m[n]:.4f}" if m else "skipped" for n in names]
        lines.append(f"| {fold + 1} | " + " | ".join(cells) + " |")
    done = [m for m in metrics.values() if m]
    if done:
        lines.append("| mean | " + " | ".join(f"{np.mean([m[n] for m in done]):.4f}" for n in names) + " |")
    ref = REFERENCE.get(config.config_code)
    if ref is not None:
        lines += ["", f"Reference {PRIMARY_METRIC[config.task]}: {ref:.3f} [^ref]", "", f"[^ref]: {REFERENCE_NOTE}"]
    if config.extrapolated:
        lines += ["", "This combination has no published counterpart (extrapolated grid cell)."]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# aggregated tables

def _row_key(config: ExperimentConfig) -> str:
    return config.config_code.rsplit(":", 1)[0]


def results_table(out_dir: str | Path, task: str) -> tuple[list[str], list[list]]:
    """Rows of config x sequence for all completed runs of ``task`` under ``out_dir``.

    The Average column is the mean of the sequence columns present in a row.
    """
    metric = PRIMARY_METRIC[task]
    cols = SEQ_COLUMNS if task in ("binary", "pirads") else SEQ_COLUMNS[:2]
    rows: dict[str, dict[str, float]] = {}
    for cfg_path in sorted(Path(out_dir).glob("*/config.json")):
        config = ExperimentConfig.from_dict(json.loads(cfg_path.read_text()))
        metrics_path = cfg_path.parent / "metrics.csv"
        if config.task != task or not metrics_path.exists():
            continue
        for row in read_metrics_csv(metrics_path):
            if row["fold"] == "mean" and row["metric_name"] == metric:
                rows.setdefault(_row_key(config), {})[config.sequence] = float(row["value"])
    header = ["config"] + [label for _, label in cols] + ["Average"]
    table = []
    for key in sorted(rows):
        vals = [rows[key].get(seq) for seq, _ in cols]
        present = [v for v in vals if v is not None]
        table.append([key] + vals + [float(np.mean(present)) if present else None])
    return header, table


def write_tables(out_dir: str | Path) -> list[Path]:
    """``table_<task>.csv`` and ``table_<task>.md`` for every task with completed runs."""
    out_dir = Path(out_dir)
    written = []
    for task in PRIMARY_METRIC:
        header, rows = results_table(out_dir, task)
        if not rows:
            continue
        csv_path = out_dir / f"table_{task}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([r[0]] + ["" if v is None else repr(v) for v in r[1:]])
        fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"
        md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        md += ["| " + " | ".join([r[0]] + [fmt(v) for v in r[1:]]) + " |" for r in rows]
        refs = [f"{r[0]}:{seq}={REFERENCE[f'{r[0]}:{seq}']:.3f}"
                for r in rows for seq, _ in SEQ_COLUMNS if f"{r[0]}:{seq}" in REFERENCE]
        if refs:
            md += ["", f"Reference values [^ref]: " + ", ".join(refs), "", f"[^ref]: {REFERENCE_NOTE}"]
        md_path = out_dir / f"table_{task}.md"
        md_path.write_text("\n".join(md) + "\n")
        written += [csv_path, md_path]
    return written
