"""Cross-validate a lesion significance classifier on a small phantom cohort.

This is the same code path as ``prostate-dl run``: five patient-level folds, a fresh
XmasNet per fold, and a results directory with metrics.csv, predictions and a report.
Training is shortened here so the demo finishes in a few minutes on one CPU core.

Run:  python demos/03_classification_run.py [--out demo_output] [--epochs 10]
"""
import argparse
from pathlib import Path

from prostate_dl.experiments import ExperimentConfig, run_experiment
from prostate_dl.phantom import generate_cohort

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="demo_output")
ap.add_argument("--n", type=int, default=30)
ap.add_argument("--epochs", type=int, default=10)
args = ap.parse_args()
out = Path(args.out)

cohort = out / "cohort"
if not (cohort / "manifest.json").exists():
    generate_cohort(args.n, seed=0, out_dir=cohort)

# Config E: adjusted 64-pixel crops, 56-pixel input, augmentation on. "NR" skips the
# 224 resampling so ADC crops come from the native 128 x 128 grid.
cfg = ExperimentConfig.from_code("bin:E:NR:ADC").with_overrides({"optim": {"epochs": args.epochs}})
rec = run_experiment(cfg, cohort, out / "runs")
for fold, m in rec.per_fold.items():
    print(f"fold {fold}: {'skipped' if m is None else 'AUC %.3f' % m['auc']}")
print(f"mean AUC {rec.mean['auc']:.3f} in {rec.runtime_s:.0f}s")
print("report:", out / "runs" / "bin_E_NR_ADC" / "report")
