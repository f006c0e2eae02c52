"""Prostate segmentation with a slimmed 3-D U-Net.

Dividing every channel width by eight keeps the architecture but cuts the cost by about
sixty times, which makes a full five-fold run practical on a CPU. Volumes are resized to
16 x 64 x 64 and the model trains on dice + 1.5 x BCE with 3-D augmentation.

Run:  python demos/04_segmentation_run.py [--out demo_output] [--epochs 5]
"""
import argparse
from pathlib import Path

from prostate_dl.experiments import ExperimentConfig, run_experiment
from prostate_dl.phantom import generate_cohort

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="demo_output")
ap.add_argument("--n", type=int, default=30)
ap.add_argument("--epochs", type=int, default=5)
args = ap.parse_args()
out = Path(args.out)

cohort = out / "cohort"
if not (cohort / "manifest.json").exists():
    generate_cohort(args.n, seed=0, out_dir=cohort)

cfg = ExperimentConfig.from_code("seg:B:unet:aug:ADC").with_overrides(
    {"seg_extent": [16, 64, 64], "width_divisor": 8, "optim": {"epochs": args.epochs}})
rec = run_experiment(cfg, cohort, out / "runs")
for fold, m in rec.per_fold.items():
    print(f"fold {fold}: {'skipped' if m is None else 'dice %.3f' % m['dice']}")
print(f"mean dice {rec.mean['dice']:.3f} in {rec.runtime_s:.0f}s")
print("overlays:", out / "runs" / "seg_B_unet_aug_ADC" / "report")
