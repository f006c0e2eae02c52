"""A tour of the synthetic cohort.

Each phantom patient has an ADC volume (20 x 128 x 128) and a T2W volume (20 x 224 x 224)
that share one anatomy: a bright ellipsoidal gland inside a body, plus up to three dark
lesions. A lesion's PIRADS score and Gleason grade group follow from its size, so the
significance label (grade group >= 2) is learnable from the image.

Run:  python demos/01_phantom_tour.py [--out demo_output]
"""
import argparse
from collections import Counter
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from prostate_dl.data import derive_significance
from prostate_dl.datasets import build_crop_dataset
from prostate_dl.geometry import max_area_slice
from prostate_dl.phantom import generate_studies

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="demo_output")
ap.add_argument("--n", type=int, default=12)
args = ap.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

studies = generate_studies(args.n, seed=0)
lesions = [l for s in studies for l in s.lesions]
print(f"{len(studies)} patients, {len(lesions)} lesions")
print("PIRADS counts:", dict(sorted(Counter(l.pirads for l in lesions).items())))
print("significant:", sum(derive_significance(l) for l in lesions), "of", len(lesions))

# Show the max-area slice of the first few lesions with the prostate outline.
shown = [(s, l) for s in studies for l in s.lesions][:4]
fig, axes = plt.subplots(2, len(shown), figsize=(3 * len(shown), 6), squeeze=False)
for col, (study, lesion) in enumerate(shown):
    for row, seq in enumerate(("ADC", "T2W")):
        loc = max_area_slice(lesion.mask(seq))
        ax = axes[row, col]
        ax.imshow(study.volume(seq).voxels[loc.slice_index], cmap="gray")
        ax.contour(study.prostate_mask(seq).voxels[loc.slice_index], levels=[0.5], colors="c", linewidths=0.7)
        ax.contour(lesion.mask(seq).voxels[loc.slice_index], levels=[0.5], colors="r", linewidths=0.7)
        ax.set_title(f"{study.patient_id} L{lesion.lesion_id} {seq}\nPIRADS {lesion.pirads}, GGG {lesion.ggg}",
                     fontsize=8)
        ax.axis("off")
fig.tight_layout()
fig.savefig(out / "phantom_tour.png", dpi=100)
print("wrote", out / "phantom_tour.png")

# The classifier never sees whole slices, only lesion crops. With the adjusted crop every
# lesion fills its 64 x 64 window regardless of its size.
ds = build_crop_dataset(studies, "binary", "ADC", crop_size=64, crop_type="adjusted", resample_224=True)
print("crop dataset:", ds.crops.shape, "labels", np.bincount(ds.labels, minlength=2).tolist())
