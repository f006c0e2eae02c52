"""Deterministic synthetic bi-parametric prostate phantoms.

Shapes live in normalised coordinates (each axis in [0, 1]) and are rasterised
separately onto the ADC and T2W grids, so both sequences show the same anatomy
at different resolutions.

Label rules (all invented, each mimicking a statistic of the clinical cohort):

* a lesion whose largest bounding-box side on its max-area T2W slice,
  measured at 224 in-plane scale, is below ``min_significant_dim`` is never
  clinically significant; above it the probability of significance rises
  logistically with that size;
* significant lesions carry the full lesion contrast and insignificant ones a
  damped contrast, so the label stays visible after the lesion is cropped
  and rescaled;
* PIRADS comes from the quantile of the lesion radius within its sampling
  range, mapped onto {1, 3, 4, 5}; score 2 never occurs and score 1 is rare.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (LesionRecord, MaskKind, MaskVolume, PatientStudy, Sequence, Volume3D,
                   derive_significance, save_study)
from .geometry import max_area_slice

REFERENCE_HW = 224
PIRADS_QUANTILES = ((0.03, 1), (0.30, 3), (0.65, 4), (1.01, 5))


class PlacementError(RuntimeError):
    """A lesion could not be placed inside the prostate."""


@dataclass(frozen=True)
class PhantomParams:
    n_patients: int = 60
    adc_extent: tuple[int, int, int] = (20, 128, 128)
    t2w_extent: tuple[int, int, int] = (20, 224, 224)
    prostate_radius: tuple[float, float] = (0.18, 0.28)
    prostate_z_radius: tuple[float, float] = (0.25, 0.35)
    lesions_per_patient: tuple[int, int] = (0, 3)
    lesion_radius: tuple[float, float] = (2.0, 12.0)
    prostate_contrast: float = 0.8
    lesion_contrast: float = -0.7
    insignificant_contrast_scale: float = 0.4
    noise_sigma: float = 0.08
    bias_amplitude: float = 0.15
    min_significant_dim: float = 10.0
    significance_midpoint: float = 17.5
    significance_slope: float = 3.0
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("prostate_radius", "prostate_z_radius", "lesion_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        lo, hi = self.lesions_per_patient
        if not 0 <= lo <= hi:
            raise ValueError(f"lesions_per_patient must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        for name in ("adc_extent", "t2w_extent"):
            ext = getattr(self, name)
            if len(ext) != 3 or min(ext) < 1:
                raise ValueError(f"{name} must be three positive ints, got {ext}")
        if self.noise_sigma < 0 or self.significance_slope <= 0:
            raise ValueError("noise_sigma must be >= 0 and significance_slope > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass(frozen=True)
class _Ellipsoid:
    center: np.ndarray   # normalised (z, y, x)
    radii: np.ndarray    # normalised semi-axes (z, y, x)
    angle: float         # in-plane rotation

    def inside(self, shape) -> np.ndarray:
        s, h, w = shape
        z = ((np.arange(s) + 0.5) / s - self.center[0]) / self.radii[0]
        y = (np.arange(h) + 0.5) / h - self.center[1]
        x = (np.arange(w) + 0.5) / w - self.center[2]
        c, sn = math.cos(self.angle), math.sin(self.angle)
        yy = (c * y[:, None] + sn * x[None, :]) / self.radii[1]
        xx = (-sn * y[:, None] + c * x[None, :]) / self.radii[2]
        plane = yy ** 2 + xx ** 2
        return (z[:, None, None] ** 2 + plane[None]) <= 1.0

    def level(self, points: np.ndarray) -> np.ndarray:
        d = points - self.center
        c, sn = math.cos(self.angle), math.sin(self.angle)
        yy = (c * d[:, 1] + sn * d[:, 2]) / self.radii[1]
        xx = (-sn * d[:, 1] + c * d[:, 2]) / self.radii[2]
        return (d[:, 0] / self.radii[0]) ** 2 + yy ** 2 + xx ** 2

    def surface(self) -> np.ndarray:
        dirs = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
                         if (a, b, c) != (0, 0, 0)], dtype=float)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        c, sn = math.cos(self.angle), math.sin(self.angle)
        local = dirs * self.radii
        y = c * local[:, 1] - sn * local[:, 2]
        x = sn * local[:, 1] + c * local[:, 2]
        return self.center + np.stack([local[:, 0], y, x], axis=1)


def significance_probability(max_dim: float, params: PhantomParams) -> float:
    if max_dim < params.min_significant_dim:
        return 0.0
    return 1.0 / (1.0 + math.exp(-(max_dim - params.significance_midpoint) / params.significance_slope))


def pirads_for_radius(radius: float, params: PhantomParams) -> int:
    lo, hi = params.lesion_radius
    q = 0.5 if hi == lo else (radius - lo) / (hi - lo)
    for cut, score in PIRADS_QUANTILES:
        if q < cut:
            return score
    return 5


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def _rasterise_lesion(ell: _Ellipsoid, prostate: np.ndarray, taken: np.ndarray) -> np.ndarray:
    free = prostate & ~taken
    m = ell.inside(prostate.shape) & free
    if not m.any():
        # nearest free voxel to the lesion centre keeps the mask non-empty
        pts = np.argwhere(free)
        if pts.size == 0:
            raise PlacementError("no free prostate voxel left for lesion")
        centre = ell.center * np.array(prostate.shape) - 0.5
        m[tuple(pts[np.argmin(((pts - centre) ** 2).sum(axis=1))])] = True
    return _largest_component(m)


def _bias_field(rng: np.random.Generator, shape, amplitude: float) -> np.ndarray:
    s, h, w = shape
    z = np.linspace(-1, 1, s)[:, None, None]
    y = np.linspace(-1, 1, h)[None, :, None]
    x = np.linspace(-1, 1, w)[None, None, :]
    a = rng.uniform(-1, 1, size=5) * amplitude / 2
    return 1.0 + a[0] * y + a[1] * x + a[2] * y * x + a[3] * (y ** 2 - 0.5) + a[4] * z * 0.5


def _render(rng, shape, body, prostate, lesions, levels, params) -> np.ndarray:
    img = np.full(shape, 0.1)
    img[body] = 1.0
    img[prostate] = 1.0 + params.prostate_contrast
    for m, lvl in zip(lesions, levels):
        img[m] = lvl
    img = ndimage.gaussian_filter(img, sigma=(0, 0.6, 0.6))
    img *= _bias_field(rng, shape, params.bias_amplitude)
    img *= rng.uniform(0.8, 1.2)
    img += rng.normal(0.0, params.noise_sigma, size=shape)
    return img.astype(np.float32)


def generate_study(seed: int, params: PhantomParams | None = None,
                   patient_id: str | None = None) -> PatientStudy:
    params = params or PhantomParams()
    rng = np.random.default_rng(seed)
    pid = patient_id or f"phantom-{seed}"

    prostate_ell = _Ellipsoid(
        center=np.array([0.5 + rng.uniform(-0.05, 0.05), 0.5 + rng.uniform(-0.04, 0.04),
                         0.5 + rng.uniform(-0.04, 0.04)]),
        radii=np.array([rng.uniform(*params.prostate_z_radius),
                        rng.uniform(*params.prostate_radius), rng.uniform(*params.prostate_radius)]),
        angle=rng.uniform(-0.4, 0.4))
    body_ell = _Ellipsoid(np.array([0.5, 0.5, 0.5]), np.array([10.0, 0.42, 0.45]), 0.0)

    n_slices = params.t2w_extent[0]
    n_lesions = int(rng.integers(params.lesions_per_patient[0], params.lesions_per_patient[1] + 1))
    placed: list[tuple[_Ellipsoid, float]] = []
    for _ in range(n_lesions):
        radius = rng.uniform(*params.lesion_radius)
        stretch = rng.uniform(0.8, 1.2, size=2)
        radii = np.array([max(0.8, 0.25 * radius) / n_slices,
                          radius * stretch[0] / REFERENCE_HW, radius * stretch[1] / REFERENCE_HW])
        angle = rng.uniform(0, math.pi)
        for _attempt in range(params.max_retries):
            room = np.clip(0.95 * prostate_ell.radii - radii, 1e-3, None)
            offset = rng.uniform(-1, 1, size=3) * room
            cand = _Ellipsoid(prostate_ell.center + offset, radii, angle)
            if prostate_ell.level(cand.surface()).max() > 0.9:
                continue
            if any(np.linalg.norm((cand.center - o.center) / (cand.radii + o.radii)) < 1.0
                   for o, _ in placed):
                continue
            placed.append((cand, radius))
            break
        else:
            raise PlacementError(f"{pid}: lesion did not fit inside the prostate after "
                                 f"{params.max_retries} attempts")

    grids = {Sequence.ADC: tuple(params.adc_extent), Sequence.T2W: tuple(params.t2w_extent)}
    prostate_masks, lesion_masks = {}, {}
    for seq, shape in grids.items():
        prostate_masks[seq] = prostate_ell.inside(shape)
        taken = np.zeros(shape, bool)
        lesion_masks[seq] = []
        for ell, _ in placed:
            m = _rasterise_lesion(ell, prostate_masks[seq], taken)
            taken |= m
            lesion_masks[seq].append(m)

    records, levels = [], []
    t2w_w = params.t2w_extent[2]
    prostate_level = 1.0 + params.prostate_contrast
    for i, (ell, radius) in enumerate(placed):
        loc = max_area_slice(lesion_masks[Sequence.T2W][i])
        max_dim = max(loc.width, loc.height) * REFERENCE_HW / t2w_w
        significant = rng.random() < significance_probability(max_dim, params)
        ggg = int(rng.choice([2, 3, 4, 5], p=[0.45, 0.3, 0.15, 0.1])) if significant \
            else int(rng.integers(0, 2))
        scale = 1.0 if significant else params.insignificant_contrast_scale
        levels.append(prostate_level + params.lesion_contrast * scale)
        records.append(dict(lesion_id=i, pirads=pirads_for_radius(radius, params), ggg=ggg))

    volumes = {}
    spacing = {Sequence.ADC: (3.0, 224 / grids[Sequence.ADC][1], 224 / grids[Sequence.ADC][2]),
               Sequence.T2W: (3.0, 224 / grids[Sequence.T2W][1], 224 / grids[Sequence.T2W][2])}
    for seq, shape in grids.items():
        body = body_ell.inside(shape)
        img = _render(rng, shape, body, prostate_masks[seq], lesion_masks[seq], levels, params)
        volumes[seq] = Volume3D(img, seq, spacing[seq])

    lesions = tuple(
        LesionRecord(r["lesion_id"], r["pirads"], r["ggg"],
                     MaskVolume(lesion_masks[Sequence.ADC][i].astype(np.uint8), MaskKind.LESION),
                     MaskVolume(lesion_masks[Sequence.T2W][i].astype(np.uint8), MaskKind.LESION))
        for i, r in enumerate(records))
    return PatientStudy(
        pid, volumes[Sequence.ADC], volumes[Sequence.T2W],
        MaskVolume(prostate_masks[Sequence.ADC].astype(np.uint8), MaskKind.PROSTATE),
        MaskVolume(prostate_masks[Sequence.T2W].astype(np.uint8), MaskKind.PROSTATE),
        lesions)


def lesion_max_dim(record: LesionRecord, t2w_width: int) -> float:
    """Largest bbox side of the max-area T2W slice, at 224 in-plane scale."""
    loc = max_area_slice(record.mask_t2w)
    return max(loc.width, loc.height) * REFERENCE_HW / t2w_width


def study_seed(cohort_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([cohort_seed, index]).generate_state(1)[0])


def manifest_entry(study: PatientStudy) -> dict:
    w = study.t2w.shape[2]
    return {
        "patient_id": study.patient_id,
        "n_lesions": len(study.lesions),
        "lesions": [{"lesion_id": les.lesion_id, "pirads": les.pirads, "ggg": les.ggg,
                     "significant": derive_significance(les),
                     "max_dim": round(lesion_max_dim(les, w), 4)} for les in study.lesions],
    }


def generate_cohort(n: int, seed: int, params: PhantomParams | None = None,
                    out_dir: str | Path | None = None) -> list[dict]:
    """Generate ``n`` studies; when ``out_dir`` is given, write bundles and ``manifest.json``."""
    params = params or PhantomParams()
    manifest = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        study = generate_study(study_seed(seed, i), params, patient_id=f"P{i:04d}")
        manifest.append(manifest_entry(study))
        if out_dir is not None:
            save_study(study, out_dir / study.patient_id)
    if out_dir is not None:
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
        (out_dir / "phantom_params.json").write_text(
            json.dumps({"seed": seed, "n": n, "params": params.to_dict()}, indent=1))
    return manifest


def generate_studies(n: int, seed: int, params: PhantomParams | None = None) -> list[PatientStudy]:
    """In-memory counterpart of :func:`generate_cohort`."""
    params = params or PhantomParams()
    return [generate_study(study_seed(seed, i), params, patient_id=f"P{i:04d}") for i in range(n)]
