"""Turn patient studies into model-ready arrays.

Classification samples are 2-D lesion crops taken from the max-area slice of
each lesion; segmentation samples are whole volumes resized to a fixed extent
together with a prostate or lesion-union mask.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence as Seq

import numpy as np

from .data import LesionRecord, MaskKind, PatientStudy, Sequence, derive_significance, union_masks
from .geometry import (crop_adjusted, crop_fixed, max_area_slice, resample_mask, resample_volume,
                       resize_linear, resize_nearest)

log = logging.getLogger(__name__)

CLASSIFICATION_SEQUENCES = ("ADC", "T2W", "ADC_T2W")
RESAMPLE_HW = 224


def zscore(arr: np.ndarray) -> np.ndarray:
    """Per-volume standardisation; a constant volume maps to zeros."""
    a = np.asarray(arr, dtype=np.float64)
    sd = a.std()
    return ((a - a.mean()) / sd if sd > 0 else a - a.mean()).astype(np.float32)


def sequences_for(sequence: str) -> tuple[Sequence, ...]:
    if sequence == "ADC_T2W":
        return (Sequence.ADC, Sequence.T2W)
    if sequence in ("ADC", "T2W"):
        return (Sequence(sequence),)
    raise ValueError(f"unknown sequence {sequence!r}")


def _check_disjoint(a: Iterable[str], b: Iterable[str]):
    shared = set(a) & set(b)
    if shared:
        raise RuntimeError(f"train/test leakage: {sorted(shared)[:5]}")


# ---------------------------------------------------------------------------
# classification

@dataclass
class CropDataset:
    crops: np.ndarray            # (N, C, crop, crop) float32
    labels: np.ndarray           # (N,) int64; significance or PIRADS - 1
    patient_ids: list[str]
    lesion_ids: list[int]
    n_clipped: int = 0

    def __post_init__(self):
        n = len(self.labels)
        if self.crops.shape[0] != n or len(self.patient_ids) != n or len(self.lesion_ids) != n:
            raise ValueError("crop dataset fields differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, patient_ids: Iterable[str]) -> "CropDataset":
        keep = set(patient_ids)
        idx = [i for i, p in enumerate(self.patient_ids) if p in keep]
        return CropDataset(self.crops[idx], self.labels[idx], [self.patient_ids[i] for i in idx],
                           [self.lesion_ids[i] for i in idx])

    def split(self, train_ids: Iterable[str], test_ids: Iterable[str]):
        train_ids, test_ids = list(train_ids), list(test_ids)
        _check_disjoint(train_ids, test_ids)
        return self.subset(train_ids), self.subset(test_ids)


class _Normalised:
    """Caches the resampled, z-scored slices of one study."""

    def __init__(self, study: PatientStudy, resample_224: bool):
        self.study = study
        self.resample = resample_224
        self._cache: dict[Sequence, np.ndarray] = {}

    def volume(self, seq: Sequence) -> np.ndarray:
        if seq not in self._cache:
            vol = self.study.volume(seq)
            if self.resample:
                vol = resample_volume(vol, RESAMPLE_HW)
            self._cache[seq] = zscore(vol.voxels)
        return self._cache[seq]

    def lesion_mask(self, lesion: LesionRecord, seq: Sequence):
        m = lesion.mask(seq)
        if m is not None and self.resample and m.shape[1:] != (RESAMPLE_HW, RESAMPLE_HW):
            m = resample_mask(m, RESAMPLE_HW)
        return m


def lesion_crop(vols: _Normalised, lesion: LesionRecord, seq: Sequence, crop_size: int,
                crop_type: str, square: bool = False) -> tuple[np.ndarray, bool]:
    """One (crop, crop) array and whether a fixed window clipped the lesion."""
    mask = vols.lesion_mask(lesion, seq)
    loc = max_area_slice(mask)
    img = vols.volume(seq)[loc.slice_index]
    if crop_type == "adjusted":
        return crop_adjusted(img, loc.bbox, crop_size, square=square), False
    if crop_type == "fixed":
        clipped = loc.bbox.height > crop_size or loc.bbox.width > crop_size
        return crop_fixed(img, loc.center, crop_size), clipped
    raise ValueError(f"unknown crop type {crop_type!r}")


def lesion_label(lesion: LesionRecord, task: str) -> int:
    if task == "binary":
        return derive_significance(lesion)
    if task == "pirads":
        return lesion.pirads - 1
    raise ValueError(f"not a classification task: {task!r}")


def build_crop_dataset(studies: Seq[PatientStudy], task: str, sequence: str, crop_size: int,
                       crop_type: str, resample_224: bool, square: bool = False) -> CropDataset:
    """Crops for every lesion that has masks in all sequences the input needs.

    For ADC_T2W each sequence is cropped at its own max-area slice (the two
    sequences are not registered) and the crops are stacked as channels.
    """
    seqs = sequences_for(sequence)
    crops, labels, pids, lids = [], [], [], []
    clipped = 0
    for study in studies:
        vols = _Normalised(study, resample_224)
        for lesion in study.lesions:
            if any(lesion.mask(s) is None for s in seqs):
                continue
            chans = []
            for s in seqs:
                c, clip = lesion_crop(vols, lesion, s, crop_size, crop_type, square)
                chans.append(c)
                clipped += clip
            crops.append(np.stack(chans))
            labels.append(lesion_label(lesion, task))
            pids.append(study.patient_id)
            lids.append(lesion.lesion_id)
    if clipped:
        log.warning("fixed %d-pixel window clipped %d lesion crop(s)", crop_size, clipped)
    arr = np.stack(crops).astype(np.float32) if crops else np.zeros((0, len(seqs), crop_size, crop_size), np.float32)
    return CropDataset(arr, np.asarray(labels, dtype=np.int64), pids, lids, clipped)


# ---------------------------------------------------------------------------
# segmentation

@dataclass
class SegDataset:
    images: np.ndarray           # (N, 1, S, H, W) float32
    masks: np.ndarray            # (N, 1, S, H, W) uint8
    patient_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.shape != self.masks.shape or len(self.patient_ids) != self.images.shape[0]:
            raise ValueError("segmentation dataset fields differ in shape")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, patient_ids: Iterable[str]) -> "SegDataset":
        keep = set(patient_ids)
        idx = [i for i, p in enumerate(self.patient_ids) if p in keep]
        return SegDataset(self.images[idx], self.masks[idx], [self.patient_ids[i] for i in idx])

    def split(self, train_ids: Iterable[str], test_ids: Iterable[str]):
        train_ids, test_ids = list(train_ids), list(test_ids)
        _check_disjoint(train_ids, test_ids)
        return self.subset(train_ids), self.subset(test_ids)


def segmentation_target(study: PatientStudy, seq: Sequence, target: str):
    if target == "prostate":
        return study.prostate_mask(seq)
    if target == "lesion":
        masks = [l.mask(seq) for l in study.lesions if l.mask(seq) is not None]
        return union_masks(masks, shape=study.volume(seq).shape, kind=MaskKind.LESION)
    raise ValueError(f"unknown segmentation target {target!r}")


def build_seg_dataset(studies: Seq[PatientStudy], sequence: str, target: str,
                      extent: tuple[int, int, int]) -> SegDataset:
    """Volumes resized (trilinear) to ``extent`` and z-scored; masks resized nearest."""
    if sequence not in ("ADC", "T2W"):
        raise ValueError(f"segmentation uses a single sequence, got {sequence!r}")
    seq = Sequence(sequence)
    extent = tuple(int(e) for e in extent)
    imgs, masks, pids = [], [], []
    for study in studies:
        vol = study.volume(seq).voxels
        imgs.append(zscore(resize_linear(vol, extent)))
        m = segmentation_target(study, seq, target).voxels
        masks.append((resize_nearest(m, extent) >= 1).astype(np.uint8))
        pids.append(study.patient_id)
    if not imgs:
        empty = np.zeros((0, 1, *extent), np.float32)
        return SegDataset(empty, empty.astype(np.uint8), [])
    return SegDataset(np.stack(imgs)[:, None], np.stack(masks)[:, None], pids)
