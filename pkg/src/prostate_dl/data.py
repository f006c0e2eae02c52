"""Study containers, on-disk bundles, label derivation and patient-wise folds.

A study bundle is a directory holding ``meta.json`` next to raw voxel files::

    adc.f32, t2w.f32                 little-endian float32, C order (S, H, W)
    prostate_adc.u8, prostate_t2w.u8 uint8 masks
    lesion<id>_adc.u8, ...           one file per lesion and sequence

``meta.json`` records the patient id, per-sequence extents and spacing, the
lesion records and a sha256 checksum for every voxel file.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as Seq

import numpy as np


class Sequence(str, enum.Enum):
    ADC = "ADC"
    T2W = "T2W"

    @property
    def stem(self) -> str:
        return self.value.lower()


class MaskKind(str, enum.Enum):
    PROSTATE = "prostate"
    LESION = "lesion"


class BundleError(ValueError):
    """Raised when a study bundle is malformed or inconsistent."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    voxels: np.ndarray
    sequence: Sequence
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"volume must be 3-D with non-empty extents, got {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ValueError("volume intensities must be finite")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "voxels", _frozen(vox))
        object.__setattr__(self, "sequence", Sequence(self.sequence))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray) -> "Volume3D":
        return Volume3D(voxels, self.sequence, self.spacing)


@dataclass(frozen=True, eq=False)
class MaskVolume:
    voxels: np.ndarray
    kind: MaskKind = MaskKind.LESION

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValueError(f"mask must be 3-D, got {vox.shape}")
        if vox.size and not np.isin(vox, (0, 1)).all():
            raise BundleError("non-binary mask")
        object.__setattr__(self, "voxels", _frozen(vox.astype(np.uint8)))
        object.__setattr__(self, "kind", MaskKind(self.kind))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def count(self) -> int:
        return int(self.voxels.sum())


@dataclass(frozen=True, eq=False)
class LesionRecord:
    lesion_id: int
    pirads: int
    ggg: int
    mask_adc: MaskVolume | None = None
    mask_t2w: MaskVolume | None = None

    def __post_init__(self):
        if not 1 <= self.pirads <= 5:
            raise ValueError(f"pirads must be in 1..5, got {self.pirads}")
        if self.ggg < 0:
            raise ValueError(f"ggg must be >= 0, got {self.ggg}")

    def mask(self, seq: Sequence | str) -> MaskVolume | None:
        return self.mask_adc if Sequence(seq) is Sequence.ADC else self.mask_t2w

    @property
    def usable(self) -> bool:
        return self.mask_adc is not None or self.mask_t2w is not None


@dataclass(frozen=True, eq=False)
class PatientStudy:
    patient_id: str
    adc: Volume3D
    t2w: Volume3D
    prostate_mask_adc: MaskVolume
    prostate_mask_t2w: MaskVolume
    lesions: tuple[LesionRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "lesions", tuple(self.lesions))
        for seq in Sequence:
            vol, prostate = self.volume(seq), self.prostate_mask(seq)
            if prostate.shape != vol.shape:
                raise BundleError(f"{seq.value} prostate mask extents {prostate.shape} != volume {vol.shape}")
            for les in self.lesions:
                m = les.mask(seq)
                if m is not None and m.shape != vol.shape:
                    raise BundleError(
                        f"lesion {les.lesion_id} {seq.value} mask extents {m.shape} != volume {vol.shape}")
        ids = [les.lesion_id for les in self.lesions]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate lesion ids in {self.patient_id}")

    def volume(self, seq: Sequence | str) -> Volume3D:
        return self.adc if Sequence(seq) is Sequence.ADC else self.t2w

    def prostate_mask(self, seq: Sequence | str) -> MaskVolume:
        return self.prostate_mask_adc if Sequence(seq) is Sequence.ADC else self.prostate_mask_t2w


def derive_significance(record: LesionRecord) -> int:
    """Clinical significance label: 1 for Gleason grade group >= 2, else 0."""
    return int(record.ggg >= 2)


def union_masks(masks: Seq[MaskVolume], shape: tuple[int, int, int] | None = None,
                kind: MaskKind = MaskKind.LESION) -> MaskVolume:
    """Voxelwise sum of ``masks`` clamped to {0, 1}.

    An empty list needs ``shape`` and yields an all-zero mask.
    """
    if not masks:
        if shape is None:
            raise ValueError("shape is required to union an empty mask list")
        return MaskVolume(np.zeros(shape, np.uint8), kind)
    ref = masks[0].shape
    if shape is not None and tuple(shape) != ref:
        raise ValueError(f"extent mismatch: {ref} vs requested {tuple(shape)}")
    total = np.zeros(ref, np.int32)
    for m in masks:
        if m.shape != ref:
            raise ValueError(f"extent mismatch: {m.shape} vs {ref}")
        total += m.voxels
    return MaskVolume(np.minimum(total, 1).astype(np.uint8), kind)


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignment: dict[str, int]
    seed: int

    def test_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignment.items() if f != fold)

    def sizes(self) -> list[int]:
        return [sum(1 for f in self.assignment.values() if f == i) for i in range(self.k)]


def make_folds(patient_ids: Iterable[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded patient-wise k-fold assignment.

    Ids are sorted before shuffling, so the split depends only on the id set
    and the seed. Shuffled ids are dealt round-robin, which keeps fold sizes
    within one of each other.
    """
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ValueError(f"k={k} exceeds patient count {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    ordered = sorted(ids)
    assignment = {ordered[j]: i % k for i, j in enumerate(order)}
    return FoldSplit(k=k, assignment=assignment, seed=seed)


# ---------------------------------------------------------------------------
# bundle persistence

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: Path, arr: np.ndarray, dtype: str) -> str:
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes(order="C")
    path.write_bytes(data)
    return _sha256(data)


def save_study(study: PatientStudy, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    checksums: dict[str, str] = {}
    meta = {
        "patient_id": study.patient_id,
        "extents": {},
        "spacing": {},
        "lesions": [],
        "checksums": checksums,
    }
    for seq in Sequence:
        vol = study.volume(seq)
        meta["extents"][seq.value] = list(vol.shape)
        meta["spacing"][seq.value] = list(vol.spacing)
        name = f"{seq.stem}.f32"
        checksums[name] = _write(path / name, vol.voxels, "<f4")
        name = f"prostate_{seq.stem}.u8"
        checksums[name] = _write(path / name, study.prostate_mask(seq).voxels, "u1")
    for les in study.lesions:
        masks = {}
        for seq in Sequence:
            m = les.mask(seq)
            if m is None:
                masks[seq.value] = None
                continue
            name = f"lesion{les.lesion_id}_{seq.stem}.u8"
            checksums[name] = _write(path / name, m.voxels, "u1")
            masks[seq.value] = name
        meta["lesions"].append(
            {"lesion_id": les.lesion_id, "pirads": les.pirads, "ggg": les.ggg, "masks": masks})
    (path / "meta.json").write_text(json.dumps(meta, indent=1))


def _read(path: Path, name: str, dtype: str, shape, checksums: dict) -> np.ndarray:
    f = path / name
    if not f.is_file():
        raise FileNotFoundError(f"missing voxel file {f}")
    data = f.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(data) != expected:
        raise BundleError(f"{name}: {len(data)} bytes, extents {tuple(shape)} need {expected}")
    if name in checksums and checksums[name] != _sha256(data):
        raise BundleError(f"{name}: checksum mismatch")
    return np.frombuffer(data, dtype=np.dtype(dtype)).reshape(shape)


def load_study(path: str | Path) -> PatientStudy:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.is_file():
        raise FileNotFoundError(f"missing {meta_file}")
    meta = json.loads(meta_file.read_text())
    sums = meta.get("checksums", {})
    vols, prostates = {}, {}
    for seq in Sequence:
        shape = tuple(meta["extents"][seq.value])
        if len(shape) != 3:
            raise BundleError(f"{seq.value} extents must have 3 entries, got {shape}")
        spacing = tuple(meta.get("spacing", {}).get(seq.value, (1.0, 1.0, 1.0)))
        vols[seq] = Volume3D(_read(path, f"{seq.stem}.f32", "<f4", shape, sums), seq, spacing)
        prostates[seq] = MaskVolume(
            _read(path, f"prostate_{seq.stem}.u8", "u1", shape, sums), MaskKind.PROSTATE)
    lesions = []
    for rec in meta.get("lesions", []):
        masks = {}
        for seq in Sequence:
            name = rec.get("masks", {}).get(seq.value)
            masks[seq] = None if name is None else MaskVolume(
                _read(path, name, "u1", vols[seq].shape, sums), MaskKind.LESION)
        lesions.append(LesionRecord(int(rec["lesion_id"]), int(rec["pirads"]), int(rec["ggg"]),
                                    masks[Sequence.ADC], masks[Sequence.T2W]))
    return PatientStudy(meta["patient_id"], vols[Sequence.ADC], vols[Sequence.T2W],
                        prostates[Sequence.ADC], prostates[Sequence.T2W], tuple(lesions))


def load_cohort(cohort_dir: str | Path) -> list[PatientStudy]:
    """Load every bundle listed in ``manifest.json`` (or every subdirectory)."""
    cohort_dir = Path(cohort_dir)
    manifest = cohort_dir / "manifest.json"
    if manifest.is_file():
        ids = [entry["patient_id"] for entry in json.loads(manifest.read_text())]
    else:
        ids = sorted(p.name for p in cohort_dir.iterdir() if (p / "meta.json").is_file())
    return [load_study(cohort_dir / pid) for pid in ids]
