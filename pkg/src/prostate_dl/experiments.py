"""Experiment configurations, grid expansion and the resumable cross-validation runner.

Each run owns one directory named after its config code::

    config.json         the full configuration
    folds/fold<k>.json  per-fold metrics (written as each fold finishes)
    folds/fold<k>.npz   per-fold raw predictions and targets
    metrics.csv         config_code, fold, metric_name, value
    predictions.bin     raw arrays, little-endian, concatenated
    predictions.json    index into predictions.bin
    results.json        the ResultsRecord
    history_fold<k>.csv training curves

A ``RUNNING`` marker exists while folds are outstanding; re-running the same
config resumes at the first missing fold.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .augment import Augment2DParams, Augment3DParams, augment2d_params_from_dict, augment3d_params_from_dict
from .data import PatientStudy, load_cohort
from .datasets import build_crop_dataset, build_seg_dataset
from .nets import ModelSpec, build_model
from .training import (TASKS, FoldOutcome, OptimSettings, TrainHistory, cross_validate, fold_seed,
                       mean_metrics, preset, train_classifier, train_segmenter)

log = logging.getLogger(__name__)

CLASSIFICATION_SEQUENCES = ("ADC", "T2W", "ADC_T2W")
SEGMENTATION_SEQUENCES = ("ADC", "T2W")

# (crop_size, input_size, crop_type, augment)
BINARY_LETTERS = {
    "A": (64, 56, "adjusted", False),
    "B": (64, 56, "adjusted", True),
    "C": (64, 56, "fixed", False),
    "D": (64, 56, "fixed", True),
    "E": (32, 28, "adjusted", False),
    "F": (32, 28, "adjusted", True),
    "G": (32, 28, "fixed", False),
    "H": (32, 28, "fixed", True),
}
# (seg_extent, loss)
SEG_LETTERS = {
    "A": ((16, 128, 128), "dice"),
    "B": ((16, 128, 128), "dice_plus_bce"),
    "C": ((16, 224, 224), "dice"),
    "D": ((16, 224, 224), "dice_plus_bce"),
}
SWEEP_INPUT_SIZES = (32, 40, 48)          # 56 is config A itself
PIRADS_LETTERS = ("E", "F")
# Combinations run here but absent from the published result tables.
_UNREPORTED_NR = {"D", "H"}
_REPORTED_SEG_AUG = {("unet3d", "A"), ("unet3d", "B")}

_MODEL_SHORT = {"unet3d": "unet", "resnet18_3d": "resnet"}
_TASK_PREFIX = {"binary": "bin", "pirads": "pirads", "prostate_seg": "seg", "lesion_seg": "lesionseg"}
_PREFIX_TASK = {v: k for k, v in _TASK_PREFIX.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    sequence: str
    model: str
    config_code: str
    optim: OptimSettings
    letter: str | None = None
    crop_size: int | None = None
    input_size: int | None = None
    crop_type: str | None = None
    augment: bool = False
    resample_224: bool | None = None
    seg_extent: tuple[int, int, int] | None = None
    loss: str | None = None
    seed: int = 0
    k_folds: int = 5
    width_divisor: int = 1
    dense_units: tuple[int, int] = (1024, 256)
    square_box: bool = False
    extrapolated: bool = False
    augment2d: Augment2DParams = field(default_factory=Augment2DParams)
    augment3d: Augment3DParams = field(default_factory=Augment3DParams)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        cls_fields = (self.crop_size, self.input_size, self.crop_type, self.resample_224)
        seg_fields = (self.seg_extent, self.loss)
        if self.is_classification:
            if self.sequence not in CLASSIFICATION_SEQUENCES:
                raise ValueError(f"unknown sequence {self.sequence!r}")
            if any(v is None for v in cls_fields) or any(v is not None for v in seg_fields):
                raise ValueError("classification configs need crop fields and no segmentation fields")
            if self.model != "xmasnet":
                raise ValueError("classification uses the xmasnet model")
            if self.crop_type not in ("adjusted", "fixed"):
                raise ValueError(f"unknown crop type {self.crop_type!r}")
            if self.input_size > self.crop_size:
                raise ValueError("input_size cannot exceed crop_size")
        else:
            if self.sequence not in SEGMENTATION_SEQUENCES:
                raise ValueError(f"segmentation sequence must be ADC or T2W, got {self.sequence!r}")
            if any(v is not None for v in cls_fields) or any(v is None for v in seg_fields):
                raise ValueError("segmentation configs need seg fields and no crop fields")
            if self.model not in _MODEL_SHORT:
                raise ValueError(f"unknown segmentation model {self.model!r}")
            if self.loss not in ("dice", "dice_plus_bce"):
                raise ValueError(f"unknown loss {self.loss!r}")
            object.__setattr__(self, "seg_extent", tuple(int(e) for e in self.seg_extent))

    @property
    def is_classification(self) -> bool:
        return self.task in ("binary", "pirads")

    # -- serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["optim"] = OptimSettings(**d["optim"])
        if "augment2d" in d:
            d["augment2d"] = augment2d_params_from_dict(d["augment2d"])
        if "augment3d" in d:
            d["augment3d"] = augment3d_params_from_dict(d["augment3d"])
        for k in ("seg_extent", "dense_units"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Shallow field overrides; ``optim``/``augment2d``/``augment3d`` merge key-wise."""
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = self.to_dict()
        for k, v in overrides.items():
            if k in ("optim", "augment2d", "augment3d"):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return ExperimentConfig.from_dict(d)

    @classmethod
    def from_code(cls, code: str, seed: int = 0) -> "ExperimentConfig":
        parts = code.split(":")
        task = _PREFIX_TASK.get(parts[0])
        try:
            if task == "binary" and len(parts) == 4:
                letter, res, seq = parts[1:]
                if letter.startswith("sweep"):
                    return _sweep_config(int(letter[5:]), res == "WR", seq, seed)
                if res not in ("WR", "NR"):
                    raise ValueError
                return _binary_config(letter, res == "WR", seq, seed)
            if task == "pirads" and len(parts) == 3:
                return _pirads_config(parts[1], parts[2], seed)
            if task in ("prostate_seg", "lesion_seg") and len(parts) == 5:
                letter, short, aug, seq = parts[1:]
                model = {v: k for k, v in _MODEL_SHORT.items()}[short]
                if aug not in ("aug", "noaug"):
                    raise ValueError
                return _seg_config(task, letter, model, aug == "aug", seq, seed)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed config code {code!r}") from exc
        raise ValueError(f"malformed config code {code!r}")

    # -- runtime hooks used by cross_validate -----------------------------

    def model_spec(self, fold: int = 0) -> ModelSpec:
        seed = fold_seed(self.seed + 7919, fold)
        if self.is_classification:
            kind = "xmasnet_binary" if self.task == "binary" else "xmasnet_pirads"
            return ModelSpec(kind, 2 if self.sequence == "ADC_T2W" else 1,
                             (self.input_size, self.input_size), self.width_divisor,
                             self.dense_units, seed=seed)
        return ModelSpec(self.model, 1, self.seg_extent, self.width_divisor, seed=seed)

    def model_for_fold(self, fold: int):
        return build_model(self.model_spec(fold))

    def build_dataset(self, studies):
        if self.is_classification:
            return build_crop_dataset(studies, self.task, self.sequence, self.crop_size,
                                      self.crop_type, self.resample_224, self.square_box)
        target = "prostate" if self.task == "prostate_seg" else "lesion"
        return build_seg_dataset(studies, self.sequence, target, self.seg_extent)

    def train(self, model, data, settings: OptimSettings):
        if self.is_classification:
            return train_classifier(model, data, settings, self.augment2d if self.augment else None)
        return train_segmenter(model, data, settings, self.loss, self.augment3d if self.augment else None)


def _binary_config(letter: str, resample: bool, seq: str, seed: int) -> ExperimentConfig:
    crop, inp, ctype, aug = BINARY_LETTERS[letter]
    code = f"bin:{letter}:{'WR' if resample else 'NR'}:{seq}"
    return ExperimentConfig("binary", seq, "xmasnet", code, preset("binary", "xmasnet", seed=seed),
                            letter=letter, crop_size=crop, input_size=inp, crop_type=ctype,
                            augment=aug, resample_224=resample, seed=seed,
                            extrapolated=(not resample and letter in _UNREPORTED_NR))


def _sweep_config(size: int, resample: bool, seq: str, seed: int) -> ExperimentConfig:
    if size not in SWEEP_INPUT_SIZES:
        raise ValueError(f"sweep input size must be one of {SWEEP_INPUT_SIZES}")
    code = f"bin:sweep{size}:{'WR' if resample else 'NR'}:{seq}"
    return ExperimentConfig("binary", seq, "xmasnet", code, preset("binary", "xmasnet", seed=seed),
                            crop_size=64, input_size=size, crop_type="adjusted", augment=False,
                            resample_224=resample, seed=seed)


def _pirads_config(letter: str, seq: str, seed: int) -> ExperimentConfig:
    if letter not in PIRADS_LETTERS:
        raise ValueError(f"PIRADS configs are {PIRADS_LETTERS}")
    crop, inp, ctype, aug = BINARY_LETTERS[letter]
    return ExperimentConfig("pirads", seq, "xmasnet", f"pirads:{letter}:{seq}",
                            preset("pirads", "xmasnet", seed=seed), letter=letter, crop_size=crop,
                            input_size=inp, crop_type=ctype, augment=aug, resample_224=True, seed=seed)


def _seg_config(task: str, letter: str, model: str, aug: bool, seq: str, seed: int) -> ExperimentConfig:
    extent, loss = SEG_LETTERS[letter]
    code = f"{_TASK_PREFIX[task]}:{letter}:{_MODEL_SHORT[model]}:{'aug' if aug else 'noaug'}:{seq}"
    return ExperimentConfig(task, seq, model, code, preset(task, model, extent, seed=seed),
                            letter=letter, seg_extent=extent, loss=loss, augment=aug, seed=seed,
                            extrapolated=aug and (model, letter) not in _REPORTED_SEG_AUG)


def expand_grid(task: str, seed: int = 0) -> list[ExperimentConfig]:
    if task == "binary":
        out = [_binary_config(l, r, s, seed) for l in BINARY_LETTERS for r in (True, False)
               for s in CLASSIFICATION_SEQUENCES]
        out += [_sweep_config(n, r, s, seed) for n in SWEEP_INPUT_SIZES for r in (True, False)
                for s in CLASSIFICATION_SEQUENCES]
        return out
    if task == "pirads":
        return [_pirads_config(l, s, seed) for l in PIRADS_LETTERS for s in CLASSIFICATION_SEQUENCES]
    if task in ("prostate_seg", "lesion_seg"):
        return [_seg_config(task, l, m, a, s, seed) for l in SEG_LETTERS for m in _MODEL_SHORT
                for a in (False, True) for s in SEGMENTATION_SEQUENCES]
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# persistence

@dataclass
class ResultsRecord:
    config_code: str
    per_fold: dict[int, dict[str, float] | None]
    mean: dict[str, float]
    artifacts: dict[str, str]
    runtime_s: float
    seed: int
    skipped_folds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_fold"] = {str(k): v for k, v in self.per_fold.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResultsRecord":
        d = dict(d)
        d["per_fold"] = {int(k): v for k, v in d["per_fold"].items()}
        return cls(**d)

    @classmethod
    def load(cls, results_dir: str | Path) -> "ResultsRecord":
        return cls.from_dict(json.loads((Path(results_dir) / "results.json").read_text()))


class RunLockedError(RuntimeError):
    """Another process owns the results directory."""


def results_dir_name(code: str) -> str:
    return code.replace(":", "_")


def write_metrics_csv(path: Path, code: str, outcomes: list[FoldOutcome], mean: dict[str, float]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_code", "fold", "metric_name", "value"])
        for o in sorted(outcomes, key=lambda o: o.fold):
            if o.metrics is None:
                continue
            for name in sorted(o.metrics):
                w.writerow([code, o.fold, name, repr(float(o.metrics[name]))])
        for name in sorted(mean):
            w.writerow([code, "mean", name, repr(float(mean[name]))])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_predictions(run_dir: Path, outcomes: list[FoldOutcome], images: dict[int, np.ndarray]):
    entries, offset = [], 0
    with open(run_dir / "predictions.bin", "wb") as fh:
        for o in sorted(outcomes, key=lambda o: o.fold):
            arrays = {"predictions": o.predictions, "targets": o.targets}
            if o.fold in images:
                arrays["images"] = images[o.fold]
            for name, arr in arrays.items():
                a = np.asarray(arr)
                a = a.astype(a.dtype.newbyteorder("<"), copy=False)
                blob = np.ascontiguousarray(a).tobytes()
                fh.write(blob)
                entries.append({"fold": o.fold, "name": name, "dtype": a.dtype.str,
                                "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
                offset += len(blob)
    index = {"arrays": entries,
             "patient_ids": {str(o.fold): o.patient_ids for o in outcomes},
             "metrics": {str(o.fold): o.metrics for o in outcomes}}
    (run_dir / "predictions.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_predictions(results_dir: str | Path) -> dict[int, dict[str, np.ndarray]]:
    """Fold -> {"predictions", "targets"[, "images"]} from predictions.bin."""
    run_dir = Path(results_dir)
    idx_path, bin_path = run_dir / "predictions.json", run_dir / "predictions.bin"
    if not idx_path.exists() or not bin_path.exists():
        raise FileNotFoundError(f"raw predictions missing in {run_dir}")
    index = json.loads(idx_path.read_text())
    raw = bin_path.read_bytes()
    out: dict[int, dict[str, np.ndarray]] = {}
    for e in index["arrays"]:
        blob = raw[e["offset"]:e["offset"] + e["nbytes"]]
        if len(blob) != e["nbytes"]:
            raise ValueError(f"predictions.bin truncated at {e['name']} of fold {e['fold']}")
        out.setdefault(e["fold"], {})[e["name"]] = np.frombuffer(blob, dtype=e["dtype"]).reshape(e["shape"])
    return out


def _save_fold(run_dir: Path, o: FoldOutcome, images: np.ndarray | None):
    fold_dir = run_dir / "folds"
    fold_dir.mkdir(exist_ok=True)
    arrays = {"predictions": o.predictions, "targets": o.targets}
    if images is not None:
        arrays["images"] = images
    np.savez(fold_dir / f"fold{o.fold}.npz", **arrays)
    if o.history is not None:
        o.history.to_csv(run_dir / f"history_fold{o.fold}.csv")
    meta = {"fold": o.fold, "metrics": o.metrics, "patient_ids": o.patient_ids,
            "skipped_reason": o.skipped_reason}
    # json last: its presence marks the fold complete
    (fold_dir / f"fold{o.fold}.json").write_text(json.dumps(meta, sort_keys=True))


def _load_folds(run_dir: Path) -> tuple[dict[int, FoldOutcome], dict[int, np.ndarray]]:
    done, images = {}, {}
    fold_dir = run_dir / "folds"
    if not fold_dir.exists():
        return done, images
    for meta_path in sorted(fold_dir.glob("fold*.json")):
        meta = json.loads(meta_path.read_text())
        npz_path = meta_path.with_suffix(".npz")
        if not npz_path.exists():
            continue
        with np.load(npz_path) as z:
            if "images" in z:
                images[meta["fold"]] = z["images"]
            done[meta["fold"]] = FoldOutcome(meta["fold"], meta["metrics"], z["predictions"], z["targets"],
                                             meta["patient_ids"], None, meta["skipped_reason"])
    return done, images


def run_experiment(config: ExperimentConfig, cohort, out_dir: str | Path, report: bool = True,
                   stop_after: int | None = None) -> ResultsRecord | None:
    """Cross-validate ``config`` on ``cohort`` (a directory or list of studies).

    Results land in ``out_dir/<config code>``. ``stop_after`` ends the run
    early after that many newly trained folds, leaving it resumable; the
    return value is then ``None``.
    """
    studies: list[PatientStudy] = load_cohort(cohort) if isinstance(cohort, (str, Path)) else list(cohort)
    if not studies:
        raise ValueError("empty cohort")
    studies.sort(key=lambda s: s.patient_id)
    run_dir = Path(out_dir) / results_dir_name(config.config_code)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise RunLockedError(f"{run_dir} is in use by another run") from exc
    try:
        cfg_path = run_dir / "config.json"
        cfg_json = json.dumps(config.to_dict(), indent=1, sort_keys=True)
        if cfg_path.exists() and cfg_path.read_text() != cfg_json:
            raise ValueError(f"{run_dir} holds results of a different configuration")
        cfg_path.write_text(cfg_json)
        marker = run_dir / "RUNNING"
        marker.write_text("incomplete run; re-run the same config to resume\n")
        t0 = time.perf_counter()
        completed, images = _load_folds(run_dir)
        if completed:
            log.info("resuming %s with folds %s done", config.config_code, sorted(completed))
        trained = 0
        test_data = {}

        def on_fold(o: FoldOutcome):
            nonlocal trained
            imgs = None
            if not config.is_classification:
                imgs = test_data["data"].subset(o.patient_ids).images[:, 0]
                images[o.fold] = imgs
            _save_fold(run_dir, o, imgs)
            trained += 1

        pending = [f for f in range(config.k_folds) if f not in completed]
        if stop_after is not None:
            pending = pending[:stop_after]
        outcomes = []
        if pending:
            test_data["data"] = config.build_dataset(studies)
            _, outcomes = cross_validate(config, studies, on_fold=on_fold, folds=pending,
                                         data=test_data["data"])
        all_done = {**completed, **{o.fold: o for o in outcomes}}
        if len(all_done) < config.k_folds:
            return None
        outcomes = [all_done[f] for f in range(config.k_folds)]
        mean = mean_metrics(outcomes)
        write_metrics_csv(run_dir / "metrics.csv", config.config_code, outcomes, mean)
        _write_predictions(run_dir, outcomes, images)
        artifacts = {"metrics": "metrics.csv", "predictions": "predictions.bin",
                     "predictions_index": "predictions.json", "config": "config.json"}
        prev_runtime = 0.0
        if (run_dir / "results.json").exists():
            prev_runtime = json.loads((run_dir / "results.json").read_text()).get("runtime_s", 0.0)
        record = ResultsRecord(config.config_code, {o.fold: o.metrics for o in outcomes}, mean, artifacts,
                               prev_runtime + time.perf_counter() - t0, config.seed,
                               [o.fold for o in outcomes if o.metrics is None])
        (run_dir / "results.json").write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True))
        marker.unlink()
        if report:
            from .report import emit_report
            bundle = emit_report(run_dir)
            record.artifacts.update(bundle.artifacts)
            (run_dir / "results.json").write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True))
        return record
    finally:
        lock.release()
