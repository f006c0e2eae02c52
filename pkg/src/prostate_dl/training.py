"""Optimisation loops, hyperparameter presets, fold evaluation and gradient checking."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .augment import Augment2DParams, Augment3DParams, augment2d, augment3d, center_crop
from .data import make_folds
from .datasets import CropDataset, SegDataset
from .objectives import (SEG_LOSSES, SingleClassError, accuracy, aggregate_45, bce, binary_dice, ce,
                         confusion_ordinal, roc_auc)

log = logging.getLogger(__name__)

TASKS = ("binary", "pirads", "prostate_seg", "lesion_seg")
SEG_THRESHOLD = 0.5


@dataclass(frozen=True)
class OptimSettings:
    learning_rate: float
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    algorithm: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and weight_decay >= 0 required")
        if self.algorithm != "adam":
            raise ValueError(f"only adam is supported, got {self.algorithm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# Epoch counts for classification are not stated in the source tables; 30/50
# are this package's defaults and can be overridden per run.
_LR = {
    ("binary", "xmasnet"): (7e-4, 30),
    ("pirads", "xmasnet"): (5e-5, 50),
    ("prostate_seg", "unet3d"): (5e-4, 200),
    ("prostate_seg", "resnet18_3d"): (2e-4, 200),
    ("lesion_seg", "unet3d"): (2e-4, 250),
    ("lesion_seg", "resnet18_3d"): (7e-5, 250),
}


def preset(task: str, model: str, seg_extent: tuple[int, int, int] | None = None,
           seed: int = 0) -> OptimSettings:
    """Default optimiser settings for a (task, model) pair.

    Segmentation batches are 4 volumes up to 128 in-plane and 2 above.
    """
    if (task, model) not in _LR:
        raise ValueError(f"no preset for task={task!r} model={model!r}")
    lr, epochs = _LR[(task, model)]
    if task.endswith("_seg"):
        if seg_extent is None:
            raise ValueError("segmentation presets need seg_extent")
        batch = 4 if max(seg_extent[1:]) <= 128 else 2
    else:
        batch = 8
    return OptimSettings(lr, 1e-4, batch, epochs, seed)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float | None] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def append(self, loss: float, seconds: float, val: float | None = None):
        self.train_loss.append(loss)
        self.val_metric.append(val)
        self.seconds.append(seconds)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_metric", "seconds"])
            for i, (l, v, s) in enumerate(zip(self.train_loss, self.val_metric, self.seconds)):
                w.writerow([i + 1, repr(l), "" if v is None else repr(v), f"{s:.3f}"])


def make_optimizer(model: nn.Module, settings: OptimSettings) -> torch.optim.Optimizer:
    # Adam's weight_decay adds wd * p to the gradient, i.e. a (wd/2)*|p|^2 loss penalty.
    return torch.optim.Adam(model.parameters(), lr=settings.learning_rate, betas=(0.9, 0.999),
                            eps=1e-8, weight_decay=settings.weight_decay)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def classification_loss(model: nn.Module, logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if model.spec.n_outputs == 1:
        return bce(torch.sigmoid(logits[:, 0]), y.to(logits.dtype))
    return ce(logits, y)


def train_classifier(model: nn.Module, dataset: CropDataset, settings: OptimSettings,
                     augment: Augment2DParams | None = None,
                     max_steps: int | None = None) -> tuple[nn.Module, TrainHistory]:
    """Mini-batch Adam on lesion crops.

    With ``augment`` each sample is randomly cropped/flipped/warped every time
    it is drawn; otherwise every crop is centre-cropped to the model input once.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    size = model.spec.input_extent[0]
    if dataset.crops.shape[1] != model.spec.in_channels:
        raise ValueError(f"dataset has {dataset.crops.shape[1]} channels, model expects "
                         f"{model.spec.in_channels}")
    if dataset.crops.shape[-1] < size:
        raise ValueError(f"crops of side {dataset.crops.shape[-1]} smaller than input {size}")
    rng = np.random.default_rng(settings.seed)
    torch.manual_seed(settings.seed)
    fixed = None if augment is not None else center_crop(dataset.crops, size)
    if augment is not None:
        augment = replace(augment, crop_to=size)
    labels = torch.as_tensor(dataset.labels)
    opt = make_optimizer(model, settings)
    hist = TrainHistory()
    steps = 0
    model.train()
    for _ in range(settings.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for idx in _batches(len(dataset), settings.batch_size, rng):
            if fixed is not None:
                x = fixed[idx]
            else:
                x = np.stack([augment2d(dataset.crops[i], augment, rng) for i in idx])
            logits = model(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)))
            loss = classification_loss(model, logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
            hist.step_loss.append(loss.item())
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        hist.append(total / count, time.perf_counter() - t0)
        if max_steps is not None and steps >= max_steps:
            break
    model.eval()
    return model, hist


def train_segmenter(model: nn.Module, dataset: SegDataset, settings: OptimSettings,
                    loss: str = "dice_plus_bce", augment: Augment3DParams | None = None,
                    max_steps: int | None = None) -> tuple[nn.Module, TrainHistory]:
    """Mini-batch Adam on (volume, mask) pairs; the loss is averaged per volume."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if loss not in SEG_LOSSES:
        raise ValueError(f"unknown segmentation loss {loss!r}")
    expected = (model.spec.in_channels, *model.spec.input_extent)
    if tuple(dataset.images.shape[1:]) != expected:
        raise ValueError(f"volumes {dataset.images.shape[1:]} do not match model input {expected}")
    loss_fn = SEG_LOSSES[loss]
    rng = np.random.default_rng(settings.seed)
    torch.manual_seed(settings.seed)
    opt = make_optimizer(model, settings)
    hist = TrainHistory()
    steps = 0
    model.train()
    for _ in range(settings.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for idx in _batches(len(dataset), settings.batch_size, rng):
            if augment is None:
                x, m = dataset.images[idx], dataset.masks[idx]
            else:
                pairs = [augment3d(dataset.images[i, 0], [dataset.masks[i, 0]], augment, rng) for i in idx]
                x = np.stack([v for v, _ in pairs])[:, None]
                m = np.stack([ms[0] for _, ms in pairs])[:, None]
            y = model(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)))
            l = loss_fn(y, torch.from_numpy(np.ascontiguousarray(m, dtype=np.float32)), batched=True)
            opt.zero_grad()
            l.backward()
            opt.step()
            total += l.item() * len(idx)
            count += len(idx)
            hist.step_loss.append(l.item())
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        hist.append(total / count, time.perf_counter() - t0)
        if max_steps is not None and steps >= max_steps:
            break
    model.eval()
    return model, hist


# ---------------------------------------------------------------------------
# evaluation

@torch.no_grad()
def predict(model: nn.Module, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Probabilities in eval mode: (N,) binary scores, (N, 5) softmax rows or (N, S, H, W) voxels."""
    model.eval()
    out = []
    for i in range(0, len(inputs), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(inputs[i:i + batch_size], dtype=np.float32))
        y = model(x)
        if model.spec.is_classifier:
            y = torch.sigmoid(y[:, 0]) if model.spec.n_outputs == 1 else torch.softmax(y, dim=1)
        else:
            y = y[:, 0]
        out.append(y.double().numpy() if model.spec.is_classifier else y.numpy())
    if out:
        return np.concatenate(out)
    if model.spec.is_classifier and model.spec.n_outputs > 1:
        return np.zeros((0, model.spec.n_outputs))
    return np.zeros((0,))


class EmptyFoldError(ValueError):
    """A held-out fold contains no samples (e.g. no lesions among its patients)."""


def metrics_from_predictions(task: str, predictions: np.ndarray, targets: np.ndarray) -> dict[str, float]:
    """Task metrics from raw probabilities; also used to replay persisted predictions."""
    if len(predictions) == 0:
        raise EmptyFoldError("empty test set")
    if task == "binary":
        return {"auc": roc_auc(predictions, targets).auc}
    if task == "pirads":
        pred = np.argmax(predictions, axis=1) + 1
        tgt = np.asarray(targets) + 1
        conf = confusion_ordinal(pred, tgt)
        return {"accuracy": accuracy(pred, tgt),
                "accuracy_45": accuracy(aggregate_45(pred), aggregate_45(tgt)),
                "correct": float(conf.correct),
                "missed_by_1": float(conf.missed_by_1),
                "missed_by_more": float(conf.missed_by_more)}
    if task in ("prostate_seg", "lesion_seg"):
        dice = [binary_dice(p >= SEG_THRESHOLD, t) for p, t in zip(predictions, targets)]
        return {"dice": float(np.mean(dice))}
    raise ValueError(f"unknown task {task!r}")


@dataclass
class FoldOutcome:
    fold: int
    metrics: dict[str, float] | None
    predictions: np.ndarray
    targets: np.ndarray
    patient_ids: list[str]
    history: TrainHistory | None = None
    skipped_reason: str | None = None


def evaluate_fold(model: nn.Module, test_set, task: str) -> tuple[dict[str, float], np.ndarray, np.ndarray]:
    """Metrics, raw predictions and targets for one held-out fold."""
    if len(test_set) == 0:
        raise EmptyFoldError("empty test set")
    if isinstance(test_set, CropDataset):
        size = model.spec.input_extent[0]
        preds = predict(model, center_crop(test_set.crops, size))
        targets = test_set.labels
    else:
        preds = predict(model, test_set.images, batch_size=1)
        targets = test_set.masks[:, 0]
    return metrics_from_predictions(task, preds, targets), preds, targets


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def mean_metrics(outcomes: list[FoldOutcome]) -> dict[str, float]:
    done = [o.metrics for o in outcomes if o.metrics is not None]
    if not done:
        return {}
    return {k: float(np.mean([m[k] for m in done])) for k in done[0]}


def cross_validate(config, studies, completed: dict[int, FoldOutcome] | None = None,
                   on_fold: Callable[[FoldOutcome], None] | None = None,
                   folds: list[int] | None = None, data=None) -> tuple[dict[str, float], list[FoldOutcome]]:
    """Train one model per fold on the remaining folds and evaluate it on the held-out one.

    ``config`` supplies ``task``, ``k_folds``, ``seed``, ``build_dataset(studies)``,
    ``model_for_fold(fold)``, ``optim`` and ``train(model, data, settings)``.
    Folds already in ``completed`` are reused as-is; a fold whose test set has
    a single class is skipped with a warning and excluded from the mean.
    A prebuilt ``data`` set (from ``config.build_dataset``) may be passed in.
    """
    completed = dict(completed or {})
    # a fixed patient order makes results independent of how the cohort was listed
    studies = sorted(studies, key=lambda s: s.patient_id)
    ids = [s.patient_id for s in studies]
    split = make_folds(ids, config.k_folds, config.seed)
    if data is None:
        data = config.build_dataset(studies)
    outcomes = []
    for fold in (range(split.k) if folds is None else folds):
        if fold in completed:
            outcomes.append(completed[fold])
            continue
        train, test = data.split(split.train_ids(fold), split.test_ids(fold))
        settings = replace(config.optim, seed=fold_seed(config.seed, fold))
        model = config.model_for_fold(fold)
        model, hist = config.train(model, train, settings)
        try:
            metrics, preds, targets = evaluate_fold(model, test, config.task)
            reason = None
        except (SingleClassError, EmptyFoldError) as exc:
            log.warning("fold %d skipped: %s", fold, exc)
            metrics, reason = None, str(exc)
            if isinstance(test, CropDataset):
                preds = predict(model, center_crop(test.crops, model.spec.input_extent[0]))
                targets = test.labels
            else:
                preds, targets = predict(model, test.images, batch_size=1), test.masks[:, 0]
        out = FoldOutcome(fold, metrics, preds, targets, list(test.patient_ids), hist, reason)
        if on_fold is not None:
            on_fold(out)
        outcomes.append(out)
    return mean_metrics(outcomes), outcomes


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(model_factory: Callable[[], tuple[nn.Module, torch.Tensor, torch.Tensor]],
               loss: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
               eps: float = 1e-6, floor: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences over every parameter.

    ``model_factory`` returns ``(model, inputs, targets)``; everything is cast
    to float64. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    model, x, t = model_factory()
    model = model.double()
    x = x.double()
    t = t.double() if torch.is_floating_point(t) else t

    def f() -> torch.Tensor:
        return loss(model(x), t)

    model.zero_grad()
    f().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            if not p.requires_grad:
                continue
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.data.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = f().item()
                flat[i] = orig - eps
                lm = f().item()
                flat[i] = orig
                num = (lp - lm) / (2 * eps)
                a = analytic[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                if math.isfinite(err):
                    worst = max(worst, err)
                else:
                    return math.inf
    return worst


def _mini(kind: str, extent, width_divisor: int, seed: int):
    from .nets import ModelSpec, build_model
    return build_model(ModelSpec(kind, 1, extent, width_divisor, dense_units=(64, 32), seed=seed))


def miniature_cases(seed: int = 0) -> dict[str, tuple[Callable, Callable]]:
    """Name -> (model_factory, loss) pairs for :func:`grad_check` on tiny models."""
    from .nets import BasicBlock3D

    def data(shape, binary_target_shape=None, classes=None):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(*shape, generator=g, dtype=torch.float64)
        if classes is not None:
            t = torch.arange(shape[0]) % classes
        else:
            t = (torch.rand(*binary_target_shape, generator=g, dtype=torch.float64) > 0.5).double()
        return x, t

    def xmas_bce():
        x, t = data((3, 1, 8, 8), (3,))
        return _mini("xmasnet_binary", (8, 8), 16, seed), x, t

    def xmas_ce():
        x, t = data((5, 1, 8, 8), classes=5)
        return _mini("xmasnet_pirads", (8, 8), 16, seed), x, t

    def unet():
        x, t = data((2, 1, 8, 8, 8), (2, 1, 8, 8, 8))
        return _mini("unet3d", (8, 8, 8), 64, seed), x, t

    def resblock():
        torch.manual_seed(seed)
        model = nn.Sequential(BasicBlock3D(1, 2), nn.Conv3d(2, 1, 1), nn.Sigmoid())
        x, t = data((2, 1, 4, 4, 4), (2, 1, 4, 4, 4))
        return model, x, t

    return {
        "xmasnet+bce": (xmas_bce, lambda out, t: bce(torch.sigmoid(out[:, 0]), t)),
        "xmasnet+ce": (xmas_ce, lambda out, t: ce(out, t)),
        "unet+dice": (unet, lambda out, t: SEG_LOSSES["dice"](out, t)),
        "unet+combined": (unet, lambda out, t: SEG_LOSSES["dice_plus_bce"](out, t)),
        "resblock+dice": (resblock, lambda out, t: SEG_LOSSES["dice"](out, t)),
    }
