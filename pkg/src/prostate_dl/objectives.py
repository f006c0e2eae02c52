"""Training losses (torch, differentiable) and evaluation metrics (numpy)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

EPS = 1e-7


def _t(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_same(y, m):
    if tuple(y.shape) != tuple(m.shape):
        raise ValueError(f"extent mismatch: {tuple(y.shape)} vs {tuple(m.shape)}")


# ---------------------------------------------------------------------------
# losses

def bce(y, t, reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy of probabilities ``y`` against targets ``t``, with y clamped to [eps, 1-eps]."""
    y, t = _t(y), _t(t).to(_t(y).dtype)
    _check_same(y, t)
    y = y.clamp(EPS, 1.0 - EPS)
    loss = -t * torch.log(y) - (1.0 - t) * torch.log(1.0 - y)
    if reduction == "none":
        return loss
    return loss.mean() if reduction == "mean" else loss.sum()


def ce(logits, t, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy from raw logits: -z[t] + logsumexp(z), max-shifted for stability.

    ``logits`` is (C,) or (N, C); ``t`` holds class indices.
    """
    z = _t(logits)
    t = torch.as_tensor(t, dtype=torch.long)
    single = z.ndim == 1
    if single:
        z, t = z[None], t.reshape(1)
    zmax = z.max(dim=1, keepdim=True).values.detach()
    lse = torch.log(torch.exp(z - zmax).sum(dim=1)) + zmax[:, 0]
    loss = lse - z.gather(1, t[:, None])[:, 0]
    if single:
        return loss[0]
    if reduction == "none":
        return loss
    return loss.mean() if reduction == "mean" else loss.sum()


def soft_dice(y, m) -> torch.Tensor:
    """2*sum(Y*M) / (sum(Y^2) + sum(M^2)) over the whole array; defined as 1 when both are empty."""
    y, m = _t(y), _t(m)
    m = m.to(y.dtype)
    _check_same(y, m)
    num = 2.0 * (y * m).sum()
    den = (y * y).sum() + (m * m).sum()
    safe = torch.where(den > 0, den, torch.ones_like(den))
    return torch.where(den > 0, num / safe, torch.ones_like(den))


def soft_dice_per_sample(y, m) -> torch.Tensor:
    """Soft dice of each item along the leading (batch) axis."""
    y, m = _t(y), _t(m)
    m = m.to(y.dtype)
    _check_same(y, m)
    dims = tuple(range(1, y.ndim))
    num = 2.0 * (y * m).sum(dim=dims)
    den = (y * y).sum(dim=dims) + (m * m).sum(dim=dims)
    safe = torch.where(den > 0, den, torch.ones_like(den))
    return torch.where(den > 0, num / safe, torch.ones_like(den))


def dice_loss(y, m, batched: bool = False) -> torch.Tensor:
    """1 - soft dice; with ``batched`` the per-sample losses are averaged."""
    if batched:
        return (1.0 - soft_dice_per_sample(y, m)).mean()
    return 1.0 - soft_dice(y, m)


def combined_loss(y, m, batched: bool = False) -> torch.Tensor:
    """1.5 * voxelwise mean BCE + dice loss."""
    y, m = _t(y), _t(m)
    _check_same(y, m)
    return 1.5 * bce(y, m) + dice_loss(y, m, batched=batched)


SEG_LOSSES = {"dice": dice_loss, "dice_plus_bce": combined_loss}


# ---------------------------------------------------------------------------
# metrics

def binary_dice(pred_mask, gt_mask) -> float:
    """2TP / (2TP + FN + FP) on binary arrays; 1.0 when both are empty."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"extent mismatch: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for th, f, t in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(th)), repr(float(f)), repr(float(t))])


class SingleClassError(ValueError):
    """ROC analysis needs both positive and negative labels."""


def roc_auc(scores, labels) -> RocCurve:
    """ROC over descending unique thresholds; AUC by the trapezoid rule.

    Tied scores form one step, so the area equals the pair-counting statistic
    with ties worth one half. The area is accumulated in integers and divided
    once.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("roc_auc needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(1 - y)[last]]
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    thresholds = np.r_[np.inf, s[last]]
    return RocCurve(thresholds, fp / n_neg, tp / n_pos, auc)


def accuracy(preds, targets) -> float:
    p, t = np.asarray(preds), np.asarray(targets)
    if p.shape != t.shape:
        raise ValueError("preds and targets differ in length")
    if p.size == 0:
        raise ValueError("accuracy of an empty list")
    return float(np.mean(p == t))


@dataclass(frozen=True)
class OrdinalConfusion:
    """5x5 counts, rows = target PIRADS, columns = predicted PIRADS (scores 1..5)."""
    matrix: np.ndarray

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def _band(self, lo: int, hi: int | None) -> int:
        i, j = np.indices(self.matrix.shape)
        d = np.abs(i - j)
        sel = (d >= lo) if hi is None else (d >= lo) & (d <= hi)
        return int(self.matrix[sel].sum())

    @property
    def correct(self) -> int:
        return self._band(0, 0)

    @property
    def missed_by_1(self) -> int:
        return self._band(1, 1)

    @property
    def missed_by_more(self) -> int:
        return self._band(2, None)


def confusion_ordinal(preds, targets, n_classes: int = 5) -> OrdinalConfusion:
    p, t = np.asarray(preds, dtype=int), np.asarray(targets, dtype=int)
    if p.shape != t.shape:
        raise ValueError("preds and targets differ in length")
    if p.size and (min(p.min(), t.min()) < 1 or max(p.max(), t.max()) > n_classes):
        raise ValueError(f"classes must lie in 1..{n_classes}")
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(mat, (t - 1, p - 1), 1)
    return OrdinalConfusion(mat)


def aggregate_45(classes) -> list[int]:
    """Merge PIRADS 4 and 5 into a single class (labelled 4)."""
    return [4 if int(c) >= 4 else int(c) for c in classes]
