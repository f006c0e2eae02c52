"""Slow, independent reference implementations used as test oracles."""
import math


def bce_scalar(y, t, eps=1e-7):
    y = min(max(float(y), eps), 1 - eps)
    return -(t * math.log(y) + (1 - t) * math.log(1 - y))


def ce_scalar(logits, t):
    m = max(logits)
    return -(logits[t] - m - math.log(sum(math.exp(z - m) for z in logits)))


def soft_dice_scalar(ys, ms):
    num = den = 0.0
    for y, m in zip(ys, ms):
        num += 2 * y * m
        den += y * y + m * m
    return 1.0 if den == 0 else num / den


def combined_scalar(ys, ms):
    mean_bce = sum(bce_scalar(y, m) for y, m in zip(ys, ms)) / len(ys)
    return 1.5 * mean_bce + 1 - soft_dice_scalar(ys, ms)


def dice_counts(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred, gt):
        tp += bool(p) and bool(g)
        fp += bool(p) and not g
        fn += (not p) and bool(g)
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def pair_auc(scores, labels):
    """Wilcoxon statistic: correctly ordered positive/negative pairs, ties worth one half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    twice = 0
    for p in pos:
        for n in neg:
            twice += 2 if p > n else (1 if p == n else 0)
    return twice / (2 * len(pos) * len(neg))


def bbox_scan(mask2d):
    rows = [r for r in range(len(mask2d)) for c in range(len(mask2d[0])) if mask2d[r][c]]
    cols = [c for r in range(len(mask2d)) for c in range(len(mask2d[0])) if mask2d[r][c]]
    if not rows:
        return None
    return min(rows), max(rows), min(cols), max(cols)


def max_area_scan(mask3d):
    """First slice index with the largest bounding-box area."""
    best, best_area = None, 0
    for z, sl in enumerate(mask3d):
        bb = bbox_scan(sl)
        if bb is None:
            continue
        area = (bb[1] - bb[0] + 1) * (bb[3] - bb[2] + 1)
        if area > best_area:
            best, best_area = z, area
    return best, best_area


def fixed_window_scan(center, crop, hw):
    """Per axis, the in-bounds window start whose centre lies nearest the requested centre."""
    out = []
    for c, n in zip(center, hw):
        starts = range(n - crop + 1)
        out.append(min(starts, key=lambda s0: abs(s0 + crop // 2 - c)))
    return tuple(out)
