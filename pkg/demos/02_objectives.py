"""How the losses and metrics behave on small hand-made inputs.

Run:  python demos/02_objectives.py
"""
import numpy as np

from prostate_dl.objectives import (accuracy, aggregate_45, bce, binary_dice, ce, combined_loss,
                                    confusion_ordinal, roc_auc, soft_dice)

# Binary cross-entropy is ln 2 for a coin flip and vanishes for a confident correct answer.
print("bce(0.5, 1)       =", round(float(bce(0.5, 1)), 6))
print("bce(0.999, 1)     =", round(float(bce(0.999, 1)), 6))

# Cross-entropy over five PIRADS classes is ln 5 for uniform logits.
print("ce(zeros, 0)      =", round(float(ce(np.zeros(5), 0)), 6))

# Soft dice rewards overlap; a half-confident prediction of a full mask scores 0.8.
target = np.ones((4, 8, 8))
print("soft_dice(0.5, 1) =", round(float(soft_dice(np.full_like(target, 0.5), target)), 6))
print("combined(0.5, 1)  =", round(float(combined_loss(np.full_like(target, 0.5), target)), 6))

# On binary volumes soft dice and the thresholded dice agree exactly.
rng = np.random.default_rng(0)
p, g = rng.random((3, 6, 6)) < 0.4, rng.random((3, 6, 6)) < 0.4
print("soft vs binary    =", float(soft_dice(p.astype(float), g.astype(float))), binary_dice(p, g))

# AUC is the fraction of (positive, negative) pairs ranked correctly, ties counting half.
curve = roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])
print("auc               =", curve.auc)

# PIRADS: exact accuracy, and accuracy once 4 and 5 are merged into one class.
pred, true = [4, 5, 5, 2], [5, 4, 3, 2]
print("accuracy          =", accuracy(pred, true))
print("accuracy (4/5)    =", accuracy(aggregate_45(pred), aggregate_45(true)))
print(confusion_ordinal(pred, true).matrix)
