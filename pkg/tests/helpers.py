"""Small training scenarios shared by the unit and acceptance suites."""
import numpy as np

from prostate_dl.datasets import CropDataset, build_seg_dataset
from prostate_dl.nets import ModelSpec, build_model
from prostate_dl.objectives import binary_dice
from prostate_dl.phantom import PhantomParams, generate_study
from prostate_dl.training import OptimSettings, predict, train_classifier, train_segmenter


def separable_crops(n=8, size=32, seed=0):
    """Bright centre disc for positives, dark one for negatives, plus noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    disc = (yy ** 2 + xx ** 2 < (size / 5) ** 2).astype(np.float32)
    labels = np.arange(n) % 2
    crops = np.stack([(2 * l - 1) * disc + 0.3 * rng.normal(size=(size, size)) for l in labels])
    return CropDataset(crops[:, None].astype(np.float32), labels.astype(np.int64),
                       [f"P{i:04d}" for i in range(n)], [0] * n)


def overfit_classifier(steps=500, seed=0):
    ds = separable_crops(seed=seed)
    model = build_model(ModelSpec("xmasnet_binary", input_extent=(28, 28), seed=seed))
    settings = OptimSettings(7e-4, batch_size=8, epochs=steps, seed=seed)
    model, hist = train_classifier(model, ds, settings, max_steps=steps)
    return model, hist


def overfit_segmenter(steps=200, seed=0):
    params = PhantomParams(adc_extent=(16, 32, 32), t2w_extent=(16, 48, 48))
    study = generate_study(seed, params)
    ds = build_seg_dataset([study], "ADC", "prostate", (16, 32, 32))
    model = build_model(ModelSpec("unet3d", input_extent=(16, 32, 32), width_divisor=8, seed=seed))
    settings = OptimSettings(5e-4, batch_size=1, epochs=steps, seed=seed)
    model, hist = train_segmenter(model, ds, settings, loss="dice_plus_bce", max_steps=steps)
    dice = binary_dice(predict(model, ds.images, 1)[0] >= 0.5, ds.masks[0, 0])
    return model, hist, dice
