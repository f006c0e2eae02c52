"""Deep-learning workbench for prostate MRI lesion classification and segmentation on synthetic phantoms."""
from .data import (FoldSplit, LesionRecord, MaskKind, MaskVolume, PatientStudy, Sequence, Volume3D,
                   derive_significance, load_cohort, load_study, make_folds, save_study, union_masks)
from .geometry import (BBox2D, ConvSpec, LesionLocation, conv_output_size, crop_adjusted, crop_fixed,
                       max_area_slice, resample_mask, resample_volume, slice_bbox)
from .phantom import PhantomParams, generate_cohort, generate_studies, generate_study
from .augment import Augment2DParams, Augment3DParams, augment2d, augment3d, center_crop, elastic_deform3d
from .nets import ModelSpec, build_model, expected_shapes, param_count, trace_shapes
from .objectives import (accuracy, aggregate_45, bce, binary_dice, ce, combined_loss, confusion_ordinal,
                         dice_loss, roc_auc, soft_dice)
from .training import (OptimSettings, TrainHistory, cross_validate, evaluate_fold, grad_check,
                       train_classifier, train_segmenter)
from .experiments import ExperimentConfig, ResultsRecord, expand_grid, run_experiment

__version__ = "0.1.0"
