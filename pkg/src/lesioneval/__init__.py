"""Evaluation toolkit for 3D PET/CT lesion segmentations."""

from .volume import (
    BinaryMask,
    LabeledComponents,
    ScalarVolume,
    Spacing,
    SuvConversionParams,
    Unit,
    connected_components,
)
from .metrics import SegScores, dsc, fnv, fpv, soft_dice_loss
from .detection import criterion1, criterion2, criterion3, match_lesions
from .measures import LesionMeasures, lesion_measures, mape
from .agreement import RaterStack, fleiss_kappa, kappa_mean, pairwise_dsc, staple

__version__ = "0.1.0"
