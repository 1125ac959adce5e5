"""Dynamic landslide susceptibility mapping.

Per-year susceptibility models (random forest for sample-rich years, a
meta-learned few-shot MLP for scarce ones), Shapley attribution of the
landslide-inducing factors, and enhancement of susceptibility maps with
ground-deformation velocities.
"""

from dynlsm.data_model import (
    FEATURES,
    DeformationPoint,
    FeatureVector,
    GridGeometry,
    LabeledSample,
    Metrics,
    SusceptibilityRaster,
    TaskPool,
    YearTask,
    class_breaks,
)
from dynlsm._kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FEATURES",
    "DeformationPoint",
    "FeatureVector",
    "GridGeometry",
    "LabeledSample",
    "Metrics",
    "SusceptibilityRaster",
    "TaskPool",
    "YearTask",
    "class_breaks",
]
