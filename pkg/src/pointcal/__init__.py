"""Point-cloud set-abstraction encoders with channel and spatial recalibration.

A small reverse-mode autodiff engine over numpy drives a hierarchical
point-cloud encoder whose layers can be recalibrated by channel (CRB),
spatial (SRB) or combined (SCRB) gating blocks, trained either as a
shape classifier or as a Cox survival risk model.
"""
from ._accel import backend_name
from .errors import PointcalError
from .recalibration import RecalibMode

__version__ = "0.1.0"

__all__ = ["PointcalError", "RecalibMode", "backend_name", "__version__"]
