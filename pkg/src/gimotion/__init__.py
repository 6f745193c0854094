"""Peristaltic motion digital twins for evaluating deformable image registration."""
from .grid import (BACKWARD_PULL, DOSE_GRAY, FORWARD_PUSH, INTENSITY, GridGeometry, LabelMask,
                   ScalarGrid, VectorField)
from .motion import LARGE_BOWEL, STOMACH, WaveParams

__version__ = "0.1.0"

__all__ = ["GridGeometry", "ScalarGrid", "LabelMask", "VectorField", "WaveParams", "STOMACH",
           "LARGE_BOWEL", "INTENSITY", "DOSE_GRAY", "FORWARD_PUSH", "BACKWARD_PULL"]
