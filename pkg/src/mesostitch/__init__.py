"""Joint registration, stitching and height estimation for close-range image sequences.

Frames from a hand-held or loosely mounted camera are registered against a
running reconstruction while a small untrained CNN supplies per-frame height
maps; parallax between overlapping frames is what makes the heights observable.
"""

from ._kernels import BACKEND
from .geometry import AutofocusContext, CameraPose
from .pipeline import Config, Optimizer, run

__version__ = "0.1.0"

__all__ = ["AutofocusContext", "BACKEND", "CameraPose", "Config", "Optimizer", "run",
           "__version__"]
