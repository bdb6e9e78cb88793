"""Dense-uncertainty cross-view metric localization on synthetic overhead maps.

Given a ground-level view and a heading-aligned top-down patch, the dense
model predicts a probability map over the camera location; a regression
baseline and the full metric suite ship alongside for comparison.
"""

__version__ = "0.1.0"

from . import autodiff, baseline, evaluation, losses, model, synthdata  # noqa: F401
from .autodiff import Tensor, backward, no_grad  # noqa: F401
from .config import RunConfig, load_config  # noqa: F401
