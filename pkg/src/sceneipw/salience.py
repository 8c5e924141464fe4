"""Pixel salience maps from input gradients of the propensity score."""

from __future__ import annotations

import numpy as np

from .propensity import PropensityModel, gradient_wrt_input
from .raster import Raster


def salience_map(model: PropensityModel, raster: Raster) -> np.ndarray:
    """Per-pixel salience: the channel-wise L2 norm of the score gradient.

    Returns an (H, W) float array: sqrt of the sum over channels of the
    squared gradient of the pre-logistic score with respect to each
    pixel.
    """
    g = gradient_wrt_input(model, raster)
    return np.sqrt((g * g).sum(axis=2))
