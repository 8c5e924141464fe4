"""Latent scene confounders derived from rasters.

Each scene's confounder is the global max of a valid cross-correlation
between the scene and a fixed kernel, optionally perturbed by pixel
noise, then standardized across the scene collection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateDataError
from .raster import Raster
from .rng import substream


@dataclass(frozen=True)
class KernelFilter:
    """A square spatial kernel with odd width."""

    weights: np.ndarray

    def __post_init__(self):
        arr = np.array(self.weights, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"kernel must be square 2-d, got shape {arr.shape}")
        if arr.shape[0] % 2 == 0 or arr.shape[0] < 1:
            raise ValueError(f"kernel width must be odd and positive, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("kernel weights must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "weights", arr)

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def diagonal(cls, width: int) -> "KernelFilter":
        """Kernel with ones on the main diagonal, zero elsewhere."""
        return cls(np.eye(width))


@dataclass(frozen=True)
class ConfounderSpec:
    """How to turn scenes into confounder values.

    ``noise_sigma`` is the standard deviation of i.i.d. Gaussian noise
    added to every similarity-map pixel before pooling; zero disables
    the noise entirely (no random draws are made).
    """

    filter: KernelFilter
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ValueError(f"noise_sigma must be a finite non-negative float, got {self.noise_sigma!r}")


def neighborhood_indices(w: int, h: int, z: int, bounds: tuple[int, int]) -> list[tuple[int, int]]:
    """Grid cells in the size-z square neighborhood centred on (w, h).

    Size z covers offsets -(z-1) through z-1 on each axis (so z=2 gives
    the 3x3 block). Cells outside ``bounds = (n_cols, n_rows)`` are
    dropped; the result is sorted as (w, h) pairs.
    """
    if z < 1:
        raise ValueError(f"neighborhood size must be at least 1, got {z}")
    n_cols, n_rows = bounds
    if not (0 <= w < n_cols and 0 <= h < n_rows):
        raise ValueError(f"cell ({w}, {h}) outside bounds {bounds}")
    r = z - 1
    cols = range(max(0, w - r), min(n_cols, w + r + 1))
    rows = range(max(0, h - r), min(n_rows, h + r + 1))
    return sorted((wc, hc) for wc in cols for hc in rows)


def convolve_valid(raster: Raster, kernel: KernelFilter) -> np.ndarray:
    """Valid-mode cross-correlation, summing over channels.

    Returns a (H-k+1, W-k+1) float map; the kernel is applied
    identically to every channel and channel responses are summed.
    Raises ValueError if the kernel is wider than the raster.
    """
    k = kernel.width
    if k > raster.height or k > raster.width:
        raise ValueError(
            f"kernel width {k} exceeds raster extent {raster.height}x{raster.width}"
        )
    win = np.lib.stride_tricks.sliding_window_view(raster.data, (k, k), axis=(0, 1))
    return np.tensordot(win, kernel.weights, axes=([3, 4], [0, 1])).sum(axis=2)


def global_max_pool(similarity: np.ndarray) -> float:
    """Largest value of a similarity map."""
    arr = np.asarray(similarity, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot pool an empty map")
    return float(arr.max())


def standardize(values) -> np.ndarray:
    """Center and scale to zero mean and unit population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"need a 1-d array of at least two values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("values must be finite")
    sd = float(arr.std())
    if sd == 0.0:
        raise DegenerateDataError("values have zero spread; cannot standardize")
    return (arr - arr.mean()) / sd


def scene_confounders(rasters: Sequence[Raster], spec: ConfounderSpec) -> np.ndarray:
    """Confounder value per scene, standardized across the collection.

    Per scene: valid cross-correlation with the kernel, optional pixel
    noise on the similarity map, then a global max. Noise for scene i
    comes from its own substream of ``spec.seed``, so values do not
    depend on collection size or processing order. With zero
    ``noise_sigma`` the result is bit-identical to the noiseless
    composition and no generator is ever created.
    """
    if len(rasters) < 2:
        raise ValueError("need at least two scenes to standardize confounders")
    pooled = np.empty(len(rasters), dtype=np.float64)
    for i, raster in enumerate(rasters):
        sim = convolve_valid(raster, spec.filter)
        if spec.noise_sigma > 0:
            noise = substream(spec.seed, i).standard_normal(sim.shape)
            sim = sim + spec.noise_sigma * noise
        pooled[i] = global_max_pool(sim)
    return standardize(pooled)
