"""Scene rasters: container, synthesis, resampling, and file I/O.

A raster is a height x width x channels block of finite floats in row-major
order. The on-disk format is a one-line ASCII header followed by the raw
float32 little-endian pixel data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import RasterFormatError

_MAGIC = "RASTER"
_VERSION = 1
_MAX_HEADER = 128


@dataclass(frozen=True)
class Raster:
    """Immutable image block with shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3:
            raise ValueError(f"raster data must be 3-d (h, w, c), got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("raster dimensions must all be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster data must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SynthParams:
    """Knobs for synthetic scene generation.

    Scenes are white noise scaled by ``amplitude`` and smoothed with a
    Gaussian kernel of scale ``correlation_length`` (reflect boundary).
    The defaults are package choices, not calibrated to any dataset.
    """

    height: int = 32
    width: int = 32
    channels: int = 1
    correlation_length: float = 2.0
    amplitude: float = 3.0

    def __post_init__(self):
        problems = []
        for name in ("height", "width", "channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                problems.append(f"{name} must be a positive integer, got {v!r}")
        if not (math.isfinite(self.correlation_length) and self.correlation_length > 0):
            problems.append(f"correlation_length must be positive, got {self.correlation_length!r}")
        if not (math.isfinite(self.amplitude) and self.amplitude > 0):
            problems.append(f"amplitude must be positive, got {self.amplitude!r}")
        if problems:
            raise ValueError("; ".join(problems))


def synth_scene(params: SynthParams, rng: np.random.Generator) -> Raster:
    """Draw one smoothed-noise scene from the given generator."""
    noise = rng.standard_normal((params.height, params.width, params.channels))
    noise *= params.amplitude
    smooth = gaussian_filter(noise, sigma=(params.correlation_length, params.correlation_length, 0.0))
    return Raster(smooth)


def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    """Integer overlap lengths between output and input cells, scaled by n_out.

    Row i holds, for each input cell j, the overlap of output cell i
    (span n_in / n_out input cells) with input cell j, times n_out. Row
    sums are exactly n_in, so dividing the weighted sum by n_in gives an
    exact area average.
    """
    i = np.arange(n_out, dtype=np.int64)[:, None]
    j = np.arange(n_in, dtype=np.int64)[None, :]
    lo = np.maximum(i * n_in, j * n_out)
    hi = np.minimum((i + 1) * n_in, (j + 1) * n_out)
    return np.maximum(hi - lo, 0).astype(np.float64)


def downsample(raster: Raster, factor: float) -> Raster:
    """Area-average a raster down by ``factor`` in both spatial dimensions.

    Output dimensions are ceil(factor * dim). Fractional factors weight
    input pixels by their exact overlap with each output cell. A factor
    of 1 returns the input raster unchanged.
    """
    if not (0.0 < factor <= 1.0):
        raise ValueError(f"resolution factor must be in (0, 1], got {factor!r}")
    if factor == 1.0:
        return raster
    h_in, w_in = raster.height, raster.width
    h_out = math.ceil(factor * h_in)
    w_out = math.ceil(factor * w_in)
    wh = _overlap_weights(h_in, h_out)
    ww = _overlap_weights(w_in, w_out)
    tmp = np.tensordot(wh, raster.data, axes=(1, 0))
    out = np.tensordot(tmp, ww, axes=(1, 1))
    out = np.transpose(out, (0, 2, 1))
    out /= float(h_in) * float(w_in)
    return Raster(out)


def random_flip(raster: Raster, rng: np.random.Generator) -> Raster:
    """Flip each spatial axis independently with probability 1/2.

    The height-axis draw comes first, so a fixed generator state yields
    a reproducible pair of decisions.
    """
    data = raster.data
    if rng.random() < 0.5:
        data = np.flip(data, axis=0)
    if rng.random() < 0.5:
        data = np.flip(data, axis=1)
    return Raster(data)


def save_raster(path, raster: Raster) -> None:
    """Write a raster file: ASCII header line, then float32 LE pixels."""
    header = f"{_MAGIC} {_VERSION} {raster.height} {raster.width} {raster.channels}\n"
    payload = raster.data.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def load_raster(path) -> Raster:
    """Read a raster file written by :func:`save_raster`."""
    with open(path, "rb") as fh:
        head = fh.read(_MAX_HEADER)
        nl = head.find(b"\n")
        if nl < 0:
            raise RasterFormatError(f"{path}: missing header line")
        try:
            fields = head[:nl].decode("ascii").split(" ")
        except UnicodeDecodeError as exc:
            raise RasterFormatError(f"{path}: header is not ASCII") from exc
        if len(fields) != 5 or fields[0] != _MAGIC:
            raise RasterFormatError(f"{path}: bad header {head[:nl]!r}")
        if fields[1] != str(_VERSION):
            raise RasterFormatError(f"{path}: unsupported version {fields[1]!r}")
        try:
            h, w, c = (int(f) for f in fields[2:5])
        except ValueError as exc:
            raise RasterFormatError(f"{path}: non-integer dimensions") from exc
        if h < 1 or w < 1 or c < 1:
            raise RasterFormatError(f"{path}: dimensions must be positive, got {h}x{w}x{c}")
        expect = h * w * c * 4
        payload = head[nl + 1:] + fh.read()
    if len(payload) < expect:
        raise RasterFormatError(f"{path}: truncated payload, {len(payload)} of {expect} bytes")
    if len(payload) > expect:
        raise RasterFormatError(f"{path}: {len(payload) - expect} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if not np.all(np.isfinite(data)):
        raise RasterFormatError(f"{path}: payload contains non-finite values")
    return Raster(data.astype(np.float64))
