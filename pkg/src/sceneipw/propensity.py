"""Convolutional propensity model with hand-rolled exact gradients.

The network is a stack of valid convolutions with ReLU and optional 2x2
max pooling, an optional batch-norm stage, an optional linear 1x1
channel projection, a global spatial max pool, and an affine head
squashed through a logistic. Parameters live in one flat float64 vector
addressed by named slices, which keeps optimizers, checkpoints, and
finite-difference checks trivial.

Training runs in float32 for speed; inference and the public gradient
functions run in float64. Architectures consisting of a single
unpooled conv layer (the simulation-study family) train through a
precomputed patch matrix instead of re-windowing every batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import CheckpointFormatError, DivergenceError
from .raster import Raster
from .rng import substream

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9
_POOL_KINDS = ("none", "max2")
_CKPT_MAGIC = "SCENEIPW-NET"
_CKPT_VERSION = 1
# Patch matrices beyond this size fall back to per-batch windowing.
_PATCH_BYTES_CAP = 700 * 2**20


@dataclass(frozen=True)
class ConvLayerSpec:
    """One convolution stage: ``filter_count`` filters of odd ``kernel_width``."""

    filter_count: int
    kernel_width: int
    pool: str = "none"

    def __post_init__(self):
        if not isinstance(self.filter_count, int) or self.filter_count < 1:
            raise ValueError(f"filter_count must be a positive integer, got {self.filter_count!r}")
        if not isinstance(self.kernel_width, int) or self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ValueError(f"kernel_width must be a positive odd integer, got {self.kernel_width!r}")
        if self.pool not in _POOL_KINDS:
            raise ValueError(f"pool must be one of {_POOL_KINDS}, got {self.pool!r}")


@dataclass(frozen=True)
class ConvNetSpec:
    """Architecture: conv stack, optional batch norm, optional projection.

    ``projection_dim`` of zero disables the linear channel projection.
    Batch norm, when enabled, sits between the conv stack and the
    projection.
    """

    layers: tuple[ConvLayerSpec, ...]
    batch_norm: bool = False
    projection_dim: int = 0

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("need at least one conv layer")
        if not all(isinstance(l, ConvLayerSpec) for l in layers):
            raise ValueError("layers must be ConvLayerSpec instances")
        if not isinstance(self.projection_dim, int) or self.projection_dim < 0:
            raise ValueError(f"projection_dim must be a non-negative integer, got {self.projection_dim!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Defaults follow the package's simulation setup: Adam with Nesterov
    momentum at base rate 0.005 under cosine decay. ``epochs`` and
    ``batch_size`` defaults are package choices.
    """

    optimizer: str = "adam_nesterov"
    base_lr: float = 0.005
    lr_schedule: str = "cosine"
    epochs: int = 30
    batch_size: int = 32
    augment_flips: bool = False
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.optimizer not in ("sgd", "adam_nesterov"):
            problems.append(f"optimizer must be 'sgd' or 'adam_nesterov', got {self.optimizer!r}")
        if not (np.isfinite(self.base_lr) and self.base_lr > 0):
            problems.append(f"base_lr must be positive, got {self.base_lr!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            problems.append(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            problems.append(f"epochs must be a positive integer, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            problems.append(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if problems:
            raise ValueError("; ".join(problems))


class _Net:
    """Geometry walk: derives every stage shape and the flat param layout."""

    def __init__(self, spec: ConvNetSpec, input_shape: tuple[int, int, int]):
        h, w, c = (int(v) for v in input_shape)
        if h < 1 or w < 1 or c < 1:
            raise ValueError(f"input shape must be positive, got {input_shape}")
        self.spec = spec
        self.input_shape = (h, w, c)
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.layer_in_channels: list[int] = []
        for i, layer in enumerate(spec.layers):
            k = layer.kernel_width
            if k > h or k > w:
                raise ValueError(f"layer {i}: kernel width {k} exceeds spatial extent {h}x{w}")
            self.layer_in_channels.append(c)
            self.shapes[f"conv{i}.weights"] = (k, k, c, layer.filter_count)
            self.shapes[f"conv{i}.bias"] = (layer.filter_count,)
            h, w, c = h - k + 1, w - k + 1, layer.filter_count
            if layer.pool == "max2":
                if h < 2 or w < 2:
                    raise ValueError(f"layer {i}: cannot 2x2-pool a {h}x{w} map")
                h, w = h // 2, w // 2
        self.stack_channels = c
        if spec.batch_norm:
            self.shapes["batch_norm.scale"] = (c,)
            self.shapes["batch_norm.shift"] = (c,)
        if spec.projection_dim:
            self.shapes["projection.weights"] = (c, spec.projection_dim)
            self.shapes["projection.bias"] = (spec.projection_dim,)
            c = spec.projection_dim
        self.shapes["head.weights"] = (c,)
        self.shapes["head.bias"] = (1,)
        self.feature_dim = c
        self.stack_spatial = (h, w)
        self.slices: dict[str, slice] = {}
        offset = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            self.slices[name] = slice(offset, offset + n)
            offset += n
        self.n_params = offset

    def param(self, params: np.ndarray, name: str) -> np.ndarray:
        return params[self.slices[name]].reshape(self.shapes[name])


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, size: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size)


def _init_params(net: _Net, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, identity batch norm."""
    params = np.zeros(net.n_params, dtype=np.float64)
    for i, layer in enumerate(net.spec.layers):
        k = layer.kernel_width
        c_in = net.layer_in_channels[i]
        sl = net.slices[f"conv{i}.weights"]
        params[sl] = _glorot(rng, k * k * c_in, k * k * layer.filter_count, sl.stop - sl.start)
    if net.spec.batch_norm:
        params[net.slices["batch_norm.scale"]] = 1.0
    if net.spec.projection_dim:
        sl = net.slices["projection.weights"]
        params[sl] = _glorot(rng, net.stack_channels, net.spec.projection_dim, sl.stop - sl.start)
    sl = net.slices["head.weights"]
    params[sl] = _glorot(rng, net.feature_dim, 1, sl.stop - sl.start)
    return params


class _Ctx:
    __slots__ = ("ops", "tie_count", "batch_stats")

    def __init__(self, ops, tie_count, batch_stats):
        self.ops = ops
        self.tie_count = tie_count
        self.batch_stats = batch_stats


def _forward_batch(net, params, x, bn_mean, bn_var, training):
    """Run the net on a (N, H, W, C) batch; returns logits and caches."""
    ops = []
    ties = 0
    batch_stats = None
    h = x
    for i, layer in enumerate(net.spec.layers):
        k = layer.kernel_width
        wf = net.param(params, f"conv{i}.weights")
        bias = params[net.slices[f"conv{i}.bias"]]
        win = np.lib.stride_tricks.sliding_window_view(h, (k, k), axis=(1, 2))
        z = np.tensordot(win, wf, axes=([4, 5, 3], [0, 1, 2]))
        z += bias
        ops.append(("conv", {"i": i, "x": h}))
        mask = z > 0
        h = z * mask
        ops.append(("relu", {"mask": mask}))
        if layer.pool == "max2":
            n, ho, wo, f = h.shape
            h2, w2 = ho // 2, wo // 2
            q = h[:, : h2 * 2, : w2 * 2].reshape(n, h2, 2, w2, 2, f)
            q = q.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, f, 4)
            idx = q.argmax(axis=4)
            pooled = np.take_along_axis(q, idx[..., None], axis=4)[..., 0]
            ties += int(((q == pooled[..., None]).sum(axis=4) > 1).sum())
            ops.append(("max2", {"idx": idx, "in_shape": h.shape}))
            h = pooled
    if net.spec.batch_norm:
        scale = params[net.slices["batch_norm.scale"]]
        shift = params[net.slices["batch_norm.shift"]]
        if training:
            mu = h.mean(axis=(0, 1, 2))
            diff = h - mu
            var = (diff * diff).mean(axis=(0, 1, 2))
            ivar = 1.0 / np.sqrt(var + _BN_EPS)
            xhat = diff * ivar
            m = h.shape[0] * h.shape[1] * h.shape[2]
            ops.append(("bn_train", {"diff": diff, "ivar": ivar, "xhat": xhat, "m": m}))
            batch_stats = (mu, var)
        else:
            ivar = 1.0 / np.sqrt(bn_var + _BN_EPS)
            xhat = (h - bn_mean) * ivar
            ops.append(("bn_eval", {"ivar": ivar, "xhat": xhat}))
        h = scale * xhat + shift
    if net.spec.projection_dim:
        wp = net.param(params, "projection.weights")
        bp = params[net.slices["projection.bias"]]
        ops.append(("proj", {"x": h}))
        h = h @ wp + bp
    n, hs, ws, cf = h.shape
    flat = h.reshape(n, hs * ws, cf)
    gidx = flat.argmax(axis=1)
    pooled = np.take_along_axis(flat, gidx[:, None, :], axis=1)[:, 0, :]
    ties += int(((flat == pooled[:, None, :]).sum(axis=1) > 1).sum())
    ops.append(("gpool", {"idx": gidx, "in_shape": h.shape}))
    wh = params[net.slices["head.weights"]]
    bh = params[net.slices["head.bias"]]
    logits = pooled @ wh + bh[0]
    ops.append(("head", {"pooled": pooled}))
    return logits, _Ctx(ops, ties, batch_stats)


def _backward_batch(net, params, ctx, dlogits, need_input_grad=False, need_param_grads=True):
    """Exact reverse pass; returns (flat param grads, input grads or None)."""
    grad = np.zeros_like(params) if need_param_grads else None
    d = None
    for op, cache in reversed(ctx.ops):
        if op == "head":
            wh = params[net.slices["head.weights"]]
            if need_param_grads:
                grad[net.slices["head.weights"]] = cache["pooled"].T @ dlogits
                grad[net.slices["head.bias"]] = dlogits.sum()
            d = dlogits[:, None] * wh[None, :]
        elif op == "gpool":
            n, hs, ws, cf = cache["in_shape"]
            flat = np.zeros((n, hs * ws, cf), dtype=d.dtype)
            np.put_along_axis(flat, cache["idx"][:, None, :], d[:, None, :], axis=1)
            d = flat.reshape(n, hs, ws, cf)
        elif op == "proj":
            wp = net.param(params, "projection.weights")
            if need_param_grads:
                dw = np.tensordot(cache["x"], d, axes=([0, 1, 2], [0, 1, 2]))
                grad[net.slices["projection.weights"]] = dw.ravel()
                grad[net.slices["projection.bias"]] = d.sum(axis=(0, 1, 2))
            d = d @ wp.T
        elif op == "bn_train":
            scale = params[net.slices["batch_norm.scale"]]
            diff, ivar, xhat, m = cache["diff"], cache["ivar"], cache["xhat"], cache["m"]
            if need_param_grads:
                grad[net.slices["batch_norm.scale"]] = (d * xhat).sum(axis=(0, 1, 2))
                grad[net.slices["batch_norm.shift"]] = d.sum(axis=(0, 1, 2))
            dxhat = d * scale
            dvar = (dxhat * diff).sum(axis=(0, 1, 2)) * -0.5 * ivar**3
            dmu = -(dxhat.sum(axis=(0, 1, 2)) * ivar) + dvar * (-2.0 / m) * diff.sum(axis=(0, 1, 2))
            d = dxhat * ivar + diff * (2.0 / m) * dvar + dmu / m
        elif op == "bn_eval":
            scale = params[net.slices["batch_norm.scale"]]
            if need_param_grads:
                grad[net.slices["batch_norm.scale"]] = (d * cache["xhat"]).sum(axis=(0, 1, 2))
                grad[net.slices["batch_norm.shift"]] = d.sum(axis=(0, 1, 2))
            d = d * (scale * cache["ivar"])
        elif op == "max2":
            n, ho, wo, f = cache["in_shape"]
            h2, w2 = ho // 2, wo // 2
            dq = np.zeros((n, h2, w2, f, 4), dtype=d.dtype)
            np.put_along_axis(dq, cache["idx"][..., None], d[..., None], axis=4)
            full = np.zeros((n, ho, wo, f), dtype=d.dtype)
            full[:, : h2 * 2, : w2 * 2] = (
                dq.reshape(n, h2, w2, f, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h2 * 2, w2 * 2, f)
            )
            d = full
        elif op == "relu":
            d = d * cache["mask"]
        elif op == "conv":
            i = cache["i"]
            x_in = cache["x"]
            k = net.spec.layers[i].kernel_width
            wf = net.param(params, f"conv{i}.weights")
            if need_param_grads:
                win = np.lib.stride_tricks.sliding_window_view(x_in, (k, k), axis=(1, 2))
                dw = np.tensordot(win, d, axes=([0, 1, 2], [0, 1, 2]))
                grad[net.slices[f"conv{i}.weights"]] = dw.transpose(1, 2, 0, 3).ravel()
                grad[net.slices[f"conv{i}.bias"]] = d.sum(axis=(0, 1, 2))
            if i > 0 or need_input_grad:
                pad = k - 1
                dpad = np.pad(d, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
                win2 = np.lib.stride_tricks.sliding_window_view(dpad, (k, k), axis=(1, 2))
                d = np.tensordot(win2, wf[::-1, ::-1, :, :], axes=([3, 4, 5], [3, 0, 1]))
            else:
                d = None
    return grad, d


def _bce_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy, stable for large |logit|."""
    return np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


@dataclass
class PropensityModel:
    """A trained (or freshly initialized) network plus its parameters."""

    spec: ConvNetSpec
    input_shape: tuple[int, int, int]
    params: np.ndarray = field(repr=False)
    bn_mean: np.ndarray | None = field(default=None, repr=False)
    bn_var: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        net = _Net(self.spec, self.input_shape)
        if self.params.shape != (net.n_params,):
            raise ValueError(f"expected {net.n_params} parameters, got {self.params.shape}")
        if self.spec.batch_norm:
            c = net.stack_channels
            if self.bn_mean is None:
                self.bn_mean = np.zeros(c, dtype=np.float64)
            if self.bn_var is None:
                self.bn_var = np.ones(c, dtype=np.float64)
            if self.bn_mean.shape != (c,) or self.bn_var.shape != (c,):
                raise ValueError("batch-norm running stats have the wrong shape")
        object.__setattr__(self, "_net", net)

    @property
    def net(self) -> _Net:
        return self._net


@dataclass(frozen=True)
class ForwardTrace:
    """Probability, pre-logistic score, and pooling-tie count for one scene."""

    probability: float
    logit: float
    pool_ties: int


@dataclass(frozen=True)
class TrainResult:
    model: PropensityModel
    loss_trace: np.ndarray


def build_model(spec: ConvNetSpec, input_shape: tuple[int, int, int], seed: int = 0) -> PropensityModel:
    """Fresh model with Glorot-uniform weights drawn from ``seed``."""
    net = _Net(spec, input_shape)
    params = _init_params(net, substream(seed))
    return PropensityModel(spec=spec, input_shape=net.input_shape, params=params)


def _check_raster(model: PropensityModel, raster: Raster) -> None:
    shape = (raster.height, raster.width, raster.channels)
    if shape != model.input_shape:
        raise ValueError(f"raster shape {shape} does not match model input {model.input_shape}")


def trace_forward(model: PropensityModel, raster: Raster) -> ForwardTrace:
    """Inference-mode forward pass for one scene, with diagnostics."""
    _check_raster(model, raster)
    logits, ctx = _forward_batch(
        model.net, model.params, raster.data[None], model.bn_mean, model.bn_var, training=False
    )
    logit = float(logits[0])
    return ForwardTrace(probability=float(expit(logit)), logit=logit, pool_ties=ctx.tie_count)


def forward(model: PropensityModel, raster: Raster) -> float:
    """Estimated treatment probability for one scene."""
    return trace_forward(model, raster).probability


def predict_batch(model: PropensityModel, rasters: Sequence[Raster], chunk: int = 64) -> np.ndarray:
    """Estimated treatment probabilities for a scene collection."""
    for r in rasters:
        _check_raster(model, r)
    out = np.empty(len(rasters), dtype=np.float64)
    for start in range(0, len(rasters), chunk):
        batch = rasters[start : start + chunk]
        x = np.stack([r.data for r in batch])
        logits, _ = _forward_batch(model.net, model.params, x, model.bn_mean, model.bn_var, training=False)
        out[start : start + len(batch)] = expit(logits)
    return out


def gradient_wrt_input(model: PropensityModel, raster: Raster) -> np.ndarray:
    """d(pre-logistic score)/d(pixel), inference mode, shape (H, W, C)."""
    _check_raster(model, raster)
    _, ctx = _forward_batch(
        model.net, model.params, raster.data[None], model.bn_mean, model.bn_var, training=False
    )
    _, dx = _backward_batch(
        model.net, model.params, ctx, np.ones(1, dtype=np.float64),
        need_input_grad=True, need_param_grads=False,
    )
    return dx[0]


def loss_and_gradient(
    model: PropensityModel, rasters: Sequence[Raster], treatments
) -> tuple[float, np.ndarray]:
    """Mean training BCE and its exact gradient in the flat parameters.

    Uses the training-mode forward pass (batch statistics when batch
    norm is on), so finite differences of the returned loss match the
    returned gradient.
    """
    for r in rasters:
        _check_raster(model, r)
    t = np.asarray(treatments, dtype=np.float64)
    if t.shape != (len(rasters),) or not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("treatments must be one 0/1 value per raster")
    x = np.stack([r.data for r in rasters])
    logits, ctx = _forward_batch(model.net, model.params, x, model.bn_mean, model.bn_var, training=True)
    loss = float(_bce_from_logits(logits, t).mean())
    dlogits = (expit(logits) - t) / t.size
    grad, _ = _backward_batch(model.net, model.params, ctx, dlogits)
    return loss, grad


class _Optimizer:
    """SGD or Adam with Nesterov momentum over the flat parameter vector."""

    def __init__(self, kind: str, size: int, dtype):
        self.kind = kind
        if kind == "adam_nesterov":
            self.m = np.zeros(size, dtype=dtype)
            self.v = np.zeros(size, dtype=dtype)
            self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if self.kind == "sgd":
            params -= lr * grad
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        mc = 1.0 - b1**self.t
        vc = 1.0 - b2**self.t
        mhat = self.m / mc
        vhat = self.v / vc
        update = (b1 * mhat + (1 - b1) / mc * grad) / (np.sqrt(vhat) + eps)
        params -= lr * update


def _lr_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "constant":
        return config.base_lr
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))


def _patch_matrix(x: np.ndarray, k: int) -> np.ndarray:
    """(n, positions, k*k*channels) window matrix for a single conv layer."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    n, ho, wo = win.shape[:3]
    return win.reshape(n, ho * wo, -1)


def _fast_train_ok(net: _Net, config: TrainConfig, n_scenes: int) -> bool:
    s = net.spec
    if len(s.layers) != 1 or s.layers[0].pool != "none" or s.batch_norm or s.projection_dim:
        return False
    if config.augment_flips:
        return False
    h, w, c = net.input_shape
    k = s.layers[0].kernel_width
    positions = (h - k + 1) * (w - k + 1)
    return n_scenes * positions * k * k * c * 4 <= _PATCH_BYTES_CAP


def _fast_step(net, params, patches, targets, idx):
    """One batch of forward+backward through the precomputed patch matrix.

    Exploits the fact that with a single unpooled conv layer, only each
    scene's argmax window carries gradient; relu commutes with the max.
    """
    k = net.spec.layers[0].kernel_width
    c = net.layer_in_channels[0]
    f = net.spec.layers[0].filter_count
    sl_w = net.slices["conv0.weights"]
    sl_b = net.slices["conv0.bias"]
    wd = params[sl_w].reshape(k, k, c, f).transpose(2, 0, 1, 3).reshape(k * k * c, f)
    bias = params[sl_b]
    wh = params[net.slices["head.weights"]]
    bh = params[net.slices["head.bias"]]
    xb = patches[idx]
    bsz, pos, d = xb.shape
    z = (xb.reshape(bsz * pos, d) @ wd).reshape(bsz, pos, f)
    z += bias
    midx = z.argmax(axis=1)
    zmax = np.take_along_axis(z, midx[:, None, :], axis=1)[:, 0, :]
    pooled = np.maximum(zmax, 0)
    gate = zmax > 0
    logits = pooled @ wh + bh[0]
    tb = targets[idx]
    loss = float(_bce_from_logits(logits, tb).mean())
    dlogits = (expit(logits) - tb) / bsz
    grad = np.zeros_like(params)
    grad[net.slices["head.weights"]] = pooled.T @ dlogits
    grad[net.slices["head.bias"]] = dlogits.sum()
    dz = (dlogits[:, None] * wh[None, :]) * gate
    rows = xb[np.arange(bsz)[:, None], midx]
    dwd = np.einsum("bf,bfd->df", dz, rows)
    grad[sl_w] = dwd.reshape(c, k, k, f).transpose(1, 2, 0, 3).ravel()
    grad[sl_b] = dz.sum(axis=0)
    return loss, grad


def train(
    rasters: Sequence[Raster], treatments, spec: ConvNetSpec, config: TrainConfig
) -> TrainResult:
    """Fit the propensity network by mini-batch gradient descent.

    Parameters
    ----------
    rasters : scene images, all the same shape.
    treatments : 0/1 indicator per scene.
    spec : network architecture.
    config : optimizer, schedule, epochs, batching, augmentation, seed.

    The loss trace holds each epoch's mean pre-update batch loss.
    Initialization, shuffling, and augmentation each draw from their own
    substream of ``config.seed``, so a given seed always yields the same
    parameter vector. Raises DivergenceError if the loss or any
    parameter goes non-finite.
    """
    if len(rasters) < 1:
        raise ValueError("need at least one scene")
    shape = (rasters[0].height, rasters[0].width, rasters[0].channels)
    for r in rasters:
        if (r.height, r.width, r.channels) != shape:
            raise ValueError("all rasters must share one shape")
    t = np.asarray(treatments, dtype=np.float64)
    if t.shape != (len(rasters),) or not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("treatments must be one 0/1 value per raster")
    net = _Net(spec, shape)
    n = len(rasters)
    rng_shuffle = substream(config.seed, 1)
    rng_aug = substream(config.seed, 2)
    params = _init_params(net, substream(config.seed, 0)).astype(np.float32)
    targets = t.astype(np.float32)
    x = np.stack([r.data for r in rasters]).astype(np.float32)
    fast = _fast_train_ok(net, config, n)
    patches = _patch_matrix(x, spec.layers[0].kernel_width) if fast else None
    opt = _Optimizer(config.optimizer, net.n_params, np.float32)
    bn_mean = np.zeros(net.stack_channels, dtype=np.float32) if spec.batch_norm else None
    bn_var = np.ones(net.stack_channels, dtype=np.float32) if spec.batch_norm else None
    trace = np.empty(config.epochs, dtype=np.float64)
    for epoch in range(config.epochs):
        lr = _lr_at(config, epoch)
        perm = rng_shuffle.permutation(n)
        if config.augment_flips:
            # One height draw then one width draw per scene, in scene order.
            flips = rng_aug.random((n, 2)) < 0.5
            x_epoch = x.copy()
            x_epoch[flips[:, 0]] = x_epoch[flips[:, 0]][:, ::-1]
            x_epoch[flips[:, 1]] = x_epoch[flips[:, 1]][:, :, ::-1]
        else:
            x_epoch = x
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            if fast:
                loss, grad = _fast_step(net, params, patches, targets, idx)
            else:
                logits, ctx = _forward_batch(net, params, x_epoch[idx], bn_mean, bn_var, training=True)
                loss = float(_bce_from_logits(logits, targets[idx]).mean())
                dlogits = (expit(logits) - targets[idx]) / idx.size
                grad, _ = _backward_batch(net, params, ctx, dlogits)
                if spec.batch_norm:
                    mu, var = ctx.batch_stats
                    bn_mean *= _BN_MOMENTUM
                    bn_mean += (1 - _BN_MOMENTUM) * mu
                    bn_var *= _BN_MOMENTUM
                    bn_var += (1 - _BN_MOMENTUM) * var
            loss_sum += loss * idx.size
            opt.step(params, grad, lr)
        trace[epoch] = loss_sum / n
        if not np.isfinite(trace[epoch]) or not np.isfinite(params).all():
            raise DivergenceError(f"training diverged at epoch {epoch}", epoch=epoch)
    model = PropensityModel(
        spec=spec,
        input_shape=shape,
        params=params.astype(np.float64),
        bn_mean=None if bn_mean is None else bn_mean.astype(np.float64),
        bn_var=None if bn_var is None else bn_var.astype(np.float64),
    )
    return TrainResult(model=model, loss_trace=trace)


def save_model(path, model: PropensityModel) -> None:
    """Write a checkpoint: ASCII architecture header, float32 LE payload.

    The payload is the flat parameter vector, followed by the running
    batch-norm mean and variance when batch norm is enabled.
    """
    lines = [f"{_CKPT_MAGIC} {_CKPT_VERSION}"]
    h, w, c = model.input_shape
    lines.append(f"input {h} {w} {c}")
    for layer in model.spec.layers:
        lines.append(f"layer {layer.filter_count} {layer.kernel_width} {layer.pool}")
    lines.append(f"batch_norm {int(model.spec.batch_norm)}")
    lines.append(f"projection {model.spec.projection_dim}")
    lines.append(f"params {model.params.size}")
    lines.append("END")
    payload = model.params.astype("<f4").tobytes()
    if model.spec.batch_norm:
        payload += model.bn_mean.astype("<f4").tobytes()
        payload += model.bn_var.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(payload)


def load_model(path) -> PropensityModel:
    """Read a checkpoint written by :func:`save_model`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end_mark = b"END\n"
    end = blob.find(end_mark)
    if end < 0:
        raise CheckpointFormatError(f"{path}: missing header terminator")
    try:
        lines = blob[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{path}: header is not ASCII") from exc
    payload = blob[end + len(end_mark):]
    if not lines or lines[0] != f"{_CKPT_MAGIC} {_CKPT_VERSION}":
        raise CheckpointFormatError(f"{path}: bad magic line")
    fields: dict[str, list[str]] = {}
    layers = []
    for line in lines[1:]:
        parts = line.split(" ")
        if parts[0] == "layer":
            layers.append(parts[1:])
        else:
            fields[parts[0]] = parts[1:]
    try:
        h, w, c = (int(v) for v in fields["input"])
        layer_specs = tuple(
            ConvLayerSpec(filter_count=int(f), kernel_width=int(k), pool=p) for f, k, p in layers
        )
        spec = ConvNetSpec(
            layers=layer_specs,
            batch_norm=bool(int(fields["batch_norm"][0])),
            projection_dim=int(fields["projection"][0]),
        )
        n_params = int(fields["params"][0])
    except (KeyError, IndexError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: incomplete header") from exc
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: invalid header field: {exc}") from exc
    try:
        net = _Net(spec, (h, w, c))
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: inconsistent architecture: {exc}") from exc
    if n_params != net.n_params:
        raise CheckpointFormatError(f"{path}: header claims {n_params} params, architecture has {net.n_params}")
    expect = n_params * 4 + (net.stack_channels * 8 if spec.batch_norm else 0)
    if len(payload) != expect:
        raise CheckpointFormatError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    flat = np.frombuffer(payload, dtype="<f4")
    params = flat[:n_params].astype(np.float64)
    bn_mean = bn_var = None
    if spec.batch_norm:
        cs = net.stack_channels
        bn_mean = flat[n_params : n_params + cs].astype(np.float64)
        bn_var = flat[n_params + cs :].astype(np.float64)
    if not np.isfinite(params).all() or (bn_mean is not None and not (np.isfinite(bn_mean).all() and np.isfinite(bn_var).all())):
        raise CheckpointFormatError(f"{path}: non-finite values in payload")
    return PropensityModel(spec=spec, input_shape=(h, w, c), params=params, bn_mean=bn_mean, bn_var=bn_var)
