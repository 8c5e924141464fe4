"""Flat key=value config files.

One key per line, ``#`` comments, blank lines ignored. Keys are
namespaced with dots (``dgp.beta = 2``). Every key is optional; unknown
keys and malformed values are rejected with one aggregated error
listing every problem. Random seeds are not config keys: they come
from the command line so that one config can drive many runs.
"""

from __future__ import annotations

import hashlib
import math

from .confounder import KernelFilter
from .dgp import DGPConfig
from .errors import ConfigError
from .estimators import DEFAULT_CLIP
from .evaluation import GridSpec
from .propensity import ConvLayerSpec, ConvNetSpec, TrainConfig
from .raster import SynthParams


def _parse_int(text: str) -> int:
    return int(text, 10)


def _parse_float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("must be 'true' or 'false'")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(_parse_int(p.strip()) for p in text.split(","))


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(_parse_float(p.strip()) for p in text.split(","))


def _parse_choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text

    return parse


def _parse_layers(text: str) -> tuple[ConvLayerSpec, ...]:
    """Layer list like ``32:5:max2,32:5:none`` (filters:width[:pool])."""
    layers = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) not in (2, 3):
            raise ValueError(f"layer {part.strip()!r} must be filters:width[:pool]")
        pool = bits[2] if len(bits) == 3 else "none"
        layers.append(ConvLayerSpec(filter_count=_parse_int(bits[0]), kernel_width=_parse_int(bits[1]), pool=pool))
    return tuple(layers)


def _parse_clip(text: str):
    if text == "none":
        return None
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("must be 'none' or 'lo,hi'")
    return (_parse_float(parts[0]), _parse_float(parts[1]))


_SCHEMA = {
    "synth.height": (_parse_int, 32),
    "synth.width": (_parse_int, 32),
    "synth.channels": (_parse_int, 1),
    "synth.correlation_length": (_parse_float, 2.0),
    "synth.amplitude": (_parse_float, 3.0),
    "confounder.kernel_width": (_parse_int, 9),
    "confounder.noise_sigma": (_parse_float, 0.0),
    "dgp.beta": (_parse_float, 1.0),
    "dgp.gamma": (_parse_float, 2.0),
    "dgp.tau": (_parse_float, 1.0),
    "dgp.sigma_treat": (_parse_float, 0.1),
    "dgp.sigma_outcome": (_parse_float, 0.1),
    "scenes.count": (_parse_int, 500),
    "net.layers": (_parse_layers, (ConvLayerSpec(filter_count=1, kernel_width=9),)),
    "net.batch_norm": (_parse_bool, False),
    "net.projection_dim": (_parse_int, 0),
    "train.optimizer": (_parse_choice(("sgd", "adam_nesterov")), "adam_nesterov"),
    "train.base_lr": (_parse_float, 0.005),
    "train.lr_schedule": (_parse_choice(("constant", "cosine")), "cosine"),
    "train.epochs": (_parse_int, 30),
    "train.batch_size": (_parse_int, 32),
    "train.augment_flips": (_parse_bool, False),
    "estimate.clip": (_parse_clip, DEFAULT_CLIP),
    "grid.est_widths": (_parse_int_list, (5, 7, 9, 11, 13)),
    "grid.resolution_factors": (_parse_float_list, (1.0, 0.5, 0.25, 0.12)),
    "grid.noise_sigmas": (_parse_float_list, (0.0,)),
    "grid.replicates": (_parse_int, 200),
    "grid.scenes_per_replicate": (_parse_int, 500),
}


def parse_config(text: str) -> dict:
    """Parse config text into a fully-defaulted key->value dict.

    Raises ConfigError listing every malformed line, unknown key,
    duplicate key, and bad value at once.
    """
    values = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value, got {raw.strip()!r}")
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SCHEMA:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        parser, _ = _SCHEMA[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            problems.append(f"line {lineno}: {key}: {exc}")
    if problems:
        raise ConfigError("\n".join(problems))
    for key, (_, default) in _SCHEMA.items():
        values.setdefault(key, default)
    return values


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_digest(path) -> str:
    """Hex SHA-256 of the raw config file bytes."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class _Collect:
    """Runs builders, pooling their complaints into one ConfigError."""

    def __init__(self):
        self.problems = []

    def build(self, label, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, ConfigError) as exc:
            self.problems.append(f"{label}: {exc}")
            return None

    def finish(self):
        if self.problems:
            raise ConfigError("\n".join(self.problems))


def build_synth(cfg: dict) -> SynthParams:
    return SynthParams(
        height=cfg["synth.height"],
        width=cfg["synth.width"],
        channels=cfg["synth.channels"],
        correlation_length=cfg["synth.correlation_length"],
        amplitude=cfg["synth.amplitude"],
    )


def build_true_filter(cfg: dict) -> KernelFilter:
    return KernelFilter.diagonal(cfg["confounder.kernel_width"])


def build_dgp(cfg: dict, seed: int) -> DGPConfig:
    return DGPConfig(
        beta=cfg["dgp.beta"],
        gamma=cfg["dgp.gamma"],
        tau=cfg["dgp.tau"],
        sigma_treat=cfg["dgp.sigma_treat"],
        sigma_outcome=cfg["dgp.sigma_outcome"],
        seed=seed,
    )


def build_net(cfg: dict) -> ConvNetSpec:
    return ConvNetSpec(
        layers=cfg["net.layers"],
        batch_norm=cfg["net.batch_norm"],
        projection_dim=cfg["net.projection_dim"],
    )


def build_train(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        optimizer=cfg["train.optimizer"],
        base_lr=cfg["train.base_lr"],
        lr_schedule=cfg["train.lr_schedule"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        augment_flips=cfg["train.augment_flips"],
        seed=seed,
    )


def build_grid(cfg: dict, master_seed: int) -> GridSpec:
    c = _Collect()
    synth = c.build("synth", build_synth, cfg)
    true_filter = c.build("confounder", build_true_filter, cfg)
    dgp = c.build("dgp", build_dgp, cfg, 0)
    train = c.build("train", build_train, cfg, 0)
    c.finish()
    # Per-cell streams replace the dgp/train seeds inside run_grid.
    spec = _Collect()
    grid = spec.build(
        "grid",
        GridSpec,
        synth=synth,
        true_filter=true_filter,
        est_widths=cfg["grid.est_widths"],
        resolution_factors=cfg["grid.resolution_factors"],
        noise_sigmas=cfg["grid.noise_sigmas"],
        replicates=cfg["grid.replicates"],
        scenes_per_replicate=cfg["grid.scenes_per_replicate"],
        dgp=dgp,
        train=train,
        clip=cfg["estimate.clip"],
        master_seed=master_seed,
    )
    spec.finish()
    return grid
