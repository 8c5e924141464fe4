"""Scene-level treatment assignment and outcomes.

Treatment probability is logistic in the scene confounder plus
assignment noise; outcomes are linear in confounder and treatment. All
coefficients default to package choices that give strong confounding,
not to values estimated from any dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .confounder import ConfounderSpec, scene_confounders
from .raster import Raster, SynthParams, synth_scene
from .rng import substream


@dataclass(frozen=True)
class DGPConfig:
    """Structural coefficients and noise scales.

    beta scales the confounder in the treatment logit, gamma scales it
    in the outcome, tau is the homogeneous treatment effect.
    sigma_treat and sigma_outcome are the assignment- and outcome-noise
    standard deviations.
    """

    beta: float = 1.0
    gamma: float = 2.0
    tau: float = 1.0
    sigma_treat: float = 0.1
    sigma_outcome: float = 0.1
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("beta", "gamma", "tau"):
            if not np.isfinite(getattr(self, name)):
                problems.append(f"{name} must be finite, got {getattr(self, name)!r}")
        for name in ("sigma_treat", "sigma_outcome"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                problems.append(f"{name} must be finite and non-negative, got {v!r}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class SceneRecord:
    """Observed and latent quantities for one scene."""

    scene_id: int
    treatment: int
    outcome: float
    u_true: float
    p_true: float
    cov1: float
    cov2: float


def _logistic(x: float) -> float:
    # Evaluated branch-wise to avoid overflow for large |x|.
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def assign_treatment(u: float, cfg: DGPConfig, rng: np.random.Generator) -> tuple[int, float]:
    """Draw a treatment indicator for one scene.

    Assignment noise enters inside the logistic, so the returned
    probability is the realized one: p = logistic(beta * u + eps).
    """
    eps = cfg.sigma_treat * rng.standard_normal()
    p = _logistic(cfg.beta * u + eps)
    t = int(rng.random() < p)
    return t, p


def generate_outcome(u: float, t: int, cfg: DGPConfig, rng: np.random.Generator) -> float:
    """Outcome for one scene: gamma * u + tau * t + noise."""
    eps = cfg.sigma_outcome * rng.standard_normal()
    return cfg.gamma * u + cfg.tau * float(t) + eps


def generate_dataset(
    n_scenes: int,
    synth: SynthParams,
    conf: ConfounderSpec,
    cfg: DGPConfig,
    image_seed: int = 0,
) -> tuple[list[Raster], list[SceneRecord]]:
    """Simulate a full scene collection.

    Scene i's image comes from substream i of ``image_seed`` and its
    assignment/outcome draws from substream i of ``cfg.seed``, so the
    first k scenes' rasters and noise draws are unchanged when
    ``n_scenes`` grows. Per-scene draw order is fixed: assignment
    noise, the treatment uniform, outcome noise, then two uniform
    auxiliary covariates that never enter the structural equations.

    Returns the rasters and one record per scene.
    """
    if n_scenes < 2:
        raise ValueError("need at least two scenes")
    rasters = [synth_scene(synth, substream(image_seed, i)) for i in range(n_scenes)]
    u = scene_confounders(rasters, conf)
    records = []
    for i in range(n_scenes):
        rng = substream(cfg.seed, i)
        t, p = assign_treatment(float(u[i]), cfg, rng)
        y = generate_outcome(float(u[i]), t, cfg, rng)
        cov1, cov2 = rng.random(2)
        records.append(
            SceneRecord(
                scene_id=i,
                treatment=t,
                outcome=float(y),
                u_true=float(u[i]),
                p_true=float(p),
                cov1=float(cov1),
                cov2=float(cov2),
            )
        )
    return rasters, records
