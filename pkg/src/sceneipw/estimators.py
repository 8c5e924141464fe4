"""Average treatment effect estimators and balance diagnostics.

All estimators take parallel arrays: a 0/1 treatment indicator, an
outcome, and (for weighting) an estimated treatment probability per
unit. Probabilities are clipped to a configurable interval before
weighting; pass ``clip=None`` to use them as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError

DEFAULT_CLIP = (0.01, 0.99)


def _check_groups(t: np.ndarray) -> None:
    if not t.any():
        raise DegenerateDataError("no treated units")
    if t.all():
        raise DegenerateDataError("no control units")


def _as_arrays(t, y) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t)
    y = np.asarray(y, dtype=np.float64)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError(f"treatment and outcome must be equal-length 1-d arrays, got {t.shape} and {y.shape}")
    if t.size == 0:
        raise ValueError("empty input")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("treatment must be 0/1")
    if not np.all(np.isfinite(y)):
        raise ValueError("outcomes must be finite")
    return t.astype(bool), y


def _clipped_probs(p_hat, n: int, clip) -> np.ndarray:
    p = np.asarray(p_hat, dtype=np.float64)
    if p.shape != (n,):
        raise ValueError(f"propensities must have shape ({n},), got {p.shape}")
    if not np.all(np.isfinite(p)) or (p < 0).any() or (p > 1).any():
        raise ValueError("propensities must lie in [0, 1]")
    if clip is None:
        # Without clipping the weights divide by p and 1-p directly.
        if (p <= 0).any() or (p >= 1).any():
            raise ValueError("propensities must lie strictly inside (0, 1) when clip=None")
        return p
    lo, hi = float(clip[0]), float(clip[1])
    if not (0.0 < lo < hi < 1.0):
        raise ValueError(f"clip bounds must satisfy 0 < lo < hi < 1, got {clip!r}")
    return np.clip(p, lo, hi)


def diff_in_means(t, y) -> float:
    """Mean outcome difference between treated and control units."""
    t, y = _as_arrays(t, y)
    _check_groups(t)
    return float(y[t].mean() - y[~t].mean())


def ipw_ht(t, y, p_hat, clip=DEFAULT_CLIP) -> float:
    """Horvitz-Thompson inverse probability weighting estimate.

    Averages t*y/p - (1-t)*y/(1-p) over all units; weights are not
    normalized, so estimates can leave the outcome range when
    propensities are extreme.
    """
    t, y = _as_arrays(t, y)
    p = _clipped_probs(p_hat, t.size, clip)
    terms = np.where(t, y / p, -y / (1.0 - p))
    return float(terms.mean())


def ipw_hajek(t, y, p_hat, clip=DEFAULT_CLIP) -> float:
    """Hajek (self-normalized) inverse probability weighting estimate.

    Within each group the inverse-probability weights are normalized to
    sum to one, trading a little small-sample bias for lower variance.
    """
    t, y = _as_arrays(t, y)
    _check_groups(t)
    p = _clipped_probs(p_hat, t.size, clip)
    wt = 1.0 / p[t]
    wc = 1.0 / (1.0 - p[~t])
    return float((wt * y[t]).sum() / wt.sum() - (wc * y[~t]).sum() / wc.sum())


@dataclass(frozen=True)
class BalanceReport:
    """Covariate mean differences before and after weighting.

    ``raw_diff[j]``: treated minus control mean of covariate j.
    ``weighted_diff[j]``: the same contrast under self-normalized
    inverse-probability weights.
    """

    raw_diff: np.ndarray
    weighted_diff: np.ndarray


def balance_diagnostics(t, x, p_hat, clip=DEFAULT_CLIP) -> BalanceReport:
    """Weighted and unweighted covariate balance for an (n, k) matrix."""
    t = np.asarray(t)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or t.ndim != 1 or x.shape[0] != t.shape[0]:
        raise ValueError(f"need t of shape (n,) and x of shape (n, k), got {t.shape} and {x.shape}")
    if t.size == 0:
        raise ValueError("empty input")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("treatment must be 0/1")
    if not np.all(np.isfinite(x)):
        raise ValueError("covariates must be finite")
    t = t.astype(bool)
    _check_groups(t)
    p = _clipped_probs(p_hat, t.size, clip)
    raw = x[t].mean(axis=0) - x[~t].mean(axis=0)
    wt = (1.0 / p[t])[:, None]
    wc = (1.0 / (1.0 - p[~t]))[:, None]
    weighted = (wt * x[t]).sum(axis=0) / wt.sum() - (wc * x[~t]).sum(axis=0) / wc.sum()
    return BalanceReport(raw_diff=raw, weighted_diff=weighted)
