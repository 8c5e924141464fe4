"""Monte Carlo evaluation of the estimators over a condition grid.

Each grid cell crosses an estimation kernel width with an image
resolution factor and a similarity-map noise level. Confounders are
always generated from the full-resolution scenes with the true kernel;
only the images handed to the propensity model are degraded. Every
(cell, replicate) pair draws from its own derived random stream, so
results are independent of scheduling and worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial

import numpy as np

from .confounder import ConfounderSpec, KernelFilter
from .dgp import DGPConfig, generate_dataset
from .errors import DegenerateDataError, DivergenceError
from .estimators import DEFAULT_CLIP, diff_in_means, ipw_hajek, ipw_ht
from .propensity import ConvLayerSpec, ConvNetSpec, TrainConfig, predict_batch, train
from .raster import SynthParams, downsample
from .rng import derive_seeds

ESTIMATOR_NAMES = ("dim", "ht", "hajek", "oracle_hajek")

REPORT_COLUMNS = (
    "kernel_width",
    "resolution_factor",
    "noise_sigma",
    "estimator",
    "abs_bias",
    "rmse",
    "rel_abs_bias",
    "rel_rmse",
    "n_reps",
    "mc_se",
)

SKIPPED_COLUMNS = ("kernel_width", "resolution_factor", "noise_sigma", "reason")


@dataclass(frozen=True)
class GridSpec:
    """Full description of one Monte Carlo study.

    The true kernel generates confounding at full resolution for every
    cell; ``est_widths`` are the kernel widths of the single-layer,
    single-filter propensity networks fit per cell. Cells whose width
    does not fit the downsampled image are skipped, not errors.
    """

    synth: SynthParams = SynthParams()
    true_filter: KernelFilter = KernelFilter.diagonal(9)
    est_widths: tuple[int, ...] = (5, 7, 9, 11, 13)
    resolution_factors: tuple[float, ...] = (1.0, 0.5, 0.25, 0.12)
    noise_sigmas: tuple[float, ...] = (0.0,)
    replicates: int = 200
    scenes_per_replicate: int = 500
    dgp: DGPConfig = DGPConfig()
    train: TrainConfig = TrainConfig()
    clip: tuple[float, float] | None = DEFAULT_CLIP
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "est_widths", tuple(int(w) for w in self.est_widths))
        object.__setattr__(self, "resolution_factors", tuple(float(f) for f in self.resolution_factors))
        object.__setattr__(self, "noise_sigmas", tuple(float(s) for s in self.noise_sigmas))
        problems = []
        if not self.est_widths:
            problems.append("est_widths must be non-empty")
        for w in self.est_widths:
            if w < 1 or w % 2 == 0:
                problems.append(f"est_widths entries must be positive odd, got {w}")
        if not self.resolution_factors:
            problems.append("resolution_factors must be non-empty")
        for f in self.resolution_factors:
            if not (0.0 < f <= 1.0):
                problems.append(f"resolution_factors entries must be in (0, 1], got {f}")
        if not self.noise_sigmas:
            problems.append("noise_sigmas must be non-empty")
        for s in self.noise_sigmas:
            if not (math.isfinite(s) and s >= 0):
                problems.append(f"noise_sigmas entries must be non-negative, got {s}")
        if not isinstance(self.replicates, int) or self.replicates < 1:
            problems.append(f"replicates must be a positive integer, got {self.replicates!r}")
        if not isinstance(self.scenes_per_replicate, int) or self.scenes_per_replicate < 2:
            problems.append(f"scenes_per_replicate must be at least 2, got {self.scenes_per_replicate!r}")
        tw = self.true_filter.width
        if tw > min(self.synth.height, self.synth.width):
            problems.append(
                f"true kernel width {tw} exceeds scene extent {self.synth.height}x{self.synth.width}"
            )
        if self.clip is not None:
            lo, hi = self.clip
            if not (0.0 < lo < hi < 1.0):
                problems.append(f"clip bounds must satisfy 0 < lo < hi < 1, got {self.clip!r}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class ReportRow:
    kernel_width: int
    resolution_factor: float
    noise_sigma: float
    estimator: str
    abs_bias: float
    rmse: float
    rel_abs_bias: float
    rel_rmse: float
    n_reps: int
    mc_se: float


@dataclass(frozen=True)
class SkippedCell:
    kernel_width: int
    resolution_factor: float
    noise_sigma: float
    reason: str


@dataclass(frozen=True)
class MetricSummary:
    abs_bias: float
    rmse: float
    rel_abs_bias: float
    rel_rmse: float
    n_reps: int
    mc_se: float


@dataclass(frozen=True)
class EvalReport:
    """All summary rows plus the cells that could not run."""

    rows: tuple[ReportRow, ...]
    skipped: tuple[SkippedCell, ...]

    def row(self, kernel_width: int, resolution_factor: float, noise_sigma: float, estimator: str) -> ReportRow:
        for r in self.rows:
            if (
                r.kernel_width == kernel_width
                and r.resolution_factor == resolution_factor
                and r.noise_sigma == noise_sigma
                and r.estimator == estimator
            ):
                return r
        raise KeyError(f"no row for ({kernel_width}, {resolution_factor}, {noise_sigma}, {estimator})")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow(
                    [
                        r.kernel_width,
                        repr(r.resolution_factor),
                        repr(r.noise_sigma),
                        r.estimator,
                        repr(r.abs_bias),
                        repr(r.rmse),
                        repr(r.rel_abs_bias),
                        repr(r.rel_rmse),
                        r.n_reps,
                        repr(r.mc_se),
                    ]
                )

    def write_skipped_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SKIPPED_COLUMNS)
            for s in self.skipped:
                w.writerow([s.kernel_width, repr(s.resolution_factor), repr(s.noise_sigma), s.reason])


def metrics(estimates, tau: float, baseline_estimates) -> MetricSummary:
    """Bias/RMSE summaries for one estimator in one cell.

    Relative columns divide by the same summaries of the baseline
    (difference-in-means) estimates from the same cell; they are NaN if
    the baseline summary is exactly zero. The Monte Carlo standard
    error is the sample standard deviation over the replicate spread
    divided by sqrt(replicates), NaN for a single replicate.
    """
    est = np.asarray(estimates, dtype=np.float64)
    base = np.asarray(baseline_estimates, dtype=np.float64)
    if est.ndim != 1 or est.size == 0 or base.ndim != 1 or base.size == 0:
        raise ValueError("estimates and baseline must be non-empty 1-d arrays")
    abs_bias = abs(float(est.mean()) - tau)
    rmse = float(np.sqrt(np.mean((est - tau) ** 2)))
    base_abs_bias = abs(float(base.mean()) - tau)
    base_rmse = float(np.sqrt(np.mean((base - tau) ** 2)))
    rel_abs_bias = abs_bias / base_abs_bias if base_abs_bias > 0 else float("nan")
    rel_rmse = rmse / base_rmse if base_rmse > 0 else float("nan")
    mc_se = float(est.std(ddof=1) / math.sqrt(est.size)) if est.size > 1 else float("nan")
    return MetricSummary(
        abs_bias=abs_bias,
        rmse=rmse,
        rel_abs_bias=rel_abs_bias,
        rel_rmse=rel_rmse,
        n_reps=est.size,
        mc_se=mc_se,
    )


def _downsampled_extent(spec: GridSpec, factor: float) -> tuple[int, int]:
    return math.ceil(factor * spec.synth.height), math.ceil(factor * spec.synth.width)


def _enumerate_cells(spec: GridSpec):
    """Full cell list with stable indices, split into valid and skipped."""
    valid = []
    skipped = []
    index = 0
    for width in spec.est_widths:
        for factor in spec.resolution_factors:
            for sigma in spec.noise_sigmas:
                h, w = _downsampled_extent(spec, factor)
                if width > min(h, w):
                    skipped.append(
                        SkippedCell(
                            kernel_width=width,
                            resolution_factor=factor,
                            noise_sigma=sigma,
                            reason=f"kernel width {width} exceeds downsampled extent {h}x{w}",
                        )
                    )
                else:
                    valid.append((index, width, factor, sigma))
                index += 1
    return valid, skipped


def run_replicate(spec: GridSpec, width: int, factor: float, sigma: float, cell_index: int, rep_index: int):
    """One replicate of one cell; returns estimator values or None.

    The four per-replicate streams (images, confounder noise, the
    structural draws, training) derive from the master seed keyed by
    (cell_index, rep_index). Divergent or degenerate replicates return
    None and are excluded from the cell summary.
    """
    s_img, s_conf, s_dgp, s_train = derive_seeds(spec.master_seed, cell_index, rep_index, count=4)
    conf = ConfounderSpec(filter=spec.true_filter, noise_sigma=sigma, seed=s_conf)
    dgp_cfg = replace(spec.dgp, seed=s_dgp)
    rasters, records = generate_dataset(
        spec.scenes_per_replicate, spec.synth, conf, dgp_cfg, image_seed=s_img
    )
    t = np.array([r.treatment for r in records])
    y = np.array([r.outcome for r in records])
    p_true = np.array([r.p_true for r in records])
    degraded = [downsample(r, factor) for r in rasters]
    net_spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=width),))
    cfg = replace(spec.train, seed=s_train)
    try:
        fitted = train(degraded, t, net_spec, cfg)
        pi_hat = predict_batch(fitted.model, degraded)
        return {
            "dim": diff_in_means(t, y),
            "ht": ipw_ht(t, y, pi_hat, clip=spec.clip),
            "hajek": ipw_hajek(t, y, pi_hat, clip=spec.clip),
            "oracle_hajek": ipw_hajek(t, y, p_true, clip=spec.clip),
        }
    except (DivergenceError, DegenerateDataError):
        return None


def _run_work_item(spec: GridSpec, item):
    cell_index, width, factor, sigma, rep_index = item
    return run_replicate(spec, width, factor, sigma, cell_index, rep_index)


def run_grid(spec: GridSpec, jobs: int = 1) -> EvalReport:
    """Run every valid cell for every replicate and summarize.

    With ``jobs`` above one the replicates run in worker processes;
    each (cell, replicate) is a pure function of the spec and its
    indices and results are aggregated in a fixed order, so the report
    is byte-identical for any worker count.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be at least 1, got {jobs}")
    valid, skipped = _enumerate_cells(spec)
    work = [
        (cell_index, width, factor, sigma, rep)
        for cell_index, width, factor, sigma in valid
        for rep in range(spec.replicates)
    ]
    runner = partial(_run_work_item, spec)
    if jobs == 1 or not work:
        results = [runner(item) for item in work]
    else:
        chunk = max(1, len(work) // (jobs * 8))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(runner, work, chunksize=chunk))
    rows = []
    skipped = list(skipped)
    per_rep = spec.replicates
    for slot, (cell_index, width, factor, sigma) in enumerate(valid):
        cell_results = [r for r in results[slot * per_rep : (slot + 1) * per_rep] if r is not None]
        if not cell_results:
            skipped.append(
                SkippedCell(
                    kernel_width=width,
                    resolution_factor=factor,
                    noise_sigma=sigma,
                    reason=f"all {per_rep} replicates diverged",
                )
            )
            continue
        baseline = np.array([c["dim"] for c in cell_results])
        for name in ESTIMATOR_NAMES:
            est = np.array([c[name] for c in cell_results])
            summary = metrics(est, spec.dgp.tau, baseline)
            rows.append(
                ReportRow(
                    kernel_width=width,
                    resolution_factor=factor,
                    noise_sigma=sigma,
                    estimator=name,
                    abs_bias=summary.abs_bias,
                    rmse=summary.rmse,
                    rel_abs_bias=summary.rel_abs_bias,
                    rel_rmse=summary.rel_rmse,
                    n_reps=summary.n_reps,
                    mc_se=summary.mc_se,
                )
            )
    return EvalReport(rows=tuple(rows), skipped=tuple(skipped))
