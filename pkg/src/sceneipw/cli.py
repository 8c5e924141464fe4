"""Command line entry points.

Subcommands: simulate, train, estimate, salience, grid. Every command
that writes output also writes ``run_meta.txt`` with the command name,
root seed, and config digest. Exit codes: 0 success, 2 bad config or
usage, 3 bad or missing data files, 4 training divergence. Outputs
written before a failure are removed.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import config as cfgmod
from .dgp import SceneRecord, generate_dataset
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DegenerateDataError,
    DivergenceError,
    ManifestFormatError,
    RasterFormatError,
)
from .estimators import balance_diagnostics, diff_in_means, ipw_hajek, ipw_ht
from .evaluation import run_grid
from .propensity import load_model, predict_batch, save_model, train
from .raster import Raster, load_raster, save_raster
from .rng import derive_seeds
from .salience import salience_map

MANIFEST_COLUMNS = ("scene_id", "raster_path", "t", "y", "u_true", "p_true", "cov1", "cov2")


def write_manifest(path, records, raster_paths, pi_hat=None) -> None:
    """Write the scene manifest CSV; raster paths are stored as given."""
    if len(records) != len(raster_paths):
        raise ValueError("one raster path per record required")
    header = list(MANIFEST_COLUMNS) + (["pi_hat"] if pi_hat is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, (rec, rp) in enumerate(zip(records, raster_paths)):
            row = [
                rec.scene_id,
                rp,
                rec.treatment,
                repr(rec.outcome),
                repr(rec.u_true),
                repr(rec.p_true),
                repr(rec.cov1),
                repr(rec.cov2),
            ]
            if pi_hat is not None:
                row.append(repr(float(pi_hat[i])))
            w.writerow(row)


def read_manifest(path):
    """Read a manifest CSV; returns (records, raster_paths, pi_hat or None)."""
    try:
        fh = open(path, "r", newline="")
    except OSError as exc:
        raise ManifestFormatError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestFormatError(f"{path}: empty file") from None
        has_pi = header == list(MANIFEST_COLUMNS) + ["pi_hat"]
        if not has_pi and header != list(MANIFEST_COLUMNS):
            raise ManifestFormatError(f"{path}: unexpected header {header!r}")
        records, paths, pis = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ManifestFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rec = SceneRecord(
                    scene_id=int(row[0]),
                    treatment=int(row[2]),
                    outcome=float(row[3]),
                    u_true=float(row[4]),
                    p_true=float(row[5]),
                    cov1=float(row[6]),
                    cov2=float(row[7]),
                )
            except ValueError as exc:
                raise ManifestFormatError(f"{path}: line {lineno}: {exc}") from exc
            if rec.treatment not in (0, 1):
                raise ManifestFormatError(f"{path}: line {lineno}: treatment must be 0 or 1")
            vals = (rec.outcome, rec.u_true, rec.p_true, rec.cov1, rec.cov2)
            if not all(math.isfinite(v) for v in vals):
                raise ManifestFormatError(f"{path}: line {lineno}: non-finite value")
            records.append(rec)
            paths.append(row[1])
            if has_pi:
                try:
                    p = float(row[8])
                except ValueError as exc:
                    raise ManifestFormatError(f"{path}: line {lineno}: {exc}") from exc
                if not (0.0 <= p <= 1.0):
                    raise ManifestFormatError(f"{path}: line {lineno}: pi_hat outside [0, 1]")
                pis.append(p)
    if not records:
        raise ManifestFormatError(f"{path}: no scenes")
    return records, paths, (np.array(pis) if has_pi else None)


def _load_scene_files(manifest_path, rel_paths):
    base = os.path.dirname(os.path.abspath(manifest_path))
    rasters = []
    for rp in rel_paths:
        full = rp if os.path.isabs(rp) else os.path.join(base, rp)
        try:
            rasters.append(load_raster(full))
        except OSError as exc:
            raise RasterFormatError(f"{full}: {exc}") from exc
    return rasters


class _Outputs:
    """Tracks files written by a command so failures can clean up."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.created = []

    def path(self, *parts):
        p = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.created.append(p)
        return p

    def discard_all(self):
        for p in reversed(self.created):
            try:
                os.unlink(p)
            except OSError:
                pass


def _write_run_meta(out: _Outputs, command: str, seed: int, config_path) -> None:
    digest = cfgmod.config_digest(config_path) if config_path else "none"
    from . import __version__

    with open(out.path("run_meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"command={command}\n")
        fh.write(f"seed={seed}\n")
        fh.write(f"config_sha256={digest}\n")
        fh.write(f"package_version={__version__}\n")


def _write_keyvals(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in pairs:
            fh.write(f"{k}={v}\n")


def _cmd_simulate(args, out: _Outputs) -> None:
    cfg = cfgmod.load_config(args.config)
    image_seed, conf_seed, dgp_seed = derive_seeds(args.seed, 0, count=3)
    c = cfgmod._Collect()
    synth = c.build("synth", cfgmod.build_synth, cfg)
    kern = c.build("confounder", cfgmod.build_true_filter, cfg)
    dgp = c.build("dgp", cfgmod.build_dgp, cfg, dgp_seed)
    n = cfg["scenes.count"]
    if n < 2:
        c.problems.append(f"scenes.count must be at least 2, got {n}")
    c.finish()
    from .confounder import ConfounderSpec

    conf = ConfounderSpec(filter=kern, noise_sigma=cfg["confounder.noise_sigma"], seed=conf_seed)
    rasters, records = generate_dataset(n, synth, conf, dgp, image_seed=image_seed)
    rel_paths = []
    for rec, raster in zip(records, rasters):
        rel = os.path.join("rasters", f"scene_{rec.scene_id:05d}.rst")
        save_raster(out.path(rel), raster)
        rel_paths.append(rel)
    write_manifest(out.path("manifest.csv"), records, rel_paths)
    _write_keyvals(
        out.path("groundtruth.txt"),
        [
            ("tau", repr(dgp.tau)),
            ("beta", repr(dgp.beta)),
            ("gamma", repr(dgp.gamma)),
            ("image_seed", image_seed),
            ("confounder_seed", conf_seed),
            ("dgp_seed", dgp_seed),
        ],
    )
    _write_run_meta(out, "simulate", args.seed, args.config)
    print(f"wrote {n} scenes to {out.out_dir}")


def _cmd_train(args, out: _Outputs) -> None:
    cfg = cfgmod.load_config(args.config)
    train_seed = derive_seeds(args.seed, 1)[0]
    c = cfgmod._Collect()
    net_spec = c.build("net", cfgmod.build_net, cfg)
    train_cfg = c.build("train", cfgmod.build_train, cfg, train_seed)
    c.finish()
    records, rel_paths, _ = read_manifest(args.data)
    rasters = _load_scene_files(args.data, rel_paths)
    t = np.array([r.treatment for r in records])
    result = train(rasters, t, net_spec, train_cfg)
    save_model(out.path("model.ckpt"), result.model)
    with open(out.path("loss_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(result.loss_trace):
            w.writerow([i, repr(float(loss))])
    _write_run_meta(out, "train", args.seed, args.config)
    print(f"trained {result.model.params.size} parameters, final loss {result.loss_trace[-1]:.6f}")


def _cmd_estimate(args, out: _Outputs) -> None:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.parse_config("")
    clip = cfg["estimate.clip"]
    records, rel_paths, pi_file = read_manifest(args.data)
    t = np.array([r.treatment for r in records])
    y = np.array([r.outcome for r in records])
    p_true = np.array([r.p_true for r in records])
    if args.model:
        model = load_model(args.model)
        rasters = _load_scene_files(args.data, rel_paths)
        pi_hat = predict_batch(model, rasters)
    elif pi_file is not None:
        pi_hat = pi_file
    else:
        raise ConfigError("no propensity source: pass --model or provide a pi_hat manifest column")
    estimates = [
        ("dim", diff_in_means(t, y)),
        ("ht", ipw_ht(t, y, pi_hat, clip=clip)),
        ("hajek", ipw_hajek(t, y, pi_hat, clip=clip)),
        ("oracle_hajek", ipw_hajek(t, y, p_true, clip=clip)),
    ]
    with open(out.path("estimates.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "estimate"])
        for name, value in estimates:
            w.writerow([name, repr(value)])
    x = np.column_stack([[r.cov1 for r in records], [r.cov2 for r in records]])
    report = balance_diagnostics(t, x, pi_hat, clip=clip)
    with open(out.path("balance.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "raw_diff", "weighted_diff"])
        for j, name in enumerate(("cov1", "cov2")):
            w.writerow([name, repr(float(report.raw_diff[j])), repr(float(report.weighted_diff[j]))])
    write_manifest(out.path("manifest_scored.csv"), records, rel_paths, pi_hat=pi_hat)
    _write_run_meta(out, "estimate", args.seed, args.config)
    for name, value in estimates:
        print(f"{name}: {value:.6f}")


def _cmd_salience(args, out: _Outputs) -> None:
    model = load_model(args.model)
    raster = load_raster(args.scene)
    smap = salience_map(model, raster)
    save_raster(out.path("salience.rst"), Raster(smap[:, :, None]))
    _write_run_meta(out, "salience", args.seed, None)
    print(f"wrote salience map ({smap.shape[0]}x{smap.shape[1]}) to {out.out_dir}")


def _cmd_grid(args, out: _Outputs) -> None:
    cfg = cfgmod.load_config(args.config)
    spec = cfgmod.build_grid(cfg, master_seed=args.seed)
    report = run_grid(spec, jobs=args.jobs)
    report.write_csv(out.path("results.csv"))
    report.write_skipped_csv(out.path("skipped_cells.csv"))
    _write_run_meta(out, "grid", args.seed, args.config)
    print(f"wrote {len(report.rows)} summary rows ({len(report.skipped)} cells skipped) to {out.out_dir}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sceneipw", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, config_required):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="root random seed")
        if config_required is not None:
            p.add_argument("--config", required=config_required, help="key=value config file")
        return p

    add("simulate", "generate a synthetic scene collection", True)
    p = add("train", "fit the propensity network on a manifest", True)
    p.add_argument("--data", required=True, help="manifest CSV from simulate")
    p = add("estimate", "compute treatment effect estimates", False)
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--model", default=None, help="checkpoint from train")
    p = add("salience", "pixel salience map for one scene", None)
    p.add_argument("--model", required=True, help="checkpoint from train")
    p.add_argument("--scene", required=True, help="raster file")
    p = add("grid", "run the Monte Carlo condition grid", True)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    return parser


_HANDLERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "estimate": _cmd_estimate,
    "salience": _cmd_salience,
    "grid": _cmd_grid,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.seed < 0 or args.seed >= 2**64:
        print("error: --seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return 2
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    if not hasattr(args, "config"):
        args.config = None
    out = _Outputs(args.out)
    try:
        os.makedirs(args.out, exist_ok=True)
        _HANDLERS[args.command](args, out)
    except ConfigError as exc:
        out.discard_all()
        print(f"config error:\n{exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        out.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RasterFormatError, CheckpointFormatError, ManifestFormatError, DegenerateDataError, FileNotFoundError) as exc:
        out.discard_all()
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        out.discard_all()
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
