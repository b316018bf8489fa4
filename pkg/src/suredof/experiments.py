"""Experiment assembly: designs, signals and the seeded curve runner.

Reproduces the imaging experiments at desk scale: periodic Gaussian blur for
deconvolution and a subsampled blur for compressive sensing, with isotropic
total variation or any other supported penalty, sweeping the regularization
weight over replicated noisy observations.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import io as sio
from . import linop, penalty, risk
from .config import ConfigError, ExperimentConfig, lambda_grid
from .solver import SolveOptions


def sparse_signal(p, nonzeros, amplitude, rng):
    x = np.zeros(p)
    idx = rng.choice(p, size=nonzeros, replace=False)
    x[idx] = amplitude * rng.standard_normal(nonzeros)
    return x


def group_sparse_signal(blocks, active_blocks, amplitude, rng):
    x = np.zeros(blocks.size)
    chosen = rng.choice(blocks.nblocks, size=active_blocks, replace=False)
    for i in chosen:
        b = blocks.blocks[i]
        x[b] = amplitude * rng.standard_normal(b.size)
    return x


def piecewise_constant_image(height, width, regions, amplitude, rng):
    """Random axis-aligned rectangles stacked on a flat background; grayscale
    values land in [0, amplitude]."""
    img = np.zeros((height, width))
    for _ in range(regions):
        r0, r1 = np.sort(rng.integers(0, height, size=2) % height)
        c0, c1 = np.sort(rng.integers(0, width, size=2) % width)
        img[r0 : r1 + 1, c0 : c1 + 1] += rng.uniform(0.2, 1.0) * amplitude
    top = img.max()
    if top > 0:
        img *= amplitude / top
    return img


def build_design(cfg, rng):
    spec = cfg.section("design")
    kind = spec.get("kind")
    use_fft = bool(spec.get("use_fft", True))
    if kind in (None, "identity"):
        p = int(spec.get("p") or spec.get("height", 0) * spec.get("width", 0))
        if p <= 0:
            raise ConfigError("identity design needs p or height/width", "design")
        return linop.identity(p)
    if kind == "csv":
        return linop.dense(sio.read_matrix_csv(spec["path"]))
    if kind == "dense-gaussian":
        n, p = int(spec["n"]), int(spec["p"])
        return linop.dense(rng.standard_normal((n, p)) / np.sqrt(n))
    if kind in ("deconvolution", "compressive-sensing"):
        h, w = int(spec["height"]), int(spec["width"])
        kname = spec.get("kernel", "gaussian")
        if kname == "gaussian":
            kernel = linop.gaussian_kernel(float(spec.get("kernel_width", 1.5)))
        elif kname == "box":
            kernel = linop.box_kernel(int(spec.get("kernel_size", 3)))
        else:
            raise ConfigError(f"unknown kernel {kname!r}", "design.kernel")
        conv = linop.conv2d_periodic(h, w, kernel, use_fft=use_fft)
        if kind == "deconvolution":
            return conv
        ratio = float(spec.get("subsample_ratio", 0.5))
        p = h * w
        m = max(1, int(round(ratio * p)))
        idx = np.sort(rng.choice(p, size=m, replace=False))
        return linop.compose(linop.subsample(idx, p), conv)
    raise ConfigError(f"unknown design kind {kind!r}", "design.kind")


def build_signal(cfg, p, rng):
    spec = cfg.section("signal")
    kind = spec.get("kind")
    amplitude = float(spec.get("amplitude", 1.0))
    if kind == "pgm":
        img = sio.read_pgm(spec["path"])
        return img.ravel()
    if kind == "csv":
        return sio.read_vector_csv(spec["path"])
    if kind == "sparse":
        return sparse_signal(p, int(spec.get("nonzeros", max(1, p // 10))), amplitude, rng)
    if kind == "group-sparse":
        blocks = _blocks_from_spec(cfg, p)
        return group_sparse_signal(blocks, int(spec.get("nonzeros", 1)), amplitude, rng)
    if kind == "piecewise-constant":
        dspec = cfg.section("design")
        h, w = int(dspec.get("height", 0)), int(dspec.get("width", 0))
        if h * w != p:
            raise ConfigError("piecewise-constant signal needs a 2-D design", "signal")
        return piecewise_constant_image(h, w, int(spec.get("regions", 3)), amplitude, rng).ravel()
    raise ConfigError(f"unknown signal kind {kind!r}", "signal.kind")


def _blocks_from_spec(cfg, size):
    spec = cfg.section("penalty")
    raw = spec.get("blocks", "")
    if raw.startswith("uniform:"):
        return penalty.BlockStructure.uniform(size, int(raw.split(":", 1)[1]))
    if raw == "pairs":
        return penalty.BlockStructure(
            [np.arange(i, i + 2) for i in range(0, size, 2)], size)
    if raw:
        return penalty.BlockStructure(sio.read_blocks_csv(raw), size)
    raise ConfigError("penalty needs a blocks spec", "penalty.blocks")


def build_penalty_factory(cfg, X):
    """Returns ``factory(lam) -> Penalty`` for the configured penalty kind."""
    spec = cfg.section("penalty")
    kind = spec.get("kind")
    p = X.cols
    if kind == "lasso":
        return lambda lam: penalty.Lasso(lam)
    if kind == "linf":
        return lambda lam: penalty.LinfNorm(lam)
    if kind == "sphere-hinge":
        return lambda lam: penalty.SphereHinge(lam)
    if kind == "nuclear":
        p1, p2 = int(spec["p1"]), int(spec["p2"])
        if p1 * p2 != p:
            raise ConfigError("matrix shape does not match the design", "penalty")
        return lambda lam: penalty.NuclearNorm(p1, p2, lam)
    if kind == "group-lasso":
        blocks = _blocks_from_spec(cfg, p)
        return lambda lam: penalty.GroupLasso(blocks, lam)
    if kind in ("general-lasso", "general-group-lasso"):
        dstar_spec = spec.get("dstar", "")
        if dstar_spec == "grad2d":
            dspec = cfg.section("design")
            h, w = int(dspec["height"]), int(dspec["width"])
            dstar = linop.grad2d(h, w)
        elif dstar_spec:
            dstar = linop.dense(sio.read_matrix_csv(dstar_spec))
        else:
            raise ConfigError("analysis penalty needs a dstar spec", "penalty.dstar")
        if kind == "general-lasso":
            return lambda lam: penalty.GeneralLasso(dstar, lam)
        blocks = _blocks_from_spec(cfg, dstar.rows)
        return lambda lam: penalty.GeneralGroupLasso(dstar, blocks, lam)
    raise ConfigError(f"unknown penalty kind {kind!r}", "penalty.kind")


def solve_options(cfg):
    spec = cfg.section("solver")
    opts = SolveOptions()
    if "iterations" in spec:
        opts.iterations = int(spec["iterations"])
    if "kkt_tol" in spec:
        opts.kkt_tol = float(spec["kkt_tol"])
    if "gamma" in spec:
        opts.gamma = float(spec["gamma"])
    if "polish" in spec:
        opts.polish = bool(spec["polish"])
    if "krylov_tol" in spec:
        opts.krylov_tol = float(spec["krylov_tol"])
    if "krylov_maxit" in spec and spec["krylov_maxit"]:
        opts.krylov_maxit = int(spec["krylov_maxit"])
    return opts


_METHOD_NAMES = {"closed": "closed-form", "exact": "exact-trace", "mc": "mc", "fd": "fd"}


def divergence_settings(cfg):
    spec = cfg.section("divergence")
    method = spec.get("method", "closed")
    method = _METHOD_NAMES.get(method, method)
    return {
        "method": method,
        "probes": int(spec.get("probes", 100)),
        "eps": spec.get("eps"),
    }


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return sio.FLOAT_FMT % value


def write_curve_csv(path, curve):
    cols = ["lambda", "rep", "sure", "dof", "risk", "margin", "cinj"]
    with open(path, "w") as fh:
        for row in curve.rows:
            fh.write(",".join(_format_cell(row.get(c)) for c in cols))
            fh.write("\n")


def write_curve_aggregate_csv(path, curve):
    names = ["lambda", "sure_mean", "sure_std", "dof_mean", "dof_std",
             "risk_mean", "risk_std"]
    with open(path, "w") as fh:
        for li, lam in enumerate(curve.lambdas):
            cells = [sio.FLOAT_FMT % lam]
            for name in names[1:]:
                v = getattr(curve, name)[li]
                cells.append("" if np.isnan(v) else sio.FLOAT_FMT % v)
            fh.write(",".join(cells))
            fh.write("\n")


def run_experiment(cfg, out_dir=None):
    """Build the configured instance, sweep the weight grid over replicated
    noisy observations and write the per-cell CSV, the aggregate CSV and a
    run manifest carrying seeds and tool versions."""
    import scipy

    from . import __version__

    seed = int(cfg.scalar("seed"))
    sigma = float(cfg.scalar("sigma"))
    replications = int(cfg.scalar("replications"))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD0E)))
    X = build_design(cfg, rng)
    x0 = build_signal(cfg, X.cols, rng)
    if x0.size != X.cols:
        raise ConfigError("signal length does not match the design", "signal")
    mu0 = X.apply(x0)
    factory = build_penalty_factory(cfg, X)
    grid = lambda_grid(cfg)
    opts = solve_options(cfg)
    dset = divergence_settings(cfg)

    curve = risk.risk_curve(
        X, factory, grid, sigma, replications, seed,
        mu0=mu0, method=dset["method"], probes=dset["probes"],
        eps=dset["eps"], opts=opts,
    )

    out = cfg.section("output") or {}
    out_dir = out_dir or out.get("dir", ".")
    prefix = out.get("prefix", "curve")
    os.makedirs(out_dir, exist_ok=True)
    rows_path = os.path.join(out_dir, f"{prefix}_cells.csv")
    agg_path = os.path.join(out_dir, f"{prefix}_aggregate.csv")
    manifest_path = os.path.join(out_dir, f"{prefix}_manifest.json")
    write_curve_csv(rows_path, curve)
    write_curve_aggregate_csv(agg_path, curve)
    manifest = {
        "config": cfg.to_dict(),
        "seed": seed,
        "replication_seeds": [[seed, r] for r in range(replications)],
        "versions": {
            "suredof": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": {"cells": os.path.basename(rows_path),
                    "aggregate": os.path.basename(agg_path)},
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return curve, {"cells": rows_path, "aggregate": agg_path, "manifest": manifest_path}
