"""Command line front end.

Subcommands: ``solve``, ``dof``, ``sure``, ``curve``, ``repair`` and
``check``.  Instances come from a JSON config file; the most common keys can
be overridden by flags.  Exit codes: 0 on success, 1 on solver failure,
2 on configuration errors.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io as sio
from . import experiments, risk, sensitivity, solver
from .checks import run_checks
from .config import ConfigError, ExperimentConfig


def _load_config(args):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig.from_dict({})
    for path, value in getattr(args, "_overrides", []):
        cfg = cfg.override(path, value)
    return cfg


def _add_common(parser):
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--iters", type=int, help="splitting iteration budget")
    parser.add_argument("--kkt-tol", type=float, help="optimality tolerance")
    parser.add_argument("--krylov-tol", type=float, help="saddle solve tolerance")
    parser.add_argument("--krylov-maxit", type=int, help="saddle iteration cap")
    parser.add_argument("--weight", type=float, help="penalty weight (single solve)")
    parser.add_argument("--y-csv", help="observation vector as CSV")
    parser.add_argument("--seed", type=int, help="seed override")


def _collect_overrides(args):
    pairs = []
    if args.iters is not None:
        pairs.append(("solver.iterations", args.iters))
    if args.kkt_tol is not None:
        pairs.append(("solver.kkt_tol", args.kkt_tol))
    if args.krylov_tol is not None:
        pairs.append(("solver.krylov_tol", args.krylov_tol))
    if args.krylov_maxit is not None:
        pairs.append(("solver.krylov_maxit", args.krylov_maxit))
    if args.seed is not None:
        pairs.append(("seed", args.seed))
    args._overrides = pairs


def _build_instance(cfg, args):
    """Design, penalty and observation for the single-solve subcommands."""
    seed = int(cfg.scalar("seed"))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD0E)))
    X = experiments.build_design(cfg, rng)
    factory = experiments.build_penalty_factory(cfg, X)
    if args.weight is not None:
        lam = float(args.weight)
    else:
        from .config import lambda_grid

        lam = float(lambda_grid(cfg)[0])
    J = factory(lam)
    if args.y_csv:
        y = sio.read_vector_csv(args.y_csv)
    else:
        x0 = experiments.build_signal(cfg, X.cols, rng)
        sigma = float(cfg.scalar("sigma"))
        noise_rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
        y = X.apply(x0) + sigma * noise_rng.standard_normal(X.rows)
    if y.size != X.rows:
        raise ConfigError("observation length does not match the design")
    return X, J, y, experiments.solve_options(cfg)


def _report_solve(res):
    print(f"converged        {res.converged}")
    print(f"iterations       {res.iterations}")
    print(f"objective        {res.objective:.12g}")
    print(f"kkt residual     {res.kkt_residual:.3e}")
    print(f"margin           {res.certificate_margin:.6g}")
    print(f"manifold         {res.active.manifold_id}")
    print(f"tangent dim      {res.active.dim}")


def cmd_solve(args):
    cfg = _load_config(args)
    X, J, y, opts = _build_instance(cfg, args)
    res = solver.solve(X, solver.squared_loss(y), J, opts=opts)
    _report_solve(res)
    if args.out_x:
        sio.write_vector_csv(args.out_x, res.x_hat)
        print(f"solution written to {args.out_x}")
    return 0 if res.converged else 1


def cmd_dof(args):
    cfg = _load_config(args)
    X, J, y, opts = _build_instance(cfg, args)
    loss = solver.squared_loss(y)
    res = solver.solve(X, loss, J, opts=opts)
    if not res.converged:
        _report_solve(res)
        return 1
    if args.repair:
        res, _ = sensitivity.ensure_injective(X, loss, J, res)
    method = experiments._METHOD_NAMES.get(args.method, args.method)
    rep = sensitivity.divergence(
        X, loss, J, res, method=method, probes=args.probes,
        seed=args.probe_seed, eps=args.eps, opts=opts)
    print(f"divergence       {rep.divergence:.12g}")
    print(f"method           {rep.method}")
    if rep.mc_std_error is not None:
        print(f"std error        {rep.mc_std_error:.3e}")
    print(f"cinj             {rep.cinj}")
    print(f"min eigenvalue   {rep.min_restricted_eigenvalue:.3e}")
    print(f"tangent dim      {rep.tangent_dim}")
    print(f"margin           {rep.certificate_margin:.6g}")
    return 0


def cmd_sure(args):
    cfg = _load_config(args)
    X, J, y, opts = _build_instance(cfg, args)
    loss = solver.squared_loss(y)
    res = solver.solve(X, loss, J, opts=opts)
    if not res.converged:
        _report_solve(res)
        return 1
    res, _ = sensitivity.ensure_injective(X, loss, J, res)
    method = experiments._METHOD_NAMES.get(args.method, args.method)
    rep = sensitivity.divergence(X, loss, J, res, method=method,
                                 probes=args.probes, seed=args.probe_seed,
                                 eps=args.eps, opts=opts)
    sigma = float(cfg.scalar("sigma"))
    link = risk.LinkMap.identity()
    value = risk.sure_gaussian(y, res.mu_hat, link, rep.divergence, sigma)
    resid = float(np.sum((y - res.mu_hat) ** 2))
    print(f"sure             {value:.12g}")
    print(f"residual term    {resid:.12g}")
    print(f"dof term         {2 * sigma**2 * rep.divergence:.12g}")
    print(f"noise term       {-y.size * sigma**2:.12g}")
    print(f"dof              {rep.divergence:.12g} ({rep.method})")
    return 0


def cmd_curve(args):
    cfg = _load_config(args)
    curve, paths = experiments.run_experiment(cfg, out_dir=args.out_dir)
    print(f"cells            {paths['cells']}")
    print(f"aggregate        {paths['aggregate']}")
    print(f"manifest         {paths['manifest']}")
    missing = sum(1 for r in curve.rows if not r["ok"])
    print(f"rows             {len(curve.rows)} ({missing} missing)")
    return 0 if missing == 0 else 1


def cmd_repair(args):
    cfg = _load_config(args)
    X, J, y, opts = _build_instance(cfg, args)
    loss = solver.squared_loss(y)
    res = solver.solve(X, loss, J, opts=opts)
    if not res.converged:
        _report_solve(res)
        return 1
    before, _ = sensitivity.check_restricted_pd(X, res.active)
    repaired = sensitivity.repair_solution(X, loss, J, res)
    after, eig = sensitivity.check_restricted_pd(X, repaired.active)
    print(f"cinj before      {before}")
    print(f"cinj after       {after} (min eigenvalue {eig:.3e})")
    print(f"tangent dim      {res.active.dim} -> {repaired.active.dim}")
    print(f"objective drift  {abs(repaired.objective - res.objective):.3e}")
    if args.out_x:
        sio.write_vector_csv(args.out_x, repaired.x_hat)
        print(f"repaired x written to {args.out_x}")
    return 0


def cmd_check(args):
    results = run_checks(level=args.level, seed=args.seed or 0, only=args.only)
    failed = 0
    for r in results:
        line = "PASS" if r.passed else "FAIL"
        print(f"{line}  {r.name:<16} seed={r.seed}  {r.detail}  [{r.elapsed:.1f}s]")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="suredof",
        description="Partly-smooth regularized regression with unbiased "
                    "risk estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve one regularized instance")
    _add_common(p_solve)
    p_solve.add_argument("--out-x", help="write the solution vector as CSV")
    p_solve.set_defaults(func=cmd_solve)

    p_dof = sub.add_parser("dof", help="divergence / degrees of freedom")
    _add_common(p_dof)
    p_dof.add_argument("--method", default="closed",
                       choices=["closed", "exact", "mc", "fd"])
    p_dof.add_argument("--probes", type=int, default=100)
    p_dof.add_argument("--probe-seed", type=int, default=0, dest="probe_seed")
    p_dof.add_argument("--eps", type=float, default=None)
    p_dof.add_argument("--no-repair", dest="repair", action="store_false")
    p_dof.set_defaults(func=cmd_dof, repair=True)

    p_sure = sub.add_parser("sure", help="unbiased risk estimate at one weight")
    _add_common(p_sure)
    p_sure.add_argument("--method", default="closed",
                        choices=["closed", "exact", "mc", "fd"])
    p_sure.add_argument("--probes", type=int, default=100)
    p_sure.add_argument("--probe-seed", type=int, default=0, dest="probe_seed")
    p_sure.add_argument("--eps", type=float, default=None)
    p_sure.set_defaults(func=cmd_sure)

    p_curve = sub.add_parser("curve", help="risk curve over a weight grid")
    _add_common(p_curve)
    p_curve.add_argument("--out-dir", help="output directory override")
    p_curve.set_defaults(func=cmd_curve)

    p_rep = sub.add_parser("repair", help="restore restricted injectivity")
    _add_common(p_rep)
    p_rep.add_argument("--out-x", help="write the repaired vector as CSV")
    p_rep.set_defaults(func=cmd_repair)

    p_check = sub.add_parser("check", help="run the invariant suites")
    p_check.add_argument("--level", default="fast", choices=["fast", "full"])
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--only", help="run a single named check")
    p_check.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "iters"):
        _collect_overrides(args)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (solver.SaddleSolveError, sensitivity.RestrictedInjectivityError,
            RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
