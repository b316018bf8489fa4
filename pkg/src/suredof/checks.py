"""Seeded invariant suites runnable from the command line.

``fast`` covers the cheap structural invariants (adjoints, proximity
operators, closed form versus exact trace, the saddle system); ``full`` adds
the Monte-Carlo unbiasedness checks.  Every check draws its data from an
explicit seed so a failure replays deterministically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import linop, penalty, risk, sensitivity, solver


@dataclass
class CheckResult:
    name: str
    passed: bool
    seed: int
    detail: str
    elapsed: float


def _operators(rng):
    return [
        linop.identity(6),
        linop.dense(rng.standard_normal((5, 8))),
        linop.grad2d(4, 5),
        linop.subsample(np.sort(rng.choice(12, 5, replace=False)), 12),
        linop.conv2d_periodic(4, 4, linop.gaussian_kernel(0.9)),
        linop.block_extractor([[0, 1], [2, 3], [4, 5]], 6),
        linop.compose(linop.subsample([0, 3, 7], 16),
                      linop.conv2d_periodic(4, 4, linop.gaussian_kernel(0.7))),
    ]


def _sparse_coeffs(rng, p):
    x = np.zeros(p)
    x[rng.choice(p, 4, replace=False)] = 2.0 * rng.standard_normal(4)
    return x


def check_adjoints(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for A in _operators(rng):
        for _ in range(100):
            x = rng.standard_normal(A.cols)
            z = rng.standard_normal(A.rows)
            ax = A.apply(x)
            lhs = float(ax @ z)
            rhs = float(x @ A.adjoint_apply(z))
            denom = max(np.linalg.norm(ax) * np.linalg.norm(z), 1e-30)
            worst = max(worst, abs(lhs - rhs) / denom)
    return worst <= 1e-10, f"worst relative adjoint defect {worst:.2e}"


def check_prox(seed=0):
    rng = np.random.default_rng(seed)
    penalties = [
        penalty.Lasso(0.8),
        penalty.GroupLasso(penalty.BlockStructure.uniform(12, 3), 0.6),
        penalty.LinfNorm(1.4),
        penalty.NuclearNorm(3, 4, 0.5),
        penalty.SphereHinge(0.9),
    ]
    worst = 0.0
    for J in penalties:
        p = 12
        for _ in range(40):
            u = rng.standard_normal(p)
            v = rng.standard_normal(p)
            du = np.linalg.norm(J.prox(u, 1.0) - J.prox(v, 1.0))
            worst = max(worst, du - np.linalg.norm(u - v))
    analytic = (
        np.allclose(penalty.Lasso(1.0).prox(np.array([3.0, -0.5, 0.0]), 1.0), [2, 0, 0])
        and np.allclose(
            penalty.GroupLasso(penalty.BlockStructure.uniform(2, 2), 1.0)
            .prox(np.array([3.0, 4.0]), 1.0), [2.4, 3.2])
        and np.allclose(penalty.LinfNorm(1.0).prox(np.array([0.3, -0.2]), 1.0), [0, 0])
    )
    return (worst <= 1e-10 and analytic), \
        f"nonexpansiveness excess {worst:.2e}, analytic cases {'ok' if analytic else 'BAD'}"


def check_closed_vs_exact(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    # lasso
    X = linop.dense(rng.standard_normal((12, 20)) / np.sqrt(12))
    y = X.apply(_sparse_coeffs(rng, 20)) + 0.3 * rng.standard_normal(12)
    for J in [penalty.Lasso(0.4),
              penalty.GroupLasso(penalty.BlockStructure.uniform(20, 4), 0.5),
              penalty.LinfNorm(2.0)]:
        loss = solver.squared_loss(y)
        res = solver.solve(X, loss, J)
        res, ok = sensitivity.ensure_injective(X, loss, J, res)
        if not ok:
            continue
        cf = sensitivity.divergence(X, loss, J, res, method="closed-form").divergence
        ex = sensitivity.divergence(X, loss, J, res, method="exact-trace").divergence
        worst = max(worst, abs(cf - ex))
    return worst <= 1e-6, f"max |closed - exact| = {worst:.2e}"


def check_saddle(seed=0):
    rng = np.random.default_rng(seed)
    h = w = 6
    p = h * w
    G = linop.grad2d(h, w)
    bs = penalty.BlockStructure.pixel_pairs(p)
    img = np.zeros((h, w))
    img[1:4, 2:5] = 8.0
    y = img.ravel() + 0.2 * rng.standard_normal(p)
    X = linop.identity(p)
    J = penalty.GeneralGroupLasso(G, bs, 0.8)
    res = solver.solve(X, solver.squared_loss(y), J)
    rhs = X.adjoint_apply(rng.standard_normal(p))
    nu_d = solver.solve_saddle(X, res.active, rhs, method="dense")
    nu_k = solver.solve_saddle(X, res.active, rhs, method="krylov", tol=1e-7)
    rel = np.linalg.norm(nu_d - nu_k) / max(np.linalg.norm(nu_d), 1e-30)
    r1, r2 = solver.saddle_residuals(X, res.active, rhs, nu_k)
    rres = (r1 + r2) / max(np.linalg.norm(rhs), 1e-30)
    return (rel <= 1e-6 and rres <= 1e-6), \
        f"dense/krylov gap {rel:.2e}, block residuals {rres:.2e}"


def check_jacobian_fd(seed=0):
    rng = np.random.default_rng(seed)
    n, p = 14, 10
    X = linop.dense(rng.standard_normal((n, p)) / np.sqrt(n))
    x0 = _sparse_coeffs(rng, p)
    y = X.apply(x0) + 0.25 * rng.standard_normal(n)
    J = penalty.Lasso(0.3)
    loss = solver.squared_loss(y)
    res = solver.solve(X, loss, J)
    M = res.active
    worst = 0.0
    eps = 1e-6 * np.linalg.norm(y)
    for k in range(5):
        dy = np.random.default_rng(seed + 100 + k).standard_normal(n)
        dy /= np.linalg.norm(dy)
        jd = sensitivity.solution_jacobian_apply(X, M, dy)
        pert = solver.solve(X, solver.squared_loss(y + eps * dy), J, warm=res)
        fd = (pert.x_hat - res.x_hat) / eps
        worst = max(worst, np.linalg.norm(fd - jd) / max(np.linalg.norm(jd), 1e-30))
    return worst <= 1e-4, f"max relative jacobian error {worst:.2e}"


def check_sure_unbiased(seed=0, reps=2000):
    rng = np.random.default_rng(seed)
    n, p = 10, 20
    X = linop.dense(rng.standard_normal((n, p)) / np.sqrt(n))
    x0 = _sparse_coeffs(rng, p)
    mu0 = X.apply(x0)
    J = penalty.Lasso(1.0)
    link = risk.LinkMap.identity()
    sures = np.empty(reps)
    risks = np.empty(reps)
    for r in range(reps):
        rr = np.random.default_rng(np.random.SeedSequence((seed, r)))
        y = mu0 + rr.standard_normal(n)
        loss = solver.squared_loss(y)
        res = solver.solve(X, loss, J)
        res, _ = sensitivity.ensure_injective(X, loss, J, res)
        rep = sensitivity.divergence(X, loss, J, res, method="closed-form")
        sures[r] = risk.sure_gaussian(y, res.mu_hat, link, rep.divergence, 1.0)
        risks[r] = np.sum((res.mu_hat - mu0) ** 2)
    gap = abs(sures.mean() - risks.mean())
    band = 3.0 * np.sqrt(sures.var(ddof=1) / reps + risks.var(ddof=1) / reps)
    return gap <= band, f"|mean SURE - mean risk| = {gap:.3f} vs 3 se = {band:.3f}"


def check_mc_scaling(seed=0):
    rng = np.random.default_rng(seed)
    n = 24
    X = linop.dense(np.linalg.qr(rng.standard_normal((n, n)))[0])
    y = rng.standard_normal(n)
    J = penalty.Lasso(0.0)
    loss = solver.squared_loss(y)
    res = solver.solve(X, loss, J)
    ks = [100, 1000, 10000]
    ses = [sensitivity.divergence(X, loss, J, res, method="mc", probes=k,
                                  seed=seed).mc_std_error for k in ks]
    slope = np.polyfit(np.log(ks), np.log(ses), 1)[0]
    return abs(slope + 0.5) <= 0.1, f"std-error scaling slope {slope:.3f}"


_FAST = [
    ("adjoints", check_adjoints),
    ("prox", check_prox),
    ("closed-vs-exact", check_closed_vs_exact),
    ("saddle", check_saddle),
    ("jacobian-fd", check_jacobian_fd),
]
_FULL = _FAST + [
    ("mc-scaling", check_mc_scaling),
    ("sure-unbiased", check_sure_unbiased),
]


def run_checks(level="fast", seed=0, only=None):
    if level not in ("fast", "full"):
        raise ValueError("level must be 'fast' or 'full'")
    suite = _FAST if level == "fast" else _FULL
    if only:
        suite = [(n, f) for n, f in suite if n == only]
        if not suite:
            raise ValueError(f"unknown check {only!r}")
    results = []
    for name, fn in suite:
        t0 = time.time()
        try:
            passed, detail = fn(seed=seed)
        except Exception as exc:
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), seed, detail, time.time() - t0))
    return results
