"""Unbiased risk estimation for the prediction of regularized regression.

Covers the Gaussian model with a Lipschitz diagonal link (SURE) and the
continuous exponential family (GSURE), plus a replicated risk-curve runner
that sweeps the regularization weight and aggregates SURE, degrees of
freedom and, when the true prediction is known, the empirical risk.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import sensitivity
from .solver import SolveOptions, solve, squared_loss


@dataclass(frozen=True)
class LinkMap:
    """Diagonal link applied to the prediction; identity by default."""

    kind: str = "identity"
    h: object = None
    h_prime: object = None

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def diagonal(cls, h, h_prime):
        return cls(kind="user-diagonal", h=h, h_prime=h_prime)

    @property
    def is_identity(self):
        return self.kind == "identity"

    def apply(self, mu):
        mu = np.asarray(mu, dtype=float)
        return mu.copy() if self.is_identity else np.asarray(self.h(mu), dtype=float)

    def jacobian_diag(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.is_identity:
            return np.ones_like(mu)
        return np.asarray(self.h_prime(mu), dtype=float)


@dataclass(frozen=True)
class GlmSpec:
    """Continuous exponential-family description: the gradient of the log
    base measure, and optionally the squared norm of the true prediction
    (only an additive constant of the risk estimate)."""

    grad_log_B: object
    mu0_sq_norm: float = None


def sure_gaussian(y, mu_hat, link, dof_hat, sigma):
    """Unbiased risk estimate under y ~ N(h(mu0), sigma^2 I):
    ||y - h(mu_hat)||^2 + 2 sigma^2 dof - n sigma^2, where dof carries the
    link Jacobian inside the trace."""
    y = np.asarray(y, dtype=float)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = y - link.apply(mu_hat)
    return float(r @ r + 2.0 * sigma**2 * dof_hat - y.size * sigma**2)


def sure_glm(y, mu_hat, dof_hat, glm):
    """Risk estimate for a continuous exponential family.

    Built from the integration-by-parts identity of the family: with
    b = grad log B(y), the estimate is ||b + mu_hat||^2 + 2 dof
    - (||b||^2 - ||mu0||^2).  When the ||mu0||^2 constant is unknown the
    whole trailing parenthesis is dropped; the estimate is then shifted by
    a data-plus-constant term that does not affect weight selection.
    """
    y = np.asarray(y, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    b = np.asarray(glm.grad_log_B(y), dtype=float)
    value = float(np.sum((b + mu_hat) ** 2) + 2.0 * dof_hat)
    if glm.mu0_sq_norm is not None:
        value -= float(b @ b) - float(glm.mu0_sq_norm)
    return value


def yuan_lin_dof(coeffs, blocks, active):
    """Orthonormal-design group shrinkage DOF formula, as classically
    written: the number of coordinates in active blocks minus
    sum((|b| - 1) / ||c_b||) over the active blocks of the coefficient
    vector c."""
    coeffs = np.asarray(coeffs, dtype=float)
    norms = blocks.norms(coeffs)
    active = np.asarray(active, dtype=bool)
    count = sum(len(blocks.blocks[i]) for i in np.flatnonzero(active))
    corr = sum((len(blocks.blocks[i]) - 1) / norms[i] for i in np.flatnonzero(active))
    return float(count - corr)


@dataclass
class RiskCurve:
    lambdas: np.ndarray
    replications: int
    seed: int
    method: str
    rows: list = field(default_factory=list)
    sure_mean: np.ndarray = None
    sure_std: np.ndarray = None
    dof_mean: np.ndarray = None
    dof_std: np.ndarray = None
    risk_mean: np.ndarray = None
    risk_std: np.ndarray = None

    def aggregate(self):
        L = len(self.lambdas)
        stats = {name: np.full(L, np.nan) for name in
                 ("sure_mean", "sure_std", "dof_mean", "dof_std", "risk_mean", "risk_std")}
        for li in range(L):
            cells = [r for r in self.rows if r["lambda_index"] == li and r["ok"]]
            if not cells:
                continue
            sure = np.array([r["sure"] for r in cells])
            dof = np.array([r["dof"] for r in cells])
            stats["sure_mean"][li] = sure.mean()
            stats["sure_std"][li] = sure.std(ddof=1) if sure.size > 1 else 0.0
            stats["dof_mean"][li] = dof.mean()
            stats["dof_std"][li] = dof.std(ddof=1) if dof.size > 1 else 0.0
            risks = [r["risk"] for r in cells if r["risk"] is not None]
            if risks:
                risks = np.array(risks)
                stats["risk_mean"][li] = risks.mean()
                stats["risk_std"][li] = risks.std(ddof=1) if risks.size > 1 else 0.0
        for name, arr in stats.items():
            setattr(self, name, arr)
        return self


def _thread_count():
    raw = os.environ.get("SUREDOF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def risk_curve(X, penalty_factory, lambdas, sigma, replications, seed,
               mu0=None, method="closed-form", probes=100, opts=None,
               link=None, repair=True, eps=None):
    """Sweep the weight grid over fresh noisy replications.

    ``penalty_factory(lam)`` builds the penalty at a given weight; the grid
    must be sorted ascending and solutions warm-start along it.  Each
    replication draws y = h(mu0) + sigma * noise with a per-replication
    seed derived from ``seed``.  Solver failures leave missing cells.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) < 0):
        raise ValueError("the weight grid must be sorted ascending")
    if mu0 is None:
        raise ValueError("risk_curve generates observations and needs mu0")
    mu0 = np.asarray(mu0, dtype=float)
    link = link or LinkMap.identity()
    opts = opts or SolveOptions()
    h_mu0 = link.apply(mu0)

    def run_rep(rep):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(rep))))
        y = h_mu0 + sigma * rng.standard_normal(mu0.size)
        loss = squared_loss(y)
        rows = []
        prev = None
        for li, lam in enumerate(lambdas):
            J = penalty_factory(float(lam))
            row = {"lambda": float(lam), "lambda_index": li, "rep": rep, "ok": False,
                   "sure": None, "dof": None, "risk": None, "margin": None, "cinj": None}
            try:
                res = solve(X, loss, J, opts=opts, warm=prev)
                if not res.converged:
                    rows.append(row)
                    prev = res
                    continue
                prev = res
                cinj = True
                if repair:
                    res, cinj = sensitivity.ensure_injective(X, loss, J, res)
                cell_seed = int(np.random.SeedSequence((int(seed), int(rep), li))
                                .generate_state(1)[0])
                report = sensitivity.divergence(
                    X, loss, J, res, method=method, probes=probes,
                    seed=cell_seed, opts=opts, link=link, eps=eps)
                dof = report.divergence
                row.update(
                    ok=True,
                    sure=sure_gaussian(y, res.mu_hat, link, dof, sigma),
                    dof=dof,
                    margin=res.certificate_margin,
                    cinj=bool(report.cinj and cinj),
                )
                if mu0 is not None:
                    diff = link.apply(res.mu_hat) - h_mu0
                    row["risk"] = float(diff @ diff)
            except Exception:
                pass
            rows.append(row)
        return rows

    threads = _thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run_rep, range(replications)))
    else:
        chunks = [run_rep(rep) for rep in range(replications)]

    curve = RiskCurve(
        lambdas=lambdas,
        replications=replications,
        seed=seed,
        method=method,
    )
    # fixed row order: weight-major, replication-minor
    for li in range(len(lambdas)):
        for rep in range(replications):
            curve.rows.append(chunks[rep][li])
    return curve.aggregate()
