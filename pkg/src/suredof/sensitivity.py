"""Local sensitivity of the regularized solution map.

Everything here is anchored at a solved instance: the restricted positive
definiteness verdict on the tangent space, directional derivatives of the
solution map, the divergence (trace of the prediction Jacobian) through
closed forms, exact traces, Monte-Carlo probing or a finite-difference
oracle, and the constructive repair that moves a degenerate minimizer to one
with an injective restricted design.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import linop
from .penalty import UnsupportedPenaltyError, null_space_basis
from .solver import (
    SolveResult,
    TangentSystem,
    kkt_residual,
    objective_value,
    solve,
    solve_saddle,
)


class RestrictedInjectivityError(RuntimeError):
    pass


@dataclass
class SensitivityReport:
    cinj: bool
    min_restricted_eigenvalue: float
    tangent_dim: int
    divergence: float
    method: str
    mc_std_error: float = None
    certificate_margin: float = None


def f_curvature(X, loss, M, x_hat):
    """Curvature correction of the loss on a curved manifold: the Weingarten
    map against the normal component of the loss gradient.  None when the
    manifold is flat."""
    if M.flat:
        return None
    g_full = X.adjoint_apply(X.apply(x_hat) - loss.y)
    normal = g_full - M.project_tangent(g_full)
    return lambda xi: M.weingarten(xi, normal)


def _xtx_norm(X):
    try:
        gram = linop.gram_matrix(X)
    except linop.MaterializeCapError:
        return linop.operator_norm(X) ** 2
    return float(np.linalg.norm(gram, 2))


def check_restricted_pd(X, M, fcurv=None, pd_tol=None):
    """Smallest eigenvalue of the restricted Hessian on the tangent space and
    the positive-definiteness verdict."""
    ts = TangentSystem(X, M, fcurv=fcurv)
    if pd_tol is None:
        pd_tol = 1e-10 * _xtx_norm(X)
    return bool(ts.min_eig > pd_tol), float(ts.min_eig)


def solution_jacobian_apply(X, M, dy, fcurv=None):
    """Directional derivative of the solution map along an observation
    perturbation dy.  Refuses when restricted injectivity fails."""
    ts = TangentSystem(X, M, fcurv=fcurv)
    cinj, mineig = check_restricted_pd(X, M, fcurv=fcurv)
    if not cinj:
        raise RestrictedInjectivityError(
            "restricted positive definiteness fails on the tangent space "
            f"(min eigenvalue {mineig:.3e}); the solution map is not "
            "differentiable here - repair the solution first"
        )
    return ts.jacobian_apply(np.asarray(dy, dtype=float))


def delta_apply(X, M, z, fcurv=None, method="auto"):
    """Apply the prediction-Jacobian operator to z: solve the tangent system
    with right-hand side X* z and push forward through X."""
    nu = solve_saddle(X, M, X.adjoint_apply(np.asarray(z, dtype=float)),
                      method=method, fcurv=fcurv)
    return X.apply(nu)


def _probe(seed, k, n):
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(k))))
    return rng.standard_normal(n)


def closed_form_divergence(X, loss, J, result):
    """Penalty-specific closed form of the divergence at a solved instance.

    Polyhedral penalties count the tangent dimension; group penalties use
    their trace formula; the sphere hinge uses its curvature-corrected trace.
    Returns None when no closed form applies (nuclear norm, off-sphere
    hinge states).
    """
    M = result.active
    kind = M.kind
    if M.weight == 0.0 or getattr(J, "polyhedral", False):
        return float(M.dim)
    if kind == "group-lasso" or kind == "general-group-lasso":
        ts = TangentSystem(X, M)
        gram = ts.XB.T @ ts.XB
        return float(np.trace(ts.pinv_solve(gram)))
    if kind == "sphere-hinge":
        if M.manifold_id != ("sphere",):
            return None
        mu = result.mu_hat
        c = float(mu @ (loss.y - mu))
        B = M.basis
        XB = np.column_stack([X.apply(B[:, j]) for j in range(B.shape[1])]) \
            if B.shape[1] else np.zeros((X.rows, 0))
        gram = XB.T @ XB
        H = gram + c * np.eye(B.shape[1])
        return float(np.trace(np.linalg.pinv(H, hermitian=True) @ gram))
    return None


def divergence(X, loss, J, result, method="closed-form", probes=100, seed=0,
               eps=None, opts=None, link=None):
    """Divergence of the prediction map at a solved instance.

    method is one of ``closed-form``, ``exact-trace``, ``mc`` (Monte-Carlo
    quadratic probing with ``probes`` standard normal vectors) or ``fd``
    (re-solving at perturbed observations; the validation oracle).  ``mc``
    and ``fd`` draw identical probes for a given seed so their estimates are
    paired.  ``link`` optionally folds a diagonal link Jacobian into the
    trace; closed forms only exist for the identity link.
    """
    M = result.active
    fcurv = f_curvature(X, loss, M, result.x_hat)
    cinj, mineig = check_restricted_pd(X, M, fcurv=fcurv)
    margin = result.certificate_margin
    n = loss.n
    diag = None
    if link is not None and not link.is_identity:
        diag = link.jacobian_diag(result.mu_hat)

    label = method
    mc_se = None
    if method == "closed-form":
        if diag is not None:
            warnings.warn("closed forms assume the identity link; using the exact trace")
            method = "exact-trace"
        else:
            value = closed_form_divergence(X, loss, J, result)
            if value is None:
                warnings.warn(f"no closed-form divergence for {M.kind}; "
                              "falling back to the exact trace")
                method = "exact-trace"
                label = "exact-trace (closed-form unavailable)"

    if method == "exact-trace":
        ts = TangentSystem(X, M, fcurv=fcurv)
        value = 0.0
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            contrib = float(e @ ts.delta_apply(e))
            value += contrib * (diag[i] if diag is not None else 1.0)
        if label == method:
            label = "exact-trace"
    elif method == "mc":
        ts = TangentSystem(X, M, fcurv=fcurv)
        quads = np.empty(probes)
        for k in range(probes):
            z = _probe(seed, k, n)
            dz = ts.delta_apply(z)
            quads[k] = float(z @ (dz if diag is None else diag * dz))
        value = float(quads.mean())
        mc_se = float(quads.std(ddof=1) / np.sqrt(probes)) if probes > 1 else np.inf
        label = f"mc(probes={probes}, seed={seed})"
    elif method == "fd":
        if eps is None:
            eps = 1e-6 * (1.0 + np.linalg.norm(loss.y))
        from .solver import SolveOptions, squared_loss

        opts = opts or SolveOptions()
        mu0 = result.mu_hat if diag is None else link.apply(result.mu_hat)
        quads = np.empty(probes)
        for k in range(probes):
            z = _probe(seed, k, n)
            pert = solve(X, squared_loss(loss.y + eps * z), J, opts=opts, warm=result)
            mu1 = pert.mu_hat if diag is None else link.apply(pert.mu_hat)
            quads[k] = float(z @ (mu1 - mu0)) / eps
        value = float(quads.mean())
        mc_se = float(quads.std(ddof=1) / np.sqrt(probes)) if probes > 1 else np.inf
        label = f"fd(eps={eps:.3e}, probes={probes}, seed={seed})"
    elif method != "closed-form":
        raise ValueError(f"unknown divergence method {method!r}")

    return SensitivityReport(
        cinj=cinj,
        min_restricted_eigenvalue=mineig,
        tangent_dim=M.dim,
        divergence=float(value),
        method=label,
        mc_std_error=mc_se,
        certificate_margin=margin,
    )


# ---------------------------------------------------------------------------
# constructive repair


def _result_from_point(X, loss, J, x, iterations=0):
    x = np.asarray(x, dtype=float)
    g = X.adjoint_apply(loss.y - X.apply(x))
    return SolveResult(
        x_hat=x,
        mu_hat=X.apply(x),
        kkt_residual=kkt_residual(X, loss, J, x),
        iterations=iterations,
        certificate_margin=J.margin(x, g),
        active=J.identify(x),
        converged=True,
        objective=objective_value(X, loss, J, x),
    )


def _kernel_direction_flat(X, M):
    """First kernel basis vector of the design restricted to the tangent
    space (polyhedral penalties)."""
    B = M.basis
    if B.shape[1] == 0:
        return None
    XB = np.column_stack([X.apply(B[:, j]) for j in range(B.shape[1])])
    null = null_space_basis(XB)
    if null.shape[1] == 0:
        return None
    return B @ null[:, 0]


def _kernel_direction_group(X, model, x):
    """Direction with X h = 0 and each active block of h parallel to the
    corresponding block of x."""
    bs = model.detail["blocks"]
    active = np.flatnonzero(model.detail["active"])
    if active.size == 0:
        return None, None
    cols = []
    for i in active:
        v = np.zeros(x.size)
        v[bs.blocks[i]] = x[bs.blocks[i]]
        cols.append(X.apply(v))
    K = np.column_stack(cols)
    null = null_space_basis(K)
    if null.shape[1] == 0:
        return None, None
    c = null[:, 0]
    h = np.zeros(x.size)
    for ci, i in zip(c, active):
        h[bs.blocks[i]] += ci * x[bs.blocks[i]]
    mu = np.zeros(bs.nblocks)
    mu[active] = c
    return h, mu


def _kernel_direction_gglasso(X, model):
    """Direction in T with X h = 0 whose active analysis blocks stay
    parallel to those of the anchor point."""
    B = model.basis
    if B.shape[1] == 0:
        return None, None
    dmat = model.detail["dmat"]
    bs = model.detail["blocks"]
    active = np.flatnonzero(model.detail["active"])
    u = model.detail["u"]
    XB = np.column_stack([X.apply(B[:, j]) for j in range(B.shape[1])])
    rows = [XB]
    DB = dmat @ B
    for i in active:
        idx = bs.blocks[i]
        ub = u[idx]
        comp = null_space_basis(ub[None, :] / np.linalg.norm(ub))
        rows.append(comp.T @ DB[idx])
    null = null_space_basis(np.vstack(rows))
    if null.shape[1] == 0:
        return None, None
    h = B @ null[:, 0]
    mu = np.zeros(bs.nblocks)
    du = dmat @ h
    for i in active:
        idx = bs.blocks[i]
        ub = u[idx]
        mu[i] = float(ub @ du[idx]) / float(ub @ ub)
    return h, mu


def _choose_step(candidates):
    """Smallest-magnitude boundary step; ties resolve to the positive side."""
    candidates = [t for t in candidates if np.isfinite(t) and t != 0.0]
    if not candidates:
        return None
    best = min(candidates, key=lambda t: (abs(t), 0 if t > 0 else 1))
    return best


def _boundary_step(J, M, x, h):
    kind = M.kind
    if kind == "lasso":
        supp = M.detail["support"]
        cands = [-x[i] / h[i] for i in supp if abs(h[i]) > 1e-14 * (1 + abs(x[i]))]
        return _choose_step(cands)
    if kind == "general-lasso":
        dmat = M.detail["dmat"]
        act = np.flatnonzero(M.detail["active_rows"])
        u = dmat @ x
        du = dmat @ h
        cands = [-u[j] / du[j] for j in act if abs(du[j]) > 1e-12 * (1 + abs(u[j]))]
        return _choose_step(cands)
    if kind == "linf":
        sat = M.detail["saturated"]
        signs = M.detail["signs"]
        m = M.detail["level"]
        alpha = float(h[sat[0]] * signs[0]) if sat.size else 0.0
        off = np.setdiff1d(np.arange(x.size), sat)
        cands = []
        for j in off:
            for sgn in (1.0, -1.0):
                denom = h[j] - sgn * alpha
                if abs(denom) > 1e-14:
                    cands.append((sgn * m - x[j]) / denom)
        return _choose_step(cands)
    raise UnsupportedPenaltyError(f"no boundary step rule for {kind}")


def repair_solution(X, loss, J, result, max_iterations=None):
    """Move a minimizer along objective-preserving kernel directions until
    restricted injectivity holds, strictly shrinking the active structure at
    every step.  Supports polyhedral penalties and (general) group Lasso."""
    kind = J.kind
    if kind not in {"lasso", "general-lasso", "linf", "group-lasso", "general-group-lasso"}:
        raise UnsupportedPenaltyError(
            f"solution repair is not available for the {kind} penalty"
        )
    res = result
    obj0 = objective_value(X, loss, J, res.x_hat)
    if max_iterations is None:
        max_iterations = res.active.dim + 2
    for _ in range(max_iterations):
        M = res.active
        cinj, _ = check_restricted_pd(X, M)
        if cinj:
            return res
        x = res.x_hat
        if kind == "group-lasso":
            h, mu = _kernel_direction_group(X, M, x)
            step_cands = [-1.0 / m for m in (mu if mu is not None else []) if abs(m) > 1e-14]
            t0 = _choose_step(step_cands) if h is not None else None
        elif kind == "general-group-lasso":
            h, mu = _kernel_direction_gglasso(X, M)
            step_cands = [-1.0 / m for m in (mu if mu is not None else []) if abs(m) > 1e-14]
            t0 = _choose_step(step_cands) if h is not None else None
        else:
            h = _kernel_direction_flat(X, M)
            t0 = _boundary_step(J, M, x, h) if h is not None else None
        if h is None or t0 is None:
            raise RestrictedInjectivityError(
                "restricted injectivity fails but no objective-preserving "
                "kernel direction was found (borderline rank deficiency)"
            )
        x_new = J.truncate(x + t0 * h)
        obj_new = objective_value(X, loss, J, x_new)
        if abs(obj_new - obj0) > 1e-9 * (1.0 + abs(obj0)):
            raise RuntimeError(
                f"repair step changed the objective by {abs(obj_new - obj0):.3e}"
            )
        new_res = _result_from_point(X, loss, J, x_new, iterations=res.iterations)
        shrunk = new_res.active.dim < M.dim
        if not shrunk and kind in {"group-lasso", "general-group-lasso"}:
            shrunk = (len(new_res.active.manifold_id[1])
                      < len(M.manifold_id[1]))
        if not shrunk:
            raise RuntimeError("repair step failed to shrink the active structure")
        res = new_res
    raise RuntimeError("repair did not terminate within the iteration bound")


def ensure_injective(X, loss, J, result):
    """Repair the solution if needed and possible; otherwise return it
    unchanged together with the final verdict."""
    M = result.active
    fcurv = f_curvature(X, loss, M, result.x_hat)
    cinj, _ = check_restricted_pd(X, M, fcurv=fcurv)
    if cinj:
        return result, True
    try:
        repaired = repair_solution(X, loss, J, result)
    except (UnsupportedPenaltyError, RestrictedInjectivityError, RuntimeError):
        return result, False
    M2 = repaired.active
    cinj2, _ = check_restricted_pd(X, M2, fcurv=f_curvature(X, loss, M2, repaired.x_hat))
    return repaired, cinj2
