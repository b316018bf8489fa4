"""Douglas-Rachford splitting for regularized regression and the
tangent-constrained linear system behind the divergence operator.

The solver minimizes ``0.5 * ||X x - y||^2 + J(x)`` where ``J`` is a weighted
partly-smooth penalty.  Synthesis penalties run plain two-operator splitting;
analysis penalties run on the product space ``(x, u = D* x)`` with the
coupling projection solved through a cached factorization of ``I + D D*``.

Once splitting has located the active structure, the restricted problem is
polished to high accuracy by a direct solve (polyhedral penalties) or a few
Newton steps on the manifold, which is what makes finite-difference oracles
downstream meaningful.
"""

from __future__ import annotations

import warnings
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import LinAlgWarning
from scipy.sparse.linalg import LinearOperator, minres, gmres

from . import linop
from .penalty import null_space_basis


class SaddleSolveError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SquaredLoss:
    """0.5 * ||y - mu||^2 as a function of the prediction mu.

    Strongly convex in mu with modulus 1; the mixed second derivative with
    respect to (mu, y) is minus the identity.
    """

    y: np.ndarray

    def value(self, mu):
        return 0.5 * float(np.sum((np.asarray(mu) - self.y) ** 2))

    def gradient(self, mu):
        return np.asarray(mu, dtype=float) - self.y

    @property
    def n(self):
        return self.y.size


def squared_loss(y):
    return SquaredLoss(np.asarray(y, dtype=float))


@dataclass
class SolveOptions:
    iterations: int = 20000
    kkt_tol: float = 1e-8
    gamma: float = 1.0
    check_every: int = 25
    polish: bool = True
    ident_tol: float = None
    krylov_tol: float = 1e-7
    krylov_maxit: int = None
    objective_every: int = 100


@dataclass
class SolveResult:
    x_hat: np.ndarray
    mu_hat: np.ndarray
    kkt_residual: float
    iterations: int
    certificate_margin: float
    active: object
    converged: bool
    objective: float
    objective_trace: list = field(default_factory=list)
    dual_certificate: np.ndarray = None


def objective_value(X, loss, J, x):
    return loss.value(X.apply(x)) + J.value(x)


def kkt_residual(X, loss, J, x, eta_hint=None, refine_iters=600):
    """Distance of the negative loss gradient to the subdifferential of J."""
    g = X.adjoint_apply(loss.y - X.apply(x))
    return J.subgradient_distance(x, g, eta_hint=eta_hint,
                                  refine_iters=refine_iters)


# ---------------------------------------------------------------------------
# cached factorizations


_QUAD_CACHE = weakref.WeakKeyDictionary()


def _quad_prox_factor(X, gamma):
    per_map = _QUAD_CACHE.setdefault(X, {})
    got = per_map.get(gamma)
    if got is None:
        gram = linop.gram_matrix(X)
        got = sla.cho_factor(np.eye(X.cols) + gamma * gram)
        per_map[gamma] = got
    return got


_COUPLING_CACHE = weakref.WeakKeyDictionary()


def _coupling_factor(dstar, dmat):
    got = _COUPLING_CACHE.get(dstar)
    if got is None:
        got = sla.cho_factor(np.eye(dmat.shape[1]) + dmat.T @ dmat)
        _COUPLING_CACHE[dstar] = got
    return got


def _sym_solve(H, rhs):
    """Symmetric solve with a pseudo-inverse fallback for rank-deficient H."""
    Hs = 0.5 * (H + H.T)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            return sla.solve(Hs, rhs, assume_a="sym")
    except (np.linalg.LinAlgError, LinAlgWarning, sla.LinAlgError):
        return np.linalg.pinv(Hs, rcond=1e-12, hermitian=True) @ rhs


# ---------------------------------------------------------------------------
# manifold polish


def _tangent_image(X, basis):
    d = basis.shape[1]
    out = np.empty((X.rows, d))
    for j in range(d):
        out[:, j] = X.apply(basis[:, j])
    return out


def _tangent_image_cached(X, M):
    """X applied to the tangent basis, parked on the structure-cache entry
    shared by identifications of the same activity mask."""
    entry = M.detail.get("scache_entry") if isinstance(M.detail, dict) else None
    if entry is None:
        return _tangent_image(X, M.basis)
    store = entry.setdefault("xb", {})
    key = id(X)
    got = store.get(key)
    if got is None or got.shape[1] != M.basis.shape[1]:
        got = _tangent_image(X, M.basis)
        store.clear()
        store[key] = got
    return got


def _fast_group_hessian(M, B):
    """Reduced penalty Hessian builder for (general) group penalties with
    uniform block widths; None when the generic column loop must be used."""
    detail = M.detail
    bs = detail.get("blocks")
    if bs is None or not getattr(bs, "_width", 0) or M.hess_fn is None:
        return None
    k = bs._width
    active = detail.get("active")
    dmat = detail.get("dmat")
    DB = dmat @ B if dmat is not None else B
    if DB.shape[0] != bs.size:
        return None
    R = DB.reshape(bs.nblocks, k, B.shape[1])
    lam = M.weight

    def build(x):
        u = dmat @ x if dmat is not None else x
        P = bs.curvature_blockdiag(u, active)
        return lam * np.einsum("bki,bkl,blj->ij", R, P, R, optimize=True)

    return build


def _polish_flat(X, loss, J, M, x0):
    """Exact (or Newton) solve of the problem restricted to a flat manifold."""
    B = M.basis
    if B.shape[1] == 0:
        return np.zeros(M.ambient_dim)
    A = _tangent_image_cached(X, M)
    if M.hess_fn is None:
        # the penalty is affine along the manifold: one least-squares solve
        H = A.T @ A
        rhs = A.T @ loss.y - B.T @ M.e
        w = np.linalg.pinv(H, rcond=1e-12, hermitian=True) @ rhs
        return B @ w
    w = B.T @ x0
    hess_reduced = _fast_group_hessian(M, B)
    for _ in range(8):
        x = B @ w
        grad = B.T @ (X.adjoint_apply(X.apply(x) - loss.y) + M.smooth_grad(x))
        gn = np.linalg.norm(grad)
        if not np.isfinite(gn):
            break
        if gn <= 1e-13 * (1.0 + np.linalg.norm(loss.y)):
            break
        H = A.T @ A
        if hess_reduced is not None:
            H += hess_reduced(x)
        else:
            for j in range(B.shape[1]):
                H[:, j] += B.T @ M.smooth_hess_apply(x, B[:, j])
        if not np.all(np.isfinite(H)):
            break
        dw = -_sym_solve(H, grad)
        # fall back to damped steps when Newton overshoots
        base = objective_value(X, loss, J, x)
        t = 1.0
        for _ in range(8):
            cand = B @ (w + t * dw)
            if objective_value(X, loss, J, cand) <= base + 1e-14 * (1.0 + abs(base)):
                break
            t *= 0.5
        w = w + t * dw
    return B @ w


def _polish_sphere(X, loss, J, x0):
    x = np.asarray(x0, dtype=float)
    n = np.linalg.norm(x)
    if n == 0.0:
        return x.copy()
    x = x / n
    for _ in range(25):
        B = null_space_basis(x[None, :])
        g_full = X.adjoint_apply(X.apply(x) - loss.y)
        grad = B.T @ g_full
        if np.linalg.norm(grad) <= 1e-13 * (1.0 + np.linalg.norm(loss.y)):
            break
        A = _tangent_image(X, B)
        c = -float(x @ g_full)
        H = A.T @ A + c * np.eye(B.shape[1])
        dw = -_sym_solve(H, grad)
        step = x + B @ dw
        x = step / np.linalg.norm(step)
    return x


def _polish_nuclear(X, loss, J, x0):
    x = np.asarray(x0, dtype=float).copy()
    best = x.copy()
    best_kkt = kkt_residual(X, loss, J, x)
    for _ in range(20):
        M = J.identify(x)
        rank = M.detail["rank"]
        if rank == 0 or M.dim == 0:
            break
        B = M.basis
        g_full = X.adjoint_apply(X.apply(x) - loss.y)
        normal = g_full - M.project_tangent(g_full)
        grad = B.T @ g_full + B.T @ M.e
        if np.linalg.norm(grad) <= 1e-13 * (1.0 + np.linalg.norm(loss.y)):
            break
        A = _tangent_image(X, B)
        H = A.T @ A
        for j in range(B.shape[1]):
            H[:, j] += B.T @ (M.q_apply(B[:, j]) + M.weingarten(B[:, j], normal))
        dw = -_sym_solve(H, grad)
        xi = B @ dw
        improved = False
        t = 1.0
        for _ in range(8):
            zm = (x + t * xi).reshape(J.p1, J.p2)
            U, s, Vt = np.linalg.svd(zm, full_matrices=False)
            cand = ((U[:, :rank] * s[:rank]) @ Vt[:rank]).ravel()
            ck = kkt_residual(X, loss, J, cand)
            if ck < best_kkt:
                best, best_kkt = cand, ck
                x = cand
                improved = True
                break
            t *= 0.5
        if not improved:
            break
    return best


def _polish(X, loss, J, M, x0):
    if M.kind == "sphere-hinge" and M.manifold_id == ("sphere",):
        return _polish_sphere(X, loss, J, x0)
    if M.kind == "nuclear":
        return _polish_nuclear(X, loss, J, x0)
    if M.flat:
        return _polish_flat(X, loss, J, M, x0)
    return np.asarray(x0, dtype=float).copy()


# ---------------------------------------------------------------------------
# Douglas-Rachford


def _finish_candidates(X, loss, J, opts, raw, hint=None, structure=None,
                       cert_store=None):
    """Truncate the splitting iterate onto its manifold and optionally polish;
    keep whichever point has the smaller optimality residual.  For analysis
    penalties the splitting iteration supplies the active structure read off
    its thresholded field, whose zeros are exact, and an active-set loop
    grows that structure wherever the refined dual certificate saturates.
    ``cert_store`` carries refined certificates across attempts so the
    refinement work accumulates per structure."""
    cand = J.truncate(raw, tol=opts.ident_tol)
    best = cand
    best_kkt = kkt_residual(X, loss, J, cand, eta_hint=hint, refine_iters=200)
    best_eta = hint
    if not opts.polish:
        return best, best_kkt, best_eta
    if structure is not None and hasattr(J, "certificate_info"):
        polished, pk, eta = _active_set_polish(X, loss, J, opts, cand, hint,
                                               structure, cert_store=cert_store)
        if polished is not None and pk < best_kkt:
            best, best_kkt, best_eta = polished, pk, eta
        return best, best_kkt, best_eta
    M = J.identify(cand, tol=opts.ident_tol)
    polished = _polish(X, loss, J, M, cand)
    if np.all(np.isfinite(polished)):
        pk = kkt_residual(X, loss, J, polished, eta_hint=hint)
        if np.isfinite(pk) and pk < best_kkt:
            best, best_kkt = polished, pk
    return best, best_kkt, best_eta


def _active_set_polish(X, loss, J, opts, cand, hint, structure, rounds=5,
                       cert_store=None):
    """Polish on the proposed structure, then grow it by the inactive
    certificate blocks that saturate the unit ball, until the residual stops
    improving.  Returns the best point, its residual and its certificate."""
    S = np.asarray(structure, dtype=bool).copy()
    best, best_kkt, best_eta = None, np.inf, None
    seen = set()
    point = cand
    for _ in range(rounds):
        key = S.tobytes()
        if key in seen:
            break
        seen.add(key)
        M = J.identify(point, active_override=S)
        polished = _polish(X, loss, J, M, point)
        if not np.all(np.isfinite(polished)):
            break
        g = X.adjoint_apply(loss.y - X.apply(polished))
        seed_eta = hint
        if cert_store is not None and key in cert_store:
            seed_eta = cert_store[key]
        info = J.certificate_info(polished, g, eta_hint=seed_eta, refine_iters=200)
        if cert_store is not None:
            cert_store[key] = info["eta"]
        if info["resid"] < best_kkt:
            best, best_kkt, best_eta = polished, info["resid"], info["eta"]
        act_now = np.asarray(info["active"], dtype=bool)
        if "inactive_block_norms" in info:
            mags = info["inactive_block_norms"]
            idx = info["inactive_blocks"]
        else:
            mags = info["inactive_magnitudes"]
            idx = np.flatnonzero(~act_now)
        if mags.size == 0:
            break
        saturated = idx[mags >= 1.0 - 1e-9]
        if saturated.size == 0:
            break
        S = act_now.copy()
        S[saturated] = True
        point = polished
    return best, best_kkt, best_eta


class _SynthesisDR:
    """Two-operator splitting on the coefficient space."""

    def __init__(self, X, loss, J, opts, x0):
        self.X, self.loss, self.J = X, loss, J
        self.gamma = opts.gamma
        self.chol = _quad_prox_factor(X, self.gamma)
        self.xty = X.adjoint_apply(loss.y)
        self.z = np.zeros(X.cols) if x0 is None else x0.copy()
        self._xg = self.z
        self._fp = np.inf

    def step_chunk(self, k):
        z = self.z
        for _ in range(k):
            xg = self.J.prox(z, self.gamma)
            xf = sla.cho_solve(self.chol, (2.0 * xg - z) + self.gamma * self.xty)
            z += xf - xg
        self._xg = xg
        self._fp = np.linalg.norm(xf - xg)
        # the prox output carries exact structural zeros
        return xg, self._fp, 1.0 + np.linalg.norm(xg), None, None

    def restart(self, x, eta=None):
        # fixed point: z = x + gamma * (penalty subgradient) = x + gamma*X*(y-Xx)
        self.z = x + self.gamma * (self.xty - self.X.adjoint_apply(self.X.apply(x)))


class _AnalysisDR:
    """Product-space splitting on (x, u = D* x) with the coupling projection
    solved through a cached factorization of I + D D*."""

    def __init__(self, X, loss, J, opts, x0, dual0=None):
        self.X, self.loss, self.J = X, loss, J
        self.gamma = opts.gamma
        self.chol = _quad_prox_factor(X, self.gamma)
        self.xty = X.adjoint_apply(loss.y)
        self.dmat = J._dmat
        self.coupling = _coupling_factor(J.dstar, self.dmat)
        self.bs = getattr(J, "blocks", None)
        self.tau = self.gamma * J.weight
        zx = np.zeros(X.cols) if x0 is None else x0.copy()
        zu = self.dmat @ zx
        if dual0 is not None and dual0.size == zu.size and self.tau > 0:
            # the splitting fixed point carries the dual certificate in the
            # gap between the coupled and thresholded analysis variables
            zu = zu + self.tau * dual0
        self.zx, self.zu = zx, zu

    def _prox_u(self, a):
        if self.bs is None:
            from .penalty import soft_threshold

            return soft_threshold(a, self.tau)
        norms = self.bs.norms(a)
        factors = np.zeros_like(norms)
        nz = norms > 0
        factors[nz] = np.maximum(1.0 - self.tau / norms[nz], 0.0)
        return self.bs.scale(a, factors)

    def step_chunk(self, k):
        zx, zu, dmat = self.zx, self.zu, self.dmat
        for _ in range(k):
            wx = sla.cho_solve(self.chol, zx + self.gamma * self.xty)
            wu = self._prox_u(zu)
            gx = sla.cho_solve(self.coupling, (2.0 * wx - zx) + dmat.T @ (2.0 * wu - zu))
            gu = dmat @ gx
            zx += gx - wx
            zu += gu - wu
        fp = np.sqrt(np.linalg.norm(gx - wx) ** 2 + np.linalg.norm(gu - wu) ** 2)
        hint = (zu - wu) / self.tau if self.tau > 0 else None
        if self.bs is None:
            structure = wu != 0.0
        else:
            structure = self.bs.norms(wu) > 0.0
        return gx, fp, 1.0 + np.linalg.norm(gx), hint, structure

    def restart(self, x, eta=None):
        # fixed point: zx = x + gamma*X*(Xx - y), zu = D*x + tau * certificate
        self.zx = x + self.gamma * (self.X.adjoint_apply(self.X.apply(x)) - self.xty)
        u = self.dmat @ x
        self.zu = u + self.tau * eta if (eta is not None and self.tau > 0) else u.copy()


def solve(X, loss, J, opts=None, warm=None):
    """Minimize 0.5*||X x - y||^2 + J(x) by Douglas-Rachford splitting.

    ``warm`` may be a previous SolveResult or a plain starting vector.  On
    hitting the iteration budget without reaching ``kkt_tol`` the best point
    found is returned with ``converged=False``.

    After a polishing attempt improves the optimality residual markedly, the
    splitting state is moved to that point's fixed-point representation (the
    iteration remains globally convergent from any state), which skips the
    long identification crawl on hard instances.
    """
    opts = opts or SolveOptions()
    if opts.iterations < 1:
        raise ValueError("iterations must be >= 1")
    p = X.cols
    if loss.n != X.rows:
        raise ValueError("observation length does not match the design")
    x0 = None
    if warm is not None:
        x0 = warm.x_hat if isinstance(warm, SolveResult) else np.asarray(warm, dtype=float)
        if x0.size != p:
            raise ValueError("warm start has the wrong dimension")

    dual0 = None
    if warm is not None and isinstance(warm, SolveResult):
        dual0 = warm.dual_certificate
    if getattr(J, "analysis", False):
        dr = _AnalysisDR(X, loss, J, opts, x0, dual0)
    else:
        dr = _SynthesisDR(X, loss, J, opts, x0)

    kscale = 1.0 + np.linalg.norm(X.adjoint_apply(loss.y))
    target = opts.kkt_tol * kscale
    best_x, best_kkt, best_eta = None, np.inf, None
    trace = []
    last_attempt_fp = np.inf
    iters_done = 0
    converged = False
    hint = None
    structure = None
    prev_structure = None
    tried_structures = set()
    last_attempt_iter = -(10**9)
    kkt_at_restart = np.inf
    unproductive = 0
    fallback_gap = 1500
    cert_store = {}

    raw = np.zeros(p)
    while iters_done < opts.iterations:
        chunk = min(opts.check_every, opts.iterations - iters_done)
        raw, fp, scale, hint, structure = dr.step_chunk(chunk)
        iters_done += chunk
        if iters_done % opts.objective_every < opts.check_every:
            trace.append((iters_done, objective_value(X, loss, J, raw)))
        attempt = False
        if fp <= 1e-7 * scale and fp <= 0.25 * last_attempt_fp:
            attempt = True
        elif fp <= 1e-4 * scale and fp <= 0.5 * last_attempt_fp:
            attempt = True
        elif (structure is not None and fp <= 1e-2 * scale
              and iters_done - last_attempt_iter >= 8 * opts.check_every):
            key = structure.tobytes()
            if key == prev_structure and key not in tried_structures:
                tried_structures.add(key)
                attempt = True
        elif iters_done - last_attempt_iter >= fallback_gap and fp <= 1e-2 * scale:
            attempt = True
        if structure is not None:
            prev_structure = structure.tobytes()
        if attempt:
            last_attempt_fp = fp
            last_attempt_iter = iters_done
            before = best_kkt
            cand, ck, eta = _finish_candidates(X, loss, J, opts, raw, hint,
                                               structure, cert_store)
            if ck < best_kkt:
                best_x, best_kkt, best_eta = cand, ck, eta
            if best_kkt <= target:
                converged = True
                break
            # unproductive attempts back off exponentially so hard instances
            # spend their budget iterating rather than re-polishing
            if best_kkt > 0.5 * before:
                unproductive += 1
                fallback_gap = 1500 * 2 ** min(unproductive, 4)
            else:
                unproductive = 0
                fallback_gap = 1500
            if best_kkt <= 0.2 * kkt_at_restart and best_x is not None:
                kkt_at_restart = best_kkt
                dr.restart(best_x, best_eta)

    if best_x is None or not converged:
        cand, ck, eta = _finish_candidates(X, loss, J, opts, raw, hint,
                                           structure, cert_store)
        if ck < best_kkt:
            best_x, best_kkt, best_eta = cand, ck, eta
        converged = best_kkt <= target

    active = J.identify(best_x, tol=opts.ident_tol)
    g = X.adjoint_apply(loss.y - X.apply(best_x))
    try:
        final_margin = J.margin(best_x, g, eta_hint=hint)
    except TypeError:
        final_margin = J.margin(best_x, g)
    return SolveResult(
        x_hat=best_x,
        mu_hat=X.apply(best_x),
        kkt_residual=best_kkt,
        iterations=iters_done,
        certificate_margin=final_margin,
        active=active,
        converged=converged,
        objective=objective_value(X, loss, J, best_x),
        objective_trace=trace,
        dual_certificate=best_eta if best_eta is not None else hint,
    )


# ---------------------------------------------------------------------------
# tangent-restricted system


class TangentSystem:
    """Dense reduction of (X*X + Q + curvature) to an orthonormal tangent
    basis, with a rank-revealing pseudo-inverse.

    Used for the restricted-injectivity verdict, the solution Jacobian and
    the divergence operator.
    """

    def __init__(self, X, M, fcurv=None):
        self.X = X
        self.M = M
        B = M.basis
        self.basis = B
        d = B.shape[1]
        self.XB = _tangent_image(X, B) if d else np.zeros((X.rows, 0))
        H = self.XB.T @ self.XB
        for j in range(d):
            col = M.q_apply(B[:, j])
            if fcurv is not None:
                col = col + fcurv(B[:, j])
            H[:, j] += B.T @ col
        H = 0.5 * (H + H.T)
        self.H = H
        if d:
            vals, vecs = np.linalg.eigh(H)
            self.eigvals, self.eigvecs = vals, vecs
            self.min_eig = float(vals[0])
            cutoff = 1e-10 * max(float(vals[-1]), 0.0)
            inv = np.where(vals > cutoff, 1.0 / np.where(vals > cutoff, vals, 1.0), 0.0)
            self._pinv = (vecs * inv) @ vecs.T
        else:
            self.eigvals = np.empty(0)
            self.min_eig = np.inf
            self._pinv = np.zeros((0, 0))

    @property
    def dim(self):
        return self.basis.shape[1]

    def pinv_solve(self, rhs_reduced):
        return self._pinv @ rhs_reduced

    def solve_on_tangent(self, rhs):
        """nu in T with (X*X + Q + C) nu = P_T rhs in the pseudo-inverse sense."""
        return self.basis @ (self._pinv @ (self.basis.T @ rhs))

    def jacobian_apply(self, dy):
        return self.basis @ (self._pinv @ (self.XB.T @ dy))

    def delta_apply(self, z):
        return self.XB @ (self._pinv @ (self.XB.T @ z))

    def delta_quad(self, z):
        return float(z @ self.delta_apply(z))


def solve_saddle(X, M, rhs, method="auto", fcurv=None, tol=1e-7, maxiter=None):
    """Solve (X*X + Q) nu = rhs constrained to nu in T.

    ``method="dense"`` reduces to the tangent basis and applies a
    rank-revealing pseudo-inverse; ``method="krylov"`` solves the symmetric
    bordered system whose multiplier block constrains nu to the tangent
    space, to a relative residual of ``tol``.  ``"auto"`` picks dense for
    ambient dimension up to 2000.
    """
    rhs = np.asarray(rhs, dtype=float)
    p = M.ambient_dim
    if rhs.size != p:
        raise ValueError("rhs has the wrong dimension")
    if method == "auto":
        method = "dense" if p <= 2000 else "krylov"
    if method == "dense":
        ts = TangentSystem(X, M, fcurv=fcurv)
        w = ts._pinv @ (ts.basis.T @ rhs)
        resid = np.linalg.norm(ts.H @ w - ts.basis.T @ rhs)
        if resid > 1e-8 * (1.0 + np.linalg.norm(rhs)):
            warnings.warn("saddle rhs outside the attainable range; "
                          "returning the least-squares solution")
        return ts.basis @ w
    if method != "krylov":
        raise ValueError(f"unknown saddle method {method!r}")

    B = M.basis
    d = B.shape[1]
    # orthonormal border spanning the normal space
    q_full, _ = np.linalg.qr(np.concatenate([B, np.eye(p)], axis=1))
    N = q_full[:, d:p]
    m = N.shape[1]
    proj = lambda v: B @ (B.T @ v)

    def matvec(v):
        nu, zeta = v[:p], v[p:]
        top = X.adjoint_apply(X.apply(nu))
        w = proj(nu)
        qv = M.q_apply(w)
        if fcurv is not None:
            qv = qv + fcurv(w)
        top = top + proj(qv) + (N @ zeta if m else 0.0)
        bottom = N.T @ nu
        return np.concatenate([top, bottom])

    K = LinearOperator((p + m, p + m), matvec=matvec, dtype=float)
    b = np.concatenate([rhs, np.zeros(m)])
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(p)
    maxiter = maxiter or 20 * (p + m)
    sol, info = minres(K, b, rtol=tol * 0.05, maxiter=maxiter)
    resid = np.linalg.norm(matvec(sol) - b) / bnorm
    if resid > tol:
        sol, info = gmres(K, b, rtol=tol * 0.05, maxiter=maxiter, x0=sol)
        resid = np.linalg.norm(matvec(sol) - b) / bnorm
        if resid > tol:
            raise SaddleSolveError(
                f"krylov solve stagnated at relative residual {resid:.3e}", residual=resid
            )
    return sol[:p]


def saddle_residuals(X, M, rhs, nu, fcurv=None):
    """Residual norms of the two block rows of the bordered system at nu."""
    w = M.project_tangent(nu)
    qv = M.q_apply(w)
    if fcurv is not None:
        qv = qv + fcurv(w)
    top_no_mult = X.adjoint_apply(X.apply(nu)) + qv - rhs
    # the multiplier absorbs the normal component of the first row
    r1 = np.linalg.norm(M.project_tangent(top_no_mult))
    r2 = np.linalg.norm(nu - w)
    return r1, r2
