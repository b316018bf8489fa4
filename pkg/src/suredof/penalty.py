"""Partly-smooth regularizers.

Each penalty knows its proximity operator, how to read off the active
manifold at a point (``identify``), the Riemannian gradient ``e`` and
Hessian ``Q`` of the weighted penalty on that manifold, and a certificate
margin measuring how far a dual certificate sits from the relative boundary
of the subdifferential.

The ``ActiveModel`` snapshot fixes everything downstream sensitivity
formulas need: an orthonormal tangent basis, the tangent projector, ``e``
(already scaled by the weight), ``Q`` as an operator on the tangent space,
and the Weingarten map for curved manifolds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import linop


class UnsupportedPenaltyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# small numerical building blocks


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def project_l1_ball(v, radius):
    """Euclidean projection onto { u : ||u||_1 <= radius } (exact, by sorting)."""
    v = np.asarray(v, dtype=float)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, a.size + 1)
    valid = u - (css - radius) / k > 0
    rho = np.nonzero(valid)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def project_scaled_simplex(w, total):
    """Euclidean projection onto { w >= 0, sum(w) = total } (exact, by sorting)."""
    w = np.asarray(w, dtype=float)
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, w.size + 1)
    valid = u - css / k > 0
    rho = np.nonzero(valid)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(w - theta, 0.0)


def null_space_basis(M, rcond=1e-10):
    """Orthonormal basis of Ker(M) with singular values below
    rcond * sigma_max treated as zero."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] == 0 or not np.any(M):
        return np.eye(M.shape[1])
    _, s, vt = np.linalg.svd(M, full_matrices=True)
    cutoff = rcond * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    return vt[rank:].T.copy()


class BlockStructure:
    """A partition of ``{0, ..., size-1}`` into disjoint index blocks."""

    def __init__(self, blocks, size):
        self.blocks = tuple(np.array(b, dtype=int) for b in blocks)
        self.size = int(size)
        gather = np.concatenate(self.blocks) if self.blocks else np.empty(0, int)
        if gather.size != self.size or np.unique(gather).size != self.size:
            raise ValueError("blocks must partition the index range")
        if gather.size and (gather.min() != 0 or gather.max() != self.size - 1):
            raise ValueError("blocks must partition the index range")
        self.nblocks = len(self.blocks)
        # fast path: equally sized, contiguous, in order
        k = len(self.blocks[0]) if self.blocks else 0
        self._width = k if (
            k > 0
            and all(len(b) == k for b in self.blocks)
            and np.array_equal(gather, np.arange(self.size))
        ) else 0

    @classmethod
    def uniform(cls, size, width):
        if size % width:
            raise ValueError("size not divisible by block width")
        blocks = [np.arange(i, i + width) for i in range(0, size, width)]
        return cls(blocks, size)

    @classmethod
    def pixel_pairs(cls, npixels):
        return cls.uniform(2 * npixels, 2)

    def norms(self, u):
        u = np.asarray(u, dtype=float)
        if self._width:
            return np.linalg.norm(u.reshape(-1, self._width), axis=1)
        return np.array([np.linalg.norm(u[b]) for b in self.blocks])

    def scale(self, u, factors):
        """Multiply each block of u by its factor."""
        u = np.asarray(u, dtype=float)
        if self._width:
            return (u.reshape(-1, self._width) * factors[:, None]).ravel()
        out = np.empty_like(u)
        for b, f in zip(self.blocks, factors):
            out[b] = f * u[b]
        return out

    def curvature_apply(self, u, w, active):
        """Blockwise (w_b - <u_b, w_b> u_b / |u_b|^2) / |u_b| on the active
        blocks, zero elsewhere.  ``u`` is the anchor point; active blocks
        whose anchor vanishes contribute zero (the caller's step control is
        expected to reject such points)."""
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        norms = self.norms(u)
        good = np.asarray(active, dtype=bool) & (norms > 0)
        out = np.zeros_like(w)
        if self._width:
            U = u.reshape(-1, self._width)
            W = w.reshape(-1, self._width)
            n = norms.copy()
            n[~good] = 1.0
            inner = np.sum(U * W, axis=1)
            R = (W - (inner / n**2)[:, None] * U) / n[:, None]
            R[~good] = 0.0
            return R.ravel()
        for i, b in enumerate(self.blocks):
            if good[i]:
                ub, wb = u[b], w[b]
                nb = norms[i]
                out[b] = (wb - (ub @ wb) / nb**2 * ub) / nb
        return out

    def unit_field(self, u, active):
        """u_b / |u_b| on active blocks, zero elsewhere."""
        norms = self.norms(u)
        good = np.asarray(active, dtype=bool) & (norms > 0)
        factors = np.zeros(self.nblocks)
        factors[good] = 1.0 / norms[good]
        return self.scale(u, factors)

    def curvature_blockdiag(self, u, active):
        """Stacked per-block matrices (I - ub ub^T/|ub|^2)/|ub| for active
        blocks (zero otherwise), shape (nblocks, k, k); uniform widths only."""
        if not self._width:
            raise ValueError("uniform block widths required")
        k = self._width
        U = np.asarray(u, dtype=float).reshape(-1, k)
        norms = np.linalg.norm(U, axis=1)
        good = np.asarray(active, dtype=bool) & (norms > 0)
        n = np.where(good, norms, 1.0)
        ubar = U / n[:, None]
        P = (np.eye(k)[None, :, :] - ubar[:, :, None] * ubar[:, None, :]) / n[:, None, None]
        P[~good] = 0.0
        return P

    def ball_project(self, e):
        """Scale each block of e into the unit ball; uniform widths use the
        reshape fast path."""
        e = np.asarray(e, dtype=float)
        if self._width:
            E = e.reshape(-1, self._width)
            norms = np.linalg.norm(E, axis=1)
            factors = np.where(norms > 1.0, 1.0 / np.where(norms > 1.0, norms, 1.0), 1.0)
            return (E * factors[:, None]).ravel()
        out = e.copy()
        for b in self.blocks:
            nb = np.linalg.norm(out[b])
            if nb > 1.0:
                out[b] /= nb
        return out


# ---------------------------------------------------------------------------
# active-manifold snapshot


@dataclass
class ActiveModel:
    """Snapshot of the active manifold of a weighted penalty at a point.

    ``basis`` is an orthonormal basis of the tangent space (p x d),
    ``projector`` the p x p tangent projector, ``e`` the Riemannian gradient
    of the weighted penalty (a tangent vector), and ``q_apply`` the weighted
    Riemannian Hessian as a map of tangent vectors.  ``weingarten(xi, v)``
    is the manifold's Weingarten map for a normal vector v; it vanishes for
    flat manifolds.
    """

    kind: str
    weight: float
    manifold_id: tuple
    basis: np.ndarray
    e: np.ndarray
    flat: bool = True
    degenerate: bool = False
    detail: dict = field(default_factory=dict)
    q_fn: object = None
    weingarten_fn: object = None
    grad_fn: object = None
    hess_fn: object = None
    _projector: np.ndarray = None

    @property
    def dim(self):
        return self.basis.shape[1]

    @property
    def tangent_dim(self):
        return self.basis.shape[1]

    @property
    def ambient_dim(self):
        return self.basis.shape[0]

    @property
    def projector(self):
        if self._projector is None:
            self._projector = self.basis @ self.basis.T
        return self._projector

    def project_tangent(self, v):
        return self.basis @ (self.basis.T @ v)

    def q_apply(self, xi):
        if self.q_fn is None:
            return np.zeros_like(np.asarray(xi, dtype=float))
        return self.q_fn(np.asarray(xi, dtype=float))

    def weingarten(self, xi, v):
        if self.weingarten_fn is None:
            return np.zeros_like(np.asarray(xi, dtype=float))
        return self.weingarten_fn(np.asarray(xi, dtype=float), np.asarray(v, dtype=float))

    def smooth_grad(self, x):
        """Euclidean gradient of the local smooth representative of the
        weighted penalty, at a point x of the manifold near the snapshot."""
        if self.grad_fn is None:
            return self.e.copy()
        return self.grad_fn(np.asarray(x, dtype=float))

    def smooth_hess_apply(self, x, xi):
        if self.hess_fn is None:
            return np.zeros_like(np.asarray(xi, dtype=float))
        return self.hess_fn(np.asarray(x, dtype=float), np.asarray(xi, dtype=float))


def _full_space_model(kind, p):
    return ActiveModel(
        kind=kind,
        weight=0.0,
        manifold_id=("full-space",),
        basis=np.eye(p),
        e=np.zeros(p),
        _projector=np.eye(p),
    )


# ---------------------------------------------------------------------------
# penalties


class Penalty:
    kind = "abstract"
    polyhedral = False
    analysis = False

    def __init__(self, weight):
        if weight < 0:
            raise ValueError("weight must be nonnegative")
        self.weight = float(weight)

    # -- values

    def base_value(self, x):
        raise NotImplementedError

    def value(self, x):
        return self.weight * self.base_value(np.asarray(x, dtype=float))

    # -- prox

    def prox(self, v, step):
        if step <= 0:
            raise ValueError("step must be positive")
        v = np.asarray(v, dtype=float)
        t = step * self.weight
        if t == 0.0:
            return v.copy()
        return self._prox(v, t)

    def _prox(self, v, t):
        raise NotImplementedError

    # -- manifold identification

    def default_tol(self, x):
        raise NotImplementedError

    def identify(self, x, tol=None, active_override=None):
        x = np.asarray(x, dtype=float)
        if self.weight == 0.0:
            return _full_space_model(self.kind, x.size)
        if active_override is not None and getattr(self, "analysis", False):
            return self._identify_with_structure(x, np.asarray(active_override, dtype=bool))
        if tol is None:
            tol = self.default_tol(x)
        if tol < 0:
            raise ValueError("tol must be nonnegative")
        return self._identify(x, tol)

    def _identify(self, x, tol):
        raise NotImplementedError

    def truncate(self, x, tol=None):
        """Round x onto the identified manifold (exact structural zeros)."""
        return np.asarray(x, dtype=float).copy()

    # -- certificates

    def margin(self, x, g, eta_hint=None):
        """Margin of the certificate g = -grad F relative to the boundary of
        the subdifferential face at x.  1 is maximally interior, 0 sits on
        the relative boundary, negative values flag an invalid certificate.
        Analysis kinds accept a feasible dual certificate as a hint; the
        reported value is then the best of the available lower bounds.
        """
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        if self.weight == 0.0:
            return 1.0
        if getattr(self, "analysis", False):
            return self._margin(x, g, eta_hint=eta_hint)
        return self._margin(x, g)

    def subgradient_distance(self, x, g, eta_hint=None, refine_iters=600):
        """Euclidean distance of g to the subdifferential of the weighted
        penalty at x (a refined upper bound for analysis kinds, where
        ``eta_hint`` can seed the certificate search and ``refine_iters``
        bounds the refinement work)."""
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        if self.weight == 0.0:
            return float(np.linalg.norm(g))
        try:
            return self._subgradient_distance(x, g, eta_hint=eta_hint,
                                              refine_iters=refine_iters)
        except TypeError:
            return self._subgradient_distance(x, g, eta_hint=eta_hint)

    def _subgradient_distance(self, x, g, eta_hint=None):
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} weight={self.weight}>"


class Lasso(Penalty):
    kind = "lasso"
    polyhedral = True

    def base_value(self, x):
        return float(np.abs(x).sum())

    def _prox(self, v, t):
        return soft_threshold(v, t)

    def default_tol(self, x):
        m = np.max(np.abs(x)) if x.size else 0.0
        # floor keeps round-off entries of an exactly-zero pattern inactive
        return 1e-6 * m + 1e-12 * (1.0 + np.linalg.norm(x))

    def _identify(self, x, tol):
        lam = self.weight
        p = x.size
        supp = np.flatnonzero(np.abs(x) > tol)
        signs = np.sign(x[supp])
        basis = np.eye(p)[:, supp]
        e = np.zeros(p)
        e[supp] = lam * signs
        return ActiveModel(
            kind=self.kind,
            weight=lam,
            manifold_id=("support", tuple(supp.tolist())),
            basis=basis,
            e=e,
            detail={"support": supp, "signs": signs},
        )

    def truncate(self, x, tol=None):
        x = np.asarray(x, dtype=float).copy()
        if tol is None:
            tol = self.default_tol(x)
        x[np.abs(x) <= tol] = 0.0
        return x

    def _margin(self, x, g):
        lam = self.weight
        off = np.abs(x) <= self.default_tol(x)
        if not np.any(off):
            return 1.0
        return float(1.0 - np.max(np.abs(g[off])) / lam)

    def _subgradient_distance(self, x, g, eta_hint=None):
        lam = self.weight
        on = x != 0.0
        d2 = np.sum((g[on] - lam * np.sign(x[on])) ** 2)
        d2 += np.sum(np.maximum(np.abs(g[~on]) - lam, 0.0) ** 2)
        return float(np.sqrt(d2))


class GroupLasso(Penalty):
    kind = "group-lasso"

    def __init__(self, blocks, weight):
        super().__init__(weight)
        if isinstance(blocks, BlockStructure):
            self.blocks = blocks
        else:
            blocks = list(blocks)
            size = int(max(np.max(b) for b in blocks)) + 1
            self.blocks = BlockStructure(blocks, size)

    def base_value(self, x):
        return float(self.blocks.norms(x).sum())

    def _prox(self, v, t):
        norms = self.blocks.norms(v)
        factors = np.zeros_like(norms)
        nz = norms > 0
        factors[nz] = np.maximum(1.0 - t / norms[nz], 0.0)
        return self.blocks.scale(v, factors)

    def default_tol(self, x):
        norms = self.blocks.norms(x)
        top = norms.max() if norms.size else 0.0
        return 1e-6 * top + 1e-12 * (1.0 + np.linalg.norm(x))

    def _identify(self, x, tol):
        lam = self.weight
        p = x.size
        bs = self.blocks
        norms = bs.norms(x)
        active = norms > tol
        idx = np.concatenate([bs.blocks[i] for i in np.flatnonzero(active)]) if active.any() else np.empty(0, int)
        idx = np.sort(idx)
        basis = np.eye(p)[:, idx]
        x_anchor = np.zeros(p)
        for i in np.flatnonzero(active):
            x_anchor[bs.blocks[i]] = x[bs.blocks[i]]
        e = lam * bs.unit_field(x_anchor, active)

        def q_fn(xi, _x=x_anchor, _a=active):
            return lam * bs.curvature_apply(_x, xi, _a)

        def grad_fn(z):
            return lam * bs.unit_field(z, active)

        def hess_fn(z, xi):
            return lam * bs.curvature_apply(z, xi, active)

        return ActiveModel(
            kind=self.kind,
            weight=lam,
            manifold_id=("block-support", tuple(np.flatnonzero(active).tolist())),
            basis=basis,
            e=e,
            detail={"active": active, "blocks": bs, "support": idx},
            q_fn=q_fn,
            grad_fn=grad_fn,
            hess_fn=hess_fn,
        )

    def truncate(self, x, tol=None):
        x = np.asarray(x, dtype=float).copy()
        if tol is None:
            tol = self.default_tol(x)
        norms = self.blocks.norms(x)
        for i in np.flatnonzero(norms <= tol):
            x[self.blocks.blocks[i]] = 0.0
        return x

    def _margin(self, x, g):
        lam = self.weight
        norms = self.blocks.norms(x)
        inactive = norms <= self.default_tol(x)
        if not np.any(inactive):
            return 1.0
        gn = self.blocks.norms(g)
        return float(1.0 - np.max(gn[inactive]) / lam)

    def _subgradient_distance(self, x, g, eta_hint=None):
        lam = self.weight
        norms = self.blocks.norms(x)
        gn = self.blocks.norms(g)
        d2 = 0.0
        for i, b in enumerate(self.blocks.blocks):
            if norms[i] > 0:
                d2 += np.sum((g[b] - lam * x[b] / norms[i]) ** 2)
            else:
                d2 += max(gn[i] - lam, 0.0) ** 2
        return float(np.sqrt(d2))


class LinfNorm(Penalty):
    kind = "linf"
    polyhedral = True

    def base_value(self, x):
        return float(np.max(np.abs(x))) if x.size else 0.0

    def _prox(self, v, t):
        # Moreau decomposition against the l1 ball of radius t
        return v - project_l1_ball(v, t)

    def default_tol(self, x):
        m = np.max(np.abs(x)) if x.size else 0.0
        return 1e-6 * m

    def _identify(self, x, tol):
        lam = self.weight
        p = x.size
        m = np.max(np.abs(x)) if x.size else 0.0
        if m <= tol or m == 0.0:
            # x = 0: the subdifferential spans everything, the tangent space
            # collapses to the origin
            return ActiveModel(
                kind=self.kind,
                weight=lam,
                manifold_id=("origin",),
                basis=np.zeros((p, 0)),
                e=np.zeros(p),
                detail={"saturated": np.empty(0, int), "signs": np.empty(0), "level": 0.0},
            )
        sat = np.flatnonzero(m - np.abs(x) <= tol)
        signs = np.sign(x[sat])
        free = np.setdiff1d(np.arange(p), sat)
        u = np.zeros(p)
        u[sat] = signs / np.sqrt(sat.size)
        basis = np.concatenate([u[:, None], np.eye(p)[:, free]], axis=1)
        e = np.zeros(p)
        e[sat] = lam * signs / sat.size
        return ActiveModel(
            kind=self.kind,
            weight=lam,
            manifold_id=("linf-face", tuple(sat.tolist()), tuple(int(s) for s in signs)),
            basis=basis,
            e=e,
            detail={"saturated": sat, "signs": signs, "level": m},
        )

    def truncate(self, x, tol=None):
        x = np.asarray(x, dtype=float).copy()
        if tol is None:
            tol = self.default_tol(x)
        m = np.max(np.abs(x)) if x.size else 0.0
        if m == 0.0:
            return x
        sat = m - np.abs(x) <= tol
        x[sat] = np.sign(x[sat]) * m
        return x

    def _margin(self, x, g):
        lam = self.weight
        m = np.max(np.abs(x)) if x.size else 0.0
        if m == 0.0:
            return float(1.0 - np.abs(g).sum() / lam)
        tol = self.default_tol(x)
        sat = m - np.abs(x) <= tol
        off = float(np.max(np.abs(g[~sat]))) if np.any(~sat) else 0.0
        if off > 1e-8 * lam:
            # certificate leaks outside the saturated face
            return float(-off / lam)
        alpha = g[sat] * np.sign(x[sat]) / lam
        return float(sat.sum() * np.min(alpha))

    def _subgradient_distance(self, x, g, eta_hint=None):
        lam = self.weight
        m = np.max(np.abs(x)) if x.size else 0.0
        if m == 0.0:
            return float(np.linalg.norm(g - project_l1_ball(g, lam)))
        sat = np.abs(x) >= m  # exact saturations of the (truncated) point
        w = g[sat] * np.sign(x[sat])
        proj = project_scaled_simplex(w, lam)
        d2 = np.sum((w - proj) ** 2) + np.sum(g[~sat] ** 2)
        return float(np.sqrt(d2))


def _as_analysis_operator(dstar):
    if isinstance(dstar, linop.LinearMap):
        return dstar
    return linop.dense(dstar)


def _refine_certificate(A, r, lam, eta0, project, iters=300, tol_scale=1.0,
                        opnorm=None):
    """Projected gradient on 0.5 * ||r - lam * A @ eta||^2 over the feasible
    set enforced by ``project``; returns the feasible certificate and the
    final residual norm.  Used to tighten subdifferential distances for
    analysis penalties."""
    if A.shape[1] == 0:
        return eta0, float(np.linalg.norm(r))
    if opnorm is None:
        opnorm = np.linalg.norm(A, 2)
    if opnorm == 0.0:
        return eta0, float(np.linalg.norm(r))
    step = 1.0 / (lam * opnorm) ** 2
    # accelerated projected gradient with adaptive restart
    eta = project(eta0)
    vel = eta.copy()
    t = 1.0
    best_eta = eta
    best = float(np.linalg.norm(r - lam * (A @ eta)))
    floor = 1e-15 * tol_scale
    stall = 0
    for it in range(iters):
        resid_v = r - lam * (A @ vel)
        eta_new = project(vel + step * lam * (A.T @ resid_v))
        nr = float(np.linalg.norm(r - lam * (A @ eta_new)))
        if nr < best:
            if nr < 0.9999 * best:
                stall = 0
            else:
                stall += 1
            best, best_eta = nr, eta_new
        else:
            stall += 1
        if float((eta_new - eta) @ (eta_new - vel)) > 0.0:
            # momentum points uphill: restart
            t = 1.0
            vel = eta_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            vel = eta_new + ((t - 1.0) / t_new) * (eta_new - eta)
            t = t_new
        eta = eta_new
        if best <= floor or stall >= 60:
            break
    return best_eta, best


class _StructureCache:
    """Small LRU keyed by the bytes of an activity mask."""

    def __init__(self, cap=64):
        from collections import OrderedDict

        self.cap = cap
        self.data = OrderedDict()

    def get(self, key):
        got = self.data.get(key)
        if got is not None:
            self.data.move_to_end(key)
        return got

    def put(self, key, value):
        self.data[key] = value
        self.data.move_to_end(key)
        while len(self.data) > self.cap:
            self.data.popitem(last=False)


import weakref as _weakref

_OPERATOR_STRUCTURE_CACHES = _weakref.WeakKeyDictionary()


def _structure_cache_for(dstar):
    """Activity-mask caches are keyed by the analysis operator: the kernel
    bases and operator norms they hold do not depend on the weight, so
    penalties sharing an operator (e.g. along a weight grid) share them."""
    got = _OPERATOR_STRUCTURE_CACHES.get(dstar)
    if got is None:
        got = _StructureCache()
        _OPERATOR_STRUCTURE_CACHES[dstar] = got
    return got


class GeneralLasso(Penalty):
    """l1 norm of D* x for a linear analysis operator D* (q x p)."""

    kind = "general-lasso"
    polyhedral = True
    analysis = True

    def __init__(self, dstar, weight, kernel_rcond=1e-10):
        super().__init__(weight)
        self.dstar = _as_analysis_operator(dstar)
        self.kernel_rcond = kernel_rcond
        self._dmat = self.dstar.materialize(cap=10**7)  # q x p
        self._scache = _structure_cache_for(self.dstar)

    @property
    def p(self):
        return self.dstar.cols

    def base_value(self, x):
        return float(np.abs(self.dstar.apply(x)).sum())

    def _structure_data(self, act):
        key = act.tobytes()
        got = self._scache.get(key)
        if got is None:
            basis = null_space_basis(self._dmat[~act], rcond=self.kernel_rcond)
            A = self._dmat[~act].T
            opnorm = np.linalg.norm(A, 2) if A.shape[1] else 0.0
            got = {"basis": basis, "opnorm": opnorm}
            self._scache.put(key, got)
        return got

    def _prox(self, v, t):
        x, _ = _analysis_prox(v, t, self._dmat, l1=True)
        return x

    def default_tol(self, x):
        u = self._dmat @ x
        top = np.max(np.abs(u)) if u.size else 0.0
        return 1e-6 * top + 1e-12 * (1.0 + np.linalg.norm(u))

    def _identify(self, x, tol):
        u = self._dmat @ x
        return self._identify_with_structure(x, np.abs(u) > tol)

    def _identify_with_structure(self, x, act):
        lam = self.weight
        u = self._dmat @ x
        signs = np.sign(u[act])
        data = self._structure_data(act)
        basis = data["basis"]
        e_raw = lam * (self._dmat[act].T @ signs)
        e = basis @ (basis.T @ e_raw)
        return ActiveModel(
            kind=self.kind,
            weight=lam,
            manifold_id=("gl-support", tuple(np.flatnonzero(act).tolist())),
            basis=basis,
            e=e,
            detail={"active_rows": act, "signs": signs, "dmat": self._dmat,
                    "scache_entry": data},
        )

    def _margin(self, x, g, eta_hint=None):
        lam = self.weight
        u = self._dmat @ x
        act = np.abs(u) > self.default_tol(x)
        if not np.any(~act):
            return 1.0
        r = g / lam - self._dmat[act].T @ np.sign(u[act])
        A = self._dmat[~act].T  # p x m
        m = A.shape[1]
        # minimal l-infinity certificate: min t  s.t.  A eta = r, |eta| <= t
        c = np.zeros(m + 1)
        c[-1] = 1.0
        a_ub = np.block([[np.eye(m), -np.ones((m, 1))], [-np.eye(m), -np.ones((m, 1))]])
        b_ub = np.zeros(2 * m)
        a_eq = np.concatenate([A, np.zeros((A.shape[0], 1))], axis=1)
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=r,
                      bounds=[(None, None)] * (m + 1), method="highs")
        if not res.success:
            eta, *_ = np.linalg.lstsq(A, r, rcond=None)
            return float(-np.linalg.norm(A @ eta - r) / lam)
        return float(1.0 - res.x[-1])

    def _subgradient_distance(self, x, g, eta_hint=None, refine_iters=600):
        return self.certificate_info(x, g, eta_hint=eta_hint,
                                     refine_iters=refine_iters)["resid"]

    def certificate_info(self, x, g, eta_hint=None, refine_iters=600):
        """Refined dual certificate at (x, g): the residual distance bound,
        the full certificate vector and the per-row magnitudes on the
        inactive set (boundary rows signal an activity change)."""
        lam = self.weight
        u = self._dmat @ x
        act = np.abs(u) > self.default_tol(x)
        r = g - lam * (self._dmat[act].T @ np.sign(u[act]))
        eta_full = np.zeros(u.size)
        eta_full[act] = np.sign(u[act])
        if not np.any(~act):
            return {"resid": float(np.linalg.norm(r)), "eta": eta_full,
                    "active": act, "inactive_magnitudes": np.empty(0)}
        A = self._dmat[~act].T
        eta0 = np.zeros(A.shape[1])
        if eta_hint is not None:
            eta0 = np.asarray(eta_hint, dtype=float)[~act]
        eta, resid = _refine_certificate(
            A, r, lam, eta0, lambda e: np.clip(e, -1.0, 1.0),
            iters=refine_iters, tol_scale=1.0 + np.linalg.norm(g),
            opnorm=self._structure_data(act)["opnorm"])
        eta_full[~act] = eta
        return {"resid": resid, "eta": eta_full, "active": act,
                "inactive_magnitudes": np.abs(eta)}


class GeneralGroupLasso(Penalty):
    """Sum of block norms of D* x; covers isotropic total variation when D*
    stacks the forward differences of each pixel."""

    kind = "general-group-lasso"
    analysis = True

    def __init__(self, dstar, blocks, weight, kernel_rcond=1e-10):
        super().__init__(weight)
        self.dstar = _as_analysis_operator(dstar)
        if isinstance(blocks, BlockStructure):
            self.blocks = blocks
        else:
            self.blocks = BlockStructure(list(blocks), self.dstar.rows)
        if self.blocks.size != self.dstar.rows:
            raise ValueError("blocks must partition the analysis output")
        self.kernel_rcond = kernel_rcond
        self._dmat = self.dstar.materialize(cap=10**7)
        self._scache = _structure_cache_for(self.dstar)

    def _structure_data(self, active):
        key = np.asarray(active, dtype=bool).tobytes()
        got = self._scache.get(key)
        if got is None:
            rows = self._active_rows(np.asarray(active, dtype=bool))
            inactive_rows = np.setdiff1d(np.arange(self._dmat.shape[0]), rows)
            basis = null_space_basis(self._dmat[inactive_rows], rcond=self.kernel_rcond)
            A = self._dmat[inactive_rows].T
            opnorm = np.linalg.norm(A, 2) if A.shape[1] else 0.0
            got = {"basis": basis, "opnorm": opnorm,
                   "rows": rows, "inactive_rows": inactive_rows}
            self._scache.put(key, got)
        return got

    @property
    def p(self):
        return self.dstar.cols

    def base_value(self, x):
        return float(self.blocks.norms(self.dstar.apply(x)).sum())

    def _prox(self, v, t):
        x, _ = _analysis_prox(v, t, self._dmat, l1=False, blocks=self.blocks)
        return x

    def default_tol(self, x):
        u = self._dmat @ x
        norms = self.blocks.norms(u)
        top = norms.max() if norms.size else 0.0
        return 1e-6 * top + 1e-12 * (1.0 + np.linalg.norm(u))

    def _active_rows(self, active):
        bs = self.blocks
        if not active.any():
            return np.empty(0, int)
        return np.sort(np.concatenate([bs.blocks[i] for i in np.flatnonzero(active)]))

    def _identify(self, x, tol):
        norms = self.blocks.norms(self._dmat @ x)
        return self._identify_with_structure(x, norms > tol)

    def _identify_with_structure(self, x, active):
        lam = self.weight
        bs = self.blocks
        u = self._dmat @ x
        data = self._structure_data(active)
        rows = data["rows"]
        inactive_rows = data["inactive_rows"]
        basis = data["basis"]
        scache_entry = data
        proj = lambda v: basis @ (basis.T @ v)
        u_anchor = u.copy()
        u_anchor[inactive_rows] = 0.0
        eta = bs.unit_field(u_anchor, active)
        e = proj(lam * (self._dmat.T @ eta))
        dmat = self._dmat

        def q_fn(xi):
            w = dmat @ xi
            return proj(lam * (dmat.T @ bs.curvature_apply(u_anchor, w, active)))

        def grad_fn(z):
            return lam * (dmat.T @ bs.unit_field(dmat @ z, active))

        def hess_fn(z, xi):
            return lam * (dmat.T @ bs.curvature_apply(dmat @ z, dmat @ xi, active))

        return ActiveModel(
            kind=self.kind,
            weight=lam,
            manifold_id=("ggl-support", tuple(np.flatnonzero(active).tolist())),
            basis=basis,
            e=e,
            detail={
                "active": active,
                "blocks": bs,
                "dmat": dmat,
                "u": u_anchor,
                "active_rows": rows,
                "inactive_rows": inactive_rows,
                "scache_entry": scache_entry,
            },
            q_fn=q_fn,
            grad_fn=grad_fn,
            hess_fn=hess_fn,
        )

    def _margin(self, x, g, eta_hint=None):
        lam = self.weight
        bs = self.blocks
        u = self._dmat @ x
        norms = bs.norms(u)
        active = norms > self.default_tol(x)
        rows = self._active_rows(active)
        inactive_rows = np.setdiff1d(np.arange(u.size), rows)
        if inactive_rows.size == 0:
            return 1.0
        eta_act = np.zeros(u.size)
        if rows.size:
            eta_act = bs.unit_field(np.where(np.isin(np.arange(u.size), rows), u, 0.0), active)
        r = g / lam - self._dmat.T @ eta_act
        A = self._dmat[inactive_rows].T
        # least-norm certificate; any feasible certificate's largest inactive
        # block norm lower-bounds the margin, so keep the best bound seen
        sol, *_ = np.linalg.lstsq(A, r, rcond=None)
        resid = np.linalg.norm(A @ sol - r)
        if resid > 1e-7 * (1.0 + np.linalg.norm(g) / lam):
            return float(-resid)
        eta = np.zeros(u.size)
        eta[inactive_rows] = sol
        gn = bs.norms(eta)
        worst = np.max(gn[~active]) if np.any(~active) else 0.0
        best = 1.0 - worst
        if eta_hint is not None:
            eta_h = np.asarray(eta_hint, dtype=float).copy()
            mask = np.zeros(u.size, dtype=bool)
            mask[inactive_rows] = True
            eta_h[~mask] = 0.0
            resid_h = np.linalg.norm(self._dmat.T @ eta_h - r)
            if resid_h <= 1e-6 * (1.0 + np.linalg.norm(g) / lam):
                gh = bs.norms(eta_h)
                worst_h = np.max(gh[~active]) if np.any(~active) else 0.0
                best = max(best, 1.0 - worst_h)
        return float(best)

    def _subgradient_distance(self, x, g, eta_hint=None, refine_iters=600):
        return self.certificate_info(x, g, eta_hint=eta_hint,
                                     refine_iters=refine_iters)["resid"]

    def certificate_info(self, x, g, eta_hint=None, refine_iters=600):
        """Refined dual certificate at (x, g): the residual distance bound,
        the full certificate field and the inactive block norms (blocks at
        the unit boundary signal an activity change)."""
        lam = self.weight
        bs = self.blocks
        u = self._dmat @ x
        norms = bs.norms(u)
        active = norms > self.default_tol(x)
        rows = self._active_rows(active)
        inactive_rows = np.setdiff1d(np.arange(u.size), rows)
        eta_act = np.zeros(u.size)
        if rows.size:
            eta_act = bs.unit_field(np.where(np.isin(np.arange(u.size), rows), u, 0.0), active)
        r = g - lam * (self._dmat.T @ eta_act)
        if inactive_rows.size == 0:
            return {"resid": float(np.linalg.norm(r)), "eta": eta_act,
                    "active": active, "inactive_block_norms": np.empty(0),
                    "inactive_blocks": np.empty(0, int)}
        A = self._dmat[inactive_rows].T
        # local layout of the inactive blocks within the reduced variable
        pos = {int(row): k for k, row in enumerate(inactive_rows)}
        inact_idx = np.flatnonzero(~active)
        local_blocks = [np.array([pos[int(j)] for j in bs.blocks[i]], dtype=int)
                        for i in inact_idx]
        uniform = bs._width and all(
            np.array_equal(blk, np.arange(i * bs._width, (i + 1) * bs._width))
            for i, blk in enumerate(local_blocks))
        if uniform:
            reduced = BlockStructure.uniform(inactive_rows.size, bs._width)                 if inactive_rows.size else None
            project = reduced.ball_project if reduced else (lambda e: e)
        else:
            def project(e):
                out = e.copy()
                for blk in local_blocks:
                    nb = np.linalg.norm(out[blk])
                    if nb > 1.0:
                        out[blk] /= nb
                return out

        eta0 = np.zeros(A.shape[1])
        if eta_hint is not None:
            eta0 = np.asarray(eta_hint, dtype=float)[inactive_rows]
        eta, resid = _refine_certificate(
            A, r, lam, eta0, project, iters=refine_iters,
            tol_scale=1.0 + np.linalg.norm(g),
            opnorm=self._structure_data(active)["opnorm"])
        eta_full = eta_act.copy()
        eta_full[inactive_rows] = eta
        block_norms = np.array([np.linalg.norm(eta[blk]) for blk in local_blocks])
        return {"resid": resid, "eta": eta_full, "active": active,
                "inactive_block_norms": block_norms,
                "inactive_blocks": inact_idx}


class NuclearNorm(Penalty):
    """Sum of singular values of a p1 x p2 matrix stored as a flat vector."""

    kind = "nuclear"

    def __init__(self, p1, p2, weight, fd_step=1e-5):
        super().__init__(weight)
        self.p1, self.p2 = int(p1), int(p2)
        self.fd_step = fd_step

    @property
    def p(self):
        return self.p1 * self.p2

    def _mat(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim == 2:
            if v.shape != (self.p1, self.p2):
                raise ValueError(f"expected a {self.p1}x{self.p2} matrix")
            return v
        if v.size != self.p:
            raise ValueError("vector length does not match the matrix shape")
        return v.reshape(self.p1, self.p2)

    def base_value(self, x):
        return float(np.linalg.svd(self._mat(x), compute_uv=False).sum())

    def _prox(self, v, t):
        shaped = np.asarray(v).ndim == 2
        U, s, Vt = np.linalg.svd(self._mat(v), full_matrices=False)
        out = (U * np.maximum(s - t, 0.0)) @ Vt
        return out if shaped else out.ravel()

    def default_tol(self, x):
        s = np.linalg.svd(self._mat(x), compute_uv=False)
        top = s[0] if s.size else 0.0
        return 1e-6 * top + 1e-12 * (1.0 + np.linalg.norm(x))

    def _identify(self, x, tol):
        lam = self.weight
        p1, p2, p = self.p1, self.p2, self.p
        xm = self._mat(x)
        U, s, Vt = np.linalg.svd(xm, full_matrices=False)
        rank = int(np.sum(s > tol))
        # ambiguous rank: a singular value sits near the cut threshold
        degenerate = bool(np.any((s > 0.5 * tol) & (s <= 2.0 * tol)))
        if rank >= 2:
            gaps = s[: rank - 1] - s[1:rank]
            degenerate = degenerate or bool(np.any(gaps <= tol))
        Ur, Vr = U[:, :rank], Vt[:rank].T
        sr = s[:rank]

        def pt(W):
            UUW = Ur @ (Ur.T @ W)
            WVV = (W @ Vr) @ Vr.T
            return UUW + WVV - Ur @ (Ur.T @ WVV)

        def project(v):
            return pt(v.reshape(p1, p2)).ravel()

        # orthonormal tangent basis from the projector
        pmat = np.empty((p, p))
        eye = np.eye(p)
        for j in range(p):
            pmat[:, j] = project(eye[:, j])
        pmat = 0.5 * (pmat + pmat.T)
        vals, vecs = np.linalg.eigh(pmat)
        basis = vecs[:, vals > 0.5]
        e = lam * (Ur @ Vr.T).ravel()
        step = self.fd_step * (sr[-1] if rank else 1.0)
        xpinv_t = (Ur * (1.0 / sr)) @ Vr.T if rank else np.zeros((p1, p2))

        def rank_r_polar(z):
            Uz, sz, Vtz = np.linalg.svd(z, full_matrices=False)
            return Uz[:, :rank] @ Vtz[:rank]

        def q_fn(xi):
            if rank == 0:
                return np.zeros(p)
            xim = xi.reshape(p1, p2)
            nrm = np.linalg.norm(xim)
            if nrm == 0.0:
                return np.zeros(p)
            h = step / nrm
            gp = rank_r_polar(xm + h * xim)
            gm = rank_r_polar(xm - h * xim)
            return lam * pt((gp - gm) / (2.0 * h)).ravel()

        def weingarten_fn(xi, v):
            xim = xi.reshape(p1, p2)
            vm = v.reshape(p1, p2)
            A = vm @ xim.T @ xpinv_t + xpinv_t @ xim.T @ vm
            return pt(A).ravel()

        return ActiveModel(
            kind=self.kind,
            weight=lam,
            manifold_id=("rank", rank),
            basis=basis,
            e=e,
            flat=False,
            degenerate=degenerate,
            detail={"U": Ur, "V": Vr, "sigma": sr, "rank": rank,
                    "shape": (p1, p2), "pt": pt},
            q_fn=q_fn,
            weingarten_fn=weingarten_fn,
            _projector=pmat,
        )

    def truncate(self, x, tol=None):
        xm = self._mat(x)
        if tol is None:
            tol = self.default_tol(x)
        U, s, Vt = np.linalg.svd(xm, full_matrices=False)
        s = np.where(s > tol, s, 0.0)
        out = (U * s) @ Vt
        return out.ravel() if np.asarray(x).ndim == 1 else out

    def _margin(self, x, g):
        lam = self.weight
        model = self.identify(x)
        pt = model.detail["pt"]
        gm = self._mat(g)
        normal = gm - pt(gm)
        smax = np.linalg.svd(normal, compute_uv=False)
        top = smax[0] if smax.size else 0.0
        return float(1.0 - top / lam)

    def _subgradient_distance(self, x, g, eta_hint=None):
        lam = self.weight
        model = self.identify(x)
        pt = model.detail["pt"]
        gm = self._mat(g)
        tang = pt(gm)
        normal = gm - tang
        Un, sn, Vtn = np.linalg.svd(normal, full_matrices=False)
        clipped = (Un * np.minimum(sn, lam)) @ Vtn
        e_mat = model.e.reshape(self.p1, self.p2)
        d2 = np.linalg.norm(tang - e_mat) ** 2 + np.linalg.norm(normal - clipped) ** 2
        return float(np.sqrt(d2))


class SphereHinge(Penalty):
    """weight * max(||x|| - 1, 0): flat outside and inside the unit ball,
    curved (the unit sphere itself) on its surface."""

    kind = "sphere-hinge"

    def base_value(self, x):
        return float(max(np.linalg.norm(x) - 1.0, 0.0))

    def _prox(self, v, t):
        n = np.linalg.norm(v)
        if n <= 1.0 or n == 0.0:
            return v.copy()
        r = max(1.0, n - t)
        return (r / n) * v

    def default_tol(self, x):
        return 1e-6 * max(1.0, np.linalg.norm(x))

    def _identify(self, x, tol):
        lam = self.weight
        p = x.size
        n = np.linalg.norm(x)
        if abs(n - 1.0) <= tol:
            xhat = x / n
            basis = null_space_basis(xhat[None, :])
            def weingarten_fn(xi, v, _xhat=xhat):
                return -xi * float(_xhat @ v)
            return ActiveModel(
                kind=self.kind,
                weight=lam,
                manifold_id=("sphere",),
                basis=basis,
                e=np.zeros(p),
                flat=False,
                detail={"xhat": xhat, "where": "sphere"},
                weingarten_fn=weingarten_fn,
            )
        if n < 1.0:
            return ActiveModel(
                kind=self.kind,
                weight=lam,
                manifold_id=("ball-interior",),
                basis=np.eye(p),
                e=np.zeros(p),
                detail={"where": "interior"},
                _projector=np.eye(p),
            )
        xhat = x / n
        e = lam * xhat

        def q_fn(xi, _xhat=xhat, _n=n):
            return lam * (xi - _xhat * float(_xhat @ xi)) / _n

        def grad_fn(z):
            return lam * z / np.linalg.norm(z)

        def hess_fn(z, xi):
            nz = np.linalg.norm(z)
            zh = z / nz
            return lam * (xi - zh * float(zh @ xi)) / nz

        return ActiveModel(
            kind=self.kind,
            weight=lam,
            manifold_id=("ball-exterior",),
            basis=np.eye(p),
            e=e,
            detail={"where": "exterior", "xhat": xhat},
            q_fn=q_fn,
            grad_fn=grad_fn,
            hess_fn=hess_fn,
            _projector=np.eye(p),
        )

    def truncate(self, x, tol=None):
        x = np.asarray(x, dtype=float).copy()
        if tol is None:
            tol = self.default_tol(x)
        n = np.linalg.norm(x)
        if n > 0 and abs(n - 1.0) <= tol:
            x /= n
        return x

    def _margin(self, x, g):
        lam = self.weight
        n = np.linalg.norm(x)
        tol = self.default_tol(x)
        if abs(n - 1.0) <= tol and n > 0:
            xhat = x / n
            s = float(xhat @ g) / lam
            radial_resid = np.linalg.norm(g - (xhat @ g) * xhat)
            if radial_resid > 1e-8 * lam * (1.0 + abs(s)):
                return float(-radial_resid / lam)
            return float(2.0 * min(s, 1.0 - s))
        if n < 1.0:
            return float(1.0 - np.linalg.norm(g) / lam)
        return float(1.0 - np.linalg.norm(g - lam * x / n) / lam)

    def _subgradient_distance(self, x, g, eta_hint=None):
        lam = self.weight
        n = np.linalg.norm(x)
        tol = self.default_tol(x)
        if abs(n - 1.0) <= tol and n > 0:
            xhat = x / n
            t = float(np.clip(xhat @ g, 0.0, lam))
            return float(np.linalg.norm(g - t * xhat))
        if n < 1.0:
            return float(np.linalg.norm(g))
        return float(np.linalg.norm(g - lam * x / n))


# ---------------------------------------------------------------------------
# iterative prox for analysis penalties (product-space splitting on the
# coupling u = D* x, with a cached factorization of I + D D*)


def _analysis_prox(v, t, dmat, l1=True, blocks=None, iters=4000, tol=1e-13):
    import scipy.linalg as sla

    p = dmat.shape[1]
    coupling = np.eye(p) + dmat.T @ dmat
    chol = sla.cho_factor(coupling)

    def prox_u_part(a, tau):
        if l1:
            return soft_threshold(a, tau)
        norms = blocks.norms(a)
        factors = np.zeros_like(norms)
        nz = norms > 0
        factors[nz] = np.maximum(1.0 - tau / norms[nz], 0.0)
        return blocks.scale(a, factors)

    zx = v.copy()
    zu = dmat @ v
    scale = 1.0 + np.linalg.norm(v)
    for _ in range(iters):
        # separable prox: quadratic in x, threshold in u
        wx = 0.5 * (zx + v)
        wu = prox_u_part(zu, t)
        # projection onto the graph of D*
        rx, ru = 2.0 * wx - zx, 2.0 * wu - zu
        gx = sla.cho_solve(chol, rx + dmat.T @ ru)
        gu = dmat @ gx
        dx, du = gx - wx, gu - wu
        zx += dx
        zu += du
        if np.linalg.norm(dx) + np.linalg.norm(du) <= tol * scale:
            break
    return gx, gu


# ---------------------------------------------------------------------------
# functional surface mirroring the operation names


def prox(J, v, step):
    return J.prox(v, step)


def identify_manifold(J, x, tol=None):
    return J.identify(x, tol=tol)


def riemannian_hessian_apply(M, xi):
    xi = np.asarray(xi, dtype=float)
    resid = np.linalg.norm(M.project_tangent(xi) - xi)
    if resid > 1e-8 * (1.0 + np.linalg.norm(xi)):
        raise ValueError("xi is not a tangent vector")
    return M.q_apply(xi)


def certificate_margin(J, x, g):
    return J.margin(x, g)


def make_penalty(kind, weight, *, blocks=None, dstar=None, p1=None, p2=None):
    """Construct a penalty from its kind name and parameters."""
    if kind == "lasso":
        return Lasso(weight)
    if kind == "group-lasso":
        return GroupLasso(blocks, weight)
    if kind == "linf":
        return LinfNorm(weight)
    if kind == "general-lasso":
        return GeneralLasso(dstar, weight)
    if kind == "general-group-lasso":
        return GeneralGroupLasso(dstar, blocks, weight)
    if kind == "nuclear":
        return NuclearNorm(p1, p2, weight)
    if kind == "sphere-hinge":
        return SphereHinge(weight)
    raise UnsupportedPenaltyError(f"unknown penalty kind {kind!r}")
