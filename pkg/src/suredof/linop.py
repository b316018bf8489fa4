"""Linear operators used as designs and analysis operators.

Every operator is immutable after construction and provides an exact adjoint:
``<A x, z> == <x, A* z>`` up to floating point round-off.  Vectors are plain
1-D numpy arrays; images enter flattened in row-major order.
"""

from __future__ import annotations

import weakref

import numpy as np


class DimensionMismatchError(ValueError):
    pass


class MaterializeCapError(RuntimeError):
    """Raised when a dense materialization would exceed the entry cap."""


def _check_dim(name, got, expected):
    if got != expected:
        raise DimensionMismatchError(f"{name}: expected length {expected}, got {got}")


class LinearMap:
    """Base class: a linear map from R^cols to R^rows with an exact adjoint."""

    rows: int
    cols: int
    kind: str

    def apply(self, x):
        raise NotImplementedError

    def adjoint_apply(self, z):
        raise NotImplementedError

    @property
    def adjoint(self):
        adj = getattr(self, "_adjoint_ref", None)
        if adj is None:
            adj = _AdjointMap(self)
            object.__setattr__(self, "_adjoint_ref", adj)
        return adj

    def materialize(self, cap=10**6):
        """Dense matrix of the operator, built column by column on the
        canonical basis.  Refuses when rows*cols exceeds ``cap``."""
        if self.rows * self.cols > cap:
            raise MaterializeCapError(
                f"materialize: {self.rows}x{self.cols} exceeds cap of {cap} entries"
            )
        out = np.empty((self.rows, self.cols))
        e = np.zeros(self.cols)
        for j in range(self.cols):
            e[j] = 1.0
            out[:, j] = self.apply(e)
            e[j] = 0.0
        return out

    def __repr__(self):
        return f"<{type(self).__name__} {self.kind} {self.rows}x{self.cols}>"


class _AdjointMap(LinearMap):
    def __init__(self, parent):
        self._parent = parent
        self.rows = parent.cols
        self.cols = parent.rows
        self.kind = f"adjoint({parent.kind})"

    def apply(self, x):
        return self._parent.adjoint_apply(x)

    def adjoint_apply(self, z):
        return self._parent.apply(z)

    @property
    def adjoint(self):
        return self._parent


class IdentityMap(LinearMap):
    kind = "identity"

    def __init__(self, n):
        self.rows = self.cols = int(n)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        _check_dim("apply", x.size, self.cols)
        return x.copy()

    adjoint_apply = apply


class DenseMap(LinearMap):
    kind = "dense"

    def __init__(self, matrix):
        self.matrix = np.array(matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ValueError("dense operator needs a 2-D matrix")
        self.rows, self.cols = self.matrix.shape

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        _check_dim("apply", x.size, self.cols)
        return self.matrix @ x

    def adjoint_apply(self, z):
        z = np.asarray(z, dtype=float)
        _check_dim("adjoint_apply", z.size, self.rows)
        return self.matrix.T @ z

    def materialize(self, cap=10**6):
        if self.rows * self.cols > cap:
            raise MaterializeCapError(
                f"materialize: {self.rows}x{self.cols} exceeds cap of {cap} entries"
            )
        return self.matrix.copy()


class Conv2DPeriodic(LinearMap):
    """Periodic 2-D convolution of a flattened height x width image.

    The default path accumulates shifted copies in the spatial domain.  The
    spectral path (``use_fft=True``) multiplies in Fourier space and agrees
    with the spatial path to better than 1e-12 relative; it is an internal
    acceleration only.
    """

    kind = "conv2d-periodic"

    def __init__(self, height, width, kernel, use_fft=False):
        self.height, self.width = int(height), int(width)
        self.rows = self.cols = self.height * self.width
        self.kernel = np.array(kernel, dtype=float)
        if self.kernel.ndim != 2:
            raise ValueError("kernel must be 2-D")
        kh, kw = self.kernel.shape
        self.use_fft = bool(use_fft)
        cr, cc = (kh - 1) // 2, (kw - 1) // 2
        # taps: (row shift, col shift, weight) with the kernel center at zero shift
        taps = []
        for a in range(kh):
            for b in range(kw):
                wgt = self.kernel[a, b]
                if wgt != 0.0:
                    taps.append((a - cr, b - cc, wgt))
        self._taps = taps
        # circulant embedding with the kernel center at pixel (0, 0)
        emb = np.zeros((self.height, self.width))
        for dr, dc, wgt in taps:
            emb[dr % self.height, dc % self.width] += wgt
        self._spectrum = np.fft.rfft2(emb)

    def _conv(self, img, flip):
        out = np.zeros_like(img)
        for dr, dc, wgt in self._taps:
            if flip:
                dr, dc = -dr, -dc
            out += wgt * np.roll(img, (dr, dc), axis=(0, 1))
        return out

    def _fft_conv(self, img, conj):
        spec = np.conj(self._spectrum) if conj else self._spectrum
        return np.fft.irfft2(np.fft.rfft2(img) * spec, s=img.shape)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        _check_dim("apply", x.size, self.cols)
        img = x.reshape(self.height, self.width)
        out = self._fft_conv(img, False) if self.use_fft else self._conv(img, False)
        return out.ravel()

    def adjoint_apply(self, z):
        z = np.asarray(z, dtype=float)
        _check_dim("adjoint_apply", z.size, self.rows)
        img = z.reshape(self.height, self.width)
        out = self._fft_conv(img, True) if self.use_fft else self._conv(img, True)
        return out.ravel()


class SubsampleMap(LinearMap):
    """Row selection; the adjoint zero-fills the unselected entries."""

    kind = "subsample"

    def __init__(self, indices, cols):
        self.indices = np.array(indices, dtype=int)
        if self.indices.ndim != 1 or np.unique(self.indices).size != self.indices.size:
            raise ValueError("indices must be a 1-D array of distinct entries")
        self.cols = int(cols)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.cols):
            raise ValueError("subsample index out of range")
        self.rows = self.indices.size

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        _check_dim("apply", x.size, self.cols)
        return x[self.indices].copy()

    def adjoint_apply(self, z):
        z = np.asarray(z, dtype=float)
        _check_dim("adjoint_apply", z.size, self.rows)
        out = np.zeros(self.cols)
        out[self.indices] = z
        return out


class Grad2D(LinearMap):
    """Periodic forward differences of a flattened height x width image.

    The output stacks, pixel by pixel, the horizontal then the vertical
    difference, so each pixel owns the output block (2*i, 2*i + 1).  The
    adjoint is exactly the negated periodic divergence.
    """

    kind = "grad2d"

    def __init__(self, height, width):
        self.height, self.width = int(height), int(width)
        self.cols = self.height * self.width
        self.rows = 2 * self.cols

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        _check_dim("apply", x.size, self.cols)
        img = x.reshape(self.height, self.width)
        dx = np.roll(img, -1, axis=1) - img
        dy = np.roll(img, -1, axis=0) - img
        return np.stack([dx, dy], axis=-1).ravel()

    def adjoint_apply(self, z):
        z = np.asarray(z, dtype=float)
        _check_dim("adjoint_apply", z.size, self.rows)
        field = z.reshape(self.height, self.width, 2)
        zx, zy = field[:, :, 0], field[:, :, 1]
        out = (np.roll(zx, 1, axis=1) - zx) + (np.roll(zy, 1, axis=0) - zy)
        return out.ravel()


class BlockExtractorMap(LinearMap):
    """Stacks the sub-vectors indexed by each block, in block order."""

    kind = "block-extractor"

    def __init__(self, blocks, cols):
        self.blocks = tuple(np.array(b, dtype=int) for b in blocks)
        self.cols = int(cols)
        self._gather = np.concatenate(self.blocks) if self.blocks else np.empty(0, int)
        if self._gather.size and np.unique(self._gather).size != self._gather.size:
            raise ValueError("blocks must not overlap")
        if self._gather.size and (self._gather.min() < 0 or self._gather.max() >= self.cols):
            raise ValueError("block index out of range")
        self.rows = self._gather.size

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        _check_dim("apply", x.size, self.cols)
        return x[self._gather].copy()

    def adjoint_apply(self, z):
        z = np.asarray(z, dtype=float)
        _check_dim("adjoint_apply", z.size, self.rows)
        out = np.zeros(self.cols)
        out[self._gather] = z
        return out


class CompositionMap(LinearMap):
    """A after B; the adjoint composes contravariantly."""

    kind = "composition"

    def __init__(self, A, B):
        if A.cols != B.rows:
            raise DimensionMismatchError(
                f"compose: inner dimensions differ ({A.cols} vs {B.rows})"
            )
        self.outer, self.inner = A, B
        self.rows, self.cols = A.rows, B.cols

    def apply(self, x):
        return self.outer.apply(self.inner.apply(x))

    def adjoint_apply(self, z):
        return self.inner.adjoint_apply(self.outer.adjoint_apply(z))


def identity(n):
    return IdentityMap(n)


def dense(matrix):
    return DenseMap(matrix)


def conv2d_periodic(height, width, kernel, use_fft=False):
    return Conv2DPeriodic(height, width, kernel, use_fft=use_fft)


def subsample(indices, cols):
    return SubsampleMap(indices, cols)


def grad2d(height, width):
    return Grad2D(height, width)


def block_extractor(blocks, cols):
    return BlockExtractorMap(blocks, cols)


def compose(A, B):
    return CompositionMap(A, B)


def gaussian_kernel(sigma, truncate=4.0):
    """Normalized 2-D Gaussian, truncated at ``truncate`` standard deviations."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(np.ceil(truncate * sigma))
    g = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def box_kernel(size):
    size = int(size)
    if size < 1:
        raise ValueError("size must be >= 1")
    return np.full((size, size), 1.0 / size**2)


_GRAM_CACHE = weakref.WeakKeyDictionary()


def gram_matrix(A, cap=4 * 10**6):
    """Dense A*A (cols x cols), cached per operator instance."""
    got = _GRAM_CACHE.get(A)
    if got is None:
        M = A.materialize(cap=cap)
        got = M.T @ M
        _GRAM_CACHE[A] = got
    return got


def operator_norm(A, iters=200, seed=0):
    """Spectral norm estimate of A via power iteration on A*A."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.cols)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A.adjoint_apply(A.apply(v))
        lam = np.linalg.norm(w)
        if lam == 0.0:
            return 0.0
        v = w / lam
    return float(np.sqrt(lam))
