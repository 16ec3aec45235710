"""Array kernels and the deterministic RNG used throughout voxelnet.

Volumes are plain ``numpy`` float64 arrays of shape ``(depth, height, width)``
in C order, so the flat offset of ``(i, j, k)`` is ``(i * height + j) * width + k``.
Matrices are 2D float64 arrays, row-major.

Random numbers come from SplitMix64 (Steele, Lea and Flood, 2014; the seeding
generator of the xorshift/xoshiro family).  It is counter based, so a batch of
``n`` draws is computed in one vectorised step and the stream is identical on
every platform:

    z  = state + i * 0x9E3779B97F4A7C15            (i = 1, 2, ...)
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

all arithmetic modulo 2**64.  Doubles in ``[0, 1)`` are ``(out >> 11) * 2**-53``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, ParameterError
from .validation import as_float_array, check_window

__all__ = [
    "Rng",
    "derive_seed",
    "sigmoid",
    "convolve3d_valid",
    "convolve2d_valid",
    "convolve_bank3d",
    "maxpool3d",
    "maxpool2d",
    "maxpool_trailing",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# target size (in float64 elements) of one im2col block
_BLOCK_ELEMS = 1 << 22


def _mix64(z):
    """SplitMix64 finaliser on a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def _mix64_int(z):
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master, stage, index=0):
    """Child seed for a named pipeline stage.

    ``mix64(master + GAMMA * (fnv1a64(stage) ^ mix64(index + 1)))``; changing
    any of the three inputs decorrelates the child stream.
    """
    h = _FNV_OFFSET
    for byte in str(stage).encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return _mix64_int(int(master) + _GAMMA * (h ^ _mix64_int(int(index) + 1)))


class Rng:
    """Deterministic SplitMix64 stream.

    Not thread safe; give each concurrent task its own ``Rng`` built from
    :func:`derive_seed`.
    """

    def __init__(self, seed=0):
        self.state = int(seed) & _MASK64

    def next_u64(self, n):
        n = int(n)
        if n < 0:
            raise ParameterError(f"draw count must be >= 0, got {n}")
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            z = steps + np.uint64(self.state)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return _mix64(z)

    def random(self, n):
        """``n`` doubles in ``[0, 1)``."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo, hi, n):
        if not lo < hi:
            raise ParameterError(f"uniform requires lo < hi, got [{lo}, {hi})")
        out = lo + (hi - lo) * self.random(n)
        # rounding can land exactly on hi for wide ranges
        return np.minimum(out, np.nextafter(hi, lo))

    def normal(self, n, sd=1.0):
        """Box-Muller normals; consumes ``2 * ceil(n / 2)`` draws."""
        m = (int(n) + 1) // 2
        u = self.random(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return sd * z[: int(n)]

    def integers(self, high, n):
        """``n`` integers uniform on ``[0, high)``."""
        if high < 1:
            raise ParameterError(f"integers requires high >= 1, got {high}")
        return np.minimum((self.random(n) * high).astype(np.int64), high - 1)

    def permutation(self, n):
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")


def sigmoid(z):
    """Logistic function, evaluated without overflow.

    Results are clipped into the open interval (0, 1) so saturated units never
    report exactly 0 or 1.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, np.finfo(np.float64).tiny, 1.0 - 2.0**-53)


def _correlate_bank(x, kernels):
    """Valid cross-correlation of ``x`` with each kernel in ``kernels``.

    ``kernels`` has shape ``(p,) + k`` with ``len(k) == x.ndim``.  Works by
    im2col blocks along the first output axis, so memory stays bounded for
    full-sized volumes.  Returns shape ``(p,) + out``.
    """
    kshape = kernels.shape[1:]
    p = kernels.shape[0]
    if len(kshape) != x.ndim:
        raise DimensionError(f"filter rank {len(kshape)} does not match input rank {x.ndim}")
    for axis, (n, r) in enumerate(zip(x.shape, kshape)):
        if r > n:
            raise DimensionError(
                f"filter extent {r} exceeds input extent {n} along axis {axis}"
            )
    out_shape = tuple(n - r + 1 for n, r in zip(x.shape, kshape))
    ksize = int(np.prod(kshape))
    windows = sliding_window_view(x, kshape)
    kmat = kernels.reshape(p, ksize)
    out = np.empty((p,) + out_shape)
    row = int(np.prod(out_shape[1:])) * ksize
    step = max(1, _BLOCK_ELEMS // max(row, 1))
    for start in range(0, out_shape[0], step):
        stop = min(start + step, out_shape[0])
        cols = windows[start:stop].reshape(-1, ksize)
        block = cols @ kmat.T
        out[:, start:stop] = block.T.reshape((p, stop - start) + out_shape[1:])
    return out


def convolve_bank3d(x, filters):
    """True (index-reversed) valid convolution of ``x`` with every filter.

    ``x`` is ``(m, p, q)``; ``filters`` is ``(n_filters, r, s, t)``.  Output is
    ``(n_filters, m - r + 1, p - s + 1, q - t + 1)``.
    """
    x = as_float_array(x, 3, "input")
    filters = as_float_array(filters, 4, "filters")
    return _correlate_bank(x, np.ascontiguousarray(filters[:, ::-1, ::-1, ::-1]))


def convolve3d_valid(x, w):
    """Valid 3D convolution.

    ``out[i, j, k] = sum_{u,v,w} W[r-1-u, s-1-v, t-1-w] * x[i+u, j+v, k+w]``,
    i.e. the filter is reversed along all three axes.
    """
    w = as_float_array(w, 3, "filter")
    return convolve_bank3d(x, w[None])[0]


def convolve2d_valid(x, w):
    """Valid 2D convolution with the filter reversed along both axes."""
    x = as_float_array(x, 2, "input")
    w = as_float_array(w, 2, "filter")
    return _correlate_bank(x, np.ascontiguousarray(w[None, ::-1, ::-1]))[0]


def maxpool_trailing(fm, window):
    """Non-overlapping max-pool over the last ``len(window)`` axes.

    Trailing partial windows are dropped.  Leading axes are batch axes.
    """
    fm = np.asarray(fm, dtype=np.float64)
    nd = len(window)
    lead = fm.shape[: fm.ndim - nd]
    spatial = fm.shape[fm.ndim - nd:]
    pooled = tuple(n // a for n, a in zip(spatial, window))
    if min(pooled, default=1) == 0:
        raise DimensionError(f"pool window {window} larger than map {spatial}")
    crop = fm[(Ellipsis,) + tuple(slice(0, n * a) for n, a in zip(pooled, window))]
    split = lead
    for n, a in zip(pooled, window):
        split = split + (n, a)
    axes = tuple(len(lead) + 2 * i + 1 for i in range(nd))
    return crop.reshape(split).max(axis=axes)


def maxpool3d(fm, window):
    fm = as_float_array(fm, 3, "feature map")
    return maxpool_trailing(fm, check_window(window, 3))


def maxpool2d(fm, window):
    fm = as_float_array(fm, 2, "feature map")
    return maxpool_trailing(fm, check_window(window, 2))
