"""Hot loops of the conv/pool layers.

Every kernel exists twice: a numba version and a vectorised numpy version
with identical results (including argmax tie-breaking).  The module-level
names resolve to numba when it is importable and not disabled through
``TREECNN_DISABLE_NUMBA``.  Both sets stay reachable through
:data:`IMPLEMENTATIONS` for tests and the benchmark.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from treecnn._accel import BACKEND, HAVE_NUMBA, njit

__all__ = [
    "BACKEND",
    "IMPLEMENTATIONS",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
]


# --------------------------------------------------------------------- numpy


def _im2col_numpy(xp, kh, kw):
    # xp: (N, C, Hp, Wp), already padded; stride 1
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im_numpy(cols, n, c, hp, wp, kh, kw):
    ho, wo = hp - kh + 1, wp - kw + 1
    d = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho, j : j + wo] += d[:, :, i, j]
    return out


def _maxpool_forward_numpy(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    xr = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def _maxpool_backward_numpy(dout, arg, h, w, k):
    n, c, ho, wo = dout.shape
    flat = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
    np.put_along_axis(flat, arg[..., None], dout[..., None], axis=-1)
    flat = flat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    dx[:, :, : ho * k, : wo * k] = flat.reshape(n, c, ho * k, wo * k)
    return dx


# --------------------------------------------------------------------- numba


@njit(cache=True)
def _im2col_loops(xp, kh, kw):
    n, c, hp, wp = xp.shape
    ho = hp - kh + 1
    wo = wp - kw + 1
    cols = np.empty((n * ho * wo, c * kh * kw), dtype=xp.dtype)
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                row = (b * ho + y) * wo + x
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[row, col] = xp[b, ch, y + i, x + j]
                            col += 1
    return cols


@njit(cache=True)
def _col2im_loops(cols, n, c, hp, wp, kh, kw):
    ho = hp - kh + 1
    wo = wp - kw + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                row = (b * ho + y) * wo + x
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, ch, y + i, x + j] += cols[row, col]
                            col += 1
    return out


@njit(cache=True)
def _maxpool_forward_loops(x, k):
    n, c, h, w = x.shape
    ho = h // k
    wo = w // k
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best = x[b, ch, y * k, xx * k]
                    bi = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, y * k + i, xx * k + j]
                            if v > best:
                                best = v
                                bi = i * k + j
                    out[b, ch, y, xx] = best
                    arg[b, ch, y, xx] = bi
    return out, arg


@njit(cache=True)
def _maxpool_backward_loops(dout, arg, h, w, k):
    n, c, ho, wo = dout.shape
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    a = arg[b, ch, y, xx]
                    dx[b, ch, y * k + a // k, xx * k + a % k] = dout[b, ch, y, xx]
    return dx


def _im2col_numba(xp, kh, kw):
    return _im2col_loops(np.ascontiguousarray(xp), kh, kw)


def _col2im_numba(cols, n, c, hp, wp, kh, kw):
    return _col2im_loops(np.ascontiguousarray(cols), n, c, hp, wp, kh, kw)


def _maxpool_forward_numba(x, k):
    return _maxpool_forward_loops(np.ascontiguousarray(x), k)


def _maxpool_backward_numba(dout, arg, h, w, k):
    return _maxpool_backward_loops(np.ascontiguousarray(dout), np.ascontiguousarray(arg), h, w, k)


IMPLEMENTATIONS = {
    "numpy": {
        "im2col": _im2col_numpy,
        "col2im": _col2im_numpy,
        "maxpool_forward": _maxpool_forward_numpy,
        "maxpool_backward": _maxpool_backward_numpy,
    },
}
if HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = {
        "im2col": _im2col_numba,
        "col2im": _col2im_numba,
        "maxpool_forward": _maxpool_forward_numba,
        "maxpool_backward": _maxpool_backward_numba,
    }

_active = IMPLEMENTATIONS[BACKEND]
im2col = _active["im2col"]
col2im = _active["col2im"]
maxpool_forward = _active["maxpool_forward"]
maxpool_backward = _active["maxpool_backward"]
