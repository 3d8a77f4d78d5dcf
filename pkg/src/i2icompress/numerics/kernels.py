"""Hot loops for convolution lowering (im2col / col2im).

Two implementations share one contract:

* a numba ``@njit`` path (default when numba imports cleanly), and
* a pure-numpy path built from strided slice copies.

Set ``I2IC_NO_NUMBA=1`` in the environment before import to force the numpy
path. ``BACKEND`` reports which one is active. Both paths perform the same
additions in the same order per output element, so they agree bit-for-bit.

Column layout is ``(C, k, k, N, Ho, Wo)`` flattened to ``(C*k*k, N*Ho*Wo)``,
so a convolution is a single ``(O, C*k*k) @ (C*k*k, N*Ho*Wo)`` GEMM. Zero
padding of ``pad`` pixels per side is applied implicitly.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("I2IC_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by I2IC_NO_NUMBA")
    from numba import njit
except ImportError:
    njit = None


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col_numpy(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, n * ho * wo)


def col2im_numpy(cols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = cols.reshape(c, k, k, n, ho, wo)
    gx = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    gx = gx.transpose(1, 0, 2, 3)
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(gx)


if njit is not None:

    @njit(cache=True, boundscheck=False)
    def _valid_range(j, stride, pad, wo, w):  # pragma: no cover - compiled
        x0 = 0
        while x0 < wo and j + stride * x0 - pad < 0:
            x0 += 1
        x1 = wo
        while x1 > x0 and j + stride * (x1 - 1) - pad >= w:
            x1 -= 1
        return x0, x1

    @njit(cache=True, boundscheck=False)
    def _im2col_jit(x, k, stride, pad, ho, wo):  # pragma: no cover - compiled
        n, c, h, w = x.shape
        cols = np.zeros(c * k * k * n * ho * wo, dtype=x.dtype)
        xf = x.ravel()
        o = 0
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    x0, x1 = _valid_range(j, stride, pad, wo, w)
                    for b in range(n):
                        base = (b * c + ci) * h
                        for y in range(ho):
                            yy = i + stride * y - pad
                            if 0 <= yy < h:
                                src = (base + yy) * w + j - pad
                                for xo in range(x0, x1):
                                    cols[o + xo] = xf[src + stride * xo]
                            o += wo
        return cols.reshape((c * k * k, n * ho * wo))

    @njit(cache=True, boundscheck=False)
    def _col2im_jit(cols, n, c, h, w, k, stride, pad, ho, wo):  # pragma: no cover - compiled
        gx = np.zeros(n * c * h * w, dtype=cols.dtype)
        cf = cols.ravel()
        o = 0
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    x0, x1 = _valid_range(j, stride, pad, wo, w)
                    for b in range(n):
                        base = (b * c + ci) * h
                        for y in range(ho):
                            yy = i + stride * y - pad
                            if 0 <= yy < h:
                                dst = (base + yy) * w + j - pad
                                for xo in range(x0, x1):
                                    gx[dst + stride * xo] += cf[o + xo]
                            o += wo
        return gx.reshape((n, c, h, w))

    BACKEND = "numba"

    def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
        if x.dtype.kind == "c":
            return im2col_numpy(x, k, stride, pad)
        h, w = x.shape[2:]
        return _im2col_jit(np.ascontiguousarray(x), k, stride, pad,
                           out_size(h, k, stride, pad), out_size(w, k, stride, pad))

    def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
        if cols.dtype.kind == "c":
            return col2im_numpy(cols, x_shape, k, stride, pad)
        n, c, h, w = x_shape
        return _col2im_jit(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad,
                           out_size(h, k, stride, pad), out_size(w, k, stride, pad))

else:
    BACKEND = "numpy"
    im2col = im2col_numpy
    col2im = col2im_numpy
