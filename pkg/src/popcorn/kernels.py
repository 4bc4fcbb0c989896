"""Numeric hot loops, each with a numba kernel and a pure-numpy twin.

Public functions dispatch on :func:`popcorn._accel.numba_enabled`.  Both
paths compute the same quantities; convolutions may differ in the last bits
because the summation order differs, while the distance, score and
enumeration kernels use an identical sequential order and agree exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit


# ---------------------------------------------------------------------------
# convolution ("same" zero padding, stride 1, odd cubic kernels)


@njit
def _im2col2d_nb(xp, kh, kw, out):
    nb, nc = xp.shape[0], xp.shape[1]
    h, w = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    for c in range(nc):
        for di in range(kh):
            for dj in range(kw):
                r = (c * kh + di) * kw + dj
                for n in range(nb):
                    for i in range(h):
                        base = (n * h + i) * w
                        for j in range(w):
                            out[r, base + j] = xp[n, c, i + di, j + dj]


@njit
def _col2im2d_nb(cols, kh, kw, gxp):
    nb, nc = gxp.shape[0], gxp.shape[1]
    h, w = gxp.shape[2] - kh + 1, gxp.shape[3] - kw + 1
    for c in range(nc):
        for di in range(kh):
            for dj in range(kw):
                r = (c * kh + di) * kw + dj
                for n in range(nb):
                    for i in range(h):
                        base = (n * h + i) * w
                        for j in range(w):
                            gxp[n, c, i + di, j + dj] += cols[r, base + j]


@njit
def _im2col3d_nb(xp, kd, kh, kw, out):
    nb, nc = xp.shape[0], xp.shape[1]
    d, h, w = xp.shape[2] - kd + 1, xp.shape[3] - kh + 1, xp.shape[4] - kw + 1
    for c in range(nc):
        for dk in range(kd):
            for di in range(kh):
                for dj in range(kw):
                    r = ((c * kd + dk) * kh + di) * kw + dj
                    for n in range(nb):
                        for k in range(d):
                            for i in range(h):
                                base = ((n * d + k) * h + i) * w
                                for j in range(w):
                                    out[r, base + j] = xp[n, c, k + dk, i + di, j + dj]


@njit
def _col2im3d_nb(cols, kd, kh, kw, gxp):
    nb, nc = gxp.shape[0], gxp.shape[1]
    d, h, w = gxp.shape[2] - kd + 1, gxp.shape[3] - kh + 1, gxp.shape[4] - kw + 1
    for c in range(nc):
        for dk in range(kd):
            for di in range(kh):
                for dj in range(kw):
                    r = ((c * kd + dk) * kh + di) * kw + dj
                    for n in range(nb):
                        for k in range(d):
                            for i in range(h):
                                base = ((n * d + k) * h + i) * w
                                for j in range(w):
                                    gxp[n, c, k + dk, i + di, j + dj] += cols[r, base + j]


def _im2col(xp, k, spatial):
    nb, nc = xp.shape[:2]
    cols = np.empty((nc * int(np.prod(k)), nb * int(np.prod(spatial))), dtype=xp.dtype)
    if len(k) == 2:
        _im2col2d_nb(xp, k[0], k[1], cols)
    else:
        _im2col3d_nb(xp, k[0], k[1], k[2], cols)
    return cols


def _pad(x, r):
    if r == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0)) + ((r, r),) * (x.ndim - 2))


def _conv_fwd_np(x, w, b):
    nd = x.ndim - 2
    k = w.shape[2:]
    xp = _pad(x, k[0] // 2)
    win = sliding_window_view(xp, k, axis=tuple(range(2, 2 + nd)))
    # win: (B, C, *S, *K) against w: (O, C, *K)
    y = np.tensordot(win, w, axes=([1] + list(range(2 + nd, 2 + 2 * nd)), [1] + list(range(2, 2 + nd))))
    y = np.moveaxis(y, -1, 1)
    y += b.reshape((1, -1) + (1,) * nd)
    return np.ascontiguousarray(y)


def _conv_bwd_np(x, w, gy):
    nd = x.ndim - 2
    k = w.shape[2:]
    r = k[0] // 2
    sp = tuple(range(2, 2 + nd))
    kax = list(range(2 + nd, 2 + 2 * nd))
    xp = _pad(x, r)
    win = sliding_window_view(xp, k, axis=sp)
    gw = np.tensordot(gy, win, axes=([0] + list(sp), [0] + list(sp)))
    gb = gy.sum(axis=(0,) + sp)
    gyp = _pad(gy, r)
    gwin = sliding_window_view(gyp, k, axis=sp)
    wf = w[(slice(None), slice(None)) + (slice(None, None, -1),) * nd]
    gx = np.tensordot(gwin, wf, axes=([1] + kax, [0] + list(range(2, 2 + nd))))
    gx = np.moveaxis(gx, -1, 1)
    return np.ascontiguousarray(gx), gw.astype(w.dtype, copy=False), gb.astype(w.dtype, copy=False)


def conv_forward(x, w, b):
    """Cross-correlate ``x`` (B, C, *S) with ``w`` (O, C, *K) plus bias."""
    nd = x.ndim - 2
    if _accel.numba_enabled() and nd in (2, 3):
        k = w.shape[2:]
        cols = _im2col(_pad(x, k[0] // 2), k, x.shape[2:])
        y = w.reshape(w.shape[0], -1) @ cols
        y += b[:, None]
        y = y.reshape((w.shape[0], x.shape[0]) + x.shape[2:])
        return np.ascontiguousarray(np.swapaxes(y, 0, 1))
    return _conv_fwd_np(x, w, b)


def conv_backward(x, w, gy):
    """Gradients of :func:`conv_forward` w.r.t. input, weights and bias."""
    nd = x.ndim - 2
    if _accel.numba_enabled() and nd in (2, 3):
        k = w.shape[2:]
        r = k[0] // 2
        xp = _pad(x, r)
        cols = _im2col(xp, k, x.shape[2:])
        g2 = np.ascontiguousarray(np.swapaxes(gy, 0, 1)).reshape(w.shape[0], -1)
        w2 = w.reshape(w.shape[0], -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        gcols = w2.T @ g2
        gxp = np.zeros_like(xp)
        if nd == 2:
            _col2im2d_nb(gcols, k[0], k[1], gxp)
        else:
            _col2im3d_nb(gcols, k[0], k[1], k[2], gxp)
        if r:
            gxp = gxp[(slice(None), slice(None)) + (slice(r, -r),) * nd]
        return np.ascontiguousarray(gxp), gw, gb
    return _conv_bwd_np(x, w, gy)


# ---------------------------------------------------------------------------
# proximity graph


@njit
def _sq_dist_nb(u, t, out):
    for i in range(u.shape[0]):
        for j in range(t.shape[0]):
            s = 0.0
            for k in range(u.shape[1]):
                d = u[i, k] - t[j, k]
                s += d * d
            out[i, j] = s


def _sq_dist_np(u, t):
    out = np.zeros((u.shape[0], t.shape[0]), dtype=np.float64)
    for k in range(u.shape[1]):
        d = u[:, None, k] - t[None, :, k]
        out += d * d
    return out


def pairwise_sq_dist(u, t):
    """Squared euclidean distances between rows of ``u`` and rows of ``t``.

    Accumulates coordinate by coordinate in index order on both backends so
    the result is bit-identical to a naive double loop.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    if _accel.numba_enabled():
        out = np.empty((u.shape[0], t.shape[0]), dtype=np.float64)
        _sq_dist_nb(u, t, out)
        return out
    return _sq_dist_np(u, t)


@njit
def _smallest_sums_nb(mat, p, out):
    # keep the p smallest values of each row in an ascending insertion buffer
    buf = np.empty(p, dtype=np.float64)
    for i in range(mat.shape[0]):
        filled = 0
        for j in range(mat.shape[1]):
            v = mat[i, j]
            if filled == p:
                if v >= buf[p - 1]:
                    continue
                pos = p - 1
            else:
                pos = filled
                filled += 1
            while pos > 0 and buf[pos - 1] > v:
                buf[pos] = buf[pos - 1]
                pos -= 1
            buf[pos] = v
        s = 0.0
        for k in range(p):
            s += buf[k]
        out[i] = s


def _smallest_sums_np(mat, p):
    srt = np.sort(mat, axis=1)
    out = np.zeros(mat.shape[0], dtype=np.float64)
    for k in range(p):
        out += srt[:, k]
    return out


def smallest_sums(mat, p):
    """Per row, the ascending-order sum of its ``p`` smallest entries."""
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    p = int(min(p, mat.shape[1]))
    if _accel.numba_enabled():
        out = np.empty(mat.shape[0], dtype=np.float64)
        _smallest_sums_nb(mat, p, out)
        return out
    return _smallest_sums_np(mat, p)


# ---------------------------------------------------------------------------
# signed-rank sign enumeration


@njit
def _count_extreme_nb(ranks2, w_obs2):
    n = ranks2.shape[0]
    total = 0
    for k in range(n):
        total += ranks2[k]
    count = 0
    for mask in range(1 << n):
        s = 0
        for k in range(n):
            if (mask >> k) & 1:
                s += ranks2[k]
        if min(s, total - s) <= w_obs2:
            count += 1
    return count


def _count_extreme_np(ranks2, w_obs2):
    sums = np.zeros(1, dtype=np.int64)
    for r in ranks2:
        sums = np.concatenate([sums, sums + r])
    total = int(ranks2.sum())
    return int(np.count_nonzero(np.minimum(sums, total - sums) <= w_obs2))


def count_extreme_signs(ranks2, w_obs2):
    """Number of the 2**n sign patterns whose min(W+, W-) is <= ``w_obs2``.

    Ranks are passed doubled (``2 * rank``) so midranks stay integral.
    """
    ranks2 = np.ascontiguousarray(ranks2, dtype=np.int64)
    if _accel.numba_enabled():
        return int(_count_extreme_nb(ranks2, int(w_obs2)))
    return _count_extreme_np(ranks2, int(w_obs2))
