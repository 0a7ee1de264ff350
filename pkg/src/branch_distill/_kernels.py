"""Hot array kernels: im2col/col2im and max-pooling.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports and ``BRANCH_DISTILL_NUMBA`` is not
set to ``0``. Both paths produce bitwise-identical results: col2im accumulates
kernel offsets in the same (ki, kj) order, and max-pool ties go to the first
index in row-major window order.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False


def numba_requested():
    return os.environ.get("BRANCH_DISTILL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = _HAVE_NUMBA and numba_requested()


# --------------------------------------------------------------------------
# pure-numpy path
# --------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, stride):
    """Padded (B, C, Hp, Wp) -> contiguous (B, C, kh, kw, Ho, Wo) patches."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def col2im_numpy(cols, hp, wp, stride):
    B, C, kh, kw, ho, wo = cols.shape
    out = np.zeros((B, C, hp, wp), dtype=cols.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + span_h : stride, j : j + span_w : stride] += cols[:, :, i, j]
    return out


def maxpool_forward_numpy(x, k, stride):
    """Returns pooled values and the flat in-window argmax (first max wins)."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (k * k,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward_numpy(dout, idx, in_shape, k, stride):
    B, C, ho, wo = dout.shape
    dx = np.zeros(in_shape, dtype=dout.dtype)
    ki, kj = np.divmod(idx, k)
    rows = np.arange(ho)[None, None, :, None] * stride + ki
    cols = np.arange(wo)[None, None, None, :] * stride + kj
    bb = np.arange(B)[:, None, None, None]
    cc = np.arange(C)[None, :, None, None]
    np.add.at(dx, (bb, cc, rows, cols), dout)
    return dx


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        B, C = xp.shape[0], xp.shape[1]
        out = np.empty((B, C, kh, kw, ho, wo), dtype=xp.dtype)
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        for oh in range(ho):
                            r = oh * stride + i
                            for ow in range(wo):
                                out[b, c, i, j, oh, ow] = xp[b, c, r, ow * stride + j]
        return out

    @numba.njit(cache=True)
    def _col2im_nb(cols, hp, wp, stride):
        B, C, kh, kw, ho, wo = cols.shape
        out = np.zeros((B, C, hp, wp), dtype=cols.dtype)
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        for oh in range(ho):
                            r = oh * stride + i
                            for ow in range(wo):
                                out[b, c, r, ow * stride + j] += cols[b, c, i, j, oh, ow]
        return out

    @numba.njit(cache=True)
    def _maxpool_fwd_nb(x, k, stride, ho, wo):
        B, C = x.shape[0], x.shape[1]
        out = np.empty((B, C, ho, wo), dtype=x.dtype)
        idx = np.empty((B, C, ho, wo), dtype=np.int64)
        for b in range(B):
            for c in range(C):
                for oh in range(ho):
                    for ow in range(wo):
                        best = x[b, c, oh * stride, ow * stride]
                        arg = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, c, oh * stride + i, ow * stride + j]
                                if v > best:
                                    best = v
                                    arg = i * k + j
                        out[b, c, oh, ow] = best
                        idx[b, c, oh, ow] = arg
        return out, idx

    @numba.njit(cache=True)
    def _maxpool_bwd_nb(dout, idx, dx, k, stride):
        B, C, ho, wo = dout.shape
        for b in range(B):
            for c in range(C):
                for oh in range(ho):
                    for ow in range(wo):
                        a = idx[b, c, oh, ow]
                        dx[b, c, oh * stride + a // k, ow * stride + a % k] += dout[b, c, oh, ow]
        return dx


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _out_size(n, k, stride):
    return (n - k) // stride + 1


def im2col(xp, kh, kw, stride, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and _HAVE_NUMBA)
    if use:
        ho = _out_size(xp.shape[2], kh, stride)
        wo = _out_size(xp.shape[3], kw, stride)
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    return im2col_numpy(xp, kh, kw, stride)


def col2im(cols, hp, wp, stride, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and _HAVE_NUMBA)
    if use:
        return _col2im_nb(np.ascontiguousarray(cols), hp, wp, stride)
    return col2im_numpy(cols, hp, wp, stride)


def maxpool_forward(x, k, stride, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and _HAVE_NUMBA)
    if use:
        ho = _out_size(x.shape[2], k, stride)
        wo = _out_size(x.shape[3], k, stride)
        return _maxpool_fwd_nb(np.ascontiguousarray(x), k, stride, ho, wo)
    return maxpool_forward_numpy(x, k, stride)


def maxpool_backward(dout, idx, in_shape, k, stride, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and _HAVE_NUMBA)
    if use:
        dx = np.zeros(in_shape, dtype=dout.dtype)
        return _maxpool_bwd_nb(np.ascontiguousarray(dout), idx, dx, k, stride)
    return maxpool_backward_numpy(dout, idx, in_shape, k, stride)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
