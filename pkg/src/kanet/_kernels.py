"""Compiled inner loops for B-spline evaluation and the KANLinear spline branch.

Every kernel works one input feature at a time on a contiguous block of
rows. With the knots fixed the full Cox-de Boor recursion is branch-free over
rows and vectorizes, which is far faster than a per-element span search. Two
ping-pong buffers hold consecutive recursion levels so reads and writes never
alias. Inputs are feature-major: ``xT`` has shape ``(F, R)``.
"""
import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def last_nonempty(t):
    F, T = t.shape
    out = np.empty(F, dtype=np.int64)
    for f in range(F):
        q = T - 2
        while q > 0 and not t[f, q] < t[f, q + 1]:
            q -= 1
        out[f] = q
    return out


@numba.njit(cache=True, nogil=True)
def inverse_spans(t, order):
    """inv[f, p, i] = 1 / (t[f, i + p] - t[f, i]), or 0 for an empty span (0/0 -> 0)."""
    F, T = t.shape
    inv = np.zeros((F, order + 1, T))
    for f in range(F):
        for p in range(1, order + 1):
            for i in range(T - p):
                d = t[f, i + p] - t[f, i]
                if d > 0:
                    inv[f, p, i] = 1.0 / d
    return inv


CHUNK = 512


@numba.njit(cache=True, nogil=True)
def _column_levels(xv, n, tf, invf, order, lastq, buf_a, buf_b):
    """Run the recursion for one feature on ``xv[:n]``.

    Returns ``(top, lower)``: level ``order`` and level ``order - 1`` bases,
    each a ``(T - 1, CHUNK)`` buffer whose first ``n`` columns are valid.
    """
    T = tf.shape[0]
    zero = xv.dtype.type(0.0)
    one = xv.dtype.type(1.0)
    for i in range(T - 1):
        lo = tf[i]
        hi = tf[i + 1]
        row = buf_a[i]
        if i == lastq:
            # the last nonempty interval is closed on the right
            for r in range(n):
                v = xv[r]
                row[r] = one if (v >= lo) & (v <= hi) else zero
        else:
            for r in range(n):
                v = xv[r]
                row[r] = one if (v >= lo) & (v < hi) else zero
    src, dst = buf_a, buf_b
    for p in range(1, order + 1):
        for i in range(T - 1 - p):
            ti = tf[i]
            a = invf[p, i]
            tp = tf[i + p + 1]
            b = invf[p, i + 1]
            s0 = src[i]
            s1 = src[i + 1]
            d = dst[i]
            for r in range(n):
                v = xv[r]
                d[r] = (v - ti) * a * s0[r] + (tp - v) * b * s1[r]
        src, dst = dst, src
    return src, dst


@numba.njit(cache=True, nogil=True)
def dense_columns(xT, t, order, out, dout, with_deriv):
    """out[f, i, r] = B_i(xT[f, r]); dout holds d/dx when ``with_deriv`` (order >= 1)."""
    F, R = xT.shape
    T = t.shape[1]
    nb = out.shape[1]
    dt = xT.dtype
    last = last_nonempty(t)
    inv = inverse_spans(t, order).astype(dt)
    tt = t.astype(dt)
    buf_a = np.empty((T - 1, CHUNK), dt)
    buf_b = np.empty((T - 1, CHUNK), dt)
    xb = np.empty(CHUNK, dt)
    k = dt.type(order)
    for r0 in range(0, R, CHUNK):
        n = min(CHUNK, R - r0)
        for f in range(F):
            for r in range(n):
                xb[r] = xT[f, r0 + r]
            top, lower = _column_levels(xb, n, tt[f], inv[f], order, last[f], buf_a, buf_b)
            for i in range(nb):
                for r in range(n):
                    out[f, i, r0 + r] = top[i, r]
                if with_deriv:
                    ia = k * inv[f, order, i]
                    ib = k * inv[f, order, i + 1]
                    for r in range(n):
                        dout[f, i, r0 + r] = lower[i, r] * ia - lower[i + 1, r] * ib


@numba.njit(cache=True, nogil=True)
def spline_forward(xT, t, order, coef, yT):
    """yT[o, r] += sum_f sum_i B_i(xT[f, r]) * coef[f, i, o] (feature-major layout)."""
    F, R = xT.shape
    T = t.shape[1]
    nb, O = coef.shape[1], coef.shape[2]
    dt = xT.dtype
    last = last_nonempty(t)
    inv = inverse_spans(t, order).astype(dt)
    tt = t.astype(dt)
    c = coef.astype(dt)
    buf_a = np.empty((T - 1, CHUNK), dt)
    buf_b = np.empty((T - 1, CHUNK), dt)
    # contiguous staging buffers; strided row slices defeat vectorization
    xb = np.empty(CHUNK, dt)
    acc = np.empty((O, CHUNK), dt)
    for r0 in range(0, R, CHUNK):
        n = min(CHUNK, R - r0)
        acc[:, :] = 0.0
        for f in range(F):
            for r in range(n):
                xb[r] = xT[f, r0 + r]
            top, _ = _column_levels(xb, n, tt[f], inv[f], order, last[f], buf_a, buf_b)
            for o in range(O):
                yo = acc[o]
                for i in range(nb):
                    ci = c[f, i, o]
                    bi = top[i]
                    for r in range(n):
                        yo[r] += bi[r] * ci
        for o in range(O):
            for r in range(n):
                yT[o, r0 + r] += acc[o, r]


@numba.njit(cache=True, nogil=True, fastmath={"reassoc"})
def _dot(a, b, n):
    acc = a.dtype.type(0.0)
    for r in range(n):
        acc += a[r] * b[r]
    return acc


@numba.njit(cache=True, nogil=True)
def spline_backward(xT, t, order, coef, dyT, dxT, dcoef):
    """Accumulate input gradients into ``dxT`` (F, R) and coefficient gradients into ``dcoef``."""
    F, R = xT.shape
    T = t.shape[1]
    nb, O = coef.shape[1], coef.shape[2]
    dt = xT.dtype
    last = last_nonempty(t)
    inv = inverse_spans(t, order).astype(dt)
    tt = t.astype(dt)
    c = coef.astype(dt)
    buf_a = np.empty((T - 1, CHUNK), dt)
    buf_b = np.empty((T - 1, CHUNK), dt)
    g = np.empty(CHUNK, dt)
    xb = np.empty(CHUNK, dt)
    dxb = np.empty(CHUNK, dt)
    dyb = np.empty((O, CHUNK), dt)
    k = dt.type(order)
    for r0 in range(0, R, CHUNK):
        n = min(CHUNK, R - r0)
        for o in range(O):
            for r in range(n):
                dyb[o, r] = dyT[o, r0 + r]
        for f in range(F):
            for r in range(n):
                xb[r] = xT[f, r0 + r]
                dxb[r] = 0.0
            top, lower = _column_levels(xb, n, tt[f], inv[f], order, last[f], buf_a, buf_b)
            for i in range(nb):
                for r in range(n):
                    g[r] = 0.0
                for o in range(O):
                    ci = c[f, i, o]
                    dyo = dyb[o]
                    for r in range(n):
                        g[r] += dyo[r] * ci
                    dcoef[f, i, o] += _dot(top[i], dyo, n)
                if order == 0:
                    continue
                ia = k * inv[f, order, i]
                ib = k * inv[f, order, i + 1]
                l0 = lower[i]
                l1 = lower[i + 1]
                for r in range(n):
                    dxb[r] += g[r] * (l0[r] * ia - l1[r] * ib)
            for r in range(n):
                dxT[f, r0 + r] += dxb[r]
