"""Hot inner loops: 3x3 patch extraction, 2x2 max pooling and the fused
batch-norm / ReLU / dropout unit.

Each kernel has a numba implementation and a pure-numpy twin with identical
results.  The numba path is used when numba imports and the environment
variable ``OVALSEG_DISABLE_NUMBA`` is unset (or "0").  Both variants stay
importable under explicit names so they can be benchmarked against each
other and cross-checked in tests.
"""

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        return decorator


USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("OVALSEG_DISABLE_NUMBA", "0") in ("", "0")


# ---------------------------------------------------------------------------
# im2col for 3x3 kernels with zero padding 1, NHWC layout
#   cols[(n*H + i)*W + j, (ki*3 + kj)*C + c] = x[n, i+ki-1, j+kj-1, c]
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def im2col3x3_numba(x):
    n, h, w, c = x.shape
    cols = np.empty((n * h * w, 9 * c), dtype=x.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                row = (b * h + i) * w + j
                for ki in range(3):
                    si = i + ki - 1
                    for kj in range(3):
                        sj = j + kj - 1
                        base = (ki * 3 + kj) * c
                        if si < 0 or si >= h or sj < 0 or sj >= w:
                            for ch in range(c):
                                cols[row, base + ch] = 0
                        else:
                            for ch in range(c):
                                cols[row, base + ch] = x[b, si, sj, ch]
    return cols


def im2col3x3_numpy(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # (n, h, w, c, 3, 3) -> (n, h, w, 3, 3, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2, NHWC; ties go to the first maximum in row-major
# window order (0,0), (0,1), (1,0), (1,1)
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def maxpool2_forward_numba(x):
    n, h, w, c = x.shape
    h2 = h // 2
    w2 = w // 2
    out = np.empty((n, h2, w2, c), dtype=x.dtype)
    arg = np.empty((n, h2, w2, c), dtype=np.int8)
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for ch in range(c):
                    best = x[b, 2 * i, 2 * j, ch]
                    k = 0
                    v = x[b, 2 * i, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        k = 1
                    v = x[b, 2 * i + 1, 2 * j, ch]
                    if v > best:
                        best = v
                        k = 2
                    v = x[b, 2 * i + 1, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        k = 3
                    out[b, i, j, ch] = best
                    arg[b, i, j, ch] = k
    return out, arg


@njit(cache=True, nogil=True)
def maxpool2_backward_numba(dout, arg):
    n, h2, w2, c = dout.shape
    dx = np.zeros((n, 2 * h2, 2 * w2, c), dtype=dout.dtype)
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for ch in range(c):
                    k = arg[b, i, j, ch]
                    dx[b, 2 * i + k // 2, 2 * j + k % 2, ch] = dout[b, i, j, ch]
    return dx


def _windows(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)


def maxpool2_forward_numpy(x):
    win = _windows(x)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


def maxpool2_backward_numpy(dout, arg):
    n, h2, w2, c = dout.shape
    win = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    return win.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


# ---------------------------------------------------------------------------
# Counter-based dropout randomness.  Element ``i`` of a unit keyed by ``key``
# is kept when the top 24 bits of splitmix64(key + i * golden) / 2**24 >= p.
# Integer arithmetic wraps modulo 2**64 in both implementations.
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_M64 = (1 << 64) - 1


def splitmix64(z):
    """Scalar splitmix64 finalizer on Python ints."""
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def dropout_key(seed, unit):
    return splitmix64(splitmix64(int(seed) & _M64) ^ (int(unit) & _M64))


def keep_threshold(p):
    """Integer cut-off on the 24-bit draw: kept when draw >= threshold."""
    return int(np.ceil(p * (1 << 24)))


@njit(cache=True, nogil=True, inline="always")
def _draw24(key, i):
    z = key + np.uint64(i) * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return z >> np.uint64(40)


def draw24_numpy(key, size):
    with np.errstate(over="ignore"):
        z = np.uint64(key) + np.arange(size, dtype=np.uint64) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z >> np.uint64(40)


def keep_mask(key, size, p):
    """Boolean keep mask of length ``size`` (identical for both backends)."""
    return draw24_numpy(key, size) >= np.uint64(keep_threshold(p))


# ---------------------------------------------------------------------------
# Fused unit on a (pixels, channels) matrix:
#   xhat = (x - mu) * inv_std;  y = relu(gamma * xhat + beta) * keep / (1 - p)
# Train mode takes mu, var from the batch (returned for the running buffers);
# eval mode passes them in.  The backward pass only needs ``out`` and ``xhat``
# because a positive output marks exactly the elements that let gradient through.
# Per-channel sums accumulate in float64.
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def bn_stats_numba(x2):
    m, c = x2.shape
    s = np.zeros(c, dtype=np.float64)
    for r in range(m):
        for ch in range(c):
            s[ch] += x2[r, ch]
    mu = s / m
    q = np.zeros(c, dtype=np.float64)
    for r in range(m):
        for ch in range(c):
            d = x2[r, ch] - mu[ch]
            q[ch] += d * d
    return mu, q / m


def bn_stats_numpy(x2):
    x64 = x2.astype(np.float64)
    mu = np.ones(x2.shape[0]) @ x64 / x2.shape[0]
    xc = x64 - mu
    return mu, np.ones(x2.shape[0]) @ (xc * xc) / x2.shape[0]


@njit(cache=True, nogil=True)
def bn_relu_drop_apply_numba(x2, mu, inv_std, gamma, beta, key, thresh, scale):
    m, c = x2.shape
    xhat = np.empty_like(x2)
    out = np.empty_like(x2)
    mu32 = mu.astype(x2.dtype)
    is32 = inv_std.astype(x2.dtype)
    sc = x2.dtype.type(scale)
    th = np.uint64(thresh)
    drop = thresh > 0
    for r in range(m):
        for ch in range(c):
            xh = (x2[r, ch] - mu32[ch]) * is32[ch]
            xhat[r, ch] = xh
            y = xh * gamma[ch] + beta[ch]
            if y <= 0:
                y = 0
            elif drop:
                if _draw24(key, r * c + ch) >= th:
                    y = y * sc
                else:
                    y = 0
            out[r, ch] = y
    return out, xhat


def bn_relu_drop_apply_numpy(x2, mu, inv_std, gamma, beta, key, thresh, scale):
    dt = x2.dtype
    xhat = (x2 - mu.astype(dt)) * inv_std.astype(dt)
    y = np.maximum(xhat * gamma + beta, 0)
    if thresh > 0:
        keep = (draw24_numpy(key, x2.size) >= np.uint64(thresh)).reshape(x2.shape)
        y = np.where(keep & (y > 0), y * dt.type(scale), dt.type(0))
    return y, xhat


@njit(cache=True, nogil=True)
def bn_relu_drop_backward_numba(dout, out, xhat, gamma, inv_std, scale, train):
    m, c = dout.shape
    gate = np.empty_like(dout)
    dg = np.zeros(c, dtype=np.float64)
    db = np.zeros(c, dtype=np.float64)
    for r in range(m):
        for ch in range(c):
            g = dout[r, ch] * scale if out[r, ch] > 0 else 0.0
            gate[r, ch] = g
            dg[ch] += g * xhat[r, ch]
            db[ch] += g
    dx = np.empty_like(dout)
    if train:
        k1 = (gamma * db / m)
        k2 = (gamma * dg / m)
        for r in range(m):
            for ch in range(c):
                dx[r, ch] = inv_std[ch] * (gamma[ch] * gate[r, ch] - k1[ch] - xhat[r, ch] * k2[ch])
    else:
        for r in range(m):
            for ch in range(c):
                dx[r, ch] = inv_std[ch] * gamma[ch] * gate[r, ch]
    return dx, dg, db


def bn_relu_drop_backward_numpy(dout, out, xhat, gamma, inv_std, scale, train):
    m = dout.shape[0]
    ones = np.ones(m)
    gate = np.where(out > 0, dout.astype(np.float64) * scale, 0.0)
    dg = ones @ (gate * xhat)
    db = ones @ gate
    g64 = gamma.astype(np.float64)
    if train:
        dx = inv_std * (g64 * gate - g64 * db / m - xhat * (g64 * dg / m))
    else:
        dx = inv_std * g64 * gate
    return dx.astype(dout.dtype), dg, db


if USE_NUMBA:
    im2col3x3 = im2col3x3_numba
    maxpool2_forward = maxpool2_forward_numba
    maxpool2_backward = maxpool2_backward_numba
    bn_stats = bn_stats_numba
    bn_relu_drop_apply = bn_relu_drop_apply_numba
    bn_relu_drop_backward = bn_relu_drop_backward_numba
else:
    im2col3x3 = im2col3x3_numpy
    maxpool2_forward = maxpool2_forward_numpy
    maxpool2_backward = maxpool2_backward_numpy
    bn_stats = bn_stats_numpy
    bn_relu_drop_apply = bn_relu_drop_apply_numpy
    bn_relu_drop_backward = bn_relu_drop_backward_numpy


def backend():
    """Name of the active kernel backend."""
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Separable linear resampling operators
# ---------------------------------------------------------------------------


def bilinear_matrix(n_in, n_out, dtype=np.float64):
    """Corner-aligned linear interpolation operator of shape (n_out, n_in).

    Output sample ``k`` sits at source coordinate ``k * (n_in - 1) / (n_out - 1)``,
    so the first and last samples coincide with the input corners.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m.astype(dtype)


def adaptive_pool_matrix(n_in, n_out, dtype=np.float64):
    """Averaging operator of shape (n_out, n_in) over near-equal bins.

    Bin ``k`` spans ``[floor(k*n_in/n_out), ceil((k+1)*n_in/n_out))``; bins may
    overlap by one cell when ``n_out`` does not divide ``n_in``.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for k in range(n_out):
        lo = (k * n_in) // n_out
        hi = -((-(k + 1) * n_in) // n_out)
        m[k, lo:hi] = 1.0 / (hi - lo)
    return m.astype(dtype)
