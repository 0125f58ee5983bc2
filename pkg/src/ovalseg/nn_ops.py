"""Layer primitives with hand-written backward passes.

Activations are numpy arrays in NHWC layout and convolution kernels are
stored HWIO, i.e. ``(kh, kw, in_channels, out_channels)``.  Every
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(dout, cache)``.  Convolution is cross-correlation (no kernel
flip).
"""

import numpy as np

from . import kernels
from .errors import InvalidInputError, InvalidStateError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def colsum(x2):
    """Column sums of a 2-D array via a BLAS matrix-vector product.

    ``x2.sum(axis=0)`` is an order of magnitude slower for the tall, narrow
    (pixels x channels) matrices that dominate here.
    """
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_forward(x, w, b, padding=None):
    n, h, wd, c = x.shape
    kh, kw, ci, o = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if (kh, kw) == (3, 3):
        if padding not in (None, 1):
            raise InvalidInputError("3x3 convolution requires padding 1")
        cols = kernels.im2col3x3(x)
    elif (kh, kw) == (1, 1):
        if padding not in (None, 0):
            raise InvalidInputError("1x1 convolution requires padding 0")
        cols = x.reshape(n * h * wd, c)
    else:
        raise ShapeError(f"conv2d: unsupported kernel size {kh}x{kw}")
    out = cols @ w.reshape(-1, o)
    out += b
    return out.reshape(n, h, wd, o), (x.shape, w, cols)


def conv2d_backward(dout, cache, need_dx=True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false."""
    xshape, w, cols = cache
    kh, kw, c, o = w.shape
    d = dout.reshape(-1, o)
    db = colsum(d)
    dw = (cols.T @ d).reshape(w.shape)
    dx = None
    if need_dx:
        if kh == 3:
            # correlation of dout with the spatially flipped, channel-swapped kernel
            wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(9 * o, c)
            dx = (kernels.im2col3x3(np.ascontiguousarray(dout)) @ wf).reshape(xshape)
        else:
            dx = (d @ w.reshape(c, o).T).reshape(xshape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch norm.  In train mode the running buffers are updated in place."""
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    if train:
        if shape[0] < 2:
            raise InvalidStateError("batchnorm in train mode needs a batch of at least 2")
        m = x2.shape[0]
        mu = colsum(x2) / m
        xc = x2 - mu
        var = colsum(xc * xc) / m
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x2 - running_mean.astype(x.dtype)) * inv_std
    out = xhat * gamma + beta
    return out.reshape(shape), (xhat, gamma, inv_std, train)


def batchnorm_backward(dout, cache):
    xhat, gamma, inv_std, train = cache
    d2 = dout.reshape(xhat.shape)
    dgamma = colsum(d2 * xhat)
    dbeta = colsum(d2)
    dxhat = d2 * gamma
    if not train:
        return (dxhat * inv_std).reshape(dout.shape), dgamma, dbeta
    m = xhat.shape[0]
    s1 = colsum(dxhat)
    s2 = colsum(dxhat * xhat)
    dx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
    return dx.reshape(dout.shape), dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, out > 0


def relu_backward(dout, cache):
    return dout * cache


def sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dout, cache):
    return dout * cache * (1.0 - cache)


def dropout_forward(x, p, key, train):
    """Inverted dropout; eval mode (or ``p == 0``) is the identity.

    ``key`` is an integer from :func:`kernels.dropout_key`; the keep mask is
    a pure function of it, the element index and ``p``.
    """
    if not 0 <= p < 1:
        raise InvalidInputError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    keep = kernels.keep_mask(key, x.size, p).reshape(x.shape)
    scale = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * scale, scale


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache


def bn_relu_dropout_forward(x, gamma, beta, running_mean, running_var, p, key, train,
                            momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch norm, ReLU and inverted dropout in one pass.

    Matches ``dropout(relu(batchnorm(x)))`` built from the separate ops with
    the same key; per-channel statistics are accumulated in float64.
    """
    if not 0 <= p < 1:
        raise InvalidInputError(f"dropout probability must be in [0, 1), got {p}")
    shape = x.shape
    x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
    m = x2.shape[0]
    if train:
        if shape[0] < 2:
            raise InvalidStateError("batchnorm in train mode needs a batch of at least 2")
        mu, var = kernels.bn_stats(x2)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    thresh = kernels.keep_threshold(p) if train and p > 0 else 0
    scale = 1.0 / (1.0 - p) if thresh else 1.0
    out, xhat = kernels.bn_relu_drop_apply(
        x2, mu, inv_std, gamma, beta, np.uint64(key), thresh, scale
    )
    return out.reshape(shape), (out, xhat, gamma, inv_std, scale, train)


def bn_relu_dropout_backward(dout, cache):
    out, xhat, gamma, inv_std, scale, train = cache
    d2 = np.ascontiguousarray(dout, dtype=out.dtype).reshape(out.shape)
    dx, dg, db = kernels.bn_relu_drop_backward(d2, out, xhat, gamma.astype(np.float64), inv_std, scale, train)
    return dx.reshape(dout.shape), dg.astype(gamma.dtype), db.astype(gamma.dtype)


# ---------------------------------------------------------------------------
# spatial resampling
# ---------------------------------------------------------------------------


def maxpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    return kernels.maxpool2_forward(np.ascontiguousarray(x))


def maxpool2_backward(dout, cache):
    return kernels.maxpool2_backward(np.ascontiguousarray(dout), cache)


def _separable(x, rows, cols):
    """Apply ``rows`` along H and ``cols`` along W of an NHWC tensor."""
    n, h, w, c = x.shape
    a = rows.shape[0]
    y = np.matmul(rows, x.reshape(n, h, w * c)).reshape(n * a, w, c)
    return np.matmul(cols, y).reshape(n, a, cols.shape[0], c)


def resize_forward(x, out_h, out_w):
    """Corner-aligned bilinear resize of the spatial axes."""
    rows = kernels.bilinear_matrix(x.shape[1], out_h, x.dtype)
    cols = kernels.bilinear_matrix(x.shape[2], out_w, x.dtype)
    return _separable(x, rows, cols), (rows, cols)


def resize_backward(dout, cache):
    rows, cols = cache
    return _separable(dout, rows.T, cols.T)


def upsample2_forward(x):
    return resize_forward(x, 2 * x.shape[1], 2 * x.shape[2])


upsample2_backward = resize_backward


def adaptive_avgpool_forward(x, out_h, out_w):
    h, w = x.shape[1:3]
    if out_h > h or out_w > w:
        raise ShapeError(f"adaptive pool to {out_h}x{out_w} from {h}x{w}")
    rows = kernels.adaptive_pool_matrix(h, out_h, x.dtype)
    cols = kernels.adaptive_pool_matrix(w, out_w, x.dtype)
    return _separable(x, rows, cols), (rows, cols)


adaptive_avgpool_backward = resize_backward


def concat_forward(tensors):
    shapes = {t.shape[:-1] for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    return np.concatenate(tensors, axis=-1), [t.shape[-1] for t in tensors]


def concat_backward(dout, cache):
    """Split the channel gradient back into the concatenated pieces."""
    return np.split(dout, np.cumsum(cache)[:-1], axis=-1)


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------


def rel_error(a, b, floor=0.0):
    """``||a - b|| / max(||a||, ||b||, floor)``; zero when both vanish.

    A positive ``floor`` keeps gradients that are exactly zero in theory
    (and rounding noise in practice) from reading as a 100% mismatch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if den == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def check_layer(forward, backward, inputs, seed=0, h=1e-5, floor=0.0):
    """Compare analytic and numeric gradients of ``sum(forward(*inputs) * r)``.

    ``backward(dout, cache)`` must return one gradient per input (``None``
    to skip).  Returns the list of relative errors.
    """
    rng = np.random.default_rng(seed)
    out, cache = forward(*inputs)
    r = rng.normal(size=np.shape(out))
    grads = backward(r, cache)
    if not isinstance(grads, (tuple, list)):
        grads = (grads,)
    errs = []
    for x, g in zip(inputs, grads):
        if g is None:
            continue
        num = numeric_grad(lambda: float(np.sum(forward(*inputs)[0] * r)), x, h)
        errs.append(rel_error(g, num, floor))
    return errs
