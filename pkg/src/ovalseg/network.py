"""U-Net with a pyramid-pooling bottleneck, EMA shadow weights and checkpoints.

Every convolutional unit is conv3x3 -> batch norm -> ReLU -> dropout, and a
block is two units.  The bottleneck output is pooled at each pyramid scale,
projected by a 1x1 convolution to a quarter of its channels, upsampled back
and concatenated with the bottleneck itself (doubling the channels) before
one more block.  The decoder upsamples bilinearly and concatenates the
encoder skip at each level.  A 1x1 head and a sigmoid give one probability
per pixel.
"""

import io
import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import kernels
from . import nn_ops as ops
from .errors import ConfigError, FormatError, InvalidStateError

EMA_BETA = 0.995


@dataclass
class NetConfig:
    init_channels: int = 8
    depth: int = 3
    pyramid_scales: tuple = (1, 2, 3, 6)
    dropout_p: float = 0.4
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        self.pyramid_scales = tuple(int(s) for s in self.pyramid_scales)
        if self.init_channels < 4 or self.init_channels % 4:
            raise ConfigError(f"init_channels must be >= 4 and divisible by 4, got {self.init_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if not self.pyramid_scales or min(self.pyramid_scales) < 1:
            raise ConfigError(f"bad pyramid scales {self.pyramid_scales}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def width(self, level):
        return self.init_channels * 2 ** level

    @property
    def bottleneck_channels(self):
        return self.width(self.depth)

    def check_input(self, h, w):
        f = 2 ** self.depth
        for name, dim in (("height", h), ("width", w)):
            if dim % f:
                raise ConfigError(f"input {name} {dim} is not divisible by 2**depth = {f}")
            if dim // f < max(self.pyramid_scales):
                raise ConfigError(
                    f"input {name} {dim} leaves a {dim // f}-pixel bottleneck, smaller than pyramid scale "
                    f"{max(self.pyramid_scales)}"
                )

    def to_text(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(out)

    @classmethod
    def from_text(cls, text):
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            if key == "pyramid_scales":
                kw[key] = tuple(int(v) for v in val.split(","))
            elif key == "dropout_p":
                kw[key] = float(val)
            else:
                kw[key] = int(val)
        return cls(**kw)


def _units(cfg):
    """(name, in_channels, out_channels) for every conv->BN->ReLU->dropout unit."""
    units = []
    c_in = cfg.in_channels
    for lvl in range(cfg.depth):
        c = cfg.width(lvl)
        units += [(f"enc{lvl}.a", c_in, c), (f"enc{lvl}.b", c, c)]
        c_in = c
    cb = cfg.bottleneck_channels
    units += [("bott.a", c_in, cb), ("bott.b", cb, cb)]
    units += [("post.a", cb + len(cfg.pyramid_scales) * (cb // 4), cb), ("post.b", cb, cb)]
    c_up = cb
    for lvl in reversed(range(cfg.depth)):
        c = cfg.width(lvl)
        units += [(f"dec{lvl}.a", c_up + c, c), (f"dec{lvl}.b", c, c)]
        c_up = c
    return units


def init_params(cfg, seed=0, dtype=np.float32):
    """Kaiming fan-in normal kernels (HWIO), zero biases, unit/zero BN affine.

    Returns ``(params, buffers)``; buffers hold BN running statistics.
    """
    rng = np.random.default_rng(seed)
    params = {}
    buffers = {}

    def conv(name, c_in, c_out, k):
        fan_in = c_in * k * k
        params[f"{name}.w"] = (rng.normal(size=(k, k, c_in, c_out)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"{name}.b"] = np.zeros(c_out, dtype=dtype)

    for name, c_in, c_out in _units(cfg):
        conv(name, c_in, c_out, 3)
        params[f"{name}.gamma"] = np.ones(c_out, dtype=dtype)
        params[f"{name}.beta"] = np.zeros(c_out, dtype=dtype)
        buffers[f"{name}.mean"] = np.zeros(c_out, dtype=dtype)
        buffers[f"{name}.var"] = np.ones(c_out, dtype=dtype)
    cb = cfg.bottleneck_channels
    for s in cfg.pyramid_scales:
        conv(f"ppm{s}", cb, cb // 4, 1)
    conv("head", cfg.init_channels, cfg.out_channels, 1)
    return params, buffers


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


class _Pass:
    def __init__(self, cfg, params, buffers, train, seed, momentum=ops.BN_MOMENTUM):
        self.cfg = cfg
        self.momentum = momentum
        self.p = params
        self.buf = buffers
        self.train = train
        self.seed = int(seed)
        self.cache = {}
        self.n_units = 0

    def unit(self, name, x):
        p = self.p
        y, c_conv = ops.conv2d_forward(x, p[f"{name}.w"], p[f"{name}.b"])
        self.n_units += 1
        y, c_act = ops.bn_relu_dropout_forward(
            y, p[f"{name}.gamma"], p[f"{name}.beta"], self.buf[f"{name}.mean"], self.buf[f"{name}.var"],
            self.cfg.dropout_p, kernels.dropout_key(self.seed, self.n_units), self.train, self.momentum,
        )
        self.cache[name] = (c_conv, c_act)
        return y

    def block(self, prefix, x):
        return self.unit(f"{prefix}.b", self.unit(f"{prefix}.a", x))


def _unit_backward(name, dy, cache, grads, need_dx=True):
    c_conv, c_act = cache
    d, grads[f"{name}.gamma"], grads[f"{name}.beta"] = ops.bn_relu_dropout_backward(dy, c_act)
    dx, grads[f"{name}.w"], grads[f"{name}.b"] = ops.conv2d_backward(d, c_conv, need_dx)
    return dx


def _block_backward(prefix, dy, cache, grads, need_dx=True):
    d = _unit_backward(f"{prefix}.b", dy, cache[f"{prefix}.b"], grads)
    return _unit_backward(f"{prefix}.a", d, cache[f"{prefix}.a"], grads, need_dx)


def forward(cfg, params, images, mode="eval", buffers=None, seed=0, keep_cache=False, bn_momentum=ops.BN_MOMENTUM):
    """Probability map of shape ``(N, 1, H, W)`` for a batch of ``(N, 1, H, W)`` images.

    ``mode`` is "train" (batch statistics, dropout on, running stats updated
    in ``buffers``) or "eval".  With ``keep_cache`` the return value is
    ``(probs, cache)`` for :func:`backward`.  ``bn_momentum`` sets how far
    one train-mode batch moves the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(images)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ConfigError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    cfg.check_input(x.shape[2], x.shape[3])
    if buffers is None:
        raise ConfigError("forward needs the batch-norm buffers")
    run = _Pass(cfg, params, buffers, mode == "train", seed, bn_momentum)
    cache = run.cache

    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    pools = []
    enc_out = []
    for lvl in range(cfg.depth):
        h = run.block(f"enc{lvl}", h)
        enc_out.append(h)
        h, arg = ops.maxpool2_forward(h)
        pools.append((h.shape, arg))
    h = run.block("bott", h)

    hb, wb = h.shape[1:3]
    feats = [h]
    ppm = []
    for s in cfg.pyramid_scales:
        z, c_pool = ops.adaptive_avgpool_forward(h, s, s)
        z, c_conv = ops.conv2d_forward(z, params[f"ppm{s}.w"], params[f"ppm{s}.b"])
        z, c_relu = ops.relu_forward(z)
        z, c_up = ops.resize_forward(z, hb, wb)
        ppm.append((c_pool, c_conv, c_relu, c_up))
        feats.append(z)
    h, c_cat = ops.concat_forward(feats)
    cache["ppm"] = (ppm, c_cat)
    h = run.block("post", h)

    skips = []
    for lvl in reversed(range(cfg.depth)):
        h, c_up = ops.upsample2_forward(h)
        h, c_cat = ops.concat_forward([h, enc_out[lvl]])
        skips.append((c_up, c_cat))
        h = run.block(f"dec{lvl}", h)
    cache["up"] = skips
    cache["pools"] = pools

    logits, c_head = ops.conv2d_forward(h, params["head.w"], params["head.b"])
    probs, c_sig = ops.sigmoid_forward(logits)
    cache["head"] = (c_head, c_sig)
    probs = probs.transpose(0, 3, 1, 2)
    if keep_cache:
        return probs, cache
    return probs


def backward(cfg, params, cache, dprobs):
    """Gradients of a scalar loss with respect to every parameter, given dL/dprobs."""
    grads = {}
    c_head, c_sig = cache["head"]
    d = ops.sigmoid_backward(np.asarray(dprobs).transpose(0, 2, 3, 1), c_sig)
    d, grads["head.w"], grads["head.b"] = ops.conv2d_backward(d, c_head)

    dskips = {}
    for lvl, (c_up, c_cat) in zip(range(cfg.depth), reversed(cache["up"])):
        d = _block_backward(f"dec{lvl}", d, cache, grads)
        d, dskips[lvl] = ops.concat_backward(d, c_cat)
        d = ops.upsample2_backward(d, c_up)

    d = _block_backward("post", d, cache, grads)
    ppm, c_cat = cache["ppm"]
    parts = ops.concat_backward(d, c_cat)
    d = parts[0]
    for s, (c_pool, c_conv, c_relu, c_up), dz in zip(cfg.pyramid_scales, ppm, parts[1:]):
        dz = ops.resize_backward(dz, c_up)
        dz = ops.relu_backward(dz, c_relu)
        dz, grads[f"ppm{s}.w"], grads[f"ppm{s}.b"] = ops.conv2d_backward(dz, c_conv)
        d = d + ops.adaptive_avgpool_backward(dz, c_pool)

    d = _block_backward("bott", d, cache, grads)
    for lvl in reversed(range(cfg.depth)):
        _, arg = cache["pools"][lvl]
        d = ops.maxpool2_backward(d, arg) + dskips[lvl]
        d = _block_backward(f"enc{lvl}", d, cache, grads, need_dx=lvl > 0)
    return {k: grads[k] for k in params}


# ---------------------------------------------------------------------------
# EMA shadow parameters
# ---------------------------------------------------------------------------


@dataclass
class ParameterSet:
    """Live weights, their exponential moving average and BN buffers."""

    theta: dict
    shadow: dict = None
    buffers: dict = field(default_factory=dict)
    beta: float = EMA_BETA
    t: int = 0

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ConfigError(f"EMA beta must be in (0, 1), got {self.beta}")
        if self.shadow is None:
            self.shadow = {k: v.copy() for k, v in self.theta.items()}

    @classmethod
    def create(cls, cfg, seed=0, beta=EMA_BETA, dtype=np.float32):
        theta, buffers = init_params(cfg, seed, dtype)
        return cls(theta=theta, buffers=buffers, beta=beta)


def ema_update(params, beta=None):
    """One step of ``shadow <- beta * shadow + (1 - beta) * theta``.

    Evaluated as ``shadow + (1 - beta) * (theta - shadow)`` in float64 so a
    constant sequence is an exact fixed point and the result never leaves
    the interval spanned by the previous shadow and the new weights.
    """
    beta = params.beta if beta is None else beta
    if params.shadow.keys() != params.theta.keys():
        raise InvalidStateError("shadow and live parameters have different names")
    rate = 1.0 - beta
    for k, th in params.theta.items():
        sh = params.shadow[k]
        if sh.shape != th.shape:
            raise InvalidStateError(f"shape mismatch for {k}: {sh.shape} vs {th.shape}")
        s64 = sh.astype(np.float64)
        sh[...] = s64 + rate * (th.astype(np.float64) - s64)
    params.t += 1
    return params


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
#   magic "OVSGCKPT" | u32 version | f64 beta | u64 t | u32 len + utf8 NetConfig text
#   then three sections in order: theta, shadow, buffers, each
#   u16 len + name | u32 count | per tensor: u16 len + name | u8 rank | u32 dims | f32 payload
#   all integers and floats little-endian

MAGIC = b"OVSGCKPT"
VERSION = 1
SECTIONS = ("theta", "shadow", "buffers")


def _pack_str(s, width="<H"):
    b = s.encode("utf-8")
    return struct.pack(width, len(b)) + b


def _pack_tensors(tensors):
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(_pack_str(name))
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_params(path, params, cfg):
    """Write a checkpoint atomically (temp file then rename)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IdQ", VERSION, params.beta, params.t))
    buf.write(_pack_str(cfg.to_text(), "<I"))
    for name, tensors in zip(SECTIONS, (params.theta, params.shadow, params.buffers)):
        buf.write(_pack_str(name))
        buf.write(_pack_tensors(tensors))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte {self.pos} (need {n} more bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width="<H"):
        (n,) = self.unpack(width)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: bad string at byte {self.pos}") from None


def load_params(path):
    """Read a checkpoint; returns ``(ParameterSet, NetConfig)``.  Nothing is returned on error."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, beta, t = r.unpack("<IdQ")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = NetConfig.from_text(r.string("<I"))
    sections = {}
    while r.pos < len(data):
        name = r.string()
        (count,) = r.unpack("<I")
        tensors = {}
        for _ in range(count):
            tname = r.string()
            (rank,) = r.unpack("<B")
            dims = r.unpack(f"<{rank}I")
            size = int(np.prod(dims)) if rank else 1
            tensors[tname] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        sections[name] = tensors
    missing = [s for s in SECTIONS if s not in sections]
    if missing:
        raise FormatError(f"{path}: missing section(s): {', '.join(missing)}")
    return ParameterSet(sections["theta"], sections["shadow"], sections["buffers"], beta, t), cfg
