"""Losses, optimizer, learning-rate schedule and the mini-batch training loop.

The loss combines a class-weighted binary cross-entropy, whose positive term
is scaled per pixel by the label-confidence map phi, with a soft Dice loss:

    L = alpha * sum_i w_i [-phi_i y_i log p_i - (1 - y_i) log(1 - p_i)] / N
        + (1 - alpha) * (1 - (2 sum p_i y_i + eps) / (sum p_i^2 + sum y_i^2 + eps))

with w_i = N1/N0 on background pixels and 1 on foreground pixels, counted
over the whole batch.
"""

import logging
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import network
from .errors import ConfigError, InvalidInputError, NumericError, ShapeError
from .synthdata import augment, derive_seed
from .weakmodels import weight_map

log = logging.getLogger(__name__)

P_CLAMP = 1e-7
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class LossConfig:
    alpha: float = 0.5
    dice_epsilon: float = 1.0
    use_moi_weights: bool = True

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.dice_epsilon > 0:
            raise ConfigError(f"dice_epsilon must be positive, got {self.dice_epsilon}")


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 280
    max_lr: float = 0.001
    weight_decay: float = 0.0005
    ema_beta: float = 0.995
    dropout_p: float = 0.4
    moi: str = "none"
    power_n: float = 1.0
    moi_epsilon: float = 1.0
    alpha: float = 0.5
    dice_epsilon: float = 1.0
    augment: bool = True
    recalibrate_bn: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.moi not in ("none", "moi1", "moi2"):
            raise ConfigError(f"moi must be none, moi1 or moi2, got {self.moi!r}")
        for name in ("batch_size", "epochs", "max_lr", "ema_beta", "power_n", "moi_epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0 < self.ema_beta < 1:
            raise ConfigError(f"ema_beta must be in (0, 1), got {self.ema_beta}")

    @property
    def loss(self):
        return LossConfig(self.alpha, self.dice_epsilon, self.moi != "none")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class ClassWeights:
    background_weight: float
    foreground_weight: float = 1.0
    fallback: bool = False

    def pixel_weights(self, y):
        return np.where(y > 0, self.foreground_weight, self.background_weight)


def class_weights(batch_masks):
    """Background weight N1/N0 over the whole batch.

    A batch without foreground or without background cannot be balanced
    this way, so every pixel gets weight 1 and ``fallback`` is set.
    """
    y = np.asarray(batch_masks)
    n1 = int(np.count_nonzero(y))
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        return ClassWeights(1.0, 1.0, fallback=True)
    return ClassWeights(n1 / n0)


def bce_terms(p, y, w):
    """Per-pixel class-weighted BCE, unweighted by confidence."""
    return w * (-y * np.log(p) - (1 - y) * np.log(1 - p))


def weighted_bce_terms(p, y, w, phi):
    """Per-pixel class-weighted BCE whose positive term is scaled by ``phi``."""
    return w * (-phi * y * np.log(p) - (1 - y) * np.log(1 - p))


def dice_loss(p, y, eps):
    inter = np.sum(p * y)
    den = np.sum(p * p) + np.sum(y * y) + eps
    return 1.0 - (2.0 * inter + eps) / den


def combined_loss(p, y, phi, cw, cfg):
    """Loss value and gradient with respect to ``p``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]`` and the gradient is that of the
    clamped expression evaluated at the clamped point (straight-through).
    Passing ``phi=None`` uses the plain class-weighted BCE.
    """
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype)
    if p.shape != y.shape or (phi is not None and np.shape(phi) != p.shape):
        raise ShapeError(f"loss inputs disagree: p {p.shape}, y {y.shape}, phi {np.shape(phi)}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("non-finite probabilities")
    pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    n = p.size
    w = cw.pixel_weights(y).astype(p.dtype)
    if phi is None:
        bce = np.sum(bce_terms(pc, y, w)) / n
        pos = y
    else:
        phi = np.asarray(phi, dtype=p.dtype)
        bce = np.sum(weighted_bce_terms(pc, y, w, phi)) / n
        pos = phi * y
    inter = np.sum(pc * y)
    den = np.sum(pc * pc) + np.sum(y * y) + cfg.dice_epsilon
    num = 2.0 * inter + cfg.dice_epsilon
    dice = 1.0 - num / den
    loss = cfg.alpha * bce + (1 - cfg.alpha) * dice

    d_bce = w * (-pos / pc + (1 - y) / (1 - pc)) / n
    d_dice = -(2.0 * y * den - num * 2.0 * pc) / (den * den)
    grad = cfg.alpha * d_bce + (1 - cfg.alpha) * d_dice
    return float(loss), grad.astype(p.dtype)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr, weight_decay=0.0, betas=ADAM_BETAS, eps=ADAM_EPS):
    """Adam with coupled L2: the decay term ``weight_decay * theta`` joins the gradient.

    Raises :class:`NumericError` naming the first non-finite gradient before
    touching any parameter.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}")
    state.t += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for k, theta in params.items():
        g = grads[k]
        if weight_decay:
            g = g + weight_decay * theta
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        theta -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(theta.dtype)
    return params, state


@dataclass
class OneCycle:
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4


def one_cycle_lr(step, total_steps, max_lr, schedule=OneCycle()):
    """Cosine one-cycle schedule.

    Rises from ``max_lr / div_factor`` to ``max_lr`` over the first
    ``warmup_frac`` of the steps, then anneals to
    ``max_lr / final_div_factor`` at the last step.  Endpoints are exact.
    """
    if total_steps < 1:
        raise InvalidInputError("total_steps must be at least 1")
    if not 0 <= step < total_steps:
        raise InvalidInputError(f"step {step} outside [0, {total_steps})")
    peak = int(round(schedule.warmup_frac * (total_steps - 1)))
    lo = max_lr / schedule.div_factor
    final = max_lr / schedule.final_div_factor
    if step == peak:
        return max_lr
    if step < peak:
        w = (1 - math.cos(math.pi * step / peak)) / 2
        return max_lr * w + lo * (1 - w)
    w = (1 + math.cos(math.pi * (step - peak) / (total_steps - 1 - peak))) / 2
    return max_lr * w + final * (1 - w)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    step: int
    lr: float
    loss: float


def prepare_weights(samples, cfg):
    """Confidence maps per sample: MoI weights for oval samples, ones elsewhere."""
    out = []
    for s in samples:
        if cfg.moi != "none" and s.inaccurate:
            out.append(weight_map(s.mask, cfg.moi, cfg.moi_epsilon, cfg.power_n))
        else:
            out.append(np.ones(s.mask.shape, dtype=np.float32))
    return out


def _batch_bounds(n, batch_size):
    """Contiguous batch slices; a trailing batch of one is folded into its predecessor."""
    bs = min(batch_size, n)
    starts = list(range(0, n, bs))
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    return list(zip(starts, starts[1:] + [n]))


def recalibrate_bn(net_cfg, ps, images, batch_size, seed=0):
    """Recompute the batch-norm running statistics for the EMA weights.

    The buffers collected during training describe the live weights with
    dropout active, and dropout inflates activation variance relative to
    inference.  Here the statistics are re-estimated for the averaged
    weights with dropout off, as an equal-weight average over one pass of
    the unaugmented training images.
    """
    for k, v in ps.buffers.items():
        v[...] = 0.0 if k.endswith(".mean") else 1.0
    x = np.asarray(images, dtype=np.float32)[:, None]
    quiet = replace(net_cfg, dropout_p=0.0)
    for b, (lo, hi) in enumerate(_batch_bounds(len(x), batch_size), 1):
        network.forward(quiet, ps.shadow, x[lo:hi], "train", ps.buffers,
                        seed=derive_seed(seed, "recal", b), bn_momentum=1.0 / b)
    return ps


def train(samples, net_cfg, cfg, weights=None, progress=None):
    """Train from scratch on in-memory samples.

    ``weights`` overrides the per-sample confidence maps (defaults to
    :func:`prepare_weights`).  Returns ``(ParameterSet, [EpochLog])``.
    Deterministic for a fixed seed.
    """
    if not samples:
        raise ConfigError("no training samples")
    if cfg.dropout_p != net_cfg.dropout_p:
        net_cfg = replace(net_cfg, dropout_p=cfg.dropout_p)
    if weights is None:
        weights = prepare_weights(samples, cfg)
    lcfg = cfg.loss
    ps = network.ParameterSet.create(net_cfg, seed=derive_seed(cfg.seed, "init"), beta=cfg.ema_beta)
    opt = AdamState(ps.theta)
    n = len(samples)
    bounds = _batch_bounds(n, cfg.batch_size)
    total = cfg.epochs * len(bounds)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "order"))
    logs = []
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        losses = []
        lr = 0.0
        for bi, (a, b) in enumerate(bounds):
            idx = order[a:b]
            imgs, masks, phis = [], [], []
            for i in idx:
                s = samples[i]
                rec = type(s)(s.image, s.mask, weights[i], s.inaccurate)
                if cfg.augment:
                    rec = augment(rec, derive_seed(cfg.seed, "aug", epoch, int(i)))
                imgs.append(rec.image)
                masks.append(rec.mask)
                phis.append(rec.weights)
            x = np.stack(imgs)[:, None].astype(np.float32)
            y = np.stack(masks)[:, None].astype(np.float32)
            phi = np.stack(phis)[:, None].astype(np.float32)
            lr = one_cycle_lr(step, total, cfg.max_lr)
            probs, cache = network.forward(
                net_cfg, ps.theta, x, "train", ps.buffers, seed=derive_seed(cfg.seed, "drop", step), keep_cache=True
            )
            cw = class_weights(y)
            loss, dp = combined_loss(probs, y, phi if lcfg.use_moi_weights else None, cw, lcfg)
            if not math.isfinite(loss):
                raise NumericError(f"loss diverged at epoch {epoch}, batch {bi}")
            grads = network.backward(net_cfg, ps.theta, cache, dp)
            adam_step(ps.theta, grads, opt, lr, cfg.weight_decay)
            network.ema_update(ps)
            losses.append(loss)
            step += 1
        entry = EpochLog(epoch, step, lr, float(np.mean(losses)))
        logs.append(entry)
        if progress is not None:
            progress(entry)
    if cfg.recalibrate_bn:
        recalibrate_bn(net_cfg, ps, [s.image for s in samples], cfg.batch_size, cfg.seed)
    return ps, logs


def predict(net_cfg, ps, images, use_shadow=True, batch_size=8):
    """Eval-mode probabilities for ``(N, H, W)`` images, using EMA weights by default."""
    params = ps.shadow if use_shadow else ps.theta
    imgs = np.asarray(images, dtype=np.float32)
    out = []
    for a in range(0, len(imgs), batch_size):
        x = imgs[a:a + batch_size, None]
        out.append(network.forward(net_cfg, params, x, "eval", ps.buffers)[:, 0])
    return np.concatenate(out)


def format_log(logs):
    lines = ["epoch,step,lr,loss"]
    lines += [f"{e.epoch},{e.step},{e.lr:.9g},{e.loss:.9g}" for e in logs]
    return "\n".join(lines) + "\n"
