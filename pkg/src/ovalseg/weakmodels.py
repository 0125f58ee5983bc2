"""Per-pixel label-confidence maps for coarse oval annotations.

Two models of inaccuracy turn an oval mask into weights phi in (0, 1]:
the farther a foreground pixel lies from the oval's centre, the less its
label is trusted.  ``moi1_weights`` measures Euclidean distance from the
(rounded) foreground centroid; ``moi2_weights`` measures Mahalanobis
distance under the foreground index covariance.  Background pixels always
get weight 1.

Distances are computed in float64 and the maps are returned as float32, the
on-disk precision.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .imaging import as_mask

DEFAULT_EPSILON = 1.0
POWER_GRID = (1.0, 1.5, 2.0)


@dataclass
class OvalStats:
    centroid: tuple
    mean: np.ndarray
    inv_cov: np.ndarray
    max_euclid: float
    max_mahal: float
    epsilon: float = DEFAULT_EPSILON


@dataclass
class WeightResult:
    weights: np.ndarray
    # "empty-foreground" or "singular-covariance" when a fallback was taken
    warning: str = ""


def _check_epsilon(epsilon):
    if not epsilon > 0:
        raise InvalidInputError(f"epsilon must be positive, got {epsilon}")


def oval_center(mask):
    """Foreground centroid rounded half-up to the nearest pixel."""
    ii, jj = np.nonzero(mask)
    return int(np.floor(ii.mean() + 0.5)), int(np.floor(jj.mean() + 0.5))


def moi1(mask, epsilon=DEFAULT_EPSILON):
    """Euclidean model; returns a :class:`WeightResult`."""
    _check_epsilon(epsilon)
    mask = as_mask(mask)
    if not mask.any():
        return WeightResult(np.ones(mask.shape, dtype=np.float32), "empty-foreground")
    i0, j0 = oval_center(mask)
    ii, jj = np.nonzero(mask)
    d = np.sqrt((ii - i0).astype(np.float64) ** 2 + (jj - j0).astype(np.float64) ** 2)
    phi = np.ones(mask.shape, dtype=np.float64)
    phi[ii, jj] = 1.0 - d / (d.max() + epsilon)
    return WeightResult(phi.astype(np.float32))


def moi1_weights(mask, epsilon=DEFAULT_EPSILON):
    return moi1(mask, epsilon).weights


def _foreground_stats(ii, jj):
    pts = np.stack([ii, jj], axis=1).astype(np.float64)
    mu = pts.mean(axis=0)
    cov = np.cov(pts, rowvar=False, ddof=1)
    return pts, mu, cov


def _is_singular(cov):
    # relative test: collinear integer point sets give det exactly 0 up to rounding
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    scale = max(cov[0, 0] * cov[1, 1], np.finfo(np.float64).tiny)
    return not np.isfinite(det) or det <= 1e-12 * scale


def mahalanobis_distances(mask):
    """Mahalanobis distance of each foreground pixel, in ``np.nonzero`` order.

    Returns ``None`` when the foreground covariance is singular (fewer than
    three pixels or all on one line).
    """
    ii, jj = np.nonzero(mask)
    if ii.size < 3:
        return None
    pts, mu, cov = _foreground_stats(ii, jj)
    if _is_singular(cov):
        return None
    inv = np.linalg.inv(cov)
    diff = pts - mu
    d2 = np.einsum("nk,kl,nl->n", diff, inv, diff)
    return np.sqrt(np.maximum(d2, 0.0))


def moi2(mask, epsilon=DEFAULT_EPSILON):
    """Mahalanobis model; falls back to :func:`moi1` on a singular covariance."""
    _check_epsilon(epsilon)
    mask = as_mask(mask)
    if not mask.any():
        return WeightResult(np.ones(mask.shape, dtype=np.float32), "empty-foreground")
    dist = mahalanobis_distances(mask)
    if dist is None:
        res = moi1(mask, epsilon)
        return WeightResult(res.weights, "singular-covariance")
    ii, jj = np.nonzero(mask)
    phi = np.ones(mask.shape, dtype=np.float64)
    phi[ii, jj] = 1.0 - dist / (dist.max() + epsilon)
    return WeightResult(phi.astype(np.float32))


def moi2_weights(mask, epsilon=DEFAULT_EPSILON):
    return moi2(mask, epsilon).weights


def oval_stats(mask, epsilon=DEFAULT_EPSILON):
    """Summary statistics used by both models (for inspection and reports)."""
    mask = as_mask(mask)
    ii, jj = np.nonzero(mask)
    if ii.size < 3:
        raise InvalidInputError("need at least 3 foreground pixels")
    pts, mu, cov = _foreground_stats(ii, jj)
    if _is_singular(cov):
        raise InvalidInputError("foreground covariance is singular")
    i0, j0 = oval_center(mask)
    d = np.hypot(ii - i0, jj - j0)
    return OvalStats(
        centroid=(i0, j0),
        mean=mu,
        inv_cov=np.linalg.inv(cov),
        max_euclid=float(d.max()),
        max_mahal=float(mahalanobis_distances(mask).max()),
        epsilon=float(epsilon),
    )


def power_transform(wm, n):
    """Raise each weight to the power ``n``; ``n == 1`` returns an exact copy."""
    if not n > 0:
        raise InvalidInputError(f"power must be positive, got {n}")
    wm = np.asarray(wm, dtype=np.float32)
    if n == 1:
        return wm.copy()
    return np.power(wm, np.float32(n))


def weight_map(mask, model, epsilon=DEFAULT_EPSILON, power=1.0):
    """Dispatch on ``model`` in {"none", "moi1", "moi2"} and apply the power transform."""
    if model == "none":
        return np.ones(np.shape(mask), dtype=np.float32)
    if model == "moi1":
        wm = moi1_weights(mask, epsilon)
    elif model == "moi2":
        wm = moi2_weights(mask, epsilon)
    else:
        raise InvalidInputError(f"unknown model {model!r}")
    return power_transform(wm, power)
