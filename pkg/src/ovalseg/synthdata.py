"""Synthetic brain phantoms, oval annotation corruption and augmentation.

The phantom generator stands in for real CT slices: an elliptical head with a
smooth texture, one to three hypodense lesion blobs and additive noise.  The
ground-truth mask marks the blobs exactly.  Coarse annotations are simulated
by covering each truth mask with a single filled ellipse fitted from its
index covariance.
"""

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, InvalidInputError
from .imaging import minmax_normalize, read_pfm, read_pgm, resize_bilinear, resize_nearest, write_pgm

ACCURATE = "accurate"
OVAL = "oval"

OVAL_SCALE = 2.2
MIN_COVERAGE = 0.99
LESION_FRACTION = (0.005, 0.15)

ROTATION_DEG = 15.0
CROP_AREA = (0.7, 1.0)
ELASTIC_SIGMA = 8.0
ELASTIC_ALPHA = 20.0


def derive_seed(seed, *parts):
    """Stable 64-bit seed from a base seed and an index path."""
    h = hashlib.sha256(repr((int(seed),) + tuple(parts)).encode())
    return int.from_bytes(h.digest()[:8], "little")


@dataclass
class Lesion:
    center: tuple
    axes: tuple
    angle: float
    intensity_delta: float


@dataclass
class Phantom:
    image: np.ndarray
    truth: np.ndarray
    lesions: list = field(default_factory=list)


@dataclass
class SampleRecord:
    image: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    inaccurate: bool = False


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------


def _ellipse(shape, center, axes, angle):
    ii, jj = np.mgrid[:shape[0], :shape[1]]
    di = ii - center[0]
    dj = jj - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * di + s * dj
    v = -s * di + c * dj
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _blob(rng, shape, head, center, radius):
    """Union of 2-4 jittered ellipses around ``center``, clipped to the head."""
    blob = np.zeros(shape, dtype=bool)
    parts = []
    for _ in range(rng.integers(2, 5)):
        off = rng.normal(0.0, 0.45 * radius, size=2)
        axes = radius * rng.uniform(0.45, 1.0, size=2)
        ang = rng.uniform(0.0, np.pi)
        c = (float(center[0] + off[0]), float(center[1] + off[1]))
        blob |= _ellipse(shape, c, axes, ang)
        parts.append(Lesion(c, (float(axes[0]), float(axes[1])), float(ang), 0.0))
    return blob & head, parts


def generate_phantom(seed, size=64):
    """Deterministic phantom for ``seed``; lesion area stays within 0.5-15% of the image."""
    if size < 32:
        raise InvalidInputError(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng(derive_seed(seed, "phantom", size))
    shape = (size, size)
    for _attempt in range(100):
        hc = size / 2 - 0.5 + rng.normal(0.0, 0.02 * size, size=2)
        ha = (size * rng.uniform(0.36, 0.44), size * rng.uniform(0.30, 0.38))
        head = _ellipse(shape, hc, ha, rng.uniform(-0.2, 0.2))
        inner = ndimage.binary_erosion(head, iterations=max(2, size // 10))

        truth = np.zeros(shape, dtype=bool)
        lesions = []
        for _ in range(rng.integers(1, 4)):
            cand = np.argwhere(inner)
            ci, cj = cand[rng.integers(len(cand))]
            radius = size * rng.uniform(0.05, 0.11)
            blob, parts = _blob(rng, shape, inner, (ci, cj), radius)
            truth |= blob
            lesions.extend(parts)
        frac = truth.mean()
        if LESION_FRACTION[0] <= frac <= LESION_FRACTION[1]:
            break
    else:  # pragma: no cover - 100 misses in a row has not been observed
        raise RuntimeError(f"could not place lesions for seed {seed}")

    texture = ndimage.gaussian_filter(rng.normal(size=shape), sigma=size / 12)
    texture /= np.abs(texture).max() + 1e-12
    img = np.where(head, 0.6 + 0.08 * texture, 0.05)
    # soft skull rim
    rim = head & ~ndimage.binary_erosion(head, iterations=max(1, size // 32))
    img[rim] = 0.95
    delta = -rng.uniform(0.22, 0.30)
    for les in lesions:
        les.intensity_delta = float(delta)
    img = img + delta * truth
    img = img + rng.normal(0.0, 0.04, size=shape)
    image = minmax_normalize(img.astype(np.float32))
    return Phantom(image=image, truth=truth.astype(np.uint8), lesions=lesions)


# ---------------------------------------------------------------------------
# Oval annotation
# ---------------------------------------------------------------------------


@dataclass
class OvalFit:
    mask: np.ndarray
    degenerate: bool = False
    scale: float = OVAL_SCALE


def _bbox_mask(truth):
    out = np.zeros_like(truth, dtype=np.uint8)
    ii, jj = np.nonzero(truth)
    if ii.size:
        out[ii.min():ii.max() + 1, jj.min():jj.max() + 1] = 1
    return out


def fit_oval(truth, scale=OVAL_SCALE, min_coverage=MIN_COVERAGE):
    """Cover ``truth`` with one filled ellipse from its centroid and index covariance.

    The ellipse is the set of pixels whose Mahalanobis distance to the
    foreground is at most ``scale``; ``scale`` grows by 5% steps until at least
    ``min_coverage`` of the foreground is inside.  Fewer than three pixels or a
    collinear foreground yields the bounding box with ``degenerate=True``.
    """
    truth = np.asarray(truth).astype(np.uint8)
    ii, jj = np.nonzero(truth)
    if ii.size < 3:
        return OvalFit(_bbox_mask(truth), degenerate=True, scale=0.0)
    pts = np.stack([ii, jj], axis=1).astype(np.float64)
    mu = pts.mean(axis=0)
    cov = np.cov(pts, rowvar=False, ddof=1)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
    if det <= 1e-12 * max(cov[0, 0] * cov[1, 1], 1e-300):
        return OvalFit(_bbox_mask(truth), degenerate=True, scale=0.0)
    inv = np.linalg.inv(cov)
    gi, gj = np.mgrid[:truth.shape[0], :truth.shape[1]]
    di = gi - mu[0]
    dj = gj - mu[1]
    d2 = inv[0, 0] * di * di + 2.0 * inv[0, 1] * di * dj + inv[1, 1] * dj * dj
    fg = truth.astype(bool)
    n_fg = fg.sum()
    s = scale
    while True:
        oval = d2 <= s * s
        if (oval & fg).sum() >= min_coverage * n_fg:
            return OvalFit(oval.astype(np.uint8), degenerate=False, scale=s)
        s *= 1.05


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    index: int
    image_path: str
    mask_path: str
    flag: str = ACCURATE
    weightmap_path: str = "-"


@dataclass
class DatasetManifest:
    records: list
    k_corrupted: int = 0
    seed: int = 0
    subset_id: int = 0
    root: str = "."

    def resolve(self, rel):
        return os.path.join(self.root, rel)

    def flagged(self):
        return [r.index for r in self.records if r.flag == OVAL]


def write_manifest(path, manifest):
    """Tab-separated manifest; paths are stored relative to the manifest's directory."""
    lines = [
        f"# k_corrupted={manifest.k_corrupted}",
        f"# seed={manifest.seed}",
        f"# subset_id={manifest.subset_id}",
    ]
    for r in manifest.records:
        lines.append(f"{r.index}\t{r.image_path}\t{r.mask_path}\t{r.flag}\t{r.weightmap_path}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path):
    meta = {}
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 5 or parts[3] not in (ACCURATE, OVAL):
                raise FormatError(f"{path}:{lineno}: malformed manifest line")
            try:
                idx = int(parts[0])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad index {parts[0]!r}") from None
            records.append(ManifestRecord(idx, parts[1], parts[2], parts[3], parts[4]))
    try:
        return DatasetManifest(
            records=records,
            k_corrupted=int(meta.get("k_corrupted", 0)),
            seed=int(meta.get("seed", 0)),
            subset_id=int(meta.get("subset_id", 0)),
            root=os.path.dirname(os.path.abspath(path)),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: bad header value ({exc})") from None


def corrupted_indices(n, k, seed, subset_id=0, n_subsets=1):
    """Indices whose masks get replaced by ovals.

    One shared permutation per seed is cut into consecutive blocks of ``k``,
    so subsets ``0..n_subsets-1`` never repeat a sample.
    """
    if k < 0 or k > n:
        raise ConfigError(f"k={k} out of range for {n} records")
    if n_subsets * k > n:
        raise ConfigError(f"{n_subsets} disjoint subsets of k={k} need {n_subsets * k} records, have {n}")
    if not 0 <= subset_id < n_subsets:
        raise ConfigError(f"subset_id {subset_id} outside 0..{n_subsets - 1}")
    perm = np.random.default_rng(derive_seed(seed, "corrupt")).permutation(n)
    return sorted(int(i) for i in perm[subset_id * k:(subset_id + 1) * k])


def corrupt_dataset(manifest, k, seed, out_dir, subset_id=0, n_subsets=1):
    """New manifest with ``k`` masks swapped for fitted ovals written under ``out_dir``.

    Image paths are untouched; only flagged records change mask path and flag.
    """
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    positions = corrupted_indices(len(manifest.records), k, seed, subset_id, n_subsets)
    records = []
    chosen = set(positions)
    for pos, rec in enumerate(manifest.records):
        src_img = os.path.abspath(manifest.resolve(rec.image_path))
        src_mask = os.path.abspath(manifest.resolve(rec.mask_path))
        if pos in chosen:
            fit = fit_oval(read_pgm(src_mask))
            rel = os.path.join("masks", f"oval_{rec.index:03d}.pgm")
            write_pgm(os.path.join(out_dir, rel), fit.mask)
            records.append(ManifestRecord(rec.index, os.path.relpath(src_img, out_dir), rel, OVAL, "-"))
        else:
            records.append(replace(
                rec,
                image_path=os.path.relpath(src_img, out_dir),
                mask_path=os.path.relpath(src_mask, out_dir),
                weightmap_path="-",
            ))
    return DatasetManifest(records, k_corrupted=k, seed=seed, subset_id=subset_id, root=os.path.abspath(out_dir))


def load_samples(manifest, require_weights=False):
    """Read every record into memory as :class:`SampleRecord` objects."""
    out = []
    for rec in manifest.records:
        img = read_pfm(manifest.resolve(rec.image_path))
        mask = read_pgm(manifest.resolve(rec.mask_path))
        if rec.weightmap_path != "-":
            wm = read_pfm(manifest.resolve(rec.weightmap_path))
        elif require_weights:
            raise FormatError(f"record {rec.index}: weight map missing")
        else:
            wm = np.ones(mask.shape, dtype=np.float32)
        if img.shape != mask.shape or wm.shape != mask.shape:
            raise FormatError(f"record {rec.index}: image/mask/weight-map sizes differ")
        out.append(SampleRecord(img, mask, wm, rec.flag == OVAL))
    return out


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentPlan:
    flip: bool = False
    angle_deg: float = None
    crop: tuple = None  # (top, left, height, width)
    displacement: tuple = None  # (d_row, d_col) fields

    def is_identity(self):
        return not self.flip and self.angle_deg is None and self.crop is None and self.displacement is None


def sample_plan(rng, shape, p=0.5):
    """Draw one augmentation plan.  Random numbers are consumed in a fixed order."""
    h, w = shape
    plan = AugmentPlan()
    u = rng.random(4)
    plan.flip = bool(u[0] < p)
    angle = rng.uniform(-ROTATION_DEG, ROTATION_DEG)
    if u[1] < p:
        plan.angle_deg = float(angle)
    area = rng.uniform(*CROP_AREA)
    log_ratio = rng.uniform(np.log(3 / 4), np.log(4 / 3))
    if u[2] < p:
        ratio = np.exp(log_ratio)
        ch = int(min(h, max(1, round(np.sqrt(area / ratio) * h))))
        cw = int(min(w, max(1, round(np.sqrt(area * ratio) * w))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        plan.crop = (top, left, ch, cw)
    if u[3] < p:
        # Simard-style field: alpha * G_sigma * U(-1, 1)
        dr = ndimage.gaussian_filter(rng.uniform(-1, 1, size=shape), ELASTIC_SIGMA, mode="constant") * ELASTIC_ALPHA
        dc = ndimage.gaussian_filter(rng.uniform(-1, 1, size=shape), ELASTIC_SIGMA, mode="constant") * ELASTIC_ALPHA
        plan.displacement = (dr, dc)
    return plan


def _warp(sample, coords):
    img = ndimage.map_coordinates(sample.image, coords, order=1, mode="constant", cval=0.0)
    mask = ndimage.map_coordinates(sample.mask, coords, order=0, mode="constant", cval=0)
    wm = ndimage.map_coordinates(sample.weights, coords, order=0, mode="constant", cval=1.0)
    return replace(sample, image=img.astype(np.float32), mask=mask.astype(np.uint8), weights=wm.astype(np.float32))


def apply_plan(sample, plan):
    h, w = sample.mask.shape
    out = sample
    if plan.flip:
        out = replace(out, image=out.image[:, ::-1].copy(), mask=out.mask[:, ::-1].copy(),
                      weights=out.weights[:, ::-1].copy())
    if plan.angle_deg is not None:
        t = np.deg2rad(plan.angle_deg)
        ii, jj = np.mgrid[:h, :w].astype(np.float64)
        ci, cj = (h - 1) / 2, (w - 1) / 2
        src_i = ci + np.cos(t) * (ii - ci) - np.sin(t) * (jj - cj)
        src_j = cj + np.sin(t) * (ii - ci) + np.cos(t) * (jj - cj)
        out = _warp(out, np.array([src_i, src_j]))
    if plan.crop is not None:
        top, left, ch, cw = plan.crop
        sl = (slice(top, top + ch), slice(left, left + cw))
        out = replace(
            out,
            image=resize_bilinear(out.image[sl], h, w),
            mask=resize_nearest(out.mask[sl], h, w),
            weights=resize_nearest(out.weights[sl], h, w),
        )
    if plan.displacement is not None:
        ii, jj = np.mgrid[:h, :w].astype(np.float64)
        dr, dc = plan.displacement
        out = _warp(out, np.array([ii + dr, jj + dc]))
    return out


def augment(sample, seed, p=0.5):
    """Random flip / rotation / resized crop / elastic warp, each with probability ``p``.

    The same geometry is applied to image (bilinear), mask and weight map
    (nearest).  Pixels pulled from outside the grid become image 0, mask 0,
    weight 1.
    """
    if not (sample.image.shape == sample.mask.shape == sample.weights.shape):
        raise InvalidInputError("image, mask and weight map must share dimensions")
    plan = sample_plan(np.random.default_rng(seed), sample.mask.shape, p)
    if plan.is_identity():
        return sample
    return apply_plan(sample, plan)
