"""Image, mask and weight-map handling.

Images and weight maps are 2-D ``float32`` arrays; masks are 2-D ``uint8``
arrays holding only 0 and 1.  Masks travel on disk as binary PGM (P5,
maxval 255, stored as 0/255); images and weight maps as grayscale
little-endian PFM.
"""

import os
import re

import numpy as np

from .errors import FormatError, InvalidInputError
from .kernels import bilinear_matrix

MIN_SIDE = 8


def as_image(data):
    img = np.asarray(data, dtype=np.float32)
    if img.ndim != 2:
        raise InvalidInputError(f"image must be 2-D, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    return img


def as_mask(data):
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise InvalidInputError(f"mask must be 2-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError("mask values must be exactly 0 or 1")
    return arr.astype(np.uint8)


def minmax_normalize(img):
    """Rescale to [0, 1]; a constant image maps to all zeros."""
    img = as_image(img)
    lo = img.min()
    hi = img.max()
    if hi == lo:
        return np.zeros_like(img)
    out = (img - lo) / (hi - lo)
    # guard against rounding pushing the extremes off the unit interval
    return np.clip(out, 0.0, 1.0, out=out)


def center_crop(img, out_h, out_w):
    """Centered sub-grid; odd leftover margins lose their extra row/col at the bottom/right."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise InvalidInputError(f"cannot crop {h}x{w} to {out_h}x{out_w}")
    top = (h - out_h) // 2
    left = (w - out_w) // 2
    return img[top:top + out_h, left:left + out_w].copy()


def _check_size(out_h, out_w):
    if out_h < 1 or out_w < 1:
        raise InvalidInputError(f"output size must be positive, got {out_h}x{out_w}")


def resize_bilinear(img, out_h, out_w):
    """Corner-aligned bilinear resize (separable)."""
    _check_size(out_h, out_w)
    img = as_image(img)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    rows = bilinear_matrix(h, out_h)
    cols = bilinear_matrix(w, out_w)
    return (rows @ img.astype(np.float64) @ cols.T).astype(np.float32)


def _nearest_index(n_in, n_out):
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.intp)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    return np.minimum(np.floor(pos + 0.5).astype(np.intp), n_in - 1)


def resize_nearest(arr, out_h, out_w):
    """Corner-aligned nearest-neighbour resize; keeps the value set of ``arr``."""
    _check_size(out_h, out_w)
    arr = np.asarray(arr)
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    return arr[np.ix_(_nearest_index(h, out_h), _nearest_index(w, out_w))].copy()


# ---------------------------------------------------------------------------
# PGM / PFM
# ---------------------------------------------------------------------------


def _read_header(data, n_fields, path):
    """Split a netpbm-style ASCII header; returns tokens and payload offset."""
    tokens = []
    pos = 0
    while len(tokens) < n_fields:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise FormatError(f"{path}: malformed header at byte {pos}")
        tokens.append(m.group(2))
        pos = m.end()
    if pos >= len(data) or data[pos:pos + 1] not in (b"\n", b" ", b"\t", b"\r"):
        raise FormatError(f"{path}: missing separator after header at byte {pos}")
    return tokens, pos + 1


def _parse_int(tok, what, path):
    try:
        val = int(tok)
    except ValueError:
        raise FormatError(f"{path}: bad {what} {tok!r}") from None
    if val < 1:
        raise FormatError(f"{path}: bad {what} {val}")
    return val


def read_pgm(path, as_binary_mask=True):
    """Read a binary P5 PGM with maxval 255.

    With ``as_binary_mask`` the stored values must be 0 or 255 and are mapped
    to 0/1; otherwise the raw bytes are returned.
    """
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_header(data, 4, path)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: expected magic P5, got {tokens[0]!r}")
    width = _parse_int(tokens[1], "width", path)
    height = _parse_int(tokens[2], "height", path)
    maxval = _parse_int(tokens[3], "maxval", path)
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    need = width * height
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise FormatError(f"{path}: truncated payload at byte {offset + len(payload)}, expected {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    if not as_binary_mask:
        return arr.copy()
    bad = np.flatnonzero((arr != 0) & (arr != 255))
    if bad.size:
        raise FormatError(f"{path}: mask pixel value {arr.flat[bad[0]]} not in {{0,255}} at byte {offset + int(bad[0])}")
    return (arr // 255).astype(np.uint8)


def _write_atomic(path, header, payload):
    # readers never see a half-written file, even when identical bytes are rewritten concurrently
    tmp = f"{path}.{os.getpid()}.tmp"
    with open(tmp, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload)
    os.replace(tmp, path)


def write_pgm(path, mask):
    mask = as_mask(mask)
    h, w = mask.shape
    _write_atomic(path, f"P5\n{w} {h}\n255\n", (mask * np.uint8(255)).tobytes())


def read_pfm(path):
    """Read a grayscale PFM ("Pf").  Rows are stored bottom-to-top on disk."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_header(data, 4, path)
    if tokens[0] != b"Pf":
        raise FormatError(f"{path}: expected grayscale magic Pf, got {tokens[0]!r}")
    width = _parse_int(tokens[1], "width", path)
    height = _parse_int(tokens[2], "height", path)
    try:
        scale = float(tokens[3])
    except ValueError:
        raise FormatError(f"{path}: bad scale {tokens[3]!r}") from None
    if scale == 0.0 or not np.isfinite(scale):
        raise FormatError(f"{path}: bad scale {scale}")
    dtype = "<f4" if scale < 0 else ">f4"
    need = 4 * width * height
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise FormatError(f"{path}: truncated payload at byte {offset + len(payload)}, expected {need} bytes")
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return np.flipud(arr).astype(np.float32)


def write_pfm(path, img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise InvalidInputError(f"PFM payload must be 2-D, got shape {img.shape}")
    h, w = img.shape
    _write_atomic(path, f"Pf\n{w} {h}\n-1.0\n", np.ascontiguousarray(np.flipud(img)).astype("<f4").tobytes())
