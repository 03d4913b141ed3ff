"""Procedural lesion masks and transformation-based mask variation.

A generated mask is a blurred (and optionally elastically deformed) disk,
re-binarized, cleaned by opening and closing with an elliptical structuring
element, and accepted only if it forms a single 4-connected region.
"""

import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .datacore import as_mask
from .errors import ConfigError, DegenerateOutputError, GenerationError
from .rng import derive_seed, make_rng, ordered_map


@dataclass(frozen=True)
class MaskGenConfig:
    canvas: tuple = (64, 64)
    r_min: float = 6.0
    r_max: float = None  # optional cap on the sampled radius
    blur_sigma: float = 2.0
    elastic: tuple = None  # (alpha, sigma) or None
    se_radii: tuple = (2, 2)
    max_attempts: int = 20
    binarize_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        object.__setattr__(self, "se_radii", tuple(self.se_radii))
        if self.elastic is not None:
            object.__setattr__(self, "elastic", tuple(float(v) for v in self.elastic))
        h, w = self.canvas
        if h < 1 or w < 1:
            raise ConfigError("canvas must be at least 1x1")
        if not (1 <= self.r_min < min(h, w) / 2):
            raise ConfigError(f"r_min must satisfy 1 <= r_min < min(H, W)/2, got {self.r_min}")
        if self.r_max is not None and self.r_max < self.r_min:
            raise ConfigError("r_max must be >= r_min")
        if self.blur_sigma < 0:
            raise ConfigError("blur_sigma must be >= 0")
        if len(self.se_radii) != 2 or min(self.se_radii) < 1:
            raise ConfigError("se_radii must be two values >= 1")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if not 0 < self.binarize_threshold < 1:
            raise ConfigError("binarize_threshold must lie in (0, 1)")
        if self.elastic is not None and (len(self.elastic) != 2 or self.elastic[0] < 0
                                         or self.elastic[1] <= 0):
            raise ConfigError("elastic must be (alpha >= 0, sigma > 0)")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown maskgen fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        d["se_radii"] = list(self.se_radii)
        d["elastic"] = list(self.elastic) if self.elastic else None
        return d

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class GeneratedMask:
    mask: np.ndarray
    center: tuple
    radius: float
    attempts_used: int
    seed: int

    def __eq__(self, other):
        return (isinstance(other, GeneratedMask) and np.array_equal(self.mask, other.mask)
                and (self.center, self.radius, self.attempts_used, self.seed)
                == (other.center, other.radius, other.attempts_used, other.seed))

    def metadata(self):
        return {"center": list(self.center), "radius": self.radius,
                "attempts_used": self.attempts_used, "seed": self.seed}


def ellipse_offsets(se_radii):
    """Offsets ``(dr, dc)`` with ``(dr/a)^2 + (dc/b)^2 <= 1``."""
    a, b = se_radii
    ra, rb = int(np.floor(a)), int(np.floor(b))
    dr, dc = np.mgrid[-ra:ra + 1, -rb:rb + 1]
    keep = (dr / a) ** 2 + (dc / b) ** 2 <= 1.0
    return list(zip(dr[keep].tolist(), dc[keep].tolist()))


def _shifted(mask, dr, dc):
    # out[r, c] = mask[r + dr, c + dc], background outside the canvas
    h, w = mask.shape
    out = np.zeros_like(mask)
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = mask[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return out


def erode(mask, se_radii):
    mask = as_mask(mask).astype(bool)
    out = np.ones_like(mask)
    for dr, dc in ellipse_offsets(se_radii):
        out &= _shifted(mask, dr, dc)
    return out.astype(np.uint8)


def dilate(mask, se_radii):
    mask = as_mask(mask).astype(bool)
    out = np.zeros_like(mask)
    for dr, dc in ellipse_offsets(se_radii):
        out |= _shifted(mask, dr, dc)
    return out.astype(np.uint8)


def _on_plane(op, mask, se_radii):
    # evaluate on a zero margin wide enough that dilation never clips,
    # which keeps closing extensive at the canvas edge
    mask = as_mask(mask)
    m = int(np.floor(max(se_radii)))
    padded = np.pad(mask, m)
    out = op(padded)
    return out[m:m + mask.shape[0], m:m + mask.shape[1]]


def morph_open(mask, se_radii):
    return _on_plane(lambda x: dilate(erode(x, se_radii), se_radii), mask, se_radii)


def morph_close(mask, se_radii):
    return _on_plane(lambda x: erode(dilate(x, se_radii), se_radii), mask, se_radii)


def label_components(mask):
    """Region growing under 4-connectivity.

    Returns ``(count, labels)``; labels run 1..count in raster discovery order.
    """
    mask = as_mask(mask)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for r0, c0 in zip(*np.nonzero(mask)):
        if labels[r0, c0]:
            continue
        count += 1
        labels[r0, c0] = count
        queue = deque([(r0, c0)])
        while queue:
            r, c = queue.popleft()
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not labels[nr, nc]:
                    labels[nr, nc] = count
                    queue.append((nr, nc))
    return count, labels


def edge_distance(canvas, center):
    """Distance from ``center`` to the nearest canvas edge (pixel ``i`` spans ``[i-0.5, i+0.5]``)."""
    h, w = canvas
    r, c = center
    return min(r + 0.5, c + 0.5, h - 0.5 - r, w - 0.5 - c)


def rasterize_disk(canvas, center, radius):
    h, w = canvas
    rr, cc = np.mgrid[0:h, 0:w]
    return (((rr - center[0]) ** 2 + (cc - center[1]) ** 2) <= radius ** 2).astype(np.uint8)


def gaussian_blur(img, sigma):
    """Gaussian blur truncated at 3 sigma with a unit-sum kernel; zero outside the canvas."""
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma, truncate=3.0, mode="constant", cval=0.0)


def elastic_deform(image, alpha, sigma, seed):
    """Resample through a smoothed random displacement field.

    Binary masks are re-binarized at 0.5; float grids are returned as floats.
    """
    if alpha < 0 or sigma <= 0:
        raise ConfigError("elastic_deform needs alpha >= 0 and sigma > 0")
    arr = np.asarray(image)
    binary = arr.dtype == np.uint8 or arr.dtype == bool
    if alpha == 0:
        return arr.copy()
    h, w = arr.shape[:2]
    rng = make_rng(seed)
    fields = []
    for _ in range(2):
        u = rng.uniform(-1.0, 1.0, size=(h, w))
        fields.append(alpha * ndimage.gaussian_filter(u, sigma, mode="constant", cval=0.0))
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [rr + fields[0], cc + fields[1]]
    src = arr.astype(np.float64)
    if src.ndim == 2:
        out = ndimage.map_coordinates(src, coords, order=1, mode="nearest")
    else:
        out = np.stack([ndimage.map_coordinates(src[..., k], coords, order=1, mode="nearest")
                        for k in range(src.shape[2])], axis=-1)
    if binary:
        return (out >= 0.5).astype(np.uint8)
    return out


def _candidate(cfg, seed):
    h, w = cfg.canvas
    rng = make_rng(seed)
    while True:
        center = (float(rng.uniform(cfg.r_min - 0.5, h - 0.5 - cfg.r_min)),
                  float(rng.uniform(cfg.r_min - 0.5, w - 0.5 - cfg.r_min)))
        d = edge_distance(cfg.canvas, center)
        if d > cfg.r_min:
            break
    hi = d if cfg.r_max is None else min(d, cfg.r_max)
    radius = float(rng.uniform(cfg.r_min, hi))
    img = rasterize_disk(cfg.canvas, center, radius).astype(np.float64)
    img = gaussian_blur(img, cfg.blur_sigma)
    if cfg.elastic is not None:
        img = elastic_deform(img, cfg.elastic[0], cfg.elastic[1], derive_seed(seed, 1))
    mask = (img >= cfg.binarize_threshold).astype(np.uint8)
    mask = morph_close(morph_open(mask, cfg.se_radii), cfg.se_radii)
    return mask, center, radius


def generate_circle_mask(cfg, seed):
    """Generate one single-component lesion mask, retrying with derived seeds."""
    for attempt in range(cfg.max_attempts):
        mask, center, radius = _candidate(cfg, derive_seed(seed, attempt))
        count, _ = label_components(mask)
        if count == 1:
            return GeneratedMask(mask, center, radius, attempt + 1, int(seed))
    raise GenerationError(f"no single-component mask after {cfg.max_attempts} attempts",
                          attempts_used=cfg.max_attempts)


def gen_batch(n, cfg, master_seed, threads=1):
    """``n`` masks; item ``i`` is seeded by ``derive_seed(master_seed, i)``."""
    if n < 1:
        raise ConfigError("gen_batch needs n >= 1")

    def one(i):
        try:
            return generate_circle_mask(cfg, derive_seed(master_seed, i))
        except GenerationError as exc:
            raise GenerationError(str(exc), exc.attempts_used, index=i) from exc

    return ordered_map(one, range(n), threads)


def _resample(mask, coords):
    out = ndimage.map_coordinates(mask.astype(np.float64), coords, order=1,
                                  mode="constant", cval=0.0)
    return (out >= 0.5).astype(np.uint8)


def _grid(shape):
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return rr, cc, (h - 1) / 2.0, (w - 1) / 2.0


def resize_mask(mask, scale):
    """Scale about the canvas center; the canvas size is kept (pad or crop)."""
    if not scale > 0:
        raise ConfigError("resize scale must be > 0")
    rr, cc, cr, ccn = _grid(mask.shape)
    return _resample(mask, [cr + (rr - cr) / scale, ccn + (cc - ccn) / scale])


def rotate_mask(mask, degrees):
    """Rotate about the canvas center, filling with background."""
    th = np.deg2rad(degrees)
    rr, cc, cr, ccn = _grid(mask.shape)
    dr, dc = rr - cr, cc - ccn
    src_r = cr + np.cos(th) * dr - np.sin(th) * dc
    src_c = ccn + np.sin(th) * dr + np.cos(th) * dc
    return _resample(mask, [src_r, src_c])


def transform_existing(mask, ops, seed):
    """Apply ``ops`` in order: ``("resize", scale)``, ``("rotate", deg)``,
    ``("elastic", alpha, sigma)``. Raises ``DegenerateOutputError`` when
    nothing of the mask survives.
    """
    out = as_mask(mask)
    for k, op in enumerate(ops):
        name, *args = op
        if name == "resize":
            out = resize_mask(out, *args)
        elif name == "rotate":
            out = rotate_mask(out, *args)
        elif name == "elastic":
            out = elastic_deform(out, args[0], args[1], derive_seed(seed, k))
        else:
            raise ConfigError(f"unknown transform {name!r}")
    if not out.any():
        raise DegenerateOutputError("transform produced an empty mask")
    return out
