"""Image and mask rasters, PNG I/O, manifests and dataset splitting.

Images are ``float64`` arrays of shape ``(H, W, C)`` with ``C`` in {1, 3}
and values in [0, 1]. Masks are ``uint8`` arrays of shape ``(H, W)`` holding
only 0 and 1.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DecodeError
from .rng import make_rng

MASK_THRESHOLD = 128


def as_image(data):
    """Validate and return ``data`` as an ``(H, W, C)`` float image."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ConfigError(f"image must be (H, W, 1|3), got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ConfigError("image must be at least 1x1")
    if not np.all((img >= 0.0) & (img <= 1.0)):
        raise ConfigError("image values must lie in [0, 1]")
    return img


def as_mask(data):
    """Validate and return ``data`` as an ``(H, W)`` uint8 {0, 1} mask."""
    m = np.asarray(data)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ConfigError(f"mask must be (H, W), got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ConfigError("mask values must be exactly 0 or 1")
    return m.astype(np.uint8)


def quantize(img):
    """Round ``[0, 1]`` values to bytes, half-up."""
    return np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def _open_png(path):
    path = Path(path)
    if not path.is_file():
        raise DecodeError(path, "no such file")
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, SyntaxError) as exc:
        raise DecodeError(path, f"cannot decode: {exc}") from exc


def load_image(path):
    im = _open_png(path)
    if im.mode not in ("L", "RGB"):
        raise DecodeError(path, f"unsupported colour type/bit depth (mode {im.mode})")
    arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def save_image(img, path):
    img = as_image(img)
    data = quantize(img)
    mode = "L" if img.shape[2] == 1 else "RGB"
    if mode == "L":
        data = data[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def load_mask(path):
    """Read an 8-bit single-channel PNG; bytes >= 128 become 1."""
    im = _open_png(path)
    if im.mode != "L":
        raise DecodeError(path, f"mask must be single-channel 8-bit (mode {im.mode})")
    arr = np.asarray(im, dtype=np.uint8)
    return (arr >= MASK_THRESHOLD).astype(np.uint8)


def save_mask(mask, path):
    mask = as_mask(mask)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask * 255, mode="L").save(path, format="PNG")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    lesion_type: str = ""
    attributes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.image_path or not self.mask_path:
            raise ConfigError("manifest paths must be non-empty")
        object.__setattr__(self, "attributes", tuple(self.attributes))

    def to_json(self):
        d = asdict(self)
        d["attributes"] = list(self.attributes)
        return json.dumps(d, sort_keys=True)

    def check_vocabulary(self, vocabulary):
        vocabulary.validate(self.lesion_type, self.attributes)


def write_manifest(entries, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def read_manifest(path, vocabulary=None):
    """Read a JSON Lines manifest; optionally validate tags against ``vocabulary``."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                entry = ManifestEntry(
                    image_path=d["image_path"],
                    mask_path=d["mask_path"],
                    lesion_type=d.get("lesion_type", "") or "",
                    attributes=tuple(d.get("attributes", ())),
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
            if vocabulary is not None:
                entry.check_vocabulary(vocabulary)
            entries.append(entry)
    return entries


def load_pairs(manifest_path, vocabulary=None):
    """Load ``(image, mask, entry)`` triples; paths resolve against the manifest's folder."""
    root = Path(manifest_path).parent
    out = []
    for e in read_manifest(manifest_path, vocabulary):
        out.append((load_image(root / e.image_path), load_mask(root / e.mask_path), e))
    return out


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int


def split_sizes(n, ratio):
    """Partition sizes ``floor(n * r_i / sum(r))``; the remainder goes to train."""
    ratio = tuple(int(r) for r in ratio)
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ConfigError(f"ratio must be three positive integers, got {ratio}")
    total = sum(ratio)
    sizes = [n * r // total for r in ratio]
    sizes[0] += n - sum(sizes)
    return tuple(sizes)


def split_dataset(entries, ratio=(7, 1, 2), seed=0):
    entries = list(entries)
    if not entries:
        raise ConfigError("cannot split an empty dataset")
    n_train, n_val, _ = split_sizes(len(entries), ratio)
    order = make_rng(seed).permutation(len(entries))
    shuffled = [entries[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=int(seed),
    )
