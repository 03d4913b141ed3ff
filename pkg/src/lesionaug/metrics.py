"""Image-quality metrics (MSE, PSNR, SSIM) and mask overlap (Dice).

MSE is reported on the [0, 1] scale; PSNR defaults to an 8-bit peak of 255
with both grids rescaled to that range first.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .rng import ordered_map

LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(mse_value, max_value=255.0):
    """PSNR in dB for an MSE already expressed on the ``max_value`` scale."""
    if mse_value == 0:
        return math.inf
    return float(10.0 * np.log10(max_value ** 2 / mse_value))


def psnr(a, b, max_value=255.0):
    """PSNR of two [0, 1] grids after rescaling them to ``[0, max_value]``.

    Identical inputs give ``math.inf``.
    """
    a, b = _pair(a, b)
    return psnr_from_mse(mse(a * max_value, b * max_value), max_value)


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 3:
            return img @ LUMA
        if img.shape[2] == 1:
            return img[:, :, 0]
    if img.ndim != 2:
        raise ConfigError(f"cannot convert shape {img.shape} to grayscale")
    return img


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size=11, window_sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over all valid Gaussian-weighted windows.

    RGB grids are converted to luma first. Grids smaller than the window are
    scored with one global, uniformly weighted window.
    """
    a, b = _pair(a, b)
    a, b = to_gray(a), to_gray(b)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    if a.shape[0] < window_size or a.shape[1] < window_size:
        mu_a, mu_b = a.mean(), b.mean()
        var_a = np.mean((a - mu_a) ** 2)
        var_b = np.mean((b - mu_b) ** 2)
        cov = np.mean((a - mu_a) * (b - mu_b))
    else:
        w = gaussian_window(window_size, window_sigma)

        def local(x):
            return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)

        mu_a, mu_b = local(a), local(b)
        var_a = local(a * a) - mu_a ** 2
        var_b = local(b * b) - mu_b ** 2
        cov = local(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def dice(a, b):
    """Sørensen–Dice overlap of two binary masks; two empty masks score 1."""
    a, b = _pair(a, b)
    a, b = a > 0.5, b > 0.5
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    psnr: float
    ssim: float
    n_pairs: int
    n_psnr_infinite: int = 0

    def to_dict(self):
        d = asdict(self)
        if math.isinf(self.psnr):
            d["psnr"] = "inf"
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self):
        psnr_txt = "inf" if math.isinf(self.psnr) else f"{self.psnr:.2f}"
        head = f"{'MSE':>10} {'PSNR':>10} {'SSIM':>10}"
        return f"{head}\n{self.mse:>10.4f} {psnr_txt:>10} {self.ssim:>10.4f}"


def evaluate_generation(pairs, threads=1):
    """Average per-pair metrics over ``(original, generated)`` pairs.

    PSNR is averaged in dB over finite pairs only; infinite pairs are counted
    in ``n_psnr_infinite`` and the PSNR is ``inf`` when every pair is exact.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("evaluate_generation needs at least one pair")
    rows = ordered_map(lambda p: (mse(*p), psnr(*p), ssim(*p)), pairs, threads)
    finite = [r[1] for r in rows if not math.isinf(r[1])]
    return MetricsReport(
        mse=float(np.mean([r[0] for r in rows])),
        psnr=float(np.mean(finite)) if finite else math.inf,
        ssim=float(np.mean([r[2] for r in rows])),
        n_pairs=len(rows),
        n_psnr_infinite=len(rows) - len(finite),
    )
