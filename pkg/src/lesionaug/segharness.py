"""Downstream segmentation harness: a tiny conv net trained with soft Dice.

The network is three 3x3 same-padded convolutions (in -> 8 -> 8 -> 1), ReLU
after the first two and a logistic output. Gradients are written out by hand.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .diffusion import ARTIFACT_VERSION
from .errors import ConfigError
from .metrics import dice
from .optim import TrainConfig, make_optimizer, minibatches
from .rng import make_rng, ordered_map

DICE_SMOOTH = 1.0
LAYERS = ("1", "2", "3")


@dataclass(eq=False)
class SegModelParams:
    """Per-layer kernels ``w{k}`` of shape ``(C_in, 3, 3, C_out)`` and biases ``b{k}``."""

    arrays: dict

    @property
    def in_channels(self):
        return self.arrays["w1"].shape[0]

    def copy(self):
        return SegModelParams({k: v.copy() for k, v in self.arrays.items()})

    def equals(self, other):
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())


def init_segmenter(in_channels=1, seed=0, widths=(8, 8)):
    rng = make_rng(seed)
    chans = (in_channels,) + tuple(widths) + (1,)
    arrays = {}
    for k, (cin, cout) in zip(LAYERS, zip(chans[:-1], chans[1:])):
        arrays["w" + k] = rng.standard_normal((cin, 3, 3, cout)) * np.sqrt(2.0 / (9 * cin))
        arrays["b" + k] = np.zeros(cout)
    return SegModelParams(arrays)


def _im2col(x):
    # (n,H,W,C) -> (n,H,W,C*9), zero padding of one pixel
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n,H,W,C,3,3)
    return cols.reshape(n, h, w, c * 9)


def _col2im(dcols, c):
    n, h, w, _ = dcols.shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w, :] += d[..., i, j]
    return dxp[:, 1:-1, 1:-1, :]


def _conv(x, w, b):
    cols = _im2col(x)
    return cols @ w.reshape(-1, w.shape[-1]) + b, cols


def forward(params, x):
    """Foreground probabilities ``(n, H, W)`` plus cached activations."""
    a = params.arrays
    x = np.asarray(x, dtype=np.float64)
    z1, c1 = _conv(x, a["w1"], a["b1"])
    h1 = np.maximum(z1, 0.0)
    z2, c2 = _conv(h1, a["w2"], a["b2"])
    h2 = np.maximum(z2, 0.0)
    z3, c3 = _conv(h2, a["w3"], a["b3"])
    p = expit(z3[..., 0])
    return p, (c1, z1, c2, z2, c3)


def predict(params, images):
    return forward(params, np.stack([np.asarray(i, dtype=np.float64) for i in images]))[0]


def soft_dice_loss(pred, target, epsilon=DICE_SMOOTH):
    """``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`` and its gradient in ``pred``."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if p.shape != g.shape:
        raise ConfigError(f"shape mismatch: {p.shape} vs {g.shape}")
    inter = np.sum(p * g)
    denom = np.sum(p) + np.sum(g) + epsilon
    num = 2.0 * inter + epsilon
    loss = 1.0 - num / denom
    grad = -(2.0 * g * denom - num) / denom ** 2
    return float(loss), grad


def seg_loss(params, x, masks, epsilon=DICE_SMOOTH):
    """Mean per-image soft Dice loss and gradients for every parameter array."""
    a = params.arrays
    p, (c1, z1, c2, z2, c3) = forward(params, x)
    n = p.shape[0]
    losses, dp = [], np.empty_like(p)
    for i in range(n):
        li, gi = soft_dice_loss(p[i], masks[i], epsilon)
        losses.append(li)
        dp[i] = gi / n
    dz3 = (dp * p * (1.0 - p))[..., None]
    grads = {}

    def layer_back(k, cols, dz, cin):
        w = a["w" + k]
        grads["w" + k] = (cols.reshape(-1, cols.shape[-1]).T
                          @ dz.reshape(-1, dz.shape[-1])).reshape(w.shape)
        grads["b" + k] = dz.sum(axis=(0, 1, 2))
        return _col2im(dz @ w.reshape(-1, w.shape[-1]).T, cin)

    dh2 = layer_back("3", c3, dz3, a["w3"].shape[0])
    dz2 = dh2 * (z2 > 0)
    dh1 = layer_back("2", c2, dz2, a["w2"].shape[0])
    dz1 = dh1 * (z1 > 0)
    layer_back("1", c1, dz1, a["w1"].shape[0])
    return float(np.mean(losses)), grads


@dataclass(eq=False)
class AugmentedDataset:
    real: list
    synthetic: list
    n_synth_used: int

    def __post_init__(self):
        if self.n_synth_used > len(self.synthetic):
            raise ConfigError("n_synth_used exceeds the synthetic pool")

    @property
    def pairs(self):
        return list(self.real) + list(self.synthetic[:self.n_synth_used])

    def __len__(self):
        return len(self.real) + self.n_synth_used


def build_augmented(real, synth, n):
    """All real pairs plus the first ``n`` synthetic pairs."""
    if n < 0 or n > len(synth):
        raise ConfigError(f"requested {n} synthetic pairs, only {len(synth)} available")
    return AugmentedDataset(list(real), list(synth), int(n))


def _stack(pairs):
    if not pairs:
        raise ConfigError("dataset is empty")
    x = [np.asarray(p[0], dtype=np.float64) for p in pairs]
    m = [np.asarray(p[1], dtype=np.float64) for p in pairs]
    if any(xi.shape != x[0].shape for xi in x) or any(mi.shape != x[0].shape[:2] for mi in m):
        raise ConfigError("inconsistent image/mask shapes")
    return np.stack(x), np.stack(m)


def train_segmenter(data, cfg=None, init=None, history=None):
    """Minimize soft Dice over shuffled minibatches of real and synthetic pairs."""
    cfg = cfg or TrainConfig()
    X, M = _stack(data.pairs)
    model = (init or init_segmenter(X.shape[-1], cfg.seed)).copy()
    if model.in_channels != X.shape[-1]:
        raise ConfigError("segmenter input channels do not match the data")
    opt = make_optimizer(cfg)
    rng = make_rng(cfg.seed, 1)
    for _ in range(cfg.epochs):
        losses = []
        for idx in minibatches(len(X), cfg.batch_size, rng):
            loss, grads = seg_loss(model, X[idx], M[idx])
            opt.step(model.arrays, grads)
            losses.append(loss)
        if history is not None:
            history.append(float(np.mean(losses)))
    return model


def evaluate_dsc(params, testset, threshold=0.5, threads=1):
    """Mean Dice of thresholded predictions against ground truth."""
    testset = list(testset)
    if not testset:
        raise ConfigError("test set is empty")
    if not 0 < threshold < 1:
        raise ConfigError("threshold must lie in (0, 1)")

    def one(pair):
        p = forward(params, np.asarray(pair[0], dtype=np.float64)[None])[0][0]
        return dice(p >= threshold, pair[1])

    scores = ordered_map(one, testset, threads)
    return math.fsum(scores) / len(scores)


def save_segmenter(params, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": ARTIFACT_VERSION, "kind": "segmenter"}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **params.arrays)


def load_segmenter(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("kind") != "segmenter":
            raise ConfigError(f"{path}: not a segmenter artifact")
        return SegModelParams({k: z[k] for k in z.files if k != "meta"})
