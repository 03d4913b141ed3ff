"""Noise-prediction denoisers, the denoising objective, and DDIM sampling.

Any object with ``predict(x_t, t, sched) -> eps_hat`` can drive
:func:`ddim_sample`; the two built-in denoisers are a trainable
per-step linear model and an exact Gaussian-posterior oracle.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FingerprintError
from .optim import TrainConfig, make_optimizer, minibatches
from .rng import derive_seed, make_rng, ordered_map
from .schedule import check_fingerprint

ARTIFACT_VERSION = 1


@dataclass(eq=False)
class LinearDenoiser:
    """Per-step linear predictor ``eps_hat = weight[t-1] * x_t + bias[t-1]``."""

    weight: np.ndarray  # (T,)
    bias: np.ndarray  # (T, H, W, C)
    schedule: dict

    kind = "linear-per-step"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 1 or self.bias.ndim != 4 or self.bias.shape[0] != self.weight.size:
            raise ConfigError("linear denoiser needs weight (T,) and bias (T, H, W, C)")

    @classmethod
    def zeros(cls, sched, shape):
        T = sched.T
        return cls(np.zeros(T), np.zeros((T,) + tuple(shape)), sched.fingerprint())

    @property
    def T(self):
        return self.weight.size

    @property
    def shape(self):
        return self.bias.shape[1:]

    def arrays(self):
        return {"weight": self.weight, "bias": self.bias}

    def predict(self, x_t, t, sched=None):
        x_t = np.asarray(x_t, dtype=np.float64)
        t = np.asarray(t)
        if t.ndim == 0:
            return self.weight[int(t) - 1] * x_t + self.bias[int(t) - 1]
        idx = t.astype(np.int64) - 1
        return self.weight[idx][:, None, None, None] * x_t + self.bias[idx]


@dataclass(eq=False)
class GaussianDenoiser:
    """Exact noise predictor for data distributed as N(mu, s^2) per pixel."""

    mu: float
    s: float

    kind = "analytic-gaussian"

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"scale s must be > 0, got {self.s}")
        self.mu, self.s = float(self.mu), float(self.s)

    def arrays(self):
        return {"mu": np.array(self.mu), "s": np.array(self.s)}

    def posterior_mean(self, x_t, alpha_bar):
        """E[x0 | x_t] under the forward process at ``alpha_bar``."""
        ra = np.sqrt(alpha_bar)
        gain = ra * self.s ** 2 / (alpha_bar * self.s ** 2 + 1.0 - alpha_bar)
        return self.mu + gain * (np.asarray(x_t, dtype=np.float64) - ra * self.mu)

    def eps_at(self, x_t, alpha_bar):
        # (x - sqrt(ab) E[x0|x]) / sqrt(1 - ab), simplified so ab -> 1 stays finite
        x_t = np.asarray(x_t, dtype=np.float64)
        var = alpha_bar * self.s ** 2 + 1.0 - alpha_bar
        return np.sqrt(1.0 - alpha_bar) * (x_t - np.sqrt(alpha_bar) * self.mu) / var

    def predict(self, x_t, t, sched):
        t = np.asarray(t)
        if t.ndim == 0:
            return self.eps_at(x_t, sched.alpha_bar_at(int(t)))
        ab = sched.alpha_bar[t.astype(np.int64) - 1][:, None, None, None]
        return self.eps_at(x_t, ab)


def analytic_gaussian_denoiser(mu, s):
    return GaussianDenoiser(mu, s)


@dataclass(eq=False)
class DiffusionBatch:
    """Stacked training items; ``x_t`` is the forward-diffused ``x0``."""

    x0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray

    @property
    def n(self):
        return self.x0.shape[0]


def make_batch(x0, t, eps, sched):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if x0.ndim != 4 or x0.shape != eps.shape or t.size != x0.shape[0] or t.size < 1:
        raise ConfigError("batch needs x0 and eps of shape (n, H, W, C) and n steps")
    if t.min() < 1 or t.max() > sched.T:
        raise ConfigError(f"steps must lie in 1..{sched.T}")
    ab = sched.alpha_bar[t - 1][:, None, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return DiffusionBatch(x0, t, eps, x_t)


def draw_batch(x0, sched, rng):
    """Draw ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` per item."""
    t = rng.integers(1, sched.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return make_batch(x0, t, eps, sched)


def denoise_loss(params, batch, sched):
    """Mean squared noise-prediction error and its gradient.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``params.arrays()``.
    """
    if not isinstance(params, LinearDenoiser):
        raise ConfigError(f"denoiser kind {params.kind!r} is not trainable")
    pred = params.predict(batch.x_t, batch.t)
    resid = pred - batch.eps
    loss = float(np.mean(resid ** 2))
    dpred = 2.0 * resid / resid.size
    idx = batch.t - 1
    g_w = np.zeros_like(params.weight)
    g_b = np.zeros_like(params.bias)
    np.add.at(g_w, idx, np.sum(dpred * batch.x_t, axis=(1, 2, 3)))
    np.add.at(g_b, idx, dpred)
    return loss, {"weight": g_w, "bias": g_b}


def stack_images(data):
    data = [np.asarray(x, dtype=np.float64) for x in data]
    if not data:
        raise ConfigError("training data is empty")
    shape = data[0].shape
    for i, x in enumerate(data):
        if x.shape != shape:
            raise ConfigError(f"image {i} has shape {x.shape}, expected {shape}")
    return np.stack(data)


def train_denoiser(data, sched, cfg=None, init=None, history=None):
    """Fit a :class:`LinearDenoiser` with minibatch noise-prediction training.

    ``history``, if a list, receives the mean loss of every epoch.
    """
    cfg = cfg or TrainConfig()
    X = stack_images(data)
    if init is None:
        init = LinearDenoiser.zeros(sched, X.shape[1:])
    elif init.shape != X.shape[1:]:
        raise ConfigError(f"init shape {init.shape} != data shape {X.shape[1:]}")
    check_fingerprint(sched, init.schedule)
    model = LinearDenoiser(init.weight.copy(), init.bias.copy(), sched.fingerprint())
    params = model.arrays()  # optimizer updates these buffers in place
    opt = make_optimizer(cfg)
    rng = make_rng(cfg.seed)
    for _ in range(cfg.epochs):
        losses, sizes = [], []
        for idx in minibatches(len(X), cfg.batch_size, rng):
            batch = draw_batch(X[idx], sched, rng)
            loss, grads = denoise_loss(model, batch, sched)
            opt.step(params, grads)
            losses.append(loss)
            sizes.append(len(idx))
        if history is not None:
            history.append(float(np.average(losses, weights=sizes)))
    return model


def ddim_update(x_t, eps_hat, alpha_bar_t, alpha_bar_prev, eta=0.0, noise=None):
    """One DDIM move between two ``alpha_bar`` levels."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    if eta > 0 and noise is None:
        raise ConfigError("eta > 0 requires a noise grid")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x0_hat = (x_t - np.sqrt(1.0 - alpha_bar_t) * eps_hat) / np.sqrt(alpha_bar_t)
    sigma = 0.0
    if eta > 0:
        sigma = eta * np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) \
            * np.sqrt(1.0 - alpha_bar_t / alpha_bar_prev)
    direction = np.sqrt(max(1.0 - alpha_bar_prev - sigma ** 2, 0.0)) * eps_hat
    out = np.sqrt(alpha_bar_prev) * x0_hat + direction
    if eta > 0:
        out = out + sigma * np.asarray(noise, dtype=np.float64)
    return out


def ddim_step(x_t, t, t_prev, eps_hat, sched, eta=0.0, noise=None):
    t, t_prev = int(t), int(t_prev)
    if not 0 <= t_prev < t <= sched.T:
        raise ConfigError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    return ddim_update(x_t, eps_hat, sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev), eta, noise)


def ddim_timesteps(T, substeps):
    """Evenly spaced decreasing steps from ``T`` down to 0 (``substeps + 1`` values)."""
    if not 1 <= substeps <= T:
        raise ConfigError(f"substeps must lie in 1..{T}, got {substeps}")
    return [int(v) for v in np.round(np.linspace(T, 0, substeps + 1))]


def ddim_sample(denoiser, sched, shape, substeps=50, eta=0.0, seed=0, clamp=True):
    """Run DDIM from a seeded standard-normal grid at ``t = T`` down to 0.

    With ``clamp=False`` the raw diffusion-space grid is returned.
    """
    rng = make_rng(seed)
    x = rng.standard_normal(tuple(shape))
    steps = ddim_timesteps(sched.T, substeps)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps_hat = denoiser.predict(x, t, sched)
        noise = rng.standard_normal(x.shape) if eta > 0 else None
        x = ddim_step(x, t, t_prev, eps_hat, sched, eta, noise)
    return np.clip(x, 0.0, 1.0) if clamp else x


def ddim_sample_batch(denoiser, sched, shape, n, substeps=50, eta=0.0, seed=0,
                      clamp=True, threads=1):
    """Draw ``n`` samples; sample ``i`` uses the stream derived from ``(seed, i)``."""
    def one(i):
        return ddim_sample(denoiser, sched, shape, substeps, eta, derive_seed(seed, i), clamp)
    return ordered_map(one, range(n), threads)


def _meta_and_arrays(den):
    meta = {"version": ARTIFACT_VERSION, "kind": den.kind}
    if isinstance(den, LinearDenoiser):
        meta["schedule"] = den.schedule
    return meta, den.arrays()


def denoiser_checksum(den):
    """SHA-256 over the denoiser's kind, schedule and parameter bytes."""
    meta, arrays = _meta_and_arrays(den)
    h = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k], dtype=np.float64)
        h.update(k.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_denoiser(den, path):
    meta, arrays = _meta_and_arrays(den)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_denoiser(path, sched=None):
    """Load a denoiser; with ``sched`` given, its fingerprint must match."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k: z[k] for k in z.files if k != "meta"}
    if meta.get("version") != ARTIFACT_VERSION:
        raise FingerprintError(f"{path}: unsupported artifact version {meta.get('version')}")
    if meta["kind"] == LinearDenoiser.kind:
        if sched is not None:
            check_fingerprint(sched, meta["schedule"])
        return LinearDenoiser(arrays["weight"], arrays["bias"], meta["schedule"])
    if meta["kind"] == GaussianDenoiser.kind:
        return GaussianDenoiser(float(arrays["mu"]), float(arrays["s"]))
    raise FingerprintError(f"{path}: unknown denoiser kind {meta['kind']!r}")
