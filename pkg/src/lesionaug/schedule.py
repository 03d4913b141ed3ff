"""Noise schedules and the closed-form forward (noising) process.

Steps are 1-indexed: ``t = 1..T``. ``alpha_bar_at(0)`` is defined as 1 so
the last DDIM step lands exactly on the predicted clean sample.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FingerprintError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step sequences of a variance-preserving schedule.

    ``beta[t-1]`` is the noise added at step ``t``; ``alpha_bar`` is the
    cumulative product of ``1 - beta``; ``sigma`` defaults to ``sqrt(beta)``.
    """

    beta: np.ndarray
    beta_start: float
    beta_end: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("schedule needs at least one step")
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ConfigError("every beta must lie in (0, 1)")
        beta = beta.copy()
        beta.setflags(write=False)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.sqrt(beta)
        for arr in (alpha, alpha_bar, sigma):
            arr.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "sigma", sigma)

    @property
    def T(self):
        return self.beta.size

    def alpha_bar_at(self, t):
        """``alpha_bar`` at step ``t`` with the ``t = 0`` convention of 1."""
        t = int(t)
        if t < 0 or t > self.T:
            raise ConfigError(f"step {t} outside 0..{self.T}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def fingerprint(self):
        return {"T": int(self.T), "beta_start": float(self.beta_start),
                "beta_end": float(self.beta_end)}

    def to_config(self):
        return self.fingerprint()


def make_linear_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(beta=beta, beta_start=float(beta_start), beta_end=float(beta_end))


def schedule_from_config(cfg):
    cfg = dict(cfg or {})
    unknown = set(cfg) - {"T", "beta_start", "beta_end"}
    if unknown:
        raise ConfigError(f"unknown schedule fields: {sorted(unknown)}")
    return make_linear_schedule(
        int(cfg.get("T", DEFAULT_T)),
        float(cfg.get("beta_start", DEFAULT_BETA_START)),
        float(cfg.get("beta_end", DEFAULT_BETA_END)),
    )


def check_fingerprint(sched, fingerprint):
    """Raise ``FingerprintError`` unless ``fingerprint`` describes ``sched``."""
    expected = sched.fingerprint()
    try:
        got = {"T": int(fingerprint["T"]), "beta_start": float(fingerprint["beta_start"]),
               "beta_end": float(fingerprint["beta_end"])}
    except (KeyError, TypeError, ValueError):
        got = fingerprint
    if got != expected:
        raise FingerprintError(f"schedule mismatch: artifact has {fingerprint}, expected {expected}")


def forward_diffuse(x0, t, noise, sched):
    """Noise ``x0`` to step ``t``: ``sqrt(ab) * x0 + sqrt(1 - ab) * noise``.

    The result is not clamped; diffusion space is unbounded.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ConfigError(f"noise shape {noise.shape} != sample shape {x0.shape}")
    t = int(t)
    if not 1 <= t <= sched.T:
        raise ConfigError(f"step {t} outside 1..{sched.T}")
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
