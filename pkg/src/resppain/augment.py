"""Training-time signal augmentation.

Three transforms applied to the full-length signal before any filtering
or windowing, always in the order polarity -> noise -> masking.  Each is
gated independently per sample: an activation probability is drawn
uniformly from its configured range, then a Bernoulli trial with that
probability decides whether the transform runs.  Stacking is free -- any
subset can fire on one signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# SNR for additive noise is drawn as U(0.001*k, 0.005*k) with k ~ U(1, 1000),
# interpreted as a linear power ratio of signal to noise.
SNR_COEFF_LOW = 0.001
SNR_COEFF_HIGH = 0.005

MASK_ANCHORS = ("begin", "center", "end")
MIN_MASK_LEN = 10


def _check_range(name: str, r: tuple[float, float], lo: float, hi: float) -> None:
    if not (lo <= r[0] <= r[1] <= hi):
        raise ValueError(f"{name} must satisfy {lo} <= low <= high <= {hi}, got {r}")


@dataclass(frozen=True)
class AugmentConfig:
    """Activation-probability ranges plus the transforms' own ranges."""

    polarity_prob_range: tuple[float, float] = (0.2, 0.2)
    noise_prob_range: tuple[float, float] = (0.2, 0.2)
    mask_prob_range: tuple[float, float] = (0.2, 0.2)
    mask_fraction_range: tuple[float, float] = (0.10, 0.30)
    noise_k_range: tuple[float, float] = (1.0, 1000.0)

    def __post_init__(self):
        _check_range("polarity_prob_range", self.polarity_prob_range, 0.0, 1.0)
        _check_range("noise_prob_range", self.noise_prob_range, 0.0, 1.0)
        _check_range("mask_prob_range", self.mask_prob_range, 0.0, 1.0)
        _check_range("mask_fraction_range", self.mask_fraction_range, 0.0, 1.0)
        if not (1.0 <= self.noise_k_range[0] <= self.noise_k_range[1]):
            raise ValueError(f"noise_k_range must satisfy 1 <= low <= high, got {self.noise_k_range}")


def polarity_invert(x: np.ndarray) -> np.ndarray:
    """Flip the sign of every sample (an involution)."""
    x = np.asarray(x, dtype=np.float32)
    return -x


def _noise_for_snr(x: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    """x + Gaussian noise with variance signal_power / snr."""
    if snr <= 0:
        raise ValueError(f"snr must be positive, got {snr}")
    power = float(np.mean(np.asarray(x, dtype=np.float64) ** 2))
    if power == 0.0:
        logger.warning("add_noise_snr: zero-power signal left unchanged")
        return np.asarray(x, dtype=np.float32).copy()
    sigma = np.sqrt(power / snr)
    return (np.asarray(x, dtype=np.float64) + sigma * rng.standard_normal(x.shape)).astype(np.float32)


def draw_snr(rng: np.random.Generator, k_range: tuple[float, float] = (1.0, 1000.0)) -> float:
    """k ~ U(k_range), then SNR ~ U(0.001k, 0.005k)."""
    k = rng.uniform(k_range[0], k_range[1])
    return float(rng.uniform(SNR_COEFF_LOW * k, SNR_COEFF_HIGH * k))


def add_noise_snr(x: np.ndarray, rng: np.random.Generator,
                  k_range: tuple[float, float] = (1.0, 1000.0)) -> np.ndarray:
    """Additive Gaussian noise at a freshly drawn SNR (linear power ratio)."""
    return _noise_for_snr(x, draw_snr(rng, k_range), rng)


def _mask_params(n: int, fraction: float, anchor: str) -> tuple[int, int]:
    """(start, length) of the zeroed block for a signal of n samples."""
    m = int(round(fraction * n))
    if anchor == "begin":
        start = 0
    elif anchor == "center":
        start = (n - m) // 2
    elif anchor == "end":
        start = n - m
    else:
        raise ValueError(f"unknown mask anchor {anchor!r}")
    return start, m


def mask_block(x: np.ndarray, rng: np.random.Generator,
               fraction_range: tuple[float, float] = (0.10, 0.30)) -> np.ndarray:
    """Zero one contiguous block of round(fraction * len) samples.

    fraction ~ U(fraction_range); the block sits at the beginning, the
    center, or the end with equal probability.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.size < MIN_MASK_LEN:
        raise ValueError(f"mask_block needs at least {MIN_MASK_LEN} samples, got {x.size}")
    fraction = rng.uniform(fraction_range[0], fraction_range[1])
    anchor = MASK_ANCHORS[rng.integers(len(MASK_ANCHORS))]
    start, m = _mask_params(x.size, fraction, anchor)
    out = x.copy()
    out[start:start + m] = 0.0
    return out


@dataclass(frozen=True)
class AugmentPlan:
    """All per-sample augmentation decisions, drawn before execution."""

    polarity_on: bool
    noise_on: bool
    noise_snr: float
    mask_on: bool
    mask_fraction: float
    mask_anchor: str


def sample_plan(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentPlan:
    """Draw activations and transform parameters in the documented order:
    polarity (prob, trial), noise (prob, trial, k, snr), mask (prob,
    trial, fraction, anchor)."""
    p_pol = rng.uniform(*cfg.polarity_prob_range)
    polarity_on = bool(rng.random() < p_pol)

    p_noise = rng.uniform(*cfg.noise_prob_range)
    noise_on = bool(rng.random() < p_noise)
    noise_snr = draw_snr(rng, cfg.noise_k_range) if noise_on else 0.0

    p_mask = rng.uniform(*cfg.mask_prob_range)
    mask_on = bool(rng.random() < p_mask)
    if mask_on:
        mask_fraction = float(rng.uniform(*cfg.mask_fraction_range))
        mask_anchor = MASK_ANCHORS[rng.integers(len(MASK_ANCHORS))]
    else:
        mask_fraction, mask_anchor = 0.0, "begin"

    return AugmentPlan(polarity_on, noise_on, noise_snr, mask_on, mask_fraction, mask_anchor)


def apply_augmentations(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Run one sampled plan against a full-length signal."""
    plan = sample_plan(cfg, rng)
    y = np.asarray(x, dtype=np.float32)
    if plan.polarity_on:
        y = polarity_invert(y)
    if plan.noise_on:
        y = _noise_for_snr(y, plan.noise_snr, rng)
    if plan.mask_on:
        if y.size < MIN_MASK_LEN:
            raise ValueError(f"mask augmentation needs at least {MIN_MASK_LEN} samples, got {y.size}")
        start, m = _mask_params(y.size, plan.mask_fraction, plan.mask_anchor)
        y = y.copy()
        y[start:start + m] = 0.0
    return y
