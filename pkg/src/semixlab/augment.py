"""Stochastic class-preserving transforms shared by supervised training and
every consistency term.

The family is an ordered five-step chain: Gaussian noise, rotation, reflect
padding, random crop, gamma correction. Sampling a transform captures every
random choice into a SampledTransform, so applying it twice is bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imageprep import PatchPair
from .resample import rotate_image


@dataclass(frozen=True)
class TransformSpec:
    """Step probabilities and parameter ranges.

    noise_strength is the upper bound of the per-image U(0, s) draw of the
    noise standard deviation on the [-1, 1] intensity scale. pad_fraction is
    reflect padding per side relative to the current side length.
    """

    noise_prob: float = 0.5
    noise_strength: float = 0.3
    rotation_prob: float = 1.0
    rotation_degrees: float = 10.0
    pad_prob: float = 1.0
    pad_fraction: float = 0.05
    crop_prob: float = 1.0
    crop_size: int = 128
    gamma_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        for p in (self.noise_prob, self.rotation_prob, self.pad_prob,
                  self.crop_prob, self.gamma_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be in [0, 1]")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")

    @classmethod
    def default(cls, crop_size: int = 128) -> "TransformSpec":
        return cls(crop_size=crop_size)

    @classmethod
    def identity(cls, size: int) -> "TransformSpec":
        """A spec whose draws leave a size x size input untouched."""
        return cls(noise_prob=0.0, rotation_prob=0.0, pad_prob=0.0,
                   pad_fraction=0.0, crop_prob=1.0, crop_size=size,
                   gamma_prob=0.0)


@dataclass(frozen=True)
class SampledTransform:
    """One concrete draw from the family; replayable."""

    noise_on: bool
    noise_sigma: float
    noise_seed: int
    rotation_on: bool
    angle_deg: float
    pad_on: bool
    pad_fraction: float
    crop_on: bool
    crop_size: int
    crop_u: float  # fractional crop offsets in [0, 1)
    crop_v: float
    gamma_on: bool
    gamma: float


def sample_transform(rng: np.random.Generator, spec: TransformSpec) -> SampledTransform:
    """Draw one transform. Consumes a fixed number of variates per call
    (activations and parameters are drawn unconditionally), in step order."""
    noise_on = rng.random() < spec.noise_prob
    noise_sigma = float(rng.uniform(0.0, spec.noise_strength))
    noise_seed = int(rng.integers(0, 2 ** 32))
    rotation_on = rng.random() < spec.rotation_prob
    angle = float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    pad_on = rng.random() < spec.pad_prob
    crop_on = rng.random() < spec.crop_prob
    crop_u = float(rng.random())
    crop_v = float(rng.random())
    gamma_on = rng.random() < spec.gamma_prob
    gamma = float(rng.uniform(*spec.gamma_range))
    return SampledTransform(
        noise_on=noise_on, noise_sigma=noise_sigma, noise_seed=noise_seed,
        rotation_on=rotation_on, angle_deg=angle,
        pad_on=pad_on, pad_fraction=spec.pad_fraction,
        crop_on=crop_on, crop_size=spec.crop_size, crop_u=crop_u, crop_v=crop_v,
        gamma_on=gamma_on, gamma=gamma,
    )


def apply_array(t: SampledTransform, arr: np.ndarray) -> np.ndarray:
    """Apply a sampled transform to a (2, H, H) pair array.

    Both patches see the same geometric parameters; noise values come from
    one seeded stream over the whole array. Output is clipped to [-1, 1]
    and keeps the input floating dtype.
    """
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    x = arr.astype(np.float64, copy=True)
    n, h, w = x.shape

    if t.noise_on and t.noise_sigma > 0:
        noise_rng = np.random.default_rng(t.noise_seed)
        x += noise_rng.normal(0.0, t.noise_sigma, size=x.shape)

    if t.rotation_on and t.angle_deg != 0.0:
        rad = math.radians(t.angle_deg)
        x = np.stack([rotate_image(p, rad, mode="reflect") for p in x])

    if t.pad_on and t.pad_fraction > 0:
        pad = int(round(t.pad_fraction * h))
        if pad > 0:
            x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")

    if t.crop_on:
        span_r = x.shape[1] - t.crop_size
        span_c = x.shape[2] - t.crop_size
        if span_r < 0 or span_c < 0:
            raise ValueError(
                f"crop {t.crop_size} exceeds padded input {x.shape[1:]}")
        off_r = min(int(t.crop_u * (span_r + 1)), span_r)
        off_c = min(int(t.crop_v * (span_c + 1)), span_c)
        x = x[:, off_r:off_r + t.crop_size, off_c:off_c + t.crop_size]

    if t.gamma_on:
        u = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
        x = 2.0 * u ** t.gamma - 1.0

    return np.clip(x, -1.0, 1.0).astype(dtype)


def apply(t: SampledTransform, pair: PatchPair) -> PatchPair:
    """PatchPair flavor of apply_array."""
    out = apply_array(t, pair.to_array())
    return PatchPair(lateral=out[0], medial=out[1])
