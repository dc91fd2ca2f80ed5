"""Stripe-effect masks and channel noise.

Masks act on a stripe ``(B, H_s, W_s)`` before encoding (a sensor defect);
noise acts on the compressed measurements after encoding (the downlink).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

MASK_KINDS = ("PM", "BM", "CM")
TRAINING_KINDS = ("PM", "CM")
PM_ROW_DENSITY = 0.5


@dataclass(frozen=True)
class MaskSpec:
    """Which bands are hit, and how.

    PM drops a random half of the spatial rows, BM drops every odd column,
    CM drops everything, all restricted to bands ``band_lo..band_hi``.
    """

    kind: str
    band_lo: int
    band_hi: int
    p_affect: float = 0.2
    max_band_frac: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in MASK_KINDS:
            raise ValueError(f"mask kind must be one of {MASK_KINDS}, got {self.kind!r}")
        if not 0 <= self.band_lo <= self.band_hi:
            raise ValueError(f"invalid band range {self.band_lo}-{self.band_hi}")
        if not 0.0 <= self.p_affect <= 1.0:
            raise ValueError(f"p_affect must lie in [0, 1], got {self.p_affect}")
        if not 0.0 <= self.max_band_frac <= 1.0:
            raise ValueError(f"max_band_frac must lie in [0, 1], got {self.max_band_frac}")

    @property
    def n_bands(self) -> int:
        return self.band_hi - self.band_lo + 1


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray  # uint8 (B, H, W), 1 = present
    spec: Optional[MaskSpec] = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bits.shape

    def masked_fraction(self) -> float:
        return float(1.0 - self.bits.mean())

    @classmethod
    def ones(cls, shape) -> "Mask":
        return cls(np.ones(shape, dtype=np.uint8))


def gen_mask(spec: MaskSpec, shape) -> Mask:
    """Deterministic mask for ``spec`` on a ``(B, H, W)`` stripe."""
    B, H, W = shape
    if spec.band_hi >= B:
        raise ValueError(f"band range {spec.band_lo}-{spec.band_hi} exceeds B={B}")
    bits = np.ones((B, H, W), dtype=np.uint8)
    if spec.max_band_frac == 0:
        return Mask(bits, spec)
    lo, hi = spec.band_lo, spec.band_hi + 1
    if spec.kind == "CM":
        bits[lo:hi] = 0
    elif spec.kind == "BM":
        bits[lo:hi, :, 1::2] = 0
    else:
        rows = np.random.default_rng(spec.seed).random(H) < PM_ROW_DENSITY
        bits[lo:hi, rows, :] = 0
    return Mask(bits, spec)


def draw_training_mask(B: int, shape, rng: np.random.Generator, p_affect: float = 0.2,
                       max_band_frac: float = 0.2) -> Optional[Mask]:
    """Random PM or CM mask with probability ``p_affect``, else ``None``."""
    if rng.random() >= p_affect:
        return None
    max_len = math.floor(max_band_frac * B)
    if max_len < 1:
        return None
    kind = TRAINING_KINDS[int(rng.integers(len(TRAINING_KINDS)))]
    length = int(rng.integers(1, max_len + 1))
    start = int(rng.integers(0, B - length + 1))
    seed = int(rng.integers(2**63))
    spec = MaskSpec(kind, start, start + length - 1, p_affect, max_band_frac, seed)
    return gen_mask(spec, shape)


def apply_mask(x: np.ndarray, mask) -> np.ndarray:
    """Element-wise ``x * mask``; the mask may be a :class:`Mask` or an array."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    x = np.asarray(x)
    if bits.shape != x.shape:
        raise ValueError(f"mask shape {bits.shape} does not match data shape {x.shape}")
    return x * bits.astype(x.dtype)


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = math.inf
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.snr_db > 0:
            raise ValueError(f"snr_db must be positive or inf, got {self.snr_db}")


def add_awgn(z: np.ndarray, spec: NoiseSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Add white Gaussian noise at ``spec.snr_db`` relative to the mean power of ``z``."""
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise ValueError("add_awgn: input contains non-finite values")
    if math.isinf(spec.snr_db):
        return z.copy()
    power = float(np.mean(np.square(z, dtype=np.float64)))
    if power == 0.0:
        return z.copy()
    sigma = math.sqrt(power / 10.0 ** (spec.snr_db / 10.0))
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    return (z + rng.standard_normal(z.shape) * sigma).astype(z.dtype)


def empirical_snr_db(z: np.ndarray, z_noisy: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(z_noisy, dtype=np.float64) - z
    return 10.0 * math.log10(np.mean(z**2) / np.mean(noise**2))
