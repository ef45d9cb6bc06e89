"""K-averaged dithered one-bit quantizer, analytic oracles, level bit-packing.

The quantizer Q_{lam,K}(x) = (lam/K) * sum_i sign(x + tau_i) with K
independent dithers tau_i ~ U([-lam, lam]^d).  Only the integer level sums
sum_i sign(.) are ever stored or transmitted; the real-valued output is
recovered as (lam/K) * levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """Malformed packed-level bytes."""


class PreconditionError(ValueError):
    """Input violates the stated validity region of an identity."""


@dataclass(frozen=True)
class DitherConfig:
    """Dithering amplitude lam > 0 and number of averaged dithers k_reps >= 1."""

    lam: float
    k_reps: int

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lam must be positive and finite, got {self.lam}")
        if not (1 <= self.k_reps <= 0xFFFF):
            # upper bound is the u16 wire-format field width
            raise ValueError(f"k_reps must be in [1, 65535], got {self.k_reps}")

    @property
    def bits_per_level(self) -> int:
        """ceil(log2(K+1)) bits store one level code."""
        return self.k_reps.bit_length()


@dataclass(frozen=True)
class QuantizedVector:
    """Integer levels in {-K, -K+2, ..., K} plus (lam, K, d) metadata."""

    levels: np.ndarray
    dim: int
    config: DitherConfig

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.int32)
        k = self.config.k_reps
        if lv.shape != (self.dim,):
            raise ValueError(f"levels shape {lv.shape} != ({self.dim},)")
        if lv.size and (np.abs(lv).max() > k or np.any((lv - k) % 2 != 0)):
            raise ValueError("levels must lie in {-K, -K+2, ..., K}")
        object.__setattr__(self, "levels", lv)

    def dequantize(self) -> np.ndarray:
        """The real-valued quantizer output (lam/K) * levels."""
        return (self.config.lam / self.config.k_reps) * self.levels.astype(np.float64)


def sign_pm1(v: np.ndarray) -> np.ndarray:
    """Componentwise sign with the convention sign(0) := +1.

    A fixed convention at exact floating-point zeros keeps runs
    deterministic; sign-based baselines share it.
    """
    return np.where(np.asarray(v) >= 0.0, 1, -1).astype(np.int32)


def quantize(
    x: np.ndarray, config: DitherConfig, rng: np.random.Generator
) -> QuantizedVector:
    """Draw K fresh dithers from rng and return the level sums.

    levels[j] = sum_{i=1..K} sign(x[j] + tau_i[j]).  Consumes exactly K*d
    uniforms from rng, dither-major (tau_1 fully before tau_2, ...).
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    k, lam = config.k_reps, config.lam
    nonneg = np.zeros(d, dtype=np.int32)
    # chunk over dithers to bound the (chunk, d) buffer at ~64 MB
    chunk = max(1, min(k, (1 << 23) // max(d, 1)))
    done = 0
    while done < k:
        m = min(chunk, k - done)
        # tau = -lam + 2*lam*U, computed in place; same draw sequence as
        # rng.uniform(-lam, lam, (m, d))
        buf = rng.random((m, d))
        buf *= 2.0 * lam
        buf -= lam
        buf += x
        # sign(0) := +1, so count the nonnegative entries
        nonneg += (buf >= 0.0).sum(axis=0, dtype=np.int32)
        done += m
    levels = 2 * nonneg - k  # c pluses and K-c minuses sum to 2c - K
    return QuantizedVector(levels=levels.astype(np.int32), dim=d, config=config)


def expected_quantizer_output(x: np.ndarray, lam: float) -> np.ndarray:
    """E[Q_{lam,K}(x)] = componentwise clamp of x to [-lam, lam]; K drops out."""
    if not (math.isfinite(lam) and lam > 0):
        raise ValueError(f"lam must be positive and finite, got {lam}")
    return np.clip(np.asarray(x, dtype=np.float64), -lam, lam)


def quantizer_mse(x: np.ndarray, config: DitherConfig) -> float:
    """E||Q_{lam,K}(x) - x||^2 = (lam^2 d - ||x||^2) / K, valid for ||x||_inf <= lam."""
    x = np.asarray(x, dtype=np.float64)
    lam, k = config.lam, config.k_reps
    if x.size and np.abs(x).max() > lam:
        raise PreconditionError(
            "quantizer_mse requires ||x||_inf <= lam; the identity does not "
            "hold for out-of-range inputs"
        )
    return float((lam * lam * x.size - float(x @ x)) / k)


def pack_levels(q: QuantizedVector) -> bytes:
    """Pack levels as unsigned codes u = (level+K)/2, fixed-width, LSB-first.

    Each code occupies exactly ceil(log2(K+1)) bits; coordinates in index
    order; the final byte is zero-padded.
    """
    k = q.config.k_reps
    nbits = q.config.bits_per_level
    codes = ((q.levels.astype(np.int64) + k) >> 1).astype(np.uint8 if nbits <= 8 else np.uint16)
    bits = (codes[:, None] >> np.arange(nbits, dtype=codes.dtype)) & 1
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="little").tobytes()


def packed_size(dim: int, config: DitherConfig) -> int:
    """Number of bytes pack_levels produces for a dim-coordinate vector."""
    return (dim * config.bits_per_level + 7) // 8


def unpack_levels(data: bytes, dim: int, config: DitherConfig) -> QuantizedVector:
    """Inverse of pack_levels; validates length, codes, and zero padding."""
    k = config.k_reps
    nbits = config.bits_per_level
    expected = packed_size(dim, config)
    if len(data) != expected:
        raise FormatError(
            f"packed levels: expected {expected} bytes for dim={dim}, "
            f"K={k}, got {len(data)}"
        )
    allbits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    used = dim * nbits
    if np.any(allbits[used:]):
        raise FormatError("packed levels: nonzero padding bits in final byte")
    bits = allbits[:used].reshape(dim, nbits).astype(np.int64)
    codes = (bits << np.arange(nbits, dtype=np.int64)).sum(axis=1)
    if codes.size and codes.max() > k:
        raise FormatError(f"packed levels: code {int(codes.max())} exceeds K={k}")
    levels = (2 * codes - k).astype(np.int32)
    return QuantizedVector(levels=levels, dim=dim, config=config)
