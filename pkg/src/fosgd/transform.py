"""Normalized fast Walsh-Hadamard transform and the randomized sensing basis H_eps.

The transform matrix is (1/sqrt(d)) * H_d where H_d is the +-1 Hadamard
matrix of order d = 2^k.  Normalization makes the matrix orthonormal and
an involution (H = H^T = H^-1), so the same butterfly kernel computes both
directions.  The randomized basis composes a diagonal sign flip:
H_eps = H D_eps, with inverse H_eps^-1 = D_eps H^T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when a length is not a power of two or does not match a basis."""


def _check_power_of_two(n: int) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise DimensionError(f"length must be a power of two, got {n}")


def fwht_inplace(x: np.ndarray) -> np.ndarray:
    """Unnormalized in-place Walsh-Hadamard butterflies over the last axis.

    Operates on float64 data owned by the caller; returns the same array.
    O(d log d).  Vectorized over any leading axes, so a (n, d) batch costs
    one pass per level, not per row.
    """
    d = x.shape[-1]
    _check_power_of_two(d)
    if d > 1 and not x.flags.c_contiguous:
        # the level views below must alias x, not a reshape copy
        raise ValueError("fwht_inplace requires a C-contiguous array")
    h = 1
    while h < d:
        view = x.reshape(x.shape[:-1] + (d // (2 * h), 2, h))
        lo = view[..., 0, :].copy()
        hi = view[..., 1, :]
        view[..., 0, :] = lo + hi
        view[..., 1, :] = lo - hi
        h *= 2
    return x


def fwht_normalized(x: np.ndarray) -> np.ndarray:
    """Return (1/sqrt(d)) * H_d @ x, out of place, along the last axis.

    Involution: applying it twice returns the input (up to roundoff).
    """
    out = np.array(x, dtype=np.float64, copy=True)
    fwht_inplace(out)
    out *= 1.0 / np.sqrt(out.shape[-1])
    return out


@dataclass(frozen=True)
class RandomizedBasis:
    """The sign vector eps and dimension defining H_eps = H * D_eps.

    Immutable; safe to share across threads.
    """

    dim: int
    epsilon: np.ndarray  # entries exactly -1.0 or +1.0, length dim

    def __post_init__(self):
        _check_power_of_two(self.dim)
        eps = np.asarray(self.epsilon, dtype=np.float64)
        if eps.shape != (self.dim,):
            raise DimensionError(
                f"epsilon has shape {eps.shape}, expected ({self.dim},)"
            )
        if not np.all(np.abs(eps) == 1.0):
            raise ValueError("epsilon entries must be exactly -1 or +1")
        object.__setattr__(self, "epsilon", eps)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return apply(self, x)

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        return apply_inverse(self, x)


def sample_basis(dim: int, rng: np.random.Generator) -> RandomizedBasis:
    """Draw eps uniformly from {-1,+1}^dim using the given stream."""
    _check_power_of_two(dim)
    eps = rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0
    return RandomizedBasis(dim=dim, epsilon=eps)


def apply(basis: RandomizedBasis, x: np.ndarray) -> np.ndarray:
    """Compute H_eps x = fwht_normalized(eps * x).  Preserves the 2-norm."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.dim:
        raise DimensionError(
            f"vector length {x.shape[-1]} does not match basis dim {basis.dim}"
        )
    return fwht_normalized(basis.epsilon * x)


def apply_inverse(basis: RandomizedBasis, x: np.ndarray) -> np.ndarray:
    """Compute H_eps^-1 x = eps * fwht_normalized(x) (since H^T = H)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.dim:
        raise DimensionError(
            f"vector length {x.shape[-1]} does not match basis dim {basis.dim}"
        )
    return basis.epsilon * fwht_normalized(x)
