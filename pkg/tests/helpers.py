"""Shared test utilities: dense transform oracle and Monte-Carlo drivers."""

import numpy as np

from fosgd import DitherConfig, quantize


def dense_hadamard(d: int) -> np.ndarray:
    """Explicit (1/sqrt(d)) * H_d by Sylvester doubling; the slow oracle the
    fast transform is checked against."""
    h = np.array([[1.0]])
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(d)


def quantizer_draws(
    x: np.ndarray, lam: float, k: int, n_draws: int, rng: np.random.Generator
) -> np.ndarray:
    """n_draws independent Q_{lam,K}(x) samples as rows of (n_draws, d).

    The quantizer acts componentwise with i.i.d. dithers, so quantizing a
    tiled copy of x in one call yields exactly n_draws independent samples;
    this keeps million-draw Monte-Carlo checks inside vectorized code.
    """
    x = np.asarray(x, dtype=np.float64)
    tiled = np.tile(x, n_draws)
    q = quantize(tiled, DitherConfig(lam=lam, k_reps=k), rng)
    return q.dequantize().reshape(n_draws, x.size)
