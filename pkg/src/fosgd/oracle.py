"""Stochastic gradient oracles and the problems they sample from.

Two problem families cover the experiments: least-squares regression
f(x) = (1/m) ||y - Ax||^2 with a with-replacement minibatch oracle, and
separable objectives (sum of per-coordinate terms) with a 1-sparse oracle
g = d * (df/dx_j) e_j, j uniform on [d].

Norm bounds B are certified over a trust region of iterates, never by
clipping samples: experiments abort if an iterate leaves the region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TrustRegionError(RuntimeError):
    """An iterate left the region where the oracle's norm bound is certified."""


# trust-region norms
L2 = "l2"
LINF = "linf"

# oracle kinds
LEAST_SQUARES_MINIBATCH = "least-squares-minibatch"
ONE_SPARSE_SEPARABLE = "one-sparse-separable"
FULL_GRADIENT = "full-gradient"


@dataclass(frozen=True)
class OracleSpec:
    """How to sample gradients and the certificates that come with them.

    norm_bound B is a certified supremum of ||g||_2 over the trust region
    {x : ||x||_trust_norm <= trust_radius}; variance_bound is an empirical
    estimate (None until measured).
    """

    kind: str
    batch: int
    norm_bound: float
    trust_radius: float
    trust_norm: str = L2
    variance_bound: float | None = None

    def __post_init__(self):
        if self.kind not in (LEAST_SQUARES_MINIBATCH, ONE_SPARSE_SEPARABLE, FULL_GRADIENT):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not (self.norm_bound > 0 and math.isfinite(self.norm_bound)):
            raise ValueError("norm_bound must be positive and finite")
        if self.trust_norm not in (L2, LINF):
            raise ValueError(f"unknown trust norm {self.trust_norm!r}")

    def check_trust_region(self, x: np.ndarray, t: int) -> None:
        r = float(np.abs(x).max()) if self.trust_norm == LINF else float(np.linalg.norm(x))
        if r > self.trust_radius:
            raise TrustRegionError(
                f"iterate at step {t} has {self.trust_norm} norm {r:.6g} > "
                f"trust radius {self.trust_radius:.6g}; the certified bound "
                f"B={self.norm_bound:.6g} no longer applies"
            )


@dataclass(frozen=True)
class LeastSquaresProblem:
    """f(x) = (1/m) ||y - Ax||^2 with the minimizer cached at construction."""

    design: np.ndarray   # m x d, rows a_i
    targets: np.ndarray  # length m
    minimizer: np.ndarray = field(init=False)
    min_value: float = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.design, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if a.ndim != 2 or y.shape != (a.shape[0],):
            raise ValueError(f"design {a.shape} and targets {y.shape} mismatch")
        object.__setattr__(self, "design", a)
        object.__setattr__(self, "targets", y)
        xs, *_ = np.linalg.lstsq(a, y, rcond=None)
        object.__setattr__(self, "minimizer", xs)
        object.__setattr__(self, "min_value", self.objective(xs))
        g = self.full_gradient(xs)
        scale = max(1.0, float(np.linalg.norm(a, ord=2)) ** 2 / a.shape[0])
        if np.linalg.norm(g) > 1e-8 * scale:
            raise ValueError("cached minimizer fails the stationarity check")

    @property
    def dim(self) -> int:
        return self.design.shape[1]

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]

    def objective(self, x: np.ndarray) -> float:
        r = self.targets - self.design @ x
        return float(r @ r) / self.n_rows

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        r = self.design @ x - self.targets
        return (2.0 / self.n_rows) * (self.design.T @ r)

    def minibatch_gradient(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        rows = self.design[idx]
        r = rows @ x - self.targets[idx]
        return (2.0 / len(idx)) * (rows.T @ r)

    def norm_bound(self, trust_radius: float) -> float:
        """B = 2 max||a_i|| (max|y_i| + max||a_i|| R): a certified supremum
        of any single-row gradient norm over the l2 trust region, hence of
        every minibatch average."""
        row_norms = np.linalg.norm(self.design, axis=1)
        a_max = float(row_norms.max())
        y_max = float(np.abs(self.targets).max())
        return 2.0 * a_max * (y_max + a_max * trust_radius)


@dataclass(frozen=True)
class ShiftedQuadratic:
    """f(x) = ||x + c 1||^2, the separable objective of the sign-failure runs.

    Minimizer -c*1 with value 0; partial derivatives 2(x_j + c).
    """

    dim: int
    shift: float

    @property
    def minimizer(self) -> np.ndarray:
        return np.full(self.dim, -self.shift)

    @property
    def min_value(self) -> float:
        return 0.0

    def objective(self, x: np.ndarray) -> float:
        r = x + self.shift
        return float(r @ r)

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (x + self.shift)

    def partials(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (x + self.shift)

    def norm_bound(self, trust_radius_inf: float) -> float:
        """sup ||d (df/dx_j) e_j||_2 = 2 d (|c| + R) over ||x||_inf <= R."""
        return 2.0 * self.dim * (abs(self.shift) + trust_radius_inf)


def objective(problem, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.dim,):
        raise ValueError(f"x has shape {x.shape}, problem dim is {problem.dim}")
    return problem.objective(x)


def full_gradient(problem, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.dim,):
        raise ValueError(f"x has shape {x.shape}, problem dim is {problem.dim}")
    return problem.full_gradient(x)


def sample_gradient(
    problem, spec: OracleSpec, x: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One unbiased stochastic gradient according to spec.kind."""
    if spec.kind == LEAST_SQUARES_MINIBATCH:
        idx = rng.integers(0, problem.n_rows, size=spec.batch)
        return problem.minibatch_gradient(x, idx)
    if spec.kind == ONE_SPARSE_SEPARABLE:
        return sample_one_sparse(problem, x, rng)
    return problem.full_gradient(x)


def sample_one_sparse(problem, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """g = d * (df/dx_j) e_j with j uniform on [d]; unbiased and 1-sparse."""
    d = problem.dim
    j = int(rng.integers(0, d))
    g = np.zeros(d)
    g[j] = d * problem.partials(x)[j]
    return g


def sample_gradients(
    problem, spec: OracleSpec, x: np.ndarray, rng: np.random.Generator, count: int
) -> np.ndarray:
    """count unbiased stochastic gradients as rows of a (count, dim) array.

    Draws come off rng in row-major order, so a whole worker cohort can
    share one substream; row n is worker n's sample.
    """
    x = np.asarray(x, dtype=np.float64)
    d = problem.dim
    if spec.kind == LEAST_SQUARES_MINIBATCH:
        idx = rng.integers(0, problem.n_rows, size=(count, spec.batch))
        rows = problem.design[idx]
        resid = rows @ x - problem.targets[idx]
        return (2.0 / spec.batch) * np.einsum("cbd,cb->cd", rows, resid)
    if spec.kind == ONE_SPARSE_SEPARABLE:
        j = rng.integers(0, d, size=count)
        g = np.zeros((count, d))
        g[np.arange(count), j] = d * problem.partials(x)[j]
        return g
    return np.tile(problem.full_gradient(x), (count, 1))


def estimate_sigma_sq(
    problem,
    spec: OracleSpec,
    rng: np.random.Generator,
    n_points: int = 32,
    n_samples: int = 256,
) -> float:
    """Empirical variance bound: max over trust-region points of
    E ||g - grad f||^2, estimated from n_samples draws per point.

    The oracle definition asks for a global variance bound, but for these
    problems the variance depends on x; the reported number is the maximum
    over sampled points of the region (x = 0 and the boundary included).
    """
    d = problem.dim
    worst = 0.0
    for p in range(n_points):
        if p == 0:
            x = np.zeros(d)
        else:
            u = rng.normal(size=d)
            if spec.trust_norm == LINF:
                x = rng.uniform(-spec.trust_radius, spec.trust_radius, size=d)
            else:
                x = u / np.linalg.norm(u) * spec.trust_radius * rng.random() ** (1.0 / d)
        g0 = problem.full_gradient(x)
        acc = 0.0
        for _ in range(n_samples):
            g = sample_gradient(problem, spec, x, rng)
            acc += float(np.sum((g - g0) ** 2))
        worst = max(worst, acc / n_samples)
    return worst


def synthetic_least_squares(
    m: int,
    d: int,
    rng: np.random.Generator,
    *,
    noise: float = 0.0,
    orthonormal_rows: bool = False,
    planted_targets: bool = False,
    target_scale: float = 1.0,
) -> LeastSquaresProblem:
    """Seeded Gaussian-design generator.

    orthonormal_rows orthonormalizes the rows (requires m <= d), giving
    unit row norms and A A^T = I.  planted_targets sets y to an alternating
    +-target_scale pattern (plus noise); otherwise a random x with norm
    target_scale is planted and y = A x + noise.
    """
    g = rng.normal(size=(m, d))
    if orthonormal_rows:
        if m > d:
            raise ValueError("orthonormal_rows requires m <= d")
        q, r = np.linalg.qr(g.T)           # q: d x m
        a = (q * np.sign(np.diag(r))).T    # sign fix keeps the draw canonical
    else:
        a = g / math.sqrt(d)               # row norms concentrate near 1
    if planted_targets:
        y = target_scale * np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
    else:
        w = rng.normal(size=d)
        x_planted = target_scale * w / np.linalg.norm(w)
        y = a @ x_planted
    if noise > 0:
        y = y + noise * rng.normal(size=m)
    return LeastSquaresProblem(design=a, targets=y)


def load_least_squares(design_path: str | Path, targets_path: str | Path) -> LeastSquaresProblem:
    """Plain-text loader: one design row per line, whitespace-separated
    decimals; targets one value per line in the companion file."""
    a = np.loadtxt(design_path, ndmin=2, dtype=np.float64)
    y = np.loadtxt(targets_path, dtype=np.float64).reshape(-1)
    return LeastSquaresProblem(design=a, targets=y)
