"""Parameter-server SGD simulator with compressed two-way communication.

Per iteration of the compressed protocol (algorithm "fo-sgd"): every worker
draws a stochastic gradient, flattens it with its own randomized basis,
quantizes with one dither (K = 1) and ships levels + sign bits; the server
decodes, averages, re-encodes the average with its own basis, amplitude
lam_s and K dithers, and broadcasts; workers decode and take the step
x_{t+1} = x_t - delta_t g_t.  Every message passes through the byte-exact
wire format.  Baselines: uncompressed distributed SGD and two signSGD
variants.

Randomness layout: one substream per (master_seed, iteration, role); a
role's draw is a (workers, dim)-shaped block and worker n reads row n.
Traces are therefore bit-identical for a given seed regardless of the
FOSGD_THREADS setting, which only fans out per-message byte work.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec, oracle
from ._rng import (
    ROLE_GRAD,
    ROLE_SERVER_BASIS,
    ROLE_SERVER_DITHER,
    ROLE_WORKER_BASIS,
    ROLE_WORKER_DITHER,
    SubstreamCache,
)
from .quantizer import DitherConfig, sign_pm1
from .transform import RandomizedBasis, fwht_normalized

CONSTANT = "constant"
ONE_OVER_SQRT_T = "one-over-sqrt-T"

ALGORITHMS = ("fo-sgd", "sgd", "signsgd-majority", "signsgd-average")

FLOAT_BITS = 64  # uncompressed baseline cost per coordinate


class UnsupportedScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Experiment parameters; dithering amplitudes are always derived.

    lam = alpha * B * sqrt(log(d_pad) / d_pad) and
    lam_s = alpha_server * lam * sqrt(log(d_pad)) follow from (alpha,
    alpha_server, B) and are exposed read-only; log is natural.
    """

    dim: int
    workers: int
    iters: int
    k_reps: int                  # K of the downlink quantizer; uplink is K = 1
    alpha: float
    alpha_server: float
    norm_bound: float            # certified B of the oracle in use
    step_size: float
    step_schedule: str = CONSTANT
    master_seed: int = 0
    algorithm: str = "fo-sgd"
    initial_point: np.ndarray | None = None

    def __post_init__(self):
        if self.dim < 1 or self.workers < 1 or self.iters < 1:
            raise ValueError("dim, workers and iters must be positive")
        if self.workers >= (1 << 16):
            raise ValueError("at most 65535 workers")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.step_schedule not in (CONSTANT, ONE_OVER_SQRT_T):
            raise UnsupportedScheduleError(
                f"unknown step schedule {self.step_schedule!r}"
            )
        if self.alpha < 2 or self.alpha_server < 2:
            raise ValueError("alpha and alpha_server must be >= 2")
        if not (self.step_size > 0 and self.norm_bound > 0):
            raise ValueError("step_size and norm_bound must be positive")
        if self.k_reps < 1:
            raise ValueError("k_reps must be >= 1")
        if self.initial_point is not None:
            x0 = np.asarray(self.initial_point, dtype=np.float64)
            if x0.shape != (self.dim,):
                raise ValueError(f"initial_point shape {x0.shape} != ({self.dim},)")
            object.__setattr__(self, "initial_point", x0)

    @property
    def padded_dim(self) -> int:
        return codec.padded_dim(self.dim)

    @property
    def lam(self) -> float:
        d = self.padded_dim
        return self.alpha * self.norm_bound * math.sqrt(math.log(d) / d) if d > 1 \
            else self.alpha * self.norm_bound

    @property
    def lam_server(self) -> float:
        d = self.padded_dim
        return self.alpha_server * self.lam * math.sqrt(math.log(d)) if d > 1 \
            else self.alpha_server * self.lam

    def step(self, t: int) -> float:
        if self.step_schedule == ONE_OVER_SQRT_T:
            return self.step_size / math.sqrt(self.iters)
        return self.step_size

    def x0(self) -> np.ndarray:
        if self.initial_point is None:
            return np.zeros(self.dim)
        return self.initial_point.copy()


CSV_HEADER = "t,f,grad_norm,subopt,halfspace,bits_up,bits_down"


@dataclass
class Trace:
    """Per-iteration metrics plus the realized trajectory.

    Row t records the state x_t before update t, the update direction v_t
    taken at t, and cumulative bits including iteration t's messages.
    """

    t: np.ndarray
    f: np.ndarray
    grad_norm: np.ndarray
    subopt: np.ndarray
    halfspace: np.ndarray
    bits_up: np.ndarray
    bits_down: np.ndarray
    deltas: np.ndarray
    iterates: np.ndarray          # (T+1, d): x_0 .. x_T
    updates: np.ndarray           # (T, d): v_0 .. v_{T-1}
    final_average: np.ndarray     # x_bar_T = (sum delta_t x_t) / (sum delta_t)
    x_star: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return len(self.t)

    def mean_sq_grad(self) -> float:
        """(1/T) sum_t ||grad f(x_t)||^2 over the recorded iterations."""
        return float(np.mean(self.grad_norm**2))

    def recompute_average(self) -> np.ndarray:
        w = self.deltas / self.deltas.sum()
        return w @ self.iterates[:-1]

    def check_trajectory_inequality(self, rtol: float = 1e-9) -> tuple[float, float]:
        """sum_t delta_t <x_t - x*, v_t>  <=  ||x* - x_0||^2 / 2
        + sum_t delta_t^2 ||v_t||^2 / 2 on the realized trajectory.

        Returns (lhs, rhs); raises if the inequality fails beyond roundoff.
        """
        if self.x_star is None:
            raise ValueError("x_star unknown; cannot evaluate the inequality")
        diffs = self.iterates[:-1] - self.x_star
        lhs = float(np.sum(self.deltas * np.sum(diffs * self.updates, axis=1)))
        rhs = 0.5 * float(np.sum((self.x_star - self.iterates[0]) ** 2))
        rhs += 0.5 * float(np.sum(self.deltas**2 * np.sum(self.updates**2, axis=1)))
        slack = rtol * max(1.0, abs(lhs), abs(rhs))
        if lhs > rhs + slack:
            raise AssertionError(
                f"trajectory inequality violated: {lhs} > {rhs}"
            )
        return lhs, rhs

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(CSV_HEADER + "\n")
            for i in range(self.iterations):
                fh.write(
                    f"{int(self.t[i])},{self.f[i]:.17g},{self.grad_norm[i]:.17g},"
                    f"{self.subopt[i]:.17g},{self.halfspace[i]:.17g},"
                    f"{int(self.bits_up[i])},{int(self.bits_down[i])}\n"
                )

    def summary(self) -> str:
        lines = [
            f"iterations {self.iterations}",
            f"final_f {self.f[-1]:.17g}",
            f"final_grad_norm {self.grad_norm[-1]:.17g}",
            f"final_subopt {self.subopt[-1]:.17g}",
            f"mean_sq_grad_norm {self.mean_sq_grad():.17g}",
            f"bits_uplink_total {int(self.bits_up[-1])}",
            f"bits_downlink_total {int(self.bits_down[-1])}",
        ]
        return "\n".join(lines)


def read_trace_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a trace CSV back into named columns (numeric round trip)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected trace header {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = np.array(rows, dtype=np.float64).T
    names = CSV_HEADER.split(",")
    return {name: cols[i] for i, name in enumerate(names)}


def thread_count() -> int:
    """Worker-phase parallelism from FOSGD_THREADS (0 or unset = sequential)."""
    raw = os.environ.get("FOSGD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FOSGD_THREADS must be an integer, got {raw!r}")
    return max(0, n)


def _check_bound_consistency(spec: oracle.OracleSpec, config: RunConfig) -> None:
    """The dithering amplitudes are calibrated to the certified B."""
    if not math.isclose(spec.norm_bound, config.norm_bound, rel_tol=1e-12):
        raise ValueError(
            f"config.norm_bound {config.norm_bound} != certified "
            f"oracle bound {spec.norm_bound}"
        )


class _Recorder:
    """Accumulates per-iteration metrics while a run advances."""

    def __init__(self, problem, config: RunConfig, bits_up_per_iter: int,
                 bits_down_per_iter: int):
        self.problem = problem
        self.config = config
        t_count = config.iters
        self.f = np.empty(t_count)
        self.grad_norm = np.empty(t_count)
        self.subopt = np.empty(t_count)
        self.halfspace = np.empty(t_count)
        self.deltas = np.empty(t_count)
        self.iterates = np.empty((t_count + 1, config.dim))
        self.updates = np.empty((t_count, config.dim))
        self.bits_up_per_iter = bits_up_per_iter
        self.bits_down_per_iter = bits_down_per_iter
        self.x_star = getattr(problem, "minimizer", None)
        self.f_star = getattr(problem, "min_value", None)
        self._wsum = 0.0
        self._xbar_acc = np.zeros(config.dim)

    def record(self, t: int, x: np.ndarray, v: np.ndarray, delta: float) -> None:
        self.iterates[t] = x
        self.updates[t] = v
        self.deltas[t] = delta
        self.f[t] = self.problem.objective(x)
        self.grad_norm[t] = float(np.linalg.norm(self.problem.full_gradient(x)))
        self._wsum += delta
        self._xbar_acc += delta * x
        if self.f_star is not None:
            xbar = self._xbar_acc / self._wsum
            self.subopt[t] = self.problem.objective(xbar) - self.f_star
        else:
            self.subopt[t] = math.nan
        self.halfspace[t] = float(v.sum())

    def finish(self, x_final: np.ndarray) -> Trace:
        t_count = self.config.iters
        self.iterates[t_count] = x_final
        per_iter = np.arange(1, t_count + 1, dtype=np.int64)
        trace = Trace(
            t=np.arange(t_count, dtype=np.int64),
            f=self.f,
            grad_norm=self.grad_norm,
            subopt=self.subopt,
            halfspace=self.halfspace,
            bits_up=per_iter * self.bits_up_per_iter,
            bits_down=per_iter * self.bits_down_per_iter,
            deltas=self.deltas,
            iterates=self.iterates,
            updates=self.updates,
            final_average=self._xbar_acc / self._wsum,
            x_star=None if self.x_star is None else np.asarray(self.x_star),
        )
        if trace.x_star is not None:
            trace.check_trajectory_inequality()
        return trace


def _wire_roundtrip(dim, eps_all, levels_all, up_cfg, pool, threads):
    """Serialize each worker's message, parse the bytes back, return what
    arrived: (eps_matrix, levels_matrix, config) rebuilt from the wire.

    With a pool, contiguous worker chunks are processed concurrently;
    chunk boundaries do not affect the bytes, so results are identical.
    """
    n = eps_all.shape[0]
    if pool is None or n < 2 * threads:
        messages = codec.serialize_block(dim, eps_all, levels_all, up_cfg)
        _, eps_out, levels_out, cfg = codec.deserialize_block(messages)
        return eps_out, levels_out, cfg

    bounds = np.linspace(0, n, threads + 1, dtype=int)
    spans = [(bounds[i], bounds[i + 1]) for i in range(threads) if bounds[i] < bounds[i + 1]]

    def one(span):
        lo, hi = span
        messages = codec.serialize_block(dim, eps_all[lo:hi], levels_all[lo:hi], up_cfg)
        return codec.deserialize_block(messages)

    parts = list(pool.map(one, spans))
    eps_out = np.vstack([p[1] for p in parts])
    levels_out = np.vstack([p[2] for p in parts])
    return eps_out, levels_out, parts[0][3]


def run_fo_sgd(problem, spec: oracle.OracleSpec, config: RunConfig,
               use_wire: bool = True) -> Trace:
    """The compressed two-way protocol.

    use_wire routes every message through serialize/deserialize (the
    default); False keeps the mathematically identical in-memory path,
    consuming the same random draws.
    """
    if config.algorithm != "fo-sgd":
        raise ValueError(f"config.algorithm is {config.algorithm!r}, not fo-sgd")
    _check_bound_consistency(spec, config)
    d = config.dim
    d_pad = config.padded_dim
    n = config.workers
    lam = config.lam
    up_cfg = DitherConfig(lam=lam, k_reps=1)
    down_cfg = DitherConfig(lam=config.lam_server, k_reps=config.k_reps)
    rec = _Recorder(
        problem, config,
        bits_up_per_iter=n * 2 * d_pad,
        bits_down_per_iter=(down_cfg.bits_per_level + 1) * d_pad,
    )
    threads = thread_count()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    streams = SubstreamCache(config.master_seed)
    g_pad = np.zeros((n, d_pad))
    x = config.x0()
    try:
        for t in range(config.iters):
            spec.check_trust_region(x, t)
            g_all = oracle.sample_gradients(
                problem, spec, x, streams.rekey(t, 0, ROLE_GRAD), n
            )
            eps_all = sample_basis_block(d_pad, streams.rekey(t, 0, ROLE_WORKER_BASIS), n)
            # one dither per worker (uplink K = 1); same buffer arithmetic
            # as the scalar quantizer: tau = 2*lam*u - lam
            buf = streams.rekey(t, 0, ROLE_WORKER_DITHER).random((n, d_pad))
            buf *= 2 * lam
            buf -= lam
            g_pad[:, :d] = g_all
            buf += fwht_normalized(eps_all * g_pad)
            levels_all = np.where(buf >= 0, 1, -1).astype(np.int32)

            if use_wire:
                eps_used, levels_used, wire_cfg = _wire_roundtrip(
                    d, eps_all, levels_all, up_cfg, pool, threads
                )
                lam_used = wire_cfg.lam / wire_cfg.k_reps
            else:
                eps_used, levels_used = eps_all, levels_all
                lam_used = lam
            # batched decode: eps * H(levels * lam/K), truncated, then average
            decoded = eps_used * fwht_normalized(levels_used * lam_used)
            g_bar = decoded[:, :d].mean(axis=0)

            basis_s = RandomizedBasis(
                d_pad,
                sample_basis_block(d_pad, streams.rekey(t, 0, ROLE_SERVER_BASIS), 1)[0],
            )
            enc_s = codec.encode(
                g_bar, basis_s, down_cfg, streams.rekey(t, 0, ROLE_SERVER_DITHER)
            )
            if use_wire:
                g_down = codec.decode(codec.deserialize(codec.serialize(enc_s)))
            else:
                g_down = codec.decode(enc_s)
            delta = config.step(t)
            rec.record(t, x, g_down, delta)
            x = x - delta * g_down
    finally:
        if pool is not None:
            pool.shutdown()
    return rec.finish(x)


def sample_basis_block(dim: int, rng: np.random.Generator, count: int) -> np.ndarray:
    """count independent sign-flip diagonals as a (count, dim) int8 array."""
    return (rng.integers(0, 2, size=(count, dim), dtype=np.int8) * 2 - 1)


def run_distributed_sgd(problem, spec: oracle.OracleSpec, config: RunConfig) -> Trace:
    """Uncompressed baseline: x_{t+1} = x_t - delta_t (1/N) sum_n g_{t,n}."""
    if config.algorithm != "sgd":
        raise ValueError(f"config.algorithm is {config.algorithm!r}, not sgd")
    rec = _Recorder(
        problem, config,
        bits_up_per_iter=config.workers * FLOAT_BITS * config.dim,
        bits_down_per_iter=FLOAT_BITS * config.dim,
    )
    streams = SubstreamCache(config.master_seed)
    x = config.x0()
    for t in range(config.iters):
        spec.check_trust_region(x, t)
        g_all = oracle.sample_gradients(
            problem, spec, x, streams.rekey(t, 0, ROLE_GRAD), config.workers
        )
        v = g_all.mean(axis=0)
        delta = config.step(t)
        rec.record(t, x, v, delta)
        x = x - delta * v
    return rec.finish(x)


def run_signsgd(problem, spec: oracle.OracleSpec, config: RunConfig,
                variant: str | None = None) -> Trace:
    """Sign-quantized baselines.

    majority: v_t = sign(sum_n sign(g_{t,n})); average: v_t =
    (1/N) sum_n sign(g_{t,n}).  sign(0) := +1 throughout.
    """
    if variant is None:
        variant = config.algorithm.removeprefix("signsgd-")
    if variant not in ("majority", "average"):
        raise ValueError(f"unknown signSGD variant {variant!r}")
    if config.algorithm != f"signsgd-{variant}":
        raise ValueError(
            f"config.algorithm is {config.algorithm!r}, not signsgd-{variant}"
        )
    down_bits = config.dim if variant == "majority" \
        else (config.workers).bit_length() * config.dim
    rec = _Recorder(
        problem, config,
        bits_up_per_iter=config.workers * config.dim,
        bits_down_per_iter=down_bits,
    )
    streams = SubstreamCache(config.master_seed)
    x = config.x0()
    for t in range(config.iters):
        spec.check_trust_region(x, t)
        g_all = oracle.sample_gradients(
            problem, spec, x, streams.rekey(t, 0, ROLE_GRAD), config.workers
        )
        signs = sign_pm1(g_all)
        if variant == "majority":
            v = sign_pm1(signs.sum(axis=0)).astype(np.float64)
        else:
            v = signs.mean(axis=0)
        delta = config.step(t)
        rec.record(t, x, v, delta)
        x = x - delta * v
    return rec.finish(x)


def run(problem, spec: oracle.OracleSpec, config: RunConfig) -> Trace:
    """Dispatch on config.algorithm."""
    if config.algorithm == "fo-sgd":
        return run_fo_sgd(problem, spec, config)
    if config.algorithm == "sgd":
        return run_distributed_sgd(problem, spec, config)
    return run_signsgd(problem, spec, config)


@dataclass(frozen=True)
class QuadCosine:
    """f(x) = ||x||^2 / 2 + sum_j cos(x_j): smooth with L = 2, minimum at 0.

    The built-in test function of the gradient-norm decay experiment;
    separable, so the 1-sparse oracle applies to it as well.
    """

    dim: int
    smoothness: float = 2.0

    @property
    def minimizer(self) -> np.ndarray:
        return np.zeros(self.dim)

    @property
    def min_value(self) -> float:
        return float(self.dim)

    def objective(self, x: np.ndarray) -> float:
        return 0.5 * float(x @ x) + float(np.cos(x).sum())

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return x - np.sin(x)

    def partials(self, x: np.ndarray) -> np.ndarray:
        return x - np.sin(x)

    def norm_bound(self, trust_radius: float) -> float:
        """||x - sin x|| <= R + sqrt(d) over the l2 ball of radius R."""
        return trust_radius + math.sqrt(self.dim)


def run_nonconvex(config: RunConfig, problem, spec: oracle.OracleSpec) -> Trace:
    """Gradient-norm tracking harness; same dynamics as the convex runs.

    The quantity of interest is trace.mean_sq_grad() = (1/T) sum_t
    ||grad f(x_t)||^2, which decays with T under the 1/sqrt(T) schedule
    down to a quantization floor.
    """
    return run(problem, spec, config)


@dataclass(frozen=True)
class ProblemStats:
    """Measured run/problem quantities the convergence bound consumes."""

    dist0: float          # ||x* - x_0||
    sup_grad_sq: float    # sup_t E||grad f(x_t)||^2 along the trajectory
    sigma_sq: float       # oracle variance bound
    eta_star: float       # E[(1/T) sum_t ||x_t - x*||]


def predicted_convex_bound(config: RunConfig, stats: ProblemStats) -> float:
    """Right-hand side of the constant-step convergence guarantee.

    A sanity ceiling on E[f(x_bar_T)] - f(x*), not a tight prediction.
    """
    if config.step_schedule != CONSTANT:
        raise UnsupportedScheduleError(
            f"bound requires a constant learning rate, got {config.step_schedule!r}"
        )
    delta = config.step(0)
    t_count = config.iters
    d = config.padded_dim
    log_d = math.log(d)
    a, a_s = config.alpha, config.alpha_server
    b = config.norm_bound
    n, k = config.workers, config.k_reps

    base = (
        stats.dist0**2 / (2 * t_count * delta)
        + delta * stats.sup_grad_sq
        + 2 * stats.sigma_sq * delta / n
    )
    quant = a**2 * b**2 * delta * (8 * log_d / n + 4 * a_s**2 * log_d**2 / k)
    tail_up = n * math.exp(-(a**2) * log_d / 8)
    tail_down_sq = a**2 * log_d * math.exp(-(a_s**2) * log_d / 8)
    tail_down_lin = a * math.sqrt(log_d) * math.exp(-(a_s**2) * log_d / 8)
    tails = 32 * b**2 * delta * (tail_up + tail_down_sq)
    tails += 4 * b * stats.eta_star * (tail_up + tail_down_lin)
    return base + quant + tails
