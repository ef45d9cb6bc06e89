"""Distributed protocol runs: determinism, bit accounting, trajectory facts."""

import dataclasses
import math

import numpy as np
import pytest

from fosgd import (
    FULL_GRADIENT,
    LEAST_SQUARES_MINIBATCH,
    ONE_SPARSE_SEPARABLE,
    DitherConfig,
    LeastSquaresProblem,
    OracleSpec,
    ProblemStats,
    QuadCosine,
    RunConfig,
    ShiftedQuadratic,
    TrustRegionError,
    UnsupportedScheduleError,
    predicted_convex_bound,
    read_trace_csv,
    run,
    run_distributed_sgd,
    run_fo_sgd,
    run_nonconvex,
    run_signsgd,
    sample_gradients,
    synthetic_least_squares,
)
from fosgd.oracle import LINF
from fosgd import simulator
from fosgd.simulator import ONE_OVER_SQRT_T
from fosgd._rng import ROLE_GRAD, SubstreamCache, pack_key, substream


def lsq_setup(algorithm="fo-sgd", iters=30, seed=7, workers=8):
    problem = synthetic_least_squares(3, 6, np.random.default_rng(40), noise=0.2)
    radius = 3.0
    spec = OracleSpec(
        kind=LEAST_SQUARES_MINIBATCH,
        batch=1,
        norm_bound=problem.norm_bound(radius),
        trust_radius=radius,
    )
    config = RunConfig(
        dim=6,
        workers=workers,
        iters=iters,
        k_reps=5,
        alpha=2.0,
        alpha_server=2.0,
        norm_bound=spec.norm_bound,
        step_size=1e-3,
        master_seed=seed,
        algorithm=algorithm,
    )
    return problem, spec, config


def constant_problem(d):
    """f identically zero: every gradient sample vanishes."""
    return LeastSquaresProblem(design=np.zeros((2, d)), targets=np.zeros(2))


def traces_equal(a, b):
    for name in ("t", "f", "grad_norm", "subopt", "halfspace", "bits_up",
                 "bits_down", "deltas", "iterates", "updates", "final_average"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name), err_msg=name)


def test_config_validation():
    ok = dict(dim=4, workers=2, iters=3, k_reps=1, alpha=2.0, alpha_server=2.0,
              norm_bound=1.0, step_size=0.1)
    RunConfig(**ok)
    with pytest.raises(ValueError):
        RunConfig(**{**ok, "alpha": 1.9})
    with pytest.raises(ValueError):
        RunConfig(**{**ok, "alpha_server": 0.5})
    with pytest.raises(ValueError):
        RunConfig(**{**ok, "workers": 1 << 16})
    with pytest.raises(ValueError):
        RunConfig(**{**ok, "algorithm": "adam"})
    with pytest.raises(UnsupportedScheduleError):
        RunConfig(**{**ok, "step_schedule": "cosine"})
    with pytest.raises(ValueError):
        RunConfig(**{**ok, "step_size": 0.0})
    with pytest.raises(ValueError):
        RunConfig(**{**ok, "k_reps": 0})
    with pytest.raises(ValueError):
        RunConfig(**{**ok, "initial_point": np.zeros(5)})


def test_derived_amplitudes():
    cfg = RunConfig(dim=5, workers=2, iters=3, k_reps=4, alpha=2.5,
                    alpha_server=3.0, norm_bound=7.0, step_size=0.1)
    assert cfg.padded_dim == 8
    lam = 2.5 * 7.0 * math.sqrt(math.log(8) / 8)
    assert cfg.lam == pytest.approx(lam, rel=1e-15)
    assert cfg.lam_server == pytest.approx(3.0 * lam * math.sqrt(math.log(8)), rel=1e-15)
    tiny = RunConfig(dim=1, workers=1, iters=1, k_reps=1, alpha=2.0,
                     alpha_server=2.0, norm_bound=3.0, step_size=0.1)
    assert tiny.lam == 6.0  # log(1) would zero the amplitude; d = 1 keeps alpha*B


def test_step_schedules():
    base = dict(dim=4, workers=1, iters=100, k_reps=1, alpha=2.0,
                alpha_server=2.0, norm_bound=1.0, step_size=0.5)
    const = RunConfig(**base)
    assert const.step(0) == const.step(99) == 0.5
    root = RunConfig(**{**base, "step_schedule": ONE_OVER_SQRT_T})
    assert root.step(0) == root.step(99) == pytest.approx(0.05)


def test_substreams_rekey_and_independence():
    cache = SubstreamCache(5)
    a = cache.rekey(3, 2, 1).random(8)
    b = substream(5, 3, 2, 1).random(8)
    np.testing.assert_array_equal(a, b)
    c = cache.rekey(3, 2, 2).random(8)
    assert not np.array_equal(a, c)
    # rekeying back replays the stream from the start
    np.testing.assert_array_equal(cache.rekey(3, 2, 1).random(8), a)
    with pytest.raises(ValueError):
        pack_key(-1, 0, 0)
    with pytest.raises(ValueError):
        pack_key(0, 1 << 16, 0)


def test_thread_count_env(monkeypatch):
    monkeypatch.delenv("FOSGD_THREADS", raising=False)
    assert simulator.thread_count() == 0
    monkeypatch.setenv("FOSGD_THREADS", "3")
    assert simulator.thread_count() == 3
    monkeypatch.setenv("FOSGD_THREADS", "-2")
    assert simulator.thread_count() == 0
    monkeypatch.setenv("FOSGD_THREADS", "many")
    with pytest.raises(ValueError):
        simulator.thread_count()


def test_fo_sgd_deterministic():
    problem, spec, config = lsq_setup()
    a = run_fo_sgd(problem, spec, config)
    b = run_fo_sgd(problem, spec, config)
    traces_equal(a, b)
    c = run_fo_sgd(problem, spec, dataclasses.replace(config, master_seed=8))
    assert not np.array_equal(a.iterates, c.iterates)


def test_wire_path_equals_fast_path():
    problem, spec, config = lsq_setup()
    wire = run_fo_sgd(problem, spec, config, use_wire=True)
    fast = run_fo_sgd(problem, spec, config, use_wire=False)
    traces_equal(wire, fast)


def test_threaded_run_identical(monkeypatch):
    problem, spec, config = lsq_setup()
    monkeypatch.delenv("FOSGD_THREADS", raising=False)
    seq = run_fo_sgd(problem, spec, config)
    monkeypatch.setenv("FOSGD_THREADS", "4")
    par = run_fo_sgd(problem, spec, config)
    traces_equal(seq, par)


def test_bit_accounting_exact():
    problem, spec, config = lsq_setup(iters=10)
    t = np.arange(1, 11)
    d_pad = 8
    fo = run_fo_sgd(problem, spec, config)
    np.testing.assert_array_equal(fo.bits_up, t * config.workers * 2 * d_pad)
    level_bits = DitherConfig(lam=1.0, k_reps=config.k_reps).bits_per_level
    np.testing.assert_array_equal(fo.bits_down, t * (level_bits + 1) * d_pad)

    _, _, sgd_cfg = lsq_setup(algorithm="sgd", iters=10)
    sgd = run_distributed_sgd(problem, spec, sgd_cfg)
    np.testing.assert_array_equal(sgd.bits_up, t * sgd_cfg.workers * 64 * 6)
    np.testing.assert_array_equal(sgd.bits_down, t * 64 * 6)

    sq = ShiftedQuadratic(dim=4, shift=1.0)
    sq_spec = OracleSpec(
        kind=ONE_SPARSE_SEPARABLE, batch=1, norm_bound=sq.norm_bound(2.0),
        trust_radius=2.0, trust_norm=LINF,
    )
    # average variant ships 3-worker sums: bit_length(3) = 2 bits per coordinate
    for variant, down in (("majority", 4), ("average", 8)):
        cfg = RunConfig(dim=4, workers=3, iters=10, k_reps=1, alpha=2.0,
                        alpha_server=2.0, norm_bound=sq_spec.norm_bound,
                        step_size=1e-3, algorithm=f"signsgd-{variant}")
        tr = run_signsgd(sq, sq_spec, cfg)
        np.testing.assert_array_equal(tr.bits_up, t * 3 * 4)
        np.testing.assert_array_equal(tr.bits_down, t * down)


def test_averaged_iterate_identity():
    problem, spec, config = lsq_setup()
    tr = run_fo_sgd(problem, spec, config)
    assert np.abs(tr.final_average - tr.recompute_average()).max() <= 1e-12
    # the subopt column tracks the running weighted average, prefix by prefix
    for t in (0, 3, config.iters - 1):
        w = tr.deltas[: t + 1] / tr.deltas[: t + 1].sum()
        xbar = w @ tr.iterates[: t + 1]
        assert tr.subopt[t] == pytest.approx(
            problem.objective(xbar) - problem.min_value, rel=1e-12, abs=1e-15
        )


def test_update_norm_bound():
    problem, spec, config = lsq_setup()
    tr = run_fo_sgd(problem, spec, config)
    limit = config.lam_server * math.sqrt(config.padded_dim)
    assert np.linalg.norm(tr.updates, axis=1).max() <= limit * (1 + 1e-12)


def test_trajectory_inequality_api():
    problem, spec, config = lsq_setup()
    tr = run_fo_sgd(problem, spec, config)
    lhs, rhs = tr.check_trajectory_inequality()
    assert lhs <= rhs
    tr.x_star = None
    with pytest.raises(ValueError):
        tr.check_trajectory_inequality()


def test_halfspace_nonnegative_one_sparse():
    sq = ShiftedQuadratic(dim=4, shift=1.0)
    spec = OracleSpec(
        kind=ONE_SPARSE_SEPARABLE, batch=1, norm_bound=sq.norm_bound(2.0),
        trust_radius=2.0, trust_norm=LINF,
    )
    for variant in ("majority", "average"):
        cfg = RunConfig(dim=4, workers=3, iters=50, k_reps=1, alpha=2.0,
                        alpha_server=2.0, norm_bound=spec.norm_bound,
                        step_size=1e-3, master_seed=11,
                        algorithm=f"signsgd-{variant}")
        tr = run_signsgd(sq, spec, cfg)
        assert tr.halfspace.min() >= 0.0
        np.testing.assert_array_equal(tr.halfspace, tr.updates.sum(axis=1))


def test_zero_gradient_step_unbiased():
    # encoding a zero gradient transmits random signs whose decoded mean is
    # zero, so E[x_1] = x_0 over reruns
    problem = constant_problem(4)
    spec = OracleSpec(kind=FULL_GRADIENT, batch=1, norm_bound=1.0, trust_radius=5.0)
    reruns = 10_000
    moves = np.empty((reruns, 4))
    for seed in range(reruns):
        config = RunConfig(dim=4, workers=1, iters=1, k_reps=1, alpha=2.0,
                           alpha_server=2.0, norm_bound=1.0, step_size=0.05,
                           master_seed=seed)
        tr = run_fo_sgd(problem, spec, config)
        moves[seed] = tr.iterates[1] - tr.iterates[0]
    sem = moves.std(axis=0, ddof=1) / math.sqrt(reruns)
    assert np.all(np.abs(moves.mean(axis=0)) <= 5.0 * sem)
    assert moves.std() > 0  # the iterate does move; only the mean vanishes


def test_constant_function_dither_drift():
    problem = constant_problem(8)
    spec = OracleSpec(kind=FULL_GRADIENT, batch=1, norm_bound=1.0, trust_radius=5.0)
    config = RunConfig(dim=8, workers=2, iters=200, k_reps=4, alpha=2.0,
                       alpha_server=2.0, norm_bound=1.0, step_size=0.01,
                       master_seed=3)
    tr = run_nonconvex(config, problem, spec)
    np.testing.assert_array_equal(tr.grad_norm, np.zeros(200))
    np.testing.assert_array_equal(tr.subopt, np.zeros(200))
    entries = tr.updates.ravel()
    assert abs(entries.mean()) <= 5.0 * entries.std(ddof=1) / math.sqrt(entries.size)


def test_sgd_single_worker_is_plain_recursion():
    problem, spec, _ = lsq_setup()
    config = RunConfig(dim=6, workers=1, iters=20, k_reps=1, alpha=2.0,
                       alpha_server=2.0, norm_bound=spec.norm_bound,
                       step_size=0.01, master_seed=5, algorithm="sgd")
    tr = run_distributed_sgd(problem, spec, config)
    x = np.zeros(6)
    for t in range(20):
        g = sample_gradients(problem, spec, x, substream(5, t, 0, ROLE_GRAD), 1)[0]
        np.testing.assert_array_equal(tr.iterates[t], x)
        np.testing.assert_array_equal(tr.updates[t], g)
        x = x - 0.01 * g
    np.testing.assert_array_equal(tr.iterates[20], x)


def test_sgd_deterministic_oracle_monotone():
    # full gradients and a step below 1/L make plain gradient descent; f
    # decreases every iteration
    sq = ShiftedQuadratic(dim=6, shift=1.0)
    spec = OracleSpec(kind=FULL_GRADIENT, batch=1, norm_bound=sq.norm_bound(3.0),
                      trust_radius=3.0, trust_norm=LINF)
    config = RunConfig(dim=6, workers=2, iters=40, k_reps=1, alpha=2.0,
                       alpha_server=2.0, norm_bound=spec.norm_bound,
                       step_size=0.1, algorithm="sgd")
    tr = run_distributed_sgd(sq, spec, config)
    assert np.all(np.diff(tr.f) < 0)


def test_nonconvex_harness_matches_convex_dispatch():
    problem, spec, config = lsq_setup()
    a = run(problem, spec, config)
    b = run_nonconvex(config, problem, spec)
    traces_equal(a, b)


def test_dispatch_guards():
    problem, spec, config = lsq_setup()
    with pytest.raises(ValueError):
        run_distributed_sgd(problem, spec, config)  # algorithm is fo-sgd
    _, _, sgd_cfg = lsq_setup(algorithm="sgd")
    with pytest.raises(ValueError):
        run_fo_sgd(problem, spec, sgd_cfg)
    with pytest.raises(ValueError):
        run_signsgd(problem, spec, sgd_cfg)
    with pytest.raises(ValueError):
        run_signsgd(problem, spec, sgd_cfg, variant="median")


def test_bound_consistency_guard():
    problem, spec, config = lsq_setup()
    bad = dataclasses.replace(config, norm_bound=spec.norm_bound * 1.5)
    with pytest.raises(ValueError, match="certified"):
        run_fo_sgd(problem, spec, bad)


def test_trust_region_abort():
    sq = ShiftedQuadratic(dim=4, shift=1.0)
    spec = OracleSpec(kind=ONE_SPARSE_SEPARABLE, batch=1,
                      norm_bound=sq.norm_bound(0.5), trust_radius=0.5,
                      trust_norm=LINF)
    config = RunConfig(dim=4, workers=1, iters=5, k_reps=1, alpha=2.0,
                       alpha_server=2.0, norm_bound=spec.norm_bound,
                       step_size=0.1, algorithm="fo-sgd",
                       initial_point=np.full(4, 2.0))
    with pytest.raises(TrustRegionError):
        run_fo_sgd(sq, spec, config)


def test_quad_cosine_shape():
    qc = QuadCosine(dim=16)
    assert qc.min_value == 16.0
    assert qc.objective(np.zeros(16)) == 16.0
    np.testing.assert_array_equal(qc.full_gradient(np.zeros(16)), np.zeros(16))
    np.testing.assert_array_equal(qc.minimizer, np.zeros(16))
    assert qc.norm_bound(3.0) == 3.0 + 4.0
    x = np.random.default_rng(1).normal(size=16)
    assert qc.objective(x) >= qc.min_value
    np.testing.assert_allclose(qc.partials(x), qc.full_gradient(x))


def test_mean_sq_grad():
    problem, spec, config = lsq_setup(iters=10)
    tr = run_fo_sgd(problem, spec, config)
    assert tr.mean_sq_grad() == pytest.approx(float(np.mean(tr.grad_norm**2)))


def test_predicted_bound_structure():
    stats = ProblemStats(dist0=1.4, sup_grad_sq=2.0, sigma_sq=4.0, eta_star=1.3)
    base = dict(dim=128, workers=8, iters=2000, alpha=4.0, alpha_server=4.0,
                norm_bound=8.8, step_size=5e-5)
    log_d = math.log(128)

    # doubling K halves exactly the downlink quantization term
    for k in (1, 5, 16):
        b1 = predicted_convex_bound(RunConfig(k_reps=k, **base), stats)
        b2 = predicted_convex_bound(RunConfig(k_reps=2 * k, **base), stats)
        term = base["alpha"] ** 2 * base["norm_bound"] ** 2 * base["step_size"] \
            * 4 * base["alpha_server"] ** 2 * log_d**2 / k
        assert b1 - b2 == pytest.approx(term / 2, rel=1e-12)

    # with sigma = 0 and alpha = 8 the exponential tail terms are ~1e-17 of
    # the rest, leaving the four closed-form terms
    quiet = ProblemStats(dist0=1.4, sup_grad_sq=2.0, sigma_sq=0.0, eta_star=1.3)
    big = dict(base, workers=60_000, alpha=8.0, alpha_server=8.0)
    cfg = RunConfig(k_reps=16, **big)
    delta = big["step_size"]
    gd_terms = quiet.dist0**2 / (2 * 2000 * delta) + delta * quiet.sup_grad_sq
    gd_terms += big["alpha"] ** 2 * big["norm_bound"] ** 2 * delta * (
        8 * log_d / big["workers"]
        + 4 * big["alpha_server"] ** 2 * log_d**2 / 16
    )
    assert predicted_convex_bound(cfg, quiet) == pytest.approx(gd_terms, rel=1e-9)

    with pytest.raises(UnsupportedScheduleError):
        predicted_convex_bound(
            RunConfig(k_reps=1, step_schedule=ONE_OVER_SQRT_T, **base), stats
        )


def test_csv_roundtrip(tmp_path):
    problem, spec, config = lsq_setup(iters=12)
    tr = run_fo_sgd(problem, spec, config)
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,f,grad_norm,subopt,halfspace,bits_up,bits_down"
    assert len(lines) == 13
    cols = read_trace_csv(path)
    np.testing.assert_array_equal(cols["t"], tr.t)
    np.testing.assert_array_equal(cols["f"], tr.f)          # 17 digits: exact
    np.testing.assert_array_equal(cols["subopt"], tr.subopt)
    np.testing.assert_array_equal(cols["bits_up"], tr.bits_up)
    bad = tmp_path / "bad.csv"
    bad.write_text("time,loss\n0,1\n")
    with pytest.raises(ValueError):
        read_trace_csv(bad)


def test_summary_block():
    problem, spec, config = lsq_setup(iters=5)
    tr = run_fo_sgd(problem, spec, config)
    s = tr.summary()
    assert "iterations 5" in s
    assert "final_f" in s and "bits_uplink_total" in s
    assert str(int(tr.bits_up[-1])) in s


def test_one_over_sqrt_t_schedule_runs():
    problem, spec, config = lsq_setup()
    cfg = dataclasses.replace(config, step_schedule=ONE_OVER_SQRT_T)
    tr = run_fo_sgd(problem, spec, cfg)
    assert np.all(tr.deltas == cfg.step_size / math.sqrt(cfg.iters))
