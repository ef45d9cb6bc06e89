"""Command-line front end: experiment runs, comparisons, codec diagnostics.

Experiments are described by TOML files with four sections (problem,
oracle, run, output).  Parsing is fail-closed: unknown keys are errors.
Derived quantities (lam, lam_s, B) are never accepted as inputs; the
norm bound comes from the problem's certificate at the configured trust
radius, and the amplitudes follow from (alpha, alpha_server, B).

Exit codes: 0 success, 1 failed diagnostic check, 2 bad usage or config,
3 runtime abort (trust-region violation).
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import codec, oracle, simulator
from .quantizer import DitherConfig, quantize, quantizer_mse
from .transform import apply, sample_basis


class ConfigError(ValueError):
    pass


_PROBLEM_KEYS = {
    "least-squares": {
        "kind", "rows", "dim", "generator_seed", "noise", "orthonormal_rows",
        "planted_targets", "target_scale", "design_file", "targets_file",
    },
    "shifted-quadratic": {"kind", "dim", "shift"},
    "quad-cosine": {"kind", "dim"},
}
_ORACLE_KEYS = {"kind", "batch", "trust_radius", "trust_norm"}
_RUN_KEYS = {
    "algorithm", "workers", "iters", "k", "alpha", "alpha_server",
    "step_size", "step_schedule", "seed", "initial_value",
}
_OUTPUT_KEYS = {"trace"}


def _check_keys(section: str, table: dict, allowed: set) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )


def load_experiment(path: str | Path) -> dict:
    """Parse and validate an experiment file (fail-closed)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    unknown = set(doc) - {"problem", "oracle", "run", "output"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    for section in ("problem", "oracle", "run"):
        if section not in doc:
            raise ConfigError(f"missing [{section}] section in {path}")
    prob = doc["problem"]
    kind = prob.get("kind")
    if kind not in _PROBLEM_KEYS:
        raise ConfigError(
            f"problem.kind must be one of {sorted(_PROBLEM_KEYS)}, got {kind!r}"
        )
    _check_keys("problem", prob, _PROBLEM_KEYS[kind])
    _check_keys("oracle", doc["oracle"], _ORACLE_KEYS)
    _check_keys("run", doc["run"], _RUN_KEYS)
    _check_keys("output", doc.get("output", {}), _OUTPUT_KEYS)
    return doc


def build_problem(doc: dict):
    """Instantiate the problem described by [problem]."""
    prob = doc["problem"]
    kind = prob["kind"]
    if kind == "least-squares":
        if "design_file" in prob or "targets_file" in prob:
            if not ("design_file" in prob and "targets_file" in prob):
                raise ConfigError(
                    "design_file and targets_file must be given together"
                )
            return oracle.load_least_squares(
                prob["design_file"], prob["targets_file"]
            )
        try:
            gen = np.random.default_rng(prob["generator_seed"])
            return oracle.synthetic_least_squares(
                prob["rows"],
                prob["dim"],
                gen,
                noise=prob.get("noise", 0.0),
                orthonormal_rows=prob.get("orthonormal_rows", False),
                planted_targets=prob.get("planted_targets", False),
                target_scale=prob.get("target_scale", 1.0),
            )
        except KeyError as e:
            raise ConfigError(f"missing [problem] key: {e.args[0]}") from e
    if kind == "shifted-quadratic":
        try:
            return oracle.ShiftedQuadratic(dim=prob["dim"], shift=prob["shift"])
        except KeyError as e:
            raise ConfigError(f"missing [problem] key: {e.args[0]}") from e
    if "dim" not in prob:
        raise ConfigError("missing [problem] key: dim")
    return simulator.QuadCosine(dim=prob["dim"])


def build_oracle_spec(doc: dict, problem) -> oracle.OracleSpec:
    """Instantiate [oracle], deriving B from the problem's certificate."""
    sec = doc["oracle"]
    kind = sec.get("kind")
    kinds = (
        oracle.LEAST_SQUARES_MINIBATCH,
        oracle.ONE_SPARSE_SEPARABLE,
        oracle.FULL_GRADIENT,
    )
    if kind not in kinds:
        raise ConfigError(f"oracle.kind must be one of {list(kinds)}, got {kind!r}")
    if kind == oracle.LEAST_SQUARES_MINIBATCH and not hasattr(
        problem, "minibatch_gradient"
    ):
        raise ConfigError(f"oracle kind {kind!r} needs a least-squares problem")
    if kind == oracle.ONE_SPARSE_SEPARABLE and not hasattr(problem, "partials"):
        raise ConfigError(f"oracle kind {kind!r} needs a separable problem")
    if "trust_radius" not in sec:
        raise ConfigError("missing [oracle] key: trust_radius")
    radius = float(sec["trust_radius"])
    norm = sec.get("trust_norm", oracle.L2)
    if norm not in (oracle.L2, oracle.LINF):
        raise ConfigError(f"oracle.trust_norm must be l2 or linf, got {norm!r}")
    return oracle.OracleSpec(
        kind=kind,
        batch=int(sec.get("batch", 1)),
        norm_bound=problem.norm_bound(radius),
        trust_radius=radius,
        trust_norm=norm,
    )


def build_run_config(doc: dict, problem, spec, overrides: dict) -> simulator.RunConfig:
    """[run] section plus --flag overrides mapped onto RunConfig."""
    sec = dict(doc["run"])
    for key, value in overrides.items():
        if value is not None:
            sec[key] = value
    try:
        initial = sec.get("initial_value", 0.0)
        return simulator.RunConfig(
            dim=problem.dim,
            workers=int(sec["workers"]),
            iters=int(sec["iters"]),
            k_reps=int(sec.get("k", 1)),
            alpha=float(sec["alpha"]),
            alpha_server=float(sec["alpha_server"]),
            norm_bound=spec.norm_bound,
            step_size=float(sec["step_size"]),
            step_schedule=sec.get("step_schedule", simulator.CONSTANT),
            master_seed=int(sec.get("seed", 0)),
            algorithm=sec.get("algorithm", "fo-sgd"),
            initial_point=None if initial == 0.0
            else float(initial) * np.ones(problem.dim),
        )
    except KeyError as e:
        raise ConfigError(f"missing [run] key: {e.args[0]}") from e
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _overrides_from(args) -> dict:
    return {
        "algorithm": args.algorithm,
        "seed": args.seed,
        "workers": args.workers,
        "iters": args.iters,
        "alpha": args.alpha,
        "alpha_server": args.alpha_server,
        "k": args.k,
    }


def _summary_block(algorithm: str, trace: simulator.Trace, out_path) -> str:
    lines = [f"algorithm {algorithm}"]
    lines.append(trace.summary())
    if out_path is not None:
        lines.append(f"trace {out_path}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    doc = load_experiment(args.config)
    problem = build_problem(doc)
    spec = build_oracle_spec(doc, problem)
    config = build_run_config(doc, problem, spec, _overrides_from(args))
    out = args.out or doc.get("output", {}).get("trace")
    started = time.perf_counter()
    trace = simulator.run(problem, spec, config)
    elapsed = time.perf_counter() - started
    if out is not None:
        trace.to_csv(out)
    print(_summary_block(config.algorithm, trace, out))
    print(f"wall_seconds {elapsed:.3f}", file=sys.stderr)
    return 0


def cmd_compare(args) -> int:
    if not args.algorithms:
        raise ConfigError("no algorithms given; pass --algorithm at least once")
    doc = load_experiment(args.config)
    problem = build_problem(doc)
    spec = build_oracle_spec(doc, problem)
    overrides = _overrides_from(args)
    overrides["algorithm"] = None  # per-algorithm below
    out = args.out or doc.get("output", {}).get("trace")
    rows = []
    summaries = []
    for algorithm in args.algorithms:
        overrides["algorithm"] = algorithm
        config = build_run_config(doc, problem, spec, overrides)
        trace = simulator.run(problem, spec, config)
        for i in range(trace.iterations):
            rows.append(
                f"{algorithm},{int(trace.t[i])},{trace.f[i]:.17g},"
                f"{trace.grad_norm[i]:.17g},{trace.subopt[i]:.17g},"
                f"{trace.halfspace[i]:.17g},{int(trace.bits_up[i])},"
                f"{int(trace.bits_down[i])}"
            )
        summaries.append(
            f"{algorithm} final_subopt={trace.subopt[-1]:.17g} "
            f"bits_up={int(trace.bits_up[-1])} bits_down={int(trace.bits_down[-1])}"
        )
    if out is not None:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write("algorithm," + simulator.CSV_HEADER + "\n")
            fh.write("\n".join(rows) + "\n")
    print("\n".join(summaries))
    if out is not None:
        print(f"trace {out}")
    return 0


GOLDEN_SPECS = (
    # (file name, dim, k_reps, lam, seed): regenerated and byte-compared
    ("enc_d4_k1.bin", 4, 1, 1.0, 20240801),
    ("enc_d5_k15.bin", 5, 15, 2.5, 20240802),
)


def golden_encoding(dim: int, k_reps: int, lam: float, seed: int) -> bytes:
    """The deterministic encoding behind a committed golden file."""
    rng = np.random.default_rng(seed)
    basis = sample_basis(codec.padded_dim(dim), rng)
    x = np.linspace(-1.0, 1.0, dim)
    cfg = DitherConfig(lam=lam, k_reps=k_reps)
    return codec.serialize(codec.encode(x, basis, cfg, rng))


def default_golden_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "tests" / "golden"


def cmd_codec(args) -> int:
    if args.check == "roundtrip":
        directory = Path(args.dir) if args.dir else default_golden_dir()
        ok = True
        for name, dim, k_reps, lam, seed in GOLDEN_SPECS:
            path = directory / name
            if not path.exists():
                print(f"{name}: MISSING ({path})")
                ok = False
                continue
            blob = path.read_bytes()
            expected = golden_encoding(dim, k_reps, lam, seed)
            enc = codec.deserialize(blob)
            same = blob == expected and codec.serialize(enc) == blob
            print(f"{name}: {'ok' if same else 'MISMATCH'} ({len(blob)} bytes)")
            ok = ok and same
        return 0 if ok else 1
    if args.check == "mse":
        rng = np.random.default_rng(args.seed)
        cfg = DitherConfig(lam=args.lam, k_reps=args.k)
        x = rng.uniform(-args.lam, args.lam, size=args.d)
        analytic = quantizer_mse(x, cfg)
        err = np.empty(args.trials)
        for i in range(args.trials):
            err[i] = np.sum((quantize(x, cfg, rng).dequantize() - x) ** 2)
        empirical = float(err.mean())
        rel = abs(empirical - analytic) / analytic
        print(f"empirical_mse {empirical:.6g}")
        print(f"analytic_mse {analytic:.6g}")
        print(f"relative_error {rel:.4f}")
        return 0 if rel <= args.tolerance else 1
    # flatness: tail frequency of ||H_eps x||_inf > alpha ||x||_2 sqrt(log d / d)
    rng = np.random.default_rng(args.seed)
    d = args.d
    x = np.zeros(d)
    x[rng.permutation(d)[: args.sparsity]] = 1.0
    threshold = args.alpha * np.linalg.norm(x) * math.sqrt(math.log(d) / d)
    hits = 0
    for _ in range(args.trials):
        basis = sample_basis(d, rng)
        hits += float(np.abs(apply(basis, x)).max()) > threshold
    p_hat = hits / args.trials
    bound = 2.0 * math.exp(-args.alpha**2 * math.log(d) / 4.0)
    slack = 3.0 * math.sqrt(max(p_hat * (1 - p_hat), 1.0 / args.trials) / args.trials)
    print(f"empirical_tail {p_hat:.6g}")
    print(f"bound {bound:.6g}")
    print(f"slack {slack:.6g}")
    return 0 if p_hat <= bound + slack else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fosgd",
        description="Compressed distributed-SGD simulator and codec tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p, single_algorithm: bool):
        p.add_argument("--config", required=True, help="experiment TOML file")
        if single_algorithm:
            p.add_argument("--algorithm", choices=simulator.ALGORITHMS)
        else:
            p.add_argument(
                "--algorithm",
                dest="algorithms",
                action="append",
                choices=simulator.ALGORITHMS,
                default=None,
                help="repeatable; algorithms to compare",
            )
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="trace CSV path (overrides [output].trace)")
        p.add_argument("--workers", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--alpha-server", dest="alpha_server", type=float)
        p.add_argument("--k", type=int, help="downlink dither repetitions K")

    p_run = sub.add_parser("run", help="run one experiment, write a trace CSV")
    add_run_flags(p_run, single_algorithm=True)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several algorithms on one instance")
    add_run_flags(p_cmp, single_algorithm=False)
    p_cmp.set_defaults(func=cmd_compare, algorithm=None)

    p_codec = sub.add_parser("codec", help="codec diagnostics")
    codec_sub = p_codec.add_subparsers(dest="check", required=True)
    p_rt = codec_sub.add_parser("roundtrip", help="verify committed golden files")
    p_rt.add_argument("--dir", help="golden file directory")
    p_rt.set_defaults(func=cmd_codec)
    p_mse = codec_sub.add_parser("mse", help="empirical vs analytic quantizer MSE")
    p_mse.add_argument("--d", type=int, default=16)
    p_mse.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p_mse.add_argument("--k", type=int, default=4)
    p_mse.add_argument("--trials", type=int, default=100_000)
    p_mse.add_argument("--seed", type=int, default=0)
    p_mse.add_argument("--tolerance", type=float, default=0.02)
    p_mse.set_defaults(func=cmd_codec)
    p_fl = codec_sub.add_parser("flatness", help="flattening tail vs bound")
    p_fl.add_argument("--alpha", type=float, default=2.0)
    p_fl.add_argument("--d", type=int, default=1024)
    p_fl.add_argument("--sparsity", type=int, default=4)
    p_fl.add_argument("--trials", type=int, default=10_000)
    p_fl.add_argument("--seed", type=int, default=0)
    p_fl.set_defaults(func=cmd_codec)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except oracle.TrustRegionError as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
