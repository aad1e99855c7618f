"""Experiment harness: reproducible CSV datasets for the solver experiments.

Subcommands
-----------
ode-convergence
    Sweep the two-scale linear ODE over decay-rate pairs and coupling
    strengths; write measured slow-variable errors per iteration next to
    the linear, superlinear and non-tight bounds.
sde-moments
    Compare Monte Carlo sample moments of the planar test SDE against the
    moment-ODE trajectory for several noise levels.
sde-parareal
    Run Monte Carlo-moments Parareal on the test SDE over several seeds;
    write per-iteration relative errors, the iterate trajectories of the
    first repetition, and matching diagnostics.
selftest
    Fast invariant suite (pass/fail per property).

Every run writes its resolved configuration next to its outputs.  Numbers
are serialized with 17 significant digits so CSV outputs round-trip and
diff cleanly.  Exit codes: 0 success, 1 invalid configuration, 2
numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import tempfile
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import engine, mcmoments, msode, smallmat

EXPERIMENTS = ("ode-convergence", "sde-moments", "sde-parareal", "selftest")

ODE_RATE_PAIRS = ((-1.0, -1.0), (-1.0, -5.0))
ODE_BETAS = (0.0, 1e-4, 1e-2, 1e-1, 1.0, 2.0)
SDE_SIGMAS = (0.1, 0.5, 1.0)
MOMENT_COLUMNS = ("M_x", "M_y", "C_xx", "C_xy", "C_yy")

NUMERICAL_ERRORS = (
    ArithmeticError,            # NonFinite and friends
    smallmat.NotPSD,
    smallmat.SingularMatrix,
    mcmoments.EmptyEnsemble,
    mcmoments.UnrepairableCovariance,
    mcmoments.DegenerateEnsemble,
    engine.UnsupportedState,
    msode.DegenerateBound,
    np.linalg.LinAlgError,
    ValueError,  # last resort; ConfigError is caught before this
)


class ConfigError(ValueError):
    """Invalid configuration (exit code 1)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved run configuration; round-trips losslessly through key=value files.

    Optional fields left as None fall back to per-experiment defaults
    (e.g. the published parameter sweeps).
    """

    experiment: str
    alpha: float | None = None
    beta: float | None = None
    delta: float | None = None
    alpha_bar: float | None = None
    zeta_perturb: float = 1.0
    dt: float = 1.0
    n_slabs: int = 10
    iters: int | None = None
    t_final: float = 10.0
    particles: int = 100000
    inner_dt: float = 0.02
    sigma: float | None = None
    seed: int = 1
    reps: int = 20
    workers: int = 1
    out_dir: str = "results"


_FIELD_PARSERS = {
    "experiment": str,
    "alpha": float,
    "beta": float,
    "delta": float,
    "alpha_bar": float,
    "zeta_perturb": float,
    "dt": float,
    "n_slabs": int,
    "iters": int,
    "t_final": float,
    "particles": int,
    "inner_dt": float,
    "sigma": float,
    "seed": int,
    "reps": int,
    "workers": int,
    "out_dir": str,
}


def fmt(value) -> str:
    """Serialize one value; floats get 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def load_config_file(path: str | Path) -> dict:
    """Parse a flat key=value config file (# starts a comment)."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _FIELD_PARSERS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def write_resolved_config(cfg: ExperimentConfig, path: Path) -> None:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {fmt(value)}")
    path.write_text("\n".join(lines) + "\n")


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}")
    if cfg.dt <= 0 or cfg.inner_dt <= 0 or cfg.t_final <= 0:
        raise ConfigError("dt, inner_dt and t_final must be > 0")
    if cfg.n_slabs < 1 or (cfg.iters is not None and cfg.iters < 0):
        raise ConfigError("n_slabs must be >= 1 and iters >= 0")
    if cfg.particles < 2:
        raise ConfigError("particles must be >= 2")
    if cfg.reps < 1 or cfg.workers < 1:
        raise ConfigError("reps and workers must be >= 1")
    if (cfg.alpha is None) != (cfg.delta is None) and cfg.experiment == "ode-convergence":
        raise ConfigError("give both --alpha and --delta or neither")
    if cfg.experiment in ("sde-moments", "sde-parareal"):
        span = cfg.t_final if cfg.experiment == "sde-moments" else cfg.t_final / cfg.n_slabs
        steps = round(span / cfg.inner_dt)
        if steps < 1 or abs(steps * cfg.inner_dt - span) > 1e-9 * max(1.0, span):
            raise ConfigError(
                f"inner_dt {cfg.inner_dt} must divide the propagation interval {span}")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out / f"{cfg.experiment}_config.txt")
    return out


# ---------------------------------------------------------------------------
# ode-convergence


def _ode_cases(cfg: ExperimentConfig):
    pairs = [(cfg.alpha, cfg.delta)] if cfg.alpha is not None else list(ODE_RATE_PAIRS)
    betas = [cfg.beta] if cfg.beta is not None else list(ODE_BETAS)
    for alpha, delta in pairs:
        alpha_bar = cfg.alpha_bar
        if alpha_bar is None:
            alpha_bar = msode.perturbed_reduced_rate(alpha, cfg.zeta_perturb)
        for beta in betas:
            yield msode.TwoScaleParams(alpha=alpha, beta=beta, delta=delta,
                                       alpha_bar=alpha_bar, dt=cfg.dt,
                                       n_slabs=cfg.n_slabs)


def _vector_error_norms(grid: engine.IterateGrid, k: int) -> np.ndarray:
    """Infinity vector norms |micro[k][n] - reference[n]| per n."""
    return np.array([
        np.max(np.abs(np.asarray(grid.micro[k][n]) - np.asarray(grid.reference[n])))
        for n in range(grid.n_slabs + 1)
    ])


def cmd_ode_convergence(cfg: ExperimentConfig) -> list[Path]:
    iters = cfg.iters if cfg.iters is not None else cfg.n_slabs
    if iters > cfg.n_slabs:
        raise ConfigError("iters beyond n_slabs has no superlinear bound; "
                          "use iters <= n_slabs")
    out = _out_dir(cfg)
    rows = []
    for params in _ode_cases(cfg):
        grid = msode.run(params, iters=iters, workers=cfg.workers)
        e_meas = msode.slow_errors(grid).e_max
        inputs = msode.bound_inputs_from_grid(params, grid)
        nontight = msode.nontight_bound(params, _vector_error_norms(grid, 0), iters)
        for k in range(iters + 1):
            lin = msode.linear_bound(inputs, k)
            sup = msode.superlinear_bound(inputs, k)
            rows.append((params.alpha, params.delta, params.beta, k,
                         e_meas[k], lin, sup, nontight[k], min(lin, sup)))
    path = out / "ode_convergence.csv"
    _write_csv(path, ("alpha", "delta", "beta", "k", "e_meas", "bound_linear",
                      "bound_superlinear", "bound_nontight", "bound_min"), rows)
    return [path]


# ---------------------------------------------------------------------------
# sde-moments


def _moment_components(mean: np.ndarray, cov: np.ndarray) -> tuple:
    return (mean[0], mean[1], cov[0, 0], cov[0, 1], cov[1, 1])


def cmd_sde_moments(cfg: ExperimentConfig) -> list[Path]:
    sigmas = [cfg.sigma] if cfg.sigma is not None else list(SDE_SIGMAS)
    alpha = cfg.alpha if cfg.alpha is not None else 1.0
    out = _out_dir(cfg)
    rows = []
    for sigma in sigmas:
        model = mcmoments.roberts_model(alpha=alpha, sigma=sigma)
        t, means, covs = mcmoments.mc_moment_history(
            model, cfg.particles, cfg.t_final, cfg.inner_dt, cfg.seed)
        for i in range(t.size):
            rows.append((t[i], sigma, "mc", *_moment_components(means[i], covs[i])))
        # the moment ODE starts from the sample moments of the same initial
        # ensemble, so both sources agree exactly at t = 0
        s0 = mcmoments.MomentState(means[0], covs[0])
        t, means, covs = mcmoments.moment_history(model, s0, cfg.t_final, cfg.inner_dt)
        for i in range(t.size):
            rows.append((t[i], sigma, "moment", *_moment_components(means[i], covs[i])))
    path = out / "sde_moments.csv"
    _write_csv(path, ("t", "sigma", "source", *MOMENT_COLUMNS), rows)
    return [path]


# ---------------------------------------------------------------------------
# sde-parareal


def _macro_components(grid: engine.IterateGrid, k: int) -> np.ndarray:
    """(N+1, 5) moment components of the macro iterates at iteration k."""
    return np.array([_moment_components(grid.macro[k][n].mean, grid.macro[k][n].cov)
                     for n in range(grid.n_slabs + 1)])


def _reference_components(grid: engine.IterateGrid) -> np.ndarray:
    rows = []
    for ens in grid.reference:
        s = mcmoments.restrict(ens)
        rows.append(_moment_components(s.mean, s.cov))
    return np.array(rows)


def relative_errors_inf_time(grid: engine.IterateGrid) -> np.ndarray:
    """(K+1, 5) relative errors vs the fine reference, sup over n >= 1.

    Each component is normalized by the sup over time of the reference
    component (absolute error if that sup is zero).
    """
    ref = _reference_components(grid)
    scale = np.abs(ref).max(axis=0)
    scale[scale == 0.0] = 1.0
    out = np.empty((grid.iters + 1, ref.shape[1]))
    for k in range(grid.iters + 1):
        diff = np.abs(_macro_components(grid, k) - ref)
        out[k] = diff[1:].max(axis=0) / scale
    return out


def run_sde_parareal_rep(cfg: ExperimentConfig, seed: int) -> engine.IterateGrid:
    sigma = cfg.sigma if cfg.sigma is not None else 0.5
    alpha = cfg.alpha if cfg.alpha is not None else 1.0
    iters = cfg.iters if cfg.iters is not None else cfg.n_slabs
    model = mcmoments.roberts_model(alpha=alpha, sigma=sigma)
    setup = mcmoments.make_parareal_setup(model, cfg.particles, cfg.t_final,
                                          cfg.n_slabs, cfg.inner_dt, seed)
    return engine.run_micro_macro(setup.propagators, setup.coupling, setup.algebra,
                                  setup.u0, cfg.n_slabs, iters, workers=cfg.workers)


def cmd_sde_parareal(cfg: ExperimentConfig) -> list[Path]:
    out = _out_dir(cfg)
    iters = cfg.iters if cfg.iters is not None else cfg.n_slabs
    slab = cfg.t_final / cfg.n_slabs

    err_sum = np.zeros((iters + 1, len(MOMENT_COLUMNS)))
    iterate_rows = []
    diag_rows = []
    for rep in range(cfg.reps):
        grid = run_sde_parareal_rep(cfg, cfg.seed + rep)
        err_sum += relative_errors_inf_time(grid)
        if rep == 0:
            for k in range(iters + 1):
                comps = _macro_components(grid, k)
                for n in range(cfg.n_slabs + 1):
                    iterate_rows.append((k, n, n * slab, *comps[n]))
            for ev in grid.diagnostics:
                diag_rows.append((ev.k, ev.n, int(ev.psd_repaired),
                                  len(ev.resampled_dims)))
    err_mean = err_sum / cfg.reps

    err_path = out / "sde_parareal_err.csv"
    _write_csv(err_path, ("k", "component", "rel_err_inf_time"),
               [(k, comp, err_mean[k][c])
                for k in range(iters + 1)
                for c, comp in enumerate(MOMENT_COLUMNS)])
    it_path = out / "sde_parareal_iterates.csv"
    _write_csv(it_path, ("k", "n", "t", *MOMENT_COLUMNS), iterate_rows)
    diag_path = out / "diagnostics.csv"
    _write_csv(diag_path, ("k", "n", "psd_repair", "resample"), diag_rows)
    return [err_path, it_path, diag_path]


# ---------------------------------------------------------------------------
# selftest


def _rk4_two_scale(alpha, beta, delta, u0, t_final, steps):
    k_mat = np.array([[alpha, beta], [0.0, delta]])
    h = t_final / steps
    u = np.asarray(u0, dtype=float)
    for _ in range(steps):
        k1 = k_mat @ u
        k2 = k_mat @ (u + 0.5 * h * k1)
        k3 = k_mat @ (u + 0.5 * h * k2)
        k4 = k_mat @ (u + h * k3)
        u = u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u


def _check_cholesky_roundtrip() -> str:
    rng = np.random.default_rng(7)
    for d in (1, 2, 3, 5, 10):
        r = rng.standard_normal((d, d))
        s = smallmat.SymMatrix(r @ r.T + np.eye(d))
        lower, deg = smallmat.cholesky(s)
        if deg:
            return f"unexpected degenerate pivots {deg} at d={d}"
        rec = lower.entries @ lower.entries.T
        rel = np.linalg.norm(rec - s.entries) / np.linalg.norm(s.entries)
        if rel > 1e-12:
            return f"reconstruction error {rel:g} at d={d}"
    return ""


def _check_expm_quadrature() -> str:
    for alpha, delta in ((-1.0, -5.0), (-1.0, -1.0)):
        got = smallmat.expm_2x2_upper(alpha, 1.0, delta, 1.0).apply([0.0, 1.0])
        want = _rk4_two_scale(alpha, 1.0, delta, [0.0, 1.0], 1.0, 1000)
        if np.max(np.abs(got - want)) > 1e-6:
            return f"mismatch vs quadrature at alpha={alpha}, delta={delta}"
    return ""


def _selftest_params() -> msode.TwoScaleParams:
    return msode.TwoScaleParams(alpha=-1.0, beta=1.0, delta=-5.0, alpha_bar=-2.0)


def _check_ode_oracle() -> str:
    params = _selftest_params()
    grid = msode.run(params)
    e0 = np.array([np.asarray(grid.micro[0][n]) - np.asarray(grid.reference[n])
                   for n in range(params.n_slabs + 1)])
    oracle = msode.error_recursion_oracle(params, e0, grid.iters)
    for k in range(grid.iters + 1):
        for n in range(params.n_slabs + 1):
            measured = np.asarray(grid.micro[k][n]) - np.asarray(grid.reference[n])
            if np.max(np.abs(measured - oracle[k, n])) > 1e-12:
                return f"oracle mismatch at k={k}, n={n}"
    return ""


def _check_ode_termination() -> str:
    grid = msode.run(_selftest_params())
    err = msode.slow_errors(grid).e_max[-1]
    return "" if err <= 1e-12 else f"slow error {err:g} at final iteration"


def _check_bound_domination(mutate: bool = False) -> str:
    params = _selftest_params()
    grid = msode.run(params)
    e_meas = msode.slow_errors(grid).e_max
    inputs = msode.bound_inputs_from_grid(params, grid)
    nontight = msode.nontight_bound(params, _vector_error_norms(grid, 0), grid.iters)
    damp = 0.01 if mutate else 1.0
    for k in range(grid.iters + 1):
        bound = min(msode.linear_bound(inputs, k),
                    msode.superlinear_bound(inputs, k)) * damp
        if e_meas[k] > bound * (1.0 + 1e-9) or e_meas[k] > nontight[k] * damp * (1.0 + 1e-9):
            return f"measured error above bound at k={k}"
    return ""


def _check_matching_consistency() -> str:
    rng = np.random.default_rng(11)
    for trial in range(20):
        d = int(rng.integers(1, 4))
        states = rng.standard_normal((400, d)) @ rng.standard_normal((d, d)) + rng.standard_normal(d)
        ens = mcmoments.Ensemble(states)
        r = rng.standard_normal((d, d))
        target = mcmoments.MomentState(rng.standard_normal(d), r @ r.T + 0.1 * np.eye(d))
        matched, _ = mcmoments.match(target, ens, rng=rng)
        got = mcmoments.restrict(matched)
        if np.max(np.abs(got.mean - target.mean)) > 1e-12 * max(1.0, np.abs(target.mean).max()):
            return f"mean mismatch in trial {trial}"
        rel = np.linalg.norm(got.cov - target.cov) / max(1.0, np.linalg.norm(target.cov))
        if rel > 1e-8:
            return f"covariance mismatch {rel:g} in trial {trial}"
        idem, _ = mcmoments.match(mcmoments.restrict(ens), ens, rng=rng)
        if np.max(np.abs(idem.states - ens.states)) > 1e-10:
            return f"idempotence violated in trial {trial}"
    return ""


def _check_sde_termination() -> str:
    cfg = ExperimentConfig(experiment="sde-parareal", particles=200, t_final=2.0,
                           n_slabs=4, inner_dt=0.02, sigma=0.5, seed=3, reps=1)
    grid = run_sde_parareal_rep(cfg, cfg.seed)
    final = relative_errors_inf_time(grid)[-1]
    return "" if final.max() <= 1e-12 else f"final iterate off by {final.max():g}"


def _check_csv_determinism() -> str:
    with tempfile.TemporaryDirectory() as tmp:
        base = ExperimentConfig(experiment="ode-convergence", alpha=-1.0, delta=-5.0,
                                beta=1.0, n_slabs=5, seed=5)
        paths = []
        for workers, sub in ((1, "a"), (4, "b")):
            cfg = replace(base, workers=workers, out_dir=str(Path(tmp) / sub))
            paths.append(cmd_ode_convergence(cfg)[0])
        if paths[0].read_bytes() != paths[1].read_bytes():
            return "outputs differ between 1 and 4 workers"
    return ""


def cmd_selftest(cfg: ExperimentConfig, mutate_bounds: bool = False) -> int:
    checks = [
        ("cholesky_roundtrip", _check_cholesky_roundtrip),
        ("expm_vs_quadrature", _check_expm_quadrature),
        ("ode_oracle_equivalence", _check_ode_oracle),
        ("ode_finite_termination", _check_ode_termination),
        ("bound_domination", lambda: _check_bound_domination(mutate=mutate_bounds)),
        ("matching_consistency", _check_matching_consistency),
        ("sde_finite_termination", _check_sde_termination),
        ("csv_determinism", _check_csv_determinism),
    ]
    failures = 0
    for name, check in checks:
        detail = check()
        if detail:
            failures += 1
            print(f"FAIL {name}: {detail}")
        else:
            print(f"PASS {name}")
    return 2 if failures else 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    for name, parser_fn in _FIELD_PARSERS.items():
        if name in ("experiment", "out_dir"):
            continue
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=parser_fn,
                       default=None)
    p.add_argument("--out-dir", dest="out_dir", type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmparareal",
                     description="Parallel-in-time solver experiments")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        _add_flags(p)
        if name == "selftest":
            p.add_argument("--mutate-bounds", action="store_true",
                           help=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {"experiment": args.experiment}
    if args.config is not None:
        file_values = load_config_file(args.config)
        file_values.pop("experiment", None)
        values.update(file_values)
    for f in fields(ExperimentConfig):
        if f.name == "experiment":
            continue
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


COMMANDS = {
    "ode-convergence": cmd_ode_convergence,
    "sde-moments": cmd_sde_moments,
    "sde-parareal": cmd_sde_parareal,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        if cfg.experiment == "selftest":
            return cmd_selftest(cfg, mutate_bounds=getattr(args, "mutate_bounds", False))
        for path in COMMANDS[cfg.experiment](cfg):
            print(path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
