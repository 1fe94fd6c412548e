"""Command-line interface.

stochid run-example --id {1,2,3} [--seed S] [--out DIR] [--beta B] [--level L] [--tol T]
stochid run-custom  --config cfg.json --data samples.csv [--out DIR]
stochid kl-analyze  --config cfg.json --data samples.csv [--out DIR]
stochid check

Exit codes: 0 converged / success, 2 ran but did not converge, 1 error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .optimizer import RunConfig

log = logging.getLogger("stochid")

EXAMPLE_KEYS = {
    "level": int, "delta": float, "n_samples": int, "kl_tol": float, "kl_rank": int, "density": str,
    "q_mesh_size": int, "spatial_dim": int, "n_mc": int, "seed": int, "forcing": str,
}
RUN_KEYS = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"float": float, "int": int, "bool": bool}


def _validate_value(key, value, kind):
    if kind in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidArgument(f"config key '{key}': expected a number, got {value!r}")
        return float(value)
    if kind in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidArgument(f"config key '{key}': expected an integer, got {value!r}")
        return value
    if kind in (bool, "bool"):
        if not isinstance(value, bool):
            raise InvalidArgument(f"config key '{key}': expected true/false, got {value!r}")
        return value
    if not isinstance(value, str):
        raise InvalidArgument(f"config key '{key}': expected a string, got {value!r}")
    return value


def parse_config_dict(data) -> tuple[RunConfig, dict]:
    """Validate a config mapping; returns (RunConfig with defaults applied, example overrides)."""
    if not isinstance(data, dict):
        raise InvalidArgument("config: top level must be a JSON object")
    cfg_vals, overrides = {}, {}
    for key, value in data.items():
        if key in RUN_KEYS:
            cfg_vals[key] = _validate_value(key, value, RUN_KEYS[key])
        elif key in EXAMPLE_KEYS:
            overrides[key] = _validate_value(key, value, EXAMPLE_KEYS[key])
        else:
            raise InvalidArgument(f"config key '{key}': unknown key")
    cfg = RunConfig(**cfg_vals)
    try:
        cfg.validate()
    except InvalidArgument as exc:
        raise InvalidArgument(f"config key '{str(exc).split()[0]}': {exc}") from None
    for key in ("level", "n_samples", "q_mesh_size", "n_mc", "kl_rank"):
        if key in overrides and overrides[key] < (0 if key == "n_mc" else 1):
            raise InvalidArgument(f"config key '{key}': must be positive")
    for key in ("delta", "kl_tol"):
        if key in overrides and overrides[key] < 0:
            raise InvalidArgument(f"config key '{key}': must be nonnegative")
    if "spatial_dim" in overrides and overrides["spatial_dim"] not in (1, 2):
        raise InvalidArgument("config key 'spatial_dim': must be 1 or 2")
    if "density" in overrides and overrides["density"] not in ("uniform", "empirical"):
        raise InvalidArgument("config key 'density': must be 'uniform' or 'empirical'")
    return cfg, overrides


def parse_config(path) -> tuple[RunConfig, dict]:
    if path is None:
        return parse_config_dict({})
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"config: malformed JSON ({exc})") from None
    return parse_config_dict(data)


def bundled_config(example_id: int) -> str:
    """Text of the shipped JSON config for a reference example."""
    from importlib.resources import files
    return files("stochid").joinpath(f"configs/example{int(example_id)}.json").read_text()


def serialize_config(cfg: RunConfig, overrides: dict) -> str:
    return json.dumps({**asdict(cfg), **overrides}, indent=2, sort_keys=True)


def _forcing_from_expression(expr: str, dim: int):
    import sympy

    names = ["x"] if dim == 1 else ["x1", "x2"]
    symbols = sympy.symbols(names)
    try:
        parsed = sympy.sympify(expr, locals=dict(zip(names, symbols)))
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise InvalidArgument(f"config key 'forcing': cannot parse {expr!r} ({exc})") from None
    extra = parsed.free_symbols - set(symbols)
    if extra:
        raise InvalidArgument(f"config key 'forcing': unknown symbols {sorted(map(str, extra))}")
    fn = sympy.lambdify(symbols, parsed, "numpy")

    def forcing(X):
        return np.broadcast_to(fn(*(X[:, k] for k in range(dim))), (X.shape[0],)).astype(float)
    return forcing


def _custom_spec(overrides: dict):
    from .experiments import ExampleSpec

    dim = overrides.get("spatial_dim", 1)
    return ExampleSpec(
        id=0, spatial_dim=dim, q_mesh_size=overrides.get("q_mesh_size", 30 if dim == 1 else 14),
        n=0, level=overrides.get("level", 4), y_lower=0.0, y_upper=1.0,
        delta=0.0, beta=0.0, outer_tol=0.0, pcg_tol=0.0,
        kl_tol=overrides.get("kl_tol", 1e-7), kl_rank=overrides.get("kl_rank"),
        density=overrides.get("density", "uniform"),
        forcing=_forcing_from_expression(overrides.get("forcing", "1"), dim),
    )


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "beta", None) is not None:
        cfg = replace(cfg, beta=args.beta)
    if getattr(args, "tol", None) is not None:
        cfg = replace(cfg, outer_tol=args.tol)
    return cfg.validate()


def _cmd_run_example(args) -> int:
    from .experiments import make_example, run_config_for, run_example

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    _, overrides = parse_config_dict(raw)
    spec = make_example(args.id)
    spec = replace(spec, **{k: v for k, v in overrides.items()
                            if k in ("level", "delta", "n_samples", "kl_tol", "kl_rank", "density", "q_mesh_size")})
    if args.level is not None:
        spec = replace(spec, level=args.level)
    seed = args.seed if args.seed is not None else overrides.get("seed", 0)
    n_mc = overrides.get("n_mc", 10000)
    run_keys = {k: v for k, v in raw.items() if k in RUN_KEYS}
    out = Path(args.out or f"example{args.id}_out")
    betas = [args.beta] if args.beta is not None or "beta" in run_keys or not spec.beta_variants \
        else list(spec.beta_variants)
    status = 0
    for beta in betas:
        cfg = run_config_for(spec, **run_keys)
        if beta is not None:
            cfg = replace(cfg, beta=beta)
        cfg = _apply_flags(cfg, argparse.Namespace(beta=None, tol=args.tol))
        target = out if len(betas) == 1 else out / f"beta_{beta:g}"
        res = run_example(spec, seed=seed, cfg=cfg, out_dir=target, n_mc=n_mc)
        err = "n/a" if res.final_error is None else f"{res.final_error:.4e}"
        print(f"example {spec.id} beta={cfg.beta:g}: {len(res.result.history)} outer iterations, "
              f"converged={res.result.converged}, L2 error={err}, output in {target}")
        if not res.result.converged:
            status = 2
    return status


def _load_samples(args, overrides):
    from . import kl
    from .experiments import build_setup

    if not args.data:
        raise InvalidArgument("--data is required")
    path = Path(args.data)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    spec = _custom_spec(overrides)
    setup = build_setup(spec)
    samples = kl.SampleData.from_csv(path, setup.space_u)
    return spec, setup, samples


def _cmd_kl_analyze(args) -> int:
    from . import kl

    _, overrides = parse_config(args.config)
    spec, setup, samples = _load_samples(args, overrides)
    tol = args.tol if args.tol is not None else spec.kl_tol
    model = kl.analyze(samples, setup.spatial.stiff_u_bc, tol=tol, max_rank=spec.kl_rank)
    out = Path(args.out or "kl_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "kl.json").write_text(model.to_json())
    np.savetxt(out / "eigenvalues.csv", model.eigenvalues, delimiter=",")
    if model.y_samples is not None:
        np.savetxt(out / "y_samples.csv", model.y_samples, delimiter=",")
    print(f"KL rank {model.rank} at tol {tol:g}; leading eigenvalues {model.eigenvalues[:5]}")
    return 0


def _cmd_run_custom(args) -> int:
    from .experiments import identify_from_samples

    cfg, overrides = parse_config(args.config)
    cfg = _apply_flags(cfg, args)
    spec, setup, samples = _load_samples(args, overrides)
    if args.level is not None:
        spec = replace(spec, level=args.level)
    out = Path(args.out or "custom_out")
    res = identify_from_samples(spec, setup, samples, cfg, out_dir=out,
                                n_mc=overrides.get("n_mc", 10000), seed=args.seed or overrides.get("seed", 0))
    print(f"custom run: KL rank {res.kl_model.rank}, {len(res.result.history)} outer iterations, "
          f"converged={res.result.converged}, output in {out}")
    return 0 if res.result.converged else 2


def _cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks()
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochid", description="Identify uncertain diffusion coefficients.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--threads", type=int, help="BLAS/LAPACK threads (default: all cores)")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--level", type=int)
        sp.add_argument("--tol", type=float)

    ex = sub.add_parser("run-example", help="reproduce one of the reference examples")
    common(ex)
    ex.add_argument("--id", type=int, required=True, choices=[1, 2, 3])
    for name, helptext in (("run-custom", "identify q from a sample CSV"),
                           ("kl-analyze", "KL analysis of a sample CSV")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--data", help="headerless CSV, one row per u-mesh vertex, one column per sample")
    ck = sub.add_parser("check", help="run the invariant smoke suite")
    ck.add_argument("--threads", type=int)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run-example": _cmd_run_example, "run-custom": _cmd_run_custom,
                "kl-analyze": _cmd_kl_analyze, "check": _cmd_check}
    try:
        if getattr(args, "config", None) and not Path(args.config).is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        if args.threads is not None and args.threads < 1:
            raise InvalidArgument("--threads must be >= 1")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            return handlers[args.command](args)
    except (InvalidArgument, FileNotFoundError, ValueError, RuntimeError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    sys.exit(run_cli(argv))
