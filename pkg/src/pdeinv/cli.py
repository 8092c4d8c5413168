"""Batch command-line interface.

Exit codes: 0 on success, 1 when a solver reports failure (no convergence,
line-search or inner-solver failure), 2 on usage or I/O errors. One summary
line goes to standard output; diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fixtures import FIXTURES, make_fixture
from .io import (ConfigError, FieldFormatError, atomic_write_text, export_slices, read_field,
                 read_run_config, write_field, write_log, write_table)
from .optimizer import CONVERGED, SolverOptions

log = logging.getLogger("pdeinv")

EXIT_OK, EXIT_SOLVER, EXIT_USAGE = 0, 1, 2

# arguments holding file system paths; resolved against the config file's directory
PATH_KEYS = {"template", "reference", "velocity", "out", "fixture_dir", "data", "data_t0",
             "initial", "pi_w", "pi_g", "mask"}


class UsageError(Exception):
    pass


def _solver_args(p: argparse.ArgumentParser, rel_tol: float) -> None:
    p.add_argument("--rel-tol", type=float, default=rel_tol, help="relative gradient tolerance")
    p.add_argument("--abs-tol", type=float, default=1e-8, help="absolute gradient tolerance")
    p.add_argument("--max-newton", type=int, default=50)
    p.add_argument("--max-krylov", type=int, default=100)


def _solver_options(args) -> SolverOptions:
    return SolverOptions(rel_grad_tol=args.rel_tol, abs_grad_tol=args.abs_tol,
                         max_newton=args.max_newton, max_krylov=args.max_krylov)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdeinv", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file supplying defaults for the subcommand flags")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="diffeomorphic registration of two images")
    p.add_argument("--template", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=("H1", "H2", "H1-div"), default="H2")
    p.add_argument("--beta", type=float, default=1e-2)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--kappa", type=int, default=1)
    p.add_argument("--div-penalty", type=float, default=0.0)
    p.add_argument("--incompressible", action="store_true")
    p.add_argument("--continuation", action="store_true")
    p.add_argument("--n-t", type=int, default=4)
    _solver_args(p, 5e-2)

    p = sub.add_parser("detgrad", help="determinant of the deformation gradient of a velocity")
    p.add_argument("--velocity", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-t", type=int, default=4)

    p = sub.add_parser("tumor-forward", help="simulate tumor growth")
    p.add_argument("--fixture-dir", required=True, help="anatomy written by 'fixture multifocal_tumor'")
    p.add_argument("--initial", help="initial density field (default: the fixture's t=0 state)")
    p.add_argument("--out", required=True)
    p.add_argument("--k-w", type=float)
    p.add_argument("--k-g", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--n-t", type=int, default=16)
    p.add_argument("--t-final", type=float, default=1.0)

    p = sub.add_parser("tumor-invert", help="recover the initial tumor from observations")
    p.add_argument("--fixture-dir", required=True)
    p.add_argument("--data", help="observation at t=1 (default: the fixture's noiseless state)")
    p.add_argument("--data-t0", help="optional observation at t=0")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=1e-4)
    p.add_argument("--k-w", type=float)
    p.add_argument("--k-g", type=float)
    p.add_argument("--invert-coefficients", action="store_true")
    _solver_args(p, 1e-3)

    p = sub.add_parser("study", help="noise and observation-threshold study")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--dims", type=int, nargs=2, default=(64, 64))
    p.add_argument("--fixture-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--noise", type=float, nargs="+", default=(0.01, 0.05, 0.1))
    p.add_argument("--thresholds", type=float, nargs="+", default=(0.1, 0.2, 0.3, 0.4))
    p.add_argument("--beta", type=float, default=1e-4)
    p.add_argument("--realizations", type=int, default=3, help="noise draws averaged per cell")

    p = sub.add_parser("fixture", help="write a synthetic fixture")
    p.add_argument("name", choices=FIXTURES)
    p.add_argument("--dims", type=int, nargs="+", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("info", help="package information, or a summary of a field file")
    p.add_argument("field", nargs="?")
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def _parse_value(action: argparse.Action, key: str, text: str):
    if isinstance(action, argparse._StoreTrueAction):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    conv = action.type or str
    try:
        if action.nargs in ("+", "*") or isinstance(action.nargs, int):
            value = [conv(v) for v in text.replace(",", " ").split()]
        else:
            value = conv(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"{key}: {value!r} not in {sorted(action.choices)}")
    return value


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = _subparsers(parser)
    command = next((tok for tok in argv if tok in subs), None)
    if known.config and command is not None:
        cfg_path = Path(known.config)
        subparser = subs[command]
        actions = {a.dest: a for a in subparser._actions if a.dest != "help"}
        defaults = {}
        for key, text in read_run_config(cfg_path).items():
            if key not in actions:
                raise ConfigError(f"unknown key {key!r} for '{command}'")
            value = _parse_value(actions[key], key, text)
            if key in PATH_KEYS:
                value = str((cfg_path.parent / value).resolve())
            defaults[key] = value
            actions[key].required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _resolve_paths(args) -> None:
    for key in PATH_KEYS:
        if getattr(args, key, None):
            setattr(args, key, str(Path(getattr(args, key)).resolve()))


def _write_fixture(fx, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for key, f in fx.fields.items():
        write_field(out / key, f)
    params = {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in fx.params.items()}
    params["fixture"] = fx.name
    atomic_write_text(out / "params.json", json.dumps(params, indent=2, sort_keys=True) + "\n")


def _load_fixture(directory: Path):
    from .fixtures import Fixture

    params = json.loads((directory / "params.json").read_text())
    if params.get("fixture") != "multifocal_tumor":
        raise UsageError(f"{directory} does not hold a multifocal_tumor fixture")
    fields = {k: read_field(directory / k) for k in ("pi_W", "pi_G", "inside", "m_t0", "m_t1", "m_t2")}
    params = {k: (np.asarray(v) if isinstance(v, list) else v) for k, v in params.items()}
    return Fixture("multifocal_tumor", fields, params)


def cmd_register(args) -> int:
    from .registration import RegistrationOptions, RegistrationProblem, detgrad_report, run_registration
    from .spectral import RegularizationConfig

    m_T = read_field(args.template)
    m_R = read_field(args.reference, expected_dims=m_T.shape)
    reg = RegularizationConfig(args.model, args.beta, args.gamma, args.kappa, args.div_penalty)
    prob = RegistrationProblem(m_R, m_T, reg, args.incompressible, args.n_t)
    res = run_registration(prob, RegistrationOptions(_solver_options(args), args.continuation))
    report = detgrad_report(res.state.v, args.n_t)
    out = Path(args.out)
    write_field(out / "velocity", res.state.v)
    write_field(out / "deformed", res.state.state[-1])
    write_field(out / "detgrad", report.psi)
    write_log(out / "log.csv", res.log)
    export_slices(res.state.state[-1], out / "deformed")
    export_slices(report.psi, out / "detgrad")
    print(f"status={res.status} iterations={res.log.iterations} matvecs={res.matvecs} "
          f"pde_solves={res.pde_solves} rel_mismatch={res.state.relative_mismatch:.6e} "
          f"detgrad_min={report.min:.6g} detgrad_max={report.max:.6g}")
    return EXIT_OK if res.converged else EXIT_SOLVER


def cmd_detgrad(args) -> int:
    from .registration import detgrad_report

    v = read_field(args.velocity)
    if v.ndim != v.shape[0] + 1:
        raise UsageError("detgrad needs a vector field")
    report = detgrad_report(v, args.n_t)
    out = Path(args.out)
    write_field(out / "detgrad", report.psi)
    export_slices(report.psi, out / "detgrad")
    print(f"min={report.min:.6g} max={report.max:.6g} diffeomorphic={report.diffeomorphic}")
    return EXIT_OK


def cmd_tumor_forward(args) -> int:
    from .reaction_diffusion import BrainMask, assemble_diffusion, growth_field, simulate

    fx = _load_fixture(Path(args.fixture_dir))
    m0 = read_field(args.initial, expected_dims=fx["pi_W"].shape) if args.initial else fx["m_t0"]
    k_W = fx["k_W"] if args.k_w is None else args.k_w
    k_G = fx["k_G"] if args.k_g is None else args.k_g
    rho = fx["rho"] if args.rho is None else args.rho
    mask = BrainMask(fx["inside"] > 0.5)
    kappa = assemble_diffusion(fx["pi_W"], fx["pi_G"], k_W, k_G, mask)
    steps = max(1, int(round(args.n_t * args.t_final)))
    traj = simulate(m0, kappa, growth_field(rho, mask, m0.shape), steps, args.t_final)
    out = Path(args.out)
    write_field(out / "final", traj[-1])
    export_slices(traj[-1], out / "final")
    print(f"t_final={args.t_final:g} steps={steps} min={traj[-1].min():.6g} max={traj[-1].max():.6g}")
    return EXIT_OK


def cmd_tumor_invert(args) -> int:
    from .tumor import TumorInversionOptions, fixture_problem, run_tumor_inversion

    fx = _load_fixture(Path(args.fixture_dir))
    dims = fx["pi_W"].shape
    data = read_field(args.data, expected_dims=dims) if args.data else fx["m_t1"]
    data0 = read_field(args.data_t0, expected_dims=dims) if args.data_t0 else None
    prob = fixture_problem(fx, data, data0, args.threshold, args.beta, args.k_w, args.k_g)
    res = run_tumor_inversion(prob, TumorInversionOptions(_solver_options(args), args.invert_coefficients))
    out = Path(args.out)
    fitted = prob.with_coefficients(res.k_W, res.k_G)
    traj = fitted.forward(res.p)
    write_field(out / "initial", traj[0])
    write_field(out / "final", traj[-1])
    write_log(out / "log.csv", res.log)
    write_table(out / "coefficients.csv", ("index", "p"), list(enumerate(res.p)))
    export_slices(traj[0], out / "initial")
    print(f"status={res.status} iterations={res.log.iterations} k_W={res.k_W:.6g} k_G={res.k_G:.6g} "
          f"mismatch={res.log.records[-1].mismatch:.6e}")
    return EXIT_OK if res.converged else EXIT_SOLVER


def cmd_study(args) -> int:
    from .tumor import STUDY_COLUMNS, noise_threshold_study

    fx = make_fixture("multifocal_tumor", args.dims, args.fixture_seed)
    rows = noise_threshold_study(fx, args.noise, args.thresholds, args.seed, args.beta,
                                 realizations=args.realizations)
    write_table(args.out, STUDY_COLUMNS, rows)
    print(f"rows={len(rows)} out={args.out}")
    return EXIT_OK


def cmd_fixture(args) -> int:
    fx = make_fixture(args.name, args.dims, args.seed)
    _write_fixture(fx, Path(args.out))
    print(f"fixture={args.name} dims={'x'.join(map(str, args.dims))} fields={','.join(fx.fields)}")
    return EXIT_OK


def cmd_info(args) -> int:
    if args.field:
        f = read_field(args.field)
        vector = f.ndim == f.shape[0] + 1
        dims = f.shape[1:] if vector else f.shape
        print(f"{'vector' if vector else 'scalar'} shape={'x'.join(map(str, dims))} "
              f"components={f.shape[0] if vector else 1} min={f.min():.6g} max={f.max():.6g}")
    else:
        print(f"pdeinv {__version__}; numpy {np.__version__}; fixtures: {', '.join(FIXTURES)}")
    return EXIT_OK


COMMANDS = {"register": cmd_register, "detgrad": cmd_detgrad, "tumor-forward": cmd_tumor_forward,
            "tumor-invert": cmd_tumor_invert, "study": cmd_study, "fixture": cmd_fixture,
            "info": cmd_info}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except (ConfigError, OSError) as exc:
        print(f"pdeinv: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _resolve_paths(args)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FieldFormatError, OSError, json.JSONDecodeError) as exc:
        print(f"pdeinv: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"pdeinv: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
