"""Command-line entry point.

Exit codes: 0 on success, 2 when the model or configuration is invalid, 3
when a numerical failure stops the computation.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from ._validation import make_grid
from .corrkernel import (
    drift_equation_residual,
    kernel_table,
)
from .errors import ModelError, NumericalError
from .experiments import (
    ScenarioConfig,
    convergence_study,
    emit_report,
    load_config,
    run_ratio_experiment,
    trajectory_curves,
    write_plotdata,
)
from .kalman import anticipative_filter, classical_baseline
from .particle import run_particle_filter
from .simulate import sample_bundles, write_binary, write_csv
from .stability import stability_report
from .volterra import (
    READINGS,
    VolterraKernel,
    VolterraModel,
    compare_readings,
    highdim_filter,
    load_kernel,
    reduced_filter,
    simulate_volterra,
    write_xhat_csv,
)

EXIT_OK = 0
EXIT_MODEL = 2
EXIT_NUMERICAL = 3


def _config(args, **defaults):
    """Config file (if any) overridden by explicit flags."""
    base = load_config(args.config) if args.config else ScenarioConfig(**defaults)
    changes = {}
    if args.scenario is not None:
        changes["model"] = args.scenario
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.grid_k is not None:
        changes["n_steps"] = args.grid_k
    if args.paths is not None:
        changes["n_paths"] = args.paths
    if args.gamma:
        changes["gamma"] = args.gamma[0]
    if args.horizon is not None:
        changes["horizon"] = args.horizon
    if args.scheme is not None:
        changes["scheme"] = args.scheme
    if args.eval_times is not None:
        changes["eval_times"] = args.eval_times
    return base.replace(**changes) if changes else base


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def cmd_kernel(args):
    cfg = _config(args, model="radar", n_paths=1)
    model = cfg.build_model()
    table = kernel_table(model.corr, grid=cfg.grid(model))
    out = _out_dir(args)
    with open(out / "kernel_table.json", "w") as fh:
        fh.write(table.to_json())
    res = drift_equation_residual(table, model.corr)
    print(f"T0 = {table.T0:.6g}")
    print(f"drift-equation residual = {float(np.max(res)):.3e}")
    return EXIT_OK


def cmd_simulate(args):
    cfg = _config(args, model="radar", n_paths=1)
    model = cfg.build_model()
    grid = cfg.grid(model)
    bundles = sample_bundles(model, grid, cfg.seed, np.arange(cfg.n_paths))
    out = _out_dir(args)
    for i in range(len(bundles)):
        b = bundles[i]
        write_csv(b, out / f"path_{b.stream_id}.csv")
        write_binary(b, out / f"path_{b.stream_id}.bin")
    print(f"wrote {len(bundles)} path(s) with K={len(grid) - 1} to {out}")
    return EXIT_OK


def cmd_filter(args):
    cfg = _config(args, model="radar", n_paths=1)
    model = cfg.build_model()
    grid = cfg.grid(model)
    bundle = sample_bundles(model, grid, cfg.seed, [0])[0]
    ant = anticipative_filter(model, bundle.z, grid, cfg.scheme)
    cls = classical_baseline(model, bundle.z, grid, cfg.scheme)
    out = _out_dir(args)
    ant.to_csv(out / "anticipative.csv")
    cls.to_csv(out / "classical.csv")
    _dump({"anticipative": ant.summary(bundle.x), "classical": cls.summary(bundle.x),
           "config": cfg.to_dict()}, out / "filter.json")
    if "plotdata" in cfg.outputs:
        for name, (t, v) in trajectory_curves(cfg).items():
            write_plotdata(t, v, out / f"plot_{name}.csv")
    s = ant.summary(bundle.x)
    print("terminal mean  " + " ".join(f"{v:.6g}" for v in s["terminal_mean"]))
    print("terminal sq.err " + " ".join(f"{v:.3e}" for v in s["mse"]))
    return EXIT_OK


def cmd_ratios(args):
    cfg = _config(args)
    gammas = args.gamma or [cfg.gamma]
    start = time.perf_counter()
    results = run_ratio_experiment(cfg, gammas, args.out_dir, workers=args.workers)
    for g, reports in results.items():
        for r in reports:
            vals = " ".join(f"{v:.4f}" for v in r.ratios)
            print(f"gamma={g:g} t={r.eval_time:g}  R = {vals}")
    print(f"wall time {time.perf_counter() - start:.1f}s")
    return EXIT_OK


def cmd_stability(args):
    cfg = _config(args, model="scalar-bump", n_paths=1, n_steps=4000, scheme="euler")
    model = cfg.build_model()
    grid = cfg.grid(model)
    window = tuple(args.window) if args.window else None
    z = sample_bundles(model, grid, cfg.seed, [0])[0].z
    report = stability_report(model, grid, window, z, cfg.scheme)
    print(report.table())
    out = _out_dir(args)
    with open(out / "stability.json", "w") as fh:
        fh.write(report.to_json(indent=2))
    return EXIT_OK


def cmd_volterra(args):
    cfg = _config(args, model="scalar-demo", n_paths=1)
    if args.kernel:
        kernel = load_kernel(args.kernel)
    else:
        kernel = VolterraKernel.from_expressions(args.p, args.q, cfg.horizon or 1.0)
    model = VolterraModel([[0.0]] if args.drift is None else [[args.drift]], kernel)
    grid = make_grid(model.horizon, cfg.n_steps)
    paths = simulate_volterra(model, grid, cfg.seed, [0])
    z = paths.z[0]
    out = _out_dir(args)
    high = highdim_filter(model, z, grid)
    write_xhat_csv(grid, high.x_hat, out / "xhat_highdim.csv")
    for reading in READINGS:
        run = reduced_filter(model, z, grid, reading)
        write_xhat_csv(grid, run.x_hat, out / f"xhat_{reading}.csv")
    report = compare_readings(model, z, grid)
    for line in report.lines():
        print(line)
    _dump(report.to_dict(), out / "volterra.json")
    return EXIT_OK


def cmd_particle(args):
    cfg = _config(args, model="scalar-demo", n_paths=1)
    model = cfg.build_model()
    grid = cfg.grid(model)
    bundle = sample_bundles(model, grid, cfg.seed, [0])[0]
    run = run_particle_filter(model, bundle.z, args.n_part, cfg.seed, grid)
    out = _out_dir(args)
    run.to_csv(out / "particle.csv")
    run.to_json(out / "particle.json", bundle.x)
    print("terminal mean  " + " ".join(f"{v:.6g}" for v in run.x_hat[-1]))
    print(f"resampled {run.n_resample} times, min ESS {run.ess.min():.1f}")
    return EXIT_OK


def cmd_converge(args):
    cfg = _config(args, model="scalar-demo", n_paths=200, scheme="euler")
    rep = convergence_study(cfg, args.k_list)
    for k0, k1, d in zip(rep.k_list, rep.k_list[1:], rep.differences):
        print(f"K={k0:>6} -> {k1:>6}  difference {d:.3e}")
    for o in rep.orders:
        print(f"order estimate {o:.3f}")
    out = _out_dir(args)
    _dump(rep.to_dict(), out / "convergence.json")
    emit_report({}, out, cfg.outputs, cfg, extra={"convergence": rep.to_dict()})
    return EXIT_OK


COMMANDS = {
    "kernel": (cmd_kernel, "tabulate the decorrelation kernel to JSON"),
    "simulate": (cmd_simulate, "simulate signal/observation paths to CSV and binary"),
    "filter": (cmd_filter, "run the anticipative and classical filters on one path"),
    "ratios": (cmd_ratios, "Monte Carlo error-ratio tables"),
    "stability": (cmd_stability, "Riccati limit, spectral margin and decay diagnostics"),
    "volterra": (cmd_volterra, "Volterra-observation filter and reading comparison"),
    "particle": (cmd_particle, "bootstrap particle filter on the augmented state"),
    "converge": (cmd_converge, "grid-refinement study of the filter"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON scenario config file")
    common.add_argument("--scenario", help="built-in scenario id or model JSON path")
    common.add_argument("--seed", type=int)
    common.add_argument("--grid-k", type=int, help="number of grid steps K")
    common.add_argument("--paths", type=int, help="Monte Carlo path count")
    common.add_argument("--gamma", type=float, nargs="+", help="anticipation strength(s)")
    common.add_argument("--horizon", type=float)
    common.add_argument("--scheme", choices=("euler", "discrete"))
    common.add_argument("--eval-times", type=float, nargs="+", help="report times (grid points)")
    common.add_argument("--out-dir", default="out")

    parser = argparse.ArgumentParser(prog="anticipative", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {name: sub.add_parser(name, parents=[common], help=text)
            for name, (_, text) in COMMANDS.items()}
    subs["ratios"].add_argument("--workers", type=int, default=1)
    subs["stability"].add_argument("--window", type=float, nargs=2, metavar=("START", "END"),
                                   default=(5.0, 15.0))
    v = subs["volterra"]
    v.add_argument("--kernel", help="kernel JSON file")
    v.add_argument("--p", nargs="+", default=["t"], help="factors p_i(t)")
    v.add_argument("--q", nargs="+", default=["s"], help="factors q_i(s)")
    v.add_argument("--drift", type=float, help="scalar signal drift coefficient")
    subs["particle"].add_argument("--n-part", type=int, default=10_000)
    subs["converge"].add_argument("--k-list", type=int, nargs="+", default=[64, 128, 256, 512])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ModelError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"invalid model or config: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except FileNotFoundError as exc:
        print(f"invalid model or config: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
