"""Monte Carlo scenario runner: error-ratio tables, convergence studies, reports.

Both filters see the same simulated paths, so the ratio of their mean-square
errors is estimated from paired samples.  Paths are processed in chunks of
consecutive stream ids and partial sums are merged in stream order, which
makes the result independent of how chunks are scheduled.
"""

import csv
import json
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._validation import make_grid
from .errors import DivisionByZero, ModelError
from .kalman import anticipative_gains, classical_gains, run_gains
from .models import SCENARIOS, load_model, model_from_dict, scenario
from .simulate import sample_bundles

DEFAULT_STEPS = 1000
DEFAULT_PATHS = 2000
DEFAULT_SEED = 42
DEFAULT_CHUNK = 250
OUTPUT_KINDS = ("csv", "json", "plotdata")
MSE_FLOOR = 1e-300


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to rerun a ratio experiment.

    ``model`` is a built-in scenario id, a path to a model JSON file, or an
    inline model description.  ``horizon=None`` keeps the model's own horizon.
    """

    model: object = "radar"
    gamma: float = 1.0
    horizon: float = None
    n_steps: int = DEFAULT_STEPS
    n_paths: int = DEFAULT_PATHS
    seed: int = DEFAULT_SEED
    eval_times: tuple = (0.75, 1.0)
    outputs: tuple = OUTPUT_KINDS
    scheme: str = "discrete"
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if int(self.n_steps) < 2:
            raise ModelError("grid needs K >= 2")
        if int(self.n_paths) < 1:
            raise ModelError("n_paths must be at least 1")
        if int(self.chunk) < 1:
            raise ModelError("chunk must be at least 1")
        bad = set(self.outputs) - set(OUTPUT_KINDS)
        if bad:
            raise ModelError(f"unknown output kinds {sorted(bad)}")
        object.__setattr__(self, "eval_times", tuple(float(t) for t in self.eval_times))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    def build_model(self):
        spec = self.model
        if isinstance(spec, dict):
            return model_from_dict(spec)
        if spec in SCENARIOS:
            return scenario(spec, self.gamma, self.horizon)
        if not Path(spec).is_file():
            raise ModelError(f"{spec!r} is neither a built-in scenario {SCENARIOS} nor a model file")
        return load_model(spec)

    def grid(self, model=None):
        model = self.build_model() if model is None else model
        return make_grid(model.horizon, int(self.n_steps))

    def eval_indices(self, grid):
        """Grid indices of ``eval_times``; each must be a grid point."""
        idx = np.rint(np.asarray(self.eval_times) / grid[-1] * (len(grid) - 1)).astype(int)
        if idx.size and (idx.min() < 0 or idx.max() >= len(grid)
                         or not np.allclose(grid[idx], self.eval_times, rtol=0, atol=1e-9)):
            raise ModelError(f"eval_times {list(self.eval_times)} are not all grid points")
        return idx

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return ScenarioConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["eval_times"] = list(self.eval_times)
        d["outputs"] = list(self.outputs)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ModelError(f"unknown config fields {sorted(extra)}")
        return cls(**d)


def load_config(path):
    with open(path) as fh:
        return ScenarioConfig.from_dict(json.load(fh))


@dataclass(frozen=True)
class RatioReport:
    """Root-MSE ratio of the anticipative filter to the classical one, per component."""

    eval_time: float
    ratios: np.ndarray
    se: np.ndarray
    n_paths: int
    seed: int
    gamma: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "ratios", np.asarray(self.ratios, dtype=float))
        object.__setattr__(self, "se", np.asarray(self.se, dtype=float))

    def row(self):
        return [self.eval_time, *self.ratios.tolist(), *self.se.tolist()]


@dataclass
class _Sums:
    """Paired error moments at the evaluation times, shape ``(len(eval), m)``."""

    n: int
    ea2: np.ndarray
    ec2: np.ndarray
    ea4: np.ndarray
    ec4: np.ndarray
    eac: np.ndarray

    def merge(self, other):
        return _Sums(self.n + other.n, self.ea2 + other.ea2, self.ec2 + other.ec2,
                     self.ea4 + other.ea4, self.ec4 + other.ec4, self.eac + other.eac)


def _ratio_chunk(config, ids):
    model = config.build_model()
    grid = config.grid(model)
    idx = config.eval_indices(grid)
    ag, u0 = anticipative_gains(model, grid, config.scheme)
    cg, c0 = classical_gains(model, grid, config.scheme)
    bundles = sample_bundles(model, grid, config.seed, ids)
    truth = bundles.x[:, idx]
    ea = run_gains(ag, bundles.z, u0, record=idx).x_hat - truth
    ec = run_gains(cg, bundles.z, c0, record=idx).x_hat - truth
    a2, c2 = ea ** 2, ec ** 2
    return _Sums(len(ids), a2.sum(0), c2.sum(0), (a2 ** 2).sum(0), (c2 ** 2).sum(0), (a2 * c2).sum(0))


def _chunks(n_paths, chunk):
    return [np.arange(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]


def _ratio_from_sums(s):
    n = s.n
    A, C = s.ea2 / n, s.ec2 / n
    if np.any(C <= MSE_FLOOR):
        raise DivisionByZero("baseline mean-square error underflowed")
    ratio = np.sqrt(A / C)
    if n < 2:
        return ratio, np.full_like(ratio, np.inf)
    var_a = (s.ea4 / n - A ** 2) * n / (n - 1)
    var_c = (s.ec4 / n - C ** 2) * n / (n - 1)
    cov = (s.eac / n - A * C) * n / (n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        var_log = 0.25 * (var_a / A ** 2 + var_c / C ** 2 - 2 * cov / (A * C)) / n
    var_log = np.where(A > 0, np.maximum(var_log, 0.0), 0.0)
    return ratio, ratio * np.sqrt(var_log)


def monte_carlo_ratios(config, workers=1):
    """Paired Monte Carlo estimate of the ratios at each evaluation time.

    The standard errors come from the delta method on the log of the ratio,
    using the joint sample moments of the two squared errors.

    Raises
    ------
    DivisionByZero
        If the classical filter's mean-square error underflows.
    """
    chunks = _chunks(int(config.n_paths), int(config.chunk))
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_ratio_chunk, [config] * len(chunks), chunks))
    else:
        parts = [_ratio_chunk(config, ids) for ids in chunks]
    total = parts[0]
    for p in parts[1:]:
        total = total.merge(p)
    ratio, se = _ratio_from_sums(total)
    return [RatioReport(t, ratio[i], se[i], total.n, int(config.seed), float(config.gamma))
            for i, t in enumerate(config.eval_times)]


def check_monotone(reports_by_gamma, eval_time=1.0):
    """Warn when ratios at ``eval_time`` increase with the anticipation strength."""
    gammas = sorted(reports_by_gamma)
    rows = []
    for g in gammas:
        hit = [r for r in reports_by_gamma[g] if np.isclose(r.eval_time, eval_time)]
        if hit:
            rows.append((g, hit[0].ratios))
    for (g0, r0), (g1, r1) in zip(rows, rows[1:]):
        if np.any(r1 > r0):
            warnings.warn(f"ratios at t={eval_time} increase from gamma={g0} to gamma={g1}",
                          RuntimeWarning, stacklevel=2)
            return False
    return True


def trajectory_curves(config, stream_id=0):
    """Signal, anticipative and classical estimate along one path, per component."""
    model = config.build_model()
    grid = config.grid(model)
    bundle = sample_bundles(model, grid, config.seed, [stream_id])[0]
    ag, u0 = anticipative_gains(model, grid, config.scheme)
    cg, c0 = classical_gains(model, grid, config.scheme)
    xa = run_gains(ag, bundle.z, u0).x_hat
    xc = run_gains(cg, bundle.z, c0).x_hat
    curves = {}
    for i in range(model.dim_signal):
        curves[f"signal_{i + 1}"] = (grid, bundle.x[:, i])
        curves[f"anticipative_{i + 1}"] = (grid, xa[:, i])
        curves[f"classical_{i + 1}"] = (grid, xc[:, i])
    return curves


# -- convergence in the grid ---------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceReport:
    """Terminal estimate differences between successive grid resolutions."""

    k_list: tuple
    differences: np.ndarray
    ratios: np.ndarray
    orders: np.ndarray
    n_paths: int
    seed: int

    def to_dict(self):
        return {"k_list": list(self.k_list), "differences": self.differences.tolist(),
                "ratios": self.ratios.tolist(), "orders": self.orders.tolist(),
                "n_paths": self.n_paths, "seed": self.seed}


def convergence_study(config, k_list, scheme=None):
    """Rerun the anticipative filter on nested grids of one fixed-seed dataset.

    Paths are simulated on the finest grid and the observation is read off
    at the coarser nodes, so every resolution filters the same data.  The
    reported difference between resolutions ``K_i`` and ``K_{i+1}`` is the
    root mean square, over paths and components, of the terminal estimates.

    Raises
    ------
    ModelError
        If ``k_list`` is not increasing or a resolution does not divide the finest.
    """
    k_list = tuple(int(k) for k in k_list)
    if len(k_list) < 2 or any(b < a for a, b in zip(k_list, k_list[1:])) or k_list[0] < 2:
        raise ModelError("k_list must be nondecreasing with at least two entries >= 2")
    k_max = k_list[-1]
    if any(k_max % k for k in k_list):
        raise ModelError("every resolution must divide the finest one")
    scheme = config.scheme if scheme is None else scheme
    model = config.build_model()
    fine = make_grid(model.horizon, k_max)
    bundles = sample_bundles(model, fine, config.seed, np.arange(int(config.n_paths)))
    terminal = []
    for k in k_list:
        stride = k_max // k
        grid = fine[::stride]
        gains, u0 = anticipative_gains(model, grid, scheme)
        run = run_gains(gains, bundles.z[:, ::stride], u0, record=[k])
        terminal.append(run.x_hat[:, 0])
    diffs = np.array([np.sqrt(np.mean((b - a) ** 2)) for a, b in zip(terminal, terminal[1:])])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = diffs[:-1] / diffs[1:]
        steps = np.array([b / a for a, b in zip(k_list[1:], k_list[2:])], dtype=float)
        orders = np.log(ratios) / np.log(steps)
    return ConvergenceReport(k_list, diffs, ratios, orders, int(config.n_paths), int(config.seed))


# -- report files -----------------------------------------------------------------------


def _versions():
    from importlib.metadata import PackageNotFoundError, version

    from . import __version__

    out = {"python": platform.python_version(), "anticipative": __version__, "numpy": np.__version__}
    for pkg in ("scipy", "scikit-learn"):
        try:
            out[pkg] = version(pkg)
        except PackageNotFoundError:
            out[pkg] = None
    return out


def _fmt(v):
    return repr(float(v))


def ratio_csv_name(gamma):
    return f"ratios_gamma{float(gamma):g}.csv"


def write_ratio_csv(reports, path):
    """One row per evaluation time: ``t, R1..Rm, se1..sem``."""
    m = len(reports[0].ratios)
    header = ["t"] + [f"R{i + 1}" for i in range(m)] + [f"se{i + 1}" for i in range(m)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in reports:
            wr.writerow([_fmt(v) for v in r.row()])


def read_ratio_csv(path, n_paths=0, seed=0, gamma=float("nan")):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    m = (len(rows[0]) - 1) // 2
    out = []
    for row in rows[1:]:
        vals = [float(v) for v in row]
        out.append(RatioReport(vals[0], vals[1:1 + m], vals[1 + m:], n_paths, seed, gamma))
    return out


def write_plotdata(t, values, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "value"])
        for a, b in zip(np.asarray(t, dtype=float), np.asarray(values, dtype=float)):
            wr.writerow([_fmt(a), _fmt(b)])


def emit_report(results, out_dir, targets=OUTPUT_KINDS, config=None, curves=None,
                wall_time=None, extra=None):
    """Write ratio tables, plot data and a JSON manifest into ``out_dir``.

    ``results`` maps an anticipation strength to its list of RatioReport
    (a bare list is filed under the config's gamma).  The manifest is always
    written; table and plot files only when there is something to put in them.
    Returns the paths written, manifest last.

    Raises
    ------
    OSError
        With the offending path in the message.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if isinstance(results, (list, tuple)):
        gamma = config.gamma if config is not None else (results[0].gamma if results else 0.0)
        results = {float(gamma): list(results)} if results else {}
    written = []
    try:
        for gamma, reports in sorted(results.items()):
            if not reports:
                continue
            if "csv" in targets:
                path = out / ratio_csv_name(gamma)
                write_ratio_csv(reports, path)
                written.append(path)
            if "plotdata" in targets:
                times = [r.eval_time for r in reports]
                for i in range(len(reports[0].ratios)):
                    path = out / f"plot_ratio_gamma{float(gamma):g}_R{i + 1}.csv"
                    write_plotdata(times, [r.ratios[i] for r in reports], path)
                    written.append(path)
        if curves and "plotdata" in targets:
            for name, (t, v) in curves.items():
                path = out / f"plot_{name}.csv"
                write_plotdata(t, v, path)
                written.append(path)
        manifest = {
            "config": None if config is None else config.to_dict(),
            "seeds": sorted({r.seed for reps in results.values() for r in reps})
            if results else ([] if config is None else [int(config.seed)]),
            "gammas": sorted(float(g) for g in results),
            "n_paths": {f"{float(g):g}": reps[0].n_paths for g, reps in results.items() if reps},
            "versions": _versions(),
            "wall_time_s": wall_time,
            "files": [p.name for p in written],
        }
        if extra:
            manifest.update(extra)
        path = out / "manifest.json"
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        written.append(path)
    except OSError as exc:
        raise OSError(f"writing report into {out} failed: {exc}") from exc
    return written


def run_ratio_experiment(config, gammas=None, out_dir=None, workers=1):
    """Ratios for each anticipation strength, optionally emitted to ``out_dir``."""
    start = time.perf_counter()
    gammas = [config.gamma] if gammas is None else list(gammas)
    results = {}
    for g in gammas:
        results[float(g)] = monte_carlo_ratios(config.replace(gamma=float(g)), workers)
    check_monotone(results)
    if out_dir is not None:
        curves = trajectory_curves(config.replace(gamma=float(gammas[0])))
        emit_report(results, out_dir, config.outputs, config, curves,
                    wall_time=time.perf_counter() - start)
    return results
