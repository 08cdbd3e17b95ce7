"""Synthetic test functions, the GAP score and the Bayesian-optimization loop.

All functions are the standard minimization test problems negated, so the
loop always maximizes.  Models see inputs mapped to the unit cube and
outcomes standardized at every iteration.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .gp import Dataset, FitConfig, GpModel, fit_hyperparameters
from .optimize import OptimizationError, PolicyConfig, WarmStartState, propose_next

log = logging.getLogger(__name__)

# --- test functions (minimization form) ----------------------------------------------


def _eggholder(x):
    x1, x2 = x[..., 0], x[..., 1]
    return -(x2 + 47) * np.sin(np.sqrt(np.abs(x2 + x1 / 2 + 47))) - x1 * np.sin(
        np.sqrt(np.abs(x1 - (x2 + 47)))
    )


def _dropwave(x):
    r2 = np.sum(x**2, axis=-1)
    return -(1 + np.cos(12 * np.sqrt(r2))) / (0.5 * r2 + 2)


def _shubert(x):
    j = np.arange(1, 6)
    terms = np.sum(j * np.cos((j + 1) * x[..., None] + j), axis=-1)
    return np.prod(terms, axis=-1)


def _rastrigin(x):
    return 10 * x.shape[-1] + np.sum(x**2 - 10 * np.cos(2 * np.pi * x), axis=-1)


def _ackley(x):
    a = -20 * np.exp(-0.2 * np.sqrt(np.mean(x**2, axis=-1)))
    return a - np.exp(np.mean(np.cos(2 * np.pi * x), axis=-1)) + 20 + math.e


def _bukin6(x):
    x1, x2 = x[..., 0], x[..., 1]
    return 100 * np.sqrt(np.abs(x2 - 0.01 * x1**2)) + 0.01 * np.abs(x1 + 10)


_SHEKEL_BETA = 0.1 * np.array([1, 2, 2, 4, 4, 6, 3, 7, 5, 5], dtype=float)
_SHEKEL_ROW_A = [4, 1, 8, 6, 3, 2, 5, 8, 6, 7]
_SHEKEL_ROW_B = [4, 1, 8, 6, 7, 9, 3, 1, 2, 3.6]
_SHEKEL_C = np.array([_SHEKEL_ROW_A, _SHEKEL_ROW_B, _SHEKEL_ROW_A, _SHEKEL_ROW_B], dtype=float)


def _shekel(m):
    def f(x):
        diff = x[..., None, :] - _SHEKEL_C[:, :m].T  # (..., m, 4)
        return -np.sum(1.0 / (np.sum(diff**2, axis=-1) + _SHEKEL_BETA[:m]), axis=-1)

    return f


@dataclass(frozen=True)
class BenchmarkFunction:
    """A test problem in the maximization convention over its native box."""

    name: str
    dim: int
    bounds: np.ndarray  # (d, 2)
    minimize_form: Callable = field(repr=False)

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.float64)
        if b.shape != (self.dim, 2) or np.any(b[:, 1] <= b[:, 0]):
            raise ValueError(f"bad bounds for {self.name}")
        object.__setattr__(self, "bounds", b)

    def __call__(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"{self.name} takes {self.dim}-d points")
        tol = 1e-9 * (self.bounds[:, 1] - self.bounds[:, 0])
        if np.any(x < self.bounds[:, 0] - tol) or np.any(x > self.bounds[:, 1] + tol):
            raise ValueError(f"point outside the native box of {self.name}")
        val = -self.minimize_form(x)
        return float(val) if np.ndim(val) == 0 else val

    def to_native(self, u) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + np.asarray(u, dtype=np.float64) * (hi - lo)

    def to_unit(self, x) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)

    @property
    def optimum(self) -> "OptimumRecord":
        return load_optima()[self.name]


def _box(d, lo, hi):
    return np.tile([lo, hi], (d, 1))


FUNCTIONS: dict[str, BenchmarkFunction] = {
    f.name: f
    for f in [
        BenchmarkFunction("eggholder", 2, _box(2, -512, 512), _eggholder),
        BenchmarkFunction("dropwave", 2, _box(2, -5.12, 5.12), _dropwave),
        BenchmarkFunction("shubert", 2, _box(2, -10, 10), _shubert),
        BenchmarkFunction("rastrigin4", 4, _box(4, -5.12, 5.12), _rastrigin),
        BenchmarkFunction("ackley2", 2, _box(2, -32.768, 32.768), _ackley),
        BenchmarkFunction("ackley5", 5, _box(5, -32.768, 32.768), _ackley),
        BenchmarkFunction("bukin", 2, np.array([[-15.0, -5.0], [-3.0, 3.0]]), _bukin6),
        BenchmarkFunction("shekel5", 4, _box(4, 0, 10), _shekel(5)),
        BenchmarkFunction("shekel7", 4, _box(4, 0, 10), _shekel(7)),
    ]
}


def get_function(name: str) -> BenchmarkFunction:
    try:
        return FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown function {name!r}; choose from {sorted(FUNCTIONS)}") from None


def synthetic_function(name: str, x) -> float:
    """Maximization value of the named test function at a native point."""
    return get_function(name)(x)


# --- oracle optima -------------------------------------------------------------------


@dataclass(frozen=True)
class OptimumRecord:
    name: str
    argmax: tuple[float, ...]
    value: float
    oracle: str


def oracle_optimum(fn: BenchmarkFunction, grid_points: int | None = None, refine: int = 20) -> OptimumRecord:
    """Fine-grid search followed by L-BFGS-B polishing of the best grid points.

    The default grid has an odd number of points per axis so that centres and
    box corners are included exactly.
    """
    d = fn.dim
    if grid_points is None:
        grid_points = {2: 3001, 4: 41, 5: 17}[d]
    axes = [np.linspace(lo, hi, grid_points) for lo, hi in fn.bounds]
    best_vals = np.empty(0)
    best_pts = np.empty((0, d))
    # chunk along the first axis to bound memory
    for a0 in axes[0]:
        mesh = np.stack(np.meshgrid(*([np.array([a0])] + axes[1:]), indexing="ij"), -1).reshape(-1, d)
        vals = fn(mesh)
        top = np.argpartition(-vals, min(refine, len(vals) - 1))[:refine]
        best_vals = np.concatenate([best_vals, vals[top]])
        best_pts = np.vstack([best_pts, mesh[top]])
        keep = np.argsort(-best_vals, kind="stable")[:refine]
        best_vals, best_pts = best_vals[keep], best_pts[keep]
    x_best, v_best = best_pts[0], best_vals[0]
    for x0 in best_pts:
        res = minimize(lambda z: -fn(z), x0, method="L-BFGS-B", bounds=fn.bounds)
        if -res.fun > v_best:
            x_best, v_best = res.x, -res.fun
    desc = f"grid {grid_points}^{d} over native box + L-BFGS-B from top {refine}"
    return OptimumRecord(fn.name, tuple(float(v) for v in x_best), float(v_best), desc)


def format_optima(records) -> str:
    lines = [
        "# Oracle maxima of the negated test functions (maximization convention).",
        "# name | argmax (native coordinates) | max value | oracle",
        "# Regenerate with: python -m lookahead_bo.benchmarks",
    ]
    def clean(v):  # drop round-off signs such as -0 or -4e-16 at exact optima
        return 0.0 if abs(v) < 1e-12 else v

    for r in records:
        arg = ",".join(f"{clean(v):.10g}" for v in r.argmax)
        lines.append(f"{r.name} | {arg} | {clean(r.value):.12g} | {r.oracle}")
    return "\n".join(lines) + "\n"


def parse_optima(text: str) -> dict[str, OptimumRecord]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, arg, value, oracle = (s.strip() for s in line.split("|", 3))
        out[name] = OptimumRecord(name, tuple(float(v) for v in arg.split(",")), float(value), oracle)
    return out


_OPTIMA_CACHE: dict[str, OptimumRecord] = {}


def load_optima() -> dict[str, OptimumRecord]:
    if not _OPTIMA_CACHE:
        text = resources.files("lookahead_bo").joinpath("data/optima.txt").read_text()
        _OPTIMA_CACHE.update(parse_optima(text))
    return _OPTIMA_CACHE


# --- GAP and traces ------------------------------------------------------------------


def gap_value(best: float, y0: float, y_star: float, tol: float = 1e-12) -> float:
    """``(best - y0) / (y_star - y0)`` clamped to ``[0, 1]``."""
    span = y_star - y0
    if span < -tol:
        raise ValueError("y_star is below the initial best value")
    if abs(span) <= tol:
        if best >= y_star - tol:
            return 1.0
        raise ValueError("GAP undefined: y_star equals the initial best but is not attained")
    return float(min(1.0, max(0.0, (best - y0) / span)))


@dataclass
class BenchmarkTrace:
    """Observations of one BO repeat; the first ``n_init`` rows are the initial design."""

    function: str
    policy: str
    seed: tuple[int, ...]
    n_init: int
    points: list[np.ndarray] = field(default_factory=list)  # native coordinates
    values: list[float] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def incumbents(self) -> np.ndarray:
        return np.maximum.accumulate(np.asarray(self.values, dtype=np.float64))

    @property
    def initial_best(self) -> float:
        return float(np.max(self.values[: self.n_init]))

    @property
    def iterations(self) -> int:
        return len(self.values) - self.n_init

    def records(self):
        """Dicts with iteration, point, value, incumbent and wall time."""
        inc = self.incumbents
        for i, (x, y, t) in enumerate(zip(self.points, self.values, self.wall_times)):
            yield {"iteration": i, "x": x, "y": y, "best_y": float(inc[i]), "wall_time_s": t}


def gap(trace: BenchmarkTrace, y_star: float) -> float:
    return gap_value(float(trace.incumbents[-1]), trace.initial_best, y_star)


# --- BO loop -------------------------------------------------------------------------


def derive_seed(master: int, function: str, repeat: int) -> np.random.SeedSequence:
    """Seed of one repeat.  Policies share it, so they share initial designs."""
    return np.random.SeedSequence([int(master), zlib.crc32(function.encode()), int(repeat)])


def _standardize(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    mu = float(y.mean())
    sd = float(y.std())
    if not sd > 0:
        sd = 1.0
    return (y - mu) / sd, mu, sd


def run_bo(
    fn: BenchmarkFunction,
    policy: PolicyConfig,
    budget: int,
    seed: np.random.SeedSequence | int = 0,
    n_init: int | None = None,
    fit_config: FitConfig | None = None,
    callback=None,
) -> BenchmarkTrace:
    """Initial uniform design of ``2d`` points, then ``budget`` BO iterations.

    Errors raised inside the loop propagate; :func:`run_experiment` turns them
    into failure records.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    design_ss, loop_ss = ss.spawn(2)
    d = fn.dim
    n_init = 2 * d if n_init is None else n_init
    if n_init < 2:
        raise ValueError("need at least two initial points to fit the model")
    fit_config = fit_config or FitConfig()
    trace = BenchmarkTrace(fn.name, policy.name, tuple(np.atleast_1d(ss.entropy).tolist()), n_init)

    U = np.random.default_rng(design_ss).uniform(size=(n_init, d))
    for u in U:
        x = fn.to_native(u)
        trace.points.append(x)
        trace.values.append(float(fn(x)))
        trace.wall_times.append(0.0)

    loop_rng = np.random.default_rng(loop_ss)
    hp = None
    warm: WarmStartState | None = None
    for it in range(budget):
        t0 = time.perf_counter()
        y = np.asarray(trace.values)
        ys, mu, sd = _standardize(y)
        data = Dataset(np.vstack([fn.to_unit(p) for p in trace.points]), ys)
        cfg = FitConfig(**{**fit_config.__dict__, "seed": int(loop_rng.integers(2**31))})
        hp = fit_hyperparameters(data, cfg, previous=hp)
        model = GpModel.from_data(data, hp)
        state = None
        if warm is not None:
            # fantasy values were stored in raw units; rescale to the current standardization
            state = WarmStartState(
                warm.layout, warm.solution, (warm.fantasy_values - mu) / sd, (warm.observed - mu) / sd
            )
        u, info = propose_next(model, float(ys.max()), policy, state, seed=int(loop_rng.integers(2**31)))
        u = np.clip(u, 0.0, 1.0)
        x = fn.to_native(u)
        value = float(fn(x))
        trace.points.append(x)
        trace.values.append(value)
        trace.wall_times.append(time.perf_counter() - t0)
        fv = info.get("fantasy_values")
        warm = None
        if fv is not None:
            warm = WarmStartState(info["layout"], info["solution"], np.asarray(fv) * sd + mu, value)
        if callback is not None:
            callback(it, trace, info)
    return trace


@dataclass
class Aggregate:
    function: str
    policy: str
    mean_gap: float
    stderr_gap: float
    mean_time_per_iter: float
    repeats: int
    failures: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def aggregate(function: str, policy: str, traces: list[BenchmarkTrace], y_star: float) -> Aggregate:
    ok = [t for t in traces if t.error is None]
    gaps = np.array([gap(t, y_star) for t in ok])
    times = [np.mean(t.wall_times[t.n_init :]) for t in ok if t.iterations > 0]
    stderr = float(gaps.std(ddof=1) / math.sqrt(len(gaps))) if len(gaps) > 1 else 0.0
    return Aggregate(
        function,
        policy,
        float(gaps.mean()) if len(gaps) else float("nan"),
        stderr,
        float(np.mean(times)) if times else 0.0,
        len(ok),
        len(traces) - len(ok),
    )


def _run_repeat(args):
    name, policy, budget, master, repeat, n_init, threads_one = args
    if threads_one:
        import torch

        torch.set_num_threads(1)
    fn = get_function(name)
    seed = derive_seed(master, name, repeat)
    try:
        return run_bo(fn, policy, budget, seed, n_init)
    except (OptimizationError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        log.warning("repeat %d of %s/%s failed: %s", repeat, name, policy.name, exc)
        t = BenchmarkTrace(name, policy.name, (master, repeat), n_init or 2 * fn.dim)
        t.error = f"{type(exc).__name__}: {exc}"
        return t


def run_experiment(
    functions,
    policies,
    repeats: int,
    master_seed: int = 0,
    iterations: int | None = None,
    n_init: int | None = None,
    threads: int = 1,
):
    """Run every (function, policy, repeat) and aggregate GAP and timing.

    ``iterations`` defaults to ``20 d`` per function.  Failed repeats are kept
    as traces with ``error`` set and counted in the aggregates.

    Returns:
        ``(aggregates, traces)`` with traces in (function, policy, repeat) order.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    jobs = []
    for name in functions:
        fn = get_function(name)
        budget = 20 * fn.dim if iterations is None else iterations
        for pol in policies:
            for r in range(repeats):
                jobs.append((name, pol, budget, master_seed, r, n_init, threads > 1))
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(_run_repeat, jobs))
    else:
        traces = [_run_repeat(j) for j in jobs]
    aggs = []
    for name in functions:
        y_star = load_optima()[name].value
        for pol in policies:
            group = [t for t in traces if t.function == name and t.policy == pol.name]
            aggs.append(aggregate(name, pol.name, group, y_star))
    return aggs, traces


if __name__ == "__main__":  # regenerate the constants file
    import sys

    recs = [oracle_optimum(f) for f in FUNCTIONS.values()]
    text = format_optima(recs)
    path = resources.files("lookahead_bo").joinpath("data/optima.txt")
    if "--write" in sys.argv:
        with open(str(path), "w") as fh:
            fh.write(text)
    print(text, end="")
