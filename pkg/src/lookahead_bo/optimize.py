"""Gradient-based one-shot optimization: box L-BFGS, restarts and warm starts.

Every restart runs its own L-BFGS-B instance (private curvature history and
line search).  The instances advance in lock step so that the objective is
evaluated for all of them in one batched call per round.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import minimize

from .acquisition import (
    TreeLayout,
    TreeVariables,
    binoculars_select,
    extract_candidate,
    stage_values,
)
from .gp import DTYPE
from .sampling import BaseSampleTree, correlate, draw_base_samples

log = logging.getLogger(__name__)

_PENALTY = 1e10
_SCREEN_CHUNK = 256
DEFAULT_FANTASY_COUNTS = (10, 5, 3)


class OptimizationError(RuntimeError):
    """Every restart produced a non-finite objective."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class OptimizerConfig:
    """Restart and L-BFGS-B settings.

    ``raw_samples`` uniform candidates are screened to seed the fresh restarts;
    set it to 0 to start fresh restarts from plain uniform draws.
    """

    restarts: int = 10
    warm_restarts: int = 5
    max_iter: int = 100
    gtol: float = 1e-6
    ftol: float = 1e-10
    history: int = 10
    raw_samples: int = 2048
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("need at least one restart")
        if self.gtol <= 0 or self.ftol <= 0 or self.max_iter < 1:
            raise ValueError("tolerances and iteration limits must be positive")


@dataclass
class BoxResult:
    x: np.ndarray
    value: float
    restart_x: np.ndarray
    restart_values: np.ndarray
    initial_values: np.ndarray
    n_evals: int


def gradient(objective, vars) -> np.ndarray:
    """Autograd gradient of a scalar torch objective at ``vars``."""
    t = torch.tensor(np.asarray(vars, dtype=np.float64), dtype=DTYPE, requires_grad=True)
    value = objective(t)
    if not bool(torch.isfinite(value)):
        raise ValueError("objective is not finite at the given point")
    (g,) = torch.autograd.grad(value, t)
    return g.numpy()


def batched_value_and_grad(fn):
    """Wrap ``fn: (N, D) tensor -> (N,) tensor`` as a numpy value-and-gradient map."""

    def value_and_grad(X: np.ndarray):
        t = torch.tensor(X, dtype=DTYPE, requires_grad=True)
        vals = fn(t)
        vals.sum().backward()
        return vals.detach().numpy().copy(), t.grad.numpy().copy()

    return value_and_grad


class _Aborted(Exception):
    pass


class _LockstepBatcher:
    """Collects one point from every running optimizer, then evaluates them together.

    Worker threads call :meth:`request` and block; :meth:`serve` (on the calling
    thread) waits until every still-running worker has a pending point, runs a
    single batched evaluation and hands the rows back.  Batches therefore
    depend only on the optimizer trajectories, never on thread timing.
    """

    def __init__(self, evaluate, n_workers: int):
        self._evaluate = evaluate
        self._cond = threading.Condition()
        self._pending: dict[int, np.ndarray] = {}
        self._results: dict[int, tuple] = {}
        self._active = n_workers
        self._aborted = False
        self.rounds = 0

    def request(self, row: int, z: np.ndarray):
        with self._cond:
            self._pending[row] = np.array(z, dtype=np.float64)
            self._cond.notify_all()
            while row not in self._results and not self._aborted:
                self._cond.wait()
            if self._aborted:
                raise _Aborted
            return self._results.pop(row)

    def finish(self):
        with self._cond:
            self._active -= 1
            self._cond.notify_all()

    def abort(self):
        with self._cond:
            self._aborted = True
            self._cond.notify_all()

    def serve(self):
        while True:
            with self._cond:
                while self._active > 0 and len(self._pending) < self._active:
                    self._cond.wait()
                if self._active == 0:
                    return
                rows = sorted(self._pending)
                X = np.stack([self._pending.pop(r) for r in rows])
            vals, grads = self._evaluate(X)
            self.rounds += 1
            with self._cond:
                for i, r in enumerate(rows):
                    self._results[r] = (vals[i], grads[i])
                self._cond.notify_all()


def run_restarts(objective, gradient, inits, config: OptimizerConfig = OptimizerConfig(), bounds=None) -> BoxResult:
    """Maximize from every row of ``inits`` inside a box; keep per-restart bests.

    Args:
        objective: ``(N, D) -> (N,)`` values; if ``gradient`` is ``None`` it
            must return ``(values, gradients)``.
        gradient: ``(N, D) -> (N, D)`` or ``None``.
        inits: ``(N, D)`` starting points inside the bounds.
        bounds: ``(lower, upper)`` scalars or length-``D`` arrays; defaults to
            the config's unit box.
    """
    inits = np.atleast_2d(np.asarray(inits, dtype=np.float64))
    N, D = inits.shape
    if bounds is None:
        bounds = (config.lower, config.upper)
    lower = np.broadcast_to(np.asarray(bounds[0], dtype=np.float64), (D,))
    upper = np.broadcast_to(np.asarray(bounds[1], dtype=np.float64), (D,))
    if np.any(inits < lower - 1e-12) or np.any(inits > upper + 1e-12):
        raise ValueError("initial points must lie within the bounds")
    inits = np.clip(inits, lower, upper)

    best_x = inits.copy()
    best_v = np.full(N, -np.inf)

    def evaluate(X):
        n = len(X)
        if gradient is None:
            vals, grads = objective(X)
        else:
            vals, grads = objective(X), gradient(X)
        return np.asarray(vals, dtype=np.float64).reshape(n), np.asarray(grads, dtype=np.float64).reshape(n, D)

    vals, _ = evaluate(inits)
    initial = np.where(np.isfinite(vals), vals, -np.inf)
    best_v[:] = initial
    # restarts that start non-finite are skipped
    rows = np.flatnonzero(np.isfinite(initial))
    if rows.size == 0:
        raise OptimizationError(
            "objective is non-finite at every initial point",
            {"initial_values": initial, "inits": inits},
        )
    box = list(zip(lower, upper))
    options = {"maxiter": config.max_iter, "maxcor": config.history, "gtol": config.gtol, "ftol": config.ftol}
    batcher = _LockstepBatcher(evaluate, len(rows))

    def fun(z, row):
        val, grad = batcher.request(row, z)
        if not (np.isfinite(val) and np.all(np.isfinite(grad))):
            # a line search that steps into a non-finite region backtracks
            return _PENALTY, np.zeros(D)
        if val > best_v[row]:
            best_v[row] = val
            best_x[row] = z
        return -val, -grad

    def worker(row):
        try:
            minimize(fun, inits[row], args=(row,), jac=True, method="L-BFGS-B", bounds=box, options=options)
        except _Aborted:
            pass
        finally:
            batcher.finish()

    threads = [threading.Thread(target=worker, args=(int(row),), daemon=True) for row in rows]
    for t in threads:
        t.start()
    try:
        batcher.serve()
    finally:
        batcher.abort()
        for t in threads:
            t.join()
    n_evals = batcher.rounds
    i = int(np.argmax(best_v))
    return BoxResult(best_x[i].copy(), float(best_v[i]), best_x, best_v, initial, n_evals)


def optimize_box(objective, gradient, inits, config: OptimizerConfig = OptimizerConfig(), bounds=None):
    """Best ``(vars, value)`` over all restarts; see :func:`run_restarts`."""
    res = run_restarts(objective, gradient, inits, config, bounds)
    return res.x, res.value


# Warm starts ------------------------------------------------------------------------


@dataclass
class WarmStartState:
    """What the previous BO iteration leaves for the next one.

    Attributes:
        layout: layout of the previous solution.
        solution: flat previous solution tree.
        fantasy_values: ``(m_1,)`` level-1 fantasy outcomes at the previous root,
            in the same units as ``observed``.
        observed: value actually observed at the previous root.
    """

    layout: TreeLayout
    solution: np.ndarray
    fantasy_values: np.ndarray
    observed: float

    def nearest_branch(self) -> int:
        # argmin breaks ties towards the lowest index
        return int(np.argmin(np.abs(np.asarray(self.fantasy_values) - self.observed)))


def _resize(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Cyclically index the leading axes of ``arr`` to the target leading shape."""
    for axis, n in enumerate(shape):
        arr = np.take(arr, np.arange(n) % arr.shape[axis], axis=axis)
    return arr


def promote_subtree(state: WarmStartState, layout: TreeLayout, rng: np.random.Generator):
    """Levels of a new init built from the branch nearest to the observation.

    The chosen level-1 branch supplies the levels below the old root; the
    vacated deepest level is filled with uniform draws.  Returns ``None`` if
    the layouts are incompatible.
    """
    old = state.layout
    if old.kind != layout.kind or old.dim != layout.dim or layout.kind == "batch":
        return None
    if old.horizon < 2 or layout.horizon < 2:
        return None
    j = state.nearest_branch()
    if j >= old.fantasy_counts[0]:
        return None
    old_levels = TreeVariables(old, state.solution).levels()
    shapes = layout.level_shapes()
    d = layout.dim
    if layout.kind == "eno":
        batch = old_levels[1][j]  # (k_old - 1, d)
        root = batch[:1]
        m1, q, _ = shapes[1]
        rest = _resize(batch[1:], (q - 1,)) if q > 1 and len(batch) > 1 else np.empty((0, d))
        fill = rng.uniform(size=(m1, q - rest.shape[0], d))
        new_batches = np.concatenate([np.broadcast_to(rest, (m1,) + rest.shape), fill], axis=1)
        return [root, new_batches]
    levels = []
    for t, shape in enumerate(shapes):
        src = t + 1
        if src < old.horizon:
            sub = old_levels[src][j]  # (m_2..m_src old, 1, d)
            levels.append(_resize(sub, shape[:-2]))
        else:
            levels.append(rng.uniform(size=shape))
    return levels


def perturb(promoted: np.ndarray, gammas, etas, betas, uniforms) -> np.ndarray:
    """``x^r = (1 - g_r)((1 - eta) x* + eta beta^r) + g_r u^r`` row by row.

    Args:
        promoted: ``(D,)`` flat promoted tree.
        gammas: ``(N,)`` breadth weights.
        etas: ``(D,)`` depth weights (constant within a level).
        betas, uniforms: ``(N, D)`` perturbation draws.
    """
    g = np.asarray(gammas, dtype=np.float64)[:, None]
    eta = np.asarray(etas, dtype=np.float64)[None, :]
    return (1.0 - g) * ((1.0 - eta) * promoted[None, :] + eta * betas) + g * uniforms


def default_gammas(n: int) -> np.ndarray:
    return np.linspace(0.0, 0.9, n) if n > 1 else np.zeros(n)


def default_etas(layout: TreeLayout) -> np.ndarray:
    """Per-coordinate depth weights: ``0.5 * level / k`` for level ``0..k-1``."""
    k = layout.horizon if layout.kind == "tree" else 2
    return np.concatenate(
        [np.full(int(np.prod(s)), 0.5 * i / k) for i, s in enumerate(layout.level_shapes())]
    )


def warm_start_init(
    state: WarmStartState,
    n: int,
    layout: TreeLayout,
    seed: int = 0,
    gammas=None,
    etas=None,
    betas=None,
    uniforms=None,
):
    """``n`` perturbed copies of the promoted previous sub-tree.

    Returns:
        ``(inits, fell_back)``: a list of ``TreeVariables`` and whether the
        layouts were incompatible, in which case the inits are fresh uniform.
    """
    rng = np.random.default_rng(seed)
    D = layout.n_variables
    promoted = promote_subtree(state, layout, rng) if state is not None else None
    if promoted is None:
        log.info("warm start incompatible with layout; using fresh uniform inits")
        return [TreeVariables(layout, rng.uniform(size=D)) for _ in range(n)], True
    base = TreeVariables.from_levels(layout, promoted).flat
    gammas = default_gammas(n) if gammas is None else gammas
    etas = default_etas(layout) if etas is None else etas
    betas = rng.beta(1.0, 3.0, size=(n, D)) if betas is None else betas
    uniforms = rng.uniform(size=(n, D)) if uniforms is None else uniforms
    rows = np.clip(perturb(base, gammas, etas, betas, uniforms), 0.0, 1.0)
    return [TreeVariables(layout, r) for r in rows], False


# Acquisition optimization -------------------------------------------------------------


def maximize_layout(
    model,
    layout: TreeLayout,
    samples: BaseSampleTree,
    incumbent,
    config: OptimizerConfig,
    rng: np.random.Generator,
    warm_inits=(),
) -> tuple[np.ndarray, float, BoxResult]:
    """Jointly optimize all decision variables of ``layout`` from several restarts."""
    inc = torch.tensor(float(incumbent), dtype=DTYPE)

    def acq(t):
        return stage_values(model, layout, t, samples, inc).sum(-1)

    warm = [np.asarray(getattr(w, "flat", w), dtype=np.float64) for w in warm_inits][: config.restarts]
    n_fresh = config.restarts - len(warm)
    D = layout.n_variables
    fresh = np.empty((0, D))
    if n_fresh > 0:
        if config.raw_samples > n_fresh:
            raw = rng.uniform(size=(config.raw_samples, D))
            with torch.no_grad():
                # chunked so that deep trees do not materialize every fantasy at once
                vals = np.concatenate(
                    [acq(torch.from_numpy(raw[i : i + _SCREEN_CHUNK])).numpy() for i in range(0, len(raw), _SCREEN_CHUNK)]
                )
            vals = np.where(np.isfinite(vals), vals, -np.inf)
            order = np.argsort(-vals, kind="stable")[:n_fresh]
            fresh = raw[order]
        else:
            fresh = rng.uniform(size=(n_fresh, D))
    inits = np.vstack([np.array(warm).reshape(-1, D), fresh])
    res = run_restarts(batched_value_and_grad(acq), None, inits, config)
    return res.x, res.value, res


@dataclass(frozen=True)
class PolicyConfig:
    """Acquisition policy for :func:`propose_next`.

    ``kind`` is one of ``"ei"``, ``"tree"`` (k-step and k-path), ``"eno"`` or
    ``"binoculars"``.
    """

    kind: str = "ei"
    horizon: int = 1
    fantasy_counts: tuple[int, ...] = ()
    mode: str = "gh"
    q: int = 12
    n_mc: int = 128
    warm_start: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    name: str = "ei"

    def layout(self, dim: int) -> TreeLayout:
        if self.kind in ("ei", "tree"):
            return TreeLayout.tree(self.horizon, self.fantasy_counts, dim)
        if self.kind == "eno":
            return TreeLayout.eno(self.horizon, self.fantasy_counts[0], dim)
        if self.kind == "binoculars":
            return TreeLayout.batch(self.q, dim)
        raise ValueError(f"unknown policy kind {self.kind!r}")


def parse_policy(spec: str, fantasy_counts=None, optimizer: OptimizerConfig | None = None) -> PolicyConfig:
    """Parse ``ei``, ``k-step``, ``k-path``, ``k-eno`` or ``binoculars-q``."""
    spec = spec.strip().lower()
    optimizer = optimizer or OptimizerConfig()
    counts = None if fantasy_counts is None else tuple(int(m) for m in fantasy_counts)
    if spec == "ei":
        if counts:
            raise ValueError("EI takes no fantasy counts")
        return PolicyConfig("ei", 1, (), optimizer=optimizer, name="ei")
    head, _, tail = spec.partition("-")
    if head == "binoculars":
        if not tail.isdigit() or int(tail) < 1:
            raise ValueError(f"bad batch size in policy {spec!r}")
        return PolicyConfig("binoculars", 1, (), mode="mc", q=int(tail), optimizer=optimizer, name=spec)
    if not head.isdigit() or tail not in ("step", "path", "eno"):
        raise ValueError(f"unknown policy {spec!r}")
    k = int(head)
    if tail == "step":
        if k not in (2, 3, 4) and counts is None:
            raise ValueError("k-step policies use k in {2, 3, 4} unless counts are given")
        m = counts if counts is not None else DEFAULT_FANTASY_COUNTS[: k - 1]
        if len(m) != k - 1:
            raise ValueError(f"{spec} needs {k - 1} fantasy counts, got {len(m)}")
        return PolicyConfig("tree", k, tuple(m), optimizer=optimizer, name=spec)
    if k < 2:
        raise ValueError(f"{spec} needs k >= 2")
    if tail == "path":
        m = counts if counts is not None else (1,) * (k - 1)
        if len(m) != k - 1 or any(c != 1 for c in m):
            raise ValueError(f"{spec} uses one fantasy per stage")
        return PolicyConfig("tree", k, tuple(m), optimizer=optimizer, name=spec)
    m = counts if counts is not None else DEFAULT_FANTASY_COUNTS[:1]
    if len(m) != 1:
        raise ValueError(f"{spec} takes a single level-1 fantasy count")
    return PolicyConfig("eno", k, tuple(m), optimizer=optimizer, name=spec)


def _level1_fantasies(model, layout: TreeLayout, flat: np.ndarray, samples: BaseSampleTree) -> np.ndarray | None:
    if layout.kind == "batch" or not layout.fantasy_counts:
        return None
    root = torch.from_numpy(flat[: layout.dim]).reshape(1, layout.dim)
    with torch.no_grad():
        post = model.posterior(root, observation_noise=True)
        Z, _ = samples.level_tensors(0)
        return correlate(post, Z)[:, 0].numpy()


def propose_next(model, incumbent: float, policy: PolicyConfig, warm_state: WarmStartState | None = None, seed: int = 0):
    """Next point to evaluate under ``policy`` plus diagnostics.

    Diagnostics carry the objective value, per-restart values, wall time and
    what is needed to warm-start the following iteration.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    if policy.kind == "binoculars":
        point, info = binoculars_select(model, incumbent, policy.q, int(rng.integers(2**31)), policy.optimizer)
        info.update(wall_time=time.perf_counter() - t0, n_warm=0, warm_fallback=False)
        return point, info
    layout = policy.layout(model.dim)
    samples = draw_base_samples(layout, policy.mode, seed=int(rng.integers(2**31)), n_mc=policy.n_mc)
    warm, fell_back = [], False
    cfg = policy.optimizer
    if policy.warm_start and warm_state is not None and layout.horizon > 1:
        n_warm = min(cfg.warm_restarts, cfg.restarts)
        warm, fell_back = warm_start_init(warm_state, n_warm, layout, seed=int(rng.integers(2**31)))
        if fell_back:
            warm = []
    best, value, res = maximize_layout(model, layout, samples, incumbent, cfg, rng, warm)
    vars = TreeVariables(layout, best)
    point = extract_candidate(vars)
    return point, {
        "value": value,
        "restart_values": res.restart_values,
        "initial_values": res.initial_values,
        "wall_time": time.perf_counter() - t0,
        "layout": layout,
        "solution": best,
        "fantasy_values": _level1_fantasies(model, layout, best, samples),
        "n_warm": len(warm),
        "warm_fallback": fell_back,
    }


__all__ = [
    "BoxResult",
    "OptimizationError",
    "OptimizerConfig",
    "PolicyConfig",
    "WarmStartState",
    "batched_value_and_grad",
    "default_etas",
    "default_gammas",
    "gradient",
    "maximize_layout",
    "optimize_box",
    "parse_policy",
    "perturb",
    "promote_subtree",
    "propose_next",
    "run_restarts",
    "warm_start_init",
]
