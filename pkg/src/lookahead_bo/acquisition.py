"""Acquisition values: analytic EI, MC batch improvement and one-shot lookahead trees.

A lookahead tree of horizon ``k`` has one decision point at the root and one
point per fantasy branch at every deeper level.  Evaluating it follows the
recursion value -> correlate -> fantasize -> recurse, where each node's stage
value is the analytic EI against the incumbent of its own path (real data plus
the fantasies along the path).  All functions are differentiable in the
decision variables with torch autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import prod

import numpy as np
import torch
from torch import Tensor

from .fantasy import fantasize
from .gp import DTYPE, Posterior, as_tensor
from .sampling import BaseSampleTree, correlate

STD_FLOOR = 1e-9
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class TreeLayout:
    """Shape of a one-shot problem.

    ``kind`` is ``"tree"`` (multi-step tree, paths are trees with ``m_t = 1``),
    ``"eno"`` (root point plus one batch of ``k - 1`` points per level-1
    fantasy) or ``"batch"`` (a single batch of ``q`` points, no fantasies).
    """

    horizon: int
    fantasy_counts: tuple[int, ...]
    dim: int
    kind: str = "tree"
    q: int = 1

    def __post_init__(self):
        object.__setattr__(self, "fantasy_counts", tuple(int(m) for m in self.fantasy_counts))
        if self.horizon < 1 or self.dim < 1:
            raise ValueError("horizon and dim must be positive")
        if any(m < 1 for m in self.fantasy_counts):
            raise ValueError("fantasy counts must be positive")
        if self.kind == "tree" and len(self.fantasy_counts) != self.horizon - 1:
            raise ValueError(
                f"a {self.horizon}-step tree needs {self.horizon - 1} fantasy counts, "
                f"got {len(self.fantasy_counts)}"
            )
        if self.kind == "eno" and (self.horizon < 2 or len(self.fantasy_counts) != 1):
            raise ValueError("ENO needs horizon >= 2 and exactly one fantasy count")
        if self.kind == "batch" and (self.fantasy_counts or self.q < 1):
            raise ValueError("batch layouts have no fantasies and q >= 1")
        if self.kind not in ("tree", "eno", "batch"):
            raise ValueError(f"unknown layout kind {self.kind!r}")

    @classmethod
    def tree(cls, horizon: int, fantasy_counts, dim: int) -> "TreeLayout":
        return cls(horizon, tuple(fantasy_counts), dim, "tree")

    @classmethod
    def path(cls, horizon: int, dim: int) -> "TreeLayout":
        return cls(horizon, (1,) * (horizon - 1), dim, "tree")

    @classmethod
    def eno(cls, horizon: int, m1: int, dim: int) -> "TreeLayout":
        return cls(horizon, (m1,), dim, "eno")

    @classmethod
    def batch(cls, q: int, dim: int) -> "TreeLayout":
        return cls(1, (), dim, "batch", q)

    @property
    def batch_size(self) -> int:
        """Size of the MC-valued batch stage (0 for plain trees)."""
        if self.kind == "eno":
            return self.horizon - 1
        if self.kind == "batch":
            return self.q
        return 0

    def level_shapes(self) -> list[tuple[int, ...]]:
        d = self.dim
        if self.kind == "batch":
            return [(self.q, d)]
        if self.kind == "eno":
            return [(1, d), (self.fantasy_counts[0], self.horizon - 1, d)]
        return [tuple(self.fantasy_counts[:t]) + (1, d) for t in range(self.horizon)]

    @property
    def n_variables(self) -> int:
        return sum(prod(s) for s in self.level_shapes())

    def offsets(self) -> list[int]:
        out, acc = [], 0
        for s in self.level_shapes():
            out.append(acc)
            acc += prod(s)
        return out

    def split(self, flat: Tensor) -> list[Tensor]:
        """Split ``(..., n_variables)`` into per-level tensors ``(..., *shape)``."""
        lead = flat.shape[:-1]
        return [
            flat[..., o : o + prod(s)].reshape(lead + s)
            for o, s in zip(self.offsets(), self.level_shapes())
        ]

    def index_map(self) -> dict[tuple[int, ...], slice]:
        """Map each node path to the slice of its coordinates.

        Paths are ``(level, j_1, ..., j_{level})`` for trees; ENO batch points
        are ``(1, j_1, batch_index)``.
        """
        d = self.dim
        out = {}
        for level, (o, shape) in enumerate(zip(self.offsets(), self.level_shapes())):
            for i, idx in enumerate(np.ndindex(*shape[:-1])):
                if self.kind == "tree":
                    idx = idx[:-1]  # trailing q=1 axis
                out[(level,) + tuple(int(j) for j in idx)] = slice(o + i * d, o + (i + 1) * d)
        return out


@dataclass
class TreeVariables:
    """Flat decision vector of a one-shot problem plus its layout."""

    layout: TreeLayout
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64).reshape(-1)
        if self.flat.shape[0] != self.layout.n_variables:
            raise ValueError(
                f"expected {self.layout.n_variables} variables, got {self.flat.shape[0]}"
            )

    @property
    def x(self) -> np.ndarray:
        return self.flat[: self.layout.dim].copy()

    def levels(self) -> list[np.ndarray]:
        return [t.numpy() for t in self.layout.split(torch.from_numpy(self.flat))]

    def node(self, path: tuple[int, ...]) -> np.ndarray:
        return self.flat[self.layout.index_map()[path]]

    @classmethod
    def from_levels(cls, layout: TreeLayout, levels) -> "TreeVariables":
        parts = []
        for arr, shape in zip(levels, layout.level_shapes()):
            parts.append(np.broadcast_to(np.asarray(arr, dtype=np.float64), shape).reshape(-1))
        return cls(layout, np.concatenate(parts))

    @classmethod
    def tied(cls, layout: TreeLayout, points) -> "TreeVariables":
        """All nodes of level ``t`` set to ``points[t]``."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls.from_levels(layout, [p for p in points])

    @classmethod
    def uniform(cls, layout: TreeLayout, rng: np.random.Generator) -> "TreeVariables":
        return cls(layout, rng.uniform(size=layout.n_variables))


@dataclass
class AcquisitionValue:
    value: float
    stages: np.ndarray


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def ei_analytic(mean, std, incumbent):
    """Expected improvement ``E[(Y - b)^+]`` for ``Y ~ N(mean, std^2)``.

    ``std`` is floored at ``1e-9`` so the value and its gradient stay finite.
    Returns a tensor for tensor inputs and a float/array otherwise.
    """
    tensor_in = _is_tensor(mean, std, incumbent)
    mean, std, incumbent = as_tensor(mean), as_tensor(std), as_tensor(incumbent)
    sigma = torch.clamp(std, min=STD_FLOOR)
    u = (mean - incumbent) / sigma
    ei = sigma * (u * torch.special.ndtr(u) + _INV_SQRT_2PI * torch.exp(-0.5 * u * u))
    ei = torch.clamp(ei, min=0.0)
    if tensor_in:
        return ei
    return float(ei) if ei.dim() == 0 else ei.numpy()


def batch_improvement_mc(samples, incumbent, weights=None):
    """Sample average of ``(max_j y_ij - b)^+`` over the sample axis ``-2``.

    Args:
        samples: ``(..., m, q)`` outcome samples.
        incumbent: scalar or tensor broadcastable to ``(..., m)``.
        weights: optional ``(m,)`` quadrature weights (default ``1/m``).
    """
    tensor_in = _is_tensor(samples, incumbent)
    samples, incumbent = as_tensor(samples), as_tensor(incumbent)
    imp = torch.clamp(samples.max(dim=-1).values - incumbent, min=0.0)
    if weights is None:
        val = imp.mean(dim=-1)
    else:
        val = (imp * as_tensor(weights)).sum(dim=-1)
    if tensor_in:
        return val
    return float(val) if val.dim() == 0 else val.numpy()


def _std(post: Posterior) -> Tensor:
    var = torch.diagonal(post.covariance, dim1=-2, dim2=-1)
    return torch.sqrt(torch.clamp(var, min=STD_FLOOR**2))


def _with_noise(post: Posterior, noise: float) -> Posterior:
    q = post.covariance.shape[-1]
    return Posterior(post.mean, post.covariance + noise * torch.eye(q, dtype=DTYPE))


def tree_stage_values(model, layout: TreeLayout, levels: list[Tensor], samples: BaseSampleTree, incumbent) -> Tensor:
    """Weighted stage contributions ``(..., k)`` of a multi-step tree.

    ``levels[t]`` has shape ``(..., m_1, ..., m_t, 1, d)``; leading dims batch
    independent problems (e.g. optimizer restarts).
    """
    b = as_tensor(incumbent)
    weight = torch.ones((), dtype=DTYPE)
    stages = []
    m = model
    for t in range(layout.horizon):
        X = levels[t]
        post = m.posterior(X)
        ei = ei_analytic(post.mean[..., 0], _std(post)[..., 0], b)
        stage = ei * weight
        if t:
            stage = stage.sum(dim=tuple(range(-t, 0)))
        stages.append(stage)
        if t == layout.horizon - 1:
            break
        Z, w = samples.level_tensors(t)
        y = correlate(_with_noise(post, m.noise_variance), Z)  # (..., m_{t+1}, 1)
        m = fantasize(m, X, y)
        b = torch.maximum(b.unsqueeze(-1), y[..., 0])
        weight = weight.unsqueeze(-1) * w
    return torch.stack(stages, dim=-1)


def eno_stage_values(model, layout: TreeLayout, levels: list[Tensor], samples: BaseSampleTree, incumbent) -> Tensor:
    """``(..., 2)``: root EI and the weighted fantasy-conditioned q-EI of the batches."""
    b = as_tensor(incumbent)
    X1, XB = levels
    post = model.posterior(X1)
    stage1 = ei_analytic(post.mean[..., 0], _std(post)[..., 0], b)
    Z, w = samples.level_tensors(0)
    y = correlate(_with_noise(post, model.noise_variance), Z)  # (..., m1, 1)
    fm = fantasize(model, X1, y)
    b1 = torch.maximum(b.unsqueeze(-1), y[..., 0])  # (..., m1)
    post_b = fm.posterior(XB)  # mean (..., m1, q)
    draws = correlate(post_b, samples.batch_tensor())  # (..., m1, S, q)
    inner = batch_improvement_mc(draws, b1.unsqueeze(-1))  # (..., m1)
    return torch.stack([stage1, (inner * w).sum(-1)], dim=-1)


def batch_stage_values(model, layout: TreeLayout, levels: list[Tensor], samples: BaseSampleTree, incumbent) -> Tensor:
    post = model.posterior(levels[0])
    draws = correlate(post, samples.batch_tensor())
    return batch_improvement_mc(draws, as_tensor(incumbent)).unsqueeze(-1)


_STAGE_FNS = {"tree": tree_stage_values, "eno": eno_stage_values, "batch": batch_stage_values}


def stage_values(model, layout: TreeLayout, flat: Tensor, samples: BaseSampleTree, incumbent) -> Tensor:
    """Stage contributions for a (batched) flat decision tensor ``(..., n_variables)``."""
    return _STAGE_FNS[layout.kind](model, layout, layout.split(flat), samples, incumbent)


def _check(layout: TreeLayout, vars: TreeVariables, samples: BaseSampleTree):
    if vars.layout != layout:
        raise ValueError("decision variables were built for a different layout")
    if len(samples.nodes) != len(layout.fantasy_counts) or any(
        len(z) != m for z, m in zip(samples.nodes, layout.fantasy_counts)
    ):
        raise ValueError("base samples do not match the layout's fantasy counts")


def _default_incumbent(model, incumbent):
    if incumbent is None:
        return model.dataset.incumbent()
    return incumbent


def multi_step_objective(
    model, layout: TreeLayout, vars: TreeVariables, samples: BaseSampleTree, incumbent=None
) -> AcquisitionValue:
    """One-shot multi-step tree value at fixed base samples.

    The value is the sum of the ``k`` weighted stage contributions; with
    ``k = 1`` it is plain EI at the root.  ``incumbent`` defaults to the best
    observed outcome of the model's data.
    """
    incumbent = _default_incumbent(model, incumbent)
    if layout.kind != "tree":
        raise ValueError("multi_step_objective needs a tree layout")
    _check(layout, vars, samples)
    with torch.no_grad():
        st = stage_values(model, layout, torch.from_numpy(vars.flat), samples, incumbent)
    stages = st.numpy()
    return AcquisitionValue(float(st.sum()), stages)


def eno_objective(model, x, batches, samples: BaseSampleTree, incumbent=None) -> float:
    """Root EI plus the average q-EI of one batch per level-1 fantasy.

    Args:
        x: ``(d,)`` root point.
        batches: ``(m_1, k - 1, d)`` one batch per fantasy.
        samples: level-1 base samples and ``(S, k - 1)`` inner MC samples.
    """
    incumbent = _default_incumbent(model, incumbent)
    batches = np.asarray(batches, dtype=np.float64)
    if batches.ndim != 3:
        raise ValueError("batches must have shape (m1, k - 1, d)")
    m1, q, d = batches.shape
    layout = TreeLayout.eno(q + 1, m1, d)
    if samples.batch_samples is None or samples.batch_samples.shape[1] != q:
        raise ValueError("inner MC samples must have one column per batch point")
    vars = TreeVariables.from_levels(layout, [np.asarray(x, dtype=np.float64)[None], batches])
    _check(layout, vars, samples)
    with torch.no_grad():
        st = stage_values(model, layout, torch.from_numpy(vars.flat), samples, incumbent)
    return float(st.sum())


def extract_candidate(vars: TreeVariables) -> np.ndarray:
    """Root decision of a one-shot solution."""
    return vars.x


def selection_probabilities(ei_values) -> np.ndarray:
    """Normalize individual EI values; uniform when all are zero."""
    ei = np.clip(np.asarray(ei_values, dtype=np.float64), 0.0, None)
    total = ei.sum()
    if not total > 0:
        return np.full(ei.shape, 1.0 / ei.size)
    return ei / total


def binoculars_select(model, incumbent: float, q: int, seed: int = 0, config=None):
    """Maximize q-EI over a ``q``-point batch, then sample one member by its EI.

    Returns:
        ``(point, info)`` where ``info`` holds the batch, individual EI values
        and selection probabilities.
    """
    from .optimize import OptimizerConfig, maximize_layout
    from .sampling import draw_base_samples

    if q < 1:
        raise ValueError("q must be at least 1")
    config = config or OptimizerConfig()
    layout = TreeLayout.batch(q, model.dim)
    rng = np.random.default_rng(seed)
    samples = draw_base_samples(layout, "mc", seed=int(rng.integers(2**31)))
    best, value, _ = maximize_layout(model, layout, samples, incumbent, config, rng)
    batch = best.reshape(q, model.dim)
    with torch.no_grad():
        post = model.posterior(torch.from_numpy(batch)[:, None, :])
        ei = ei_analytic(post.mean[:, 0], _std(post)[:, 0], as_tensor(incumbent)).numpy()
    probs = selection_probabilities(ei)
    choice = int(rng.choice(q, p=probs))
    return batch[choice].copy(), {"batch": batch, "ei": ei, "probabilities": probs, "value": value}
