"""Fast fantasies: incremental updates of the root cache and batched fantasy models.

Adding ``q`` points to a model whose noisy kernel matrix factors as ``R R^T``
only needs the blocks of

    [[R,   0  ],       [[R^{-1},                      0       ],
     [L12, L22]]  and   [-L22^{-1} L12 R^{-1},   L22^{-1}]]

with ``L12^T = R^{-1} U`` and ``L22 L22^T = S - L12 L12^T``.  The parent cache is
never copied; a fantasy model keeps a reference to it and stores one small
``P`` block per fantasize step, shared by all sibling fantasy branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import torch
from torch import Tensor

from .gp import DTYPE, GpModel, Posterior, as_tensor, root_decompose, triangular_inverse


@dataclass
class CacheUpdateBlocks:
    """Blocks produced by adding ``q`` rows/columns to a rank-``r`` cache.

    ``P`` acts on ``[R^{-1} v_old; v_new]`` (rank space), so its width is
    ``r + q`` regardless of the number of training points.
    """

    L12: Tensor
    L22: Tensor
    L22_inv: Tensor
    P: Tensor

    def pinv_rows(self, root_pinv: Tensor) -> Tensor:
        """Dense ``[-L22^{-1} L12 R^{-1} | L22^{-1}]`` against the original rows."""
        left = -self.L22_inv @ self.L12 @ root_pinv
        return torch.cat([left, self.L22_inv], dim=-1)


def _blocks_from_projection(L12: Tensor, S: Tensor) -> CacheUpdateBlocks:
    schur = S - L12 @ L12.transpose(-1, -2)
    schur = 0.5 * (schur + schur.transpose(-1, -2))
    L22 = root_decompose(schur)
    L22_inv = triangular_inverse(L22)
    P = torch.cat([-L22_inv @ L12, L22_inv], dim=-1)
    return CacheUpdateBlocks(L12, L22, L22_inv, P)


def update_root_cache(root, root_pinv, U, S) -> CacheUpdateBlocks:
    """Blocks of the rank-``r + q`` cache after appending ``q`` points.

    Args:
        root: ``n x r`` root of the current noisy kernel matrix (only its shape
            is needed; the update works through ``root_pinv``).
        root_pinv: ``r x n`` cached (pseudo)inverse.
        U: ``n x q`` cross-covariance between old and new points.
        S: ``q x q`` noisy covariance of the new points.

    Raises:
        NotPSDError: if ``S - L12 L12^T`` is indefinite beyond jitter.
    """
    root_pinv, U, S = as_tensor(root_pinv), as_tensor(U), as_tensor(S)
    if root is not None and as_tensor(root).shape[-2] != U.shape[-2]:
        raise ValueError("root and U disagree on the number of training points")
    L12 = (root_pinv @ U).transpose(-1, -2)
    return _blocks_from_projection(L12, S)


def augmented_root(root, blocks: CacheUpdateBlocks) -> Tensor:
    root = as_tensor(root)
    n, r = root.shape
    q = blocks.L22.shape[-1]
    top = torch.cat([root, torch.zeros(n, q, dtype=DTYPE)], dim=1)
    bottom = torch.cat([blocks.L12, blocks.L22], dim=1)
    return torch.cat([top, bottom], dim=0)


def augmented_pinv(root_pinv, blocks: CacheUpdateBlocks) -> Tensor:
    root_pinv = as_tensor(root_pinv)
    r, n = root_pinv.shape
    q = blocks.L22.shape[-1]
    top = torch.cat([root_pinv, torch.zeros(r, q, dtype=DTYPE)], dim=1)
    return torch.cat([top, blocks.pinv_rows(root_pinv)], dim=0)


def _align(t: Tensor, depth: int, core: int) -> Tensor:
    """Insert singleton batch dims after the tensor's own (prefix) batch dims."""
    nb = t.dim() - core
    missing = depth - nb
    if missing <= 0:
        return t
    return t.reshape(t.shape[:nb] + (1,) * missing + t.shape[nb:])


def _bcat(a: Tensor, b: Tensor) -> Tensor:
    batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    return torch.cat(
        [a.expand(batch + a.shape[-2:]), b.expand(batch + b.shape[-2:])], dim=-2
    )


@dataclass
class _Level:
    x: Tensor  # (B..., q, d)
    y: Tensor  # (B..., m, q)
    blocks: CacheUpdateBlocks  # batch B


class FantasyModel:
    """A batched GP conditioned on fantasized outcomes.

    Each fantasize step appends one batch dimension (root-to-leaf order).  The
    model shares the base ``root_pinv`` with its ancestors and adds a single
    update block per step, so siblings that differ only in their outcomes do
    not duplicate any cache.
    """

    def __init__(self, parent, base: GpModel, levels: list[_Level], weights: Tensor, batch_shape):
        self.parent = parent
        self.base = base
        self.levels = levels
        self._weights = weights  # (batch..., r_total, 1)
        self.batch_shape = torch.Size(batch_shape)

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def noise_variance(self) -> float:
        return self.base.noise_variance

    @property
    def update_blocks(self) -> CacheUpdateBlocks:
        return self.levels[-1].blocks

    @property
    def fantasy_inputs(self) -> Tensor:
        return self.levels[-1].x

    @property
    def fantasy_outcomes(self) -> Tensor:
        return self.levels[-1].y

    def kernel(self, x1: Tensor, x2: Tensor) -> Tensor:
        return self.base.kernel(x1, x2)

    def project(self, points: Tensor) -> Tensor:
        depth = len(self.batch_shape)
        proj = self.base.project(points)
        for level in self.levels:
            kv = self.kernel(_align(level.x, depth, 2), points)
            new = _align(level.blocks.P, depth, 2) @ _bcat(proj, kv)
            proj = _bcat(proj, new)
        return proj

    def projected_weights(self) -> Tensor:
        return self._weights

    def posterior(self, points, observation_noise: bool = False) -> Posterior:
        points = as_tensor(points)
        proj = self.project(points)
        pt = proj.transpose(-1, -2)
        mean = self.base.hyperparams.mean_constant + (pt @ self._weights)[..., 0]
        cov = self.kernel(points, points) - pt @ proj
        if observation_noise:
            cov = cov + self.noise_variance * torch.eye(points.shape[-2], dtype=DTYPE)
        # the covariance does not depend on the outcomes; expanding is a view
        batch = torch.broadcast_shapes(mean.shape[:-1], cov.shape[:-2])
        return Posterior(mean.expand(batch + mean.shape[-1:]), cov.expand(batch + cov.shape[-2:]))

    def stored_entries(self) -> int:
        """Cache entries held by this model: base inverse plus one block per step."""
        return self.base.stored_entries() + sum(lv.blocks.P.numel() for lv in self.levels)

    def path_data(self, index: Sequence[int]) -> tuple[Tensor, Tensor]:
        """Fantasy inputs and outcomes along one leaf path (excluding real data)."""
        if len(index) != len(self.batch_shape):
            raise ValueError("index must address every batch dimension")
        xs, ys = [], []
        for t, level in enumerate(self.levels):
            nb = level.x.dim() - 2
            xs.append(level.x[tuple(index[:nb])])
            ys.append(level.y[tuple(index[: nb + 1])])
        return torch.cat(xs, 0), torch.cat(ys, 0)


def _model_weights(model) -> Tensor:
    w = model.projected_weights()
    return w[:, None] if w.dim() == 1 else w


def fantasize(model, locations, outcomes) -> FantasyModel:
    """Condition ``model`` on fantasized outcomes at ``locations``.

    Args:
        model: a ``GpModel`` or ``FantasyModel`` with batch shape ``B``.
        locations: ``(B..., q, d)`` points, one set per existing branch.
        outcomes: ``(B..., m, q)`` outcomes; ``m`` becomes the new trailing
            batch dimension.

    Returns:
        A ``FantasyModel`` of batch shape ``B + (m,)``.
    """
    x = as_tensor(locations)
    y = as_tensor(outcomes)
    if x.dim() < 2 or x.shape[-1] != model.dim:
        raise ValueError(f"locations must be (..., q, {model.dim}), got {tuple(x.shape)}")
    batch = torch.broadcast_shapes(model.batch_shape, x.shape[:-2])
    q = x.shape[-2]
    if y.dim() < 2 or y.shape[:-2] != batch or y.shape[-1] != q:
        raise ValueError(
            f"outcomes shape {tuple(y.shape)} incompatible with batch {tuple(batch)} and q={q}"
        )
    x = x.expand(batch + x.shape[-2:])
    proj = model.project(x)  # (B..., r_prev, q)
    s = model.kernel(x, x) + model.noise_variance * torch.eye(q, dtype=DTYPE)
    blocks = _blocks_from_projection(proj.transpose(-1, -2), s)

    depth = len(batch) + 1
    base = model if isinstance(model, GpModel) else model.base
    w_prev = _align(_model_weights(model), depth, 2)
    resid = (y - base.hyperparams.mean_constant).unsqueeze(-1)  # (B..., m, q, 1)
    w_new = _align(blocks.P, depth, 2) @ _bcat(w_prev, resid)
    weights = _bcat(w_prev, w_new)

    levels = [] if isinstance(model, GpModel) else list(model.levels)
    levels.append(_Level(x, y, blocks))
    return FantasyModel(model, base, levels, weights, batch + (y.shape[-2],))


def _per_step(value, k: int, name: str) -> list[int]:
    if isinstance(value, int):
        return [value] * k
    value = list(value)
    if len(value) != k:
        raise ValueError(f"{name} must have {k} entries, got {len(value)}")
    return value


def cache_size_accounting(n: int, r: int, k: int, q, m) -> tuple[int, int]:
    """Entries stored by naive vs fast fantasies over ``k`` fantasize steps.

    ``q`` and ``m`` are ints or per-step sequences ``(q_0..q_{k-1})`` and
    ``(m_0..m_{k-1})``.  Returns ``(N_naive, N_FF)``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    qs = _per_step(q, k, "q")
    ms = _per_step(m, k, "m")
    if all(qt == 0 for qt in qs):
        return n * r, n * r
    naive = n * r
    fast = n * r
    for t in range(k):
        added = sum(qs[: t + 1])
        if qs[t]:
            naive += prod(ms[: t + 1]) * (n + added) * (r + added)
        fast += prod(ms[:t]) * qs[t] * (r + added)
    return naive, fast
