"""Base samples (Gauss-Hermite or Monte Carlo) and the reparameterized sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from numpy.polynomial.hermite_e import hermegauss
from torch import Tensor

from .gp import Posterior, as_tensor, root_decompose

MAX_GH_NODES = 64
DEFAULT_MC_SAMPLES = 128


def gauss_hermite_rule(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights with ``E[g(Z)] ~ sum_i w_i g(z_i)`` for ``Z ~ N(0, 1)``.

    Weights are normalized to sum to one; nodes are sorted ascending.
    """
    if m < 1:
        raise ValueError("need at least one node")
    if m > MAX_GH_NODES:
        raise ValueError(f"at most {MAX_GH_NODES} nodes are supported, got {m}")
    nodes, weights = hermegauss(m)
    weights = weights / weights.sum()
    # the rule is symmetric; enforce it exactly
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights


@dataclass(frozen=True)
class BaseSampleTree:
    """Standard-normal coordinates for every fantasy level, plus inner MC samples.

    Attributes:
        mode: ``"gh"`` or ``"mc"``.
        nodes: per level ``t`` a vector of ``m_t`` base samples.
        weights: per level quadrature weights (uniform ``1/m_t`` for MC).
        batch_samples: ``(S, q)`` MC base samples for batch (q-EI) stage values,
            or ``None`` when the layout has no batch stage.
        seed: seed used for the MC draws.
    """

    mode: str
    nodes: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]
    batch_samples: np.ndarray | None = None
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def level_tensors(self, t: int) -> tuple[Tensor, Tensor]:
        """``(Z_t as (m_t, 1), w_t)`` tensors for level ``t`` (0-based)."""
        key = ("level", t)
        if key not in self._cache:
            self._cache[key] = (as_tensor(self.nodes[t])[:, None], as_tensor(self.weights[t]))
        return self._cache[key]

    def batch_tensor(self) -> Tensor:
        if self.batch_samples is None:
            raise ValueError("no batch base samples were drawn for this layout")
        if "batch" not in self._cache:
            self._cache["batch"] = as_tensor(self.batch_samples)
        return self._cache["batch"]


def draw_base_samples(layout, mode: str = "gh", seed: int = 0, n_mc: int = DEFAULT_MC_SAMPLES) -> BaseSampleTree:
    """Base samples for every fantasy level of ``layout``.

    GH mode is deterministic (``seed`` only affects inner batch samples); with
    ``m_t = 1`` it yields the single node ``0``, i.e. the posterior mean.
    """
    mode = mode.lower()
    if mode not in ("gh", "mc"):
        raise ValueError(f"unknown base-sample mode {mode!r}")
    rng = np.random.default_rng(seed)
    nodes, weights = [], []
    for m in layout.fantasy_counts:
        if m < 1:
            raise ValueError("fantasy counts must be positive")
        if mode == "gh":
            z, w = gauss_hermite_rule(m)
        else:
            z, w = rng.standard_normal(m), np.full(m, 1.0 / m)
        nodes.append(z)
        weights.append(w)
    batch = None
    q = getattr(layout, "batch_size", 0)
    if q:
        batch = rng.standard_normal((n_mc, q))
    return BaseSampleTree(mode, tuple(nodes), tuple(weights), batch, seed)


def correlate(post: Posterior, Z) -> Tensor:
    """Map base samples to outcomes: ``mu + L z`` for each row ``z`` of ``Z``.

    Args:
        post: posterior with mean ``(..., q)`` and covariance ``(..., q, q)``.
        Z: ``(m, q)`` standard-normal coordinates.

    Returns:
        ``(..., m, q)`` samples; the sample axis is appended after the batch axes.
    """
    Z = as_tensor(Z)
    q = post.mean.shape[-1]
    if Z.shape[-1] != q:
        raise ValueError(f"base samples have {Z.shape[-1]} columns, posterior has {q}")
    if q == 1:
        root = torch.sqrt(torch.clamp(post.covariance, min=0.0))
    else:
        root = root_decompose(post.covariance)
    return post.mean.unsqueeze(-2) + Z @ root.transpose(-1, -2)

