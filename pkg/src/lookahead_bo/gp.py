"""Gaussian-process surrogate with a cached root decomposition.

The model keeps ``R`` with ``R R^T = K_XX + sigma^2 I`` and its (pseudo)inverse
``R^{-1}`` so that posterior queries reduce to one matrix product against the
cached inverse.  All numerics run in float64 torch so that acquisition values
built on top of the posterior can be differentiated with autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

DTYPE = torch.float64

#: Bounds in normalized units (inputs in [0, 1]^d, standardized outcomes).
LENGTHSCALE_BOUNDS = (1e-2, 1e1)
SIGNAL_VARIANCE_BOUNDS = (1e-3, 1e3)
NOISE_VARIANCE_BOUNDS = (1e-6, 1e-1)

JITTER_SCALE = 1e-6
JITTER_ESCALATIONS = 3


class NotPSDError(np.linalg.LinAlgError):
    """Raised when a matrix cannot be decomposed even after jitter escalation."""


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.writeable:  # broadcast views; torch wants writable memory
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=DTYPE)


@dataclass(frozen=True)
class Dataset:
    """Observations ``(x_i, y_i)`` with inputs in the unit box."""

    inputs: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.outcomes, dtype=np.float64).reshape(-1)
        if x.size == 0:
            x = x.reshape(0, x.shape[-1] if x.ndim == 2 else 0)
        if x.shape[0] != y.shape[0]:
            raise ValueError(
                f"inputs and outcomes differ in length: {x.shape[0]} != {y.shape[0]}"
            )
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("inputs must lie in the unit box [0, 1]^d")
        if not np.all(np.isfinite(y)):
            raise ValueError("outcomes must be finite")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outcomes", y)

    @classmethod
    def empty(cls, dim: int) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def incumbent(self) -> float:
        """Best observed outcome, ``-inf`` for an empty dataset."""
        return float(self.outcomes.max()) if self.n else -math.inf

    def append(self, x, y) -> "Dataset":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return Dataset(
            np.vstack([self.inputs, x]),
            np.concatenate([self.outcomes, np.atleast_1d(np.asarray(y, dtype=np.float64))]),
        )


@dataclass(frozen=True)
class KernelHyperparams:
    """Matern-5/2 ARD hyperparameters plus constant mean and homoskedastic noise."""

    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float
    mean_constant: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive and finite")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if not self.noise_variance >= 0:
            raise ValueError("noise_variance must be non-negative")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        object.__setattr__(self, "mean_constant", float(self.mean_constant))

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    def to_unconstrained(self) -> np.ndarray:
        """Pack as ``[log ls_1..log ls_d, log sf2, log sn2, c]``."""
        return np.concatenate(
            [
                np.log(self.lengthscales),
                [math.log(self.signal_variance), math.log(self.noise_variance), self.mean_constant],
            ]
        )

    @classmethod
    def from_unconstrained(cls, theta) -> "KernelHyperparams":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(np.exp(theta[:-3]), math.exp(theta[-3]), math.exp(theta[-2]), theta[-1])


def matern52(x1: Tensor, x2: Tensor, lengthscales: Tensor, signal_variance) -> Tensor:
    """Batched Matern-5/2 kernel matrix between ``(..., n, d)`` and ``(..., m, d)``."""
    diff = (x1.unsqueeze(-2) - x2.unsqueeze(-3)) / lengthscales.unsqueeze(-2).unsqueeze(-2)
    r2 = (diff * diff).sum(-1)
    # clamp keeps autograd finite at zero distance, where dk/dr = 0 anyway
    r = torch.sqrt(torch.clamp(r2, min=1e-30))
    s5r = math.sqrt(5.0) * r
    return signal_variance * (1.0 + s5r + 5.0 / 3.0 * r2) * torch.exp(-s5r)


def kernel_eval(x1, x2, hp: KernelHyperparams) -> float:
    x1 = np.atleast_1d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    if x1.shape != (hp.dim,) or x2.shape != (hp.dim,):
        raise ValueError(
            f"points of shape {x1.shape} and {x2.shape} do not match {hp.dim} lengthscales"
        )
    k = matern52(
        as_tensor(x1[None]), as_tensor(x2[None]), as_tensor(hp.lengthscales), hp.signal_variance
    )
    return float(k[0, 0])


def kernel_matrix(x1, x2, hp: KernelHyperparams) -> Tensor:
    return matern52(as_tensor(x1), as_tensor(x2), as_tensor(hp.lengthscales), hp.signal_variance)


def root_decompose(m, *, escalations: int = JITTER_ESCALATIONS) -> Tensor:
    """Lower-triangular root ``L`` with ``L L^T = m``, adding jitter only on failure.

    The first attempt is exact.  If it fails, ``1e-6 * mean(diag)`` is added and
    multiplied by ten up to ``escalations`` times.  Works on batches; each batch
    member escalates independently.

    Raises:
        NotPSDError: if some batch member still fails after the last escalation.
    """
    m = as_tensor(m)
    if m.shape[-1] == 0:
        return m.clone()
    chol, info = torch.linalg.cholesky_ex(m)
    if not bool((info > 0).any()):
        return chol
    eye = torch.eye(m.shape[-1], dtype=m.dtype)
    scale = torch.diagonal(m, dim1=-2, dim2=-1).mean(-1).abs().clamp(min=1e-30)
    jitter = JITTER_SCALE * scale
    for _ in range(escalations + 1):
        failed = (info > 0)[..., None, None]
        retry, info_retry = torch.linalg.cholesky_ex(m + jitter[..., None, None] * eye)
        chol = torch.where(failed, retry, chol)
        info = torch.where(info > 0, info_retry, info)
        if not bool((info > 0).any()):
            return chol
        jitter = jitter * 10.0
    raise NotPSDError(
        "matrix is not positive definite after jitter escalation; "
        "the kernel matrix is ill-conditioned"
    )


def triangular_inverse(chol: Tensor) -> Tensor:
    eye = torch.eye(chol.shape[-1], dtype=chol.dtype).expand_as(chol)
    return torch.linalg.solve_triangular(chol, eye, upper=False)


@dataclass
class Posterior:
    """Joint Gaussian posterior at ``q`` points (batched over leading dims)."""

    mean: Tensor
    covariance: Tensor

    @property
    def variance(self) -> Tensor:
        return torch.diagonal(self.covariance, dim1=-2, dim2=-1)


@dataclass
class GpModel:
    """A fitted GP with its root cache.

    Attributes:
        dataset: training data in normalized coordinates.
        hyperparams: kernel, noise and mean parameters.
        root: ``n x r`` root ``R`` of ``K_XX + sigma^2 I``.
        root_pinv: ``r x n`` (pseudo)inverse of ``root``.
    """

    dataset: Dataset
    hyperparams: KernelHyperparams
    root: Tensor
    root_pinv: Tensor
    _train_x: Tensor = field(repr=False)
    _weights: Tensor = field(repr=False)
    _ls: Tensor = field(repr=False)

    @classmethod
    def from_data(cls, dataset: Dataset, hyperparams: KernelHyperparams) -> "GpModel":
        if dataset.n and dataset.dim != hyperparams.dim:
            raise ValueError("dataset dimension does not match lengthscales")
        x = as_tensor(dataset.inputs).reshape(dataset.n, hyperparams.dim)
        ls = as_tensor(hyperparams.lengthscales)
        k = matern52(x, x, ls, hyperparams.signal_variance)
        k = k + hyperparams.noise_variance * torch.eye(dataset.n, dtype=DTYPE)
        root = root_decompose(k)
        root_pinv = triangular_inverse(root)
        resid = as_tensor(dataset.outcomes) - hyperparams.mean_constant
        weights = root_pinv @ resid
        return cls(dataset, hyperparams, root, root_pinv, x, weights, ls)

    # Interface shared with FantasyModel -------------------------------------------

    @property
    def batch_shape(self) -> torch.Size:
        return torch.Size()

    @property
    def dim(self) -> int:
        return self.hyperparams.dim

    @property
    def noise_variance(self) -> float:
        return self.hyperparams.noise_variance

    def kernel(self, x1: Tensor, x2: Tensor) -> Tensor:
        return matern52(x1, x2, self._ls, self.hyperparams.signal_variance)

    def project(self, points: Tensor) -> Tensor:
        """``R^{-1} k(X, points)``, shape ``(..., r, q)``."""
        return self.root_pinv @ self.kernel(self._train_x, points)

    def projected_weights(self) -> Tensor:
        """``R^{-1} (y - c)``, shape ``(r,)``."""
        return self._weights

    def posterior(self, points, observation_noise: bool = False) -> Posterior:
        """Posterior of the latent function (or of observations) at ``points``.

        Args:
            points: ``(..., q, d)`` query locations.
            observation_noise: add ``sigma^2 I`` to the covariance.
        """
        points = as_tensor(points)
        proj = self.project(points)
        mean = self.hyperparams.mean_constant + (proj.transpose(-1, -2) @ self._weights[:, None])[..., 0]
        cov = self.kernel(points, points) - proj.transpose(-1, -2) @ proj
        if observation_noise:
            cov = cov + self.noise_variance * torch.eye(points.shape[-2], dtype=DTYPE)
        return Posterior(mean, cov)

    def stored_entries(self) -> int:
        return self.root_pinv.numel()


def posterior(model, points, observation_noise: bool = False) -> Posterior:
    return model.posterior(points, observation_noise=observation_noise)


def dense_posterior(dataset: Dataset, hp: KernelHyperparams, points) -> tuple[np.ndarray, np.ndarray]:
    """Posterior via a direct dense solve (no cache); reference path."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    kqq = kernel_matrix(points, points, hp).numpy()
    if dataset.n == 0:
        return np.full(points.shape[0], hp.mean_constant), kqq
    kxx = kernel_matrix(dataset.inputs, dataset.inputs, hp).numpy()
    kxx += hp.noise_variance * np.eye(dataset.n)
    kxq = kernel_matrix(dataset.inputs, points, hp).numpy()
    sol = np.linalg.solve(kxx, np.column_stack([dataset.outcomes - hp.mean_constant, kxq]))
    mean = hp.mean_constant + kxq.T @ sol[:, 0]
    cov = kqq - kxq.T @ sol[:, 1:]
    return mean, cov


# Evidence maximization ------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 5
    max_iter: int = 200
    seed: int = 0
    lengthscale_bounds: tuple[float, float] = LENGTHSCALE_BOUNDS
    signal_variance_bounds: tuple[float, float] = SIGNAL_VARIANCE_BOUNDS
    noise_variance_bounds: tuple[float, float] = NOISE_VARIANCE_BOUNDS


def log_evidence_batch(theta: Tensor, x: Tensor, y: Tensor) -> Tensor:
    """Log marginal likelihood for a batch of unconstrained parameter vectors.

    ``theta`` has shape ``(N, d + 3)``; failed decompositions give ``-inf``.
    """
    d = x.shape[-1]
    n = y.shape[0]
    ls = torch.exp(theta[:, :d])
    sf2 = torch.exp(theta[:, d])
    sn2 = torch.exp(theta[:, d + 1])
    c = theta[:, d + 2]
    k = matern52(x.expand(theta.shape[0], n, d), x.expand(theta.shape[0], n, d), ls, sf2[:, None, None])
    k = k + sn2[:, None, None] * torch.eye(n, dtype=DTYPE)
    chol, info = torch.linalg.cholesky_ex(k)
    resid = (y[None, :] - c[:, None])[..., None]
    alpha = torch.linalg.solve_triangular(chol, resid, upper=False)[..., 0]
    logdet = torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
    value = -0.5 * (alpha * alpha).sum(-1) - logdet - 0.5 * n * math.log(2 * math.pi)
    return torch.where(info == 0, value, torch.full_like(value, -math.inf))


def log_evidence(dataset: Dataset, hp: KernelHyperparams) -> float:
    theta = as_tensor(hp.to_unconstrained())[None]
    return float(log_evidence_batch(theta, as_tensor(dataset.inputs), as_tensor(dataset.outcomes))[0])


def fit_hyperparameters(
    data: Dataset,
    config: FitConfig = FitConfig(),
    previous: KernelHyperparams | None = None,
) -> KernelHyperparams:
    """Maximize the log evidence over log-parameters within box bounds.

    Restarts are drawn log-uniformly inside the bounds (mean constant starts at
    the sample mean); ``previous`` is added as one more start.  The returned
    parameters are never worse than the best starting point.
    """
    from .optimize import OptimizerConfig, optimize_box

    if data.n < 2:
        raise ValueError("hyperparameter fitting needs at least two observations")
    if not np.all(np.isfinite(data.outcomes)):
        raise ValueError("outcomes must be finite")
    d = data.dim
    rng = np.random.default_rng(config.seed)
    ybar = float(data.outcomes.mean())
    spread = 10.0 * (float(data.outcomes.std()) + 1.0)
    lower = np.concatenate(
        [
            np.full(d, math.log(config.lengthscale_bounds[0])),
            [math.log(config.signal_variance_bounds[0]), math.log(config.noise_variance_bounds[0]), ybar - spread],
        ]
    )
    upper = np.concatenate(
        [
            np.full(d, math.log(config.lengthscale_bounds[1])),
            [math.log(config.signal_variance_bounds[1]), math.log(config.noise_variance_bounds[1]), ybar + spread],
        ]
    )
    inits = rng.uniform(lower, upper, size=(config.restarts, d + 3))
    inits[:, -1] = ybar
    if previous is not None and previous.dim == d:
        inits = np.vstack([inits, np.clip(previous.to_unconstrained(), lower, upper)])

    x = as_tensor(data.inputs)
    y = as_tensor(data.outcomes)

    def value_and_grad(theta: np.ndarray):
        t = torch.tensor(theta, dtype=DTYPE, requires_grad=True)
        vals = log_evidence_batch(t, x, y)
        finite = torch.isfinite(vals)
        if bool(finite.any()):
            torch.where(finite, vals, torch.zeros_like(vals)).sum().backward()
            grad = t.grad.numpy()
        else:
            grad = np.zeros_like(theta)
        return vals.detach().numpy(), grad

    cfg = OptimizerConfig(restarts=len(inits), max_iter=config.max_iter, gtol=1e-6)
    best, _ = optimize_box(value_and_grad, None, inits, cfg, bounds=(lower, upper))
    return KernelHyperparams.from_unconstrained(best)
