"""Exact Gaussian process regression for individual node functions.

Fitting and prediction run in numpy. A small torch view of a fitted model
(:meth:`NodeGP.torch_view`) provides differentiable mean/variance for the
acquisition code.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

SQRT5 = math.sqrt(5.0)

LENGTHSCALE_BOUNDS = (1e-3, 1e3)
OUTPUT_SCALE_BOUNDS = (1e-4, 1e4)
NOISE_RATIO = 1e-6  # noise-free benchmarks: sigma^2 = NOISE_RATIO * zeta^2
JITTER_RATIO = 1e-6


class NumericalError(RuntimeError):
    """Raised when a covariance matrix cannot be factorized."""


class HyperparameterFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class KernelParams:
    """Matern-5/2 hyperparameters for one node.

    ``output_scale`` is the signal variance, ``lengthscales`` has one entry per
    input dimension, and ``noise_variance`` is the observation noise.
    """

    output_scale: float
    lengthscales: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "output_scale", float(self.output_scale))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        if not self.output_scale > 0:
            raise ValueError(f"output_scale must be positive, got {self.output_scale}")
        if ls.ndim != 1 or ls.size == 0 or not np.all(ls > 0):
            raise ValueError(f"lengthscales must be a non-empty positive vector, got {ls}")
        if not self.noise_variance >= 0:
            raise ValueError(f"noise_variance must be nonnegative, got {self.noise_variance}")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @classmethod
    def unit(cls, dim: int, noise_variance: float = NOISE_RATIO) -> "KernelParams":
        return cls(1.0, np.ones(dim), noise_variance)

    def to_dict(self) -> dict:
        return {
            "output_scale": self.output_scale,
            "lengthscales": self.lengthscales.tolist(),
            "noise_variance": self.noise_variance,
        }


def _check_dims(z: np.ndarray, params: KernelParams) -> None:
    if z.shape[-1] != params.dim:
        raise ValueError(
            f"input dimension {z.shape[-1]} does not match {params.dim} lengthscales"
        )


def _scaled_sqdist(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    d = (a[:, None, :] - b[None, :, :]) / lengthscales
    return np.einsum("ijk,ijk->ij", d, d)


def _matern_from_r(r: np.ndarray) -> np.ndarray:
    return (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def matern52(z, z_prime, params: KernelParams) -> float:
    """Matern-5/2 covariance between two single points."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    z_prime = np.atleast_1d(np.asarray(z_prime, dtype=float))
    if z.shape != z_prime.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {z_prime.shape}")
    _check_dims(z, params)
    d = (z - z_prime) / params.lengthscales
    r = math.sqrt(float(np.dot(d, d)))
    return params.output_scale * float(_matern_from_r(np.array(r)))


def matern52_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Cross-covariance matrix ``K[i, j] = k(a_i, b_j)``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    _check_dims(a, params)
    _check_dims(b, params)
    r = np.sqrt(_scaled_sqdist(a, b, params.lengthscales))
    return params.output_scale * _matern_from_r(r)


def matern52_torch(
    a: torch.Tensor, b: torch.Tensor, lengthscales: torch.Tensor, output_scale: float
) -> torch.Tensor:
    """Differentiable cross-covariance, ``a`` is ``(..., d)`` and ``b`` is ``(n, d)``."""
    d = (a / lengthscales).unsqueeze(-2) - b / lengthscales
    # clamp keeps the gradient finite (and exactly zero) at r = 0
    s = (d * d).sum(-1).clamp_min(1e-36).sqrt() * SQRT5
    return (output_scale + output_scale * s + (output_scale / 3.0) * s * s) * torch.exp(-s)


@dataclass(frozen=True)
class Normalization:
    """Affine maps to the model space: ``(z - z_shift) / z_scale`` and ``(y - y_shift) / y_scale``."""

    z_shift: np.ndarray
    z_scale: np.ndarray
    y_shift: float = 0.0
    y_scale: float = 1.0

    @classmethod
    def identity(cls, dim: int) -> "Normalization":
        return cls(np.zeros(dim), np.ones(dim))

    def inputs(self, z: np.ndarray) -> np.ndarray:
        return (z - self.z_shift) / self.z_scale

    def outputs(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_shift) / self.y_scale


@dataclass(frozen=True)
class NodeDataset:
    """Observations ``(z_l, y_l)`` for one node plus the normalization record.

    Inputs are min-max scaled to the unit cube, using ``input_bounds`` where a
    column's bounds are known (rows of ``nan`` fall back to the data range).
    Outputs are z-scored when ``normalize`` is set.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    input_bounds: Optional[np.ndarray] = None
    normalize: bool = True
    normalization: Normalization = field(init=False)

    def __post_init__(self):
        z = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if z.ndim == 1:
            z = z.reshape(len(y), -1) if len(y) else z.reshape(0, max(z.size, 1))
        if z.shape[0] != y.shape[0]:
            raise ValueError(f"{z.shape[0]} inputs but {y.shape[0]} outputs")
        object.__setattr__(self, "inputs", z)
        object.__setattr__(self, "outputs", y)
        object.__setattr__(self, "normalization", self._make_normalization())

    @classmethod
    def empty(cls, dim: int, **kwargs) -> "NodeDataset":
        return cls(np.zeros((0, dim)), np.zeros(0), **kwargs)

    @property
    def n(self) -> int:
        return self.outputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def _make_normalization(self) -> Normalization:
        if not self.normalize:
            return Normalization.identity(self.dim)
        lo = np.full(self.dim, np.nan)
        hi = np.full(self.dim, np.nan)
        if self.input_bounds is not None:
            b = np.asarray(self.input_bounds, dtype=float).reshape(self.dim, 2)
            lo, hi = b[:, 0].copy(), b[:, 1].copy()
        if self.n:
            missing = np.isnan(lo) | np.isnan(hi)
            lo[missing] = self.inputs[:, missing].min(axis=0)
            hi[missing] = self.inputs[:, missing].max(axis=0)
        lo = np.nan_to_num(lo, nan=0.0)
        hi = np.nan_to_num(hi, nan=1.0)
        span = hi - lo
        span[~(span > 1e-12)] = 1.0
        if self.n:
            y_shift = float(self.outputs.mean())
            y_std = float(self.outputs.std())
            y_scale = y_std if y_std > 1e-12 * max(1.0, abs(y_shift)) else 1.0
        else:
            y_shift, y_scale = 0.0, 1.0
        return Normalization(lo, span, y_shift, y_scale)

    def append(self, z, y) -> "NodeDataset":
        z = np.atleast_2d(np.asarray(z, dtype=float)).reshape(-1, self.dim)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return NodeDataset(
            np.vstack([self.inputs, z]),
            np.concatenate([self.outputs, y]),
            self.input_bounds,
            self.normalize,
        )

    def model_space(self, prior_mean: Optional[Callable] = None):
        """Normalized inputs and normalized residual outputs."""
        y = self.outputs
        if prior_mean is not None and self.n:
            y = y - np.asarray(prior_mean(self.inputs), dtype=float).reshape(-1)
        norm = self.normalization
        if prior_mean is not None and self.normalize and self.n:
            # the residual gets its own z-score
            shift, std = float(y.mean()), float(y.std())
            scale = std if std > 1e-12 * max(1.0, abs(shift)) else 1.0
            norm = replace(norm, y_shift=shift, y_scale=scale)
        return norm.inputs(self.inputs), norm.outputs(y), norm


def _factorize(K: np.ndarray, output_scale: float) -> np.ndarray:
    """Lower Cholesky factor; retries once with jitter before giving up."""
    try:
        return cholesky(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    Kj = K + JITTER_RATIO * output_scale * np.eye(K.shape[0])
    try:
        return cholesky(Kj, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        try:
            cond = float(np.linalg.cond(Kj))
        except np.linalg.LinAlgError:
            cond = float("inf")
        raise NumericalError(
            f"covariance matrix not positive definite after jitter (condition ~ {cond:.3g})"
        ) from None


@dataclass(frozen=True, eq=False)
class NodeGP:
    """Posterior GP for one node; immutable once built by :func:`fit_posterior`."""

    params: KernelParams
    data: NodeDataset
    factor: np.ndarray
    alpha: np.ndarray
    prior_mean: Optional[Callable] = None
    norm: Normalization = None
    train_inputs: np.ndarray = None  # normalized
    train_targets: np.ndarray = None  # normalized residuals

    @property
    def dim(self) -> int:
        return self.params.dim

    def _prior(self, z: np.ndarray) -> np.ndarray:
        if self.prior_mean is None:
            return np.zeros(z.shape[0])
        return np.asarray(self.prior_mean(z), dtype=float).reshape(-1)

    def predict(self, z, full_cov: bool = False):
        """Posterior mean and variance (or covariance) in output units."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        _check_dims(z, self.params)
        zn = self.norm.inputs(z)
        mean = self._prior(z) + self.norm.y_shift
        if self.data.n == 0:
            kss = matern52_matrix(zn, zn, self.params)
            cov = kss if full_cov else np.full(z.shape[0], self.params.output_scale)
            return mean, cov * self.norm.y_scale**2
        ks = matern52_matrix(zn, self.train_inputs, self.params)
        mean = mean + self.norm.y_scale * (ks @ self.alpha)
        v = solve_triangular(self.factor, ks.T, lower=True, check_finite=False)
        if full_cov:
            cov = matern52_matrix(zn, zn, self.params) - v.T @ v
            return mean, cov * self.norm.y_scale**2
        var = np.maximum(self.params.output_scale - np.einsum("ij,ij->j", v, v), 0.0)
        return mean, var * self.norm.y_scale**2

    def torch_view(self) -> "TorchPosterior":
        return TorchPosterior(self)


class TorchPosterior:
    """Differentiable posterior mean and variance of a :class:`NodeGP`."""

    def __init__(self, gp: NodeGP):
        if gp.prior_mean is not None:
            raise NotImplementedError("torch view supports zero prior mean only")
        self.gp = gp
        norm = gp.norm
        self._shift = torch.as_tensor(norm.z_shift)
        self._scale = torch.as_tensor(norm.z_scale)
        self._ls = torch.tensor(gp.params.lengthscales)
        self._train = torch.as_tensor(gp.train_inputs)
        self._alpha = torch.as_tensor(gp.alpha)
        self._factor = torch.as_tensor(gp.factor)
        self._y_shift = norm.y_shift
        self._y_scale = norm.y_scale

    def _cross(self, z: torch.Tensor) -> torch.Tensor:
        zn = (z - self._shift) / self._scale
        return matern52_torch(zn, self._train, self._ls, self.gp.params.output_scale)

    def mean(self, z: torch.Tensor) -> torch.Tensor:
        if self.gp.data.n == 0:
            return torch.full(z.shape[:-1], self._y_shift, dtype=z.dtype)
        return self._y_shift + self._y_scale * (self._cross(z) @ self._alpha)

    def mean_and_variance(self, z: torch.Tensor):
        s2 = self.gp.params.output_scale
        if self.gp.data.n == 0:
            m = torch.full(z.shape[:-1], self._y_shift, dtype=z.dtype)
            return m, torch.full_like(m, s2 * self._y_scale**2)
        ks = self._cross(z)
        mean = self._y_shift + self._y_scale * (ks @ self._alpha)
        flat = ks.reshape(-1, ks.shape[-1]).T
        v = torch.linalg.solve_triangular(self._factor, flat, upper=False)
        var = (s2 - (v * v).sum(0)).clamp_min(0.0).reshape(ks.shape[:-1])
        return mean, var * self._y_scale**2

    def __call__(self, z: torch.Tensor) -> torch.Tensor:
        return self.mean(z)


def fit_posterior(
    prior_mean: Optional[Callable], data: NodeDataset, params: KernelParams
) -> NodeGP:
    """Condition a zero-mean (or ``prior_mean``) GP on ``data``."""
    if data.dim != params.dim:
        raise ValueError(f"dataset dimension {data.dim} != kernel dimension {params.dim}")
    zn, yn, norm = data.model_space(prior_mean)
    if data.n == 0:
        return NodeGP(params, data, np.zeros((0, 0)), np.zeros(0), prior_mean, norm, zn, yn)
    K = matern52_matrix(zn, zn, params)
    K[np.diag_indices_from(K)] += params.noise_variance
    L = _factorize(K, params.output_scale)
    alpha = cho_solve((L, True), yn, check_finite=False)
    return NodeGP(params, data, L, alpha, prior_mean, norm, zn, yn)


def log_marginal_likelihood(
    data: NodeDataset,
    params: KernelParams,
    prior_mean: Optional[Callable] = None,
    grad: bool = False,
):
    """Log marginal likelihood of the (normalized) data.

    With ``grad=True`` also returns the gradient with respect to
    ``[log output_scale, log lengthscale_1..d, log noise_variance]``.
    """
    if data.n < 1:
        raise ValueError("log marginal likelihood needs at least one observation")
    zn, yn, _ = data.model_space(prior_mean)
    n = data.n
    sq = _scaled_sqdist(zn, zn, params.lengthscales)
    r = np.sqrt(sq)
    e = np.exp(-SQRT5 * r)
    C = (1.0 + SQRT5 * r + (5.0 / 3.0) * sq) * e
    K = params.output_scale * C
    K[np.diag_indices(n)] += params.noise_variance
    L = _factorize(K, params.output_scale)
    alpha = cho_solve((L, True), yn, check_finite=False)
    value = -0.5 * yn @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    if not grad:
        return float(value)
    Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    g = np.empty(params.dim + 2)
    g[0] = 0.5 * np.sum(W * (params.output_scale * C))
    base = params.output_scale * (5.0 / 3.0) * (1.0 + SQRT5 * r) * e
    diff = zn[:, None, :] - zn[None, :, :]
    for i, ls in enumerate(params.lengthscales):
        g[i + 1] = 0.5 * np.sum(W * base * (diff[:, :, i] / ls) ** 2)
    g[-1] = 0.5 * params.noise_variance * np.trace(W)
    return float(value), g


def _stratified_log_starts(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Latin-hypercube starts in log space over the hyperparameter box."""
    lo = np.array([math.log(OUTPUT_SCALE_BOUNDS[0])] + [math.log(LENGTHSCALE_BOUNDS[0])] * dim)
    hi = np.array([math.log(OUTPUT_SCALE_BOUNDS[1])] + [math.log(LENGTHSCALE_BOUNDS[1])] * dim)
    u = np.empty((count, dim + 1))
    for j in range(dim + 1):
        u[:, j] = (rng.permutation(count) + rng.random(count)) / count
    return lo + u * (hi - lo)


def fit_hyperparameters(
    data: NodeDataset,
    restarts: int = 8,
    rng: Optional[np.random.Generator] = None,
    noise_variance: Optional[float] = None,
    init: Optional[KernelParams] = None,
    maxiter: int = 200,
) -> KernelParams:
    """Multi-start L-BFGS-B maximization of the log marginal likelihood.

    Optimizes ``log output_scale`` and log lengthscales inside the default
    bounds. ``noise_variance=None`` ties the noise to ``1e-6 * output_scale``;
    a number fixes it. ``init`` replaces the first stratified start (warm
    start). If every restart fails numerically, unit hyperparameters are
    returned and a :class:`HyperparameterFitWarning` is emitted.
    """
    if data.n < 2:
        raise ValueError("hyperparameter fitting needs at least two observations")
    rng = np.random.default_rng() if rng is None else rng
    dim = data.dim
    tied = noise_variance is None

    def make(theta: np.ndarray) -> KernelParams:
        s2 = math.exp(theta[0])
        noise = NOISE_RATIO * s2 if tied else noise_variance
        return KernelParams(s2, np.exp(theta[1:]), noise)

    def objective(theta):
        try:
            v, g = log_marginal_likelihood(data, make(theta), grad=True)
        except (NumericalError, FloatingPointError, ValueError):
            return 1e25, np.zeros_like(theta)
        gz = g[: dim + 1].copy()
        if tied:
            gz[0] += g[-1]
        if not np.isfinite(v) or not np.all(np.isfinite(gz)):
            return 1e25, np.zeros_like(theta)
        return -v, -gz

    starts = _stratified_log_starts(max(restarts, 1), dim, rng)
    if init is not None:
        starts[0, 0] = math.log(np.clip(init.output_scale, *OUTPUT_SCALE_BOUNDS))
        starts[0, 1:] = np.log(np.clip(init.lengthscales, *LENGTHSCALE_BOUNDS))
    bounds = [tuple(np.log(OUTPUT_SCALE_BOUNDS))] + [tuple(np.log(LENGTHSCALE_BOUNDS))] * dim

    best_theta, best_val = None, np.inf
    with np.errstate(all="ignore"):
        for x0 in starts:
            f0, _ = objective(x0)
            if f0 < best_val:
                best_theta, best_val = x0, f0
            try:
                res = minimize(
                    objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                    options={"maxiter": maxiter},
                )
            except (ValueError, FloatingPointError):
                continue
            if res.fun < best_val and np.all(np.isfinite(res.x)):
                best_theta, best_val = res.x, res.fun
    if best_theta is None or best_val >= 1e25:
        warnings.warn(
            "all hyperparameter restarts failed; using unit hyperparameters",
            HyperparameterFitWarning,
            stacklevel=2,
        )
        return make(np.zeros(dim + 1))
    return make(best_theta)
