"""Differentiable posterior function samples for node GPs.

A path is a random-Fourier-feature prior draw plus an exact data-dependent
correction, ``f(z) = phi(z)^T theta + k(z, Z) K^{-1} (y - Phi theta - eps)``,
which passes through noise-free training data. Paths of all black-box nodes,
together with the known white-box functions, make up a :class:`NetworkSample`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.linalg import cho_solve

from .gp import KernelParams, NodeGP, matern52_torch
from .network import FunctionNetwork, NetworkState, evaluate, objective

DEFAULT_FEATURES = 1024
MATERN_DOF = 5  # Matern-5/2 spectral density is a multivariate t with 2 * 5/2 dof


@dataclass(frozen=True)
class FeatureBasis:
    """Random Fourier features ``phi(z) = zeta * sqrt(2/D) * cos(W z + b)``.

    The output scale is folded into the features so that
    ``phi(z) . phi(z')`` approximates the full kernel.
    """

    frequencies: np.ndarray  # (D, d)
    phases: np.ndarray  # (D,)
    output_scale: float

    @property
    def feature_count(self) -> int:
        return self.phases.shape[0]

    def features(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        amp = math.sqrt(2.0 * self.output_scale / self.feature_count)
        return amp * np.cos(z @ self.frequencies.T + self.phases)

    def features_torch(self, z: torch.Tensor) -> torch.Tensor:
        amp = math.sqrt(2.0 * self.output_scale / self.feature_count)
        W = torch.as_tensor(self.frequencies)
        b = torch.as_tensor(self.phases)
        return amp * torch.cos(z @ W.T + b)


def draw_basis(params: KernelParams, D: int, rng: np.random.Generator) -> FeatureBasis:
    """Draw frequencies from the Matern-5/2 spectral density.

    The density is a multivariate t with 5 degrees of freedom and scale
    ``1 / lengthscale``: ``omega = eps / lengthscale * sqrt(5 / u)`` with
    ``eps ~ N(0, I)`` and ``u ~ chi2(5)``.
    """
    if D < 1:
        raise ValueError("feature count must be at least 1")
    eps = rng.standard_normal((D, params.dim))
    u = rng.chisquare(MATERN_DOF, size=(D, 1))
    omega = eps / params.lengthscales * np.sqrt(MATERN_DOF / u)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=D)
    return FeatureBasis(omega, phases, params.output_scale)


class PathSample:
    """One deterministic posterior function draw for a :class:`NodeGP`.

    Calling the sample on a torch tensor ``(..., d)`` of raw node inputs
    returns ``(...)`` raw outputs and is differentiable.
    """

    def __init__(self, gp: NodeGP, basis: FeatureBasis, weights: np.ndarray, correction: np.ndarray):
        self.gp = gp
        self.basis = basis
        self.weights = weights
        self.correction = correction
        norm = gp.norm
        amp = math.sqrt(2.0 * basis.output_scale / basis.feature_count)
        # input normalization folded into the frequencies and phases
        W = basis.frequencies / norm.z_scale
        self._W = torch.as_tensor(W.T.copy())
        self._b = torch.as_tensor(basis.phases - W @ norm.z_shift)
        self._theta = torch.as_tensor(amp * weights)
        self._v = torch.as_tensor(correction)
        self._train = torch.as_tensor(gp.train_inputs)
        self._ls = torch.tensor(gp.params.lengthscales)
        self._shift = torch.as_tensor(norm.z_shift)
        self._scale = torch.as_tensor(norm.z_scale)
        self._y_shift = norm.y_shift
        self._y_scale = norm.y_scale

    def __call__(self, z: torch.Tensor) -> torch.Tensor:
        f = torch.cos(torch.addmm(self._b, z.reshape(-1, z.shape[-1]), self._W)) @ self._theta
        f = f.reshape(z.shape[:-1])
        if self._v.numel():
            zn = (z - self._shift) / self._scale
            k = matern52_torch(zn, self._train, self._ls, self.gp.params.output_scale)
            f = f + k @ self._v
        return self._y_shift + self._y_scale * f

    def numpy(self, z) -> np.ndarray:
        with torch.no_grad():
            return self(torch.as_tensor(np.atleast_2d(np.asarray(z, dtype=float)))).numpy()

    def gradient(self, z) -> np.ndarray:
        """Gradient with respect to the node input, one row per point."""
        zt = torch.as_tensor(np.atleast_2d(np.asarray(z, dtype=float))).clone().requires_grad_(True)
        (g,) = torch.autograd.grad(self(zt).sum(), zt)
        return g.numpy()


def draw_path(gp: NodeGP, basis_size: int, rng: np.random.Generator) -> PathSample:
    """Pathwise posterior sample reusing the GP's Cholesky factor."""
    if gp.prior_mean is not None:
        raise NotImplementedError("pathwise samples support zero prior mean only")
    basis = draw_basis(gp.params, basis_size, rng)
    theta = rng.standard_normal(basis.feature_count)
    n = gp.data.n
    if n == 0:
        return PathSample(gp, basis, theta, np.zeros(0))
    prior_at_data = basis.features(gp.train_inputs) @ theta
    noise = gp.params.noise_variance
    eps = math.sqrt(noise) * rng.standard_normal(n) if noise > 0 else np.zeros(n)
    v = cho_solve((gp.factor, True), gp.train_targets - prior_at_data - eps, check_finite=False)
    return PathSample(gp, basis, theta, v)


class NetworkSample:
    """A deterministic realization of every node function.

    ``node_fns[k]`` is a :class:`PathSample` (or posterior-mean view) for a
    black-box node and the known function for a white-box node. ``h0`` and
    ``scale`` set the fixed-point start and residual scaling per node (the
    zero and unit of each node's normalized output space).
    """

    def __init__(self, net: FunctionNetwork, node_fns: Sequence, tag: str,
                 h0: Optional[np.ndarray] = None, scale: Optional[np.ndarray] = None):
        self.net = net
        self.node_fns = list(node_fns)
        self.tag = tag
        self.h0 = torch.as_tensor(np.zeros(net.K) if h0 is None else np.asarray(h0, dtype=float))
        self.scale = np.ones(net.K) if scale is None else np.asarray(scale, dtype=float)

    @property
    def differentiable(self) -> bool:
        return self.net.is_acyclic

    def evaluate(self, x, w, raise_on_failure: bool = True) -> NetworkState:
        if self.net.is_acyclic:
            return evaluate(self.net, self.node_fns, x, w)
        return evaluate(self.net, self.node_fns, x, w, h0=self.h0, scale=self.scale,
                        raise_on_failure=raise_on_failure)

    def objective(self, x, w) -> torch.Tensor:
        return objective(self.net, self.evaluate(x, w))

    def scenario_values(self, x: torch.Tensor, W: torch.Tensor, mask_failures: float = None):
        """Objective at every ``(x_b, w_j)`` pair: ``(B, n_x), (m, n_w) -> (B, m)``.

        Cyclic solves that fail are replaced by ``mask_failures`` when given
        (and raise otherwise).
        """
        B, m = x.shape[0], W.shape[0]
        xb = x.unsqueeze(1).expand(B, m, x.shape[-1])
        wb = W.unsqueeze(0).expand(B, m, W.shape[-1])
        state = self.evaluate(xb, wb, raise_on_failure=mask_failures is None)
        values = state.H @ self.net._c_t
        if mask_failures is not None and not state.all_converged:
            values = torch.where(state.converged, values, torch.full_like(values, mask_failures))
        return values


def _output_stats(net: FunctionNetwork, gps: Sequence[Optional[NodeGP]]):
    h0 = np.zeros(net.K)
    scale = np.ones(net.K)
    for k, gp in enumerate(gps):
        if gp is not None:
            h0[k] = gp.norm.y_shift
            scale[k] = gp.norm.y_scale
    return h0, scale


def _check_gps(net: FunctionNetwork, gps: Sequence[Optional[NodeGP]]) -> None:
    if len(gps) != net.K:
        raise ValueError(f"expected {net.K} entries in gps, got {len(gps)}")
    for k, node in enumerate(net.nodes):
        if node.is_white_box:
            if node.func is None:
                raise ValueError(f"white-box node {k} has no function")
        elif gps[k] is None:
            raise ValueError(f"black-box node {k} has no fitted GP")


def draw_network_sample(
    net: FunctionNetwork,
    gps: Sequence[Optional[NodeGP]],
    D: int = DEFAULT_FEATURES,
    rng: Optional[np.random.Generator] = None,
    tag: str = "design",
) -> NetworkSample:
    """Independent path per black-box node; white-box nodes pass through."""
    _check_gps(net, gps)
    rng = np.random.default_rng() if rng is None else rng
    fns = []
    for k, node in enumerate(net.nodes):
        fns.append(node.func if node.is_white_box else draw_path(gps[k], D, rng))
    h0, scale = _output_stats(net, gps)
    return NetworkSample(net, fns, tag, h0, scale)


def posterior_mean_network(net: FunctionNetwork, gps: Sequence[Optional[NodeGP]]) -> NetworkSample:
    """The network with every black-box node replaced by its posterior mean."""
    _check_gps(net, gps)
    fns = [node.func if node.is_white_box else gps[k].torch_view().mean
           for k, node in enumerate(net.nodes)]
    h0, scale = _output_stats(net, gps)
    return NetworkSample(net, fns, "posterior-mean", h0, scale)
