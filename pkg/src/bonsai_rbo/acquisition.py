"""Max-min acquisition: outer robust design search, inner worst-case search,
fat-extremum smoothing, and posterior recommenders.

The solvers only need a *scenario model*: an object with
``scenario_values(x, W, mask_failures=None) -> (B, m)`` tensor and a
``differentiable`` flag. Network samples, the posterior-mean network, the
quantile network and the joint-GP confidence bounds all fit that shape.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.stats import qmc

from .gp import NodeGP
from .network import FunctionNetwork, NetworkState
from .pathwise import DEFAULT_FEATURES, NetworkSample, draw_network_sample, posterior_mean_network

log = logging.getLogger(__name__)

GPFN_MEAN = "gpfn"
GPFN_QUANTILE = "gpfn_quantile"
MAX_ROWS_PER_CHUNK = 4096
POLISH_RATIO = 1e-2


class AcquisitionWarning(UserWarning):
    pass


class AcquisitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class DesignBox:
    """Axis-aligned design space ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if np.any(hi < lo):
            raise ValueError("upper bound below lower bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_pairs(cls, pairs) -> "DesignBox":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def clamp(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lower + rng.random((n, self.dim)) * self.span

    def sobol(self, rng: np.random.Generator, n: int) -> np.ndarray:
        sampler = qmc.Sobol(self.dim, scramble=True, seed=rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # non power-of-two sizes
            u = sampler.random(n)
        return self.lower + u * self.span

    def to_list(self) -> list:
        return [[float(a), float(b)] for a, b in zip(self.lower, self.upper)]


@dataclass(frozen=True)
class UncertaintySet:
    """Finite scenario set ``{w_1..w_m}`` plus a nominal scenario."""

    points: np.ndarray
    nominal: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.shape[0] < 1:
            raise ValueError("an uncertainty set needs at least one point")
        nom = np.atleast_1d(np.asarray(self.nominal, dtype=float))
        if nom.shape != (pts.shape[1],):
            raise ValueError(f"nominal has shape {nom.shape}, expected ({pts.shape[1]},)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "nominal", nom)

    @classmethod
    def product(cls, axes: Sequence[Sequence[float]], nominal) -> "UncertaintySet":
        """Cartesian product of per-dimension value lists (last axis varies fastest)."""
        pts = np.array(list(itertools.product(*axes)), dtype=float)
        return cls(pts, nominal)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.points)

    def index_of(self, w, atol: float = 1e-12) -> int:
        hits = np.nonzero(np.all(np.abs(self.points - np.asarray(w)) <= atol, axis=1))[0]
        return int(hits[0]) if hits.size else -1


@dataclass
class AcquisitionOptions:
    """Knobs of the outer and inner solvers."""

    tau: float = 1e-2
    raw: int = 512
    starts: int = 10
    steps: int = 200
    population: int = 32
    generations: int = 60
    sigma0: float = 0.2
    features: int = DEFAULT_FEATURES
    polish: bool = True


@dataclass
class AcquisitionResult:
    x_next: np.ndarray
    w_next: np.ndarray
    H_next: Optional[NetworkState]
    inner_value: float
    diagnostics: dict = field(default_factory=dict)


def fat_extremum(q, tau: float, mode: str = "max", dim: int = -1):
    """Smooth max (or min) over ``dim``:
    ``max(q) + tau * log(sum_i 1 / (1 + ((q_i - max(q)) / tau)^2))``.

    The gap to the hard extremum is at most ``tau * log(m)``. Accepts a torch
    tensor (differentiable, returns a tensor) or an array-like (returns a
    float for 1-D input).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if mode not in ("max", "min"):
        raise ValueError("mode must be 'max' or 'min'")
    is_tensor = isinstance(q, torch.Tensor)
    t = q if is_tensor else torch.as_tensor(np.asarray(q, dtype=float))
    if t.numel() == 0 or t.shape[dim] == 0:
        raise ValueError("fat_extremum needs a nonempty vector")
    if mode == "min":
        t = -t
    top = t.amax(dim, keepdim=True)
    u = (t - top) / tau
    out = top.squeeze(dim) + tau * torch.log(torch.reciprocal(1.0 + u * u).sum(dim))
    if mode == "min":
        out = -out
    if is_tensor:
        return out
    return float(out) if out.dim() == 0 else out.numpy()


def _chunked_values(model, x: torch.Tensor, W: torch.Tensor, mask: Optional[float]) -> torch.Tensor:
    rows = max(1, MAX_ROWS_PER_CHUNK // max(W.shape[0], 1))
    with torch.no_grad():
        parts = [model.scenario_values(x[i:i + rows], W, mask_failures=mask)
                 for i in range(0, x.shape[0], rows)]
    return torch.cat(parts, 0)


def _evaluate_state(model, x, w) -> Optional[NetworkState]:
    if not hasattr(model, "evaluate"):
        return None
    with torch.no_grad():
        return model.evaluate(torch.as_tensor(np.asarray(x, dtype=float)),
                              torch.as_tensor(np.asarray(w, dtype=float)),
                              raise_on_failure=False)


def inner_min(model, x, W: UncertaintySet):
    """Hard minimum of the model over the scenarios at one design.

    Returns ``(w*, value, state, failed)`` where ``failed`` flags the scenarios
    whose fixed-point solve failed (they are scored ``+inf``). Ties go to the
    lowest index.
    """
    xt = torch.as_tensor(np.asarray(x, dtype=float)).reshape(1, -1)
    vals = _chunked_values(model, xt, W.tensor(), math.inf)[0].numpy()
    failed = ~np.isfinite(vals)
    if failed.all():
        raise AcquisitionError("model could not be evaluated at any scenario")
    j = int(np.argmin(vals))
    w = W.points[j].copy()
    return w, float(vals[j]), _evaluate_state(model, xt[0].numpy(), w), failed


def solve_inner_stage(model, x_next, W: UncertaintySet):
    """Worst-case scenario of the second (uncertainty-stage) sample at ``x_next``."""
    w, value, state, failed = inner_min(model, x_next, W)
    if failed.any():
        log.warning("fixed-point solve failed at %d of %d scenarios", int(failed.sum()), W.m)
    return w, state, value


def _hard_min(model, x: np.ndarray, Wt: torch.Tensor) -> np.ndarray:
    v = _chunked_values(model, torch.as_tensor(x), Wt, -math.inf)
    return v.amin(1).numpy()


def _gradient_refine(model, X: DesignBox, Wt, starts: np.ndarray, tau: float, steps: int):
    shape = starts.shape
    bounds = list(zip(np.tile(X.lower, shape[0]), np.tile(X.upper, shape[0])))

    def fun(flat):
        xt = torch.as_tensor(flat.reshape(shape)).requires_grad_(True)
        vals = model.scenario_values(xt, Wt, mask_failures=None)
        loss = -fat_extremum(vals, tau, "min").sum()
        if not torch.isfinite(loss):
            return 1e30, np.zeros_like(flat)
        (g,) = torch.autograd.grad(loss, xt)
        return loss.item(), g.reshape(-1).numpy()

    with np.errstate(all="ignore"):
        res = minimize(fun, starts.reshape(-1), jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": steps, "maxfun": 2 * steps})
    return X.clamp(res.x.reshape(shape))


def _evolutionary_search(model, X: DesignBox, Wt, seeds: np.ndarray, seed_vals: np.ndarray,
                         opts: AcquisitionOptions, rng: np.random.Generator):
    """(mu + lambda) search with Gaussian mutation and an annealed step."""
    pop, gens = opts.population, opts.generations
    mu = max(2, pop // 4)
    order = np.argsort(-seed_vals, kind="stable")[:mu]
    parents, parent_vals = seeds[order], seed_vals[order]
    sigma_end = 0.02
    for g in range(gens):
        frac = g / max(gens - 1, 1)
        sigma = opts.sigma0 * X.span * sigma_end**frac
        idx = rng.integers(0, parents.shape[0], size=pop)
        children = X.clamp(parents[idx] + rng.standard_normal((pop, X.dim)) * sigma)
        child_vals = _hard_min(model, children, Wt)
        allx = np.vstack([parents, children])
        allv = np.concatenate([parent_vals, child_vals])
        keep = np.argsort(-allv, kind="stable")[:mu]
        parents, parent_vals = allx[keep], allv[keep]
    return parents, parent_vals


def maxmin_search(model, X: DesignBox, W: UncertaintySet, opts: AcquisitionOptions,
                  rng: np.random.Generator):
    """Outer max-min search. Returns ``(x, hard-min value, diagnostics)``."""
    t0 = time.perf_counter()
    Wt = W.tensor()
    if np.all(X.span == 0):
        x = X.lower.copy()
        return x, float(_hard_min(model, x[None], Wt)[0]), {"restarts": 0, "wall_time": 0.0}
    pool = X.sobol(rng, opts.raw)
    pool_vals = _chunked_values(model, torch.as_tensor(pool), Wt, -math.inf)
    pool_hard = pool_vals.amin(1).numpy()
    if not np.isfinite(pool_hard).any():
        warnings.warn("no pool point could be evaluated; returning the first one",
                      AcquisitionWarning, stacklevel=2)
        return pool[0].copy(), -math.inf, {"restarts": 0, "wall_time": time.perf_counter() - t0}

    if model.differentiable:
        finite = pool_vals[torch.isfinite(pool_vals)]
        spread = float(finite.std()) if finite.numel() > 1 else 0.0
        tau = opts.tau * (spread if spread > 0 else 1.0)
        smooth = fat_extremum(pool_vals, tau, "min").numpy()
        smooth = np.where(np.isfinite(smooth), smooth, -np.inf)
        top = np.argsort(-smooth, kind="stable")[: opts.starts]
        try:
            cands = _gradient_refine(model, X, Wt, pool[top], tau, opts.steps)
        except (RuntimeError, ValueError) as exc:
            log.warning("gradient refinement failed: %s", exc)
            cands = np.zeros((0, X.dim))
        cand_vals = _hard_min(model, cands, Wt) if len(cands) else np.zeros(0)
        best_start = float(pool_hard[top].max())
        if opts.polish:
            # sharper surrogate from the best point so far removes most smoothing bias
            both = np.concatenate([cand_vals, pool_hard])
            seed_x = np.vstack([cands, pool])[int(np.argmax(np.where(np.isfinite(both), both, -np.inf)))]
            try:
                polished = _gradient_refine(model, X, Wt, seed_x[None], tau * POLISH_RATIO, opts.steps)
                cands = np.vstack([cands, polished])
                cand_vals = np.concatenate([cand_vals, _hard_min(model, polished, Wt)])
            except (RuntimeError, ValueError) as exc:
                log.warning("polish step failed: %s", exc)
    else:
        tau = None
        cands, cand_vals = _evolutionary_search(model, X, Wt, pool, pool_hard, opts, rng)
        best_start = float(pool_hard.max())
    allx = np.vstack([cands, pool])
    allv = np.concatenate([cand_vals, pool_hard])
    allv = np.where(np.isfinite(allv), allv, -np.inf)
    j = int(np.argmax(allv))
    if j >= len(cands):
        log.debug("refinement did not beat the raw pool")
    diag = {
        "restarts": int(min(len(cands), opts.starts)),
        "best_start_value": best_start,
        "tau": tau,
        "wall_time": time.perf_counter() - t0,
    }
    return X.clamp(allx[j]), float(allv[j]), diag


def solve_outer_maxmin(model, X: DesignBox, W: UncertaintySet,
                       opts: Optional[AcquisitionOptions] = None,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Design maximizing the model's worst case over ``W``.

    Acyclic (differentiable) models: fat-min surrogate maximized by
    multi-start L-BFGS-B from the best Sobol pool points, then hard-min
    re-scoring. Otherwise: derivative-free evolutionary search.
    """
    opts = AcquisitionOptions() if opts is None else opts
    rng = np.random.default_rng() if rng is None else rng
    return maxmin_search(model, X, W, opts, rng)[0]


class QuantileNetwork:
    """Empirical ``alpha``-quantile of the objective over posterior samples."""

    def __init__(self, samples: Sequence[NetworkSample], alpha: float):
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        self.samples = list(samples)
        self.alpha = alpha
        self.differentiable = all(s.differentiable for s in self.samples)

    def scenario_values(self, x, W, mask_failures=None):
        vals = torch.stack([s.scenario_values(x, W, mask_failures) for s in self.samples], 0)
        return torch.quantile(vals, self.alpha, dim=0)


def recommend(gps: Sequence[Optional[NodeGP]], net: FunctionNetwork, X: DesignBox,
              W: UncertaintySet, rule: str = GPFN_MEAN, alpha: float = 0.05, samples: int = 256,
              opts: Optional[AcquisitionOptions] = None,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Robust design under the posterior: mean network or sample quantile."""
    opts = AcquisitionOptions() if opts is None else opts
    rng = np.random.default_rng() if rng is None else rng
    if rule == GPFN_MEAN:
        model = posterior_mean_network(net, gps)
    elif rule == GPFN_QUANTILE:
        draws = [draw_network_sample(net, gps, opts.features, rng, tag="quantile")
                 for _ in range(samples)]
        model = QuantileNetwork(draws, alpha)
    else:
        raise ValueError(f"unknown recommender rule {rule!r}; use {GPFN_MEAN!r} or {GPFN_QUANTILE!r}")
    return solve_outer_maxmin(model, X, W, opts, rng)
