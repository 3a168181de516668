"""Empirical checks of the nominal (single-scenario) regret theory.

Thompson sampling over function networks on a finite design set, regret
curves, greedy information gain, the parent-sensitivity matrix, and the
shape of the cumulative-regret bound. The true node functions are draws from
the same GP priors the model uses, so averages over seeds estimate Bayesian
regret.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch
from scipy.linalg import cho_solve, cholesky

from .gp import KernelParams, NodeDataset, fit_posterior, matern52_matrix
from .network import BLACK_BOX, FunctionNetwork, NodeSpec, evaluate
from .pathwise import draw_basis, draw_network_sample, draw_path, posterior_mean_network

TRUTH_FEATURES = 4096
SAMPLE_FEATURES = 1024
PROBE_PAIRS = 2048
PROBE_STEP = 1e-4


@dataclass
class FiniteDesignProblem:
    """Nominal network problem over an explicit list of designs."""

    X: np.ndarray
    net: FunctionNetwork
    params: Dict[int, KernelParams]  # prior per black-box node, noise_variance = sigma^2
    name: str = "finite"

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.X.shape[0] < 1:
            raise ValueError("the design set is empty")
        if self.net.uncertainty_dim != 0:
            raise ValueError("nominal problems take no uncertainty inputs")
        if self.X.shape[1] != self.net.design_dim:
            raise ValueError("design dimension mismatch")
        self._state = _evaluate_nominal(self.net, None, self.X)
        self.values = (self._state.H @ self.net._c_t).numpy()
        self.best = int(np.argmax(self.values))

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @property
    def optimum(self) -> float:
        return float(self.values[self.best])

    def node_inputs(self, k: int) -> np.ndarray:
        """Inputs that node ``k`` sees across the design set (noise-free)."""
        return self._state.inputs[k].numpy()


def _evaluate_nominal(net: FunctionNetwork, fns, X: np.ndarray):
    x = torch.as_tensor(X)
    w = torch.zeros(X.shape[0], 0, dtype=torch.float64)
    with torch.no_grad():
        return evaluate(net, fns, x, w)


def _prior_draw(params: KernelParams, rng: np.random.Generator, D: int = TRUTH_FEATURES):
    empty = NodeDataset.empty(params.dim, normalize=False)
    return draw_path(fit_posterior(None, empty, params), D, rng)


def chain_problem(seed: int, n_designs: int = 50, K: int = 3, noise: float = 1e-2,
                  design_lengthscale: float = 0.2, parent_lengthscale: float = 1.0
                  ) -> FiniteDesignProblem:
    """``x -> f_1 -> f_2 -> ... -> f_K`` with prior-drawn node functions.

    Designs are an evenly spaced grid on [0, 1]; node 1 reads ``x`` and each
    later node reads only its predecessor.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC4A1]))
    nodes, params = [], {}
    for k in range(K):
        ls = design_lengthscale if k == 0 else parent_lengthscale
        params[k] = KernelParams(1.0, [ls], noise)
        fn = _prior_draw(KernelParams(1.0, [ls], 0.0), rng)
        nodes.append(NodeSpec(f"f{k + 1}", BLACK_BOX, (0,) if k == 0 else (),
                              (), () if k == 0 else (k - 1,), fn))
    c = np.zeros(K)
    c[-1] = 1.0
    net = FunctionNetwork(nodes, c, 1, 0)
    X = np.linspace(0.0, 1.0, n_designs).reshape(-1, 1)
    return FiniteDesignProblem(X, net, params, name=f"chain{K}")


def single_node_problem(seed: int, n_designs: int = 50, noise: float = 1e-2,
                        lengthscale: float = 0.2) -> FiniteDesignProblem:
    return chain_problem(seed, n_designs, 1, noise, lengthscale)


@dataclass
class RegretCurve:
    """Per-iteration regrets of one run (index ``t - 1`` holds iteration ``t``)."""

    instantaneous: np.ndarray  # g(x*) - g(x_t)
    simple: np.ndarray  # g(x*) - g(xhat_t), recommender from the posterior before step t
    best: np.ndarray  # g(x*) - max_{s <= t} g(x_s)
    queries: np.ndarray  # design indices
    recommendations: np.ndarray
    seed: int = 0

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.instantaneous)

    @property
    def T(self) -> int:
        return self.instantaneous.size


def _posteriors(problem: FiniteDesignProblem, data: Dict[int, NodeDataset]):
    gps = [None] * problem.net.K
    for k, d in data.items():
        gps[k] = fit_posterior(None, d, problem.params[k])
    return gps


def nominal_ts_run(problem: FiniteDesignProblem, T: int, seed: int,
                   features: int = SAMPLE_FEATURES) -> RegretCurve:
    """Thompson sampling with one network sample per step; ties to the lowest index."""
    if T < 1:
        raise ValueError("T must be at least 1")
    ts_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    ts_rng, noise_rng = np.random.default_rng(ts_seq), np.random.default_rng(noise_seq)
    net = problem.net
    black = net.black_box_nodes
    data = {k: NodeDataset.empty(net.nodes[k].input_dim, normalize=False) for k in black}
    g_star = problem.optimum
    inst, simple, best, queries, recs = [], [], [], [], []
    running_best = -math.inf
    for _ in range(T):
        gps = _posteriors(problem, data)
        mean_net = posterior_mean_network(net, gps)
        rec_vals = (_evaluate_nominal(net, mean_net.node_fns, problem.X).H @ net._c_t).numpy()
        rec = int(np.argmax(rec_vals))
        sample = draw_network_sample(net, gps, features, ts_rng, tag="nominal")
        vals = (_evaluate_nominal(net, sample.node_fns, problem.X).H @ net._c_t).numpy()
        i = int(np.argmax(vals))
        state_inputs = [z[i] for z in problem._state.inputs]
        H = problem._state.H[i].numpy()
        for k in black:
            sd = math.sqrt(problem.params[k].noise_variance)
            y = H[k] + sd * noise_rng.standard_normal()
            data[k] = data[k].append(state_inputs[k].numpy(), y)
        running_best = max(running_best, float(problem.values[i]))
        inst.append(g_star - problem.values[i])
        simple.append(g_star - problem.values[rec])
        best.append(g_star - running_best)
        queries.append(i)
        recs.append(rec)
    return RegretCurve(np.array(inst), np.array(simple), np.array(best),
                       np.array(queries), np.array(recs), seed)


def gp_ts_reference(X: np.ndarray, f_true: Callable, params: KernelParams, T: int, seed: int,
                    features: int = SAMPLE_FEATURES) -> np.ndarray:
    """Classical single-GP Thompson sampling written directly in numpy.

    Consumes random numbers in the same order as :func:`nominal_ts_run` so a
    one-node network must reproduce its query sequence exactly.
    """
    ts_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    ts_rng, noise_rng = np.random.default_rng(ts_seq), np.random.default_rng(noise_seq)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    f = np.asarray(f_true(X), dtype=float).reshape(-1)
    noise = params.noise_variance
    Zs, ys, queries = [], [], []
    for _ in range(T):
        basis = draw_basis(params, features, ts_rng)
        theta = ts_rng.standard_normal(features)
        sample = basis.features(X) @ theta
        if Zs:
            Z, y = np.array(Zs), np.array(ys)
            Kzz = matern52_matrix(Z, Z, params) + noise * np.eye(len(Z))
            L = cholesky(Kzz, lower=True)
            eps = math.sqrt(noise) * ts_rng.standard_normal(len(Z)) if noise > 0 else 0.0
            v = cho_solve((L, True), y - basis.features(Z) @ theta - eps)
            sample = sample + matern52_matrix(X, Z, params) @ v
        i = int(np.argmax(sample))
        queries.append(i)
        Zs.append(X[i])
        ys.append(f[i] + math.sqrt(noise) * noise_rng.standard_normal())
    return np.array(queries)


def mig_greedy(params: KernelParams, candidates, T: int, noise: float) -> np.ndarray:
    """Greedy log-det information gain ``gamma_1..gamma_T``.

    Each step adds the candidate with the largest posterior variance, the
    greedy maximizer of ``0.5 log det(I + K / sigma^2)``. Candidates may be
    picked again once ``T`` exceeds their number. The result is a
    ``(1 - 1/e)``-approximate lower proxy for the true maximum.
    """
    if noise <= 0:
        raise ValueError("noise variance must be positive")
    C = np.atleast_2d(np.asarray(candidates, dtype=float))
    n = C.shape[0]
    Kcc = matern52_matrix(C, C, params)
    var = np.full(n, params.output_scale)
    basis = np.zeros((0, n))  # rows: whitened posterior update directions
    gains = np.empty(T)
    total = 0.0
    for t in range(T):
        j = int(np.argmax(var))
        total += 0.5 * math.log1p(var[j] / noise)
        gains[t] = total
        # rank-one update of the posterior covariance after observing C[j]
        cov_j = Kcc[j] - basis.T @ basis[:, j]
        row = cov_j / math.sqrt(var[j] + noise)
        basis = np.vstack([basis, row])
        var = np.maximum(var - row * row, 0.0)
    return gains


@dataclass
class SensitivityModel:
    edge_lipschitz: Dict[tuple, float]  # (k, j) -> L_{k <- j}
    A: np.ndarray
    spectral_radius: float
    L_net: Optional[float]
    output_node: int
    amplification_unbounded: bool = False
    notes: list = field(default_factory=list)


def sensitivity_matrix(parents: Sequence[Sequence[int]], edge_lipschitz: Dict[tuple, float],
                       output_node: Optional[int] = None, acyclic: Optional[bool] = None
                       ) -> SensitivityModel:
    """``A[k, j] = sum_{j' in J(k)} L_{k<-j'}^2`` for each parent ``j`` of ``k``.

    ``parents[k]`` may include ``k`` itself (scalar self-loops). ``L_net`` is
    the largest entry of ``e_out^T (I - A)^{-1}`` and is only formed when the
    spectral radius is below one.
    """
    K = len(parents)
    out = K - 1 if output_node is None else output_node
    A = np.zeros((K, K))
    for k, js in enumerate(parents):
        lbar2 = sum(edge_lipschitz[(k, j)] ** 2 for j in js)
        for j in js:
            A[k, j] = lbar2
    if acyclic is None:
        acyclic = _is_acyclic(parents)
    rho = 0.0 if acyclic else float(np.max(np.abs(np.linalg.eigvals(A)))) if K else 0.0
    model = SensitivityModel(dict(edge_lipschitz), A, rho, None, out)
    if rho >= 1.0:
        model.amplification_unbounded = True
        model.notes.append("spectral radius >= 1: amplification constant undefined")
        return model
    e = np.zeros(K)
    e[out] = 1.0
    row = np.linalg.solve((np.eye(K) - A).T, e)
    model.L_net = float(np.max(np.abs(row)))
    return model


def _is_acyclic(parents) -> bool:
    K = len(parents)
    state = [0] * K

    def visit(k):
        if state[k] == 1:
            return False
        if state[k] == 2:
            return True
        state[k] = 1
        ok = all(visit(j) for j in parents[k])
        state[k] = 2
        return ok

    return all(visit(k) for k in range(K))


def sensitivity_estimate(net: FunctionNetwork, node_fns: Optional[Sequence] = None,
                         designs: Optional[np.ndarray] = None, probes: int = PROBE_PAIRS,
                         step: float = PROBE_STEP, rng: Optional[np.random.Generator] = None,
                         output_node: Optional[int] = None) -> SensitivityModel:
    """Estimate each ``L_{k<-j}`` as the largest central-difference slope.

    Probe inputs take design coordinates from random rows of ``designs`` and
    parent coordinates uniformly from the parent's observed output range
    across ``designs``. ``node_fns`` defaults to the true node functions; pass
    posterior means for a model-based estimate.
    """
    rng = np.random.default_rng() if rng is None else rng
    fns = net.true_evaluators() if node_fns is None else list(node_fns)
    if designs is None:
        raise ValueError("designs are required to place the probes")
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    state = _evaluate_nominal(net, fns, designs)
    H = state.H.numpy()
    lo, hi = H.min(0), H.max(0)
    pad = 0.05 * np.maximum(hi - lo, 1e-9)
    lo, hi = lo - pad, hi + pad
    L = {}
    for k, node in enumerate(net.nodes):
        if not node.parents:
            continue
        rows = rng.integers(designs.shape[0], size=probes)
        z = state.inputs[k].numpy()[rows].copy()
        offset = len(node.design_inputs) + len(node.uncertainty_inputs)
        for i, j in enumerate(node.parents):
            z[:, offset + i] = rng.uniform(lo[j], hi[j], size=probes)
        for i, j in enumerate(node.parents):
            zp, zm = z.copy(), z.copy()
            zp[:, offset + i] += step
            zm[:, offset + i] -= step
            with torch.no_grad():
                fp = np.asarray(fns[k](torch.as_tensor(zp)), dtype=float)
                fm = np.asarray(fns[k](torch.as_tensor(zm)), dtype=float)
            L[(k, j)] = float(np.max(np.abs(fp - fm)) / (2 * step))
    parents = [list(n.parents) for n in net.nodes]
    return sensitivity_matrix(parents, L, output_node, net.is_acyclic)


def bound_curve(gamma_sum, n_designs: int, L_net: float, noise: float, kappa: float = 1.0,
                T=None) -> np.ndarray:
    """``kappa sqrt(2 (1 + log|X|) T) sqrt(L_net C1 gamma_sum(T))`` with
    ``C1 = 2 / log(1 + 1/sigma^2)``. ``kappa`` is an uncalibrated proxy, so only
    the growth in ``T`` is meaningful."""
    gamma_sum = np.asarray(gamma_sum, dtype=float)
    if T is None:
        T = np.arange(1, gamma_sum.size + 1)
    T = np.asarray(T, dtype=float)
    if np.any(gamma_sum < 0) or n_designs < 1 or L_net <= 0 or noise <= 0 or kappa <= 0:
        raise ValueError("bound inputs must be positive")
    c1 = regret_constant(noise)
    return kappa * np.sqrt(2 * (1 + math.log(n_designs)) * T) * np.sqrt(L_net * c1 * gamma_sum)


def regret_constant(noise: float) -> float:
    return 2.0 / math.log1p(1.0 / noise)


@dataclass
class LemmaRow:
    T: int
    final_simple: float  # mean of g* - g(xhat_T)
    average_simple: float  # mean of (1/T) sum_t (g* - g(xhat_t))
    cumulative_rate: float  # mean BCR_T / T
    se_first: float
    se_second: float
    holds: bool


def lemma1_check(curves: Sequence[RegretCurve], checkpoints=None, z: float = 2.0) -> list:
    """Across-seed check of ``BSR~_T <= avg_t BSR~_t <= BCR_T / T``.

    Each inequality passes when the mean gap is within ``z`` paired standard
    errors of satisfying it.
    """
    T_max = min(c.T for c in curves)
    checkpoints = [T_max] if checkpoints is None else [t for t in checkpoints if t <= T_max]
    n = len(curves)
    rows = []
    for T in checkpoints:
        final = np.array([c.simple[T - 1] for c in curves])
        avg = np.array([c.simple[:T].mean() for c in curves])
        rate = np.array([c.cumulative[T - 1] / T for c in curves])
        d1, d2 = avg - final, rate - avg
        se1 = d1.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
        se2 = d2.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
        holds = d1.mean() >= -z * se1 - 1e-12 and d2.mean() >= -z * se2 - 1e-12
        rows.append(LemmaRow(T, float(final.mean()), float(avg.mean()), float(rate.mean()),
                             float(se1), float(se2), bool(holds)))
    return rows


def gamma_sum(problem: FiniteDesignProblem, T: int) -> np.ndarray:
    """Sum over black-box nodes of greedy information gain on the node inputs
    the design set induces."""
    total = np.zeros(T)
    for k in problem.net.black_box_nodes:
        p = problem.params[k]
        total += mig_greedy(KernelParams(p.output_scale, p.lengthscales), problem.node_inputs(k),
                            T, p.noise_variance)
    return total


def k1_equivalence(seed: int, T: int = 30, n_designs: int = 50) -> bool:
    """Single-node network TS reproduces classical GP-TS query for query."""
    problem = single_node_problem(seed, n_designs)
    curve = nominal_ts_run(problem, T, seed)
    f = problem.net.nodes[0].func

    def f_true(X):
        with torch.no_grad():
            return f(torch.as_tensor(X)).numpy()

    ref = gp_ts_reference(problem.X, f_true, problem.params[0], T, seed)
    return bool(np.array_equal(curve.queries, ref))
