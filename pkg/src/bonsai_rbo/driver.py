"""The BONSAI loop, its baselines, and the worst-case performance metric."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .acquisition import (
    GPFN_MEAN,
    GPFN_QUANTILE,
    AcquisitionError,
    AcquisitionOptions,
    AcquisitionResult,
    maxmin_search,
    recommend,
    solve_inner_stage,
)
from .gp import KernelParams, NodeDataset, NodeGP, fit_hyperparameters, fit_posterior
from .network import FixedPointError, NodeEvaluationError, NetworkState, evaluate
from .pathwise import draw_network_sample
from .problem import RobustProblem

log = logging.getLogger(__name__)

BONSAI = "BONSAI"
RANDOM = "Random"
ARBO_GP = "ARBO-GP"
ARBO_GP_QUANTILE = "ARBO-GP-Quantile"
STRATEGIES = (BONSAI, RANDOM, ARBO_GP, ARBO_GP_QUANTILE)

GP_MEAN = "gp"
GP_QUANTILE = "gp_quantile"
RECOMMENDERS = (GPFN_MEAN, GPFN_QUANTILE, GP_MEAN, GP_QUANTILE)
DEFAULT_RECOMMENDER = {BONSAI: GPFN_MEAN, RANDOM: GPFN_MEAN, ARBO_GP: GP_MEAN,
                       ARBO_GP_QUANTILE: GP_QUANTILE}

ARBO_BETA = 2.0
RUN_SCHEMA = "bonsai_run/1"
STREAMS = ("init", "ts_x", "ts_w", "optimizer", "fit", "recommend")


@dataclass
class RunSettings:
    """Per-run knobs shared by all strategies."""

    acquisition: AcquisitionOptions = field(default_factory=AcquisitionOptions)
    recommend_every: int = 5
    fit_restarts: int = 8
    refit_restarts: int = 2  # warm-started refits after the first
    fit_maxiter: int = 100
    refit_every: int = 1
    quantile_alpha: float = 0.05
    quantile_samples: int = 256
    recommender: Optional[str] = None


@dataclass
class QueryRow:
    iteration: int  # number of evaluations after this query
    stage: str  # init | acquire | random | fallback
    x: np.ndarray
    w: np.ndarray
    H: np.ndarray
    node_inputs: list
    wall_time: float = 0.0


@dataclass
class Recommendation:
    evaluations: int
    x: np.ndarray
    worst_case: float


@dataclass
class RunRecord:
    seed: int
    strategy: str
    problem: str
    budget: int
    queries: List[QueryRow] = field(default_factory=list)
    recommendations: List[Recommendation] = field(default_factory=list)
    failures: int = 0

    @property
    def evaluations(self) -> int:
        return len(self.queries)

    def final_value(self) -> float:
        return self.recommendations[-1].worst_case if self.recommendations else math.nan

    def rows(self, n_x: int, n_w: int, K: int) -> list:
        header = (["iteration", "stage"] + [f"x{i}" for i in range(n_x)]
                  + [f"w{i}" for i in range(n_w)] + [f"h{k}" for k in range(K)]
                  + ["recommendation", "worst_case"])
        out = [header]
        recs = {r.evaluations: r for r in self.recommendations}
        fmt = repr
        for q in self.queries:
            out.append([q.iteration, q.stage] + [fmt(float(v)) for v in q.x]
                       + [fmt(float(v)) for v in q.w] + [fmt(float(v)) for v in q.H] + [0, ""])
            r = recs.get(q.iteration)
            if r is not None:
                out.append([r.evaluations, "recommend"] + [fmt(float(v)) for v in r.x]
                           + [""] * (n_w + K) + [1, fmt(float(r.worst_case))])
        return out

    def write_csv(self, path, problem: RobustProblem) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema={RUN_SCHEMA} version={__version__} problem={self.problem} "
                     f"strategy={self.strategy} seed={self.seed} budget={self.budget}\n")
            csv.writer(fh).writerows(self.rows(problem.n_x, problem.n_w, problem.net.K))


def spawn_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Independent generators per purpose, derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def _node_bounds(problem: RobustProblem, k: int) -> np.ndarray:
    node = problem.net.nodes[k]
    W = problem.W.points
    rows = [[problem.X.lower[i], problem.X.upper[i]] for i in node.design_inputs]
    rows += [[W[:, i].min(), W[:, i].max()] for i in node.uncertainty_inputs]
    rows += [[np.nan, np.nan]] * len(node.parents)
    return np.asarray(rows, dtype=float)


def _true_state(problem: RobustProblem, x: np.ndarray, w: np.ndarray) -> NetworkState:
    with torch.no_grad():
        return evaluate(problem.net, None, torch.as_tensor(x), torch.as_tensor(w))


def _query(problem: RobustProblem, x, w, iteration: int, stage: str) -> QueryRow:
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    state = _true_state(problem, x, w)
    return QueryRow(iteration, stage, x, w, state.H.numpy().copy(),
                    [z.numpy().copy() for z in state.inputs])


def random_query(problem: RobustProblem, rng: np.random.Generator):
    x = problem.X.uniform(rng, 1)[0]
    w = problem.W.points[rng.integers(problem.W.m)].copy()
    return x, w


@dataclass
class NetworkModelState:
    """Per-node datasets and posteriors of the function-network surrogate."""

    problem: RobustProblem
    datasets: Dict[int, NodeDataset]
    params: Dict[int, KernelParams] = field(default_factory=dict)
    gps: List[Optional[NodeGP]] = field(default_factory=list)
    fits: int = 0

    @classmethod
    def empty(cls, problem: RobustProblem) -> "NetworkModelState":
        data = {}
        for k in problem.net.black_box_nodes:
            bounds = _node_bounds(problem, k)
            data[k] = NodeDataset.empty(problem.net.nodes[k].input_dim, input_bounds=bounds)
        return cls(problem, data)

    def add(self, row: QueryRow) -> None:
        for k in self.datasets:
            self.datasets[k] = self.datasets[k].append(row.node_inputs[k], row.H[k])

    def refit(self, settings: RunSettings, rng: np.random.Generator, hyper: bool = True) -> None:
        gps: List[Optional[NodeGP]] = [None] * self.problem.net.K
        for k, data in self.datasets.items():
            if hyper or k not in self.params:
                restarts = settings.refit_restarts if k in self.params else settings.fit_restarts
                self.params[k] = fit_hyperparameters(
                    data, restarts=restarts, rng=rng, init=self.params.get(k),
                    maxiter=settings.fit_maxiter)
            gps[k] = fit_posterior(None, data, self.params[k])
        self.gps = gps
        self.fits += 1


class JointBound:
    """``mu + beta * sigma`` of a joint GP over ``(x, w)`` as a scenario model."""

    differentiable = True

    def __init__(self, gp: NodeGP, beta: float):
        self.view = gp.torch_view()
        self.beta = beta

    def scenario_values(self, x, W, mask_failures=None):
        B, m = x.shape[0], W.shape[0]
        z = torch.cat([x.unsqueeze(1).expand(B, m, x.shape[-1]),
                       W.unsqueeze(0).expand(B, m, W.shape[-1])], -1)
        if self.beta == 0.0:
            return self.view.mean(z)
        mean, var = self.view.mean_and_variance(z)
        # the 1e-30 floor keeps the sqrt gradient finite at interpolated points
        return mean + self.beta * torch.sqrt(var + 1e-30)


@dataclass
class JointModelState:
    """ARBO's single GP on the scalar objective."""

    problem: RobustProblem
    data: NodeDataset
    params: Optional[KernelParams] = None
    gp: Optional[NodeGP] = None

    @classmethod
    def empty(cls, problem: RobustProblem) -> "JointModelState":
        W = problem.W.points
        bounds = np.vstack([np.column_stack([problem.X.lower, problem.X.upper]),
                            np.column_stack([W.min(0), W.max(0)])])
        return cls(problem, NodeDataset.empty(problem.n_x + problem.n_w, input_bounds=bounds))

    def add(self, row: QueryRow) -> None:
        g = float(row.H @ self.problem.net.c)
        self.data = self.data.append(np.concatenate([row.x, row.w]), g)

    def refit(self, settings: RunSettings, rng: np.random.Generator, hyper: bool = True) -> None:
        if hyper or self.params is None:
            restarts = settings.fit_restarts if self.params is None else settings.refit_restarts
            self.params = fit_hyperparameters(self.data, restarts=restarts, rng=rng,
                                              init=self.params, maxiter=settings.fit_maxiter)
        self.gp = fit_posterior(None, self.data, self.params)


def initialize(problem: RobustProblem, rng: np.random.Generator) -> List[QueryRow]:
    """``2 n_x + 2 n_w + 1`` uniform joint draws over ``X x W``, evaluated exactly."""
    rows = []
    for i in range(problem.n_init):
        x, w = random_query(problem, rng)
        try:
            rows.append(_query(problem, x, w, i + 1, "init"))
        except (NodeEvaluationError, FixedPointError) as exc:
            raise RuntimeError(f"initial evaluation {i + 1} failed after {len(rows)} "
                               f"successful points: {exc}") from exc
    return rows


def bonsai_acquire(model: NetworkModelState, settings: RunSettings,
                   streams: Dict[str, np.random.Generator]) -> AcquisitionResult:
    """Two independent network samples: max-min over x, then min over w."""
    problem, opts = model.problem, settings.acquisition
    sample_x = draw_network_sample(problem.net, model.gps, opts.features, streams["ts_x"], "design")
    sample_w = draw_network_sample(problem.net, model.gps, opts.features, streams["ts_w"],
                                   "uncertainty")
    x_next, _, diag = maxmin_search(sample_x, problem.X, problem.W, opts, streams["optimizer"])
    w_next, state, value = solve_inner_stage(sample_w, x_next, problem.W)
    return AcquisitionResult(x_next, w_next, state, value, diag)


def bonsai_step(model: NetworkModelState, iteration: int, settings: RunSettings,
                streams: Dict[str, np.random.Generator]):
    """One acquisition plus true evaluation. Returns ``(QueryRow, failed)``; the
    model is updated in place and refitted."""
    t0 = time.perf_counter()
    failed = False
    try:
        res = bonsai_acquire(model, settings, streams)
        row = _query(model.problem, res.x_next, res.w_next, iteration, "acquire")
    except (AcquisitionError, FixedPointError, NodeEvaluationError, np.linalg.LinAlgError) as exc:
        log.warning("acquisition %d failed (%s); querying a random point", iteration, exc)
        failed = True
        x, w = random_query(model.problem, streams["init"])
        row = _query(model.problem, x, w, iteration, "fallback")
    model.add(row)
    model.refit(settings, streams["fit"], hyper=iteration % settings.refit_every == 0)
    row.wall_time = time.perf_counter() - t0
    return row, failed


def arbo_acquire(model: JointModelState, settings: RunSettings,
                 streams: Dict[str, np.random.Generator]):
    """Optimistic max over x of the upper bound's worst case, then the
    pessimistic (lower-bound) worst w at that x."""
    problem = model.problem
    ucb = JointBound(model.gp, ARBO_BETA)
    x_next, _, _ = maxmin_search(ucb, problem.X, problem.W, settings.acquisition,
                                 streams["optimizer"])
    w_next, _, _ = solve_inner_stage(JointBound(model.gp, -ARBO_BETA), x_next, problem.W)
    return x_next, w_next


def _joint_model_from(problem: RobustProblem, rows: Sequence[QueryRow], settings: RunSettings,
                      rng: np.random.Generator) -> JointModelState:
    joint = JointModelState.empty(problem)
    for r in rows:
        joint.add(r)
    joint.refit(settings, rng)
    return joint


def make_recommendation(rule: str, problem: RobustProblem, net_model: Optional[NetworkModelState],
                        joint_model: Optional[JointModelState], rows: Sequence[QueryRow],
                        settings: RunSettings, rng: np.random.Generator) -> np.ndarray:
    opts = settings.acquisition
    if rule in (GPFN_MEAN, GPFN_QUANTILE):
        if net_model is None:
            net_model = NetworkModelState.empty(problem)
            for r in rows:
                net_model.add(r)
            net_model.refit(settings, rng)
        return recommend(net_model.gps, problem.net, problem.X, problem.W, rule,
                         settings.quantile_alpha, settings.quantile_samples, opts, rng)
    if rule in (GP_MEAN, GP_QUANTILE):
        if joint_model is None:
            joint_model = _joint_model_from(problem, rows, settings, rng)
        beta = 0.0 if rule == GP_MEAN else -ARBO_BETA
        x, _, _ = maxmin_search(JointBound(joint_model.gp, beta), problem.X, problem.W, opts, rng)
        return x
    raise ValueError(f"unknown recommender {rule!r}; valid: {RECOMMENDERS}")


def recommendation_points(n_init: int, budget: int, every: int) -> list:
    pts = list(range(n_init, budget + 1, every))
    if pts[-1] != budget:
        pts.append(budget)
    return pts


def run_strategy(problem: RobustProblem, strategy: str, budget: int, seed: int,
                 settings: Optional[RunSettings] = None) -> RunRecord:
    """Run one strategy to ``budget`` total evaluations (initial design included)."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; valid: {STRATEGIES}")
    if budget < problem.n_init:
        raise ValueError(f"budget {budget} is below the initial design size {problem.n_init}")
    settings = RunSettings() if settings is None else settings
    rule = settings.recommender or DEFAULT_RECOMMENDER[strategy]
    streams = spawn_streams(seed)
    record = RunRecord(seed, strategy, problem.name, budget)
    rec_at = set(recommendation_points(problem.n_init, budget, settings.recommend_every))

    t0 = time.perf_counter()
    rows = initialize(problem, streams["init"])
    for r in rows:
        r.wall_time = (time.perf_counter() - t0) / len(rows)
    record.queries.extend(rows)

    net_model = joint_model = None
    if strategy == BONSAI:
        net_model = NetworkModelState.empty(problem)
        for r in rows:
            net_model.add(r)
        net_model.refit(settings, streams["fit"])
    elif strategy in (ARBO_GP, ARBO_GP_QUANTILE):
        joint_model = _joint_model_from(problem, rows, settings, streams["fit"])

    def maybe_recommend(n):
        if n not in rec_at:
            return
        nm = net_model if rule in (GPFN_MEAN, GPFN_QUANTILE) else None
        jm = joint_model if rule in (GP_MEAN, GP_QUANTILE) else None
        try:
            x = make_recommendation(rule, problem, nm, jm, record.queries, settings,
                                    streams["recommend"])
        except (AcquisitionError, FixedPointError, NodeEvaluationError) as exc:
            log.warning("recommendation at %d failed: %s", n, exc)
            record.failures += 1
            return
        record.recommendations.append(Recommendation(n, x, float(problem.worst_case(x)[0])))

    maybe_recommend(len(record.queries))
    while len(record.queries) < budget:
        it = len(record.queries) + 1
        if strategy == BONSAI:
            row, failed = bonsai_step(net_model, it, settings, streams)
            record.failures += int(failed)
        else:
            t1 = time.perf_counter()
            if strategy == RANDOM:
                x, w = random_query(problem, streams["init"])
                row = _query(problem, x, w, it, "random")
            else:
                try:
                    x, w = arbo_acquire(joint_model, settings, streams)
                    row = _query(problem, x, w, it, "acquire")
                except (AcquisitionError, FixedPointError, NodeEvaluationError) as exc:
                    log.warning("ARBO acquisition %d failed (%s)", it, exc)
                    record.failures += 1
                    x, w = random_query(problem, streams["init"])
                    row = _query(problem, x, w, it, "fallback")
                joint_model.add(row)
                joint_model.refit(settings, streams["fit"], hyper=it % settings.refit_every == 0)
            row.wall_time = time.perf_counter() - t1
        record.queries.append(row)
        maybe_recommend(len(record.queries))
    return record


def metric_curve(record: RunRecord, problem: RobustProblem) -> np.ndarray:
    """``(evaluations, true worst-case value)`` at each recommendation."""
    if not record.recommendations:
        return np.zeros((0, 2))
    xs = np.array([r.x for r in record.recommendations])
    vals = problem.worst_case(xs)
    return np.column_stack([[r.evaluations for r in record.recommendations], vals])


def best_so_far(curve: np.ndarray) -> np.ndarray:
    out = np.array(curve, dtype=float, copy=True)
    if len(out):
        out[:, 1] = np.maximum.accumulate(out[:, 1])
    return out


def aggregate_curves(curves: Sequence[np.ndarray]) -> dict:
    """Mean curve and a 95% band of half-width ``1.96 * SE`` across seeds."""
    if not curves:
        raise ValueError("no curves to aggregate")
    evals = curves[0][:, 0]
    for c in curves[1:]:
        if c.shape != curves[0].shape or not np.array_equal(c[:, 0], evals):
            raise ValueError("curves have different recommendation schedules")
    vals = np.stack([c[:, 1] for c in curves], 0)
    mean = vals.mean(0)
    if len(curves) > 1:
        half = 1.96 * vals.std(0, ddof=1) / math.sqrt(len(curves))
    else:
        half = np.zeros_like(mean)
    return {"evaluations": evals, "mean": mean, "lower": mean - half, "upper": mean + half,
            "half_width": half}
