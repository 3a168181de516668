"""Benchmark networks and brute-force robust oracles.

Node functions take the node input ``z`` laid out as (design slice,
uncertainty slice, parent outputs) and are plain torch functions so they can
be referenced from config files as ``bonsai_rbo.benchmarks:<name>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
import torch

from .acquisition import DesignBox, UncertaintySet
from .network import BLACK_BOX, WHITE_BOX, FunctionNetwork, NodeSpec
from .problem import RobustProblem

MODULE = "bonsai_rbo.benchmarks"
MAX_GRID_CELLS = 5_000_000
ZOOM_ROUNDS = 3
ZOOM_POINTS = 41
LINE_POINTS = 60


def _sum_parents(z):
    return z.sum(-1)


# polynomial: z = (x_i or x, w1, w2)
def poly_h1(z):
    r = z[..., 0] + z[..., 1] * torch.cos(z[..., 2])
    return -2 * r**6 + 12.2 * r**5 - 21.2 * r**4 - 6.2 * r + 6.4 * r**3 + 4.7 * r**2


def poly_h1_as_printed(z):
    r = z[..., 0] + z[..., 1] * torch.cos(z[..., 2])
    return -2 * r**6 + 12.2 * r**5 - 21.2 * r - 6.2 * r + 6.4 * r**3 + 4.7 * r**2


def poly_h2(z):
    r = z[..., 0] + z[..., 1] * torch.sin(z[..., 2])
    return -r**6 + 11 * r**5 - 43.3 * r**4 + 10 * r + 74.8 * r**3 - 56.9 * r**2


def poly_h3(z):
    r1 = z[..., 0] + z[..., 2] * torch.cos(z[..., 3])
    r2 = z[..., 1] + z[..., 2] * torch.sin(z[..., 3])
    return 4.1 * r1 * r2 + 0.1 * r1**2 * r2**2 - 0.4 * r1 * r2**2 - 0.4 * r1**2 * r2


def poly_h4(z):
    return _sum_parents(z)


# cliff: z = (x_k, w_k)
def cliff_component(z):
    x, sw = z[..., 0], torch.sin(z[..., 1])
    return -10.0 / (1.0 + 0.3 * torch.exp(6 * x + 3 * sw)) - 0.2 * (x + 0.5 * sw) ** 2


def cliff_sum(z):
    return _sum_parents(z)


# rosenbrock
def rosen_h1(z):  # (x, w1)
    return (z[..., 0] + z[..., 1]) ** 2


def rosen_h2(z):  # (x, w1)
    return (z[..., 0] + z[..., 1] - 1) ** 2


def rosen_h3(z):  # (w2, h1)
    return (z[..., 0] - z[..., 1]) ** 2


def rosen_h4(z):  # (h2, h3)
    return -100 * z[..., 1] - z[..., 0]


# modified sine
def msine_shift(z):  # (x_i, w_i)
    return z[..., 0] + z[..., 1]


def msine_wave(z):  # (h)
    return -torch.sin(2 * math.pi * z[..., 0] ** 2)


def msine_bowl(z):  # (h)
    h = z[..., 0]
    return -h**2 - 0.2 * h


def msine_sum(z):
    return _sum_parents(z)


# vibration absorber: z = (x1, x2, w1)
VIB_C1 = 0.1
VIB_C2 = 0.1


def vib_h1(z):
    x1, x2, w = z[..., 0], z[..., 1], z[..., 2]
    return torch.sqrt((1 - w**2 / x2**2) ** 2 + 4 * (x1 * w / x2) ** 2)


def vib_h2(z):
    x1, x2, w = z[..., 0], z[..., 1], z[..., 2]
    return (w**2 / x2**2 * (w**2 - 1) - w**2 * (1 + VIB_C1)
            - 4 * x1 * VIB_C2 * w**2 / x2 + 1)


def vib_h3(z):
    x1, x2, w = z[..., 0], z[..., 1], z[..., 2]
    return (VIB_C2 * w**3 / x2**2 + (x1 * w**3 * (1 + VIB_C1) - x1 * w) / x2 - VIB_C2 * w)


def vib_h4(z):  # (h1, h2, h3)
    h1, h2, h3 = z[..., 0], z[..., 1], z[..., 2]
    return -h1 / torch.sqrt(h2**2 + 4 * h3**2)


# illustrative two-node problem: z = (x, w)
def fig2_f1(z):
    return z[..., 0] ** 2 + z[..., 1] - 5


def fig2_f2(z):
    return z[..., 0] + z[..., 1] ** 2 - 1


def fig2_agg(z):  # (f1, f2)
    return -((z[..., 0] ** 2 + z[..., 1] ** 2) ** 2)


def _node(name, kind, fn, x=(), w=(), parents=()):
    return NodeSpec(name, kind, x, w, parents, fn, f"{MODULE}:{fn.__name__}")


@dataclass(frozen=True)
class Benchmark:
    """A registered problem plus the optimum as printed in the source."""

    name: str
    problem: RobustProblem
    printed_optimum: Tuple[np.ndarray, float]
    grid_resolution: int
    notes: str = ""
    variant: str = "default"


def _polynomial(variant):
    h1 = poly_h1_as_printed if variant == "as_printed" else poly_h1
    nodes = [
        _node("h1", BLACK_BOX, h1, x=(0,), w=(0, 1)),
        _node("h2", BLACK_BOX, poly_h2, x=(1,), w=(0, 1)),
        _node("h3", BLACK_BOX, poly_h3, x=(0, 1), w=(0, 1)),
        _node("h4", WHITE_BOX, poly_h4, parents=(0, 1, 2)),
    ]
    net = FunctionNetwork(nodes, [0, 0, 0, 1], 2, 2)
    W = UncertaintySet.product(
        [0.5 * np.array([0.0, 0.2, 0.4, 0.6, 1.0]),
         2 * np.pi * np.array([0.0, 0.1, 0.125, 0.2, 0.25, 0.3, 0.375, 0.45, 0.5,
                               0.575, 0.625, 0.7, 0.75, 0.875, 0.95, 1.0])],
        nominal=[0.0, 0.0],
    )
    X = DesignBox([-0.5, -0.5], [3.25, 4.25])
    notes = ("default uses -21.2 r1^4 in h1; the printed text has a second linear "
             "r1 term, under which the robust optimum sits at a box corner")
    return RobustProblem("polynomial", net, X, W), (np.array([-0.178, 0.289]), -4.2), notes


def _cliff(variant):
    nodes = [_node(f"h{k + 1}", BLACK_BOX, cliff_component, x=(k,), w=(k,)) for k in range(5)]
    nodes.append(_node("h6", WHITE_BOX, cliff_sum, parents=tuple(range(5))))
    net = FunctionNetwork(nodes, [0] * 5 + [1], 5, 5)
    axis = np.pi * np.array([0.0, 0.5, 1.0]) - np.pi / 2
    W = UncertaintySet.product([axis] * 5, nominal=np.zeros(5))
    X = DesignBox(np.zeros(5), np.full(5, 5.0))
    return RobustProblem("cliff", net, X, W), (np.full(5, 1.2), -2.9), ""


def _rosenbrock(variant):
    nodes = [
        _node("h1", BLACK_BOX, rosen_h1, x=(0,), w=(0,)),
        _node("h2", BLACK_BOX, rosen_h2, x=(0,), w=(0,)),
        _node("h3", BLACK_BOX, rosen_h3, w=(1,), parents=(0,)),
        _node("h4", WHITE_BOX, rosen_h4, parents=(1, 2)),
    ]
    net = FunctionNetwork(nodes, [0, 0, 0, 1], 1, 2)
    W = UncertaintySet.product([0.2 * np.arange(20) / 19 - 0.1, [-0.1, 0.0, 0.1]],
                               nominal=[0.0, 1.4])
    X = DesignBox([-1.0], [2.0])
    notes = ("implemented as printed; the printed optimum (x=1, -143.8) is not "
             "reproduced by these formulas (see decisions ledger)")
    return RobustProblem("rosenbrock", net, X, W), (np.array([1.0]), -143.8), notes


def _modified_sine(variant):
    nodes = [
        _node("h1", BLACK_BOX, msine_shift, x=(0,), w=(0,)),
        _node("h2", BLACK_BOX, msine_wave, parents=(0,)),
        _node("h3", BLACK_BOX, msine_bowl, parents=(0,)),
        _node("h4", BLACK_BOX, msine_shift, x=(1,), w=(1,)),
        _node("h5", BLACK_BOX, msine_wave, parents=(3,)),
        _node("h6", BLACK_BOX, msine_bowl, parents=(3,)),
        _node("h7", WHITE_BOX, msine_sum, parents=(1, 2, 4, 5)),
    ]
    net = FunctionNetwork(nodes, [0] * 6 + [1], 2, 2)
    axis = 0.5 * np.array([0.0, 0.33, 0.5, 0.66, 1.0]) - 0.25
    W = UncertaintySet.product([axis, axis], nominal=[0.0, 0.0])
    X = DesignBox([-1.0, -1.0], [1.0, 1.0])
    return RobustProblem("modified_sine", net, X, W), (np.zeros(2), -0.891), ""


def _vibration_absorber(variant):
    nodes = [
        _node("h1", BLACK_BOX, vib_h1, x=(0, 1), w=(0,)),
        _node("h2", BLACK_BOX, vib_h2, x=(0, 1), w=(0,)),
        _node("h3", BLACK_BOX, vib_h3, x=(0, 1), w=(0,)),
        _node("h4", WHITE_BOX, vib_h4, parents=(0, 1, 2)),
    ]
    net = FunctionNetwork(nodes, [0, 0, 0, 1], 2, 1)
    W = UncertaintySet(0.05 + 0.05 * np.arange(50), nominal=[1.275])
    if variant == "as_printed":
        X = DesignBox([0.05, 1.0], [0.5, 2.0])
    else:
        X = DesignBox([0.05, 0.1], [0.5, 2.0])
    notes = ("default widens x2 to [0.1, 2.0]: the printed optimum x2 = 0.862 lies "
             "outside the printed [1.0, 2.0] and is recovered exactly with the wider box")
    return (RobustProblem("vibration_absorber", net, X, W),
            (np.array([0.199, 0.862]), -2.623), notes)


def _figure2(variant):
    nodes = [
        _node("f1", BLACK_BOX, fig2_f1, x=(0,), w=(0,)),
        _node("f2", BLACK_BOX, fig2_f2, x=(0,), w=(0,)),
        _node("g", WHITE_BOX, fig2_agg, parents=(0, 1)),
    ]
    net = FunctionNetwork(nodes, [0, 0, 1], 1, 1)
    W = UncertaintySet(np.linspace(-1.0, 1.0, 21), nominal=[0.0])
    X = DesignBox([-2.5], [2.5])
    return RobustProblem("figure2", net, X, W), None, "W discretized to 21 points on [-1, 1]"


_REGISTRY = {
    "polynomial": (_polynomial, 400, ("default", "as_printed")),
    "cliff": (_cliff, LINE_POINTS, ("default",)),
    "rosenbrock": (_rosenbrock, 400, ("default",)),
    "modified_sine": (_modified_sine, 400, ("default",)),
    "vibration_absorber": (_vibration_absorber, 400, ("default", "as_printed")),
    "figure2": (_figure2, 1000, ("default",)),
}

BENCHMARK_NAMES = tuple(_REGISTRY)


def make_benchmark(name: str, variant: str = "default") -> Benchmark:
    if name not in _REGISTRY:
        raise ValueError(f"unknown benchmark {name!r}; valid names: {', '.join(BENCHMARK_NAMES)}")
    builder, grid, variants = _REGISTRY[name]
    if variant not in variants:
        raise ValueError(f"benchmark {name!r} has variants {variants}, got {variant!r}")
    problem, printed, notes = builder(variant)
    if printed is not None and variant == "default" and name != "rosenbrock":
        problem = RobustProblem(problem.name, problem.net, problem.X, problem.W,
                                (printed[0], printed[1]))
    return Benchmark(name, problem, printed, grid, notes, variant)


@dataclass
class OracleResult:
    x: np.ndarray
    value: float
    points: np.ndarray  # evaluated designs (grid rows or search trace)
    values: np.ndarray  # G at those designs
    axes: Optional[list] = None  # per-dimension grid when ``points`` is a full grid
    evaluations: int = 0


class GridResolutionError(ValueError):
    pass


def _grid(box: DesignBox, n: int):
    axes = [np.linspace(lo, hi, n) if hi > lo else np.array([lo]) for lo, hi in zip(box.lower, box.upper)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, box.dim)
    return axes, mesh


def _zoom(score: Callable, box: DesignBox, x: np.ndarray, value: float, step: np.ndarray):
    """Repeated local grids around the incumbent, shrinking each round."""
    for _ in range(ZOOM_ROUNDS):
        lo = np.maximum(box.lower, x - 2 * step)
        hi = np.minimum(box.upper, x + 2 * step)
        _, pts = _grid(DesignBox(lo, hi), ZOOM_POINTS if box.dim == 1 else 21)
        vals = score(pts)
        j = int(np.argmax(vals))
        if vals[j] > value:
            x, value = pts[j], float(vals[j])
        step = (hi - lo) / (ZOOM_POINTS - 1 if box.dim == 1 else 20)
    return x, value


def _coordinate_search(score: Callable, box: DesignBox, n: int, sweeps: int = 3):
    """Cyclic coordinate ascent on ``n``-point lines, refined by zooming per
    coordinate. Exact for separable objectives."""
    x = 0.5 * (box.lower + box.upper)
    value = float(score(x[None])[0])
    trace_x, trace_v = [x.copy()], [value]
    for _ in range(sweeps):
        before = value
        for d in range(box.dim):
            span = box.upper[d] - box.lower[d]
            line = np.linspace(box.lower[d], box.upper[d], n)
            step = span / (n - 1)
            for _ in range(ZOOM_ROUNDS + 1):
                pts = np.repeat(x[None], line.size, 0)
                pts[:, d] = line
                vals = score(pts)
                trace_x.append(pts)
                trace_v.append(vals)
                j = int(np.argmax(vals))
                if vals[j] >= value:
                    x, value = pts[j].copy(), float(vals[j])
                c = x[d]
                line = np.linspace(max(box.lower[d], c - 2 * step), min(box.upper[d], c + 2 * step),
                                   ZOOM_POINTS)
                step = (line[-1] - line[0]) / (ZOOM_POINTS - 1)
        if value - before <= 1e-12 * max(1.0, abs(value)):
            break
    pts = np.vstack([np.atleast_2d(p) for p in trace_x])
    vals = np.concatenate([np.atleast_1d(v) for v in trace_v])
    return x, value, pts, vals


def _search(problem: RobustProblem, score: Callable, grid: int) -> OracleResult:
    box = problem.X
    if box.dim <= 2:
        cells = grid**box.dim
        if cells * problem.W.m > MAX_GRID_CELLS * 50:
            coarse = int((MAX_GRID_CELLS * 50 / problem.W.m) ** (1 / box.dim))
            raise GridResolutionError(
                f"grid of {grid}^{box.dim} x {problem.W.m} scenarios exceeds the memory budget; "
                f"try grid <= {coarse}"
            )
        axes, pts = _grid(box, grid)
        vals = score(pts)
        j = int(np.argmax(vals))
        step = box.span / max(grid - 1, 1)
        x, value = _zoom(score, box, pts[j].copy(), float(vals[j]), step)
        return OracleResult(x, value, pts, vals, axes, len(pts))
    x, value, pts, vals = _coordinate_search(score, box, grid)
    return OracleResult(x, value, pts, vals, None, len(pts))


def robust_oracle(bench, grid: Optional[int] = None) -> OracleResult:
    """Exact ``max_x min_j g(x, w_j)`` by grid search plus local zooming.

    Designs of dimension 3 or more use coordinate search, which is exact for
    separable problems such as Cliff.
    """
    problem = bench.problem if isinstance(bench, Benchmark) else bench
    grid = (bench.grid_resolution if isinstance(bench, Benchmark) else 400) if grid is None else grid
    return _search(problem, problem.worst_case, grid)


def nominal_oracle(bench, grid: Optional[int] = None) -> OracleResult:
    """``max_x g(x, w_bar)`` on the same grid."""
    problem = bench.problem if isinstance(bench, Benchmark) else bench
    grid = (bench.grid_resolution if isinstance(bench, Benchmark) else 400) if grid is None else grid
    return _search(problem, problem.nominal_value, grid)
