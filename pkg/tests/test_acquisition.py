import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bonsai_rbo.acquisition import (AcquisitionError, AcquisitionOptions, DesignBox,
                                    QuantileNetwork, UncertaintySet, fat_extremum, inner_min,
                                    maxmin_search, recommend, solve_outer_maxmin)
from bonsai_rbo.benchmarks import make_benchmark
from bonsai_rbo.network import FunctionNetwork, NodeSpec, WHITE_BOX
from bonsai_rbo.pathwise import NetworkSample

FAST = AcquisitionOptions(raw=128, starts=4, steps=60, population=24, generations=40)


def fat_oracle(q, tau):
    # direct transcription: max + tau log sum 1 / (1 + ((q - max) / tau)^2)
    m = max(q)
    return m + tau * math.log(sum(1.0 / (1.0 + ((v - m) / tau) ** 2) for v in q))


class TableModel:
    """Scenario values from a fixed function of (x, w)."""

    differentiable = True

    def __init__(self, fn):
        self.fn = fn

    def scenario_values(self, x, W, mask_failures=None):
        return self.fn(x.unsqueeze(1), W.unsqueeze(0))


class TestFatExtremum:
    def test_singleton_identity(self):
        for v in (-3.7, 0.0, 1e6):
            assert fat_extremum([v], 0.1) == v
            assert fat_extremum([v], 0.1, "min") == v

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.floats(1e-3, 10.0))
    def test_bounds(self, q, tau):
        v = fat_extremum(q, tau)
        assert max(q) - 1e-9 <= v <= max(q) + tau * math.log(len(q)) + 1e-9

    def test_matches_direct_formula(self):
        q = [0.3, -1.2, 0.29, 2.0, 1.95]
        assert fat_extremum(q, 0.5) == pytest.approx(fat_oracle(q, 0.5), rel=1e-14)
        assert fat_extremum(q, 0.5, "min") == pytest.approx(-fat_oracle([-v for v in q], 0.5), rel=1e-14)

    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = torch.as_tensor(rng.normal(size=7)).requires_grad_(True)
            (g,) = torch.autograd.grad(fat_extremum(q, 0.3), q)
            h = 1e-6
            fd = np.array([(fat_extremum(q.detach().numpy() + h * e, 0.3)
                            - fat_extremum(q.detach().numpy() - h * e, 0.3)) / (2 * h) for e in np.eye(7)])
            rel = np.linalg.norm(g.numpy() - fd) / np.linalg.norm(fd)
            assert rel < 1e-5

    def test_batched_dim(self):
        q = torch.tensor([[1.0, 2.0], [5.0, -1.0]], dtype=torch.float64)
        out = fat_extremum(q, 0.1, "min", dim=1)
        assert out.shape == (2,)
        assert out[0].item() == pytest.approx(fat_oracle([-1.0, -2.0], 0.1) * -1)

    @pytest.mark.parametrize("kwargs", [dict(tau=0.0), dict(tau=1.0, mode="median")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            fat_extremum([1.0, 2.0], **kwargs)

    def test_empty(self):
        with pytest.raises(ValueError):
            fat_extremum([], 1.0)


class TestSets:
    def test_product_order(self):
        W = UncertaintySet.product([[0, 1], [10, 20, 30]], nominal=[0, 10])
        assert W.m == 6
        assert W.points[1].tolist() == [0, 20]
        assert W.index_of([1, 30]) == 5

    def test_nominal_shape(self):
        with pytest.raises(ValueError):
            UncertaintySet([[0.0], [1.0]], nominal=[0.0, 1.0])

    def test_box(self, rng):
        box = DesignBox([-1, 0], [1, 3])
        pts = box.sobol(rng, 64)
        assert all(box.contains(p) for p in pts)
        assert box.clamp([5, -5]).tolist() == [1, 0]
        with pytest.raises(ValueError):
            DesignBox([1.0], [0.0])


class TestInnerStage:
    def test_ties_go_to_lowest_index(self):
        model = TableModel(lambda x, w: torch.zeros(x.shape[0], w.shape[1], dtype=torch.float64))
        W = UncertaintySet([[0.0], [1.0], [2.0]], [0.0])
        w, value, _, _ = inner_min(model, [0.5], W)
        assert w.tolist() == [0.0] and value == 0.0

    def test_picks_minimum(self):
        model = TableModel(lambda x, w: (x - w).pow(2).sum(-1))
        W = UncertaintySet([[0.0], [1.0], [2.0]], [0.0])
        w, value, _, _ = inner_min(model, [0.9], W)
        assert w.tolist() == [1.0] and value == pytest.approx(0.01)

    def test_all_failed(self):
        model = TableModel(lambda x, w: torch.full((x.shape[0], w.shape[1]), math.inf, dtype=torch.float64))
        with pytest.raises(AcquisitionError):
            inner_min(model, [0.0], UncertaintySet([[0.0]], [0.0]))


class TestOuterSearch:
    def test_known_saddle(self):
        # max_x min_w -(x - w)^2 - x^2 over w in {-1, 1}: optimum x = 0
        model = TableModel(lambda x, w: -(x - w).pow(2).sum(-1) - x.pow(2).sum(-1))
        W = UncertaintySet([[-1.0], [1.0]], [0.0])
        x = solve_outer_maxmin(model, DesignBox([-2.0], [2.0]), W, FAST, np.random.default_rng(0))
        assert abs(x[0]) < 1e-3

    def test_true_network_recovers_oracle(self):
        b = make_benchmark("figure2")
        net = b.problem.net
        model = NetworkSample(net, net.true_evaluators(), "truth")
        x, value, diag = maxmin_search(model, b.problem.X, b.problem.W, FAST, np.random.default_rng(1))
        assert abs(x[0] - math.sqrt(5)) < 1e-3
        assert diag["restarts"] == FAST.starts

    def test_result_inside_box(self):
        b = make_benchmark("modified_sine")
        net = b.problem.net
        model = NetworkSample(net, net.true_evaluators(), "truth")
        x = solve_outer_maxmin(model, b.problem.X, b.problem.W, FAST, np.random.default_rng(2))
        assert b.problem.X.contains(x)
        assert b.problem.worst_case(x)[0] > -0.9

    def test_cyclic_uses_evolutionary_search(self):
        # h1 = x + 0.5 h2 - w, h2 = -x^2 + 0.5 h1 (linear in h, unique solution)
        f1 = (lambda z: z[..., 0] - z[..., 1] + 0.5 * z[..., 2])
        f2 = (lambda z: -z[..., 0] ** 2 + 0.5 * z[..., 1])
        net = FunctionNetwork([NodeSpec("h1", WHITE_BOX, (0,), (0,), (1,), f1),
                               NodeSpec("h2", WHITE_BOX, (0,), (), (0,), f2)], [0.0, 1.0], 1, 1)
        model = NetworkSample(net, net.true_evaluators(), "truth")
        assert not model.differentiable
        W = UncertaintySet([[0.0], [0.5]], [0.0])
        x, value, diag = maxmin_search(model, DesignBox([-2.0], [2.0]), W, FAST, np.random.default_rng(0))
        # 0.75 h2 = -x^2 + x/2 - w/2 is maximized at x = 1/4 for every w
        assert abs(x[0] - 0.25) < 0.02
        assert diag["tau"] is None

    def test_degenerate_box(self):
        model = TableModel(lambda x, w: x.sum(-1) + 0 * w.sum(-1))
        x = solve_outer_maxmin(model, DesignBox([1.0], [1.0]), UncertaintySet([[0.0]], [0.0]), FAST,
                               np.random.default_rng(0))
        assert x.tolist() == [1.0]


class TestRecommend:
    def test_quantile_below_mean(self):
        samples = [TableModel(lambda x, w, s=s: torch.full((x.shape[0], w.shape[1]), float(s),
                                                           dtype=torch.float64)) for s in range(20)]
        for m in samples:
            m.differentiable = True
        q = QuantileNetwork(samples, 0.05)
        v = q.scenario_values(torch.zeros(1, 1, dtype=torch.float64), torch.zeros(2, 1, dtype=torch.float64))
        assert torch.allclose(v, torch.full((1, 2), 0.95, dtype=torch.float64))

    def test_unknown_rule(self):
        b = make_benchmark("figure2")
        with pytest.raises(ValueError):
            recommend([None] * 3, b.problem.net, b.problem.X, b.problem.W, rule="best")
