import numpy as np
import pytest
import torch

from bonsai_rbo.benchmarks import make_benchmark
from bonsai_rbo.network import (BLACK_BOX, WHITE_BOX, CyclicGraphError, FixedPointError,
                                FunctionNetwork, InvalidStateError, NodeEvaluationError, NodeSpec,
                                evaluate, evaluate_acyclic, fixed_point, objective,
                                solve_fixed_point, topological_order)


def add_x(z):
    return z[..., 0] + z[..., 1]


def half_sum(z):
    return 0.5 * z.sum(-1)


def two_cycle(a=0.5):
    # h1 = x + a h2, h2 = w + a h1
    f = (lambda z: z[..., 0] + a * z[..., 1])
    nodes = [NodeSpec("h1", WHITE_BOX, (0,), (), (1,), f),
             NodeSpec("h2", WHITE_BOX, (), (0,), (0,), f)]
    return FunctionNetwork(nodes, [1.0, 1.0], 1, 1)


class TestStructure:
    def test_index_validation(self):
        with pytest.raises(ValueError):
            FunctionNetwork([NodeSpec("a", WHITE_BOX, (3,), (), (), add_x)], [1.0], 1, 0)

    def test_c_length(self):
        with pytest.raises(ValueError):
            FunctionNetwork([NodeSpec("a", WHITE_BOX, (0,), (), (), add_x)], [1.0, 2.0], 1, 0)

    def test_cycle_detection(self):
        assert not two_cycle().is_acyclic
        with pytest.raises(CyclicGraphError):
            topological_order(two_cycle())

    def test_rosenbrock_layout(self):
        net = make_benchmark("rosenbrock").problem.net
        assert net.K == 4 and net.is_acyclic
        assert list(net.c) == [0, 0, 0, 1]
        assert net.black_box_nodes == [0, 1, 2]
        order = topological_order(net)
        assert order.index(0) < order.index(2) < order.index(3)

    def test_json_roundtrip(self):
        net = make_benchmark("polynomial").problem.net
        back = FunctionNetwork.loads(net.dumps())
        assert back.dumps() == net.dumps()
        x = torch.tensor([[0.3, 1.2]], dtype=torch.float64)
        w = torch.tensor([[0.2, 1.0]], dtype=torch.float64)
        assert torch.equal(evaluate(net, None, x, w).H, evaluate(back, None, x, w).H)

    def test_node_input_layout(self):
        net = make_benchmark("rosenbrock").problem.net
        x = torch.tensor([[0.7]], dtype=torch.float64)
        w = torch.tensor([[0.05, -0.1]], dtype=torch.float64)
        state = evaluate(net, None, x, w)
        # h3 reads (w2, h1)
        z = state.inputs[2][0]
        assert z[0].item() == -0.1 and z[1].item() == state.H[0, 0].item()


class TestFixedPoint:
    def test_linear_contraction(self):
        H, conv, res = fixed_point(lambda h: 0.5 * h + 1.0, torch.zeros(1, dtype=torch.float64))
        assert bool(conv.all())
        assert abs(H.item() - 2.0) < 1e-8

    def test_two_cycle_closed_form(self):
        net = two_cycle(0.5)
        x = torch.tensor([[1.0], [-2.0]], dtype=torch.float64)
        w = torch.tensor([[0.5], [3.0]], dtype=torch.float64)
        st = solve_fixed_point(net, None, x, w)
        a = 0.5
        h1 = (x[:, 0] + a * w[:, 0]) / (1 - a * a)
        h2 = w[:, 0] + a * h1
        assert torch.allclose(st.H[:, 0], h1, atol=1e-7)
        assert torch.allclose(st.H[:, 1], h2, atol=1e-7)
        assert st.all_converged

    def test_acyclic_equivalence_exact(self):
        p = make_benchmark("rosenbrock").problem
        x = torch.as_tensor(np.linspace(-1, 2, 11)[:, None])
        w = torch.as_tensor(p.W.points[::5][:11])
        a = evaluate_acyclic(p.net, None, x, w)
        b = solve_fixed_point(p.net, None, x, w)
        assert torch.equal(a.H, b.H)

    def test_divergent_map_reports_failure(self):
        net = two_cycle(2.0)
        st = solve_fixed_point(net, None, [[1.0]], [[1.0]], max_iter=20, raise_on_failure=False)
        # a = 2 has a unique fixed point that the least-squares fallback recovers
        assert st.all_converged
        h1 = (1.0 + 2.0) / (1 - 4.0)
        assert st.H[0, 0].item() == pytest.approx(h1, abs=1e-6)

    def test_nonconvergent_picard_falls_back_to_root(self):
        H, conv, _ = fixed_point(lambda h: 2.0 * h + 1.0, torch.zeros(1, dtype=torch.float64))
        assert bool(conv.all())
        assert H.item() == pytest.approx(-1.0, abs=1e-8)

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError):
            FunctionNetwork([NodeSpec("h", WHITE_BOX, (), (), (0,), add_x)], [1.0], 0, 0)

    def test_no_fixed_point_raises(self):
        # h1 = h2 + 1, h2 = h1 has no solution
        nodes = [NodeSpec("h1", WHITE_BOX, (), (), (1,), lambda z: z[..., 0] + 1.0),
                 NodeSpec("h2", WHITE_BOX, (), (), (0,), lambda z: z[..., 0])]
        net = FunctionNetwork(nodes, [1.0, 0.0], 0, 0)
        empty = torch.zeros(1, 0, dtype=torch.float64)
        with pytest.raises(FixedPointError):
            solve_fixed_point(net, None, empty, empty, max_iter=10)
        st = solve_fixed_point(net, None, empty, empty, max_iter=10, raise_on_failure=False)
        assert not st.all_converged
        with pytest.raises(InvalidStateError):
            objective(net, st)


class TestEvaluation:
    def test_node_failure_names_node(self):
        def boom(z):
            raise ArithmeticError("bad")

        net = FunctionNetwork([NodeSpec("a", WHITE_BOX, (0,), (), (), boom)], [1.0], 1, 0)
        with pytest.raises(NodeEvaluationError):
            evaluate(net, None, [[0.0]], np.zeros((1, 0)))

    def test_batch_broadcast(self):
        p = make_benchmark("figure2").problem
        x = torch.linspace(-2, 2, 5, dtype=torch.float64).reshape(5, 1, 1)
        w = torch.as_tensor(p.W.points).reshape(1, -1, 1)
        st = evaluate(p.net, None, x, w)
        assert st.H.shape == (5, 21, 3)

    def test_gradients_flow(self):
        p = make_benchmark("modified_sine").problem
        x = torch.tensor([[0.2, -0.3]], dtype=torch.float64, requires_grad=True)
        g = objective(p.net, evaluate(p.net, None, x, torch.zeros(1, 2, dtype=torch.float64)))
        (grad,) = torch.autograd.grad(g.sum(), x)
        assert torch.isfinite(grad).all() and grad.abs().sum() > 0

    def test_black_box_needs_function_for_truth(self):
        node = NodeSpec("a", BLACK_BOX, (0,), (), ())
        net = FunctionNetwork([node], [1.0], 1, 0)
        with pytest.raises(ValueError):
            net.true_evaluators()
