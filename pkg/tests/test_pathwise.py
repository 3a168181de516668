import math

import numpy as np
import pytest
import torch

from bonsai_rbo.benchmarks import make_benchmark
from bonsai_rbo.driver import NetworkModelState, RunSettings, initialize
from bonsai_rbo.gp import KernelParams, NodeDataset, fit_posterior, matern52_matrix
from bonsai_rbo.pathwise import draw_basis, draw_network_sample, draw_path, posterior_mean_network


class TestFeatures:
    def test_kernel_approximation_d4096(self):
        p = KernelParams(1.5, [0.4, 0.8])
        rng = np.random.default_rng(0)
        z = rng.uniform(-1, 1, (12, 2))
        K = matern52_matrix(z, z, p)
        errs = []
        for _ in range(50):
            phi = draw_basis(p, 4096, rng).features(z)
            errs.append(np.abs(phi @ phi.T - K))
        assert np.mean(errs, axis=0).max() < 0.05

    def test_spectral_draw_scaling(self):
        # omega = eps / l * sqrt(5 / u): E[omega^2] = 5/3 / l^2 (t-distribution with 5 dof)
        b = draw_basis(KernelParams(1.0, [0.5]), 200_000, np.random.default_rng(1))
        assert np.mean(b.frequencies ** 2) == pytest.approx((5 / 3) / 0.25, rel=0.03)

    def test_feature_norm_is_output_scale(self):
        b = draw_basis(KernelParams(2.0, [1.0]), 4096, np.random.default_rng(2))
        phi = b.features(np.zeros((1, 1)))
        assert (phi ** 2).sum() == pytest.approx(2.0, rel=0.05)

    def test_torch_features_match(self):
        b = draw_basis(KernelParams(1.0, [0.3, 0.3]), 64, np.random.default_rng(3))
        z = np.random.default_rng(4).normal(size=(5, 2))
        np.testing.assert_allclose(b.features_torch(torch.as_tensor(z)).numpy(), b.features(z), atol=1e-12)


class TestPaths:
    def _gp(self, noise=0.0, n=10, seed=0):
        rng = np.random.default_rng(seed)
        z = rng.uniform(-2, 2, (n, 2))
        y = np.cos(z[:, 0]) * z[:, 1]
        return fit_posterior(None, NodeDataset(z, y), KernelParams(1.0, [0.4, 0.4], noise))

    def test_interpolates_noise_free_data(self):
        gp = self._gp()
        for s in range(10):
            path = draw_path(gp, 512, np.random.default_rng(s))
            assert np.max(np.abs(path.numpy(gp.data.inputs) - gp.data.outputs)) < 1e-6

    def test_empirical_moments_match_posterior(self):
        gp = self._gp(noise=1e-4, n=6)
        zs = np.array([[0.1, 0.2], [1.5, -1.0], [3.0, 3.0]])
        rng = np.random.default_rng(9)
        draws = np.array([draw_path(gp, 1024, rng).numpy(zs) for _ in range(400)])
        mean, var = gp.predict(zs)
        sd = np.sqrt(var)
        assert np.all(np.abs(draws.mean(0) - mean) < 4 * sd / math.sqrt(400) + 0.02)
        np.testing.assert_allclose(draws.std(0), sd, rtol=0.2, atol=0.02)

    def test_prior_sample_without_data(self):
        gp = fit_posterior(None, NodeDataset.empty(1, normalize=False), KernelParams(3.0, [1.0]))
        rng = np.random.default_rng(0)
        vals = np.array([draw_path(gp, 1024, rng).numpy([[0.0]])[0] for _ in range(2000)])
        assert np.var(vals) == pytest.approx(3.0, rel=0.1)

    def test_deterministic_given_seed(self):
        gp = self._gp()
        z = np.random.default_rng(1).normal(size=(4, 2))
        a = draw_path(gp, 128, np.random.default_rng(7)).numpy(z)
        b = draw_path(gp, 128, np.random.default_rng(7)).numpy(z)
        assert np.array_equal(a, b)

    def test_gradient_matches_finite_differences(self):
        gp = self._gp()
        path = draw_path(gp, 256, np.random.default_rng(2))
        z = np.array([[0.3, -0.7]])
        g = path.gradient(z)[0]
        h = 1e-6
        fd = [(path.numpy(z + h * e) - path.numpy(z - h * e))[0] / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def fitted_model(name="polynomial", seed=0):
    problem = make_benchmark(name).problem
    rng = np.random.default_rng(seed)
    model = NetworkModelState.empty(problem)
    for row in initialize(problem, rng):
        model.add(row)
    model.refit(RunSettings(fit_restarts=2), rng)
    return problem, model


class TestNetworkSamples:
    def test_end_to_end_gradient(self):
        problem, model = fitted_model()
        sample = draw_network_sample(problem.net, model.gps, 512, np.random.default_rng(3))
        w = torch.as_tensor(problem.W.points[[5]])
        x0 = np.array([[0.7, 1.9]])
        xt = torch.as_tensor(x0).requires_grad_(True)
        (g,) = torch.autograd.grad(sample.objective(xt, w).sum(), xt)
        h = 1e-6
        fd = []
        for e in np.eye(2):
            with torch.no_grad():
                up = sample.objective(torch.as_tensor(x0 + h * e), w).item()
                dn = sample.objective(torch.as_tensor(x0 - h * e), w).item()
            fd.append((up - dn) / (2 * h))
        rel = np.abs(g.numpy()[0] - fd) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-3

    def test_white_box_nodes_are_exact(self):
        problem, model = fitted_model()
        sample = draw_network_sample(problem.net, model.gps, 64, np.random.default_rng(0))
        assert sample.node_fns[3] is problem.net.nodes[3].func

    def test_scenario_values_shape(self):
        problem, model = fitted_model("figure2")
        sample = posterior_mean_network(problem.net, model.gps)
        x = torch.linspace(-2, 2, 7, dtype=torch.float64).reshape(-1, 1)
        vals = sample.scenario_values(x, problem.W.tensor())
        assert vals.shape == (7, problem.W.m)

    def test_missing_gp_rejected(self):
        problem, model = fitted_model("figure2")
        with pytest.raises(ValueError):
            draw_network_sample(problem.net, [None] * problem.net.K, 16)
