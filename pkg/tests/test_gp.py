import math

import numpy as np
import pytest
import torch

from cnfdgp.gp import (SparseLayer, conditional, default_mean_projection, exact_log_marginal,
                       exact_predict, gaussian_kl, sample_layer, sgp_elbo_meanfield)
from cnfdgp.kernels import KernelParams, kernel_matrix
from cnfdgp.numerics import DTYPE, SeededRng, cholesky


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def zero_mean_layer(Z, d_out=1, **kw):
    Z = torch.as_tensor(Z, dtype=DTYPE)
    return SparseLayer(Z, d_out, KernelParams(Z.shape[1], **kw),
                       torch.zeros(Z.shape[1], d_out, dtype=DTYPE))


def test_mean_projection_rule():
    assert torch.equal(default_mean_projection(2, 2), torch.eye(2, dtype=DTYPE))
    assert default_mean_projection(3, 2).tolist() == [[1, 0], [0, 1], [0, 0]]
    assert default_mean_projection(1, 3).tolist() == [[1, 0, 0]]
    layer = SparseLayer(rand(4, 3), 2)
    assert not layer.mean_projection.requires_grad
    assert "mean_projection" not in dict(layer.named_parameters())


class TestConditional:
    def test_interpolates_at_inducing_inputs(self):
        Z = torch.linspace(-2, 2, 6, dtype=DTYPE)[:, None]
        layer = zero_mean_layer(Z, d_out=2)
        U = rand(6, 2)
        c = conditional(layer, Z, U)
        assert (c.mean - U).abs().max() < 1e-8
        assert c.variance.abs().max() < 1e-8

    def test_zero_outputs(self):
        layer = zero_mean_layer(rand(4, 2), variance=1.5)
        X = rand(7, 2, seed=1)
        c = conditional(layer, X, torch.zeros(4, 1, dtype=DTYPE))
        assert torch.equal(c.mean, torch.zeros(7, 1, dtype=DTYPE))
        assert torch.all(c.variance >= 0) and torch.all(c.variance <= 1.5)

    def test_two_by_two_by_hand(self):
        z = [0.0, 1.0]
        x, u = 0.4, [0.7, -1.2]
        k = lambda a, b: math.exp(-0.5 * (a - b) ** 2)
        K = [[k(z[0], z[0]), k(z[0], z[1])], [k(z[1], z[0]), k(z[1], z[1])]]
        det = K[0][0] * K[1][1] - K[0][1] * K[1][0]
        Kinv = [[K[1][1] / det, -K[0][1] / det], [-K[1][0] / det, K[0][0] / det]]
        kx = [k(x, z[0]), k(x, z[1])]
        w = [kx[0] * Kinv[0][0] + kx[1] * Kinv[1][0], kx[0] * Kinv[0][1] + kx[1] * Kinv[1][1]]
        mean = w[0] * u[0] + w[1] * u[1]
        var = 1.0 - (w[0] * kx[0] + w[1] * kx[1])
        c = conditional(zero_mean_layer([[0.0], [1.0]]), [[x]], torch.tensor([u], dtype=DTYPE).T)
        assert c.mean.item() == pytest.approx(mean, abs=1e-12)
        assert c.variance.item() == pytest.approx(var, abs=1e-12)

    def test_linear_mean_added(self):
        Z = rand(3, 2)
        layer = SparseLayer(Z, 2)  # identity mean
        X = rand(5, 2, seed=4)
        c0 = conditional(zero_mean_layer(Z, 2), X, torch.zeros(3, 2, dtype=DTYPE))
        c = conditional(layer, X, torch.zeros(3, 2, dtype=DTYPE))
        assert torch.allclose(c.mean - c0.mean, X, atol=1e-14)

    def test_sample_dimension_broadcasts(self):
        layer = zero_mean_layer(rand(4, 1))
        U = rand(3, 4, 1, seed=2)
        X = rand(5, 1, seed=3)
        c = conditional(layer, X, U)
        assert c.mean.shape == (3, 5, 1)
        for s in range(3):
            assert torch.allclose(c.mean[s], conditional(layer, X, U[s]).mean, atol=1e-14)

    def test_convergence_as_M_reaches_N(self):
        X = torch.linspace(-1, 1, 8, dtype=DTYPE)[:, None]
        f = torch.sin(3 * X)
        layer = zero_mean_layer(X, lengthscale=0.5)
        c = conditional(layer, X, f)
        assert (c.mean - f).abs().max() < 1e-8 and c.variance.max() < 1e-8


class TestSampleLayer:
    def test_zero_variance_returns_U(self):
        Z = torch.linspace(-1, 1, 5, dtype=DTYPE)[:, None]
        U = rand(5, 1)
        for seed in range(3):
            assert (sample_layer(zero_mean_layer(Z), Z, U, SeededRng(seed)) - U).abs().max() < 1e-8

    def test_deterministic(self):
        layer = zero_mean_layer(rand(4, 1))
        X, U = rand(6, 1, seed=1), rand(4, 1, seed=2)
        a = sample_layer(layer, X, U, SeededRng(9))
        b = sample_layer(layer, X, U, SeededRng(9))
        assert torch.equal(a, b)

    def test_moments(self):
        layer = zero_mean_layer(rand(4, 1))
        x, U = torch.tensor([[0.3]], dtype=DTYPE), rand(4, 1, seed=2)
        c = conditional(layer, x, U)
        n = 10_000
        draws = sample_layer(layer, x.expand(n, 1), U, SeededRng(1)).squeeze()
        m, v = c.mean.item(), c.variance.item()
        assert abs(draws.mean().item() - m) < 3 * math.sqrt(v / n)
        assert abs(draws.var().item() - v) < 3 * v * math.sqrt(2 / n)

    def test_gradient_through_mean_and_variance(self):
        layer = zero_mean_layer(rand(4, 1))
        U = rand(4, 1, seed=2).requires_grad_()
        out = sample_layer(layer, rand(3, 1, seed=5), U, SeededRng(0)).sum()
        out.backward()
        assert U.grad is not None and layer.kernel.log_lengthscales.grad is not None


def dense_logpdf(y, S):
    y, S = np.asarray(y), np.asarray(S)
    Sinv = np.linalg.inv(S)
    return -0.5 * (y @ Sinv @ y + np.log(np.linalg.det(S)) + len(y) * np.log(2 * np.pi))


class TestExact:
    def test_scalar_marginal(self):
        p = KernelParams(1, noise=1.0)
        assert exact_log_marginal([[0.0]], [0.0], p).item() == pytest.approx(-1.2655121234846454, abs=1e-12)

    def test_marginal_decreases_with_norm(self):
        p = KernelParams(1)
        X = rand(4, 1)
        y = rand(4, seed=1)
        vals = [exact_log_marginal(X, s * y, p).item() for s in (0.0, 0.5, 1.0, 2.0)]
        assert vals == sorted(vals, reverse=True)

    def test_dense_inverse_oracle(self):
        p = KernelParams(2, lengthscale=[0.8, 1.3], variance=1.7, noise=0.2)
        X, y = rand(3, 2), rand(3, seed=1)
        S = (kernel_matrix(X, X, p) + 0.2 * torch.eye(3, dtype=DTYPE)).detach().numpy()
        assert exact_log_marginal(X, y, p).item() == pytest.approx(dense_logpdf(y.numpy(), S), abs=1e-10)

    def test_predict_scalar(self):
        p = KernelParams(1, noise=1.0)
        mean, var = exact_predict([[0.0]], [[0.0]], [2.0], p)
        assert mean.item() == pytest.approx(1.0) and var.item() == pytest.approx(0.5)

    def test_predict_noiseless_interpolation(self):
        p = KernelParams(1, lengthscale=0.5, noise=1e-10)
        X = torch.linspace(-1, 1, 5, dtype=DTYPE)[:, None]
        y = torch.cos(2 * X).squeeze()
        mean, _ = exact_predict(X[2:3], X, y, p)
        assert mean.item() == pytest.approx(y[2].item(), abs=1e-4)

    def test_predict_prior_reversion(self):
        p = KernelParams(1, variance=2.0, noise=0.1)
        X = rand(5, 1)
        mean, var = exact_predict([[100.0]], X, rand(5, seed=1), p)
        assert abs(mean.item()) < 1e-6 and var.item() == pytest.approx(2.0, abs=1e-6)


def titsias_instance(N=12, lengthscale=0.6, noise=0.05, seed=0):
    X = torch.linspace(-1.5, 1.5, N, dtype=DTYPE)[:, None]
    y = torch.sin(2 * X).squeeze() + 0.1 * rand(N, seed=seed)
    layer = zero_mean_layer(X, lengthscale=lengthscale, noise=noise)
    K = kernel_matrix(X, X, layer.kernel).detach()
    A = torch.linalg.solve(K + noise * torch.eye(N, dtype=DTYPE), K)
    q_mean = A.T @ y
    q_cov = K - K @ A
    q_chol = torch.linalg.cholesky(0.5 * (q_cov + q_cov.T))
    return X, y, layer, q_mean, q_chol


class TestSgpElbo:
    def test_titsias_optimum_equals_marginal(self):
        X, y, layer, m, L = titsias_instance()
        elbo = sgp_elbo_meanfield(X, y, layer, m, L).item()
        assert elbo == pytest.approx(exact_log_marginal(X, y, layer.kernel).item(), abs=1e-6)

    def test_prior_has_zero_kl(self):
        Z = rand(5, 1)
        layer = zero_mean_layer(Z)
        Lp = cholesky(kernel_matrix(Z, Z, layer.kernel))
        assert gaussian_kl(torch.zeros(5, dtype=DTYPE), Lp, Lp).item() == 0.0

    def test_kl_matches_dense_formula(self):
        B = rand(4, 4, seed=7)
        Lp = cholesky(B @ B.T + torch.eye(4, dtype=DTYPE))
        m, Lq = rand(4), rand(4, 4, seed=3).tril() + 2 * torch.eye(4, dtype=DTYPE)
        P, Q = (Lp @ Lp.T).numpy(), (Lq @ Lq.T).numpy()
        Pi = np.linalg.inv(P)
        ref = 0.5 * (np.trace(Pi @ Q) + m.numpy() @ Pi @ m.numpy() - 4
                     + np.log(np.linalg.det(P)) - np.log(np.linalg.det(Q)))
        assert gaussian_kl(m, Lq, Lp).item() == pytest.approx(ref, abs=1e-10)

    def test_bound_over_random_q(self):
        X, y, layer, _, _ = titsias_instance(N=10)
        exact = exact_log_marginal(X, y, layer.kernel).item()
        g = torch.Generator().manual_seed(11)
        for _ in range(200):
            m = torch.randn(10, generator=g, dtype=DTYPE)
            L = torch.randn(10, 10, generator=g, dtype=DTYPE).tril() * 0.3
            L.diagonal().copy_(torch.rand(10, generator=g, dtype=DTYPE) + 0.01)
            assert sgp_elbo_meanfield(X, y, layer, m, L).item() <= exact + 1e-6

    def test_sparse_bound_below_marginal(self):
        X, y, _, _, _ = titsias_instance(N=20)
        layer = zero_mean_layer(X[::4], lengthscale=0.6, noise=0.05)
        exact = exact_log_marginal(X, y, layer.kernel).item()
        m, L = torch.zeros(5, dtype=DTYPE), 0.1 * torch.eye(5, dtype=DTYPE)
        assert sgp_elbo_meanfield(X, y, layer, m, L).item() < exact
