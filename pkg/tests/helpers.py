"""Shared oracle instances for the model and acceptance tests."""
import math

import torch

from cnfdgp import flow as fl
from cnfdgp.data import make_synthetic
from cnfdgp.gp import SparseLayer
from cnfdgp.kernels import KernelParams, kernel_matrix
from cnfdgp.model import DgpModel, FlowPosterior, MeanFieldPosterior
from cnfdgp.numerics import DTYPE

# far below the smallest gap between inputs, so K_XX is diagonal to machine precision
TINY_LENGTHSCALE = 1e-5


def softplus_inv(s):
    return s + torch.log(-torch.expm1(-s))


def tune_base(base, layer, Z, mu, sigma, seed=0):
    """Set the layer's network so that phi(Z) returns exactly (mu, sigma).

    The hidden layer gets random biases (so the M feature rows are linearly
    independent) and the output layer is the minimum-norm least-squares fit.
    """
    g = torch.Generator().manual_seed(seed + 7919)
    target = torch.cat([mu, softplus_inv(sigma)], dim=1)
    with torch.no_grad():
        base.b1[layer].copy_(torch.randn(base.b1[layer].shape, generator=g, dtype=DTYPE))
        H = base.hidden(layer, Z)
        base.W2[layer].copy_(torch.linalg.pinv(H, rtol=1e-13) @ target)
        base.b2[layer].zero_()
        residual = (base.raw(layer, Z) - target).abs().max().item()
    assert residual < 1e-9, residual


def single_layer_oracle(N=30, noise=0.1, seed=0, kind="sine"):
    """L=1, M=N, Z=X model whose exact posterior p(u|y) is diagonal.

    Returns (model, X, y, kernel-with-noise, posterior mean, posterior std).
    """
    ds = make_synthetic(kind, N, 0.1, seed)
    X = torch.as_tensor(ds.X, dtype=DTYPE)
    y = torch.as_tensor(ds.y, dtype=DTYPE).reshape(-1)
    gaps = (X - X.T).abs() + torch.eye(N, dtype=DTYPE) * 10
    assert gaps.min().item() > 50 * TINY_LENGTHSCALE
    kern = KernelParams(1, lengthscale=TINY_LENGTHSCALE, variance=1.0, with_noise=False)
    layer = SparseLayer(X, 1, kern, torch.zeros(1, 1, dtype=DTYPE), jitter=0.0)
    model = DgpModel([layer], FlowPosterior([1], [1], generator=torch.Generator().manual_seed(seed)), noise)
    K = kernel_matrix(X, X, kern).detach()
    assert torch.equal(K, torch.eye(N, dtype=DTYPE))
    k = 1.0
    post_mean = (k / (k + noise)) * y
    post_std = torch.full((N,), math.sqrt(k * noise / (k + noise)), dtype=DTYPE)
    tune_base(model.posterior.base, 0, X, post_mean[:, None], post_std[:, None], seed)
    full = KernelParams(1, lengthscale=TINY_LENGTHSCALE, variance=1.0, noise=noise)
    return model, X, y, full, post_mean, post_std


def titsias_meanfield_model(N=30, noise=0.1, lengthscale=0.1, seed=0):
    """L=1, M=N, Z=X mean-field model set to the exact (correlated) posterior."""
    ds = make_synthetic("sine", N, 0.1, seed)
    X = torch.as_tensor(ds.X, dtype=DTYPE)
    y = torch.as_tensor(ds.y, dtype=DTYPE).reshape(-1)
    kern = KernelParams(1, lengthscale=lengthscale, variance=1.0, with_noise=False)
    layer = SparseLayer(X, 1, kern, torch.zeros(1, 1, dtype=DTYPE), jitter=0.0)
    model = DgpModel([layer], MeanFieldPosterior(N, [1]), noise)
    K = kernel_matrix(X, X, kern).detach()
    A = torch.linalg.solve(K + noise * torch.eye(N, dtype=DTYPE), K)
    cov = K - K @ A
    model.posterior.set_layer(0, A.T @ y, torch.linalg.cholesky(0.5 * (cov + cov.T))[None])
    full = KernelParams(1, lengthscale=lengthscale, variance=1.0, noise=noise)
    return model, X, y, full


def random_flow(K, steps, activation, seed):
    flow = fl.FlowStack(K, steps, activation)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for W in flow.weights:
            Q, _ = torch.linalg.qr(torch.randn(K, K, generator=g, dtype=DTYPE))
            s = 0.5 + 1.5 * torch.rand(K, generator=g, dtype=DTYPE)
            W.copy_(Q * s)  # singular values in [0.5, 2]
        if activation:
            flow.log_slopes.copy_(torch.empty(steps, dtype=DTYPE).uniform_(-1.0, 1.0, generator=g))
    return flow


def fd_jacobian(fn, v, h=1e-6):
    n = v.numel()
    J = torch.empty(n, n, dtype=DTYPE)
    for i in range(n):
        e = torch.zeros(n, dtype=DTYPE)
        e[i] = h
        J[:, i] = (fn(v + e) - fn(v - e)) / (2 * h)
    return J
