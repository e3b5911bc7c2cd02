"""Single sparse-GP layer: conditionals, reparameterized sampling, exact GP
reference computations and the closed-form single-layer ELBO."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .kernels import KernelParams, kernel_diag, kernel_matrix
from .numerics import DTYPE, ShapeMismatch, as_tensor, cholesky, solve_triangular

LOG_2PI = math.log(2 * math.pi)
# below this conditional variance the sampling std is linear in the variance,
# so gradients stay finite where it collapses (X == Z)
VARIANCE_FLOOR = 1e-12


def default_mean_projection(d_in: int, d_out: int) -> torch.Tensor:
    """Identity when widths agree, otherwise ones on the leading diagonal."""
    return torch.eye(d_in, d_out, dtype=DTYPE)


class SparseLayer(nn.Module):
    """One sparse GP layer with ``d_out`` outputs sharing one SE-ARD kernel.

    ``mean_projection`` is the fixed linear mean function ``A`` (d_in x d_out);
    it is stored as a buffer so it never receives optimizer updates.
    """

    def __init__(self, Z, d_out: int, kernel: KernelParams | None = None, mean_projection=None,
                 jitter: float = 0.0):
        super().__init__()
        Z = as_tensor(Z).clone()
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise ShapeMismatch(f"Z must be a non-empty M x d_in matrix, got {tuple(Z.shape)}")
        if not bool(torch.all(torch.isfinite(Z))):
            raise ValueError("inducing inputs contain non-finite values")
        d_in = Z.shape[1]
        self.Z = nn.Parameter(Z)
        self.d_out = int(d_out)
        self.kernel = kernel if kernel is not None else KernelParams(d_in, with_noise=False)
        if mean_projection is None:
            mean_projection = default_mean_projection(d_in, self.d_out)
        A = as_tensor(mean_projection).clone()
        if A.shape != (d_in, self.d_out):
            raise ShapeMismatch(f"mean projection must be {d_in} x {self.d_out}, got {tuple(A.shape)}")
        self.register_buffer("mean_projection", A)
        self.jitter = jitter

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def d_in(self) -> int:
        return self.Z.shape[1]

    def Kzz_chol(self) -> torch.Tensor:
        return cholesky(kernel_matrix(self.Z, self.Z, self.kernel), self.jitter)


@dataclass
class LayerConditional:
    mean: torch.Tensor
    variance: torch.Tensor


def conditional(layer: SparseLayer, X, U, Lz=None) -> LayerConditional:
    """Marginals of p(f | u) at the rows of ``X``.

    ``X`` is (..., N, d_in) and ``U`` is (..., M, d_out); leading sample
    dimensions broadcast. ``Lz`` may be passed to reuse a Cholesky of K_ZZ.
    """
    X, U = as_tensor(X), as_tensor(U)
    if X.shape[-1] != layer.d_in or U.shape[-2:] != (layer.num_inducing, layer.d_out):
        raise ShapeMismatch(
            f"layer expects X[..., {layer.d_in}] and U[..., {layer.num_inducing}, {layer.d_out}], "
            f"got {tuple(X.shape)} and {tuple(U.shape)}"
        )
    if Lz is None:
        Lz = layer.Kzz_chol()
    Kzx = kernel_matrix(layer.Z, X, layer.kernel)  # (..., M, N)
    Lz_b = Lz.expand(Kzx.shape[:-2] + Lz.shape)
    A = solve_triangular(Lz_b, Kzx)  # Lz^{-1} K_ZX
    alpha = solve_triangular(Lz.expand(U.shape[:-2] + Lz.shape), U)  # Lz^{-1} U
    mean = A.transpose(-1, -2) @ alpha + X @ layer.mean_projection
    var = kernel_diag(X, layer.kernel) - (A**2).sum(-2)
    var = var.clamp_min(0.0)
    var = var.unsqueeze(-1).expand(mean.shape)
    return LayerConditional(mean, var)


def sample_layer(layer: SparseLayer, X, U, rng, Lz=None) -> torch.Tensor:
    """Reparameterized draw ``mean + sqrt(var) * eps`` from p(f | u) marginals."""
    cond = conditional(layer, X, U, Lz)
    eps = rng.normal(*cond.mean.shape)
    var = cond.variance
    # below the floor the square root is replaced by a linear ramp through 0
    std = torch.where(var > VARIANCE_FLOOR, var.clamp_min(VARIANCE_FLOOR).sqrt(),
                      var / math.sqrt(VARIANCE_FLOOR))
    return cond.mean + std * eps


def _noisy_chol(X, params: KernelParams):
    K = kernel_matrix(X, X, params)
    K = K + params.noise * torch.eye(K.shape[0], dtype=DTYPE)
    return cholesky(K)


def gaussian_logpdf_chol(y, L) -> torch.Tensor:
    """log N(y | 0, L L^T) for a vector (or columns of a matrix) ``y``."""
    y = as_tensor(y)
    alpha = solve_triangular(L, y.unsqueeze(-1) if y.ndim == 1 else y)
    n = L.shape[-1]
    cols = 1 if y.ndim == 1 else y.shape[-1]
    logdet = 2 * torch.log(torch.diagonal(L)).sum()
    return -0.5 * (alpha**2).sum() - 0.5 * cols * (logdet + n * LOG_2PI)


def exact_log_marginal(X, y, params: KernelParams) -> torch.Tensor:
    """log N(y | 0, K_XX + noise I)."""
    X, y = as_tensor(X), as_tensor(y).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    return gaussian_logpdf_chol(y, _noisy_chol(X, params))


def exact_predict(X_star, X, y, params: KernelParams):
    """Exact GP posterior mean and marginal variance of the latent f at ``X_star``."""
    X_star, X, y = as_tensor(X_star), as_tensor(X), as_tensor(y).reshape(-1)
    L = _noisy_chol(X, params)
    Ksx = kernel_matrix(X_star, X, params)
    alpha = torch.cholesky_solve(y.unsqueeze(-1), L).squeeze(-1)
    mean = Ksx @ alpha
    V = solve_triangular(L, Ksx.T)
    var = kernel_diag(X_star, params) - (V**2).sum(0)
    return mean, var


def gaussian_kl(q_mean, q_chol, Lp) -> torch.Tensor:
    """KL[N(m, S S^T) || N(0, Lp Lp^T)] summed over trailing columns.

    ``q_mean`` is (M,) or (M, C); ``q_chol`` is (M, M) or (C, M, M).
    """
    q_mean, q_chol = as_tensor(q_mean), as_tensor(q_chol)
    if q_mean.ndim == 1:
        q_mean, q_chol = q_mean.unsqueeze(-1), q_chol.unsqueeze(0)
    M, C = q_mean.shape
    a = solve_triangular(Lp, q_mean)  # (M, C)
    B = solve_triangular(Lp.expand(C, M, M), q_chol)  # (C, M, M)
    logdet_p = 2 * torch.log(torch.diagonal(Lp)).sum()
    logdet_q = 2 * torch.log(torch.diagonal(q_chol, dim1=-2, dim2=-1).abs()).sum(-1)
    kl = 0.5 * ((B**2).sum((-1, -2)) + (a**2).sum(0) - M + logdet_p - logdet_q)
    return kl.sum()


def sgp_elbo_meanfield(X, y, layer: SparseLayer, q_mean, q_chol, noise=None) -> torch.Tensor:
    """Closed-form ELBO of a single-output sparse GP with Gaussian q(u).

    The observation noise comes from ``layer.kernel`` unless given explicitly.
    """
    X, y = as_tensor(X), as_tensor(y).reshape(-1)
    q_mean, q_chol = as_tensor(q_mean).reshape(-1), as_tensor(q_chol)
    noise = layer.kernel.noise if noise is None else as_tensor(noise)
    Lz = layer.Kzz_chol()
    Kzx = kernel_matrix(layer.Z, X, layer.kernel)
    A = solve_triangular(Lz, Kzx)  # Lz^{-1} K_ZX
    # q(f) = N(K_XZ Kzz^{-1} m + X a, diag(K_XX - Q_XX) + K_XZ Kzz^{-1} S Kzz^{-1} K_ZX)
    proj = solve_triangular(Lz.T, A, lower=False)  # Kzz^{-1} K_ZX
    mean = proj.T @ q_mean + (X @ layer.mean_projection).reshape(-1)
    var = kernel_diag(X, layer.kernel) - (A**2).sum(0) + ((q_chol.T @ proj) ** 2).sum(0)
    n = y.shape[0]
    expected_loglik = (-0.5 * n * (LOG_2PI + torch.log(noise))
                       - 0.5 * (((y - mean) ** 2).sum() + var.sum()) / noise)
    return expected_loglik - gaussian_kl(q_mean, q_chol, Lz)
