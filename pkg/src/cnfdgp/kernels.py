"""Squared-exponential ARD kernel."""
from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import DTYPE, DimensionMismatch, as_tensor


class KernelParams(nn.Module):
    """SE-ARD hyperparameters kept in the log domain.

    ``log_noise`` is optional: inside a deep model the observation noise lives
    on the likelihood, not on each layer's kernel.
    """

    def __init__(self, input_dim: int, lengthscale=1.0, variance=1.0, noise=0.01, with_noise=True):
        super().__init__()
        ls = torch.full((input_dim,), 1.0, dtype=DTYPE) * as_tensor(lengthscale)
        self.log_lengthscales = nn.Parameter(ls.log())
        self.log_variance = nn.Parameter(torch.tensor(math.log(variance), dtype=DTYPE))
        if with_noise:
            self.log_noise = nn.Parameter(torch.tensor(math.log(noise), dtype=DTYPE))
        else:
            self.log_noise = None

    @property
    def input_dim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self):
        return self.log_lengthscales.exp()

    @property
    def variance(self):
        return self.log_variance.exp()

    @property
    def noise(self):
        if self.log_noise is None:
            raise AttributeError("these kernel parameters carry no observation noise")
        return self.log_noise.exp()


def _check(X, params):
    if X.shape[-1] != params.input_dim:
        raise DimensionMismatch(
            f"inputs have {X.shape[-1]} columns but the kernel expects {params.input_dim}"
        )


def se_ard(x, x2, params: KernelParams) -> torch.Tensor:
    x, x2 = as_tensor(x), as_tensor(x2)
    _check(x, params)
    _check(x2, params)
    r2 = (((x - x2) / params.lengthscales) ** 2).sum(-1)
    return params.variance * torch.exp(-0.5 * r2)


def kernel_matrix(X, X2, params: KernelParams) -> torch.Tensor:
    """Gram matrix between the rows of ``X`` (..., N, D) and ``X2`` (..., N', D).

    Leading batch dimensions broadcast. Distances are formed from explicit
    differences, so the result is exactly symmetric and translation invariant.
    """
    X, X2 = as_tensor(X), as_tensor(X2)
    _check(X, params)
    _check(X2, params)
    ls = params.lengthscales
    diff = (X / ls).unsqueeze(-2) - (X2 / ls).unsqueeze(-3)
    return params.variance * torch.exp(-0.5 * (diff**2).sum(-1))


def kernel_diag(X, params: KernelParams) -> torch.Tensor:
    X = as_tensor(X)
    _check(X, params)
    return params.variance.expand(X.shape[:-1]).clone()
