"""Convolutional normalizing flow over stacked inducing outputs.

The base variables of all layers are concatenated along a channel axis into an
M x K tensor (K = sum of layer widths). Each flow step multiplies every
inducing-point row by the same invertible K x K matrix, i.e. a 1x1
convolution, so its log-Jacobian is ``M * log|det W|``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, ShapeMismatch, as_tensor, lu_logdet

LOG_2PI = math.log(2 * math.pi)
HIDDEN_WIDTH = 256
LEAKY_SLOPE = 0.2


@dataclass
class StackedTensor:
    """Values of shape (..., M, K) plus the channel range of each layer."""

    values: torch.Tensor
    layer_offsets: list[tuple[int, int]]

    @property
    def M(self) -> int:
        return self.values.shape[-2]

    @property
    def K(self) -> int:
        return self.values.shape[-1]

    def with_values(self, values) -> "StackedTensor":
        return StackedTensor(values, list(self.layer_offsets))


def stack(per_layer: Sequence[torch.Tensor]) -> StackedTensor:
    per_layer = [as_tensor(p) for p in per_layer]
    if not per_layer:
        raise ShapeMismatch("nothing to stack")
    lead = per_layer[0].shape[:-1]
    offsets, k = [], 0
    for i, p in enumerate(per_layer):
        if p.shape[:-1] != lead:
            raise ShapeMismatch(f"layer {i} has shape {tuple(p.shape)}, expected (..., {lead[-1]}, d)")
        offsets.append((k, p.shape[-1]))
        k += p.shape[-1]
    return StackedTensor(torch.cat(per_layer, dim=-1), offsets)


def unstack(V: StackedTensor) -> list[torch.Tensor]:
    return [V.values[..., off:off + d] for off, d in V.layer_offsets]


class FlowStack(nn.Module):
    """Sequence of 1x1 channel-mixing convolutions.

    With ``activation`` on, every step is followed by a leaky-linear map
    ``x if x >= 0 else a * x`` with a learned positive slope ``a`` per step.
    """

    def __init__(self, K: int, steps: int = 1, activation: bool = False):
        super().__init__()
        if steps < 1:
            raise ValueError("a flow needs at least one step")
        self.K = K
        self.weights = nn.ParameterList(
            [nn.Parameter(torch.eye(K, dtype=DTYPE)) for _ in range(steps)]
        )
        self.activation = activation
        self.log_slopes = nn.Parameter(torch.zeros(steps, dtype=DTYPE)) if activation else None

    @property
    def steps(self) -> int:
        return len(self.weights)


def flow_forward(flow: FlowStack, V: StackedTensor) -> tuple[StackedTensor, torch.Tensor]:
    """Map base variables to inducing outputs; returns (U, log|det dU/dV|).

    The log-determinant has the sample shape of ``V`` (leading dims, or a
    scalar for a single M x K tensor).
    """
    x = V.values
    if x.shape[-1] != flow.K:
        raise ShapeMismatch(f"flow has {flow.K} channels, tensor has {x.shape[-1]}")
    M = x.shape[-2]
    logdet = torch.zeros(x.shape[:-2], dtype=DTYPE)
    for t, W in enumerate(flow.weights):
        _, logabs = lu_logdet(W)
        x = x @ W.T
        logdet = logdet + M * logabs
        if flow.activation:
            log_a = flow.log_slopes[t]
            neg = x < 0
            x = torch.where(neg, x * log_a.exp(), x)
            logdet = logdet + neg.sum((-1, -2)).to(DTYPE) * log_a
    return V.with_values(x), logdet


def flow_inverse(flow: FlowStack, U: StackedTensor) -> StackedTensor:
    x = U.values
    for t in reversed(range(flow.steps)):
        W = flow.weights[t]
        lu_logdet(W)
        if flow.activation:
            log_a = flow.log_slopes[t]
            x = torch.where(x < 0, x * torch.exp(-log_a), x)
        x = torch.linalg.solve(W, x.transpose(-1, -2)).transpose(-1, -2)
    return U.with_values(x)


class ConditionalBase(nn.Module):
    """Per-layer two-layer networks mapping inducing inputs to (mean, scale)."""

    def __init__(self, in_dims: Sequence[int], out_dims: Sequence[int], generator=None,
                 hidden: int = HIDDEN_WIDTH):
        super().__init__()
        if len(in_dims) != len(out_dims):
            raise ShapeMismatch("need one input width per output width")
        self.in_dims = [int(d) for d in in_dims]
        self.out_dims = [int(d) for d in out_dims]
        self.W1 = nn.ParameterList()
        self.b1 = nn.ParameterList()
        self.W2 = nn.ParameterList()
        self.b2 = nn.ParameterList()
        for d_in, d_out in zip(self.in_dims, self.out_dims):
            w = torch.randn(d_in, hidden, generator=generator, dtype=DTYPE) / math.sqrt(d_in)
            self.W1.append(nn.Parameter(w))
            self.b1.append(nn.Parameter(torch.zeros(hidden, dtype=DTYPE)))
            # zero output layer: mean 0 and scale softplus(0) = ln 2 at start
            self.W2.append(nn.Parameter(torch.zeros(hidden, 2 * d_out, dtype=DTYPE)))
            self.b2.append(nn.Parameter(torch.zeros(2 * d_out, dtype=DTYPE)))

    def hidden(self, layer: int, Z) -> torch.Tensor:
        return F.leaky_relu(as_tensor(Z) @ self.W1[layer] + self.b1[layer], LEAKY_SLOPE)

    def raw(self, layer: int, Z) -> torch.Tensor:
        return self.hidden(layer, Z) @ self.W2[layer] + self.b2[layer]


def base_params(base: ConditionalBase, Z_all: Sequence[torch.Tensor]):
    """Row-wise ``[mu, sigma] = phi(Z)`` for every layer, sigma through softplus."""
    if len(Z_all) != len(base.in_dims):
        raise ShapeMismatch(f"base has {len(base.in_dims)} layers, got {len(Z_all)} inducing sets")
    out = []
    for l, Z in enumerate(Z_all):
        Z = as_tensor(Z)
        if Z.shape[-1] != base.in_dims[l]:
            raise ShapeMismatch(f"layer {l}: Z has {Z.shape[-1]} columns, network expects {base.in_dims[l]}")
        raw = base.raw(l, Z)
        d = base.out_dims[l]
        out.append((raw[:, :d], F.softplus(raw[:, d:])))
    return out


def _stacked_params(base, Z_all):
    params = base_params(base, Z_all)
    mu = stack([m for m, _ in params])
    sigma = torch.cat([s for _, s in params], dim=-1)
    return mu, sigma


def _normal_logpdf(x, mu, sigma):
    return -0.5 * (((x - mu) / sigma) ** 2) - torch.log(sigma) - 0.5 * LOG_2PI


def base_logpdf(base: ConditionalBase, Z_all, V: StackedTensor) -> torch.Tensor:
    """log pi(V), summed over the M x K entries (per leading sample)."""
    mu, sigma = _stacked_params(base, Z_all)
    return _normal_logpdf(V.values, mu.values, sigma).sum((-1, -2))


def base_sample(base: ConditionalBase, Z_all, rng, num_samples: int | None = None):
    """Reparameterized draw ``V = mu + sigma * eps`` and its log-density.

    With ``num_samples`` the result carries a leading sample axis.
    """
    mu, sigma = _stacked_params(base, Z_all)
    shape = mu.values.shape if num_samples is None else (num_samples, *mu.values.shape)
    eps = rng.normal(*shape)
    values = mu.values + sigma * eps
    logpdf = (-0.5 * eps**2 - torch.log(sigma) - 0.5 * LOG_2PI).sum((-1, -2))
    return mu.with_values(values), logpdf


def posterior_logq(flow: FlowStack, base: ConditionalBase, Z_all, V: StackedTensor, logpi) -> torch.Tensor:
    """log q(U) at U = G(V): ``log pi(V) - log|det dG/dV|``."""
    _, logdet = flow_forward(flow, V)
    return logpi - logdet
