"""Deep GP with a flow (or mean-field Gaussian) posterior over inducing outputs."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import flow as fl
from .gp import LOG_2PI, SparseLayer, default_mean_projection, gaussian_kl, sample_layer
from .kernels import KernelParams
from .numerics import (DTYPE, NonFinite, NotPositiveDefinite, SeededRng, ShapeMismatch, Singular, as_tensor,
                       solve_triangular)

POSTERIORS = ("cnf", "meanfield")


class FlowPosterior(nn.Module):
    def __init__(self, in_dims, out_dims, steps=1, activation=False, generator=None):
        super().__init__()
        self.base = fl.ConditionalBase(in_dims, out_dims, generator=generator)
        self.flow = fl.FlowStack(sum(out_dims), steps=steps, activation=activation)


class MeanFieldPosterior(nn.Module):
    """Independent Gaussian q(U_l) per layer with a full M x M covariance per
    output column (lower Cholesky with log-diagonal)."""

    def __init__(self, M: int, out_dims: Sequence[int], init_scale: float = math.log(2.0)):
        super().__init__()
        self.q_mu = nn.ParameterList()
        self.q_sqrt_raw = nn.ParameterList()
        for d in out_dims:
            self.q_mu.append(nn.Parameter(torch.zeros(M, d, dtype=DTYPE)))
            raw = torch.zeros(d, M, M, dtype=DTYPE)
            raw.diagonal(dim1=-2, dim2=-1).fill_(math.log(init_scale))
            self.q_sqrt_raw.append(nn.Parameter(raw))

    def chol(self, layer: int) -> torch.Tensor:
        raw = self.q_sqrt_raw[layer]
        return torch.tril(raw, -1) + torch.diag_embed(raw.diagonal(dim1=-2, dim2=-1).exp())

    def set_layer(self, layer: int, mean, chol):
        """Overwrite q(U_layer) with ``mean`` (M x d) and Cholesky factors (d x M x M)."""
        chol = as_tensor(chol)
        with torch.no_grad():
            self.q_mu[layer].copy_(as_tensor(mean).reshape(self.q_mu[layer].shape))
            raw = torch.tril(chol, -1) + torch.diag_embed(chol.diagonal(dim1=-2, dim2=-1).log())
            self.q_sqrt_raw[layer].copy_(raw.reshape(self.q_sqrt_raw[layer].shape))


class DgpModel(nn.Module):
    """L sparse GP layers, a posterior over their inducing outputs and a
    Gaussian likelihood with noise variance ``exp(log_noise)``."""

    def __init__(self, layers: Sequence[SparseLayer], posterior: nn.Module, noise: float = 0.01):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        M = self.layers[0].num_inducing
        for l, layer in enumerate(self.layers):
            if layer.num_inducing != M:
                raise ShapeMismatch("all layers need the same number of inducing points")
            if l and layer.d_in != self.layers[l - 1].d_out:
                raise ShapeMismatch(f"layer {l} input width {layer.d_in} != previous output width")
        if isinstance(posterior, FlowPosterior) and posterior.flow.K != sum(self.dims):
            raise ShapeMismatch(f"flow has {posterior.flow.K} channels, layers need {sum(self.dims)}")
        self.posterior = posterior
        self.log_noise = nn.Parameter(torch.tensor(math.log(noise), dtype=DTYPE))

    @property
    def kind(self) -> str:
        return "cnf" if isinstance(self.posterior, FlowPosterior) else "meanfield"

    @property
    def dims(self) -> list[int]:
        return [layer.d_out for layer in self.layers]

    @property
    def num_inducing(self) -> int:
        return self.layers[0].num_inducing

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def noise(self):
        return self.log_noise.exp()

    def Z_all(self):
        return [layer.Z for layer in self.layers]

    def Kzz_chols(self):
        return [layer.Kzz_chol() for layer in self.layers]


def build_model(X, dims: Sequence[int], num_inducing: int, posterior: str = "cnf", flow_steps: int = 1,
                activation: bool = False, seed: int = 0, jitter: float = 1e-6, noise: float = 0.01) -> DgpModel:
    """Initialise a DGP on training inputs ``X``.

    Inducing inputs start at a random subset of the rows of ``X``, projected
    through the fixed mean functions for deeper layers. Hidden layers use the
    identity/truncation mean; the output layer has zero mean.
    """
    if posterior not in POSTERIORS:
        raise ValueError(f"posterior must be one of {POSTERIORS}, got {posterior!r}")
    X = as_tensor(X)
    N, D = X.shape
    if not 1 <= num_inducing <= N:
        raise ValueError(f"number of inducing points must be in [1, {N}], got {num_inducing}")
    rng = SeededRng(seed).child(0xB0)
    Z = X[rng.permutation(N)[:num_inducing]]
    layers, d_in = [], D
    for l, d_out in enumerate(dims):
        last = l == len(dims) - 1
        A = torch.zeros(d_in, d_out, dtype=DTYPE) if last else default_mean_projection(d_in, d_out)
        layers.append(SparseLayer(Z, d_out, KernelParams(d_in, with_noise=False), A, jitter=jitter))
        Z = Z @ default_mean_projection(d_in, d_out)
        d_in = d_out
    if posterior == "cnf":
        post = FlowPosterior([layer.d_in for layer in layers], list(dims), flow_steps, activation,
                             rng.child(1).generator)
    else:
        post = MeanFieldPosterior(num_inducing, list(dims))
    return DgpModel(layers, post, noise)


# ---------------------------------------------------------------- sampling

def sample_posterior_U(model: DgpModel, rng, num_samples: int | None = None):
    """Draw inducing outputs from q(U); returns (list of U_l, log q(U)).

    Each U_l is (M, d_l), or (S, M, d_l) with ``num_samples``.
    """
    post = model.posterior
    if isinstance(post, FlowPosterior):
        V, logpi = fl.base_sample(post.base, model.Z_all(), rng, num_samples)
        U, logdet = fl.flow_forward(post.flow, V)
        return fl.unstack(U), logpi - logdet
    Us, logq = [], 0.0
    lead = () if num_samples is None else (num_samples,)
    for l, d in enumerate(model.dims):
        L = post.chol(l)  # (d, M, M)
        eps = rng.normal(*lead, d, model.num_inducing, 1)
        U = post.q_mu[l] + (L @ eps).squeeze(-1).transpose(-1, -2)
        logdiag = torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum()
        logq = logq + (-0.5 * eps**2 - 0.5 * LOG_2PI).sum((-1, -2, -3)) - logdiag
        Us.append(U)
    return Us, logq


def log_prior_U(model: DgpModel, Us, Lzs=None) -> torch.Tensor:
    """sum_l sum_columns log N(U_l[:, c] | 0, K_ZZ,l)."""
    Lzs = model.Kzz_chols() if Lzs is None else Lzs
    total = 0.0
    for U, Lz in zip(Us, Lzs):
        M, d = U.shape[-2:]
        a = solve_triangular(Lz, U)
        logdet = 2 * torch.log(torch.diagonal(Lz)).sum()
        total = total - 0.5 * (a**2).sum((-1, -2)) - 0.5 * d * (logdet + M * LOG_2PI)
    return total


def propagate(model: DgpModel, X, Us, rng, Lzs=None) -> torch.Tensor:
    """Push ``X`` through the layers, sampling each layer given its U."""
    F = as_tensor(X)
    Lzs = model.Kzz_chols() if Lzs is None else Lzs
    if len(Us) != len(model.layers):
        raise ShapeMismatch(f"got {len(Us)} inducing-output blocks for {len(model.layers)} layers")
    for l, (layer, U, Lz) in enumerate(zip(model.layers, Us, Lzs)):
        F = sample_layer(layer, F, U, rng.child(l), Lz)
    return F


def _gauss_loglik(y, f, noise):
    return -0.5 * (LOG_2PI + torch.log(noise)) - 0.5 * (y - f) ** 2 / noise


def elbo_terms(model: DgpModel, X, y, N_total: int, S: int, rng) -> dict:
    """Per-sample pieces of the Monte-Carlo ELBO (each a length-S tensor).

    ``loglik`` is already rescaled by ``N_total / B``. For a flow posterior
    the dict also carries ``logpi`` and ``logdet`` with logq = logpi - logdet.
    """
    X, y = as_tensor(X), as_tensor(y).reshape(-1)
    B = X.shape[0]
    if B == 0 or S < 1:
        raise ValueError("need a non-empty batch and at least one sample")
    Lzs = model.Kzz_chols()
    terms = {}
    post = model.posterior
    if isinstance(post, FlowPosterior):
        V, logpi = fl.base_sample(post.base, model.Z_all(), rng.child(0), S)
        U, logdet = fl.flow_forward(post.flow, V)
        Us, logq = fl.unstack(U), logpi - logdet
        terms.update(logpi=logpi, logdet=logdet)
    else:
        Us, logq = sample_posterior_U(model, rng.child(0), S)
    F = propagate(model, X, Us, rng.child(1), Lzs)  # (S, B, 1)
    ll = _gauss_loglik(y, F[..., 0], model.noise).sum(-1) * (N_total / B)
    terms.update(loglik=ll, log_prior=log_prior_U(model, Us, Lzs), logq=logq, Us=Us, Lzs=Lzs)
    return terms


def _finite(value, what):
    if not bool(torch.isfinite(value)):
        raise NonFinite(f"{what} is not finite")
    return value


def elbo_estimate(model: DgpModel, X, y, N_total: int, S: int, rng) -> torch.Tensor:
    """Monte-Carlo ELBO: mean over S draws of loglik + log p(U) - log q(U)."""
    t = elbo_terms(model, X, y, N_total, S, rng)
    return _finite((t["loglik"] + t["log_prior"] - t["logq"]).mean(), "ELBO estimate")


def meanfield_kl(model: DgpModel, Lzs=None) -> torch.Tensor:
    Lzs = model.Kzz_chols() if Lzs is None else Lzs
    post = model.posterior
    return sum(gaussian_kl(post.q_mu[l], post.chol(l), Lz) for l, Lz in enumerate(Lzs))


def elbo_meanfield_dgp(model: DgpModel, X, y, N_total: int, S: int, rng) -> torch.Tensor:
    """ELBO with a Gaussian q(U): sampled likelihood, closed-form KL."""
    if not isinstance(model.posterior, MeanFieldPosterior):
        raise TypeError("elbo_meanfield_dgp needs a mean-field posterior")
    t = elbo_terms(model, X, y, N_total, S, rng)
    return _finite(t["loglik"].mean() - meanfield_kl(model, t["Lzs"]), "ELBO estimate")


def model_elbo(model: DgpModel, X, y, N_total: int, S: int, rng) -> torch.Tensor:
    if model.kind == "cnf":
        return elbo_estimate(model, X, y, N_total, S, rng)
    return elbo_meanfield_dgp(model, X, y, N_total, S, rng)


def posterior_logdensity_unnorm(model: DgpModel, Us, X, y, rng) -> torch.Tensor:
    """log p(y | F_L, U) + log p(U) with F_L a single propagated draw."""
    Us = [as_tensor(U) for U in Us]
    Lzs = model.Kzz_chols()
    F = propagate(model, X, Us, rng, Lzs)
    ll = _gauss_loglik(as_tensor(y).reshape(-1), F[..., 0], model.noise).sum(-1)
    return ll + log_prior_U(model, Us, Lzs)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    iterations: int = 1000
    learning_rate: float = 0.005
    minibatch_size: int = 10_000
    mc_samples: int = 1
    seed: int = 0
    flow_steps: int = 1
    activation: bool = False
    num_inducing: int = 20
    dims: list[int] = field(default_factory=lambda: [1, 1])
    posterior: str = "cnf"
    predict_samples: int = 100
    jitter: float = 1e-6

    def validate(self):
        for name in ("iterations", "minibatch_size", "mc_samples", "flow_steps", "num_inducing",
                     "predict_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate >= 0:
            # zero is allowed: it freezes the parameters
            raise ValueError("learning_rate must be non-negative")
        if not self.dims or any(int(d) < 1 for d in self.dims):
            raise ValueError("dims must be a non-empty list of positive widths")
        if self.posterior not in POSTERIORS:
            raise ValueError(f"posterior must be one of {POSTERIORS}")
        return self


@dataclass
class TrainTrace:
    iteration: list[int] = field(default_factory=list)
    elbo: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.iteration)

    def smoothed(self, window: int = 50) -> np.ndarray:
        """Trailing moving average of the ELBO trace."""
        e = np.asarray(self.elbo)
        c = np.concatenate([[0.0], np.cumsum(e)])
        idx = np.arange(1, len(e) + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)


def model_from_config(X, config: TrainConfig) -> DgpModel:
    return build_model(X, config.dims, config.num_inducing, config.posterior, config.flow_steps,
                       config.activation, config.seed, config.jitter)


def train(model: DgpModel, X, y, config: TrainConfig, progress=None) -> TrainTrace:
    """Maximise the ELBO with Adam; deterministic for a fixed ``config.seed``."""
    config.validate()
    X, y = as_tensor(X), as_tensor(y).reshape(-1)
    N = X.shape[0]
    B = min(config.minibatch_size, N)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    rng = SeededRng(config.seed).child(0x7A)
    trace = TrainTrace()
    start = time.perf_counter()
    for it in range(config.iterations):
        r = rng.child(it)
        if B < N:
            idx = r.child(0).permutation(N)[:B]
            Xb, yb = X[idx], y[idx]
        else:
            Xb, yb = X, y
        opt.zero_grad()
        try:
            elbo = model_elbo(model, Xb, yb, N, config.mc_samples, r.child(1))
        except NonFinite as e:
            raise NonFinite(f"iteration {it}: {e}", iteration=it) from None
        except (NotPositiveDefinite, Singular) as e:
            # diverged parameters usually surface as a failed factorization
            raise type(e)(f"iteration {it}: {e}") from None
        (-elbo).backward()
        elbo = elbo.detach()
        opt.step()
        trace.iteration.append(it)
        trace.elbo.append(elbo.item())
        trace.seconds.append(time.perf_counter() - start)
        if progress is not None:
            progress(it, float(elbo))
    return trace


# ---------------------------------------------------------------- prediction

@torch.no_grad()
def predict_mll(model: DgpModel, X_test, y_test, S: int, rng, y_scale: float = 1.0):
    """Mean test log-likelihood under an S-component predictive mixture.

    Targets are on the model's (standardized) scale; ``y_scale`` is the
    standard deviation used for standardization, and the per-point values
    are shifted by ``-log(y_scale)`` to report them on the original scale.
    """
    X_test, y_test = as_tensor(X_test), as_tensor(y_test).reshape(-1)
    Us, _ = sample_posterior_U(model, rng.child(0), S)
    F = propagate(model, X_test, Us, rng.child(1))[..., 0]  # (S, N)
    per_point = mixture_loglik(y_test, F, model.noise) - math.log(y_scale)
    return float(per_point.mean()), per_point.numpy()


def mixture_loglik(y, F, noise) -> torch.Tensor:
    """log (1/S) sum_s N(y | F[s], noise), per column of ``F`` (S, N)."""
    comp = _gauss_loglik(as_tensor(y), as_tensor(F), as_tensor(noise))
    return torch.logsumexp(comp, dim=0) - math.log(comp.shape[0])


@torch.no_grad()
def predict(model: DgpModel, X, S: int, rng):
    """Predictive mean and variance of y (standardized scale) from S draws."""
    Us, _ = sample_posterior_U(model, rng.child(0), S)
    F = propagate(model, as_tensor(X), Us, rng.child(1))[..., 0]
    return F.mean(0), F.var(0, unbiased=False) + model.noise


# ---------------------------------------------------------------- checkpoints

def model_spec(model: DgpModel) -> dict:
    spec = {
        "posterior": model.kind,
        "input_dim": model.input_dim,
        "dims": model.dims,
        "num_inducing": model.num_inducing,
        "jitter": model.layers[0].jitter,
    }
    if model.kind == "cnf":
        spec["flow_steps"] = model.posterior.flow.steps
        spec["activation"] = model.posterior.flow.activation
    return spec


def model_to_dict(model: DgpModel, meta: dict | None = None) -> dict:
    state = {k: {"shape": list(v.shape), "values": v.detach().reshape(-1).tolist()}
             for k, v in model.state_dict().items()}
    return {"format": "cnfdgp-checkpoint", "version": 1, "model": model_spec(model),
            "meta": meta or {}, "state": state}


def model_from_dict(d: dict) -> DgpModel:
    if d.get("format") != "cnfdgp-checkpoint":
        raise ValueError("not a cnfdgp checkpoint")
    spec = d["model"]
    dims, M = spec["dims"], spec["num_inducing"]
    X0 = torch.zeros(M, spec["input_dim"], dtype=DTYPE)
    model = build_model(X0, dims, M, spec["posterior"], spec.get("flow_steps", 1),
                        spec.get("activation", False), 0, spec["jitter"])
    state = {k: torch.tensor(v["values"], dtype=DTYPE).reshape(v["shape"]) for k, v in d["state"].items()}
    model.load_state_dict(state)
    return model


def save_checkpoint(model: DgpModel, path, meta: dict | None = None):
    from .data import atomic_write

    atomic_write(path, json.dumps(model_to_dict(model, meta)))


def load_checkpoint(path):
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d), d.get("meta", {})


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
