"""Dense float64 linear algebra, seeded randomness and gradient checking.

Everything in the package runs on ``torch`` tensors in double precision so that
reverse-mode gradients come from autograd; :func:`grad_check` is the
independent finite-difference check against it.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch

DTYPE = torch.float64
JITTER_LADDER = (1e-8, 1e-6, 1e-4)


class NotPositiveDefinite(RuntimeError):
    pass


class Singular(RuntimeError):
    pass


class NonFinite(RuntimeError):
    def __init__(self, msg, iteration=None):
        super().__init__(msg)
        self.iteration = iteration


class ShapeMismatch(ValueError):
    pass


DimensionMismatch = ShapeMismatch


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cholesky(A: torch.Tensor, jitter: float = 0.0) -> torch.Tensor:
    """Lower Cholesky factor of ``A + jitter * I``.

    If the factorization fails, the jitter is escalated through
    ``JITTER_LADDER`` (only rungs larger than the requested jitter are tried)
    before giving up with :class:`NotPositiveDefinite`.
    """
    A = as_tensor(A)
    if A.shape[-1] != A.shape[-2]:
        raise ShapeMismatch(f"cholesky needs a square matrix, got {tuple(A.shape)}")
    n = A.shape[-1]
    eye = torch.eye(n, dtype=DTYPE)
    rungs = [jitter] + [j for j in JITTER_LADDER if j > jitter]
    for j in rungs:
        L, info = torch.linalg.cholesky_ex(A + j * eye if j else A)
        if not bool(torch.any(info)) and bool(torch.all(torch.isfinite(L))):
            return L
    raise NotPositiveDefinite(
        f"matrix of size {n} is not positive definite even with jitter {rungs[-1]:g}"
    )


def lu_logdet(W: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(sign, log|det W|)`` through an LU factorization with pivoting."""
    W = as_tensor(W)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ShapeMismatch(f"lu_logdet needs a square matrix, got {tuple(W.shape)}")
    LU, _, _ = torch.linalg.lu_factor_ex(W.detach())
    if bool(torch.any(torch.diagonal(LU).abs() < 1e-300)):
        raise Singular("flow kernel is singular (LU pivot below 1e-300)")
    # slogdet carries the autograd path; the LU above is only the pivot check
    sign, logabsdet = torch.linalg.slogdet(W)
    return sign, logabsdet


def solve_triangular(L: torch.Tensor, B: torch.Tensor, lower: bool = True) -> torch.Tensor:
    L, B = as_tensor(L), as_tensor(B)
    if bool(torch.any(torch.diagonal(L, dim1=-2, dim2=-1) == 0)):
        raise Singular("triangular system has a zero on the diagonal")
    return torch.linalg.solve_triangular(L, B, upper=not lower)


class SeededRng:
    """Counter-style seeded generator.

    ``child(*keys)`` derives an independent stream from ``(seed, *keys)`` so a
    draw is reproducible per (seed, iteration, ...) regardless of call order.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        state = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self._key])
        self._gen = torch.Generator().manual_seed(int(state.generate_state(1, np.uint64)[0] >> 1))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self._key + tuple(keys))

    @property
    def generator(self) -> torch.Generator:
        return self._gen

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=self._gen, dtype=DTYPE)

    def uniform(self, *shape: int) -> torch.Tensor:
        return torch.rand(*shape, generator=self._gen, dtype=DTYPE)

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self._gen)


def value_and_grad(objective: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor]):
    """Evaluate a scalar objective and its gradient w.r.t. named parameter blocks."""
    value = objective()
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        out[name] = torch.zeros_like(p) if g is None else g
    return value.detach(), out


def grad_check(
    objective: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    per_block: bool = False,
):
    """Compare autograd gradients against central differences.

    ``objective`` is called with no arguments and must read the tensors in
    ``params`` (which need ``requires_grad``). Each entry is perturbed in place.
    Returns the max over entries of
    ``|analytic - numeric| / (|numeric| + 1e-8)``, or a dict of per-block
    maxima when ``per_block`` is set.
    """
    value, analytic = value_and_grad(objective, params)
    if not torch.isfinite(value):
        raise NonFinite("objective is not finite at the base point")
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            num = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = float(objective())
                flat[i] = orig - step
                fm = float(objective())
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFinite(f"objective not finite when perturbing {name}[{i}]")
                num[i] = (fp - fm) / (2 * step)
            a = analytic[name].reshape(-1)
            rel = (a - num).abs() / (num.abs() + 1e-8)
            errors[name] = float(rel.max()) if rel.numel() else 0.0
    if per_block:
        return errors
    return max(errors.values(), default=0.0)
