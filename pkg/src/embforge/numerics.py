"""Vector kernels, seeded randomness and the finite-difference gradient oracle.

Kernels accept anything ``torch.as_tensor`` understands and return tensors so
they compose with autograd inside the loss functions.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DimensionError, DomainError, NumericError

__all__ = [
    "SeededRng",
    "as_tensor",
    "cosine_sim",
    "grad_check",
    "l2_normalize",
    "sample_beta_2_2",
    "softmax",
]


def as_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    t = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        return t.to(dtype)
    return t.to(torch.float64) if not t.is_floating_point() else t


def _norms(v: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if bool((n == 0).any()):
        raise DomainError("zero-norm vector has no direction")
    return n


def l2_normalize(v) -> torch.Tensor:
    """Scale every vector along the last axis to unit Euclidean norm."""
    v = as_tensor(v)
    if v.shape[-1] == 0:
        raise DimensionError("cannot normalize a zero-dimensional vector")
    return v / _norms(v)


def cosine_sim(a, b) -> torch.Tensor:
    """Cosine similarity along the last axis; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return (l2_normalize(a) * l2_normalize(b)).sum(-1)


def softmax(z, tau: float = 1.0) -> torch.Tensor:
    """Temperature softmax over the last axis with max-subtraction."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = as_tensor(z)
    if z.numel() == 0:
        raise ConfigError("softmax of an empty vector")
    scaled = z / tau
    shifted = scaled - scaled.max(dim=-1, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(-1, keepdim=True)


class SeededRng:
    """Single-owner random stream. Child streams are derived, never shared."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, key: int) -> "SeededRng":
        """Independent stream that depends only on (seed, key)."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
        out = SeededRng.__new__(SeededRng)
        out.seed = self.seed
        out._gen = np.random.Generator(np.random.PCG64(seq))
        return out

    def exponential(self, size=None):
        return self._gen.standard_exponential(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def sample(self, population: Sequence, k: int) -> list:
        """k distinct elements, uniformly, in draw order."""
        if k > len(population):
            raise ValueError(f"cannot draw {k} from {len(population)} without replacement")
        idx = self._gen.choice(len(population), size=k, replace=False)
        return [population[i] for i in idx]

    def uniform(self, size=None):
        return self._gen.random(size)


def sample_beta_2_2(rng: SeededRng) -> float:
    """Beta(2, 2) draw as X / (X + Y) with X, Y ~ Gamma(2, 1).

    Each Gamma(2, 1) is the sum of two unit exponentials.
    """
    while True:
        e = rng.exponential(4)
        x, y = e[0] + e[1], e[2] + e[3]
        lam = x / (x + y)
        if 0.0 < lam < 1.0:
            return float(lam)


def grad_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    params,
    h: float = 1e-5,
    grad_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    The error per coordinate is ``|g - fd| / max(1, |fd|)``. When ``grad_fn`` is
    omitted the analytic gradient comes from autograd through ``loss_fn``.
    """
    x0 = as_tensor(params, torch.float64).detach().clone().reshape(-1)
    if grad_fn is None:
        x = x0.clone().requires_grad_(True)
        val = loss_fn(x)
        if not torch.isfinite(val):
            raise NumericError("non-finite loss at the base point")
        (g,) = torch.autograd.grad(val, x, allow_unused=True)
        analytic = torch.zeros_like(x0) if g is None else g.detach()
    else:
        analytic = as_tensor(grad_fn(x0.clone()), torch.float64).reshape(-1)

    fd = torch.empty_like(x0)
    with torch.no_grad():
        for i in range(x0.numel()):
            xp = x0.clone()
            xp[i] += h
            xm = x0.clone()
            xm[i] -= h
            fp, fm = float(loss_fn(xp)), float(loss_fn(xm))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing coordinate {i}")
            fd[i] = (fp - fm) / (2 * h)
    err = (analytic - fd).abs() / torch.clamp(fd.abs(), min=1.0)
    return float(err.max()) if err.numel() else 0.0
