"""Contrastive and distillation objectives over batches of embeddings.

All similarities are cosine. Hard negatives of every sample in the batch act as
negatives for every query, and so do the synthetic negatives produced by
pair-wise and list-wise mixing. Focal weights scale each sample's loss but are
treated as constants during backpropagation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, DimensionError, DomainError
from .numerics import SeededRng, as_tensor, cosine_sim, l2_normalize, sample_beta_2_2

LOG_FLOOR = math.log(1e-30)


@dataclass
class LossConfig:
    tau_cl: float = 0.01
    tau_kl: float = 0.05
    gamma: float = 0.5
    enable_pairwise_mix: bool = True
    enable_listwise_mix: bool = True
    mrl_dims: tuple[int, ...] = ()
    mrl_weights: tuple[float, ...] = ()
    cl_weight: float = 0.3
    kl_weight: float = 0.7

    def __post_init__(self):
        self.mrl_dims = tuple(int(d) for d in self.mrl_dims)
        self.mrl_weights = tuple(float(w) for w in self.mrl_weights)
        if not (self.tau_cl > 0 and self.tau_kl > 0):
            raise ConfigError("temperatures must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        _check_mrl(self.mrl_dims, self.mrl_weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mrl_dims"], d["mrl_weights"] = list(self.mrl_dims), list(self.mrl_weights)
        return d


def _check_mrl(dims, weights):
    if len(dims) != len(weights):
        raise ConfigError("mrl_dims and mrl_weights differ in length")
    if any(a <= b for a, b in zip(dims, dims[1:])):
        raise ConfigError(f"mrl_dims must be strictly descending: {list(dims)}")
    if any(d < 1 for d in dims) or any(w <= 0 for w in weights):
        raise ConfigError("mrl dims must be >= 1 and weights positive")


@dataclass
class EmbeddedBatch:
    queries: torch.Tensor  # (N, d)
    positives: torch.Tensor  # (N, d)
    hard_negatives: torch.Tensor  # (N, M, d)

    def __post_init__(self):
        self.queries = as_tensor(self.queries)
        self.positives = as_tensor(self.positives)
        if self.hard_negatives is None:
            self.hard_negatives = self.queries.new_zeros(self.queries.shape[0], 0, self.queries.shape[1])
        self.hard_negatives = as_tensor(self.hard_negatives)
        n, d = self.queries.shape
        if self.positives.shape != (n, d):
            raise DimensionError(f"positives {tuple(self.positives.shape)} vs queries {(n, d)}")
        if self.hard_negatives.dim() != 3 or self.hard_negatives.shape[0] != n or self.hard_negatives.shape[2] != d:
            raise DimensionError(f"hard_negatives shape {tuple(self.hard_negatives.shape)}")

    @property
    def n(self) -> int:
        return self.queries.shape[0]

    @property
    def m(self) -> int:
        return self.hard_negatives.shape[1]

    @property
    def dim(self) -> int:
        return self.queries.shape[1]

    def truncate(self, k: int) -> "EmbeddedBatch":
        """First-k prefix of every embedding, re-normalized. ``k == dim`` is the identity."""
        if k > self.dim:
            raise ConfigError(f"truncation dim {k} exceeds embedding dim {self.dim}")
        if k == self.dim:
            return self
        return EmbeddedBatch(
            l2_normalize(self.queries[:, :k]),
            l2_normalize(self.positives[:, :k]),
            l2_normalize(self.hard_negatives[..., :k]),
        )

    def without_negatives(self) -> "EmbeddedBatch":
        return EmbeddedBatch(self.queries, self.positives, None)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    positive_prob: torch.Tensor
    focal_weight: torch.Tensor
    log_denominator: torch.Tensor
    synthetic_negative_count: int = 0

    @property
    def per_sample(self) -> list[dict]:
        return [
            {
                "positive_prob": float(p),
                "focal_weight": float(w),
                "log_denominator": float(z),
                "synthetic_negative_count": self.synthetic_negative_count,
            }
            for p, w, z in zip(self.positive_prob, self.focal_weight, self.log_denominator)
        ]


@dataclass
class MixPlan:
    """Per-sample draws for pair-wise mixing: two distinct negative slots and a weight."""

    j: np.ndarray
    k: np.ndarray
    lam: np.ndarray


def draw_mix_plan(rng: SeededRng, n: int, m: int) -> MixPlan:
    if m < 2:
        raise ConfigError("pair-wise mixing needs at least two hard negatives")
    j, k, lam = np.empty(n, dtype=np.int64), np.empty(n, dtype=np.int64), np.empty(n)
    for i in range(n):
        j[i], k[i] = rng.sample(range(m), 2)
        lam[i] = sample_beta_2_2(rng)
    return MixPlan(j, k, lam)


def focal_weights(positive_probs, gamma: float) -> torch.Tensor:
    """``(1 - p) ** gamma`` per sample, detached from the graph."""
    p = as_tensor(positive_probs).detach()
    return torch.clamp(1.0 - p, min=0.0).pow(gamma)


def mix_pairwise(neg_j, neg_k, lam) -> torch.Tensor:
    """Unit-norm convex blend ``lam * neg_j + (1 - lam) * neg_k``."""
    neg_j, neg_k = as_tensor(neg_j), as_tensor(neg_k)
    lam = as_tensor(lam, neg_j.dtype)
    if bool(((lam <= 0) | (lam >= 1)).any()):
        raise ConfigError("mixing weight must lie in (0, 1)")
    if lam.dim():
        lam = lam.reshape(*lam.shape, *([1] * (neg_j.dim() - lam.dim())))
    blend = lam * neg_j + (1 - lam) * neg_k
    try:
        return l2_normalize(blend)
    except DomainError:
        raise DomainError("pair-wise blend collapsed to the zero vector") from None


def listwise_weights(query, negs) -> torch.Tensor:
    """Softmax over raw cosine similarities between a query and its negatives (no temperature)."""
    query, negs = as_tensor(query), as_tensor(negs)
    sims = cosine_sim(query.unsqueeze(-2), negs)
    return torch.softmax(sims, dim=-1)


def mix_listwise(query, negs) -> torch.Tensor:
    """Unit-norm blend of all negatives weighted by :func:`listwise_weights`."""
    negs = as_tensor(negs)
    if negs.shape[-2] < 1:
        raise ConfigError("list-wise mixing needs at least one hard negative")
    w = listwise_weights(query, negs)
    try:
        return l2_normalize((w.unsqueeze(-1) * negs).sum(-2))
    except DomainError:
        raise DomainError("list-wise blend collapsed to the zero vector") from None


def _contrastive(batch: EmbeddedBatch, tau: float, gamma: float, synthetic=(), focal_cache=None):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if batch.n < 1:
        raise DataError("empty batch")
    q = l2_normalize(batch.queries)
    cols = [q @ l2_normalize(batch.positives).T]
    if batch.m:
        cols.append(q @ l2_normalize(batch.hard_negatives).reshape(-1, batch.dim).T)
    for s in synthetic:
        cols.append(q @ l2_normalize(s).T)
    logits = torch.cat(cols, dim=1) / tau
    log_z = torch.logsumexp(logits, dim=1)
    log_p = logits.diagonal() - log_z
    p = log_p.detach().exp()
    if focal_cache is not None and batch.dim in focal_cache:
        w = focal_cache[batch.dim]
    else:
        w = focal_weights(p, gamma)
        if focal_cache is not None:
            focal_cache[batch.dim] = w
    total = (-w * log_p).mean()
    return LossBreakdown(total, p, w, log_z.detach(), len(synthetic) * batch.n)


def infonce_loss(batch: EmbeddedBatch, tau: float) -> LossBreakdown:
    """InfoNCE with in-batch positives and all in-batch hard negatives in the denominator."""
    return _contrastive(batch, tau, gamma=0.0)


def synthetic_negatives(batch: EmbeddedBatch, cfg: LossConfig, rng=None, plan=None) -> list:
    out = []
    if cfg.enable_pairwise_mix:
        if batch.m < 2:
            raise ConfigError("pair-wise mixing needs M >= 2")
        if plan is None:
            if rng is None:
                raise ConfigError("pair-wise mixing needs an rng or a precomputed plan")
            plan = draw_mix_plan(rng, batch.n, batch.m)
        negs = l2_normalize(batch.hard_negatives)
        rows = torch.arange(batch.n)
        out.append(mix_pairwise(negs[rows, torch.as_tensor(plan.j)],
                                negs[rows, torch.as_tensor(plan.k)],
                                torch.as_tensor(plan.lam, dtype=negs.dtype)))
    if cfg.enable_listwise_mix:
        if batch.m < 1:
            raise ConfigError("list-wise mixing needs M >= 1")
        out.append(mix_listwise(batch.queries, l2_normalize(batch.hard_negatives)))
    return out


def contrastive_loss_full(
    batch: EmbeddedBatch,
    cfg: LossConfig,
    rng: SeededRng | None = None,
    plan: MixPlan | None = None,
    focal_cache: dict | None = None,
) -> LossBreakdown:
    """Focal-weighted InfoNCE whose denominator also holds every sample's synthetic negatives.

    ``plan`` pins the pair-wise draws; otherwise they come from ``rng``.
    ``focal_cache`` maps embedding dim to focal weights and pins them across
    calls (finite-difference checks of the detached-weight gradient need this).
    """
    synth = synthetic_negatives(batch, cfg, rng=rng, plan=plan)
    return _contrastive(batch, cfg.tau_cl, cfg.gamma, synth, focal_cache)


def student_score_rows(batch: EmbeddedBatch) -> torch.Tensor:
    """(N, 1+M) cosine rows: positive first, then the sample's own hard negatives."""
    pos = cosine_sim(batch.queries, batch.positives).unsqueeze(1)
    if batch.m == 0:
        return pos
    negs = cosine_sim(batch.queries.unsqueeze(1), batch.hard_negatives)
    return torch.cat([pos, negs], dim=1)


def _log_probs(scores: torch.Tensor, tau: float) -> torch.Tensor:
    return torch.log_softmax(scores / tau, dim=-1).clamp_min(LOG_FLOOR)


def kl_distill_loss(teacher_scores, student_scores, tau: float) -> torch.Tensor:
    """Mean over rows of KL(P_teacher || P_student) between temperature softmaxes."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    t, s = as_tensor(teacher_scores), as_tensor(student_scores)
    t = t.to(s.dtype)
    if t.shape != s.shape or t.dim() != 2:
        raise DimensionError(f"teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
    log_pt = _log_probs(t.detach(), tau)
    log_ps = _log_probs(s, tau)
    return (log_pt.exp() * (log_pt - log_ps)).sum(-1).mean()


def kl_batch_loss(batch: EmbeddedBatch, teacher_scores, tau: float) -> torch.Tensor:
    return kl_distill_loss(teacher_scores, student_score_rows(batch), tau)


def _scalar(x) -> torch.Tensor:
    return x.total if isinstance(x, LossBreakdown) else x


def mrl_wrap(base_loss: Callable, dims: Sequence[int], weights: Sequence[float]) -> Callable:
    """Weighted sum of ``base_loss`` over re-normalized prefix truncations.

    Weights are used as given. Empty ``dims`` means the full embedding only.
    """
    dims, weights = tuple(dims), tuple(weights)
    _check_mrl(dims, weights)

    def wrapped(batch: EmbeddedBatch, *args, **kwargs) -> torch.Tensor:
        if not dims:
            return _scalar(base_loss(batch, *args, **kwargs))
        if dims[0] > batch.dim:
            raise ConfigError(f"MRL dim {dims[0]} exceeds embedding dim {batch.dim}")
        total = None
        for k, w in zip(dims, weights):
            term = w * _scalar(base_loss(batch.truncate(k), *args, **kwargs))
            total = term if total is None else total + term
        return total

    return wrapped


def contrastive_objective(batch, cfg: LossConfig, rng=None, plan=None, focal_cache=None):
    """MRL-wrapped full contrastive loss with one set of mixing draws shared across dims."""
    if cfg.enable_pairwise_mix and plan is None and batch.m >= 2 and rng is not None:
        plan = draw_mix_plan(rng, batch.n, batch.m)
    fn = mrl_wrap(contrastive_loss_full, cfg.mrl_dims, cfg.mrl_weights)
    return fn(batch, cfg, rng=rng, plan=plan, focal_cache=focal_cache)


def kl_objective(batch, teacher_scores, cfg: LossConfig):
    return mrl_wrap(kl_batch_loss, cfg.mrl_dims, cfg.mrl_weights)(batch, teacher_scores, cfg.tau_kl)


def distill_terms(batch, teacher_scores, cfg: LossConfig, rng=None, plan=None, focal_cache=None):
    """(total, contrastive, kl) for the distillation stage."""
    if teacher_scores is None:
        raise DataError("distillation needs teacher score rows for the batch")
    teacher_scores = as_tensor(teacher_scores)
    if teacher_scores.shape != (batch.n, 1 + batch.m):
        raise DataError(
            f"teacher rows {tuple(teacher_scores.shape)} do not match batch {(batch.n, 1 + batch.m)}"
        )
    if cfg.enable_pairwise_mix and plan is None and batch.m >= 2 and rng is not None:
        plan = draw_mix_plan(rng, batch.n, batch.m)
    cl = contrastive_objective(batch, cfg, rng=rng, plan=plan, focal_cache=focal_cache)
    kl = kl_objective(batch, teacher_scores, cfg)
    return cfg.cl_weight * cl + cfg.kl_weight * kl, cl, kl


def distill_objective(batch, teacher_scores, cfg: LossConfig, rng=None, plan=None, focal_cache=None):
    """``cl_weight`` x contrastive + ``kl_weight`` x KL, both MRL-wrapped."""
    return distill_terms(batch, teacher_scores, cfg, rng, plan, focal_cache)[0]
