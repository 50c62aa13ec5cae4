"""Retrieval and STS evaluation: Recall@K, MRR@K, Spearman, matryoshka sweeps, margins."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .data import CandidatePool, TrainingSample, read_jsonl
from .errors import ConfigError, DataError, InputError
from .numerics import l2_normalize
from .templates import format_query

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalTask:
    queries: list[str]
    corpus: CandidatePool
    positive_idx: list[int]
    instructions: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.instructions:
            self.instructions = [""] * len(self.queries)
        if not (len(self.queries) == len(self.positive_idx) == len(self.instructions)):
            raise DataError("queries, instructions and qrels differ in length")
        bad = [i for i in self.positive_idx if not 0 <= i < len(self.corpus)]
        if bad:
            raise DataError(f"qrel indices out of range: {bad[:5]}")

    def instructed_queries(self) -> list[str]:
        return [format_query(ins, q) for ins, q in zip(self.instructions, self.queries)]

    @classmethod
    def read(cls, task_path, corpus_path) -> "RetrievalTask":
        recs = list(read_jsonl(task_path))
        try:
            return cls(
                queries=[r["query"] for r in recs],
                corpus=CandidatePool.read(corpus_path),
                positive_idx=[int(r["positive_idx"]) for r in recs],
                instructions=[r.get("instruction", "") for r in recs],
            )
        except KeyError as e:
            raise DataError(f"task record missing field {e}") from None


@dataclass
class EvalRun:
    checkpoint: str
    dim: int
    ranks: list[int]
    metrics: dict[str, float]

    def to_dict(self) -> dict:
        return {"checkpoint": self.checkpoint, "dim": self.dim, "metrics": self.metrics, "ranks": self.ranks}


def _check(ranks, k):
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DataError("no ranks")
    if (ranks < 1).any():
        raise DataError("ranks are 1-indexed")
    return ranks


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    """Fraction of queries whose positive ranks within the top K."""
    ranks = _check(ranks, k)
    return float(np.count_nonzero(ranks <= k)) / ranks.size


def mrr_at_k(ranks: Sequence[int], k: int) -> float:
    """Mean reciprocal rank, counting zero beyond K; the sum is exactly rounded."""
    ranks = _check(ranks, k)
    return math.fsum(1.0 / r for r in ranks.tolist() if r <= k) / ranks.size


def spearman(pred_scores, gold_scores) -> float:
    """Pearson correlation of average-tie fractional ranks."""
    a, b = np.asarray(pred_scores, float), np.asarray(gold_scores, float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InputError("spearman needs two equal-length vectors of length >= 2")
    ra, rb = rankdata(a) - (a.size + 1) / 2, rankdata(b) - (b.size + 1) / 2
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0:
        raise InputError("spearman is undefined for a constant vector")
    return float((ra * rb).sum() / denom)


def positive_ranks(query_emb: np.ndarray, corpus_emb: np.ndarray, positive_idx: Sequence[int]) -> list[int]:
    """1-indexed rank of each query's positive; ties go to the lower corpus index."""
    sims = query_emb @ corpus_emb.T
    ranks = []
    for i, p in enumerate(positive_idx):
        row, s = sims[i], sims[i, p]
        ranks.append(int(np.count_nonzero(row > s) + np.count_nonzero(row[:p] == s)) + 1)
    return ranks


def metric_table(ranks: Sequence[int], ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    table = {f"Recall@{k}": recall_at_k(ranks, k) for k in ks}
    table.update({f"MRR@{k}": mrr_at_k(ranks, k) for k in ks})
    return table


def embed_task(encoder, task: RetrievalTask) -> tuple[np.ndarray, np.ndarray]:
    q = encoder.encode_texts_chunked(task.instructed_queries()).double()
    c = encoder.encode_texts_chunked(task.corpus.passages).double()
    return q.numpy(), c.numpy()


def _truncate(emb: np.ndarray, k: int) -> np.ndarray:
    return l2_normalize(torch.from_numpy(emb[:, :k].copy())).numpy()


def evaluate(encoder, task: RetrievalTask, ks=DEFAULT_KS, dim: int | None = None, name: str = "") -> EvalRun:
    q, c = embed_task(encoder, task)
    return _run_from_embeddings(q, c, task, ks, dim or q.shape[1], name)


def _run_from_embeddings(q, c, task, ks, dim, name) -> EvalRun:
    if dim > q.shape[1]:
        raise ConfigError(f"dim {dim} exceeds embedding dim {q.shape[1]}")
    ranks = positive_ranks(_truncate(q, dim), _truncate(c, dim), task.positive_idx)
    return EvalRun(name, dim, ranks, metric_table(ranks, ks))


def relative_change(value: float, reference: float) -> float:
    """Percent change against the full-dimension reference."""
    if reference == 0:
        return 0.0 if value == 0 else float("inf")
    return (value - reference) / reference * 100.0


def matryoshka_sweep(encoder, task: RetrievalTask, dims: Sequence[int], ks=DEFAULT_KS, name: str = "") -> dict:
    """Metric table per prefix dimension plus percent degradation against the full dimension."""
    q, c = embed_task(encoder, task)
    full = q.shape[1]
    if any(d > full or d < 1 for d in dims):
        raise ConfigError(f"sweep dims {list(dims)} must lie in [1, {full}]")
    reference = _run_from_embeddings(q, c, task, ks, full, name)
    runs = [_run_from_embeddings(q, c, task, ks, d, name) for d in dims]
    return {
        "full_dim": full,
        "runs": [r.to_dict() for r in runs],
        "degradation_pct": {
            str(r.dim): {key: relative_change(v, reference.metrics[key]) for key, v in r.metrics.items()}
            for r in runs
        },
    }


def margin_stats(pos_sim: float, neg_sims: Sequence[float]) -> dict:
    negs = np.asarray(neg_sims, float)
    med = float(np.median(negs))
    return {
        "positive_sim": float(pos_sim),
        "neg_min": float(negs.min()),
        "neg_median": med,
        "neg_max": float(negs.max()),
        "margin": float(pos_sim) - med,
    }


def margin_report(encoder, samples: Sequence[TrainingSample]) -> list[dict]:
    """Positive similarity against the spread of hard-negative similarities, per sample."""
    from .objectives import student_score_rows
    from .data import assemble_batch

    out = []
    for i, s in enumerate(samples):
        if not s.hard_negatives:
            logger.warning("sample %d has no hard negatives; skipped", i)
            continue
        with torch.no_grad():
            row = student_score_rows(assemble_batch([s], encoder)).double().numpy()[0]
        rec = {"sample_id": s.sample_id if s.sample_id is not None else str(i)}
        rec.update(margin_stats(row[0], row[1:]))
        out.append(rec)
    return out


def top1_agreement(student, teacher, task: RetrievalTask) -> float:
    """Fraction of queries where student and teacher retrieve the same top-1 passage."""
    def top1(enc):
        q, c = embed_task(enc, task)
        sims = _truncate(q, q.shape[1]) @ _truncate(c, c.shape[1]).T
        return np.argmax(sims, axis=1)  # first maximum = stable tie-break

    return float(np.mean(top1(student) == top1(teacher)))
