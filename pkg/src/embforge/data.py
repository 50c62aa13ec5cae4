"""Training-data curation: reformatting, labeling, hard-negative mining, batching, JSONL I/O."""
from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

from . import templates
from .errors import BatchingError, DataError, InputError
from .numerics import SeededRng, l2_normalize
from .objectives import EmbeddedBatch
from .templates import format_query

logger = logging.getLogger(__name__)

__all__ = [
    "CandidatePool",
    "LabeledText",
    "ScoredPair",
    "TrainingSample",
    "assemble_batch",
    "example_based_labeling",
    "format_query",
    "mine_hard_negatives",
    "process_asymmetric",
    "process_symmetric",
    "validate_samples",
]


@dataclass
class TrainingSample:
    instruction: str
    query: str
    positive: str
    hard_negatives: list[str] = field(default_factory=list)
    symmetric: bool = False
    sample_id: str | None = None

    def __post_init__(self):
        if not self.query or not self.positive:
            raise DataError("query and positive must be nonempty")
        if self.positive in self.hard_negatives:
            raise DataError(f"positive appears among its own hard negatives: {self.positive!r}")

    def to_record(self) -> dict:
        rec = {
            "instruction": self.instruction,
            "query": self.query,
            "pos": self.positive,
            "negs": list(self.hard_negatives),
            "symmetric": self.symmetric,
        }
        if self.sample_id is not None:
            rec["id"] = self.sample_id
        return rec

    @classmethod
    def from_record(cls, rec: Mapping, sample_id: str | None = None) -> "TrainingSample":
        try:
            return cls(
                instruction=rec.get("instruction", ""),
                query=rec["query"],
                positive=rec["pos"],
                hard_negatives=list(rec.get("negs", [])),
                symmetric=bool(rec.get("symmetric", False)),
                sample_id=str(rec["id"]) if "id" in rec else sample_id,
            )
        except KeyError as e:
            raise DataError(f"training record missing field {e}") from None

    # instructed views used for encoding
    def query_text(self) -> str:
        return format_query(self.instruction, self.query)

    def passage_text(self, text: str) -> str:
        return format_query(self.instruction, text) if self.symmetric else text


@dataclass
class ScoredPair:
    text_a: str
    text_b: str
    score: float
    scale: str = "continuous"

    def __post_init__(self):
        if self.scale == "continuous":
            if not 0.0 <= self.score <= 5.0:
                raise DataError(f"continuous score {self.score} outside [0, 5]")
        elif self.scale == "binary":
            if self.score not in (0, 1):
                raise DataError(f"binary score {self.score} not in {{0, 1}}")
        else:
            raise DataError(f"unknown score scale {self.scale!r}")


@dataclass
class LabeledText:
    text: str
    label: str
    dataset_id: str

    def __post_init__(self):
        if not self.label:
            raise DataError("label must be nonempty")


class CandidatePool:
    """Passages with stable indices; exact duplicates are rejected."""

    def __init__(self, passages: Sequence[str]):
        self.passages = list(passages)
        if len(set(self.passages)) != len(self.passages):
            raise DataError("candidate pool contains duplicate passages")

    def __len__(self) -> int:
        return len(self.passages)

    def __getitem__(self, i: int) -> str:
        return self.passages[i]

    @classmethod
    def read(cls, path) -> "CandidatePool":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln.strip()])


# -- reformatting ---------------------------------------------------------------


def process_symmetric(pairs: Sequence[ScoredPair], instruction: str = templates.STS) -> list[TrainingSample]:
    """Two instructed samples (both directions) per pair scoring > 4, or == 1 for binary sets."""
    if not pairs:
        raise DataError("no scored pairs")
    out = []
    for p in pairs:
        keep = p.score > 4 if p.scale == "continuous" else p.score == 1
        if keep:
            out.append(TrainingSample(instruction, p.text_a, p.text_b, symmetric=True))
            out.append(TrainingSample(instruction, p.text_b, p.text_a, symmetric=True))
    return out


def process_asymmetric(
    items: Sequence[LabeledText],
    global_label_pool: Sequence[str],
    m: int,
    rng: SeededRng,
    instruction: str = templates.CLASSIFICATION,
) -> list[TrainingSample]:
    """Text -> label samples; negatives are other labels of the dataset, topped up globally."""
    if m < 1:
        raise DataError("m must be >= 1")
    by_dataset: dict[str, list[str]] = {}
    for it in items:
        labels = by_dataset.setdefault(it.dataset_id, [])
        if it.label not in labels:
            labels.append(it.label)
    global_pool = list(dict.fromkeys(global_label_pool))
    out = []
    for it in items:
        local = [lab for lab in by_dataset[it.dataset_id] if lab != it.label]
        negs = rng.sample(local, m) if len(local) > m else rng.sample(local, len(local))
        if len(negs) < m:
            taken = set(negs) | {it.label}
            extra = [lab for lab in global_pool if lab not in taken]
            need = m - len(negs)
            if len(extra) < need:
                raise DataError(
                    f"dataset {it.dataset_id!r}: need {need} global labels, only {len(extra)} available"
                )
            negs += rng.sample(extra, need)
        out.append(TrainingSample(instruction, it.text, it.label, negs, symmetric=False))
    return out


def example_based_labeling(
    groups: Mapping[str, Sequence[str]],
    samples_per_class: int,
    m: int,
    rng: SeededRng,
    instruction: str = templates.CLASSIFICATION,
) -> list[TrainingSample]:
    """Same-class example as positive, other-class examples as negatives; instructed on all sides."""
    classes = {lab: list(dict.fromkeys(texts)) for lab, texts in groups.items()}
    usable = [lab for lab, texts in classes.items() if len(texts) >= 2]
    if len(classes) < 2:
        raise DataError("example-based labeling needs at least two classes")
    out = []
    for lab in usable:
        others = [t for other, texts in classes.items() if other != lab for t in texts]
        for _ in range(samples_per_class):
            query, pos = rng.sample(classes[lab], 2)
            cands = [t for t in dict.fromkeys(others) if t != pos and t != query]
            if len(cands) < m:
                raise DataError(f"class {lab!r}: only {len(cands)} other-class texts for m={m}")
            out.append(TrainingSample(instruction, query, pos, rng.sample(cands, m), symmetric=True))
    return out


def validate_samples(samples: Iterable[TrainingSample]) -> None:
    for i, s in enumerate(samples):
        if s.positive in s.hard_negatives:
            raise DataError(f"sample {i}: positive appears among its hard negatives")


# -- mining -----------------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("EMBFORGE_THREADS", "1")))
    except ValueError:
        return 1


def rank_pool(query_emb: np.ndarray, pool_emb: np.ndarray) -> np.ndarray:
    """Pool indices by descending cosine; ties keep the lower index first."""
    sims = pool_emb @ query_emb
    return np.argsort(-sims, kind="stable")


def mine_hard_negatives(
    encoder,
    samples: Sequence[TrainingSample],
    pool: CandidatePool,
    window: tuple[int, int] = (50, 100),
    m: int = 7,
    rng: SeededRng | None = None,
    workers: int | None = None,
) -> list[TrainingSample]:
    """Replace each sample's negatives with ``m`` pool passages drawn from a rank window.

    Ranks are 1-indexed over the whole pool by cosine to the instructed query;
    the positive (and the query text itself) are never drawn.
    """
    lo, hi = window
    if not 1 <= lo <= hi:
        raise DataError(f"invalid rank window {window}")
    n = len(pool)
    if n < hi:
        lo, hi = max(1, min(lo, n // 2)), n
        logger.warning("pool of %d passages is smaller than window end %d; using window [%d, %d]",
                       n, window[1], lo, hi)
    if m > hi - lo + 1:
        raise DataError(f"m={m} exceeds window size {hi - lo + 1}")
    rng = rng or SeededRng(0)

    pool_cache: dict[str, np.ndarray] = {}

    def pool_embeddings(instruction: str) -> np.ndarray:
        if instruction not in pool_cache:
            texts = [format_query(instruction, p) for p in pool.passages]
            pool_cache[instruction] = l2_normalize(encoder.encode_texts_chunked(texts)).double().numpy()
        return pool_cache[instruction]

    for s in samples:
        pool_embeddings(s.instruction if s.symmetric else "")
    q_emb = l2_normalize(encoder.encode_texts_chunked([s.query_text() for s in samples])).double().numpy()

    def mine_one(i: int) -> TrainingSample:
        s = samples[i]
        order = rank_pool(q_emb[i], pool_embeddings(s.instruction if s.symmetric else ""))
        cands = [pool[j] for j in order[lo - 1 : hi] if pool[j] not in (s.positive, s.query)]
        if len(cands) < m:
            raise DataError(f"sample {i}: only {len(cands)} eligible passages in window [{lo}, {hi}]")
        negs = rng.child(i).sample(cands, m)
        return TrainingSample(s.instruction, s.query, s.positive, negs, s.symmetric, s.sample_id)

    workers = workers or _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(mine_one, range(len(samples))))
    return [mine_one(i) for i in range(len(samples))]


# -- batching -------------------------------------------------------------------------


def assemble_batch(samples: Sequence[TrainingSample], encoder, with_negatives: bool = True) -> EmbeddedBatch:
    """Encode a batch with the instruction policy applied; all embeddings unit-norm."""
    if not samples:
        raise BatchingError("empty batch")
    m = len(samples[0].hard_negatives) if with_negatives else 0
    if with_negatives and any(len(s.hard_negatives) != m for s in samples):
        raise BatchingError("samples in a batch must share the same number of hard negatives")
    texts = [s.query_text() for s in samples] + [s.passage_text(s.positive) for s in samples]
    if m:
        texts += [s.passage_text(neg) for s in samples for neg in s.hard_negatives]
    emb = l2_normalize(encoder.encode_texts(texts))
    n, d = len(samples), emb.shape[1]
    return EmbeddedBatch(emb[:n], emb[n : 2 * n], emb[2 * n :].reshape(n, m, d))


# -- JSONL ------------------------------------------------------------------------------


@contextmanager
def atomic_open(path, mode: str = "w"):
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8", newline=None if "b" in mode else "\n") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(rec: Mapping) -> str:
    return json.dumps(rec, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    with atomic_open(path) as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None


def read_samples(path) -> list[TrainingSample]:
    """Samples in file order; ``sample_id`` is set only when the record carries an ``id``."""
    return [TrainingSample.from_record(rec) for rec in read_jsonl(path)]


def write_samples(path, samples: Iterable[TrainingSample]) -> None:
    write_jsonl(path, (s.to_record() for s in samples))


def read_scored_pairs(path) -> list[ScoredPair]:
    try:
        return [ScoredPair(r["text_a"], r["text_b"], r["score"], r.get("scale", "continuous"))
                for r in read_jsonl(path)]
    except KeyError as e:
        raise DataError(f"scored pair record missing field {e}") from None


def read_labeled(path) -> list[LabeledText]:
    try:
        return [LabeledText(r["text"], r["label"], r["dataset_id"]) for r in read_jsonl(path)]
    except KeyError as e:
        raise DataError(f"labeled record missing field {e}") from None
