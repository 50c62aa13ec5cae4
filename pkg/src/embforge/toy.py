"""Synthetic clustered retrieval corpus.

Every cluster owns a query-side and a disjoint passage-side topic vocabulary, so
a query shares no topic token with its positive: an untrained encoder retrieves
near chance and a trained one has to learn the cross-vocabulary association.
Each training query is paired with several passages of its cluster, which
rules out memorizing individual pairs. Held-out evaluation ranks one passage per
cluster plus filler-only distractors.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

from . import templates
from .data import CandidatePool, TrainingSample, write_jsonl, write_samples, atomic_open
from .evaluation import RetrievalTask
from .numerics import SeededRng


# Stage overrides on top of the desk defaults that converge on this corpus.
# The distill entry trains a randomly initialized student, which needs the same
# warm temperature and step size as pre-training.
RECIPE = {
    "pretrain": {"epochs": 10},
    "finetune": {"epochs": 2},
    "distill": {"epochs": 4, "learning_rate": 3e-3, "loss": {"tau_cl": 0.05}},
}


@dataclass
class ToyCorpus:
    train: list[TrainingSample]
    clusters: list[int]
    pool: CandidatePool
    task: RetrievalTask
    heldout: list[TrainingSample]


def make_toy_corpus(
    n_clusters: int = 32,
    docs_per_cluster: int = 20,
    vocab_size: int = 500,
    heldout_per_cluster: int = 5,
    corpus_size: int = 100,
    topic_words: int = 6,
    pairs_per_doc: int = 4,
    query_shape: tuple[int, int] = (4, 1),
    passage_shape: tuple[int, int] = (4, 3),
    noise_passages: int = 480,
    seed: int = 0,
    instruction: str = templates.RETRIEVAL,
) -> ToyCorpus:
    rng = SeededRng(seed)
    words = [f"w{i:03d}" for i in range(vocab_size)]
    n_topic = 2 * topic_words * n_clusters
    if n_topic >= vocab_size:
        raise ValueError("vocabulary too small for the requested clusters")
    filler = words[n_topic:]
    q_side = [words[2 * topic_words * c : 2 * topic_words * c + topic_words] for c in range(n_clusters)]
    p_side = [words[2 * topic_words * c + topic_words : 2 * topic_words * (c + 1)] for c in range(n_clusters)]

    def text(topic, n_topic_tokens, n_filler):
        toks = rng.sample(topic, n_topic_tokens) + [filler[i] for i in rng.integers(0, len(filler), n_filler)]
        return " ".join(rng.sample(toks, len(toks)))

    seen: set[str] = set()

    def unique(make):
        while True:
            t = make()
            if t not in seen:
                seen.add(t)
                return t

    docs = []  # (cluster, query, passage)
    for c in range(n_clusters):
        for _ in range(docs_per_cluster):
            docs.append((c, text(q_side[c], *query_shape), unique(lambda: text(p_side[c], *passage_shape))))

    train, clusters, heldout, eval_queries, train_passages = [], [], [], [], []
    corpus = []
    for c in range(n_clusters):
        mine = [d for d in docs if d[0] == c]
        seen_train = mine[: docs_per_cluster - heldout_per_cluster]
        passages = [p for _, _, p in seen_train]
        for _, q, p in seen_train:
            # own passage first, then other same-cluster passages
            partners = [p] + rng.sample([x for x in passages if x != p], pairs_per_doc - 1)
            for partner in partners:
                train.append(TrainingSample(instruction, q, partner))
                clusters.append(c)
        train_passages.extend(passages)
        held = mine[docs_per_cluster - heldout_per_cluster :]
        corpus.append(held[0][2])
        for _, q, p in held:
            heldout.append(TrainingSample(instruction, q, p))
            eval_queries.append((q, c))
    while len(corpus) < corpus_size:
        corpus.append(unique(lambda: text(filler, 0, sum(passage_shape))))

    task = RetrievalTask(
        queries=[q for q, _ in eval_queries],
        corpus=CandidatePool(corpus),
        positive_idx=[c for _, c in eval_queries],
        instructions=[instruction] * len(eval_queries),
    )
    # off-topic passages give the mining window something other than other clusters
    noise = [unique(lambda: text(filler, 0, sum(passage_shape))) for _ in range(noise_passages)]
    pool = CandidatePool(train_passages + noise)
    return ToyCorpus(train, clusters, pool, task, heldout)


def write_toy_corpus(out_dir, **kw) -> ToyCorpus:
    """Write train.jsonl, pool.txt, task.jsonl and corpus.txt under ``out_dir``."""
    out = Path(out_dir)
    toy = make_toy_corpus(**kw)
    write_samples(out / "train.jsonl", toy.train)
    with atomic_open(out / "pool.txt") as fh:
        fh.writelines(p + "\n" for p in toy.pool.passages)
    with atomic_open(out / "corpus.txt") as fh:
        fh.writelines(p + "\n" for p in toy.task.corpus.passages)
    write_jsonl(out / "task.jsonl", (
        {"query": q, "instruction": ins, "positive_idx": i}
        for q, ins, i in zip(toy.task.queries, toy.task.instructions, toy.task.positive_idx)
    ))
    return toy


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m embforge.toy", description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--clusters", type=int, default=32)
    ap.add_argument("--docs-per-cluster", type=int, default=20)
    ap.add_argument("--vocab", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_toy_corpus(args.out_dir, n_clusters=args.clusters, docs_per_cluster=args.docs_per_cluster,
                     vocab_size=args.vocab, seed=args.seed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
