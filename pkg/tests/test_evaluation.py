import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from embforge.data import CandidatePool, TrainingSample
from embforge.errors import ConfigError, DataError, InputError
from embforge.evaluation import (
    RetrievalTask,
    evaluate,
    margin_report,
    margin_stats,
    matryoshka_sweep,
    metric_table,
    mrr_at_k,
    positive_ranks,
    recall_at_k,
    spearman,
    top1_agreement,
)


class TableEncoder:
    """Looks every text up in a fixed table of vectors."""

    def __init__(self, table):
        self.table = {k: np.asarray(v, np.float64) for k, v in table.items()}

    def encode_texts_chunked(self, texts, chunk=256):
        return torch.tensor(np.stack([self.table[t] for t in texts]))

    def encode_texts(self, texts):
        return self.encode_texts_chunked(texts)


def random_task(seed, n_queries=30, n_docs=100, d=16, dup=True):
    g = np.random.default_rng(seed)
    corpus = g.standard_normal((n_docs, d))
    if dup:
        corpus[7] = corpus[3]  # exact tie
    queries = g.standard_normal((n_queries, d))
    pos = g.integers(0, n_docs, n_queries).tolist()
    table = {f"d{i}": v for i, v in enumerate(corpus)}
    table.update({f"q{i}": v for i, v in enumerate(queries)})
    task = RetrievalTask([f"q{i}" for i in range(n_queries)], CandidatePool([f"d{i}" for i in range(n_docs)]), pos)
    return task, TableEncoder(table), queries, corpus


class TestMetrics:
    def test_perfect(self):
        assert all(recall_at_k([1, 1, 1], k) == 1.0 for k in (1, 5, 10))

    def test_recall_count(self):
        assert recall_at_k([1, 3, 11], 10) == pytest.approx(2 / 3, abs=1e-15)

    def test_recall_k_past_corpus(self):
        assert recall_at_k([4, 100, 37], 100) == 1.0

    def test_mrr(self):
        assert mrr_at_k([1, 1, 1], 10) == 1.0
        assert mrr_at_k([2], 5) == 0.5
        assert mrr_at_k([1, 3, 11], 10) == pytest.approx((1 + 1 / 3) / 3, abs=1e-15)
        assert mrr_at_k([1, 3, 11], 10) == pytest.approx(0.4444, abs=1e-4)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            recall_at_k([1], 0)
        with pytest.raises(ConfigError):
            mrr_at_k([1], 0)
        with pytest.raises(DataError):
            recall_at_k([0], 1)

    @given(st.lists(st.integers(1, 120), min_size=1, max_size=50))
    def test_identities(self, ranks):
        table = metric_table(ranks, ks=(1, 2, 5, 10, 50, 100))
        assert table["MRR@1"] == table["Recall@1"]
        for a, b in ((1, 2), (2, 5), (5, 10), (10, 50), (50, 100)):
            assert table[f"Recall@{a}"] <= table[f"Recall@{b}"]
            assert table[f"MRR@{a}"] <= table[f"MRR@{b}"]


class TestSpearman:
    def test_identical(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0, abs=1e-15)

    def test_reversed(self):
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)

    def test_one_swap(self):
        assert spearman([1, 2, 3, 5, 4], [1, 2, 3, 4, 5]) == pytest.approx(0.9, abs=1e-12)

    def test_errors(self):
        with pytest.raises(InputError):
            spearman([1, 1, 1], [1, 2, 3])
        with pytest.raises(InputError):
            spearman([1], [1])
        with pytest.raises(InputError):
            spearman([1, 2], [1, 2, 3])

    @settings(max_examples=50)
    @given(st.lists(st.integers(-50, 50), min_size=3, max_size=20).filter(lambda v: len(set(v)) > 1),
           st.integers(0, 10_000))
    def test_monotone_invariance(self, pred, seed):
        gold = np.random.default_rng(seed).permutation(len(pred)).tolist()
        base = spearman(pred, gold)
        assert spearman(np.exp(np.asarray(pred) / 10), gold) == pytest.approx(base, abs=1e-12)
        assert spearman([3 * x + 7 for x in pred], gold) == pytest.approx(base, abs=1e-12)


class TestRanking:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_brute_force_sort(self, seed):
        task, enc, q, c = random_task(seed)
        run = evaluate(enc, task, ks=(1, 5, 10, 100))
        want = oracles.ranks_by_sorting(q, c, task.positive_idx)
        assert run.ranks == want
        for k in (1, 5, 10, 100):
            assert run.metrics[f"Recall@{k}"] == oracles.recall(want, k)
            assert run.metrics[f"MRR@{k}"] == pytest.approx(oracles.mrr(want, k), abs=1e-15)

    def test_tie_goes_to_lower_index(self):
        q = np.array([[1.0, 0.0]])
        c = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        assert positive_ranks(q, c, [1]) == [1]
        assert positive_ranks(q, c, [2]) == [2]

    def test_task_validation(self):
        with pytest.raises(DataError):
            RetrievalTask(["q"], CandidatePool(["a"]), [3])
        with pytest.raises(DataError):
            RetrievalTask(["q", "r"], CandidatePool(["a"]), [0])


class TestSweep:
    def test_full_dim_matches_evaluation(self):
        task, enc, _, _ = random_task(4)
        report = matryoshka_sweep(enc, task, [16], ks=(1, 10))
        assert report["runs"][0]["metrics"] == evaluate(enc, task, ks=(1, 10)).metrics
        assert all(v == 0.0 for v in report["degradation_pct"]["16"].values())

    def test_prefix_equals_zeroed_tail(self):
        task, enc, q, c = random_task(5, dup=False)
        zeroed = {}
        for name, v in enc.table.items():
            z = v.copy()
            z[4:] = 0.0
            zeroed[name] = z
        run = matryoshka_sweep(enc, task, [4], ks=(1, 5, 10))["runs"][0]
        assert run["ranks"] == evaluate(TableEncoder(zeroed), task, ks=(1, 5, 10)).ranks

    def test_degradation_formula(self):
        task, enc, _, _ = random_task(6, dup=False)
        report = matryoshka_sweep(enc, task, [16, 8, 2], ks=(10,))
        full = report["runs"][0]["metrics"]["Recall@10"]
        for run in report["runs"]:
            want = (run["metrics"]["Recall@10"] - full) / full * 100
            assert report["degradation_pct"][str(run["dim"])]["Recall@10"] == pytest.approx(want, abs=1e-12)

    def test_bad_dims(self):
        task, enc, _, _ = random_task(0)
        with pytest.raises(ConfigError):
            matryoshka_sweep(enc, task, [32])


class TestMargins:
    def test_identical(self):
        assert margin_stats(0.4, [0.4] * 7)["margin"] == 0.0

    def test_median_is_fourth_order_statistic(self):
        negs = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.6]
        assert margin_stats(1.0, negs)["neg_median"] == sorted(negs)[3]

    def test_hand_built(self):
        stats = margin_stats(0.9, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
        assert stats["margin"] == pytest.approx(0.5, abs=1e-15)
        assert (stats["neg_min"], stats["neg_max"]) == (0.1, 0.7)

    def test_report_from_encoder(self, caplog):
        # unit vectors at chosen cosines to the query [1, 0]
        sims = {"p": 0.9, **{f"n{i}": (i + 1) / 10 for i in range(7)}}
        table = {k: [s, np.sqrt(1 - s * s)] for k, s in sims.items()}
        table["q"] = [1.0, 0.0]
        enc = TableEncoder(table)
        samples = [TrainingSample("", "q", "p", [f"n{i}" for i in range(7)]), TrainingSample("", "q", "p")]
        with caplog.at_level(logging.WARNING):
            rows = margin_report(enc, samples)
        assert len(rows) == 1 and "no hard negatives" in caplog.text
        assert rows[0]["margin"] == pytest.approx(0.5, abs=1e-12)
        assert rows[0]["sample_id"] == "0"


def test_top1_agreement():
    task, enc, _, _ = random_task(8)
    assert top1_agreement(enc, enc, task) == 1.0
    flipped = TableEncoder({k: -v for k, v in enc.table.items()})
    assert top1_agreement(enc, flipped, task) == 1.0  # cosine is invariant to flipping both sides
    scrambled = TableEncoder({k: (v[::-1] if k.startswith("q") else v) for k, v in enc.table.items()})
    assert top1_agreement(enc, scrambled, task) < 1.0
