import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmlate.evalkit import (
    evaluate,
    modality_accuracy,
    ndcg_at_k,
    paired_bootstrap,
    parse_metric,
    recall_at_k,
    write_report,
    index_modality_accuracy,
)
from mmlate.index import RankedList, build_index
from mmlate.tensors import EncodedQuery, MultimodalDocument, Qrels, normalize_rows

import oracles

MODS = ("vision", "audio", "ocr", "metadata")


def random_case(rng, n_docs=30):
    docs = [f"d{i}" for i in range(n_docs)]
    ranking = [docs[i] for i in rng.permutation(n_docs)[: int(rng.integers(1, n_docs + 1))]]
    grades = {d: int(rng.integers(0, 4)) for d in rng.choice(docs, int(rng.integers(1, 8)), replace=False)}
    if not any(g > 0 for g in grades.values()):
        grades[docs[0]] = 1
    return ranking, grades


class TestRecall:
    def test_hit_at_three(self):
        assert recall_at_k(["a", "b", "r", "c"], {"r": 1}, 5) == 1.0

    def test_miss_at_eleven(self):
        ranking = [f"x{i}" for i in range(10)] + ["r"]
        assert recall_at_k(ranking, {"r": 1}, 10) == 0.0

    def test_fraction_variant(self):
        assert recall_at_k(["a", "b"], {"a": 1, "c": 2}, 2, fraction=True) == 0.5

    def test_bad_k(self):
        with pytest.raises(ValueError):
            recall_at_k(["a"], {"a": 1}, 0)

    def test_random_against_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ranking, grades = random_case(rng)
            for k in (1, 5, 10):
                assert recall_at_k(ranking, grades, k) == oracles.ref_hit(ranking, grades, k)
                assert recall_at_k(ranking, grades, k, True) == pytest.approx(
                    oracles.ref_recall_fraction(ranking, grades, k), abs=1e-12)


class TestNdcg:
    def test_ideal_single(self):
        assert ndcg_at_k(["a", "b"], {"a": 1}) == 1.0

    def test_worked_example(self):
        grades = {"x": 2, "y": 1}
        value = ndcg_at_k(["z", "x", "y"], grades)
        dcg = 3 / math.log2(3) + 1 / math.log2(4)
        idcg = 3 / 1 + 1 / math.log2(3)
        assert dcg == pytest.approx(2.3927, abs=1e-4)
        assert idcg == pytest.approx(3.6309, abs=1e-4)
        assert value == pytest.approx(dcg / idcg, abs=1e-12)
        assert value == pytest.approx(0.6590, abs=1e-4)

    def test_linear_gain(self):
        assert ndcg_at_k(["z", "x", "y"], {"x": 2, "y": 1}, gain="linear") == pytest.approx(
            oracles.ref_ndcg(["z", "x", "y"], {"x": 2, "y": 1}, linear=True))

    def test_all_zero_grades(self):
        with pytest.raises(ValueError):
            ndcg_at_k(["a"], {"a": 0})

    def test_random_against_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            ranking, grades = random_case(rng)
            assert ndcg_at_k(ranking, grades) == pytest.approx(oracles.ref_ndcg(ranking, grades), abs=1e-9)

    @settings(max_examples=60)
    @given(st.lists(st.integers(1, 4), min_size=2, max_size=12, unique=True))
    def test_reversal_of_distinct_grades_decreases(self, values):
        grades = {f"d{i}": g for i, g in enumerate(values)}
        best = sorted(grades, key=lambda d: -grades[d])
        assert ndcg_at_k(best[::-1], grades) < ndcg_at_k(best, grades)

    @settings(max_examples=60)
    @given(st.integers(0, 2**31 - 1))
    def test_moving_relevant_doc_earlier_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        ranking, grades = random_case(rng, 15)
        rel = [i for i, d in enumerate(ranking) if grades.get(d, 0) > 0 and i > 0]
        if not rel:
            return
        i = rel[0]
        moved = ranking[:]
        moved[i - 1], moved[i] = moved[i], moved[i - 1]
        if grades.get(ranking[i - 1], 0) <= grades[ranking[i]]:
            assert ndcg_at_k(moved, grades) >= ndcg_at_k(ranking, grades) - 1e-15

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(2)
        ranking, grades = random_case(rng)
        rename = {d: f"new-{d}" for d in set(ranking) | set(grades)}
        r2 = [rename[d] for d in ranking]
        g2 = {rename[d]: g for d, g in grades.items()}
        assert ndcg_at_k(r2, g2) == ndcg_at_k(ranking, grades)
        assert recall_at_k(r2, g2, 5) == recall_at_k(ranking, grades, 5)


class TestEvaluate:
    def test_parse_metric(self):
        assert parse_metric("R@5") == ("recall", 5)
        assert parse_metric("nDCG@10") == ("ndcg", 10)
        with pytest.raises(ValueError):
            parse_metric("MAP@3")

    def test_mean_is_unweighted(self):
        runs = {"q1": ["a"], "q2": ["x", "b"]}
        qrels = Qrels({("q1", "a"): 1, ("q2", "b"): 1})
        rep = evaluate(runs, qrels, ["R@1", "nDCG@10"])
        assert rep.per_query["R@1"] == {"q1": 1.0, "q2": 0.0}
        assert rep.means["R@1"] == 0.5
        assert rep.means["nDCG@10"] == pytest.approx(np.mean(list(rep.per_query["nDCG@10"].values())))
        for values in rep.per_query.values():
            assert all(0.0 <= v <= 1.0 for v in values.values())

    def test_unjudged_query_excluded_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            rep = evaluate({"q1": ["a"], "ghost": ["a"]}, Qrels({("q1", "a"): 1}), ["R@1"])
        assert set(rep.per_query["R@1"]) == {"q1"}
        assert "excluded" in caplog.text

    def test_accepts_ranked_lists(self):
        runs = {"q": RankedList("q", [("a", 1.0)])}
        assert evaluate(runs, Qrels({("q", "a"): 2}), ["nDCG@10"]).means["nDCG@10"] == 1.0

    def test_metadata_and_report(self, tmp_path):
        rep = evaluate({"q": ["a"]}, Qrels({("q", "a"): 1}), ["R@1"], gain="linear")
        assert rep.metadata["gain"] == "linear"
        write_report(tmp_path / "r.tsv", rep, tmp_path / "s.json")
        lines = (tmp_path / "r.tsv").read_text().splitlines()
        assert lines[0] == "query_id\tR@1" and lines[-1].startswith("mean\t1.0")
        assert json.loads((tmp_path / "s.json").read_text())["means"] == {"R@1": 1.0}


class TestModalityAccuracy:
    def test_macro_and_micro(self):
        pairs = [("audio", "audio")] * 3 + [("audio", "vision")] + [("ocr", "ocr")]
        acc = modality_accuracy(pairs, MODS)
        assert acc.per_modality == {"audio": 0.75, "ocr": 1.0}
        assert acc.macro == pytest.approx(0.875)
        assert acc.micro == pytest.approx(0.8)
        assert acc.average == acc.macro

    def test_label_outside_set(self):
        with pytest.raises(ValueError):
            modality_accuracy([("smell", "audio")], MODS)

    def _index(self, mats):
        return build_index([MultimodalDocument("d", mats)], MODS)

    def test_planted_audio_query(self):
        e = np.eye(8, dtype=np.float32)
        idx = self._index({"vision": e[0:2], "audio": e[2:4], "ocr": e[4:6], "metadata": e[6:8]})
        q = EncodedQuery("q", e[2:4], "audio")
        acc = index_modality_accuracy([q], idx, {"q": "d"})
        assert acc.per_modality == {"audio": 1.0}

    def test_identical_modalities_favour_first_class(self):
        mat = normalize_rows(np.random.default_rng(3).standard_normal((3, 6)))
        idx = self._index({m: mat for m in MODS})
        queries = [EncodedQuery(f"q{m}", mat[:1], m) for m in MODS]
        acc = index_modality_accuracy(queries, idx, {q.query_id: "d" for q in queries})
        assert acc.per_modality == {"vision": 1.0, "audio": 0.0, "ocr": 0.0, "metadata": 0.0}


class TestBootstrap:
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
    @settings(max_examples=30, deadline=None)
    def test_self_comparison_is_one(self, values):
        assert paired_bootstrap(values, values, 500) == 1.0

    def test_uniform_dominance_is_zero(self):
        a = np.linspace(0.5, 1.0, 30)
        assert paired_bootstrap(a, a - 0.1, 10_000, seed=3) == 0.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(0)
        a, b = rng.random(50), rng.random(50)
        assert paired_bootstrap(a, b, 2000, 7) == paired_bootstrap(a, b, 2000, 7)

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.random(25), rng.random(25) * 0.9
        got = paired_bootstrap(a, b, 3000, seed=5)
        # independent resampling with its own generator: agreement within sampling error
        ref_rng = np.random.default_rng(99)
        worse = sum(np.mean((a - b)[ref_rng.integers(0, 25, 25)]) <= 0 for _ in range(3000)) / 3000
        assert abs(got - worse) < 0.03

    def test_mismatched_sets(self):
        with pytest.raises(ValueError):
            paired_bootstrap({"a": 1.0}, {"b": 1.0})
        with pytest.raises(ValueError):
            paired_bootstrap([1.0, 2.0], [1.0])
