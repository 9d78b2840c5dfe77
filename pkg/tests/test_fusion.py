import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmlate import fusion
from mmlate.evalkit import evaluate
from mmlate.index import RankedList, build_index
from mmlate.synthgen import SynthConfig, generate
from mmlate.tensors import EncodedQuery, FormatError, MultimodalDocument, Qrels, normalize_rows

import oracles

MODS = ("vision", "audio", "ocr", "metadata")


def random_table(rng, n_docs=12, mods=MODS, integers=False, holes=True):
    cols = {}
    for m in mods:
        col = {}
        for i in range(n_docs):
            if holes and rng.random() < 0.2 and m != mods[0]:
                continue
            col[f"d{i:02d}"] = float(rng.integers(-20, 21)) if integers else float(rng.standard_normal())
        cols[m] = col
    return {"q": cols}


class TestMean:
    def test_two_point_mean(self):
        out = fusion.fuse_mean({"q": {"vision": {"d": 0.4}, "audio": {"d": 0.8}}})
        assert out["q"].items[0][1] == pytest.approx(0.6)

    def test_identical_columns_equal_single_column(self):
        col = {f"d{i}": float(v) for i, v in enumerate(np.random.default_rng(0).standard_normal(10))}
        table = {"q": {m: dict(col) for m in MODS}}
        single = fusion.fuse_router(table, {"q": "ocr"})
        assert fusion.fuse_mean(table)["q"].doc_ids == single["q"].doc_ids

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_reference(self, seed):
        table = random_table(np.random.default_rng(seed))
        got = fusion.fuse_mean(table)["q"]
        ref = oracles.ref_mean(table["q"])
        assert got.doc_ids == oracles.ref_sort(ref) or all(
            abs(ref[a] - ref[b]) < 1e-12 for a, b in zip(got.doc_ids, oracles.ref_sort(ref)))
        for d, s in got.items:
            assert s == pytest.approx(ref[d], abs=1e-12)

    def test_missing_entries_excluded_from_denominator(self):
        table = {"q": {"vision": {"a": 1.0, "b": 0.2}, "audio": {"b": 0.6}}}
        assert dict(fusion.fuse_mean(table)["q"].items) == {"a": 1.0, "b": pytest.approx(0.4)}

    def test_doc_without_entries(self):
        table = {"q": {"vision": {"a": -math.inf}, "audio": {"a": -math.inf}}}
        with pytest.raises(ValueError):
            fusion.fuse_mean(table)
        with pytest.raises(ValueError):
            fusion.fuse_max(table)

    def test_empty_table(self):
        with pytest.raises(ValueError):
            fusion.fuse_mean({})


class TestMax:
    def test_two_point_max(self):
        out = fusion.fuse_max({"q": {"vision": {"d": 0.4}, "audio": {"d": 0.8}}}, order=MODS)["q"]
        assert out.items == [("d", 0.8)] and out.chosen == {"d": "audio"}

    def test_dominant_column_ranking(self):
        rng = np.random.default_rng(1)
        table = random_table(rng, holes=False)
        for d in table["q"]["audio"]:
            table["q"]["audio"][d] += 100.0
        assert fusion.fuse_max(table)["q"].doc_ids == oracles.ref_sort(table["q"]["audio"])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_reference(self, seed):
        table = random_table(np.random.default_rng(seed))
        ref = oracles.ref_max(table["q"])
        got = fusion.fuse_max(table, order=MODS)["q"]
        assert got.doc_ids == oracles.ref_sort(ref)
        assert dict(got.items) == ref

    def test_tie_goes_to_declared_first(self):
        table = {"q": {"metadata": {"d": 0.5}, "audio": {"d": 0.5}}}
        assert fusion.fuse_max(table, order=MODS)["q"].chosen == {"d": "audio"}

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_max_dominates_mean_per_doc(self, seed):
        table = random_table(np.random.default_rng(seed))
        mx = dict(fusion.fuse_max(table)["q"].items)
        for d, s in fusion.fuse_mean(table)["q"].items:
            assert mx[d] >= s - 1e-12


class TestTransforms:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_max_invariant_to_strictly_increasing_maps(self, seed):
        table = random_table(np.random.default_rng(seed), integers=True)
        base = fusion.fuse_max(table)["q"].doc_ids
        for f in (lambda x: x**3, lambda x: math.exp(x / 10), lambda x: 7 * x - 2):
            mapped = {"q": {m: {d: f(s) for d, s in col.items()} for m, col in table["q"].items()}}
            assert fusion.fuse_max(mapped)["q"].doc_ids == base

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_mean_invariant_to_positive_affine_maps(self, seed):
        table = random_table(np.random.default_rng(seed), integers=True, holes=False)
        base = fusion.fuse_mean(table)["q"].doc_ids
        mapped = {"q": {m: {d: 2.0 * s + 3.0 for d, s in col.items()} for m, col in table["q"].items()}}
        assert fusion.fuse_mean(mapped)["q"].doc_ids == base

    def test_mean_not_invariant_to_nonlinear_monotone_map(self):
        table = {"q": {"vision": {"a": 0.0, "b": 2.0}, "audio": {"a": 5.0, "b": 2.0}}}
        assert fusion.fuse_mean(table)["q"].doc_ids == ["a", "b"]
        cubed = {"q": {m: {d: s**3 for d, s in col.items()} for m, col in table["q"].items()}}
        assert fusion.fuse_max(cubed)["q"].doc_ids == fusion.fuse_max(table)["q"].doc_ids
        assert fusion.fuse_mean(cubed)["q"].doc_ids == ["a", "b"]
        sqrt = {"q": {m: {d: math.sqrt(s) for d, s in col.items()} for m, col in table["q"].items()}}
        assert fusion.fuse_mean(sqrt)["q"].doc_ids == ["b", "a"]


class TestRRF:
    def test_rank_one_twice(self):
        lists = [RankedList("q", [("d", 1.0)]), RankedList("q", [("d", 0.3), ("e", 0.1)])]
        out = fusion.fuse_rrf(lists)
        assert dict(out.items)["d"] == pytest.approx(2 / 61)

    def test_absent_everywhere_excluded(self):
        out = fusion.fuse_rrf([RankedList("q", [("a", 1.0)])])
        assert out.doc_ids == ["a"]

    def test_four_permutations_match_reference(self):
        rng = np.random.default_rng(2)
        docs = [f"d{i:02d}" for i in range(20)]
        perms = [[docs[i] for i in rng.permutation(20)] for _ in range(4)]
        lists = [RankedList("q", [(d, float(20 - r)) for r, d in enumerate(p)]) for p in perms]
        ref = oracles.ref_rrf(perms)
        got = fusion.fuse_rrf(lists)
        assert got.doc_ids == oracles.ref_sort(ref)
        for d, s in got.items:
            assert s == pytest.approx(ref[d], abs=1e-15)

    def test_depends_on_ranks_only(self):
        rng = np.random.default_rng(3)
        table = random_table(rng, holes=False)
        squashed = {"q": {m: {d: math.tanh(s) * 5 for d, s in col.items()} for m, col in table["q"].items()}}
        assert fusion.fuse_rrf_table(table)["q"].items == fusion.fuse_rrf_table(squashed)["q"].items

    def test_nonpositive_constant(self):
        with pytest.raises(ValueError):
            fusion.fuse_rrf([], k_rrf=0)


class TestRouter:
    def test_projection(self):
        table = random_table(np.random.default_rng(4))
        out = fusion.fuse_router(table, {"q": "audio"}, modalities=MODS)
        assert out["q"].doc_ids == oracles.ref_sort(table["q"]["audio"])

    def test_single_modality(self):
        table = random_table(np.random.default_rng(5), mods=("ocr",))
        assert fusion.fuse_router(table, fusion.fixed_routing(table, "ocr"))["q"].doc_ids == \
            oracles.ref_sort(table["q"]["ocr"])

    def test_unknown_modality(self):
        table = random_table(np.random.default_rng(6))
        with pytest.raises(ValueError):
            fusion.fuse_router(table, {"q": "smell"}, modalities=MODS)

    def test_missing_decision(self):
        with pytest.raises(ValueError):
            fusion.fuse_router(random_table(np.random.default_rng(7)), {})

    def test_routing_file(self, tmp_path):
        path = tmp_path / "route.tsv"
        fusion.write_routing(path, {"q1": "audio", "q2": "ocr"})
        assert fusion.read_routing(path, MODS) == {"q1": "audio", "q2": "ocr"}
        path.write_text("q1\tsmell\n")
        with pytest.raises(FormatError, match="line 1"):
            fusion.read_routing(path, MODS)

    def test_oracle_needs_labels(self):
        q = EncodedQuery("q", np.ones((1, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            fusion.oracle_routing([q])

    def test_oracle_routing_beats_random(self):
        """Identity encoder over low-noise synthetic features; 5 seeds."""
        oracle_scores, random_scores = [], []
        for seed in range(5):
            ds = generate(SynthConfig(doc_count=150, nuisance_scale=1.0, query_noise=0.3, seed=seed))
            docs = [MultimodalDocument(d.doc_id, {m: normalize_rows(v) for m, v in d.modalities.items()})
                    for d in ds.documents]
            index = build_index(docs, MODS)
            queries = [EncodedQuery(q.query_id, normalize_rows(q.features), q.target_modality)
                       for q in ds.queries if q.target_modality]
            qrels = Qrels({k: g for k, g in ds.qrels.entries.items() if k[0] in {q.query_id for q in queries}})
            table = fusion.score_table(index, queries, "li")
            oracle = fusion.fuse_router(table, fusion.oracle_routing(queries), 10)
            rand = fusion.fuse_router(table, fusion.random_routing(table, MODS, seed), 10)
            oracle_scores.append(evaluate(oracle, qrels, ["nDCG@10"]).means["nDCG@10"])
            random_scores.append(evaluate(rand, qrels, ["nDCG@10"]).means["nDCG@10"])
        print("oracle router", np.round(oracle_scores, 3), "random router", np.round(random_scores, 3))
        assert np.mean(oracle_scores) >= np.mean(random_scores)


class TestScoreTable:
    def test_li_columns_match_kernel(self):
        from mmlate.scoring import li_mw

        rng = np.random.default_rng(8)
        docs = [MultimodalDocument(f"d{i}", {m: normalize_rows(rng.standard_normal((3, 6)))
                                             for m in MODS if rng.random() < 0.7 or m == "ocr"}) for i in range(8)]
        index = build_index(docs, MODS)
        q = EncodedQuery("q", normalize_rows(rng.standard_normal((4, 6))))
        table = fusion.score_table(index, [q], "li")["q"]
        for d in docs:
            per = li_mw(q.embeddings, d, MODS).per_modality
            for m, v in per.items():
                assert table[m][d.doc_id] == v
        mx = fusion.fuse_max({"q": table}, order=MODS)["q"]
        from mmlate.index import search
        assert mx.items == search(index, q, len(docs)).items

    def test_unknown_source(self):
        docs = [MultimodalDocument("d", {"vision": np.eye(2, dtype=np.float32)})]
        with pytest.raises(ValueError):
            fusion.score_table(build_index(docs), [EncodedQuery("q", np.eye(2, dtype=np.float32))], "bm25")
