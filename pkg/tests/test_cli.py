import json

import pytest

from mmlate.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> encode -> index -> search on a small corpus."""
    root = tmp_path_factory.mktemp("pipe")
    steps = [
        ["synth", "--out", root / "ds", "--doc-count", 100, "--seed", 1],
        ["train", "--dataset", root / "ds", "--out", root / "enc.bin", "--seed", 1, "--epochs", 2, "--dim", 16,
         "--lr", 0.01, "--log", root / "loss.tsv"],
        ["encode", "--dataset", root / "ds", "--checkpoint", root / "enc.bin", "--out", root / "emb"],
        ["index", "--embeddings", root / "emb" / "docs.emb", "--out", root / "idx.bin"],
        ["search", "--index", root / "idx.bin", "--queries", root / "emb" / "queries.emb", "--out", root / "run.txt"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return root


def test_pipeline_outputs(pipeline):
    for name in ("ds/docs.feat", "ds/qrels.tsv", "enc.bin", "emb/docs.emb", "emb/labels.tsv", "idx.bin", "run.txt"):
        assert (pipeline / name).exists(), name
    lines = (pipeline / "run.txt").read_text().splitlines()
    assert len(lines) == 50 * 10
    assert lines[0].split("\t")[2] == "1"


def test_eval_prints_table(pipeline, capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--run", pipeline / "run.txt", "--qrels", pipeline / "emb" / "qrels.tsv",
                       "--out", tmp_path / "per.tsv", "--summary", tmp_path / "s.json")
    assert code == 0
    table = dict(line.split("\t") for line in out.strip().splitlines()[1:])
    assert set(table) == {"R@1", "R@5", "R@10", "nDCG@10"}
    assert 0.0 <= float(table["R@1"]) <= float(table["R@10"]) <= 1.0
    assert set(json.loads((tmp_path / "s.json").read_text())["means"]) == set(table)


def test_eval_perfect_run(capsys, tmp_path):
    (tmp_path / "qrels.tsv").write_text("q1\tda\t1\nq2\tdb\t2\nq2\tdc\t1\n")
    (tmp_path / "run.txt").write_text("q1\tda\t1\t0.9\nq1\tdx\t2\t0.1\nq2\tdb\t1\t3.0\nq2\tdc\t2\t2.0\n")
    code, out, _ = run(capsys, "eval", "--run", tmp_path / "run.txt", "--qrels", tmp_path / "qrels.tsv",
                       "--metrics", "R@1,nDCG@10")
    assert code == 0
    assert "R@1\t1.0000" in out and "nDCG@10\t1.0000" in out


@pytest.mark.parametrize("fusion", ["mean", "max", "rrf"])
def test_search_fusion_modes(pipeline, capsys, tmp_path, fusion):
    code, _, _ = run(capsys, "search", "--index", pipeline / "idx.bin", "--queries", pipeline / "emb" / "queries.emb",
                     "--fusion", fusion, "--k", 5, "--out", tmp_path / "run.txt")
    assert code == 0
    assert len((tmp_path / "run.txt").read_text().splitlines()) == 50 * 5


def test_search_router_and_prefilter(pipeline, capsys, tmp_path):
    code, _, _ = run(capsys, "search", "--index", pipeline / "idx.bin", "--queries", pipeline / "emb" / "queries.emb",
                     "--fusion", "router", "--route-modality", "audio", "--out", tmp_path / "a.txt")
    assert code == 0
    code, _, _ = run(capsys, "search", "--index", pipeline / "idx.bin", "--queries", pipeline / "emb" / "queries.emb",
                     "--candidates", 10, "--out", tmp_path / "b.txt")
    assert code == 0
    # a shortlist covering the whole test split is the exhaustive search
    assert (tmp_path / "b.txt").read_bytes() == (pipeline / "run.txt").read_bytes()


def test_rerun_is_byte_identical(pipeline, tmp_path):
    argv = [["synth", "--out", tmp_path / "ds", "--doc-count", 100, "--seed", 1],
            ["train", "--dataset", tmp_path / "ds", "--out", tmp_path / "enc.bin", "--seed", 1, "--epochs", 2,
             "--dim", 16, "--lr", 0.01, "--log", tmp_path / "loss.tsv"]]
    for a in argv:
        assert main([str(x) for x in a]) == 0
    for name in ("ds/docs.feat", "ds/queries.feat", "ds/qrels.tsv", "enc.bin", "loss.tsv"):
        assert (tmp_path / name).read_bytes() == (pipeline / name).read_bytes(), name


def test_untrained_encode_needs_seed(pipeline, capsys, tmp_path):
    code, _, err = run(capsys, "encode", "--dataset", pipeline / "ds", "--out", tmp_path / "e")
    assert code == 1 and "encode" in err


def test_missing_file_names_stage(capsys, tmp_path):
    code, _, err = run(capsys, "index", "--embeddings", tmp_path / "nothing.emb", "--out", tmp_path / "i.bin")
    assert code == 1
    assert err.startswith("mmlate: index:")


def test_wrong_container_kind(pipeline, capsys, tmp_path):
    # raw feature files are not embeddings
    code, _, err = run(capsys, "index", "--embeddings", pipeline / "ds" / "docs.feat", "--out", tmp_path / "i.bin")
    assert code == 1 and "index" in err


def test_seed_is_mandatory(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path / "x")])
    assert exc.value.code != 0


def test_unknown_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus"])
    assert exc.value.code != 0


def test_gradcheck_command(capsys, tmp_path):
    code, _, _ = run(capsys, "gradcheck", "--seed", 0, "--configs", 4, "--out", tmp_path / "g.tsv")
    assert code == 0
    rows = (tmp_path / "g.tsv").read_text().strip().splitlines()[1:]
    assert len(rows) == 12 and all(r.endswith("\tpass") for r in rows)


def test_bench_small(capsys):
    code, out, _ = run(capsys, "bench", "--docs", 50, "--tokens", 20, "--dim", 16, "--query-tokens", 8,
                       "--repeats", 1, "--seed", 0)
    assert code == 0
    assert "tokens_per_second" in out


def test_experiment_li_mw_beats_mean_fusion(capsys, tmp_path):
    """Default synthetic corpus, main variant only."""
    code, _, err = run(capsys, "experiment", "--seed", 0, "--variants", "A", "--resamples", 1000,
                       "--out", tmp_path / "grid.tsv")
    assert code == 0 and err.startswith("baseline\t")
    out = (tmp_path / "grid.tsv").read_text()
    rows = {line.split("\t")[0]: line.split("\t") for line in out.strip().splitlines()}
    head = rows["system"]
    col = head.index("nDCG@10")
    a_row = next(r for name, r in rows.items() if name.startswith("A:"))
    print("\n" + out)
    assert float(a_row[col]) >= float(rows["li-mean"][col])
    assert float(a_row[col]) >= float(rows["pooled-mean"][col])
