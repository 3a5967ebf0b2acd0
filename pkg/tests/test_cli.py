import csv
import json

import numpy as np
import pytest

from merge_index.cli import main
from merge_index.stream_io import load_artifact


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def single_cluster(tmp_path):
    s = tmp_path / "one.csv"
    assert run("gen", "--items", 100, "--clusters", 1, "--dim", 8, "--concentration", "inf", "--out", s) == 0
    return s


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run("gen", "--items", 2000, "--clusters", 10, "--dim", 8, "--seed", 1, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.csv.truth").read_bytes() == (tmp_path / "b.csv.truth").read_bytes()


def test_gen_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("gen", "--items", 10, "--clusters", 0, "--out", tmp_path / "x")
    assert exc.value.code == 2
    assert run("gen", "--items", 10, "--clusters", 20, "--out", tmp_path / "x") == 1
    assert "exceeds" in capsys.readouterr().err


def test_train_single_cluster(tmp_path, single_cluster):
    cb = tmp_path / "m.cb"
    assert run("train", single_cluster, "--d", 8, "--out", cb) == 0
    art = load_artifact(cb)
    assert art.fine.n_active == 1 and len(art.index) == 100
    man = json.loads((tmp_path / "m.cb.manifest.json").read_text())
    assert man["config"]["tau"] == 0.88 and man["inputs"]["stream"]["name"] == "one.csv"
    assert (tmp_path / "m.cb.steps.jsonl").read_text().count("\n") == 1

    out = tmp_path / "ev"
    assert run("eval", cb, "--stream", single_cluster, "--out-dir", out, "--stability-trials", 100) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["i2c_mean"] == pytest.approx(1.0, abs=1e-9)
    assert summary["c2c_mean"] is None and not (out / "c2c_hist.csv").exists()


def test_train_vq_fixed_k(tmp_path, single_cluster):
    cb = tmp_path / "v.cb"
    assert run("train", single_cluster, "--d", 8, "--algo", "vq", "--K", 16, "--out", cb) == 0
    art = load_artifact(cb)
    assert art.kind == "vq" and art.layers[0].K == 16


def test_train_rerun_bit_identical(tmp_path, single_cluster):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = tmp_path / "a" / "m.cb", tmp_path / "b" / "m.cb"
    for p in (a, b):
        assert run("train", single_cluster, "--d", 8, "--seed", 3, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "m.cb.steps.jsonl").read_bytes() == (tmp_path / "b" / "m.cb.steps.jsonl").read_bytes()


def test_train_errors(tmp_path, single_cluster):
    assert run("train", tmp_path / "missing.csv", "--out", tmp_path / "x") == 1
    assert run("train", single_cluster, "--d", 8, "--gamma", 1.5, "--out", tmp_path / "x") == 1
    assert run("train", single_cluster, "--out", tmp_path / "x") == 1  # d=64 vs 8-dim records


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    s = d / "s.csv"
    assert run("gen", "--items", 6000, "--clusters", 12, "--dim", 16, "--concentration", 4000, "--tags", 3,
               "--seed", 5, "--out", s) == 0
    cb = d / "m.cb"
    assert run("train", s, "--d", 16, "--batch-size", 256, "--out", cb, "--audit-every-step") == 0
    return d, s, cb


def test_merge_targets(trained):
    d, _, cb = trained
    n = load_artifact(cb).fine.n_active
    for target in (n, 1, max(1, n // 2)):
        out = d / f"h{target}.cb"
        assert run("merge", cb, "--target", target, "--out", out) == 0
        art = load_artifact(out)
        assert len(art.coarse) == target
        members = sorted(m for p in art.coarse.prototypes for m in p.members)
        assert members == sorted(art.fine.active_indices.tolist())
        assert art.fine.equals(load_artifact(cb).fine)
    assert run("merge", cb, "--target", n + 1, "--out", d / "bad.cb") == 1


def test_assign_matches_training_index(trained):
    d, s, cb = trained
    out = d / "codes.csv"
    assert run("assign", cb, s, "--out", out) == 0
    art = load_artifact(cb)
    rows = read_csv(out)
    assert len(rows) == 6000
    checked = 0
    for r in rows:
        i = int(r["item_id"])
        if i in art.index:
            assert int(r["fine_code"]) == art.index.lookup(i)[1]
            checked += 1
    assert checked > 5000


def test_assign_codeword_and_orthogonal(tmp_path, trained):
    from merge_index.core import ItemRecord
    from merge_index.stream_io import write_stream

    _, _, cb = trained
    art = load_artifact(cb)
    k = int(art.fine.active_indices[0])
    cw = art.fine.codewords[k]
    # a vector orthogonal to every codeword does not exist in general; use the negated codeword of a tight codebook
    far = -art.fine.codewords[art.fine.active_indices].sum(axis=0)
    emb_path = tmp_path / "q.csv"
    write_stream(emb_path, [ItemRecord(1, cw), ItemRecord(2, far)])
    out = tmp_path / "q_codes.csv"
    assert run("assign", cb, emb_path, "--out", out) == 0
    rows = read_csv(out)
    assert int(rows[0]["fine_code"]) == k and float(rows[0]["score"]) == pytest.approx(1.0)
    assert (rows[0]["coarse_code"], rows[1]["fine_code"], rows[1]["coarse_code"]) == ("-1", "-1", "-1")
    bad = tmp_path / "bad.csv"
    write_stream(bad, [ItemRecord(1, np.ones(5))])
    assert run("assign", cb, bad, "--out", tmp_path / "o.csv") == 1


def test_assign_rq_columns(tmp_path, trained):
    d, s, _ = trained
    cb = d / "rq.cb"
    assert run("train", s, "--d", 16, "--batch-size", 256, "--algo", "rq", "--K", 8, "--layers", 3, "--out", cb) == 0
    out = tmp_path / "rq_codes.csv"
    assert run("assign", cb, s, "--out", out) == 0
    assert list(read_csv(out)[0]) == ["item_id", "code_1", "code_2", "code_3"]


def test_eval_compare_self_zero_deltas(tmp_path, trained):
    _, s, cb = trained
    out = tmp_path / "ev"
    assert run("eval", cb, "--stream", s, "--truth", f"{s}.truth", "--compare", cb, "--out-dir", out,
               "--stability-trials", 200) == 0
    deltas = json.loads((out / "compare.json").read_text())["deltas"]
    assert all(v == 0 for v in deltas.values() if v is not None)
    for name in ("i2c_hist.csv", "c2c_hist.csv", "cluster_sizes.csv", "summary.json", "summary.txt", "manifest.json"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    hist = read_csv(out / "i2c_hist.csv")
    assert len(hist) == 100
    assert sum(int(r["count"]) for r in hist) == summary["sample_size"] - summary["i2c_stale"]


def test_eval_incompatible_dims(tmp_path, trained, single_cluster):
    _, s, cb = trained
    other = tmp_path / "o.cb"
    assert run("train", single_cluster, "--d", 8, "--out", other) == 0
    assert run("eval", cb, "--stream", s, "--compare", other, "--out-dir", tmp_path / "e") == 1
