import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merge_index.baseline import VqCodebook
from merge_index.core import AssignmentIndex, CoarseCodebook, CoarsePrototype, FineCodebook, IndexConfig, ItemRecord
from merge_index.stream_io import (
    CodebookArtifact,
    CodebookFormatError,
    IntegrityError,
    StreamFormatError,
    SyntheticStreamSpec,
    dumps_artifact,
    format_record,
    generate_stream,
    iter_synthetic,
    load_codebook,
    load_stream,
    loads_artifact,
    save_codebook,
    write_stream,
    zipf_sizes,
)


def test_empty_stream(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("")
    assert list(load_stream(p)) == []


def test_single_record_bit_exact(tmp_path, rng):
    emb = rng.normal(size=64) * 10 ** rng.uniform(-300, 300, size=64)
    item = ItemRecord(42, emb, tag=7, popularity=123456)
    p = tmp_path / "s.csv"
    write_stream(p, [item])
    (got,) = list(load_stream(p, d=64))
    assert (got.item_id, got.tag, got.popularity) == (42, 7, 123456)
    assert got.embedding.tobytes() == emb.tobytes()


def test_dimension_error_names_line(tmp_path):
    good = format_record(ItemRecord(0, np.ones(64)))
    bad = format_record(ItemRecord(1, np.ones(63)))
    p = tmp_path / "s.csv"
    p.write_text(good + "\n" + bad + "\n")
    with pytest.raises(StreamFormatError, match=r"s\.csv:2:.*dimension"):
        list(load_stream(p, d=64))


def test_malformed_line(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("1,2,x,0.5,0.5\n")
    with pytest.raises(StreamFormatError, match=":1:"):
        list(load_stream(p))


def test_generator_degenerate_concentration():
    items = list(generate_stream(SyntheticStreamSpec(10, 1, d=8, concentration=math.inf)))
    assert len(items) == 10
    for it in items[1:]:
        np.testing.assert_array_equal(it.embedding, items[0].embedding)


def test_generator_zipf_zero_uniform_sizes():
    spec = SyntheticStreamSpec(1003, 10, d=4, zipf_exponent=0.0)
    truth = np.array([c for _, c in iter_synthetic(spec)])
    sizes = np.bincount(truth, minlength=10)
    assert sizes.max() - sizes.min() <= 1 and sizes.sum() == 1003


def test_generator_errors():
    with pytest.raises(ValueError):
        list(generate_stream(SyntheticStreamSpec(5, 6)))


def test_generator_determinism(tmp_path):
    spec = SyntheticStreamSpec(3000, 20, d=16, drift_rate=0.01, seed=11)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_stream(a, generate_stream(spec))
    write_stream(b, generate_stream(spec))
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.csv"
    write_stream(c, generate_stream(SyntheticStreamSpec(3000, 20, d=16, drift_rate=0.01, seed=12)))
    assert c.read_bytes() != a.read_bytes()


def test_generator_tags_follow_clusters():
    pairs = list(iter_synthetic(SyntheticStreamSpec(2000, 30, d=8, tag_count=7)))
    tag_of = {}
    for item, c in pairs:
        assert tag_of.setdefault(c, item.tag) == item.tag
        assert 0 <= item.tag < 7


@pytest.mark.parametrize("s", [0.8, 1.0, 1.2])
def test_popularity_zipf_slope(s):
    pop = np.array([it.popularity for it in generate_stream(SyntheticStreamSpec(100_000, 50, d=2, zipf_exponent=s))])
    top = np.sort(pop)[::-1][:10_000]
    slope = np.polyfit(np.log(np.arange(1, 10_001)), np.log(top), 1)[0]
    assert abs(slope + s) <= 0.1


def test_zipf_sizes_sum():
    assert zipf_sizes(100, 3, 1.0).sum() == 100
    np.testing.assert_array_equal(zipf_sizes(9, 3, 0.0), [3, 3, 3])


def _random_fine(rng, n_slots, d, empties):
    fine = FineCodebook(d)
    for k in range(n_slots):
        if k in empties:
            fine.append_empty()
        else:
            fine.add_slot(rng.normal(size=d) * 3, float(rng.uniform(0.1, 50)), created_step=int(rng.integers(0, 99)))
            if rng.random() < 0.3:
                fine.growing_since[k] = int(rng.integers(0, 99))
    fine.step = int(rng.integers(0, 10**6))
    return fine


def test_empty_codebook_round_trip(tmp_path):
    p = tmp_path / "cb"
    save_codebook(FineCodebook(4), None, p)
    fine, coarse = load_codebook(p)
    assert len(fine) == 0 and coarse is None


def test_round_trip_with_empty_slots(tmp_path, rng):
    fine = _random_fine(rng, 5, 6, empties={1, 3})
    p = tmp_path / "cb"
    save_codebook(fine, None, p)
    got, _ = load_codebook(p)
    assert got.equals(fine) and list(got.empty_indices) == [1, 3]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    fine = _random_fine(rng, n, 5, empties=set(rng.integers(0, n, size=n // 4).tolist()))
    act = fine.active_indices.tolist()
    coarse = None
    if act:
        split = int(rng.integers(1, len(act) + 1))
        groups = [act[:split], act[split:]] if split < len(act) else [act]
        protos = [CoarsePrototype(rng.normal(size=5), float(rng.uniform(1, 9)), g) for g in groups]
        parent = np.full(len(fine), -1, dtype=np.int64)
        for c, g in enumerate(groups):
            parent[g] = c
        coarse = CoarseCodebook(protos, parent)
    index = AssignmentIndex()
    for i in range(int(rng.integers(0, 50))):
        if act:
            index.assign(int(rng.integers(0, 10**9)), int(rng.choice(act)))
    art = CodebookArtifact("merge", 5, IndexConfig(d=5).to_dict(), fine=fine, coarse=coarse, index=index)
    back = loads_artifact(dumps_artifact(art))
    assert back.fine.equals(fine)
    assert (coarse is None and back.coarse is None) or back.coarse.equals(coarse)
    assert back.index.forward == index.forward
    assert dumps_artifact(back) == dumps_artifact(art)


def test_vq_layers_round_trip(rng):
    layers = [VqCodebook.from_codewords(rng.normal(size=(4, 3))) for _ in range(2)]
    layers[1].step = 17
    back = loads_artifact(dumps_artifact(CodebookArtifact("rq", 3, layers=layers)))
    assert all(a.equals(b) for a, b in zip(layers, back.layers))


def test_container_errors(rng):
    data = dumps_artifact(CodebookArtifact("merge", 3, fine=_random_fine(rng, 3, 3, set())))
    with pytest.raises(CodebookFormatError, match="truncated"):
        loads_artifact(data[: len(data) // 2])
    with pytest.raises(CodebookFormatError, match="truncated"):
        loads_artifact(data[: data.rfind(b"#sha256")])
    bad = data.replace(b'"ema_count":', b'"ema_count":1', 1)
    with pytest.raises(IntegrityError):
        loads_artifact(bad)
    v2 = data.replace(b" v1\n", b" v2\n", 1)
    with pytest.raises(CodebookFormatError, match="version 2.*version 1"):
        loads_artifact(v2)
    with pytest.raises(CodebookFormatError):
        loads_artifact(b"hello\n")
