import struct
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isc.descriptor import GeometryMask, IntensityScanContext, binary_mask
from isc.errors import DimensionMismatchError, OutOfOrderFrameError
from isc.retrieval import (
    DB_MAGIC,
    DatabaseEntry,
    DescriptorDatabase,
    RetrievalConfig,
    best_geometry_match,
    geometry_similarity,
    hamming_distance,
    intensity_similarity,
    max_hamming_for,
    shift_columns,
)
from oracles import brute_geometry, exhaustive_query, loop_cosine, random_database, sparse_isc

CFG = RetrievalConfig()


def entry(values, fid=0):
    return DatabaseEntry.from_isc(IntensityScanContext(values, fid))


masks = st.tuples(st.integers(1, 130), st.integers(1, 24)).flatmap(
    lambda s: st.tuples(arrays(bool, s), arrays(bool, s))
)


def test_geometry_identity_and_complement():
    rng = np.random.default_rng(0)
    m = GeometryMask.from_dense(rng.random((60, 20)) < 0.4)
    assert geometry_similarity(m, m) == 1.0
    zeros = GeometryMask.from_dense(np.zeros((60, 20), bool))
    ones = GeometryMask.from_dense(np.ones((60, 20), bool))
    assert geometry_similarity(zeros, ones) == 0.0


def test_geometry_two_of_sixteen():
    a = np.zeros((4, 4), bool)
    b = a.copy()
    b[0, 1] = b[3, 2] = True
    assert geometry_similarity(GeometryMask.from_dense(a), GeometryMask.from_dense(b)) == 0.875


def test_geometry_dimension_mismatch():
    a = GeometryMask.from_dense(np.zeros((60, 20), bool))
    b = GeometryMask.from_dense(np.zeros((60, 10), bool))
    with pytest.raises(DimensionMismatchError):
        geometry_similarity(a, b)
    with pytest.raises(DimensionMismatchError):
        best_geometry_match(a, b)


@given(pair=masks)
def test_geometry_symmetric_and_bounded(pair):
    a, b = (GeometryMask.from_dense(m) for m in pair)
    s = geometry_similarity(a, b)
    assert s == geometry_similarity(b, a) and 0.0 <= s <= 1.0
    assert hamming_distance(a, b) == int((pair[0] != pair[1]).sum())


def test_shift_convention():
    m = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(shift_columns(IntensityScanContext(m), 1).values, [[3, 1, 2]])
    mask = GeometryMask.from_dense(np.array([[True, False, False]]))
    np.testing.assert_array_equal(shift_columns(mask, 1).to_dense(), [[False, True, False]])


@given(vals=arrays(np.float32, (60, 20), elements=st.sampled_from([0.0, 0.5, 1.0])), s=st.integers(0, 19))
def test_shift_identity_inverse_and_mask_consistency(vals, s):
    isc = IntensityScanContext(vals)
    assert shift_columns(isc, 0) == isc
    assert shift_columns(shift_columns(isc, s), 20 - s) == isc
    assert shift_columns(binary_mask(isc), s) == binary_mask(shift_columns(isc, s))


def test_best_match_self():
    m = GeometryMask.from_dense(np.random.default_rng(1).random((60, 20)) < 0.3)
    assert best_geometry_match(m, m) == (1.0, 0)


def test_best_match_recovers_shift():
    rng = np.random.default_rng(2)
    while True:
        dense = rng.random((60, 20)) < 0.3
        if len({col.tobytes() for col in dense.T}) == 20:
            break
    c = GeometryMask.from_dense(dense)
    q = shift_columns(c, 5)
    score, k = best_geometry_match(q, c)
    assert score == 1.0 and k == 15
    assert shift_columns(q, k) == c
    # exhaustive check: the maximum is unique
    scores = [geometry_similarity(shift_columns(q, s), c) for s in range(20)]
    assert scores.count(1.0) == 1


@given(pair=masks)
def test_best_match_equals_brute_force(pair):
    q, c = pair
    got = best_geometry_match(GeometryMask.from_dense(q), GeometryMask.from_dense(c))
    want = brute_geometry(q, c)
    assert got[1] == want[1] and got[0] == pytest.approx(want[0], abs=1e-12)


def test_best_match_ties_pick_smallest_shift():
    c = GeometryMask.from_dense(np.zeros((8, 6), bool))
    q = GeometryMask.from_dense(np.zeros((8, 6), bool))
    assert best_geometry_match(q, c) == (1.0, 0)
    dense = np.zeros((8, 6), bool)
    dense[:, ::2] = True  # period 2: shifts 0, 2, 4 all match
    m = GeometryMask.from_dense(dense)
    assert best_geometry_match(shift_columns(m, 1), m) == (1.0, 1)


def test_intensity_examples():
    rng = np.random.default_rng(3)
    v = rng.uniform(0.1, 1, (60, 20))
    assert intensity_similarity(IntensityScanContext(v), IntensityScanContext(v)) == 1.0
    a = np.zeros((60, 20))
    b = np.zeros((60, 20))
    a[:30], b[30:] = 0.5, 0.7
    assert intensity_similarity(IntensityScanContext(a), IntensityScanContext(b)) == 0.0


def test_intensity_two_column_hand_example():
    q = np.array([[1.0, 1.0], [0.0, 0.0]])
    c = np.array([[2.0, 0.5], [0.0, 0.5 * np.sqrt(3)]])  # col1 at 60 degrees
    assert intensity_similarity(IntensityScanContext(q), IntensityScanContext(c)) == pytest.approx(0.75)


def test_intensity_zero_column_rule():
    z = np.zeros((3, 2))
    one = np.array([[0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    assert intensity_similarity(IntensityScanContext(z), IntensityScanContext(z)) == 1.0
    # column 0 empty in both (1), column 1 empty in one (0)
    assert intensity_similarity(IntensityScanContext(z), IntensityScanContext(one)) == 0.5


def test_intensity_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        intensity_similarity(IntensityScanContext(np.zeros((3, 2))), IntensityScanContext(np.zeros((2, 3))))


cells = st.sampled_from([0.0, 0.0, 1e-3, 0.3, 0.9, 1.0])


@given(q=arrays(np.float32, (12, 6), elements=cells), c=arrays(np.float32, (12, 6), elements=cells))
def test_intensity_bounded_and_matches_loop_oracle(q, c):
    s = intensity_similarity(IntensityScanContext(q), IntensityScanContext(c))
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(loop_cosine(q, c), abs=1e-12)


@given(
    q=arrays(np.float32, (12, 6), elements=cells),
    c=arrays(np.float32, (12, 6), elements=cells),
    scale=arrays(np.float64, 6, elements=st.floats(0.01, 1.0)),
)
def test_intensity_column_scale_invariance(q, c, scale):
    scaled = (q * scale).astype(np.float32)
    a = intensity_similarity(IntensityScanContext(q), IntensityScanContext(c))
    b = intensity_similarity(IntensityScanContext(scaled), IntensityScanContext(c))
    # only columns whose scaled values stay nonzero keep the same cosine
    if ((scaled > 0) == (q > 0)).all():
        assert a == pytest.approx(b, abs=1e-6)


def test_max_hamming_for():
    assert max_hamming_for(0.9, 1200) == 120
    assert max_hamming_for(1.0, 1200) == 0
    assert max_hamming_for(0.0, 16) == 16


def test_query_empty_database():
    db = DescriptorDatabase()
    assert db.query(entry(np.zeros((60, 20)), 100), CFG) is None


def test_query_exact_copy():
    v = sparse_isc(np.random.default_rng(4))
    db = DescriptorDatabase()
    db.insert(entry(v, 0))
    m = db.query(entry(v, 100), CFG)
    assert (m.candidate_frame_id, m.shift_k, m.geometry_score, m.intensity_score) == (0, 0, 1.0, 1.0)
    assert m.query_frame_id == 100


def test_query_finds_rotated_frame_among_100():
    rng = np.random.default_rng(5)
    q = sparse_isc(rng)
    db = DescriptorDatabase()
    frames = [sparse_isc(rng) for _ in range(100)]
    frames[7] = np.roll(q, 3, axis=1)
    for i, v in enumerate(frames):
        db.insert(entry(v, i))
    m = db.query(entry(q, 200), CFG)
    assert (m.candidate_frame_id, m.shift_k, m.geometry_score, m.intensity_score) == (7, 3, 1.0, 1.0)
    want = exhaustive_query(range(100), frames, 200, q, 0.9, 0.92, 50)
    assert want[:2] == (7, 3)


def test_query_exclusion_window():
    v = sparse_isc(np.random.default_rng(6))
    db = DescriptorDatabase()
    for fid in range(60):
        db.insert(entry(v, fid))
    m = db.query(entry(v, 60), RetrievalConfig(exclusion_window=50))
    # frames 10..59 are too recent; ties among 0..9 go to the smallest id
    assert m.candidate_frame_id == 0
    assert db.query(entry(v, 60), RetrievalConfig(exclusion_window=60)) is None
    assert db.query(entry(v, 59), RetrievalConfig(exclusion_window=59)) is None
    assert db.query(entry(v, 60), RetrievalConfig(exclusion_window=59)).candidate_frame_id == 0


def test_query_prefers_higher_intensity_score():
    rng = np.random.default_rng(7)
    q = sparse_isc(rng)
    near = q * np.float32(1.0)
    near[q > 0] = np.clip(q[q > 0] + rng.normal(0, 0.05, (q > 0).sum()), 0.01, 1)
    db = DescriptorDatabase()
    db.insert(entry(near, 0))
    db.insert(entry(q, 1))
    assert db.query(entry(q, 100), CFG).candidate_frame_id == 1


@given(
    seed=st.integers(0, 2**32 - 1),
    eps_g=st.sampled_from([0.6, 0.8, 0.9, 0.95]),
    eps_i=st.sampled_from([0.3, 0.7, 0.92]),
    window=st.integers(0, 120),
)
def test_staged_query_matches_exhaustive(seed, eps_g, eps_i, window):
    rng = np.random.default_rng(seed)
    q, frames = random_database(rng, 60)
    db = DescriptorDatabase()
    for i, v in enumerate(frames):
        db.insert(entry(v, i))
    cfg = RetrievalConfig(eps_g, eps_i, window)
    got = db.query(entry(q, 100), cfg)
    want = exhaustive_query(range(60), frames, 100, q, eps_g, eps_i, window)
    if want is None:
        assert got is None
    else:
        assert (got.candidate_frame_id, got.shift_k) == want[:2]
        assert got.geometry_score == pytest.approx(want[2], abs=1e-12)
        assert got.intensity_score == pytest.approx(want[3], abs=1e-9)
        assert got.geometry_score >= eps_g and got.intensity_score >= eps_i
        assert got.candidate_frame_id < 100 - window


def test_insert_order_and_shape():
    db = DescriptorDatabase(capacity=1)
    db.insert(entry(np.zeros((60, 20)), 5))
    with pytest.raises(OutOfOrderFrameError):
        db.insert(entry(np.zeros((60, 20)), 5))
    with pytest.raises(OutOfOrderFrameError):
        db.insert(entry(np.zeros((60, 20)), 3))
    with pytest.raises(DimensionMismatchError):
        db.insert(entry(np.zeros((60, 10)), 9))
    for fid in range(6, 40):
        db.insert(entry(np.zeros((60, 20)), fid))
    assert len(db) == 35 and db.last_frame_id == 39 and 20 in db and 4 not in db


def test_dump_layout_and_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    db = DescriptorDatabase(60, 20, 50.0)
    ids = [3, 10, 2**40]
    vals = [sparse_isc(rng) for _ in ids]
    for fid, v in zip(ids, vals):
        db.insert(entry(v, fid))
    p = tmp_path / "db.iscdb"
    db.dump(p)
    data = p.read_bytes()

    # independent decode with struct
    assert data[:6] == DB_MAGIC == b"ISCDB1"
    n_r, n_s, l_max, n = struct.unpack_from("<IIdQ", data, 6)
    assert (n_r, n_s, l_max, n) == (60, 20, 50.0, 3)
    off = 6 + 24
    rec = 8 + 4 * 1200 + 8 * 20
    assert len(data) == off + 3 * rec
    for k, (fid, v) in enumerate(zip(ids, vals)):
        base = off + k * rec
        assert struct.unpack_from("<Q", data, base)[0] == fid
        cells = struct.unpack_from("<1200f", data, base + 8)
        np.testing.assert_array_equal(np.array(cells, np.float32).reshape(60, 20), v)
        words = struct.unpack_from("<20Q", data, base + 8 + 4800)
        for j in range(20):
            col = [(words[j] >> i) & 1 for i in range(60)]
            np.testing.assert_array_equal(col, (v[:, j] > 0).astype(int))

    back = DescriptorDatabase.load(p)
    assert back.shape == (60, 20) and back.l_max == 50.0
    np.testing.assert_array_equal(back.frame_ids, ids)
    for fid in ids:
        assert back.get(fid).isc == db.get(fid).isc and back.get(fid).mask == db.get(fid).mask


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTADB" + b"\0" * 40)
    with pytest.raises(ValueError):
        DescriptorDatabase.load(p)
    db = DescriptorDatabase()
    db.insert(entry(np.zeros((60, 20)), 0))
    db.dump(p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError):
        DescriptorDatabase.load(p)


def test_queries_during_inserts_are_consistent():
    rng = np.random.default_rng(9)
    frames = [sparse_isc(rng) for _ in range(400)]
    q = entry(frames[0], 10_000)
    db = DescriptorDatabase(capacity=4)
    db.insert(entry(frames[0], 0))
    errors = []

    def writer():
        for i in range(1, 400):
            db.insert(entry(frames[i], i))

    def reader():
        try:
            for _ in range(50):
                m = db.query(q, CFG)
                assert m is not None and m.candidate_frame_id == 0 and m.intensity_score == 1.0
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and len(db) == 400


def test_config_validation():
    with pytest.raises(ValueError):
        RetrievalConfig(eps_geometry=1.5)
    with pytest.raises(ValueError):
        RetrievalConfig(exclusion_window=-1)
