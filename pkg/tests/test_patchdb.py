import math
import warnings

import numpy as np
import pytest

from conpatch.context import ContextParams
from conpatch.imgcore import ImageIOError, save_image, Image
from conpatch.patchdb import (
    KnnIndex,
    PatchDatabase,
    build_index,
    knn_approx,
    knn_approx_many,
    knn_exact,
    knn_exact_many,
    recall,
    sample_database,
    valid_centers,
)

SMALL = ContextParams(sigma=20.0, h=9, m=2, c=3, b=4, alpha=4.0)


def random_db(rng, n, alpha=1.0):
    return PatchDatabase(rng.random((n, 57)).astype(np.float32) * 255, ContextParams(alpha=alpha))


def oracle(db, q, k):
    """Full scan in float64 with a stable sort (lower index wins ties)."""
    d = np.sum((db.vectors.astype(np.float64) - q) ** 2, axis=1)
    order = np.argsort(d, kind="stable")[:k]
    return order, d[order]


# --- database construction ---------------------------------------------------


def test_single_constant_image(backend):
    db = sample_database([np.full((20, 20), 42.0)], 1, SMALL, seed=3)
    assert db.count == 1 and db.dim == 13
    assert np.all(db.content == 42.0)
    assert np.array_equal(db.vectors[0, 9:], [0, 0, 0, 2.0])


def test_same_seed_identical(backend, rng):
    imgs = [rng.random((30, 30)) * 255 for _ in range(3)]
    a = sample_database(imgs, 50, SMALL, seed=9)
    b = sample_database(imgs, 50, SMALL, seed=9)
    c = sample_database(imgs, 50, SMALL, seed=10)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_uniform_over_images(backend, rng):
    imgs = [rng.random((24, 24)) * 255 for _ in range(5)]
    n = 10_000
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        db = sample_database(imgs, n, SMALL, seed=1)
    counts = np.bincount(db.origins[:, 0], minlength=5)
    assert counts.sum() == n
    assert np.all(np.abs(counts - n / 5) <= 4 * math.sqrt(n / 5))


def test_rows_match_origins(backend, rng):
    from conpatch.context import build_con_patch

    imgs = [rng.random((26, 31)) * 255, rng.random((22, 22)) * 255]
    db = sample_database(imgs, 40, SMALL, seed=2)
    xs0, ys0 = valid_centers(imgs[0].shape, SMALL)
    for row, (i, x, y) in zip(db.vectors, db.origins):
        xs, ys = valid_centers(imgs[i].shape, SMALL)
        assert x in xs and y in ys
        np.testing.assert_array_equal(row, build_con_patch(imgs[i], x, y, SMALL).vector.astype(np.float32))
    # without replacement when there is room
    assert len({tuple(o) for o in db.origins}) == 40


def test_oversampling_warns(backend):
    img = np.zeros((SMALL.margin * 2 + 2, SMALL.margin * 2 + 2))
    with pytest.warns(UserWarning, match="replacement"):
        db = sample_database([img], 10, SMALL)
    assert db.count == 10


def test_sample_errors(tmp_path):
    with pytest.raises(ValueError):
        sample_database([], 5, SMALL)
    with pytest.raises(ValueError):
        sample_database([np.zeros((10, 10))], 0, SMALL)
    with pytest.raises(ValueError):
        sample_database([np.zeros((5, 5))], 1, SMALL)
    missing = tmp_path / "nope.png"
    with pytest.raises(ImageIOError, match="nope.png"):
        sample_database([missing], 1, SMALL)


def test_file_round_trip(backend, tmp_path, rng):
    paths = []
    for i in range(2):
        p = tmp_path / f"im{i}.png"
        save_image(Image(np.round(rng.random((30, 30)) * 255)), p)
        paths.append(p)
    db = sample_database(paths, 25, SMALL, seed=4)
    out = tmp_path / "a.cpdb"
    db.save(out)
    back = PatchDatabase.load(out)
    assert back.digest() == db.digest()
    assert back.params == db.params and back.seed == 4
    assert [p for p, _ in back.manifest] == [str(p) for p in paths]
    mm = PatchDatabase.load(out, mmap=True)
    assert np.array_equal(mm.vectors, db.vectors)


def test_corrupt_files(tmp_path, rng):
    db = random_db(rng, 10)
    out = tmp_path / "x.cpdb"
    db.save(out)
    raw = out.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-3])
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "tiny").write_bytes(raw[:8])
    for name in ["short", "magic", "tiny", "absent"]:
        with pytest.raises(ImageIOError):
            PatchDatabase.load(tmp_path / name)


def test_with_alpha_and_content_only(rng):
    db = random_db(rng, 20, alpha=4.0)
    db2 = db.with_alpha(1.0)
    np.testing.assert_allclose(db2.vectors[:, 49:], db.vectors[:, 49:] / 2, rtol=1e-6)
    assert np.array_equal(db2.content, db.content)
    assert np.all(db.with_alpha(0.0).vectors[:, 49:] == 0)
    assert db.content_only().dim == 49
    with pytest.raises(ValueError):
        db.with_alpha(0.0).with_alpha(1.0)


# --- exact search -------------------------------------------------------------


def test_exact_self_match_and_full_sort(backend, rng):
    db = random_db(rng, 200)
    r = knn_exact(db, db.vectors[17], 5)
    assert r.indices[0] == 17 and r.distances[0] == 0.0
    r = knn_exact(db, rng.random(57) * 255, db.count)
    assert sorted(r.indices.tolist()) == list(range(200))
    assert np.all(np.diff(r.distances) >= 0)


def test_exact_matches_oracle(backend, rng):
    db = random_db(rng, 5000)
    qs = rng.random((10, 57)) * 255
    idx, dist = knn_exact_many(db, qs, 20)
    for q, i, d in zip(qs, idx, dist):
        oi, od = oracle(db, q, 20)
        assert np.array_equal(i, oi)
        np.testing.assert_allclose(d, od, rtol=1e-9)


def test_exact_ties_lower_index(backend):
    vec = np.zeros((6, 4), dtype=np.float32)
    vec[[1, 4]] = 1.0
    db = PatchDatabase(vec, ContextParams(c=1, b=3, h=3, m=1))
    r = knn_exact(db, np.ones(4), 3)
    assert r.indices.tolist() == [1, 4, 0]


def test_exact_errors(rng):
    db = random_db(rng, 10)
    with pytest.raises(ValueError):
        knn_exact(db, np.zeros(57), 11)
    with pytest.raises(ValueError):
        knn_exact(db, np.zeros(57), 0)
    with pytest.raises(ValueError):
        knn_exact(db, np.zeros(56), 1)


def test_alpha_zero_ranking_equals_content_only(backend, rng):
    db = random_db(rng, 500, alpha=2.0).with_alpha(0.0)
    qs = rng.random((5, 57)) * 255
    qs[:, 49:] = 0
    a, _ = knn_exact_many(db, qs, 30)
    b, _ = knn_exact_many(db.content_only(), qs[:, :49], 30)
    assert np.array_equal(a, b)


# --- kd-tree --------------------------------------------------------------------


def test_index_structure(rng):
    db = random_db(rng, 1000)
    idx = build_index(db, leaf_size=16)
    leaves = idx.leaves()
    assert np.array_equal(np.sort(np.concatenate(leaves)), np.arange(1000))
    assert all(len(leaf) <= 16 for leaf in leaves)
    assert idx.depth() <= math.ceil(math.log2(1000 / 16)) + 1
    small = build_index(random_db(rng, 10), leaf_size=32)
    assert small.n_nodes == 1 and len(small.leaves()[0]) == 10


def test_identical_vectors(backend):
    db = PatchDatabase(np.full((100, 57), 3.0, dtype=np.float32), ContextParams())
    idx = build_index(db, 8)
    assert idx.n_nodes == 1
    r = knn_approx(idx, np.full(57, 3.0), 10, max_visits=1)
    assert np.all(r.distances == 0) and len(set(r.indices.tolist())) == 10


def test_unbounded_equals_exact(backend, rng):
    for n, k in [(1, 1), (37, 37), (300, 20), (2000, 1)]:
        db = random_db(rng, n)
        idx = build_index(db, leaf_size=8)
        qs = np.vstack([rng.random((4, 57)) * 255, db.vectors[:1]])
        ai, ad = knn_approx_many(idx, qs, k, max_visits=math.inf)
        ei, ed = knn_exact_many(db, qs, k)
        assert np.array_equal(ai, ei)
        assert np.array_equal(ad, ed)


def test_unbounded_exact_with_duplicates(backend, rng):
    base = np.round(rng.random((40, 57)) * 3).astype(np.float32)
    db = PatchDatabase(np.repeat(base, 5, axis=0), ContextParams())
    idx = build_index(db, leaf_size=4)
    qs = np.round(rng.random((6, 57)) * 3)
    assert np.array_equal(knn_approx_many(idx, qs, 12, math.inf)[0], knn_exact_many(db, qs, 12)[0])


def test_returned_distances_recompute(backend, rng):
    db = random_db(rng, 3000)
    idx = build_index(db)
    q = rng.random(57) * 255
    r = knn_approx(idx, q, 20, max_visits=64)
    valid = r.indices >= 0
    d = np.sum((db.vectors[r.indices[valid]].astype(np.float64) - q) ** 2, axis=1)
    np.testing.assert_allclose(r.distances[valid], d, rtol=1e-9)
    assert np.all(np.diff(r.distances) >= 0)


def test_recall_monotone(backend, rng):
    db = random_db(rng, 5000)
    idx = build_index(db)
    qs = rng.random((30, 57)) * 255
    ex, _ = knn_exact_many(db, qs, 10)
    values = [recall(knn_approx_many(idx, qs, 10, v)[0], ex) for v in (1, 4, 16, 64, 256)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] > values[0]


def test_index_save_load(tmp_path, rng):
    db = random_db(rng, 300)
    idx = build_index(db, 8)
    idx.save(tmp_path / "a.cpidx")
    back = KnnIndex.load(tmp_path / "a.cpidx", db)
    assert np.array_equal(back.perm, idx.perm)
    with pytest.raises(ValueError):
        KnnIndex.load(tmp_path / "a.cpidx", random_db(rng, 300))


def test_visit_validation(rng):
    idx = build_index(random_db(rng, 50))
    with pytest.raises(ValueError):
        knn_approx(idx, np.zeros(57), 3, max_visits=0)
