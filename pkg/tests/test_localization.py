import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gprmap import autodiff as ad
from gprmap import localization as L
from gprmap.fileio import FormatError
from gprmap.scene import SOILS, Primitive, Scene


def brute_vlad(x, w, b, c):
    n, k = len(x), len(c)
    V = np.zeros(c.shape)
    for i in range(n):
        logits = np.array([w[j] @ x[i] + b[j] for j in range(k)])
        a = np.exp(logits - logits.max())
        a /= a.sum()
        for j in range(k):
            V[j] += a[j] * (x[i] - c[j])
    for j in range(k):
        nj = np.linalg.norm(V[j])
        if nj > 0:
            V[j] /= nj
    v = V.ravel()
    return v / np.linalg.norm(v)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_vlad_matches_brute_force(n, k, d, seed):
    rng = np.random.default_rng(seed)
    x, w, b, c = rng.normal(size=(n, d)), rng.normal(size=(k, d)), rng.normal(size=k), rng.normal(size=(k, d))
    v = L.vlad_aggregate(x, L.VladParams(w, b, c))
    np.testing.assert_allclose(v, brute_vlad(x, w, b, c), atol=1e-12)
    assert abs(np.linalg.norm(v) - 1.0) < 1e-9


def test_vlad_errors():
    p = L.VladParams(np.ones((2, 3)), np.zeros(2), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        L.vlad_aggregate(np.zeros((0, 3)), p)
    with pytest.raises(ValueError):
        L.vlad_aggregate(np.zeros((2, 4)), p)
    with pytest.raises(L.ZeroDescriptorError):
        L.vlad_aggregate(np.zeros((2, 3)), p)
    with pytest.raises(ValueError):
        L.VladParams(np.ones((2, 3)), np.zeros(3), np.zeros((2, 3)))


def test_vlad_tensor_twin_and_gradients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    w, b, c = ad.param(rng.normal(size=(3, 4))), ad.param(rng.normal(size=3)), ad.param(rng.normal(size=(3, 4)))
    np.testing.assert_allclose(L.vlad_aggregate_t(x, w, b, c).data,
                               L.vlad_aggregate(x, L.VladParams(w.data, b.data, c.data)), atol=1e-12)
    g = rng.normal(size=12)
    rep = ad.finite_diff_check(lambda: ad.reduce_sum(L.vlad_aggregate_t(x, w, b, c) * ad.tensor(g)),
                               [w, b, c], probes=20, seed=1)
    assert rep.passed, list(zip(rep.names, rep.errors))


def test_soft_assign_rows_sum_to_one():
    rng = np.random.default_rng(1)
    p = L.VladParams(rng.normal(size=(4, 3)) * 50, rng.normal(size=4), rng.normal(size=(4, 3)))
    a = L.soft_assign(rng.normal(size=(7, 3)), p)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_kmeans_objective_never_increases():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal(m, 0.1, (20, 2)) for m in (0, 3, 6)])
    C, assign, trace = L.kmeans(x, 3, seed=0)
    assert all(a >= b - 1e-12 for a, b in zip(trace, trace[1:]))
    assert len(np.unique(assign)) == 3
    np.testing.assert_allclose(np.sort(C[:, 0]), [0, 3, 6], atol=0.1)
    with pytest.raises(ValueError):
        L.kmeans(np.zeros((5, 2)), 2)


def test_init_vlad_params_soft_assigns_to_nearest_centroid():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 3))
    p = L.init_vlad_params(x, 4, alpha=30.0)
    near = np.argmin(((x[:, None] - p.c[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(np.argmax(L.soft_assign(x, p), axis=1), near)


def test_local_descriptors_shape_and_norm():
    cfg = L.LocalizationConfig.fine()
    img = np.random.default_rng(0).normal(size=(64, 64))
    ds = L.extract_local_descriptors(img, cfg)
    gh, gw = L.patch_grid_shape((64, 64), cfg.patch, cfg.stride)
    assert ds.descriptors.shape == (gh * gw, cfg.descriptor_dim)
    ok = ~ds.flagged
    np.testing.assert_allclose(np.linalg.norm(ds.descriptors[ok], axis=1), 1.0, atol=1e-12)
    flat = L.extract_local_descriptors(np.ones((64, 64)), cfg)
    assert flat.flagged.all()


def test_config_validation():
    with pytest.raises(ValueError):
        L.LocalizationConfig(patch=15, cells=2)
    with pytest.raises(ValueError):
        L.LocalizationConfig(depth_fraction=0)


def small_scene(soil="sand"):
    prims = (Primitive("sphere", (0.1, 0.05, 0.3), (0.05,)), Primitive("box", (0.25, 0.1, 0.5), (0.04, 0.04, 0.04)),
             Primitive("cylinder", (0.05, 0.15, 0.4), (0.02, 0.1), axis=(1, 0, 0)))
    return Scene(((-0.1, 0.4), (-0.1, 0.3), (0, 1)), SOILS[soil], prims)


def test_duplicated_queries_recall_is_perfect_and_db_round_trips(tmp_path):
    scene = small_scene()
    cfg = L.LocalizationConfig(k=4)
    pos = L.grid_positions(((0, 0.3), (0, 0.2)), 0.05)
    db, params = L.build_database(scene, pos, cfg)
    assert len(db) == len(pos) and db.matrix.shape == (len(pos), params.k * params.d)
    assert L.recall_at_1(L.make_queries(scene, pos, params, cfg), db) == 1.0

    path = tmp_path / "db.gprd"
    L.write_db(path, db)
    back = L.read_db(path)
    assert [e.id for e in back.entries] == [e.id for e in db.entries]
    np.testing.assert_allclose(back.matrix, db.matrix, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(back.matrix, axis=1), 1.0, atol=1e-12)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        L.read_db(path)
    path.write_bytes(raw + b"x")
    with pytest.raises(FormatError):
        L.read_db(path)


def test_match_ties_and_empty_db():
    db = L.MapDatabase(1, 2)
    with pytest.raises(ValueError):
        L.match(np.ones(2), db)
    v = np.array([1.0, 0.0])
    db.add(L.DbEntry(5, 0, 0, "sand", v))
    db.add(L.DbEntry(2, 1, 0, "sand", v))
    assert L.match(v, db)[0].id == 2
    with pytest.raises(ValueError, match="duplicate"):
        db.add(L.DbEntry(5, 0, 0, "sand", v))
    assert L.nearest_entry((0.9, 0.1), db).id == 2


def test_jitter_stays_within_radius():
    p = np.zeros((200, 2))
    j = L.jitter_positions(p, 0.01, seed=0)
    assert np.all(np.linalg.norm(j, axis=1) <= 0.01)
    np.testing.assert_array_equal(j, L.jitter_positions(p, 0.01, seed=0))


def test_finetune_reduces_triplet_loss():
    rng = np.random.default_rng(4)
    base = [rng.normal(size=(6, 4)) for _ in range(3)]
    trip = [(b, b + rng.normal(0, 0.05, b.shape), base[(i + 1) % 3]) for i, b in enumerate(base)]
    p = L.init_vlad_params(np.concatenate(base), 3, alpha=1.0)
    _, hist = L.finetune_vlad(p, trip, margin=0.5, steps=30)
    assert hist[-1] <= hist[0]


def test_recall_csv():
    assert L.recall_csv([("sand", 20.0, 0.5), ("clay", None, 1.0)]) == \
        "soil,noise_snr_db,recall\nsand,20.0,0.5\nclay,,1.0\n"


def test_recall_success_radius_and_single_entry_db():
    v, w = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    db = L.MapDatabase(1, 2, [L.DbEntry(0, 0, 0, "sand", v), L.DbEntry(1, 0.1, 0, "sand", w)])
    queries = [(w, np.array([0.0, 0.0]))]  # matches entry 1, nearest is entry 0
    assert L.recall_at_1(queries, db) == 0.0
    assert L.recall_at_1(queries, db, success_radius=0.1) == 1.0
    one = L.MapDatabase(1, 2, [L.DbEntry(0, 0, 0, "sand", v)])
    assert L.recall_at_1([(w, np.array([5.0, 5.0]))], one) == 1.0
    with pytest.raises(ValueError):
        L.recall_at_1([], one)


def test_match_agrees_with_brute_force_scan():
    rng = np.random.default_rng(6)
    M = rng.normal(size=(50, 8))
    M /= np.linalg.norm(M, axis=1, keepdims=True)
    db = L.MapDatabase(1, 8, [L.DbEntry(i, i, 0, "sand", M[i]) for i in range(50)])
    for q in rng.normal(size=(1000, 8)):
        sims = [float(m @ q) / np.linalg.norm(q) for m in M]
        assert L.match(q, db)[0].id == int(np.argmax(sims))
    e, s = L.match(np.array([0.0, 0, 0, 0, 0, 0, 0, 1]), L.MapDatabase(1, 8, [L.DbEntry(0, 0, 0, "s", np.eye(8)[0])]))
    assert s == 0.0


def test_descriptor_invariant_to_image_rescaling():
    rng = np.random.default_rng(7)
    img = rng.normal(size=(64, 64))
    cfg = L.LocalizationConfig(k=4)
    a = L.extract_local_descriptors(img, cfg)
    b = L.extract_local_descriptors(3.7 * img, cfg)
    np.testing.assert_allclose(a.descriptors, b.descriptors, atol=1e-12)
    p = L.init_vlad_params(a.descriptors, 4)
    np.testing.assert_allclose(L.vlad_aggregate(a, p), L.vlad_aggregate(b, p), atol=1e-12)


def test_position_weight_appends_patch_coordinates():
    img = np.random.default_rng(8).normal(size=(64, 64))
    plain = L.extract_local_descriptors(img, L.LocalizationConfig(k=4))
    cfg = L.LocalizationConfig(k=4, position_weight=1.5)
    pos = L.extract_local_descriptors(img, cfg)
    assert pos.descriptors.shape[1] == cfg.descriptor_dim == plain.descriptors.shape[1] + 2
    np.testing.assert_allclose(np.linalg.norm(pos.descriptors, axis=1), 1.0, atol=1e-12)
    hist = pos.descriptors[:, :-2]
    np.testing.assert_allclose(hist / np.linalg.norm(hist, axis=1, keepdims=True), plain.descriptors, atol=1e-12)
    scale = np.linalg.norm(hist, axis=1)
    xy = pos.descriptors[:, -2:] / scale[:, None]
    gh, gw = L.patch_grid_shape((64, 64), cfg.patch, cfg.stride)
    np.testing.assert_allclose(xy[-1], [1.5, 1.5], atol=1e-12)
    np.testing.assert_allclose(xy[gw - 1], [0.0, 1.5], atol=1e-12)
