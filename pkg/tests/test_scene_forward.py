import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gprmap import kernels
from gprmap import _pykernels
from gprmap.fileio import FormatError, read_pgm, read_ply, write_pgm, write_ply
from gprmap.forward import (AScan, BScan, ImageGrid, add_noise, attenuation, backproject, depth_to_time,
                            noisy_bscan, read_bscan, synthesize_ascan, synthesize_bscan,
                            time_to_depth, travel_time, wave_velocity, write_bscan)
from gprmap.scene import (SOILS, Primitive, Scene, SceneConfig, generate_grid_trajectory, generate_scene,
                          get_soil, load_scene, sample_surface_points, save_scene, top_surface_depth)

SAND = SOILS["sand"]


def point_scene(x, y, d, soil=SAND, r=0.003):
    return Scene(((0, 2), (0, 2), (0, 2.5)), soil, (Primitive("sphere", (x, y, d + r), (r,)),))


# ---------------------------------------------------------------- scene

def test_velocity_and_attenuation_formulas():
    assert wave_velocity(SAND) == pytest.approx(299_792_458.0 / np.sqrt(3.0))
    # alpha = sigma / 2 * sqrt(mu0 / (eps0 eps_r)), impedance of free space ~376.73 ohm
    assert attenuation(SOILS["clay"]) == pytest.approx(0.3 / 2 * 376.7303 / np.sqrt(10), rel=1e-5)
    assert travel_time((0, 0, 0), (0, 0, 1.0), SAND) == pytest.approx(2 / wave_velocity(SAND))


@given(st.floats(0, 5), st.sampled_from(sorted(SOILS)))
def test_time_depth_round_trip(d, soil):
    m = SOILS[soil]
    assert time_to_depth(depth_to_time(d, m), m) == pytest.approx(d, rel=1e-12, abs=1e-15)


def test_time_to_depth_rejects_negative():
    with pytest.raises(ValueError):
        time_to_depth(-1e-9, SAND)


def test_soil_table_and_extension():
    assert get_soil("loamy").relative_permittivity == 20.0
    assert get_soil("wet", {"wet": (25.0, 0.1)}).conductivity == 0.1
    with pytest.raises(KeyError, match="unknown soil"):
        get_soil("gravel")


def test_primitive_validation():
    with pytest.raises(ValueError, match="below the ground"):
        Primitive("sphere", (0, 0, 0.05), (0.1,))
    with pytest.raises(ValueError):
        Primitive("box", (0, 0, 1), (0.1, 0.1))
    with pytest.raises(ValueError, match="axis"):
        Primitive("cylinder", (0, 0, 1), (0.1, 0.2))


@given(st.integers(0, 10_000))
def test_generated_scenes_are_deterministic_and_separated(seed):
    cfg = SceneConfig(one_of_each=True)
    a, b = generate_scene(seed, cfg), generate_scene(seed, cfg)
    assert a == b
    assert sorted(p.kind for p in a.primitives) == ["box", "cylinder", "sphere"]
    for i, p in enumerate(a.primitives):
        lo, hi = p.bounds()
        assert lo[2] > 0
        for q in a.primitives[i + 1:]:
            lo2, hi2 = q.bounds()
            assert np.any((lo2 - hi >= cfg.gap - 1e-12) | (lo - hi2 >= cfg.gap - 1e-12))


def test_scene_json_round_trip(tmp_path):
    s = generate_scene(4, SceneConfig(one_of_each=True))
    save_scene(tmp_path / "s.json", s)
    assert load_scene(tmp_path / "s.json") == s
    (tmp_path / "bad.json").write_text('{"extent": []}')
    with pytest.raises(FormatError):
        load_scene(tmp_path / "bad.json")


def test_top_surface_depth_of_sphere_and_box():
    s = Scene(((0, 2), (0, 2), (0, 2)), SAND, (Primitive("sphere", (1, 1, 1), (0.5,)),
                                                   Primitive("box", (0.2, 0.2, 0.5), (0.1, 0.1, 0.1))))
    np.testing.assert_allclose(top_surface_depth(s, [1.0, 1.3, 0.2, 1.9], [1.0, 1.0, 0.2, 1.9]),
                               [0.5, 1 - 0.4, 0.4, np.nan])


def test_surface_samples_lie_on_surfaces():
    s = generate_scene(1, SceneConfig(one_of_each=True))
    pc = sample_surface_points(s, 500, seed=0)
    assert len(pc) == 500
    for p in s.primitives:
        pts = pc.points[pc.labels == p.label]
        if p.kind == "sphere":
            np.testing.assert_allclose(np.linalg.norm(pts - p.c, axis=1), p.dims[0], atol=1e-12)
        elif p.kind == "box":
            rel = np.abs(pts - p.c) / np.asarray(p.dims)
            assert np.all(rel <= 1 + 1e-12) and np.allclose(rel.max(axis=1), 1.0)


def test_grid_trajectory_is_boustrophedon():
    lines = generate_grid_trajectory(((0, 1), (0, 0.5)), 0.25, 0.1, directions=("x", "y"))
    assert len(lines) == 3 + 5
    assert lines[0].positions[0, 0] == 0 and lines[1].positions[0, 0] == pytest.approx(1.0)
    assert all(len(t) == 11 for t in lines[:3])
    np.testing.assert_allclose(np.diff(lines[0].positions[:, 0]), 0.1)
    with pytest.raises(ValueError):
        generate_grid_trajectory(((0, 1), (0, 1)), 0, 0.1)


# ---------------------------------------------------------------- forward model

def test_point_target_peak_follows_hyperbola():
    s = point_scene(1.0, 0.5, 1.0)
    traj = generate_grid_trajectory(((0, 2), (0.5, 0.5)), 1.0, 0.02)[0]
    b = synthesize_bscan(s, traj)
    pk = np.argmax(np.abs(b.data), axis=0)
    x = traj.positions[:, 0]
    expected = 2 * np.sqrt(1.0 + (x - 1.0) ** 2) / wave_velocity(SAND) / b.dt
    ok = expected < b.data.shape[0] - 5
    assert np.max(np.abs(pk[ok] - expected[ok])) <= 1.0


def test_window_too_short_is_reported():
    with pytest.raises(ValueError, match="too short"):
        synthesize_ascan(point_scene(1, 1, 2.0), (1, 1, 0), n_samples=64)


def test_attenuation_orders_amplitudes():
    amps = [np.abs(synthesize_ascan(point_scene(1, 1, 0.5, SOILS[k]), (1, 1, 0), n_samples=800).samples).max()
            for k in ("sand", "clay", "loamy")]
    assert amps[0] > amps[1] > amps[2] > 0


def test_empty_scene_gives_zero_trace():
    s = Scene(((0, 1), (0, 1), (0, 1)), SAND)
    assert not synthesize_ascan(s, (0.5, 0.5, 0)).samples.any()


def test_noise_level_matches_snr():
    rng = np.random.default_rng(0)
    x = np.sin(np.linspace(0, 40, 20000))
    y = add_noise(x, 20.0, rng)
    snr = 10 * np.log10(np.mean(x ** 2) / np.mean((y - x) ** 2))
    assert snr == pytest.approx(20.0, abs=0.2)
    np.testing.assert_array_equal(add_noise(np.zeros(5), 10, rng), 0.0)


def test_bscan_file_round_trip(tmp_path):
    s = point_scene(0.5, 0.5, 0.4)
    traj = generate_grid_trajectory(((0, 1), (0.5, 0.5)), 1.0, 0.1)[0]
    b = noisy_bscan(synthesize_bscan(s, traj, n_samples=256), 20.0, seed=1)
    write_bscan(tmp_path / "b.gprb", b)
    back = read_bscan(tmp_path / "b.gprb", SAND)
    assert back.dt == b.dt and back.trace_spacing == b.trace_spacing
    np.testing.assert_array_equal(back.positions, b.positions)
    np.testing.assert_array_equal(back.data, b.data.astype(np.float32).astype(np.float64))
    raw = (tmp_path / "b.gprb").read_bytes()
    (tmp_path / "t.gprb").write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        read_bscan(tmp_path / "t.gprb", SAND)


def test_bscan_validation():
    a = AScan(np.zeros(10), 1e-10, (0, 0, 0), SAND)
    with pytest.raises(ValueError):
        BScan([a, AScan(np.zeros(11), 1e-10, (0, 0, 0), SAND)], 0.1)
    with pytest.raises(ValueError):
        AScan(np.array([np.inf]), 1e-10, (0, 0, 0), SAND)


# ---------------------------------------------------------------- back-projection

def migrate_point(rng):
    x0, d = rng.uniform(0.7, 1.3), rng.uniform(0.3, 1.2)
    s = point_scene(x0, 0.5, d)
    traj = generate_grid_trajectory(((x0 - 0.3, x0 + 0.3), (0.5, 0.5)), 1.0, 0.02)[0]
    b = synthesize_bscan(s, traj, n_samples=int(2.4 * d / wave_velocity(SAND) / 0.05e-9) + 60)
    cell = 0.01
    g = ImageGrid((x0 - 0.25, x0 + 0.25), (d - 0.2, d + 0.2), cell, origin=(0, 0.5, 0))
    img = backproject(b, g)
    i, j = np.unravel_index(np.argmax(np.abs(img.grid)), img.grid.shape)
    return np.abs(g.world_of(i, j) - [x0, 0.5, d])[[0, 2]] / cell


def test_backprojection_focuses_point_target():
    rng = np.random.default_rng(7)
    for _ in range(5):
        assert np.all(migrate_point(rng) <= 1.0 + 1e-9)


def test_backprojection_window_check():
    s = point_scene(1, 0.5, 0.5)
    traj = generate_grid_trajectory(((0.8, 1.2), (0.5, 0.5)), 1.0, 0.02)[0]
    b = synthesize_bscan(s, traj, n_samples=200)
    with pytest.raises(ValueError, match="beyond the recorded window"):
        backproject(b, ImageGrid((0, 0.4), (0, 3.0), 0.05, origin=(0.8, 0.5, 0)))


# ---------------------------------------------------------------- kernels

def test_compiled_and_python_kernels_agree():
    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    from gprmap import _ckernels
    rng = np.random.default_rng(0)
    t1, t2 = np.zeros(300), np.zeros(300)
    delays, amps = rng.uniform(0, 25e-9, 50), rng.normal(size=50)
    kernels.superpose_ricker(t1, delays, amps, 0.1e-9, 900e6, 2e-9, impl=_ckernels)
    kernels.superpose_ricker(t2, delays, amps, 0.1e-9, 900e6, 2e-9, impl=_pykernels)
    np.testing.assert_allclose(t1, t2, rtol=1e-12, atol=1e-12)
    tr, pos, cells = rng.normal(size=(7, 300)), rng.uniform(0, 1, (7, 3)), rng.uniform(0, 1, (40, 3))
    pos[:, 2] = 0
    np.testing.assert_allclose(kernels.backproject(tr, pos, cells, 0.1e-9, 1e8, impl=_ckernels),
                               kernels.backproject(tr, pos, cells, 0.1e-9, 1e8, impl=_pykernels), atol=1e-12)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(30, 3))
    d1, i1 = kernels.nearest_sq_dists(a, b, impl=_ckernels)
    d2, i2 = kernels.nearest_sq_dists(a, b, impl=_pykernels)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_allclose(d1, d2, rtol=1e-12)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 1000))
def test_nearest_matches_brute_force(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    d, idx = kernels.nearest_sq_dists(a, b)
    full = ((a[:, None] - b[None]) ** 2).sum(-1)
    np.testing.assert_allclose(d, full.min(axis=1), rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(full[np.arange(n), idx], full.min(axis=1))


# ---------------------------------------------------------------- PLY / PGM

def test_ply_round_trip_and_errors(tmp_path):
    pts = np.random.default_rng(0).normal(size=(20, 3))
    lab = np.arange(20) % 3
    write_ply(tmp_path / "c.ply", pts, lab, comment="test")
    p2, l2 = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(p2, pts)
    np.testing.assert_array_equal(l2, lab)
    write_ply(tmp_path / "n.ply", pts)
    np.testing.assert_array_equal(read_ply(tmp_path / "n.ply")[1], 0)
    text = (tmp_path / "c.ply").read_text().splitlines()
    (tmp_path / "bad.ply").write_text("\n".join(text[:-2]) + "\n")
    with pytest.raises(FormatError, match="vertex"):
        read_ply(tmp_path / "bad.ply")
    (tmp_path / "bin.ply").write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(FormatError, match="ascii"):
        read_ply(tmp_path / "bin.ply")


def test_pgm_round_trip(tmp_path):
    img = np.linspace(-1, 1, 60).reshape(6, 10)
    write_pgm(tmp_path / "i.pgm", img)
    back = read_pgm(tmp_path / "i.pgm")
    assert back.shape == (6, 10)
    np.testing.assert_array_equal(back, np.round((img + 1) / 2 * 255))
