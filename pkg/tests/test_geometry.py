"""SDF trees, rasterization, marching cubes, sampling, density conversion, IO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfgen import geometry as geo


def test_evaluate_sphere_outside():
    assert geo.evaluate_sdf(geo.Sphere(1.0), (2.0, 0.0, 0.0)) == pytest.approx(1.0, abs=1e-12)


def test_evaluate_box_interior():
    assert geo.evaluate_sdf(geo.Box((1.0, 1.0, 1.0)), (0.0, 0.0, 0.0)) == pytest.approx(-1.0)


def test_evaluate_union_midpoint():
    u = geo.union(geo.Sphere(1.0), geo.translate(geo.Sphere(1.0), (3.0, 0.0, 0.0)))
    assert geo.evaluate_sdf(u, (1.5, 0.0, 0.0)) == pytest.approx(0.5, abs=1e-12)


def test_evaluate_rejects_non_finite_point():
    with pytest.raises(ValueError):
        geo.evaluate_sdf(geo.Sphere(1.0), (np.nan, 0.0, 0.0))


def test_subtraction_and_intersection():
    carved = geo.Subtraction(geo.Box((1, 1, 1)), geo.Sphere(0.5))
    assert geo.evaluate_sdf(carved, (0, 0, 0)) == pytest.approx(0.5)  # inside the cut
    both = geo.intersection(geo.Sphere(1.0), geo.translate(geo.Sphere(1.0), (1.0, 0, 0)))
    assert geo.evaluate_sdf(both, (0.0, 0.0, 0.0)) == pytest.approx(0.0)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["sphere", "box", "cylinder", "capsule"]),
       st.integers(0, 2 ** 31 - 1))
def test_primitives_are_1_lipschitz(kind, seed):
    rng = np.random.default_rng(seed)
    node = {
        "sphere": geo.Sphere(rng.uniform(0.1, 1.0)),
        "box": geo.Box(tuple(rng.uniform(0.1, 1.0, 3))),
        "cylinder": geo.Cylinder(rng.uniform(0.1, 0.8), rng.uniform(0.1, 0.8)),
        "capsule": geo.Capsule(rng.uniform(0.1, 0.6), rng.uniform(0.1, 0.8)),
    }[kind]
    p, q = rng.uniform(-2, 2, (2, 3))
    dv = abs(geo.evaluate_sdf(node, p) - geo.evaluate_sdf(node, q))
    assert dv <= np.linalg.norm(p - q) + 1e-9


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def test_rasterize_empty_tree_is_plus_truncation():
    g = geo.rasterize_tsdf(geo.Empty(), 16, 0.2)
    np.testing.assert_array_equal(g.values, np.full((16, 16, 16), 0.2))


def test_rasterize_engulfing_sphere_is_minus_truncation():
    g = geo.rasterize_tsdf(geo.Sphere(10.0), 16, 0.2)
    np.testing.assert_array_equal(g.values, np.full((16, 16, 16), -0.2))


def test_rasterize_matches_analytic_evaluation():
    g = geo.rasterize_tsdf(geo.Sphere(0.5), 32, 0.2)
    c = geo.voxel_centers(32)
    mid = 16  # voxel center nearest the origin along each axis
    center_val = g.values[mid, mid, mid]
    assert center_val == -0.2  # deep inside, clamped
    # voxel whose center is nearest to the surface point (0.5, 0, 0)
    ix = int(np.argmin(np.abs(c - 0.5)))
    iy = int(np.argmin(np.abs(c)))
    near = g.values[ix, iy, iy]
    assert abs(near) <= g.voxel_size
    # exact match with clamped analytic values everywhere
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], 1)
    expect = np.clip(geo.Sphere(0.5).evaluate(pts), -0.2, 0.2).reshape(32, 32, 32)
    np.testing.assert_array_equal(g.values, expect)


def test_rasterize_parameter_validation():
    with pytest.raises(ValueError):
        geo.rasterize_tsdf(geo.Sphere(1.0), 16, -0.1)
    with pytest.raises(ValueError):
        geo.rasterize_tsdf(geo.Sphere(1.0), 4, 0.2)
    with pytest.raises(ValueError):
        geo.rasterize_tsdf(geo.Sphere(1.0), 16, 0.05)  # below voxel size


def test_whole_voxel_translation_shifts_values_exactly():
    tree = geo.Box((0.3, 0.2, 0.25))
    g = geo.rasterize_tsdf(tree, 16, 0.2)
    shift = geo.translate(tree, (2.0 / 16, 0.0, 0.0))
    g2 = geo.rasterize_tsdf(shift, 16, 0.2)
    np.testing.assert_allclose(g2.values[1:], g.values[:-1], atol=1e-12)


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------

def test_marching_cubes_all_positive_is_empty():
    g = geo.rasterize_tsdf(geo.Empty(), 16, 0.2)
    mesh = geo.marching_cubes(g)
    assert mesh.is_empty


def test_marching_cubes_sphere_radius_band():
    g = geo.rasterize_tsdf(geo.Sphere(0.5), 32, 0.2)
    mesh = geo.marching_cubes(g)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    tol = 2 * (2.0 / 32)
    assert radii.min() >= 0.5 - tol and radii.max() <= 0.5 + tol


def test_marching_cubes_sphere_watertight_euler_2():
    g = geo.rasterize_tsdf(geo.Sphere(0.5), 32, 0.2)
    mesh = geo.marching_cubes(g)
    assert mesh.euler_characteristic() == 2
    assert np.all(mesh.triangle_areas() > 0)


def test_marching_cubes_iso_validation():
    g = geo.rasterize_tsdf(geo.Sphere(0.5), 16, 0.2)
    with pytest.raises(ValueError):
        geo.marching_cubes(g, iso=0.2)
    with pytest.raises(ValueError):
        geo.marching_cubes(g, iso=-0.3)


def test_marching_cubes_vertices_lie_on_crossing_edges():
    g = geo.rasterize_tsdf(geo.union(geo.Sphere(0.4),
                                     geo.translate(geo.Box((0.2,) * 3), (0.4, 0.3, 0.2))),
                           16, 0.2)
    mesh = geo.marching_cubes(g)
    c = geo.voxel_centers(16)
    h = g.voxel_size
    for v in mesh.vertices[:200]:
        # each vertex sits on exactly one lattice edge: two coordinates on
        # voxel centers, the third in between, with endpoint values straddling 0
        on_center = [np.isclose((v[a] - c[0]) / h % 1.0, 0.0, atol=1e-9)
                     or np.isclose((v[a] - c[0]) / h % 1.0, 1.0, atol=1e-9)
                     for a in range(3)]
        assert sum(on_center) >= 2
        axis = on_center.index(False) if not all(on_center) else None
        if axis is None:
            continue  # vertex exactly on a corner: both endpoints straddle trivially
        lo = int(np.floor((v[axis] - c[0]) / h))
        idx = [int(round((v[a] - c[0]) / h)) for a in range(3)]
        i0, i1 = idx.copy(), idx.copy()
        i0[axis], i1[axis] = lo, lo + 1
        v0, v1 = g.values[tuple(i0)], g.values[tuple(i1)]
        assert min(v0, v1) <= 0.0 <= max(v0, v1)


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def test_sample_single_triangle_containment():
    mesh = geo.Mesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]]),
                    np.array([[0, 1, 2]]))
    pts = geo.sample_surface_points(mesh, 500, seed=1)
    assert np.allclose(pts[:, 2], 0.0)
    assert np.all(pts[:, 0] >= -1e-12) and np.all(pts[:, 1] >= -1e-12)
    assert np.all(pts[:, 0] + pts[:, 1] <= 1.0 + 1e-12)


def test_sample_area_proportionality_within_3_sigma():
    # area ratio 9:1 (3x1 vs sqrt(.5)-ish right triangles)
    mesh = geo.Mesh(
        np.array([[0, 0, 0], [3.0, 0, 0], [0, 3.0, 0],   # area 4.5
                  [10, 0, 0], [11.0, 0, 0], [10, 1.0, 0]]),  # area 0.5
        np.array([[0, 1, 2], [3, 4, 5]]))
    n = 10000
    pts = geo.sample_surface_points(mesh, n, seed=9)
    big = (pts[:, 0] < 5).sum()
    p = 0.9
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(big - n * p) <= 3 * sigma


def test_sample_determinism_and_validation():
    mesh = geo.Mesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]]),
                    np.array([[0, 1, 2]]))
    a = geo.sample_surface_points(mesh, 64, seed=5)
    b = geo.sample_surface_points(mesh, 64, seed=5)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        geo.sample_surface_points(geo.Mesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 10, 0)
    with pytest.raises(ValueError):
        geo.sample_surface_points(mesh, 0, seed=1)


# ---------------------------------------------------------------------------
# density conversion
# ---------------------------------------------------------------------------

def test_density_zero_crossing_is_half_alpha():
    g = geo.TsdfGrid(8, 0.3, np.zeros((8, 8, 8)))
    d = geo.tsdf_to_density(g, alpha=50.0, beta=0.02)
    np.testing.assert_allclose(d.values, 25.0, rtol=0, atol=1e-12)


def test_density_far_outside_vanishes():
    g = geo.TsdfGrid(8, 0.2, np.full((8, 8, 8), 0.2))
    d = geo.tsdf_to_density(g, alpha=50.0, beta=0.02)
    assert d.values.max() <= 50.0 * 1e-4  # alpha/2 * exp(-10)


def test_density_minus_beta_closed_form():
    g = geo.TsdfGrid(8, 0.2, np.full((8, 8, 8), -0.02))
    d = geo.tsdf_to_density(g, alpha=1.0, beta=0.02)
    expect = 1.0 - 0.5 * np.exp(-1.0)
    np.testing.assert_allclose(d.values, expect, rtol=0, atol=1e-12)
    assert expect == pytest.approx(0.8161, abs=1e-4)


def test_density_monotone_and_continuous_at_zero():
    sdf = np.linspace(-0.2, 0.2, 4096)
    g = geo.TsdfGrid(16, 0.2, sdf.reshape(16, 16, 16))
    d = geo.tsdf_to_density(g, alpha=50.0, beta=0.02)
    flat = d.values.ravel()
    assert np.all(np.diff(flat) <= 1e-12)  # nonincreasing in the SDF value
    eps = 1e-9
    g2 = geo.TsdfGrid(8, 0.2, np.full((8, 8, 8), eps))
    g3 = geo.TsdfGrid(8, 0.2, np.full((8, 8, 8), -eps))
    lo = geo.tsdf_to_density(g2, 50.0, 0.02).values[0, 0, 0]
    hi = geo.tsdf_to_density(g3, 50.0, 0.02).values[0, 0, 0]
    assert abs(hi - lo) < 1e-4
    assert np.all(d.values >= 0) and np.all(d.values <= 50.0)


def test_density_parameter_validation():
    g = geo.TsdfGrid(8, 0.2, np.zeros((8, 8, 8)))
    with pytest.raises(ValueError):
        geo.tsdf_to_density(g, alpha=0.0, beta=0.02)
    with pytest.raises(ValueError):
        geo.tsdf_to_density(g, alpha=1.0, beta=-1.0)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def test_tsdf_file_layout_and_roundtrip(tmp_path):
    g = geo.rasterize_tsdf(geo.Sphere(0.5), 16, 0.2)
    path = tmp_path / "g.tsdf"
    geo.save_tsdf(g, path)
    raw = path.read_bytes()
    assert raw[:8] == b"SDFGRID1"
    assert int.from_bytes(raw[8:12], "little") == 16
    assert np.frombuffer(raw[12:20], dtype="<f8")[0] == 0.2
    assert len(raw) == 8 + 4 + 8 + 4 * 16 ** 3
    # x-fastest ordering: the first D floats walk the x axis
    first_col = np.frombuffer(raw[20:20 + 4 * 16], dtype="<f4")
    np.testing.assert_array_equal(first_col, g.values[:, 0, 0].astype(np.float32))
    g2 = geo.load_tsdf(path)
    geo.save_tsdf(g2, tmp_path / "g2.tsdf")
    assert (tmp_path / "g2.tsdf").read_bytes() == raw


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.tsdf"
    p.write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        geo.load_tsdf(p)


def test_obj_export_plain_and_colored(tmp_path):
    mesh = geo.Mesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]]),
                    np.array([[0, 1, 2]]))
    obj = geo.mesh_to_obj(mesh)
    assert obj.splitlines() == ["v 0 0 0", "v 1 0 0", "v 0 1 0", "f 1 2 3"]
    colored = geo.mesh_to_obj(mesh, vertex_colors=np.full((3, 3), 0.25))
    assert colored.splitlines()[0] == "v 0 0 0 0.25 0.25 0.25"
    with pytest.raises(ValueError):
        geo.mesh_to_obj(mesh, vertex_colors=np.ones((2, 3)))
