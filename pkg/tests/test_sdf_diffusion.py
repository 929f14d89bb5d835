from types import SimpleNamespace

import numpy as np
import pytest

from loopfit import geometry
from loopfit import sdf_diffusion as sd

from meshes import icosphere, tetrahedron


def mesh_model(v, f):
    return SimpleNamespace(vertices=v, faces=f)


def exact_signed_distance(points, v, f):
    _, d2, _, _ = geometry.closest_points_bruteforce(points, v, f)
    inside = geometry.ray_parity_inside(points, v, f)
    return np.where(inside, -1.0, 1.0) * np.sqrt(d2)


def scalar_trilinear(grid, name, p):
    """Independent 8-corner weighted sum with explicit loops."""
    vals = grid.channel(name)
    h = grid.voxel_size
    u = (p - grid.lo) / h - 0.5
    i0 = [min(int(np.floor(u[a])), int(grid.resolution[a]) - 2) for a in range(3)]
    t = [u[a] - i0[a] for a in range(3)]
    out = np.zeros(vals.shape[0])
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = ((t[0] if dx else 1 - t[0]) * (t[1] if dy else 1 - t[1]) * (t[2] if dz else 1 - t[2]))
                out += w * vals[:, i0[2] + dz, i0[1] + dy, i0[0] + dx].astype(np.float64)
    return out


# -- build_sdf ----------------------------------------------------------------------

def test_sphere_center_distance():
    v, f = icosphere(0.3, 3)
    grid = sd.build_sdf(mesh_model(v, f), resolution=17)
    centre = np.argmin(np.linalg.norm(grid.centers(), axis=1))
    assert np.allclose(grid.centers()[centre], 0.0)
    d = float(grid.flat("sdf")[0, centre])
    # tessellation bound: nearest face plane versus circumscribed radius
    n = geometry.face_normals(v, f)
    inradius = np.min(np.abs(np.einsum("ij,ij->i", n, v[f[:, 0]])))
    assert -0.3 - 1e-7 <= d <= -inradius + 1e-7


def test_voxel_on_vertex_has_zero_distance():
    v, f = tetrahedron(0.25)
    grid = sd.build_sdf(mesh_model(v, f), resolution=10)
    centers = grid.centers()
    k = np.argmin(np.linalg.norm(centers - v[0], axis=1))
    assert np.linalg.norm(centers[k] - v[0]) < 1e-12
    assert abs(grid.flat("sdf")[0, k]) < 1e-7
    tri, bary = sd.closest_surface(grid)
    np.testing.assert_allclose(bary[k] @ v[f[tri[k]]], v[0], atol=1e-7)


def test_closest_triangles_match_exhaustive_scan(toy_model, grid32, rng):
    idx = rng.choice(grid32.num_voxels, 200, replace=False)
    centers = grid32.centers()[idx]
    tri, bary = sd.closest_surface(grid32)
    stored = np.einsum("na,nad->nd", bary[idx], toy_model.vertices[toy_model.faces[tri[idx]]])
    cp, d2, _, _ = geometry.closest_points_bruteforce(centers, toy_model.vertices, toy_model.faces)
    np.testing.assert_allclose(np.linalg.norm(stored - centers, axis=1), np.sqrt(d2), atol=1e-6)
    np.testing.assert_allclose(stored, cp, atol=1e-6)


def test_grid_invariants_at_voxel_centers(toy_model, grid32, rng):
    idx = rng.choice(grid32.num_voxels, 300, replace=False)
    centers = grid32.centers()[idx]
    exact = exact_signed_distance(centers, toy_model.vertices, toy_model.faces)
    np.testing.assert_allclose(grid32.flat("sdf")[0, idx], exact, atol=1e-6)
    cp = grid32.flat("closest_point")[:, idx].T.astype(np.float64)
    _, d2, _, _ = geometry.TriangleIndex(toy_model.vertices, toy_model.faces).query(cp)
    assert np.sqrt(d2).max() < 1e-6
    skin = grid32.flat("skin")
    assert skin.min() >= -1e-7 and np.abs(skin.sum(axis=0) - 1).max() < 1e-6


def test_open_mesh_has_undefined_sign():
    v, f = tetrahedron()
    with pytest.raises(sd.SignUndefinedError):
        sd.build_sdf(mesh_model(v, f[:3]), resolution=8)


# -- diffuse_function -----------------------------------------------------------------

def test_diffuse_constant_and_identity(toy_model, grid32):
    const = np.full((toy_model.num_vertices, 2), [0.25, -3.0])
    out = sd.diffuse_function(grid32, toy_model.faces, const)
    assert np.allclose(out[0], 0.25) and np.allclose(out[1], -3.0)
    pos = sd.diffuse_function(grid32, toy_model.faces, toy_model.vertices)
    np.testing.assert_array_equal(pos, grid32.channel("closest_point"))


def test_diffuse_linear_function(rng):
    v, f = tetrahedron(0.3)
    grid = sd.build_sdf(mesh_model(v, f), resolution=12)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=2)
    out = sd.diffuse_function(grid, f, v @ a.T + b).reshape(2, -1).T
    tri, bary = sd.closest_surface(grid)
    closest = np.einsum("na,nad->nd", bary, v[f[tri]])
    np.testing.assert_allclose(out, closest @ a.T + b, atol=1e-5)


# -- trilinear evaluation ----------------------------------------------------------------

def test_eval_at_centers_and_midpoints(grid32, rng):
    centers = grid32.centers()
    idx = rng.choice(grid32.num_voxels, 50, replace=False)
    np.testing.assert_array_equal(sd.eval_field(grid32, "sdf", centers[idx]),
                                  grid32.flat("sdf")[0, idx].astype(np.float64))
    ijk = np.array([10, 12, 14])
    a = grid32.flat_index(ijk)
    b = grid32.flat_index(ijk + [1, 0, 0])
    mid = 0.5 * (centers[a] + centers[b])
    ref = 0.5 * (grid32.flat("skin")[:, a].astype(np.float64) + grid32.flat("skin")[:, b])
    np.testing.assert_allclose(sd.eval_field(grid32, "skin", mid[None])[0], ref, atol=1e-15)


def test_eval_matches_scalar_corner_sum(grid32, rng):
    pts = rng.uniform(grid32.lattice_lo, grid32.lattice_hi, (100, 3))
    fast = sd.eval_field(grid32, "skin", pts)
    for p, row in zip(pts, fast):
        np.testing.assert_allclose(row, scalar_trilinear(grid32, "skin", p), rtol=0, atol=1e-14)


def test_eval_outside_the_lattice_is_an_error(grid32):
    with pytest.raises(sd.DomainError):
        sd.eval_field(grid32, "sdf", [[0.0, 0.0, 0.499]])
    clamped, disp = grid32.clamp([[0.0, 0.0, 0.6]])
    assert grid32.contains(clamped).all() and disp[0, 2] > 0


def test_gradient_examples(rng):
    grid = sd.DiffusedGrid([-0.5] * 3, [0.5] * 3, [8, 8, 8])
    c = grid.centers()
    grid.channels["const"] = np.full((1, 8, 8, 8), 2.0, dtype=np.float32)
    grid.channels["lin"] = (3.0 * c[:, 0] - c[:, 2]).astype(np.float32).reshape(1, 8, 8, 8)
    pts = rng.uniform(grid.lattice_lo, grid.lattice_hi, (20, 3))
    assert np.abs(sd.eval_field_gradient(grid, "const", pts)).max() < 1e-12
    np.testing.assert_allclose(sd.eval_field_gradient(grid, "lin", pts), np.tile([3.0, 0, -1], (20, 1)), atol=1e-5)


def test_gradient_matches_finite_differences(grid32, rng):
    pts = rng.uniform(grid32.lattice_lo, grid32.lattice_hi, (200, 3))
    pts = pts[sd.cell_boundary_distance(grid32, pts) > 1e-4]
    g = sd.eval_field_gradient(grid32, "closest_point", pts)  # (N, 3 values, 3 axes)
    h = 1e-6
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fd = (sd.eval_field(grid32, "closest_point", pts + e) - sd.eval_field(grid32, "closest_point", pts - e)) / (2 * h)
        assert np.all(np.abs(fd - g[:, :, axis]) <= 1e-6 * np.maximum(np.abs(fd), 1e-2))


# -- properties of the distance field ----------------------------------------------------------

def test_zero_level_set(toy_model, grid32, rng):
    tri, bary = geometry.sample_surface(toy_model.vertices, toy_model.faces, 500, rng)
    c = geometry.barycentric_points(toy_model.vertices, toy_model.faces, tri, bary)
    assert np.abs(sd.eval_field(grid32, "sdf", c)).max() < 1.5 * grid32.voxel_diagonal


def test_sampled_eikonal_property(grid32, rng):
    pts = rng.uniform(grid32.lattice_lo, grid32.lattice_hi, (20000, 3))
    d = sd.eval_field(grid32, "sdf", pts)
    band = (np.abs(d) >= 2 * grid32.voxel_size.max()) & (np.abs(d) <= 0.2)
    norms = np.linalg.norm(sd.eval_field_gradient(grid32, "sdf", pts[band]), axis=1)
    ok = (norms >= 0.8) & (norms <= 1.2)
    # medial-axis neighborhoods are the excluded tail
    assert ok.mean() >= 0.9, f"only {ok.mean():.1%} of {band.sum()} samples satisfy the eikonal bound"
