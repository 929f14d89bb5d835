import math

import numpy as np
import pytest

from loopfit import body_model as bm
from loopfit import geometry
from loopfit import losses as L
from loopfit import sdf_diffusion as sd
from loopfit import synth


def single_triangle_model():
    v = np.array([[-0.2, 0.0, -0.2], [0.2, 0.0, -0.2], [0.0, 0.0, 0.2]])
    return bm.CanonicalModel(
        vertices=v, faces=np.array([[0, 1, 2]]), kinematic_parents=np.array([-1]),
        joint_positions_canonical=np.zeros((1, 3)), skinning_weights=np.ones((3, 1)),
        pose_blendshapes=np.zeros((3, 3, 0)), shape_blendshapes=np.zeros((3, 3, 1)),
        shape_joint_regressor=np.full((1, 3), 1 / 3), part_labels=np.zeros(3, dtype=np.int64))


def sampled_scan(model, rng, n=60, params=None):
    spec = synth.SynthSpec(points_per_scan=n)
    return synth.sample_scan(model, spec, params, rng)


def surface_samples(model, rng, n):
    tri, bary = geometry.sample_surface(model.vertices, model.faces, n, rng)
    return tri, bary, bm.canonical_surface_points(model, tri, bary)


# -- diffused forward map -----------------------------------------------------------------

def test_forward_at_vertices_at_rest(toy_model, grid32):
    y = L.diffused_forward(grid32, toy_model, bm.ModelParams.zeros(toy_model), toy_model.vertices)
    assert np.linalg.norm(y - toy_model.vertices, axis=1).max() < 0.5 * grid32.voxel_diagonal


def test_forward_matches_exact_surface_map(toy_model, grid32, rng):
    x = synth.sample_params(toy_model, synth.SynthSpec(), rng)
    x.offsets = rng.normal(0, 0.005, x.offsets.shape)
    tri, bary, c = surface_samples(toy_model, rng, 300)
    err = np.linalg.norm(L.diffused_forward(grid32, toy_model, x, c) - bm.forward_surface_points(toy_model, x, tri, bary), axis=1)
    assert err.max() < 3 * grid32.voxel_diagonal


def test_forward_off_surface_collapses_to_closest_point(toy_model, grid32, rng):
    tri, bary, c = surface_samples(toy_model, rng, 200)
    normals = geometry.face_normals(toy_model.vertices, toy_model.faces)[tri]
    p = c + 0.05 * normals
    _, d2, _, _ = geometry.TriangleIndex(toy_model.vertices, toy_model.faces).query(p)
    keep = (np.abs(np.sqrt(d2) - 0.05) < 1e-9) & grid32.contains(p)  # c stays the closest point
    p, c = p[keep], c[keep]
    y = L.diffused_forward(grid32, toy_model, bm.ModelParams.zeros(toy_model), p)
    np.testing.assert_allclose(y, sd.eval_field(grid32, "closest_point", p), atol=1e-12)
    assert np.median(np.linalg.norm(y - c, axis=1)) < 0.5 * grid32.voxel_diagonal


# -- self loss -----------------------------------------------------------------------------

def interpolation_floor(model, grid, params, rng, n=400):
    tri, bary, c = surface_samples(model, rng, n)
    y = L.diffused_forward(grid, model, params, c)
    return float(np.mean(np.sum((y - bm.forward_surface_points(model, params, tri, bary)) ** 2, axis=1)))


def test_closed_loop_is_at_the_interpolation_floor(toy_model, grid32, rng):
    scan, gt, canon = sampled_scan(toy_model, rng, 200)
    out = L.self_loss(grid32, toy_model, gt, scan.points, canon, lam=0.0)
    floor = interpolation_floor(toy_model, grid32, gt, np.random.default_rng(99))
    assert out.self_term > 0
    assert out.self_term < 5 * floor * len(canon), (out.self_term, floor)


def test_sdf_penalty_off_surface(toy_model, grid32, rng):
    tri, bary, c = surface_samples(toy_model, rng, 300)
    p = c + 0.1 * geometry.face_normals(toy_model.vertices, toy_model.faces)[tri]
    _, d2, _, _ = geometry.TriangleIndex(toy_model.vertices, toy_model.faces).query(p)
    p = p[(np.abs(np.sqrt(d2) - 0.1) < 1e-9) & grid32.contains(p)]
    s = L.diffused_forward(grid32, toy_model, bm.ModelParams.zeros(toy_model), p)  # zero data term
    out = L.self_loss(grid32, toy_model, bm.ModelParams.zeros(toy_model), s, p, lam=1.0)
    assert out.self_term < 1e-20
    assert abs(out.sdf_term - 0.01 * len(p)) < 0.2 * 0.01 * len(p)


def test_empty_scan():
    out = L.self_loss(None, None, None, np.zeros((0, 3)), np.zeros((0, 3)), lam=1.0)
    assert out.as_dict() == L.LossBreakdown().as_dict()


def test_robust_distance_is_bounded(toy_model, grid32):
    p = np.array([[0.0, 0.1, 0.0]])
    s = p + [[3.0, 0, 0]]
    out = L.self_loss(grid32, toy_model, bm.ModelParams.zeros(toy_model), s, p, 0.0, robust_sigma=0.05)
    assert out.self_term <= 0.05 ** 2


# -- data-to-model ---------------------------------------------------------------------------

def test_data_to_model_examples(toy_model, rng):
    scan, gt, _ = sampled_scan(toy_model, rng, 100)
    assert L.data_to_model_loss(toy_model, gt, scan.points) < 1e-10
    tri = single_triangle_model()
    x = bm.ModelParams.zeros(tri)
    assert L.data_to_model_loss(tri, x, [[0.0, 0.3, -0.05]]) == pytest.approx(0.09, abs=1e-15)


def test_data_to_model_matches_exhaustive_scan(toy_model, rng):
    x = synth.sample_params(toy_model, synth.SynthSpec(), rng)
    pts = rng.uniform(-0.45, 0.45, (100, 3))
    posed = bm.forward_vertices(toy_model, x)
    _, d2, _, _ = geometry.closest_points_bruteforce(pts, posed, toy_model.faces)
    assert L.data_to_model_loss(toy_model, x, pts) == pytest.approx(d2.sum(), rel=1e-12)


# -- supervised and prior terms ------------------------------------------------------------------

def test_supervised_loss_examples(rng):
    a = rng.normal(size=(7, 3))
    assert L.supervised_loss(a, a) == 0
    assert L.supervised_loss([[0, 0, 0]], [[3, 4, 0]]) == pytest.approx(5.0)
    b = rng.normal(size=(7, 3))
    ref = sum(math.sqrt(sum((a[i, d] - b[i, d]) ** 2 for d in range(3))) for i in range(7))
    assert L.supervised_loss(a, b) == pytest.approx(ref, rel=1e-14)
    with pytest.raises(ValueError):
        L.supervised_loss(a, b[:3])


def test_regularization_examples(toy_model, rng):
    x = bm.ModelParams.zeros(toy_model)
    assert L.regularization_loss(x) == 0
    x.shape = np.array([1.0, 0, 0, 0])
    assert L.regularization_loss(x) == pytest.approx(1.0)
    x = bm.ModelParams(rng.normal(0, 1.2, (8, 3)), rng.normal(size=4), rng.normal(0, 0.1, (toy_model.num_vertices, 3)))
    ref = 0.0
    for j in range(1, 8):
        norm = math.sqrt(sum(v * v for v in x.pose[j]))
        ref += norm ** 2 + 10.0 * max(norm - math.pi / 2, 0.0) ** 2
    ref += math.sqrt(sum(v * v for v in x.shape)) + 0.5 * float(np.sum(x.offsets ** 2))
    assert L.regularization_loss(x, offset_weight=0.5) == pytest.approx(ref, rel=1e-12)


# -- combined objective ------------------------------------------------------------------------

ZERO = dict(lambda_sdf=0.0, w_self=0.0, w_d2m=0.0, w_sup=0.0, w_pose_prior=0.0, w_shape_prior=0.0, w_offset_prior=0.0)


def test_zero_weights_give_zero_everything(toy_model, grid32, rng):
    scan, gt, canon = sampled_scan(toy_model, rng, 30)
    res = L.total_loss_and_gradients(grid32, toy_model, gt, scan.points, canon + 0.01, canon, L.LossWeights(**ZERO))
    assert res.breakdown.total == 0
    assert all(not g.any() for g in res.grad_params.values()) and not res.grad_corr.any()


def test_sdf_only_correspondence_gradient(toy_model, grid32, rng):
    p = rng.uniform(-0.3, 0.3, (20, 3))
    w = L.LossWeights(**{**ZERO, "lambda_sdf": 2.5})
    res = L.total_loss_and_gradients(grid32, toy_model, bm.ModelParams.zeros(toy_model), p, p, None, w)
    d = sd.eval_field(grid32, "sdf", p)
    np.testing.assert_allclose(res.grad_corr, 2 * 2.5 * d[:, None] * sd.eval_field_gradient(grid32, "sdf", p), atol=1e-12)


def test_breakdown_total_is_weighted_sum(toy_model, grid32, rng):
    scan, gt, canon = sampled_scan(toy_model, rng, 40)
    w = L.LossWeights(lambda_sdf=3.0, w_self=2.0, w_d2m=5.0, w_sup=0.5)
    b = L.total_loss_and_gradients(grid32, toy_model, gt, scan.points, canon + 0.02, canon, w).breakdown
    ref = 2 * b.self_term + 3 * b.sdf_term + 5 * b.d2m_term + 0.5 * b.sup_term + b.reg_term
    assert abs(b.total - ref) < 1e-9
    v = L.objective_value(grid32, toy_model, gt, scan.points, canon + 0.02, canon, w)
    assert v.total == pytest.approx(b.total, rel=1e-12)


def test_full_gradient_matches_finite_differences(toy_model, grid32, rng):
    x = synth.sample_params(toy_model, synth.SynthSpec(), rng)
    x.offsets = rng.normal(0, 0.01, x.offsets.shape)
    x.translation = rng.normal(0, 0.02, 3)
    scan, _, canon = sampled_scan(toy_model, rng, 25)
    p = canon + rng.normal(0, 0.02, canon.shape)
    w = L.LossWeights(lambda_sdf=3.0, robust_sigma=0.05, w_pose_prior=0.1, w_shape_prior=0.1, w_d2m=2.0, w_sup=0.3)
    res = L.total_loss_and_gradients(grid32, toy_model, x, scan.points, p, canon, w)
    f = lambda xx, pp: L.objective_value(grid32, toy_model, xx, scan.points, pp, canon, w).total
    h = 1e-5
    for block in bm.ModelParams.BLOCKS:
        arr = getattr(x, block)
        idx = list(np.ndindex(arr.shape))
        for i in [idx[j] for j in rng.choice(len(idx), min(6, len(idx)), replace=False)]:
            xp, xm = x.copy(), x.copy()
            getattr(xp, block)[i] += h
            getattr(xm, block)[i] -= h
            fd = (f(xp, p) - f(xm, p)) / (2 * h)
            assert abs(fd - res.grad_params[block][i]) <= 1e-3 * max(abs(fd), 1e-4), block
    keep = sd.cell_boundary_distance(grid32, p) > 1e-4
    for i in np.flatnonzero(keep)[:8]:
        for d in range(3):
            pp, pm = p.copy(), p.copy()
            pp[i, d] += h
            pm[i, d] -= h
            fd = (f(x, pp) - f(x, pm)) / (2 * h)
            assert abs(fd - res.grad_corr[i, d]) <= 1e-3 * max(abs(fd), 1e-4)


def test_clamped_points_are_penalized_and_pulled_back(toy_model, grid32):
    p = np.array([[0.0, 0.0, 0.7]])
    w = L.LossWeights(**{**ZERO, "lambda_sdf": 1.0})
    res = L.total_loss_and_gradients(grid32, toy_model, bm.ModelParams.zeros(toy_model), p, p, None, w)
    assert np.isfinite(res.breakdown.total) and res.breakdown.sdf_term > 0.2 ** 2
    assert res.grad_corr[0, 2] > 0  # descent moves the point back toward the volume


def test_non_finite_loss_names_term_and_point(toy_model, grid32, rng):
    scan, gt, canon = sampled_scan(toy_model, rng, 10)
    pts = scan.points.copy()
    pts[4, 1] = np.nan
    with pytest.raises(L.NonFiniteLossError) as err:
        L.total_loss_and_gradients(grid32, toy_model, gt, pts, canon, None, L.LossWeights(lambda_sdf=1.0))
    assert err.value.term == "self_term" and err.value.index == 4


def test_auto_balance_lambda(toy_model, grid32, rng):
    scan, gt, canon = sampled_scan(toy_model, rng, 50)
    p = canon + rng.normal(0, 0.03, canon.shape)
    w = L.auto_balance_lambda(grid32, toy_model, bm.ModelParams.zeros(toy_model), scan.points, p, L.LossWeights())
    part = L.self_loss(grid32, toy_model, bm.ModelParams.zeros(toy_model), scan.points, p, 0.0)
    assert w.lam == pytest.approx(np.clip(part.self_term / part.sdf_term, 1.0, 1e3))
    assert L.auto_balance_lambda(grid32, toy_model, gt, scan.points, p, w.with_lambda(7.0)).lam == 7.0
    with pytest.raises(ValueError):
        L.LossWeights().lam
    with pytest.raises(ValueError):
        L.LossWeights(w_self=-1.0)


def test_monotone_descent_with_true_correspondences(toy_model, grid32, rng):
    scan, gt, canon = sampled_scan(toy_model, rng, 200)
    x = gt.copy()
    x.pose = x.pose + rng.normal(0, 0.1, x.pose.shape)
    x.shape = x.shape + 0.3
    w = L.LossWeights(lambda_sdf=1.0)
    totals = []
    for _ in range(51):
        res = L.total_loss_and_gradients(grid32, toy_model, x, scan.points, canon, None, w)
        totals.append(res.breakdown.total)
        for block in ("pose", "shape", "translation"):
            setattr(x, block, getattr(x, block) - 1e-3 * res.grad_params[block])
    assert np.all(np.diff(totals) < 0)


def test_sdf_and_data_gradients_are_nearly_orthogonal(grid64, rng):
    pts = rng.uniform(-0.45, 0.45, (40000, 3))
    pts = pts[np.abs(sd.eval_field(grid64, "sdf", pts)) < 0.1][:500]
    g_sdf = sd.eval_field_gradient(grid64, "sdf", pts)
    jac = sd.eval_field_gradient(grid64, "closest_point", pts)
    g_data = np.einsum("nva,nv->na", jac, rng.normal(size=(len(pts), 3)))
    cos = np.abs(np.sum(g_sdf * g_data, axis=1)) / (np.linalg.norm(g_sdf, axis=1) * np.linalg.norm(g_data, axis=1))
    frac = float(np.mean(cos < 0.2))
    print(f"|cos| < 0.2 at {frac:.1%} of {len(pts)} band points")
    assert frac >= 0.8
