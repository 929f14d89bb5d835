import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from loopfit import geometry
from loopfit.metrics import EvalReport, s2s, v2v

from meshes import icosphere, point_triangle, square


def test_v2v_examples(rng):
    a = rng.normal(size=(30, 3))
    assert v2v(a, a) == 0.0
    assert v2v(a + [0.25, 0, 0], a) == pytest.approx(0.25, abs=1e-15)
    b = rng.normal(size=(30, 3))
    loop = sum(np.sqrt(sum((a[i, k] - b[i, k]) ** 2 for k in range(3))) for i in range(30)) / 30
    assert v2v(a, b) == pytest.approx(loop, abs=1e-14)


def test_v2v_topology_mismatch():
    with pytest.raises(ValueError):
        v2v(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        v2v(np.zeros((3, 3)), np.zeros((3, 3)), np.array([[0, 1, 2]]), np.array([[0, 2, 1]]))


def test_s2s_identical_meshes():
    v, f = icosphere(0.3, 2)
    assert s2s((v, f), (v, f)) < 1e-6


def test_s2s_parallel_squares():
    h = 0.05
    lower, upper = square(0.0, 1.0), square(h, 1.0)
    assert s2s(lower, upper) == pytest.approx(h, rel=0.01)


def test_s2s_matches_exhaustive_oracle(rng):
    va, fa = icosphere(0.3, 1)
    vb, fb = icosphere(0.25, 1)
    vb = vb + rng.normal(0, 0.01, vb.shape)
    n = 300

    def samples(v, f):
        tri, bary = geometry.sample_surface(v, f, n, np.random.default_rng(3))
        return geometry.barycentric_points(v, f, tri, bary)

    def one_way(points, v, f):
        return np.mean([min(np.linalg.norm(p - point_triangle(p, *v[t])) for t in f) for p in points])

    ref = 0.5 * (one_way(samples(va, fa), vb, fb) + one_way(samples(vb, fb), va, fa))
    assert abs(s2s((va, fa), (vb, fb), n_samples=n, seed=3) - ref) < 1e-9


def test_s2s_against_point_sets(rng):
    v, f = icosphere(0.3, 2)
    pts = v[rng.choice(len(v), 40, replace=False)]
    assert s2s((v, f), pts) > 0
    assert s2s(pts, (v, f)) == s2s((v, f), pts)


def test_symmetry_and_rigid_invariance(rng):
    va, fa = icosphere(0.3, 2)
    vb, fb = icosphere(0.28, 1)
    vb = vb + [0.02, 0.0, -0.01]
    assert abs(s2s((va, fa), (vb, fb)) - s2s((vb, fb), (va, fa))) < 1e-12
    rot, t = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix(), np.array([0.4, -2.0, 1.0])
    base = s2s((va, fa), (vb, fb))
    moved = s2s((va @ rot.T + t, fa), (vb @ rot.T + t, fb))
    assert abs(base - moved) < 1e-9
    a, b = rng.normal(size=(2, 50, 3))
    assert abs(v2v(a, b) - v2v(a @ rot.T + t, b @ rot.T + t)) < 1e-9


def test_degenerate_input():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(ValueError):
        s2s((v, np.array([[0, 1, 2]])), icosphere(0.3, 0))
    with pytest.raises(ValueError):
        s2s(np.zeros((0, 3)), icosphere(0.3, 0))


def test_eval_report():
    report = EvalReport(body_height=2.0)
    for i, (d, s) in enumerate([(0.1, 0.05), (0.3, None), (0.2, 0.07)]):
        report.add(f"s{i}", d, s)
    assert abs(report.v2v_mean - 0.2) < 1e-12
    assert abs(report.v2v_percent - 10.0) < 1e-12
    assert abs(report.s2s_mean - 0.06) < 1e-12
    back = EvalReport.from_dict(json.loads(report.to_json()))
    assert back.per_scan == report.per_scan and back.v2v_mean == report.v2v_mean
    assert np.isnan(EvalReport().v2v_mean)
