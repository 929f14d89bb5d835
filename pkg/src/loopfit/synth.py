"""Toy articulated body models and synthetic scan corpora with ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import nnls
from skimage.measure import marching_cubes

from . import geometry
from .body_model import CanonicalModel, ModelError, ModelParams, forward_vertices
from .scan import Scan

# name, parent, rest joint, bone end (the segment skinning weights are measured to)
JOINTS = (
    ("pelvis", -1, (0.0, 0.0, 0.0), None),
    ("spine", 0, (0.0, 0.10, 0.0), (0.0, 0.34, 0.0)),
    ("l_shoulder", 1, (0.09, 0.21, 0.0), (0.27, 0.21, 0.0)),
    ("l_elbow", 2, (0.27, 0.21, 0.0), (0.46, 0.21, 0.0)),
    ("r_shoulder", 1, (-0.09, 0.21, 0.0), (-0.27, 0.21, 0.0)),
    ("r_elbow", 4, (-0.27, 0.21, 0.0), (-0.46, 0.21, 0.0)),
    ("l_hip", 0, (0.065, -0.06, 0.0), (0.065, -0.40, 0.03)),
    ("r_hip", 0, (-0.065, -0.06, 0.0), (-0.065, -0.40, 0.03)),
)
PELVIS_BONE = ((-0.05, -0.04, 0.0), (0.05, -0.04, 0.0))
MAX_BETAS = 6

PART_NAMES = ("pelvis", "abdomen", "chest", "head",
              "l_upper_arm", "l_forearm", "l_hand",
              "r_upper_arm", "r_forearm", "r_hand",
              "l_thigh", "l_shin", "r_thigh", "r_shin")
PART_JOINTS = (0, 1, 1, 1, 2, 3, 3, 4, 5, 5, 6, 6, 7, 7)

# default spacing of the meshing lattice gives 624 vertices
_REF_SPACING = 0.033
_REF_VERTICES = 624


# -- implicit humanoid -------------------------------------------------------

def _capsule(p, a, b, r):
    a = np.asarray(a)
    ab = np.asarray(b) - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1) - r


def _ellipsoid(p, c, radii):
    radii = np.asarray(radii)
    return (np.linalg.norm((p - np.asarray(c)) / radii, axis=1) - 1.0) * radii.min()


def _smooth_min(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def humanoid_sdf(p):
    """Approximate signed distance of the toy humanoid (T-pose, y up, facing +z)."""
    parts = [
        _ellipsoid(p, (0, -0.03, 0), (0.1, 0.07, 0.065)),
        _capsule(p, (0, 0.0, 0), (0, 0.18, 0), 0.075),
        _capsule(p, (0, 0.18, 0), (0, 0.26, 0), 0.03),
        _ellipsoid(p, (0, 0.30, 0.005), (0.05, 0.065, 0.055)),
    ]
    for s in (1.0, -1.0):
        parts += [
            _capsule(p, (s * 0.08, 0.21, 0), (s * 0.27, 0.21, 0), 0.035),
            _capsule(p, (s * 0.27, 0.21, 0), (s * 0.38, 0.21, 0), 0.03),
            _ellipsoid(p, (s * 0.42, 0.21, 0), (0.052, 0.03, 0.042)),
            _capsule(p, (s * 0.065, -0.06, 0), (s * 0.065, -0.36, 0), 0.042),
            _ellipsoid(p, (s * 0.065, -0.385, 0.03), (0.04, 0.035, 0.068)),
        ]
    d = parts[0]
    for q in parts[1:]:
        d = _smooth_min(d, q, 0.02)
    return d


def blob_sdf(p):
    return _ellipsoid(p, (0, 0, 0), (0.22, 0.3, 0.18))


def _sdf_gradient(sdf, p, eps=1e-6):
    g = np.empty_like(p)
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        g[:, i] = (sdf(p + e) - sdf(p - e)) / (2 * eps)
    return g


def _mesh_implicit(sdf, spacing, relax_iters=5):
    lo = -0.5 + spacing / 2
    n = int(math.floor(1.0 / spacing))
    ax = lo + spacing * np.arange(n)
    grid = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    values = sdf(grid).reshape(n, n, n)
    verts, faces, _, _ = marching_cubes(values, 0.0, spacing=(spacing,) * 3)
    verts = verts + lo
    faces = faces.astype(np.int64)

    # tangential relaxation with re-projection evens out marching-cubes slivers
    nv = len(verts)
    i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    adj = sp.coo_matrix((np.ones(2 * len(i)), (np.r_[i, j], np.r_[j, i])), shape=(nv, nv)).tocsr()
    adj.data[:] = 1.0
    degree = np.asarray(adj.sum(axis=1)).ravel()
    for _ in range(relax_iters):
        centroid = adj @ verts / degree[:, None]
        g = _sdf_gradient(sdf, verts)
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        step = centroid - verts
        step -= np.sum(step * g, axis=1, keepdims=True) * g
        verts = verts + 0.5 * step
        for _ in range(3):
            g = _sdf_gradient(sdf, verts)
            verts = verts - (sdf(verts) / np.sum(g * g, axis=1))[:, None] * g
    return verts, faces


def _mesh_is_clean(sdf, verts, faces):
    if not geometry.is_watertight(verts, faces):
        return False
    edges, _ = geometry.edge_face_counts(faces)
    if len(verts) - len(edges) + len(faces) != 2:
        return False
    n = geometry.face_normals(verts, faces)
    g = _sdf_gradient(sdf, verts[faces].mean(axis=1))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return bool(np.min(np.sum(n * g, axis=1)) > 0.3)


# -- skinning, blendshapes, regressor ----------------------------------------

def _segment_distance(p, a, b):
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    foot = a + t[:, None] * ab
    return np.linalg.norm(p - foot, axis=1), foot


def _bone_weights(verts, sigma=0.02):
    """Smooth per-vertex weights over the eight humanoid bones."""
    dists, feet = [], []
    for j, (_, _, joint, end) in enumerate(JOINTS):
        a, b = (PELVIS_BONE if j == 0 else (joint, end))
        d, foot = _segment_distance(verts, a, b)
        dists.append(d)
        feet.append(foot)
    d = np.stack(dists, axis=1)
    logits = -(d ** 2) / (2 * sigma ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    w[w < 1e-4] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    return w, np.stack(feet, axis=1)


def _ancestor_map(k):
    """Map each of the eight humanoid joints onto its nearest kept ancestor."""
    out = []
    for j in range(len(JOINTS)):
        a = j
        while a >= k:
            a = JOINTS[a][1]
        out.append(a)
    return np.asarray(out)


def _vertex_normals(verts, faces):
    n = np.zeros_like(verts)
    fn = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    for c in range(3):
        np.add.at(n, faces[:, c], fn)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _shape_blendshapes(verts, w8, feet, n_betas):
    v = verts
    arms = w8[:, 2:6].sum(axis=1)
    legs = w8[:, 6:8].sum(axis=1)
    torso = w8[:, 0] + w8[:, 1]
    radial = np.einsum("vk,vkd->vd", w8, v[:, None, :] - feet)
    sx = np.sign(v[:, 0])
    zero = np.zeros(len(v))
    dirs = [
        np.stack([zero, 0.06 * v[:, 1], zero], axis=1),                       # height
        0.25 * radial,                                                        # girth
        np.stack([arms * 0.12 * sx * np.maximum(np.abs(v[:, 0]) - 0.09, 0), zero, zero], axis=1),  # arm length
        np.stack([zero, -legs * 0.12 * np.maximum(-0.06 - v[:, 1], 0), zero], axis=1),              # leg length
        np.stack([arms * 0.02 * sx, zero, zero], axis=1),                     # shoulder width
        np.stack([zero, zero, torso * 0.3 * np.maximum(v[:, 2], 0)
                  * np.exp(-((v[:, 1] - 0.05) / 0.08) ** 2)], axis=1),       # belly
    ]
    return np.stack(dirs[:n_betas], axis=2) if n_betas else np.zeros((len(v), 3, 0))


def _pose_blendshapes(verts, faces, weights):
    k = weights.shape[1]
    normals = _vertex_normals(verts, faces)
    amp = 0.03 * np.array([1.0, 0.5, -0.5, -0.5, 1.0, 0.5, 0.5, -0.5, 1.0])
    out = np.zeros((len(verts), 3, 9 * (k - 1)))
    for j in range(1, k):
        bump = 4.0 * weights[:, j] * (1.0 - weights[:, j])
        out[:, :, 9 * (j - 1):9 * j] = (bump[:, None] * normals)[:, :, None] * amp[None, None, :]
    return out


def _joint_regressor(verts, targets, n_nearest=16, rho=10.0):
    """Convex weights on nearby vertices reproducing each target joint."""
    reg = np.zeros((len(targets), len(verts)))
    for j, t in enumerate(targets):
        idx = np.argsort(np.linalg.norm(verts - t, axis=1), kind="stable")[:n_nearest]
        a = np.vstack([verts[idx].T, rho * np.ones(len(idx))])
        b = np.r_[t, rho]
        w, _ = nnls(a, b)
        reg[j, idx] = w / w.sum()
    return reg


def _part_labels(verts, w8):
    dom = np.argmax(w8, axis=1)
    x, y = verts[:, 0], verts[:, 1]
    labels = np.zeros(len(verts), dtype=np.int64)
    labels[dom == 1] = np.where(y[dom == 1] < 0.12, 1, np.where(y[dom == 1] < 0.255, 2, 3))
    labels[dom == 2] = 4
    labels[dom == 3] = np.where(x[dom == 3] < 0.385, 5, 6)
    labels[dom == 4] = 7
    labels[dom == 5] = np.where(x[dom == 5] > -0.385, 8, 9)
    labels[dom == 6] = np.where(y[dom == 6] > -0.22, 10, 11)
    labels[dom == 7] = np.where(y[dom == 7] > -0.22, 12, 13)
    return labels


# -- public API -------------------------------------------------------------

@dataclass
class SynthSpec:
    num_joints: int = 8
    num_betas: int = 4
    vertex_budget: int = 600
    max_pose_angle: float | tuple = math.radians(30.0)
    shape_range: float = 1.0
    noise_sigma: float = 0.0
    dropout: float = 0.0
    points_per_scan: int = 400
    seed: int = 0

    def validate(self):
        if not 1 <= self.num_joints <= len(JOINTS):
            raise ValueError(f"num_joints must be in [1, {len(JOINTS)}]")
        if not 0 <= self.num_betas <= MAX_BETAS:
            raise ValueError(f"num_betas must be in [0, {MAX_BETAS}]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.points_per_scan < 1:
            raise ValueError("points_per_scan must be positive")
        angles = np.atleast_1d(self.max_pose_angle)
        if (angles < 0).any() or not np.isfinite(angles).all():
            raise ValueError("pose ranges must be finite and non-negative")


def make_toy_model(spec=None):
    """Watertight capsule-limb humanoid (or a rigid blob when K == 1).

    Geometry does not depend on ``spec.seed``.
    """
    spec = spec or SynthSpec()
    spec.validate()
    k = spec.num_joints
    if not 150 <= spec.vertex_budget <= 20000:
        raise ModelError(f"infeasible vertex budget {spec.vertex_budget}")
    sdf = blob_sdf if k == 1 else humanoid_sdf
    base = _REF_SPACING * math.sqrt(_REF_VERTICES / spec.vertex_budget)
    mesh = None
    for factor in (1.0, 0.985, 1.015, 0.97, 1.03, 0.95, 1.05):
        verts, faces = _mesh_implicit(sdf, base * factor)
        if _mesh_is_clean(sdf, verts, faces):
            mesh = (verts, faces)
            break
    if mesh is None:
        raise ModelError(f"infeasible vertex budget {spec.vertex_budget}: no clean mesh")
    verts, faces = mesh

    if k == 1:
        weights = np.ones((len(verts), 1))
        w8 = np.zeros((len(verts), len(JOINTS)))
        w8[:, 0] = 1.0
        feet = np.repeat(np.zeros((1, len(JOINTS), 3)), len(verts), axis=0)
        labels = np.zeros(len(verts), dtype=np.int64)
        part_names, part_joints = ("body",), np.zeros(1, dtype=np.int64)
    else:
        w8, feet = _bone_weights(verts)
        amap = _ancestor_map(k)
        weights = np.zeros((len(verts), k))
        for j in range(len(JOINTS)):
            weights[:, amap[j]] += w8[:, j]
        labels = _part_labels(verts, w8)
        part_names = PART_NAMES
        part_joints = amap[np.asarray(PART_JOINTS)]

    targets = np.array([JOINTS[j][2] for j in range(k)])
    regressor = _joint_regressor(verts, targets)
    model = CanonicalModel(
        vertices=verts,
        faces=faces,
        kinematic_parents=np.array([JOINTS[j][1] for j in range(k)], dtype=np.int64),
        joint_positions_canonical=regressor @ verts,
        skinning_weights=weights,
        pose_blendshapes=_pose_blendshapes(verts, faces, weights),
        shape_blendshapes=_shape_blendshapes(verts, w8, feet, spec.num_betas),
        shape_joint_regressor=regressor,
        part_labels=labels,
        part_names=part_names,
        part_joint_table=np.asarray(part_joints, dtype=np.int64),
        name=f"toy_humanoid_k{k}" if k > 1 else "toy_blob",
    )
    model.validate()
    return model


def sample_params(model, spec, rng):
    k = model.num_joints
    max_angle = np.broadcast_to(np.asarray(spec.max_pose_angle, dtype=np.float64), (k,))
    axis = rng.normal(size=(k, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0.0, 1.0, size=k) * max_angle
    shape = rng.uniform(-spec.shape_range, spec.shape_range, size=model.num_betas)
    return ModelParams(axis * angle[:, None], shape, np.zeros((model.num_vertices, 3)))


def sample_scan(model, spec, params=None, rng=None, name="scan"):
    """Posed, sampled, noised, patch-dropped scan with ground truth.

    Points are sampled area-uniformly on the posed mesh; the ground-truth
    correspondence of each point is the canonical position of the same
    surface point before noise.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if params is None:
        params = sample_params(model, spec, rng)
    posed = forward_vertices(model, params)
    n = spec.points_per_scan
    tri, bary = geometry.sample_surface(posed, model.faces, n, rng)
    points = geometry.barycentric_points(posed, model.faces, tri, bary)
    canonical = geometry.barycentric_points(model.vertices, model.faces, tri, bary)
    if spec.noise_sigma > 0:
        points = points + rng.normal(scale=spec.noise_sigma, size=points.shape)
    if spec.dropout > 0:
        keep_count = int(math.ceil((1.0 - spec.dropout) * n))
        center = points[rng.integers(n)]
        order = np.argsort(np.linalg.norm(points - center, axis=1), kind="stable")
        keep = np.sort(order[n - keep_count:])
        points, canonical, tri, bary = points[keep], canonical[keep], tri[keep], bary[keep]
    scan = Scan(points, name=name, gt_correspondences=canonical, gt_triangles=tri, gt_barycentric=bary)
    return scan, params, canonical


@dataclass
class SyntheticCorpus:
    model: CanonicalModel
    labeled: list = field(default_factory=list)    # (Scan, ModelParams, correspondences)
    unlabeled: list = field(default_factory=list)  # (Scan, hidden ModelParams)
    test: list = field(default_factory=list)       # (Scan, ModelParams)


def make_corpus(model, spec, n_labeled, n_unlabeled, n_test, seed=None):
    """Labeled/unlabeled/test splits drawn from independent seeded streams.

    Each split is a prefix of a fixed stream, so growing one split never
    changes the others.
    """
    seed = spec.seed if seed is None else seed
    streams = np.random.SeedSequence(seed).spawn(3)
    out = SyntheticCorpus(model)
    rng = np.random.default_rng(streams[0])
    for i in range(n_labeled):
        out.labeled.append(sample_scan(model, spec, rng=rng, name=f"labeled_{i:03d}"))
    rng = np.random.default_rng(streams[1])
    for i in range(n_unlabeled):
        scan, params, _ = sample_scan(model, spec, rng=rng, name=f"unlabeled_{i:03d}")
        out.unlabeled.append((scan, params))
    rng = np.random.default_rng(streams[2])
    for i in range(n_test):
        scan, params, _ = sample_scan(model, spec, rng=rng, name=f"test_{i:03d}")
        out.test.append((scan, params))
    return out
