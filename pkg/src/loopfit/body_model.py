"""Articulated parametric body model with analytic reverse-mode derivatives.

A canonical template is deformed by shape and pose blendshapes plus free
per-vertex offsets, then posed by linear blend skinning over a kinematic tree.
Joint locations are regressed from the shape-deformed template.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import geometry


class ParameterShapeError(ValueError):
    pass


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rotations


def _half_angle_terms(aa):
    """Quaternion coefficients of axis-angle vectors and their derivatives.

    q = (cos(a/2), s * aa) with s = sin(a/2) / a. Returns (w, s, dw_coef, ds_coef)
    where dw/daa = dw_coef * aa and ds/daa = ds_coef * aa.
    """
    a2 = np.sum(aa * aa, axis=-1)
    a = np.sqrt(a2)
    small = a < 1e-3
    a_safe = np.where(small, 1.0, a)
    half = 0.5 * a
    w = np.cos(half)
    s = np.where(small, 0.5 - a2 / 48.0 + a2 * a2 / 3840.0, np.sin(half) / a_safe)
    dw_coef = -0.5 * s
    ds_coef = np.where(
        small,
        -1.0 / 24.0 + a2 / 960.0,
        (0.5 * a * np.cos(half) - np.sin(half)) / (a_safe * a_safe * a_safe),
    )
    return w, s, dw_coef, ds_coef


def _quat_to_matrix(w, x, y, z):
    r = np.empty(w.shape + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_matrices(aa):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3) via unit quaternions."""
    aa = np.asarray(aa, dtype=np.float64)
    w, s, _, _ = _half_angle_terms(aa)
    v = s[..., None] * aa
    return _quat_to_matrix(w, v[..., 0], v[..., 1], v[..., 2])


def rotation_matrices_vjp(aa, grad_r):
    """Pull a gradient on rotation matrices back to axis-angle vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    w, s, dw_coef, ds_coef = _half_angle_terms(aa)
    x, y, z = (s[..., None] * aa)[..., 0], (s[..., None] * aa)[..., 1], (s[..., None] * aa)[..., 2]
    g = grad_r
    # d R / d (w, x, y, z), contracted with g
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    gv = np.stack([gx, gy, gz], axis=-1)
    # v = s * aa
    dot = np.sum(gv * aa, axis=-1)
    return (gw * dw_coef + dot * ds_coef)[..., None] * aa + s[..., None] * gv


def pose_feature(pose):
    """Flattened (R - I) of every non-root joint; zero at rest."""
    pose = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
    r = rotation_matrices(pose[1:])
    return (r - np.eye(3)).reshape(-1)


# ---------------------------------------------------------------------------
# model and parameters


@dataclass(frozen=True, eq=False)
class CanonicalModel:
    vertices: np.ndarray             # (V, 3)
    faces: np.ndarray                # (F, 3) counter-clockwise seen from outside
    kinematic_parents: np.ndarray    # (K,), root has -1
    joint_positions_canonical: np.ndarray  # (K, 3)
    skinning_weights: np.ndarray     # (V, K)
    pose_blendshapes: np.ndarray     # (V, 3, 9(K-1))
    shape_blendshapes: np.ndarray    # (V, 3, B)
    shape_joint_regressor: np.ndarray  # (K, V)
    part_labels: np.ndarray          # (V,)
    part_names: tuple = ()
    part_joint_table: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    name: str = "model"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                value.setflags(write=False)

    @property
    def num_joints(self):
        return len(self.kinematic_parents)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_betas(self):
        return self.shape_blendshapes.shape[2]

    @property
    def num_pose_features(self):
        return 9 * (self.num_joints - 1)

    @property
    def num_parts(self):
        return int(self.part_labels.max()) + 1 if len(self.part_labels) else 0

    @property
    def body_height(self):
        return float(np.ptp(self.vertices[:, 1]))

    def regressed_joints(self, shape):
        """Rest joint locations for shape coefficients (how beta moves joints)."""
        shaped = self.vertices + self.shape_blendshapes @ np.asarray(shape, dtype=np.float64)
        return self.shape_joint_regressor @ shaped

    def validate(self, bounds=(-0.5, 0.5)):
        v, f, k = self.vertices, self.faces, self.num_joints
        w = self.skinning_weights
        if w.shape != (len(v), k):
            raise ModelError(f"skinning weights shape {w.shape}, expected {(len(v), k)}")
        if (w < -1e-12).any() or np.abs(w.sum(axis=1) - 1).max() > 1e-6:
            raise ModelError("skinning weights must be non-negative and sum to 1")
        parents = self.kinematic_parents
        if parents[0] != -1 or (parents[1:] < 0).any():
            raise ModelError("kinematic tree must have a single root at joint 0")
        if (parents[1:] >= np.arange(1, k)).any():
            raise ModelError("every joint's parent must precede it (no cycles)")
        if self.pose_blendshapes.shape != (len(v), 3, self.num_pose_features):
            raise ModelError("pose blendshapes must be (V, 3, 9(K-1))")
        if self.shape_blendshapes.shape[:2] != (len(v), 3):
            raise ModelError("shape blendshapes must be (V, 3, B)")
        if self.shape_joint_regressor.shape != (k, len(v)):
            raise ModelError("joint regressor must be (K, V)")
        if self.joint_positions_canonical.shape != (k, 3):
            raise ModelError("joint positions must be (K, 3)")
        try:
            geometry.audit_mesh(v, f)
        except geometry.MeshError as exc:
            raise ModelError(f"template mesh is not watertight: {exc}") from exc
        lo, hi = bounds
        if not ((v > lo).all() and (v < hi).all()):
            raise ModelError("canonical vertices must lie strictly inside the working volume")
        if len(self.part_labels) != len(v) or (self.part_labels < 0).any():
            raise ModelError("part labels must be one non-negative integer per vertex")

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "name": self.name,
            "vertices": self.vertices.tolist(),
            "faces": self.faces.tolist(),
            "kinematic_parents": self.kinematic_parents.tolist(),
            "joint_positions_canonical": self.joint_positions_canonical.tolist(),
            "skinning_weights": self.skinning_weights.tolist(),
            "pose_blendshapes": self.pose_blendshapes.tolist(),
            "shape_blendshapes": self.shape_blendshapes.tolist(),
            "shape_joint_regressor": self.shape_joint_regressor.tolist(),
            "part_labels": self.part_labels.tolist(),
            "part_names": list(self.part_names),
            "part_joint_table": self.part_joint_table.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        v = np.asarray(d["vertices"], dtype=np.float64).reshape(-1, 3)
        k = len(d["kinematic_parents"])
        return cls(
            vertices=v,
            faces=np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3),
            kinematic_parents=np.asarray(d["kinematic_parents"], dtype=np.int64),
            joint_positions_canonical=np.asarray(d["joint_positions_canonical"], dtype=np.float64).reshape(k, 3),
            skinning_weights=np.asarray(d["skinning_weights"], dtype=np.float64).reshape(len(v), k),
            pose_blendshapes=np.asarray(d["pose_blendshapes"], dtype=np.float64).reshape(len(v), 3, 9 * (k - 1)),
            shape_blendshapes=np.asarray(d["shape_blendshapes"], dtype=np.float64).reshape(len(v), 3, -1),
            shape_joint_regressor=np.asarray(d["shape_joint_regressor"], dtype=np.float64).reshape(k, len(v)),
            part_labels=np.asarray(d["part_labels"], dtype=np.int64),
            part_names=tuple(d.get("part_names", ())),
            part_joint_table=np.asarray(d.get("part_joint_table", []), dtype=np.int64),
            name=d.get("name", "model"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        try:
            model = cls.from_dict(doc)
        except (KeyError, TypeError) as exc:
            raise ModelError(f"{path}: malformed model file ({exc!r})") from exc
        model.validate()
        return model


@dataclass
class ModelParams:
    """Per-scan latent: pose (K, 3) axis-angle, shape (B,), offsets (V, 3).

    ``translation`` is a global shift applied after skinning (zero for scans
    generated in model space).
    """

    pose: np.ndarray
    shape: np.ndarray
    offsets: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    BLOCKS = ("pose", "shape", "offsets", "translation")

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1, 3)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros((model.num_joints, 3)), np.zeros(model.num_betas),
                   np.zeros((model.num_vertices, 3)))

    def copy(self):
        return ModelParams(self.pose.copy(), self.shape.copy(), self.offsets.copy(),
                           self.translation.copy())

    def as_dict(self):
        return {name: getattr(self, name) for name in self.BLOCKS}

    def check(self, model):
        if self.pose.shape != (model.num_joints, 3):
            raise ParameterShapeError(f"pose must have {3 * model.num_joints} entries, got {self.pose.size}")
        if self.shape.shape != (model.num_betas,):
            raise ParameterShapeError(f"shape must have {model.num_betas} entries, got {self.shape.size}")
        if self.offsets.shape != (model.num_vertices, 3):
            raise ParameterShapeError(f"offsets must be ({model.num_vertices}, 3), got {self.offsets.shape}")

    def to_json(self):
        return {k: v.tolist() for k, v in self.as_dict().items()}

    @classmethod
    def from_json(cls, d):
        return cls(d["pose"], d["shape"], d["offsets"], d.get("translation", [0.0, 0.0, 0.0]))


@dataclass(frozen=True)
class SurfacePoint:
    triangle: int
    barycentric: tuple

    def __post_init__(self):
        b = np.asarray(self.barycentric, dtype=np.float64)
        if b.shape != (3,) or (b < -1e-12).any() or abs(b.sum() - 1) > 1e-9:
            raise ValueError(f"invalid barycentric coordinates {self.barycentric}")


# ---------------------------------------------------------------------------
# kinematics


@dataclass
class Articulation:
    """Skinning transforms for one (pose, shape) plus what the VJP needs."""

    pose: np.ndarray        # (K, 3)
    local_rot: np.ndarray   # (K, 3, 3)
    joints: np.ndarray      # (K, 3) rest joints for this shape
    global_rot: np.ndarray  # (K, 3, 3)
    global_trans: np.ndarray  # (K, 3)
    skin_rot: np.ndarray    # (K, 3, 3), equals global_rot
    skin_trans: np.ndarray  # (K, 3)
    pose_feat: np.ndarray   # (9(K-1),)

    def transforms(self):
        t = np.zeros((len(self.skin_rot), 4, 4))
        t[:, :3, :3] = self.skin_rot
        t[:, :3, 3] = self.skin_trans
        t[:, 3, 3] = 1.0
        return t


def articulate(model, pose, shape):
    pose = np.asarray(pose, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    k = model.num_joints
    if pose.size != 3 * k:
        raise ParameterShapeError(f"pose must have {3 * k} entries, got {pose.size}")
    if shape.size != model.num_betas:
        raise ParameterShapeError(f"shape must have {model.num_betas} entries, got {shape.size}")
    pose = pose.reshape(k, 3)
    local = rotation_matrices(pose)
    joints = model.regressed_joints(shape)
    parents = model.kinematic_parents
    g_rot = np.empty((k, 3, 3))
    g_trans = np.empty((k, 3))
    g_rot[0] = local[0]
    g_trans[0] = joints[0]
    for j in range(1, k):
        p = parents[j]
        g_rot[j] = g_rot[p] @ local[j]
        g_trans[j] = g_rot[p] @ (joints[j] - joints[p]) + g_trans[p]
    skin_trans = g_trans - np.einsum("kij,kj->ki", g_rot, joints)
    feat = (local[1:] - np.eye(3)).reshape(-1)
    return Articulation(pose, local, joints, g_rot, g_trans, g_rot, skin_trans, feat)


def articulation_vjp(model, art, grad_skin_rot, grad_skin_trans, grad_pose_feat):
    """Gradients of pose and shape given gradients on skinning transforms."""
    k = model.num_joints
    parents = model.kinematic_parents
    joints = art.joints
    g_rot = grad_skin_rot - np.einsum("ki,kj->kij", grad_skin_trans, joints)
    g_trans = grad_skin_trans.copy()
    g_joints = -np.einsum("kji,kj->ki", art.global_rot, grad_skin_trans)
    g_local = np.zeros((k, 3, 3))
    g_local[1:] += grad_pose_feat.reshape(k - 1, 3, 3)
    for j in range(k - 1, 0, -1):
        p = parents[j]
        offset = joints[j] - joints[p]
        g_rot[p] += g_rot[j] @ art.local_rot[j].T + np.outer(g_trans[j], offset)
        g_local[j] += art.global_rot[p].T @ g_rot[j]
        g_off = art.global_rot[p].T @ g_trans[j]
        g_joints[j] += g_off
        g_joints[p] -= g_off
        g_trans[p] += g_trans[j]
    g_local[0] += g_rot[0]
    g_joints[0] += g_trans[0]
    g_pose = rotation_matrices_vjp(art.pose, g_local)
    jshape = np.einsum("kv,vcb->kcb", model.shape_joint_regressor, model.shape_blendshapes)
    g_shape = np.einsum("kcb,kc->b", jshape, g_joints)
    return g_pose, g_shape


def joint_transforms(model, pose, shape):
    """World skinning transforms G_k (K, 4, 4); identity at rest pose."""
    return articulate(model, pose, shape).transforms()


@dataclass
class SkinCache:
    art: Articulation
    shaped: np.ndarray   # (N, 3) pre-skinning positions
    weights: np.ndarray  # (N, K)
    rot: np.ndarray      # (N, 3, 3) blended rotation part
    posedirs: np.ndarray
    shapedirs: np.ndarray
    shape: np.ndarray


def skin(art, shape, base, weights, posedirs, shapedirs, offsets, translation):
    """Blend-skin points whose per-point model functions are given explicitly."""
    shaped = base + offsets + posedirs @ art.pose_feat + shapedirs @ shape
    rot = np.einsum("nk,kij->nij", weights, art.skin_rot)
    trans = weights @ art.skin_trans
    out = np.einsum("nij,nj->ni", rot, shaped) + trans + translation
    return out, SkinCache(art, shaped, weights, rot, posedirs, shapedirs, shape)


@dataclass
class SkinGrads:
    shaped: np.ndarray      # (N, 3) gradient w.r.t. the pre-skinning position
    weights: np.ndarray     # (N, K)
    skin_rot: np.ndarray
    skin_trans: np.ndarray
    pose_feat: np.ndarray
    shape_direct: np.ndarray  # through blendshapes only (joints handled separately)
    translation: np.ndarray


def skin_vjp(cache, grad_out):
    g_shaped = np.einsum("nji,nj->ni", cache.rot, grad_out)
    g_rot_n = np.einsum("ni,nj->nij", grad_out, cache.shaped)
    g_skin_rot = np.einsum("nk,nij->kij", cache.weights, g_rot_n)
    g_skin_trans = cache.weights.T @ grad_out
    art = cache.art
    g_weights = (np.einsum("nij,kij->nk", g_rot_n, art.skin_rot) + grad_out @ art.skin_trans.T)
    g_feat = np.einsum("ncp,nc->p", cache.posedirs, g_shaped)
    g_shape = np.einsum("ncb,nc->b", cache.shapedirs, g_shaped)
    return SkinGrads(g_shaped, g_weights, g_skin_rot, g_skin_trans, g_feat, g_shape,
                     grad_out.sum(axis=0))


def forward_vertices(model, params, art=None):
    """Posed positions of every template vertex, (V, 3)."""
    params.check(model)
    if art is None:
        art = articulate(model, params.pose, params.shape)
    out, _ = skin(art, params.shape, model.vertices, model.skinning_weights,
                  model.pose_blendshapes, model.shape_blendshapes, params.offsets,
                  params.translation)
    return out


def forward_vertices_with_cache(model, params):
    params.check(model)
    art = articulate(model, params.pose, params.shape)
    out, cache = skin(art, params.shape, model.vertices, model.skinning_weights,
                      model.pose_blendshapes, model.shape_blendshapes, params.offsets,
                      params.translation)
    return out, cache


def forward_vertices_vjp(model, cache, grad_vertices):
    """Gradients of ModelParams blocks given a gradient on posed vertices."""
    g = skin_vjp(cache, grad_vertices)
    g_pose, g_shape_joints = articulation_vjp(model, cache.art, g.skin_rot, g.skin_trans, g.pose_feat)
    return {
        "pose": g_pose,
        "shape": g.shape_direct + g_shape_joints,
        "offsets": g.shaped,
        "translation": g.translation,
    }


def forward_vertex(model, params, vertex_index):
    if not 0 <= vertex_index < model.num_vertices:
        raise IndexError(f"vertex index {vertex_index} out of range [0, {model.num_vertices})")
    params.check(model)
    art = articulate(model, params.pose, params.shape)
    i = slice(vertex_index, vertex_index + 1)
    out, _ = skin(art, params.shape, model.vertices[i], model.skinning_weights[i],
                  model.pose_blendshapes[i], model.shape_blendshapes[i], params.offsets[i],
                  params.translation)
    return out[0]


def interpolate_vertex_functions(model, params, triangles, bary):
    """Barycentric interpolation of template position, weights, blendshapes and offsets."""
    f = model.faces[np.asarray(triangles)]
    b = np.asarray(bary, dtype=np.float64)
    base = np.einsum("na,nad->nd", b, model.vertices[f])
    weights = np.einsum("na,nak->nk", b, model.skinning_weights[f])
    posedirs = np.einsum("na,nacp->ncp", b, model.pose_blendshapes[f])
    shapedirs = np.einsum("na,nacp->ncp", b, model.shape_blendshapes[f])
    offsets = np.einsum("na,nad->nd", b, params.offsets[f])
    return base, weights, posedirs, shapedirs, offsets


def forward_surface_points(model, params, triangles, bary, art=None):
    """Pose surface points: interpolate the vertex functions, then skin."""
    params.check(model)
    if art is None:
        art = articulate(model, params.pose, params.shape)
    base, w, pd, sd, off = interpolate_vertex_functions(model, params, triangles, bary)
    out, _ = skin(art, params.shape, base, w, pd, sd, off, params.translation)
    return out


def forward_surface_point(model, params, sp):
    return forward_surface_points(model, params, [sp.triangle], [sp.barycentric])[0]


def canonical_surface_points(model, triangles, bary):
    return geometry.barycentric_points(model.vertices, model.faces, np.asarray(triangles), np.asarray(bary))
