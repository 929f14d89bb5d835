"""Registration error metrics: vertex-to-vertex and bidirectional surface-to-surface."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry

S2S_SAMPLES = 10_000


def v2v(registered, gt, faces_registered=None, faces_gt=None):
    """Mean distance between corresponding vertices of two same-topology meshes."""
    a = np.asarray(registered, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"topology mismatch: {a.shape} vs {b.shape} vertices")
    if faces_registered is not None and faces_gt is not None and not np.array_equal(faces_registered, faces_gt):
        raise ValueError("topology mismatch: face lists differ")
    return float(np.linalg.norm(a - b, axis=1).mean())


def _surface_samples(vertices, faces, n, seed):
    area = geometry.triangle_areas(vertices, faces).sum()
    if not area > 0:
        raise ValueError("degenerate input: mesh has zero surface area")
    tri, bary = geometry.sample_surface(vertices, faces, n, np.random.default_rng(seed))
    return geometry.barycentric_points(vertices, faces, tri, bary)


def _as_surface(x):
    if isinstance(x, tuple) and len(x) == 2:
        return np.asarray(x[0], dtype=np.float64), np.asarray(x[1], dtype=np.int64)
    return np.atleast_2d(np.asarray(x, dtype=np.float64)), None


def _one_way(points, target):
    verts, faces = target
    if faces is None:
        d, _ = cKDTree(verts).query(points)
        return float(d.mean())
    _, d2, _, _ = geometry.TriangleIndex(verts, faces).query(points)
    return float(np.sqrt(d2).mean())


def s2s(a, b, n_samples=S2S_SAMPLES, seed=0):
    """Symmetric mean of sampled one-way surface distances.

    ``a`` and ``b`` are (vertices, faces) tuples or bare point sets. Every mesh
    is sampled with the same seed, so the value is independent of argument
    order.
    """
    sa, sb = _as_surface(a), _as_surface(b)
    if len(sa[0]) == 0 or len(sb[0]) == 0:
        raise ValueError("s2s needs non-empty inputs")
    pa = sa[0] if sa[1] is None else _surface_samples(*sa, n_samples, seed)
    pb = sb[0] if sb[1] is None else _surface_samples(*sb, n_samples, seed)
    return 0.5 * (_one_way(pa, sb) + _one_way(pb, sa))


@dataclass
class EvalReport:
    per_scan: list = field(default_factory=list)  # dicts: name, v2v, v2v_percent, s2s
    body_height: float = 1.0
    metadata: dict = field(default_factory=dict)

    def _mean(self, key):
        vals = [r[key] for r in self.per_scan if r.get(key) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def v2v_mean(self):
        return self._mean("v2v")

    @property
    def v2v_percent(self):
        return self._mean("v2v_percent")

    @property
    def s2s_mean(self):
        return self._mean("s2s")

    def add(self, name, v2v_value, s2s_value=None):
        self.per_scan.append({"name": name, "v2v": float(v2v_value),
                              "v2v_percent": 100.0 * float(v2v_value) / self.body_height,
                              "s2s": None if s2s_value is None else float(s2s_value)})

    def to_dict(self):
        return {"v2v_mean": self.v2v_mean, "v2v_percent": self.v2v_percent, "s2s_mean": self.s2s_mean,
                "body_height": self.body_height, "per_scan": self.per_scan, "metadata": self.metadata}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["per_scan"]), d["body_height"], dict(d.get("metadata", {})))
