"""Correspondence regressor: scan point -> canonical point.

Per-point neighborhood features feed a small tanh network. A softmax part
classifier blends per-part point heads, p = sum_k a_k(s) r_k(s), and the
result is clamped into the working volume. Gradients are hand-derived.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

NUM_FEATURES = 10


class StaleCacheError(RuntimeError):
    """Backprop was called with a forward cache from different weights."""


def neighborhood_features(points, index=None, radius=0.2, count_scale=1.0):
    """Coordinates, centroid offset, covariance eigenvalues and neighbor count.

    The neighborhood is every scan point within ``radius`` (the point itself
    included). Eigenvalues are in descending order. Returns (N, 10), or (10,)
    for an integer ``index``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    which = np.arange(len(pts)) if index is None else np.atleast_1d(index)
    tree = cKDTree(pts)
    groups = tree.query_ball_point(pts[which], r=radius)
    out = np.zeros((len(which), NUM_FEATURES))
    for row, (i, nbrs) in enumerate(zip(which, groups)):
        nb = pts[np.sort(nbrs)]
        centroid = nb.mean(axis=0)
        d = nb - centroid
        cov = d.T @ d / len(nb)
        eig = np.linalg.eigvalsh(cov)[::-1]
        out[row, :3] = pts[i]
        out[row, 3:6] = centroid - pts[i]
        out[row, 6:9] = np.maximum(eig, 0.0)
        out[row, 9] = len(nb) / count_scale
    if index is not None and np.ndim(index) == 0:
        return out[0]
    return out


@dataclass
class RegressorParams:
    """Weights plus fixed input standardization and output box."""

    weights: dict
    n_parts: int
    radius: float = 0.2
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(NUM_FEATURES))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(NUM_FEATURES))
    lo: float = -0.5
    hi: float = 0.5

    @property
    def depth(self):
        return sum(1 for k in self.weights if k.startswith("W") and k[1:].isdigit())

    @property
    def width(self):
        return self.weights["W0"].shape[0]

    def copy(self):
        return RegressorParams({k: v.copy() for k, v in self.weights.items()}, self.n_parts, self.radius,
                               self.feature_mean.copy(), self.feature_std.copy(), self.lo, self.hi)

    def fingerprint(self):
        crc = 0
        for k in sorted(self.weights):
            crc = zlib.crc32(np.ascontiguousarray(self.weights[k]).tobytes(), crc)
        return crc

    def num_weights(self):
        return sum(v.size for v in self.weights.values())

    def standardize(self, feats):
        return (feats - self.feature_mean) / self.feature_std

    @classmethod
    def init(cls, n_parts=14, rng=None, width=128, depth=3, radius=0.2, feature_mean=None,
             feature_std=None, part_centers=None, lo=-0.5, hi=0.5):
        """Uniform fan-in initialization with a zero class bias.

        ``part_centers`` (n_parts, 3), when given, seeds each part head's
        bias so untrained heads start inside their own region.
        """
        if n_parts < 1 or width < 1 or depth < 1:
            raise ValueError("n_parts, width and depth must be positive")
        rng = np.random.default_rng(rng)
        w = {}
        fan_in = NUM_FEATURES
        for layer in range(depth):
            bound = 1.0 / np.sqrt(fan_in)
            w[f"W{layer}"] = rng.uniform(-bound, bound, (width, fan_in))
            w[f"b{layer}"] = rng.uniform(-bound, bound, width)
            fan_in = width
        bound = 1.0 / np.sqrt(width)
        w["Wc"] = rng.uniform(-bound, bound, (n_parts, width))
        w["bc"] = np.zeros(n_parts)
        w["Wr"] = rng.uniform(-bound, bound, (3 * n_parts, width))
        w["br"] = (np.zeros(3 * n_parts) if part_centers is None
                   else np.asarray(part_centers, dtype=np.float64).reshape(3 * n_parts).copy())
        mean = np.zeros(NUM_FEATURES) if feature_mean is None else np.asarray(feature_mean, dtype=np.float64)
        std = np.ones(NUM_FEATURES) if feature_std is None else np.asarray(feature_std, dtype=np.float64)
        return cls(w, n_parts, radius, mean, np.where(std > 0, std, 1.0), lo, hi)


@dataclass
class ForwardCache:
    fingerprint: int
    activations: list  # input then every hidden layer output
    part_weights: np.ndarray  # (N, P)
    part_points: np.ndarray   # (N, P, 3)
    unclamped: np.ndarray     # (N, 3)


def forward(params, features):
    """Run the network on precomputed features; returns (p, part_weights, cache)."""
    x = params.standardize(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    acts = [x]
    h = x
    for layer in range(params.depth):
        h = np.tanh(h @ params.weights[f"W{layer}"].T + params.weights[f"b{layer}"])
        acts.append(h)
    logits = h @ params.weights["Wc"].T + params.weights["bc"]
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    a = e / e.sum(axis=1, keepdims=True)
    r = (h @ params.weights["Wr"].T + params.weights["br"]).reshape(len(x), params.n_parts, 3)
    raw = np.einsum("np,npd->nd", a, r)
    p = np.clip(raw, params.lo, params.hi)
    return p, a, ForwardCache(params.fingerprint(), acts, a, r, raw)


def predict(params, scan_points, features=None):
    """Correspondences and part weights for every point of a scan."""
    pts = np.atleast_2d(np.asarray(getattr(scan_points, "points", scan_points), dtype=np.float64))
    if len(pts) == 0:
        raise ValueError("scan is empty")
    if features is None:
        features = neighborhood_features(pts, radius=params.radius)
    p, a, _ = forward(params, features)
    return p, a


def backprop(params, cache, grad_p):
    """Gradients of every weight given dL/dp for the cached forward pass."""
    if cache.fingerprint != params.fingerprint():
        raise StaleCacheError("forward cache does not match the current regressor weights")
    g = np.asarray(grad_p, dtype=np.float64).reshape(cache.unclamped.shape)
    g = g * ((cache.unclamped >= params.lo) & (cache.unclamped <= params.hi))
    a, r = cache.part_weights, cache.part_points
    n = len(g)
    g_r = a[:, :, None] * g[:, None, :]                       # (N, P, 3)
    g_a = np.einsum("npd,nd->np", r, g)
    g_logits = a * (g_a - np.sum(a * g_a, axis=1, keepdims=True))
    h = cache.activations[-1]
    grads = {
        "Wc": g_logits.T @ h,
        "bc": g_logits.sum(axis=0),
        "Wr": g_r.reshape(n, -1).T @ h,
        "br": g_r.reshape(n, -1).sum(axis=0),
    }
    g_h = g_logits @ params.weights["Wc"] + g_r.reshape(n, -1) @ params.weights["Wr"]
    for layer in range(params.depth - 1, -1, -1):
        out = cache.activations[layer + 1]
        g_pre = g_h * (1.0 - out * out)
        grads[f"W{layer}"] = g_pre.T @ cache.activations[layer]
        grads[f"b{layer}"] = g_pre.sum(axis=0)
        if layer:
            g_h = g_pre @ params.weights[f"W{layer}"]
    return grads


class Regressor:
    """Weights bundled with forward/backward, for use as a loss-chain hook."""

    def __init__(self, params):
        self.params = params

    def forward(self, features):
        return forward(self.params, features)

    def backprop(self, cache, grad_p):
        return backprop(self.params, cache, grad_p)


def part_centers(model, n_parts=None):
    """Mean canonical position of each part's vertices."""
    n_parts = n_parts or model.num_parts
    centers = np.zeros((n_parts, 3))
    for k in range(n_parts):
        mask = model.part_labels == k
        centers[k] = model.vertices[mask].mean(axis=0) if mask.any() else model.vertices.mean(axis=0)
    return centers


def feature_statistics(feature_blocks):
    """Per-feature mean and std over a list of (N, 10) feature arrays."""
    allf = np.concatenate([np.atleast_2d(f) for f in feature_blocks], axis=0)
    return allf.mean(axis=0), allf.std(axis=0)
