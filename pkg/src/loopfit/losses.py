"""Diffused forward model and the loss terms of the registration loop.

All terms return exact gradients of their (piecewise) smooth interpolants with
respect to model parameters and predicted correspondences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import body_model as bm
from . import geometry
from .sdf_diffusion import gather, stencil

DEFAULT_OFFSET_WEIGHT = 1.0


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, index=None):
        where = f" at point {index}" if index is not None else ""
        super().__init__(f"non-finite value in {term}{where}")
        self.term = term
        self.index = index


@dataclass
class LossWeights:
    lambda_sdf: float | None = None  # None: balance against the data term on first use
    w_self: float = 1.0
    w_d2m: float = 1.0
    w_sup: float = 1.0
    w_pose_prior: float = 1e-3
    w_shape_prior: float = 1e-3
    w_offset_prior: float = DEFAULT_OFFSET_WEIGHT
    robust_sigma: float | None = None  # Geman-McClure scale; None means squared distance
    pose_limit: float = math.pi / 2
    w_pose_limit: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None and f.name in ("lambda_sdf", "robust_sigma"):
                continue
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    @property
    def lam(self):
        if self.lambda_sdf is None:
            raise ValueError("lambda_sdf is unresolved; call auto_balance_lambda first")
        return self.lambda_sdf

    def with_lambda(self, lam):
        return replace(self, lambda_sdf=float(lam))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LossBreakdown:
    """Unweighted terms plus their weighted total.

    ``reg_term`` already carries the prior weights, so
    total = w_self*self + lambda*sdf + w_d2m*d2m + w_sup*sup + reg.
    """

    self_term: float = 0.0
    sdf_term: float = 0.0
    d2m_term: float = 0.0
    sup_term: float = 0.0
    reg_term: float = 0.0
    total: float = 0.0

    def recompute_total(self, weights):
        lam = weights.lambda_sdf or 0.0
        self.total = (weights.w_self * self.self_term + lam * self.sdf_term
                      + weights.w_d2m * self.d2m_term + weights.w_sup * self.sup_term
                      + self.reg_term)
        return self

    def __add__(self, other):
        return LossBreakdown(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass
class LossResult:
    breakdown: LossBreakdown
    grad_params: dict
    grad_corr: np.ndarray
    grad_phi: dict | None = None
    extras: dict = field(default_factory=dict)


def _check_finite(term, values):
    values = np.asarray(values)
    if not np.isfinite(values).all():
        bad = np.flatnonzero(~np.isfinite(values.reshape(len(values), -1)).all(axis=1)) if values.ndim else []
        raise NonFiniteLossError(term, int(bad[0]) if len(bad) else None)


# -- diffused forward map -----------------------------------------------------------

@dataclass
class _ForwardCache:
    st: object
    corner_shaped: np.ndarray   # (N, 8, 3)
    corner_weights: np.ndarray  # (N, 8, K)
    corner_vid: np.ndarray      # (N, 8, 3) vertex ids of each corner's closest triangle
    corner_bary: np.ndarray     # (N, 8, 3)
    skin_cache: object
    inside_mask: np.ndarray     # (N, 3) axes not clamped


@dataclass
class CornerData:
    """Everything the diffused model needs at fixed canonical points.

    Depends only on the points and the grid, so it can be reused across
    parameter updates while correspondences stay fixed.
    """

    points: np.ndarray
    disp: np.ndarray
    st: object
    corner_i: np.ndarray
    corner_w: np.ndarray
    corner_bary: np.ndarray
    corner_vid: np.ndarray
    corner_p: np.ndarray
    corner_s: np.ndarray
    corner_sdf: np.ndarray
    base: np.ndarray
    weights: np.ndarray
    posedirs: np.ndarray
    shapedirs: np.ndarray


def corner_data(grid, model, points):
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pc, disp = grid.clamp(p)
    st = stencil(grid, pc, check=False)
    n, t = len(pc), st.weight
    corner_i = gather(grid, "closest_point", st)
    corner_w = gather(grid, "skin", st)
    tri = gather(grid, "closest_tri", st)[..., 0].round().astype(np.int64)
    corner_bary = gather(grid, "closest_bary", st)
    if model.num_pose_features:
        corner_p = gather(grid, "pose_blend", st).reshape(n, 8, 3, -1)
    else:
        corner_p = np.zeros((n, 8, 3, 0))
    if model.num_betas:
        corner_s = gather(grid, "shape_blend", st).reshape(n, 8, 3, -1)
    else:
        corner_s = np.zeros((n, 8, 3, 0))
    return CornerData(
        p.copy(), disp, st, corner_i, corner_w, corner_bary, model.faces[tri], corner_p, corner_s,
        gather(grid, "sdf", st)[..., 0],
        np.einsum("nc,ncd->nd", t, corner_i), np.einsum("nc,nck->nk", t, corner_w),
        np.einsum("nc,ncdp->ndp", t, corner_p), np.einsum("nc,ncdb->ndb", t, corner_s))


def _corners_for(grid, model, points, corners):
    if corners is not None and corners.points.shape == np.shape(points) and np.array_equal(corners.points, points):
        return corners
    return corner_data(grid, model, points)


def _diffused_forward(grid, model, params, points, art=None, corners=None):
    cd = _corners_for(grid, model, points, corners)
    if art is None:
        art = bm.articulate(model, params.pose, params.shape)
    t = cd.st.weight
    corner_d = np.einsum("nca,ncad->ncd", cd.corner_bary, params.offsets[cd.corner_vid])
    corner_shaped = cd.corner_i + corner_d + cd.corner_p @ art.pose_feat + cd.corner_s @ params.shape
    offsets = np.einsum("nc,ncd->nd", t, corner_d)
    out, sc = bm.skin(art, params.shape, cd.base, cd.weights, cd.posedirs, cd.shapedirs, offsets,
                      params.translation)
    return out, _ForwardCache(cd.st, corner_shaped, cd.corner_w, cd.corner_vid, cd.corner_bary, sc, cd.disp == 0)


def _diffused_forward_vjp(model, cache, grad_out, num_vertices):
    g = bm.skin_vjp(cache.skin_cache, grad_out)
    st = cache.st
    # d/dp through the trilinear weights of every interpolated channel
    s = np.einsum("nd,ncd->nc", g.shaped, cache.corner_shaped)
    s += np.einsum("nk,nck->nc", g.weights, cache.corner_weights)
    g_p = np.einsum("nc,nce->ne", s, st.dweight) * cache.inside_mask
    g_pose, g_shape_joints = bm.articulation_vjp(model, cache.skin_cache.art, g.skin_rot, g.skin_trans, g.pose_feat)
    # offsets enter through the exact closest-surface record of each corner
    coef = st.weight[:, :, None] * cache.corner_bary           # (N, 8, 3)
    vid = cache.corner_vid.reshape(-1)
    contrib = (coef[..., None] * g.shaped[:, None, None, :]).reshape(-1, 3)
    g_off = np.stack([np.bincount(vid, weights=contrib[:, d], minlength=num_vertices) for d in range(3)], axis=1)
    grads = {"pose": g_pose, "shape": g.shape_direct + g_shape_joints, "offsets": g_off,
             "translation": g.translation}
    return g_p, grads


def diffused_forward(grid, model, params, points):
    """Diffused model at canonical points (clamped into the grid lattice)."""
    params.check(model)
    out, _ = _diffused_forward(grid, model, params, points)
    return out


# -- individual terms ---------------------------------------------------------------

def sdf_penalty(grid, points, corners=None):
    """Signed distance with the clamp distance added, and its gradient."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if corners is not None and np.array_equal(corners.points, p):
        st, corner, disp = corners.st, corners.corner_sdf, corners.disp
    else:
        pc, disp = grid.clamp(p)
        st = stencil(grid, pc, check=False)
        corner = gather(grid, "sdf", st)[..., 0]
    d = np.sum(st.weight * corner, axis=1)
    grad = np.einsum("nc,nce->ne", corner, st.dweight) * (disp == 0)
    e = np.linalg.norm(disp, axis=1)
    outside = e > 0
    grad[outside] += disp[outside] / e[outside, None]
    return d + e, grad


def _robust(q, sigma):
    """Geman-McClure on squared residuals, scaled to match q near zero."""
    if sigma is None:
        return q, np.ones_like(q)
    s2 = sigma * sigma
    return s2 * q / (q + s2), (s2 / (q + s2)) ** 2


def self_loss(grid, model, params, scan_points, correspondences, lam, robust_sigma=None):
    """Loop term: distance from scan points to the diffused model at their correspondences."""
    s = np.atleast_2d(np.asarray(scan_points, dtype=np.float64)).reshape(-1, 3)
    p = np.atleast_2d(np.asarray(correspondences, dtype=np.float64)).reshape(-1, 3)
    if len(s) != len(p):
        raise ValueError("one correspondence per scan point is required")
    if len(s) == 0:
        return LossBreakdown()
    y = diffused_forward(grid, model, params, p)
    rho, _ = _robust(np.sum((s - y) ** 2, axis=1), robust_sigma)
    pen, _ = sdf_penalty(grid, p)
    out = LossBreakdown(self_term=float(rho.sum()), sdf_term=float(np.sum(pen ** 2)))
    out.total = out.self_term + lam * out.sdf_term
    return out


def _data_to_model(model, params, scan_points, want_grad=True):
    s = np.atleast_2d(np.asarray(scan_points, dtype=np.float64)).reshape(-1, 3)
    posed, cache = bm.forward_vertices_with_cache(model, params)
    if len(s) == 0:
        return 0.0, {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    closest, d2, tri, bary = geometry.TriangleIndex(posed, model.faces).query(s)
    value = float(d2.sum())
    if not want_grad:
        return value, None
    r = s - closest
    vid = model.faces[tri].reshape(-1)
    contrib = (-2.0 * bary[:, :, None] * r[:, None, :]).reshape(-1, 3)
    g_v = np.stack([np.bincount(vid, weights=contrib[:, d], minlength=model.num_vertices) for d in range(3)], axis=1)
    return value, bm.forward_vertices_vjp(model, cache, g_v)


def data_to_model_loss(model, params, scan_points):
    """Sum of squared distances from scan points to the posed mesh."""
    value, _ = _data_to_model(model, params, scan_points, want_grad=False)
    return value


def supervised_loss(predicted, gt):
    """Sum of unsquared L2 distances between predicted and true correspondences."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if predicted.shape != gt.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {gt.shape}")
    return float(np.linalg.norm(predicted - gt, axis=1).sum())


def supervised_loss_grad(predicted, gt):
    diff = np.asarray(predicted, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    norm = np.linalg.norm(diff, axis=1, keepdims=True)
    return np.where(norm > 0, diff / np.where(norm > 0, norm, 1.0), 0.0)


def pose_prior(pose, limit=math.pi / 2, limit_weight=10.0):
    """Quadratic pull to rest for non-root joints plus a soft joint-limit hinge."""
    theta = np.asarray(pose, dtype=np.float64).reshape(-1, 3)[1:]
    norms = np.linalg.norm(theta, axis=1)
    excess = np.maximum(norms - limit, 0.0)
    value = float(np.sum(theta ** 2) + limit_weight * np.sum(excess ** 2))
    grad = np.zeros((len(theta) + 1, 3))
    safe = np.where(norms > 0, norms, 1.0)
    grad[1:] = 2 * theta + (2 * limit_weight * excess / safe)[:, None] * theta
    return value, grad


def _regularization(params, pose_weight, shape_weight, offset_weight, limit, limit_weight):
    lp, gp = pose_prior(params.pose, limit, limit_weight)
    bnorm = float(np.linalg.norm(params.shape))
    value = pose_weight * lp + shape_weight * bnorm + offset_weight * float(np.sum(params.offsets ** 2))
    grads = {
        "pose": pose_weight * gp,
        "shape": shape_weight * (params.shape / bnorm if bnorm > 0 else np.zeros_like(params.shape)),
        "offsets": 2 * offset_weight * params.offsets,
        "translation": np.zeros(3),
    }
    return value, grads


def regularization_loss(params, pose_weight=1.0, shape_weight=1.0, offset_weight=DEFAULT_OFFSET_WEIGHT,
                        limit=math.pi / 2, limit_weight=10.0):
    """Pose prior + unsquared shape norm + weighted squared offsets."""
    value, _ = _regularization(params, pose_weight, shape_weight, offset_weight, limit, limit_weight)
    return value


# -- full objective --------------------------------------------------------------------

def auto_balance_lambda(grid, model, params, scan_points, correspondences, weights,
                        lo=1.0, hi=1e3):
    """Pick lambda so the SDF term matches the loop data term, clipped to [lo, hi]."""
    if weights.lambda_sdf is not None:
        return weights
    part = self_loss(grid, model, params, scan_points, correspondences, 0.0, weights.robust_sigma)
    ratio = weights.w_self * part.self_term / part.sdf_term if part.sdf_term > 0 else hi
    return weights.with_lambda(float(np.clip(ratio, lo, hi)))


def total_loss_and_gradients(grid, model, params, scan_points, correspondences, gt_correspondences=None,
                             weights=None, use_d2m=True, regressor=None, regressor_cache=None, corners=None):
    """Loss breakdown and gradients for one scan.

    Returns gradients for every ModelParams block and for each correspondence.
    With ``regressor`` and its forward ``regressor_cache``, the correspondence
    gradient is also pulled back to regressor weights (``grad_phi``).
    ``corners`` (from corner_data) skips grid lookups for fixed correspondences.
    """
    weights = weights or LossWeights()
    lam = weights.lam
    params.check(model)
    s = np.atleast_2d(np.asarray(scan_points, dtype=np.float64)).reshape(-1, 3)
    p = np.atleast_2d(np.asarray(correspondences, dtype=np.float64)).reshape(-1, 3)
    if len(s) != len(p):
        raise ValueError("one correspondence per scan point is required")
    n = len(s)
    grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    g_corr = np.zeros((n, 3))
    out = LossBreakdown()

    if n and (weights.w_self > 0 or lam > 0):
        corners = _corners_for(grid, model, p, corners)
        y, cache = _diffused_forward(grid, model, params, p, corners=corners)
        _check_finite("self_term", y)
        r = s - y
        rho, drho = _robust(np.sum(r * r, axis=1), weights.robust_sigma)
        _check_finite("self_term", rho)
        out.self_term = float(rho.sum())
        if weights.w_self > 0:
            g_y = -2.0 * weights.w_self * drho[:, None] * r
            g_p, g_par = _diffused_forward_vjp(model, cache, g_y, model.num_vertices)
            g_corr += g_p
            for key in grads:
                grads[key] += g_par[key]
        pen, pen_grad = sdf_penalty(grid, p, corners)
        _check_finite("sdf_term", pen)
        out.sdf_term = float(np.sum(pen ** 2))
        g_corr += (2.0 * lam * pen)[:, None] * pen_grad

    if n and use_d2m and weights.w_d2m > 0:
        _check_finite("d2m_term", s)
        value, g_par = _data_to_model(model, params, s)
        out.d2m_term = value
        for key in grads:
            grads[key] += weights.w_d2m * g_par[key]

    if gt_correspondences is not None and weights.w_sup > 0:
        out.sup_term = supervised_loss(p, gt_correspondences)
        g_corr += weights.w_sup * supervised_loss_grad(p, gt_correspondences)

    value, g_reg = _regularization(params, weights.w_pose_prior, weights.w_shape_prior,
                                   weights.w_offset_prior, weights.pose_limit, weights.w_pose_limit)
    out.reg_term = value
    for key in grads:
        grads[key] += g_reg[key]

    out.recompute_total(weights)
    for name in ("self_term", "sdf_term", "d2m_term", "sup_term", "reg_term"):
        if not np.isfinite(getattr(out, name)):
            raise NonFiniteLossError(name)
    _check_finite("correspondence gradient", g_corr)

    grad_phi = None
    if regressor is not None:
        grad_phi = regressor.backprop(regressor_cache, g_corr)
    return LossResult(out, grads, g_corr, grad_phi)


def objective_value(grid, model, params, scan_points, correspondences, gt_correspondences=None,
                    weights=None, use_d2m=True):
    """Total loss only (same definition as total_loss_and_gradients)."""
    weights = weights or LossWeights()
    s = np.atleast_2d(np.asarray(scan_points, dtype=np.float64)).reshape(-1, 3)
    p = np.atleast_2d(np.asarray(correspondences, dtype=np.float64)).reshape(-1, 3)
    out = LossBreakdown()
    if len(s):
        part = self_loss(grid, model, params, s, p, weights.lam, weights.robust_sigma)
        out.self_term, out.sdf_term = part.self_term, part.sdf_term
        if use_d2m and weights.w_d2m > 0:
            out.d2m_term = data_to_model_loss(model, params, s)
    if gt_correspondences is not None:
        out.sup_term = supervised_loss(p, gt_correspondences)
    out.reg_term, _ = _regularization(params, weights.w_pose_prior, weights.w_shape_prior,
                                      weights.w_offset_prior, weights.pose_limit, weights.w_pose_limit)
    return out.recompute_total(weights)
