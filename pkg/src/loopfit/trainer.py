"""Supervised warm start, joint self-supervised training and per-scan fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import body_model as bm
from . import geometry
from . import losses as L
from . import regressor as R
from .metrics import EvalReport, s2s, v2v
from .optim import AdamState, adam_step
from .scan import Scan


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


# -- configuration -------------------------------------------------------------------

def default_weights():
    return L.LossWeights(lambda_sdf=None, w_self=1.0, w_d2m=100.0, w_sup=0.04,
                         w_pose_prior=1e-3, w_shape_prior=1e-3, w_offset_prior=1.0)


@dataclass
class FitConfig:
    """Per-scan optimization schedule."""

    iters_fixed: int = 150      # loop mode, correspondences held at the regressor output
    iters_joint: int = 300      # loop mode, correspondences refined together with params
    iters_classical: int = 300
    lr_x: float = 1e-2
    lr_p: float = 2e-3
    fit_offsets: bool = False
    weights: L.LossWeights = field(default_factory=default_weights)
    residual_tol: float = 0.01  # RMS scan-to-model distance for a converged fit

    def validate(self):
        for name in ("iters_fixed", "iters_joint", "iters_classical"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr_x", "lr_p", "residual_tol"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive")
        return self


@dataclass
class TrainConfig:
    warmstart_epochs: int = 200
    joint_epochs: int = 100
    batch_size: int = 8
    lr_phi: float = 3e-3
    lr_x: float = 1e-2
    weights: L.LossWeights = field(default_factory=default_weights)
    seed: int = 0
    width: int = 128
    depth: int = 3
    radius: float = 0.2
    latent_init_iters: int = 100
    latent_refine_iters: int = 0
    use_d2m: bool = True
    fit_offsets: bool = False
    divergence_limit: float = 1e6
    checkpoint_every: int = 0

    def validate(self):
        for name in ("warmstart_epochs", "joint_epochs", "latent_init_iters", "latent_refine_iters",
                     "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "width", "depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr_phi", "lr_x", "radius", "divergence_limit"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive")
        return self

    def fit_config(self, **overrides):
        return replace(FitConfig(lr_x=self.lr_x, fit_offsets=self.fit_offsets, weights=self.weights), **overrides)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "weights" in d:
            base = default_weights().to_dict()
            base.update(d["weights"])
            d["weights"] = L.LossWeights.from_dict(base)
        return cls(**d).validate()


# -- corpus ---------------------------------------------------------------------------

@dataclass
class LabeledScan:
    scan: Scan
    params: bm.ModelParams
    correspondences: np.ndarray


@dataclass
class Corpus:
    labeled: list = field(default_factory=list)    # LabeledScan
    unlabeled: list = field(default_factory=list)  # Scan
    latent: list = field(default_factory=list)     # ModelParams per unlabeled scan, filled by joint_train

    def __post_init__(self):
        if self.latent and len(self.latent) != len(self.unlabeled):
            raise ValueError("latent table must have one entry per unlabeled scan")

    @classmethod
    def from_synthetic(cls, synthetic, n_labeled=None, n_unlabeled=None):
        lab = synthetic.labeled[:n_labeled]
        unl = synthetic.unlabeled[:n_unlabeled]
        return cls([LabeledScan(s, p, np.asarray(c)) for s, p, c in lab],
                   [Scan(s.points, s.name) for s, _ in unl])

    def validate(self, model, tol=1e-6):
        """Labeled correspondences must lie on the canonical surface."""
        index = geometry.TriangleIndex(model.vertices, model.faces)
        for item in self.labeled:
            if len(item.correspondences) != len(item.scan):
                raise ValueError(f"{item.scan.name}: one correspondence per point is required")
            _, d2, _, _ = index.query(item.correspondences)
            if np.sqrt(d2.max(initial=0.0)) > tol:
                raise ValueError(f"{item.scan.name}: correspondences are off the canonical surface")
        return self


# -- helpers ---------------------------------------------------------------------------

def _blocks(fit_offsets):
    return ("pose", "shape", "translation") + (("offsets",) if fit_offsets else ())


def _step_params(params, grads, state, lr, blocks):
    new, state = adam_step(state, {b: getattr(params, b) for b in blocks}, {b: grads[b] for b in blocks}, lr)
    out = params.copy()
    for b in blocks:
        setattr(out, b, new[b])
    return out, state


def _features(points, radius):
    return R.neighborhood_features(points, radius=radius)


def init_regressor(model, config, feature_blocks=()):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    mean, std = (R.feature_statistics(feature_blocks) if len(feature_blocks)
                 else (None, None))
    return R.RegressorParams.init(model.num_parts, rng, config.width, config.depth, config.radius,
                                  mean, std, R.part_centers(model))


def _add_into(acc, grads, scale=1.0):
    for k, v in grads.items():
        acc[k] = acc.get(k, 0.0) + scale * v


# -- warm start ------------------------------------------------------------------------

def warm_start(corpus, regressor, config, log=None):
    """Minimize the supervised correspondence loss on the labeled scans.

    Returns (trained regressor, per-epoch mean loss per point); entry 0 is the
    loss before any update.
    """
    config.validate()
    if not corpus.labeled:
        raise ValueError("warm start needs at least one labeled scan")
    phi = regressor.copy()
    feats = [_features(it.scan.points, phi.radius) for it in corpus.labeled]
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    state = AdamState()
    curve = [_sup_epoch_loss(phi, corpus, feats)]
    for _ in range(config.warmstart_epochs):
        order = rng.permutation(len(corpus.labeled))
        for start in range(0, len(order), config.batch_size):
            acc, count = {}, 0
            for j in order[start:start + config.batch_size]:
                item = corpus.labeled[j]
                p, _, cache = R.forward(phi, feats[j])
                g = config.weights.w_sup * L.supervised_loss_grad(p, item.correspondences)
                _add_into(acc, R.backprop(phi, cache, g))
                count += len(p)
            phi.weights, state = adam_step(state, phi.weights, {k: v / count for k, v in acc.items()},
                                           config.lr_phi)
        curve.append(_sup_epoch_loss(phi, corpus, feats))
        if log is not None:
            log.append({"phase": "warm_start", "epoch": len(curve) - 1, "sup_term": curve[-1]})
    return phi, curve


def _sup_epoch_loss(phi, corpus, feats):
    total, count = 0.0, 0
    for item, f in zip(corpus.labeled, feats):
        p, _, _ = R.forward(phi, f)
        total += L.supervised_loss(p, item.correspondences)
        count += len(p)
    return total / count


# -- per-scan fitting ------------------------------------------------------------------

@dataclass
class FitResult:
    params: bm.ModelParams
    correspondences: np.ndarray | None
    converged: bool
    loss: float
    residual: float
    iterations: int
    history: list = field(default_factory=list)


def scan_residual(model, params, points):
    """RMS distance from scan points to the posed mesh."""
    if len(points) == 0:
        return 0.0
    posed = bm.forward_vertices(model, params)
    _, d2, _, _ = geometry.TriangleIndex(posed, model.faces).query(points)
    return float(np.sqrt(d2.mean()))


def _classical_fit(model, points, x, cfg):
    blocks = _blocks(cfg.fit_offsets)
    state = AdamState()
    w = cfg.weights
    best, best_loss, history = x.copy(), math.inf, []
    for it in range(cfg.iters_classical):
        value, g = L._data_to_model(model, x, points)
        reg, g_reg = L._regularization(x, w.w_pose_prior, w.w_shape_prior, w.w_offset_prior,
                                       w.pose_limit, w.w_pose_limit)
        loss = value + reg
        history.append(loss)
        if not np.isfinite(loss):
            break
        if loss < best_loss:
            best, best_loss = x.copy(), loss
        x, state = _step_params(x, {k: g[k] + g_reg[k] for k in g}, state, cfg.lr_x, blocks)
    return best, None, best_loss, history


def _loop_fit(model, grid, points, x, p, cfg, refine=True):
    blocks = _blocks(cfg.fit_offsets)
    w = cfg.weights
    if w.lambda_sdf is None:
        w = L.auto_balance_lambda(grid, model, x, points, p, w)
    state = AdamState()
    best, best_p, best_loss, history = x.copy(), p.copy(), math.inf, []
    corners = L.corner_data(grid, model, p) if cfg.iters_fixed else None
    for _ in range(cfg.iters_fixed):
        res = L.total_loss_and_gradients(grid, model, x, points, p, None, w, use_d2m=False, corners=corners)
        history.append(res.breakdown.total)
        if res.breakdown.total < best_loss:
            best, best_loss = x.copy(), res.breakdown.total
        x, state = _step_params(x, res.grad_params, state, cfg.lr_x, blocks)
    if refine and cfg.iters_joint:
        x, best_loss = best.copy(), math.inf
        p_state = AdamState()
        for _ in range(cfg.iters_joint):
            res = L.total_loss_and_gradients(grid, model, x, points, p, None, w, use_d2m=True)
            history.append(res.breakdown.total)
            if res.breakdown.total < best_loss:
                best, best_p, best_loss = x.copy(), p.copy(), res.breakdown.total
            x, state = _step_params(x, res.grad_params, state, cfg.lr_x, blocks)
            new_p, p_state = adam_step(p_state, {"p": p}, {"p": res.grad_corr}, cfg.lr_p)
            p = new_p["p"]
    return best, best_p, best_loss, history


def instance_fit(model, scan_points, init=None, mode="loop", grid=None, regressor=None,
                 correspondences=None, config=None, refine=True):
    """Fit model parameters to one scan.

    ``classical``: gradient steps on the scan-to-model distance with closest
    points recomputed every iteration. ``loop``: correspondences from the
    regressor (or ``correspondences``) drive the diffused-model fit, then
    correspondences and parameters are refined jointly with the
    scan-to-model term switched on (skipped when ``refine`` is False).
    Non-convergence is reported through ``FitResult.converged``; the best
    parameters seen are always returned.
    """
    cfg = (config or FitConfig()).validate()
    points = np.atleast_2d(np.asarray(getattr(scan_points, "points", scan_points), dtype=np.float64))
    x = bm.ModelParams.zeros(model) if init is None else init.copy()
    x.check(model)
    if mode == "classical":
        best, best_p, loss, history = _classical_fit(model, points, x, cfg)
    elif mode == "loop":
        if grid is None:
            raise ValueError("loop mode needs a diffused grid")
        if correspondences is None:
            if regressor is None:
                raise ValueError("loop mode needs a regressor or explicit correspondences")
            correspondences, _ = R.predict(regressor, points)
        p = np.array(correspondences, dtype=np.float64).reshape(-1, 3)
        best, best_p, loss, history = _loop_fit(model, grid, points, x, p, cfg, refine)
    else:
        raise ValueError(f"unknown fit mode {mode!r}")
    residual = scan_residual(model, best, points)
    converged = bool(np.isfinite(loss) and residual <= cfg.residual_tol)
    return FitResult(best, best_p, converged, float(loss), residual, len(history), history)


# -- joint training ----------------------------------------------------------------------

@dataclass
class JointState:
    regressor: R.RegressorParams
    latent: list
    log: list


def init_latent(model, grid, corpus, regressor, config, feats=None):
    """Regressor-guided latent codes: a short loop-mode fit per scan."""
    cfg = config.fit_config(iters_fixed=config.latent_init_iters, iters_joint=config.latent_refine_iters)
    out = []
    for j, scan in enumerate(corpus.unlabeled):
        f = feats[j] if feats is not None else _features(scan.points, regressor.radius)
        p, _, _ = R.forward(regressor, f)
        res = instance_fit(model, scan.points, None, "loop", grid, correspondences=p, config=cfg)
        out.append(res.params)
    return out


def joint_train(corpus, regressor, grid, model, config, log=None, checkpoint=None):
    """Simultaneous first-order updates of the regressor and every latent code.

    Unlabeled scans contribute the self-supervised loop loss (plus
    scan-to-model distance for their latent codes); labeled scans are
    replayed with the supervised loss. Returns (regressor, latent table, log).
    Raises TrainingDiverged carrying the last good state when any per-scan
    loss exceeds ``divergence_limit``.
    """
    config.validate()
    log = [] if log is None else log
    phi = regressor.copy()
    feats_l = [_features(it.scan.points, phi.radius) for it in corpus.labeled]
    feats_u = [_features(s.points, phi.radius) for s in corpus.unlabeled]
    latent = ([x.copy() for x in corpus.latent] if corpus.latent
              else init_latent(model, grid, corpus, phi, config, feats_u))
    weights = config.weights
    if weights.lambda_sdf is None and corpus.unlabeled:
        p0, _, _ = R.forward(phi, feats_u[0])
        weights = L.auto_balance_lambda(grid, model, latent[0], corpus.unlabeled[0].points, p0, weights)
    if weights.lambda_sdf is None:
        weights = weights.with_lambda(1.0)
    blocks = _blocks(config.fit_offsets)
    x_states = [AdamState() for _ in latent]
    phi_state = AdamState()
    items = [("l", j) for j in range(len(corpus.labeled))] + [("u", j) for j in range(len(corpus.unlabeled))]
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
    good = JointState(phi.copy(), [x.copy() for x in latent], log)
    for epoch in range(config.joint_epochs):
        order = rng.permutation(len(items)) if items else []
        epoch_rows = []
        for start in range(0, len(order), config.batch_size):
            acc, count = {}, 0
            for idx in order[start:start + config.batch_size]:
                kind, j = items[idx]
                if kind == "l":
                    item = corpus.labeled[j]
                    p, _, cache = R.forward(phi, feats_l[j])
                    sup = L.supervised_loss(p, item.correspondences)
                    g = weights.w_sup * L.supervised_loss_grad(p, item.correspondences)
                    _add_into(acc, R.backprop(phi, cache, g))
                    row = {"scan": item.scan.name, **L.LossBreakdown(sup_term=sup).recompute_total(weights).as_dict()}
                else:
                    scan = corpus.unlabeled[j]
                    p, _, cache = R.forward(phi, feats_u[j])
                    res = L.total_loss_and_gradients(grid, model, latent[j], scan.points, p, None, weights,
                                                     use_d2m=config.use_d2m, regressor=R.Regressor(phi),
                                                     regressor_cache=cache)
                    _add_into(acc, res.grad_phi)
                    latent[j], x_states[j] = _step_params(latent[j], res.grad_params, x_states[j],
                                                          config.lr_x, blocks)
                    row = {"scan": scan.name, **res.breakdown.as_dict()}
                count += len(p)
                if not np.isfinite(row["total"]) or row["total"] > config.divergence_limit:
                    raise TrainingDiverged(f"loss {row['total']} on {row['scan']} at epoch {epoch}", good)
                epoch_rows.append(row)
            phi.weights, phi_state = adam_step(phi_state, phi.weights, {k: v / count for k, v in acc.items()},
                                               config.lr_phi)
        for row in sorted(epoch_rows, key=lambda r: r["scan"]):
            log.append({"phase": "joint", "epoch": epoch + 1, **row})
        good = JointState(phi.copy(), [x.copy() for x in latent], log)
        if checkpoint is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint(epoch + 1, good)
    return phi, latent, log


# -- evaluation ------------------------------------------------------------------------

def evaluate(model, grid, regressor, test, config=None, refine=False, with_s2s=False, seed=0):
    """Fit every test scan in loop mode and compare with its ground truth.

    ``test`` is a list of (Scan, gt ModelParams). With ``refine`` False the
    correspondences stay at the regressor output, so the score reflects the
    regressor alone.
    """
    report = EvalReport(body_height=model.body_height)
    for scan, gt in test:
        res = instance_fit(model, scan.points, None, "loop", grid, regressor, config=config, refine=refine)
        pred = bm.forward_vertices(model, res.params)
        truth = bm.forward_vertices(model, gt)
        s = s2s((pred, model.faces), (truth, model.faces), seed=seed) if with_s2s else None
        report.add(scan.name, v2v(pred, truth), s)
    return report


def correspondence_error(regressor, test):
    """Mean distance between predicted and true canonical correspondences."""
    errs = []
    for scan, _ in test:
        p, _ = R.predict(regressor, scan.points)
        errs.append(np.linalg.norm(p - scan.gt_correspondences, axis=1).mean())
    return float(np.mean(errs))
