"""Reusable synthetic experiments: supervision sweeps on a fixed corpus."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import regressor as R
from . import synth
from . import trainer as T


@dataclass
class SweepResult:
    n_labeled: int
    n_unlabeled: int
    seed: int
    v2v_percent: float
    correspondence_error: float


def standard_corpus(model, seed, n_labeled=10, n_unlabeled=50, n_test=10, spec=None):
    spec = replace(spec or synth.SynthSpec(), seed=seed)
    return synth.make_corpus(model, spec, n_labeled, n_unlabeled, n_test, seed=seed)


def warm_started(model, synthetic, n_labeled, config):
    """Regressor after warm start on the first ``n_labeled`` labeled scans (untrained if 0)."""
    corpus = T.Corpus.from_synthetic(synthetic, n_labeled, 0)
    feats = [R.neighborhood_features(it.scan.points, radius=config.radius) for it in corpus.labeled]
    phi = T.init_regressor(model, config, feats)
    if n_labeled:
        phi, _ = T.warm_start(corpus, phi, config)
    return phi


def supervision_run(model, grid, synthetic, n_labeled, n_unlabeled, config, phi=None, latent=None):
    """Warm start (unless ``phi`` is given), joint training, then test evaluation.

    Test scores use fixed regressor correspondences, so they measure the
    learned correspondence map rather than the per-scan refinement.
    """
    if phi is None:
        phi = warm_started(model, synthetic, n_labeled, config)
    corpus = T.Corpus.from_synthetic(synthetic, n_labeled, n_unlabeled)
    if latent is not None:
        corpus.latent = [x.copy() for x in latent[:n_unlabeled]]
    phi, _, _ = T.joint_train(corpus, phi, grid, model, config)
    report = T.evaluate(model, grid, phi, synthetic.test)
    return SweepResult(n_labeled, n_unlabeled, config.seed, report.v2v_percent,
                       T.correspondence_error(phi, synthetic.test))


def seed_average(results, key):
    """Mean of ``v2v_percent`` over seeds for every value of ``key``."""
    groups = {}
    for r in results:
        groups.setdefault(getattr(r, key), []).append(r.v2v_percent)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}
