"""Command-line workflows: synth, precompute, train, fit, eval.

Run as ``python -m loopfit <command> --help``. Exit codes: 0 success,
2 configuration error, 3 data error, 4 non-convergence (best-so-far output
is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import body_model as bm
from . import geometry
from . import io
from . import losses as L
from . import regressor as R
from . import sdf_diffusion as sd
from . import synth
from . import trainer as T
from .metrics import EvalReport, s2s, v2v
from .scan import Scan, normalization_for

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED = 0, 2, 3, 4

log = logging.getLogger("loopfit")


class DataError(ValueError):
    pass


# -- configuration -----------------------------------------------------------------------

def _section(cls, d, name):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise io.ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    return d


@dataclass
class RunConfig:
    """Everything a command needs besides its file arguments."""

    paths: dict = field(default_factory=dict)
    synth: synth.SynthSpec = field(default_factory=synth.SynthSpec)
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    fit: T.FitConfig = field(default_factory=T.FitConfig)
    grid: dict = field(default_factory=lambda: {"resolution": 64, "bounds": [-0.5, 0.5]})
    seed: int = 0
    verbosity: str = "info"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        allowed = {"paths", "synth", "train", "fit", "grid", "seed", "verbosity"}
        unknown = set(d) - allowed
        if unknown:
            raise io.ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            out = cls(seed=int(d.get("seed", 0)), verbosity=str(d.get("verbosity", "info")))
            out.paths = dict(d.get("paths", {}))
            if "synth" in d:
                s = _section(synth.SynthSpec, dict(d["synth"]), "synth")
                if "max_pose_angle_deg" in d["synth"]:
                    raise io.ConfigError("use max_pose_angle in radians")
                out.synth = synth.SynthSpec(**s)
            out.synth.validate()
            if "train" in d:
                out.train = T.TrainConfig.from_dict(_section(T.TrainConfig, dict(d["train"]), "train"))
            if "fit" in d:
                f = _section(T.FitConfig, dict(d["fit"]), "fit")
                if "weights" in f:
                    base = T.default_weights().to_dict()
                    base.update(f["weights"])
                    f["weights"] = L.LossWeights.from_dict(base)
                out.fit = T.FitConfig(**f)
            out.fit.validate()
            grid = dict(out.grid)
            grid.update(d.get("grid", {}))
            out.grid = grid
            if int(grid["resolution"]) < 2:
                raise io.ConfigError("grid.resolution must be >= 2")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, io.ConfigError):
                raise
            raise io.ConfigError(str(exc)) from exc
        if out.verbosity not in ("debug", "info", "warning", "error"):
            raise io.ConfigError(f"unknown verbosity {out.verbosity!r}")
        return out

    def check_paths(self):
        for key, value in self.paths.items():
            if not Path(value).exists():
                raise io.ConfigError(f"paths.{key} does not exist: {value}")
        return self

    def to_dict(self):
        return {"paths": self.paths, "synth": {f.name: getattr(self.synth, f.name) for f in fields(self.synth)},
                "train": self.train.to_dict(),
                "fit": {**{f.name: getattr(self.fit, f.name) for f in fields(self.fit)},
                        "weights": self.fit.weights.to_dict()},
                "grid": self.grid, "seed": self.seed, "verbosity": self.verbosity}


def _load_run_config(args):
    raw = io.load_config(args.config) if getattr(args, "config", None) else {}
    cfg = RunConfig.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.train = replace(cfg.train, seed=cfg.seed)
    cfg.synth = replace(cfg.synth, seed=cfg.seed)
    if not getattr(args, "verbose", False):
        logging.getLogger().setLevel(cfg.verbosity.upper())
    return cfg.check_paths()


def _require(path, what):
    if path is None or not Path(path).exists():
        raise io.ConfigError(f"{what} not found: {path}")
    return Path(path)


# -- corpus files ----------------------------------------------------------------------------

def _write_params(path, params, extra=None):
    doc = {"params": params.to_json()}
    doc.update(extra or {})
    io.write_json(path, doc)


def _read_params(path):
    doc = io.read_json(path)
    try:
        return bm.ModelParams.from_json(doc["params"]), doc
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed parameter file ({exc})") from exc


def load_corpus_dir(root):
    """Read a corpus written by ``synth``: (model, Corpus, test list of (Scan, params or None))."""
    root = Path(root)
    manifest = io.read_json(_require(root / "manifest.json", "corpus manifest"))
    model = bm.CanonicalModel.load(root / manifest.get("model", "model.json"))
    corpus = T.Corpus()
    for name in manifest.get("labeled", []):
        pts = io.load_points(root / "scans" / f"{name}.ply")
        params, doc = _read_params(root / "gt" / f"{name}.json")
        corr = np.asarray(doc["correspondences"], dtype=np.float64)
        corpus.labeled.append(T.LabeledScan(Scan(pts, name, corr), params, corr))
    for name in manifest.get("unlabeled", []):
        corpus.unlabeled.append(Scan(io.load_points(root / "scans" / f"{name}.ply"), name))
    test = []
    for name in manifest.get("test", []):
        gt_path = root / "gt" / f"{name}.json"
        params = _read_params(gt_path)[0] if gt_path.exists() else None
        test.append((Scan(io.load_points(root / "scans" / f"{name}.ply"), name), params))
    return model, corpus, test, manifest


# -- commands ----------------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_run_config(args)
    spec = cfg.synth
    overrides = {k: getattr(args, k) for k in ("noise_sigma", "dropout", "points_per_scan")
                 if getattr(args, k) is not None}
    spec = replace(spec, **overrides)
    spec.validate()
    out = Path(args.out)
    model = synth.make_toy_model(spec)
    corpus = synth.make_corpus(model, spec, args.labeled, args.unlabeled, args.test, seed=cfg.seed)
    prov = io.provenance(cfg.to_dict(), cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    io.atomic_write(out / "model.json", _model_json(model))
    splits = {"labeled": [], "unlabeled": [], "test": []}
    for scan, params, corr in corpus.labeled:
        io.save_points(out / "scans" / f"{scan.name}.ply", scan.points)
        _write_params(out / "gt" / f"{scan.name}.json", params,
                      {"correspondences": np.asarray(corr).tolist(), "split": "labeled", "provenance": prov})
        splits["labeled"].append(scan.name)
    for scan, _ in corpus.unlabeled:
        io.save_points(out / "scans" / f"{scan.name}.ply", scan.points)
        splits["unlabeled"].append(scan.name)
    for scan, params in corpus.test:
        io.save_points(out / "scans" / f"{scan.name}.ply", scan.points)
        _write_params(out / "gt" / f"{scan.name}.json", params, {"split": "test", "provenance": prov})
        splits["test"].append(scan.name)
    io.write_json(out / "manifest.json", {"model": "model.json", **splits, "provenance": prov})
    log.info("wrote %d labeled, %d unlabeled, %d test scans to %s",
             len(splits["labeled"]), len(splits["unlabeled"]), len(splits["test"]), out)
    return EXIT_OK


def _model_json(model):
    return json.dumps(model.to_dict())


def cmd_precompute(args):
    cfg = _load_run_config(args)
    model = bm.CanonicalModel.load(_require(args.model, "model file"))
    res = args.resolution or int(cfg.grid["resolution"])
    bounds = args.bounds or cfg.grid["bounds"]
    grid = sd.build_grid(model, bounds, res)
    io.save_grid(args.out, grid, io.provenance({**cfg.to_dict(), "resolution": res, "bounds": list(bounds)},
                                               cfg.seed))
    log.info("wrote %s (%d^3 voxels, %d channels)", args.out, res, len(grid.channels))
    return EXIT_OK


def cmd_train(args):
    cfg = _load_run_config(args)
    model, corpus, _, _ = load_corpus_dir(_require(args.corpus, "corpus directory"))
    grid = io.load_grid(_require(args.grid, "grid file"))
    corpus.validate(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = io.provenance(cfg.to_dict(), cfg.seed)
    tc = cfg.train
    feats = [R.neighborhood_features(it.scan.points, radius=tc.radius) for it in corpus.labeled]
    phi = T.init_regressor(model, tc, feats)
    rows = []
    if corpus.labeled and tc.warmstart_epochs:
        phi, _ = T.warm_start(corpus, phi, tc, log=rows)

    def checkpoint(epoch, state):
        io.save_regressor(out / "checkpoints" / f"regressor_{epoch:04d}.lfc", state.regressor, prov)

    status = EXIT_OK
    try:
        phi, latent, _ = T.joint_train(corpus, phi, grid, model, tc, log=rows, checkpoint=checkpoint)
    except T.TrainingDiverged as exc:
        log.error("training diverged: %s; writing last good state", exc)
        phi, latent, status = exc.checkpoint.regressor, exc.checkpoint.latent, EXIT_NONCONVERGED
    io.save_regressor(out / "regressor.lfc", phi, prov)
    for scan, x in zip(corpus.unlabeled, latent):
        _write_params(out / "latent" / f"{scan.name}.json", x, {"provenance": prov})
    io.write_csv(out / "metrics.csv", rows)
    io.write_json(out / "run.json", {"config": cfg.to_dict(), "provenance": prov,
                                     "labeled": len(corpus.labeled), "unlabeled": len(corpus.unlabeled)})
    return status


def cmd_fit(args):
    cfg = _load_run_config(args)
    model = bm.CanonicalModel.load(_require(args.model, "model file"))
    scan_path = _require(args.scan, "scan")
    scans = sorted(scan_path.glob("*.ply")) + sorted(scan_path.glob("*.obj")) if scan_path.is_dir() else [scan_path]
    if args.names:
        keep = set(args.names.split(","))
        scans = [s for s in scans if s.stem in keep]
    grid = phi = None
    if args.mode == "loop":
        grid = io.load_grid(_require(args.grid, "grid file"))
        phi = io.load_regressor(_require(args.regressor, "regressor file"))
    prov = io.provenance(cfg.to_dict(), cfg.seed)
    out = Path(args.out)
    status = EXIT_OK
    for path in scans:
        points = io.load_points(path)
        if len(points) == 0:
            raise DataError(f"{path}: scan has no points")
        norm = normalization_for(points) if args.normalize else None
        pts = norm.apply(points) if norm else points
        res = T.instance_fit(model, pts, None, args.mode, grid, phi, config=cfg.fit)
        verts = bm.forward_vertices(model, res.params)
        if norm:
            verts = norm.invert(verts)
        target = out / f"{path.stem}.json" if (scan_path.is_dir() or out.suffix != ".json") else out
        _write_params(target, res.params, {
            "converged": res.converged, "residual": res.residual, "loss": res.loss,
            "iterations": res.iterations, "mode": args.mode, "vertices": verts.tolist(),
            "normalization": None if norm is None else {"center": norm.center.tolist(), "scale": norm.scale},
            "provenance": prov})
        if not res.converged:
            log.warning("%s: fit did not converge (residual %.4g); best-so-far written", path.name, res.residual)
            status = EXIT_NONCONVERGED
    return status


def cmd_eval(args):
    cfg = _load_run_config(args)
    model = bm.CanonicalModel.load(_require(args.model, "model file"))
    pred_dir, gt_dir = _require(args.pred, "prediction directory"), _require(args.gt, "ground-truth directory")
    report = EvalReport(body_height=model.body_height)
    names = sorted(p.stem for p in pred_dir.glob("*.json") if (gt_dir / p.name).exists())
    if not names:
        raise DataError("no predictions with matching ground truth")
    for name in names:
        params, doc = _read_params(pred_dir / f"{name}.json")
        pred = np.asarray(doc["vertices"]) if "vertices" in doc else bm.forward_vertices(model, params)
        gt_params, _ = _read_params(gt_dir / f"{name}.json")
        truth = bm.forward_vertices(model, gt_params)
        report.add(name, v2v(pred, truth), s2s((pred, model.faces), (truth, model.faces), seed=cfg.seed))
    report.metadata = {"provenance": io.provenance(cfg.to_dict(), cfg.seed), "label": args.label}
    io.atomic_write(args.out, report.to_json() + "\n")
    if args.csv:
        row = {"supervision": args.label, "v2v": report.v2v_mean, "v2v_percent": report.v2v_percent,
               "s2s": report.s2s_mean}
        io.append_csv(args.csv, row) if args.append else io.write_csv(args.csv, [row])
    log.info("v2v %.5f (%.3f%% of height), s2s %.5f over %d scans",
             report.v2v_mean, report.v2v_percent, report.s2s_mean, len(names))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="loopfit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="generate a toy model and a synthetic scan corpus")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--labeled", type=int, default=5)
    s.add_argument("--unlabeled", type=int, default=25)
    s.add_argument("--test", type=int, default=10)
    s.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    s.add_argument("--dropout", type=float)
    s.add_argument("--points-per-scan", dest="points_per_scan", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("precompute", help="build the diffused SDF grid for a model")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--res", "--resolution", dest="resolution", type=int)
    s.add_argument("--bounds", type=float, nargs=2)
    s.set_defaults(func=cmd_precompute)

    s = sub.add_parser("train", help="warm start and joint training on a corpus")
    common(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit", help="fit the model to one scan or a directory of scans")
    common(s)
    s.add_argument("--scan", required=True)
    s.add_argument("--mode", choices=("loop", "classical"), default="loop")
    s.add_argument("--model", required=True)
    s.add_argument("--grid")
    s.add_argument("--regressor")
    s.add_argument("--out", required=True)
    s.add_argument("--names", help="comma-separated scan names to fit from a directory")
    s.add_argument("--normalize", action="store_true", help="center and scale the scan into the grid volume")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="score fitted parameters against ground truth")
    common(s)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.add_argument("--append", action="store_true")
    s.add_argument("--label", default="run")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except io.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (io.ParseError, io.ContainerError, geometry.MeshError, DataError, bm.ModelError,
            bm.ParameterShapeError, sd.SignUndefinedError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
