"""Command-line entry point: one subcommand per pipeline stage, plus ``experiment``."""

import argparse
import json
import logging
import math
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .bayes import PosteriorSamples
from .config import ExperimentConfig, load_config
from .datasets import (
    augment_with_ood,
    read_dataset_csv,
    read_points_csv,
    write_dataset_csv,
    write_points_csv,
)
from .errors import BacounError, ConfigError, NumericalError
from .flow import RealNvpFlow
from .nn import Mlp
from . import pipeline as pl

log = logging.getLogger("bacoun")

STAGES = ("gen-data", "train-flow", "gen-boundary", "train-classifier", "infer",
          "decompose", "report", "pathology", "outliers")


def _tool_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


class Run:
    """Output directory plus config; tracks artifacts and stage timings for the manifest."""

    def __init__(self, config, out):
        self.config = config
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()

    def _load_manifest(self):
        fresh = {"config_digest": self.config.digest(), "seed": self.config.seed,
                 "tool_version": _tool_version(), "stage_ms": {}, "artifacts": []}
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
            if old.get("config_digest") == fresh["config_digest"]:
                return old
        return fresh

    def path(self, name):
        return self.out / name

    def need(self, name):
        p = self.out / name
        if not p.exists():
            raise ConfigError(f"missing input {p}; run the stage that produces it first")
        return p

    def record(self, stage, elapsed, names):
        self.manifest["stage_ms"][stage] = round(elapsed * 1000.0, 3)
        self.manifest["artifacts"] = sorted(set(self.manifest["artifacts"]) | set(names))
        write_json(self.manifest_path, self.manifest)

    # loaders shared by stages
    def class_count(self):
        ds = self.config.dataset
        if ds.kind == "gmm":
            return len(ds.means)
        if ds.kind == "moons":
            return 2
        return len(ds.positive_classes)

    def train(self):
        return read_dataset_csv(self.need("data_train.csv"), self.class_count())

    def test(self):
        return read_dataset_csv(self.need("data_test.csv"), self.class_count())

    def flow(self):
        return RealNvpFlow.from_json(self.need("flow.json").read_text())

    def boundary(self):
        return read_points_csv(self.need("boundary.csv"))

    def mlp(self, name):
        return Mlp.from_json(self.need(name).read_text())

    def posterior(self, name):
        return PosteriorSamples.from_json(self.need(name).read_text())

    def bacoun(self):
        return pl.TrainedBacoun(self.mlp("classifier.json"), self.posterior("posterior.json"),
                                self.flow(), self.boundary())


# stages -------------------------------------------------------------------------

def stage_gen_data(run):
    train, test = pl.make_dataset(run.config)
    write_dataset_csv(run.path("data_train.csv"), train)
    write_dataset_csv(run.path("data_test.csv"), test)
    run.path("config.json").write_text(run.config.canonical())
    log.info("data: %d train / %d test points", train.n, test.n)
    return ["config.json", "data_train.csv", "data_test.csv"]


def stage_train_flow(run):
    flow, history = pl.fit_flow(run.config, run.train().x)
    run.path("flow.json").write_text(flow.to_json())
    log.info("flow: nll %.4f -> %.4f", history[0], history[-1])
    return ["flow.json"]


def stage_gen_boundary(run):
    pts = pl.make_boundary(run.config, run.flow())
    write_points_csv(run.path("boundary.csv"), pts)
    log.info("boundary: %d points", len(pts))
    return ["boundary.csv"]


def stage_train_classifier(run):
    data = augment_with_ood(run.train(), run.boundary())
    mlp, history = pl.fit_classifier(run.config, data)
    run.path("classifier.json").write_text(mlp.to_json())
    if history:
        log.info("classifier: final loss %.4f", history[-1])
    return ["classifier.json"]


def stage_infer(run):
    data = augment_with_ood(run.train(), run.boundary())
    post = pl.fit_posterior(run.config, run.mlp("classifier.json"), data)
    run.path("posterior.json").write_text(post.to_json())
    log.info("posterior: %d draws, acceptance %.3f", len(post), post.acceptance_rate)
    return ["posterior.json"]


def _write_uncertainty(path, rep):
    with Path(path).open("w") as fh:
        fh.write("point_id,total,aleatoric,epistemic\n")
        for i, (t, a, e) in enumerate(zip(rep.total, rep.aleatoric, rep.epistemic)):
            fh.write(f"{i},{float(t)!r},{float(a)!r},{float(e)!r}\n")


def stage_decompose(run):
    rep = run.bacoun().uncertainty(run.test().x)
    _write_uncertainty(run.path("uncertainty.csv"), rep)
    return ["uncertainty.csv"]


def _baselines(run, train):
    """Train the NLM and MC-Dropout baselines enabled in the config."""
    bc = run.config.baselines
    models, written = {}, []
    if bc.nlm:
        nlm = pl.train_nlm_baseline(run.config, train)
        run.path("nlm_classifier.json").write_text(nlm.classifier.to_json())
        run.path("nlm_posterior.json").write_text(nlm.posterior.to_json())
        models["nlm"] = nlm
        written += ["nlm_classifier.json", "nlm_posterior.json"]
    if bc.mc_dropout:
        mcd = pl.train_mc_dropout(run.config, train)
        run.path("mcd_classifier.json").write_text(mcd.classifier.to_json())
        models["mc_dropout"] = mcd
        written.append("mcd_classifier.json")
    return models, written


def _write_grid(path, rows):
    with Path(path).open("w") as fh:
        fh.write("x0,x1,total,aleatoric,epistemic\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


def stage_report(run):
    cfg = run.config
    train, test = run.train(), run.test()
    baselines, written = _baselines(run, train)
    models = {"bacoun": run.bacoun(), **baselines}
    regions = pl.make_regions(cfg, test)
    reports, aucs = {}, {}
    for name, model in models.items():
        with pl._stage("report"):
            rep = pl.region_report(model, regions, test)
            probs = model.predict_proba(test.x)
            aucs[name] = {
                "class_fit_auc": pl.class_fit_auc(probs, test.y, test.class_count),
                "ood_auc": pl.ood_auc(model, test.x, regions["Out"].x),
            }
        reports[name] = rep.to_dict()
        log.info("%s: acc %.3f epistemic %s", name, rep.accuracy,
                 {k: round(v, 4) for k, v in rep.epistemic.items()})
    write_json(run.path("region_report.json"), reports)
    write_json(run.path("auc.json"), aucs)
    written += ["region_report.json", "auc.json"]
    if test.dim == 2:
        g = cfg.grid
        for name, model in models.items():
            fname = "entropy_grid.csv" if name == "bacoun" else f"entropy_grid_{name}.csv"
            with pl._stage("report"):
                _write_grid(run.path(fname), pl.entropy_grid(model, g.low, g.high, g.resolution))
            written.append(fname)
    return written


def stage_pathology(run):
    train, test = run.train(), run.test()
    if run.path("nlm_classifier.json").exists():
        nlm = run.mlp("nlm_classifier.json")
    else:
        nlm, _ = pl.fit_classifier(run.config, train, stream="nlm")
    res = pl.pathology_experiment(run.config, train, test, nlm, run.mlp("classifier.json"),
                                  run.flow())
    write_json(run.path("pathology.json"), res)
    log.info("pathology: %s", res)
    return ["pathology.json"]


def stage_outliers(run):
    res = pl.outlier_experiment(run.config)
    write_json(run.path("outliers.json"), res)
    log.info("outliers: recall %.3f", res["recall"])
    return ["outliers.json"]


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train-flow": stage_train_flow,
    "gen-boundary": stage_gen_boundary,
    "train-classifier": stage_train_classifier,
    "infer": stage_infer,
    "decompose": stage_decompose,
    "report": stage_report,
    "pathology": stage_pathology,
    "outliers": stage_outliers,
}


def run_stage(run, name):
    t0 = time.perf_counter()
    log.info("== %s", name)
    written = STAGE_FUNCS[name](run)
    run.record(name, time.perf_counter() - t0, written)
    return written


def experiment_stages(config):
    stages = [s for s in STAGES if s != "outliers"]
    if not config.pathology.enabled:
        stages.remove("pathology")
    if config.outliers.enabled:
        stages.append("outliers")
    return stages


def run_experiment(config, out):
    run = Run(config, out)
    for name in experiment_stages(config):
        run_stage(run, name)
    return run.manifest


# argument handling ---------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--quiet", action="store_true", help="only log warnings")
    parser = argparse.ArgumentParser(prog="bacoun", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("experiment",):
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args):
    if args.config is not None:
        cfg = load_config(args.config)
    elif (args.out / "config.json").exists():
        cfg = load_config(args.out / "config.json")
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "experiment":
            run_experiment(cfg, args.out)
        else:
            run_stage(Run(cfg, args.out), args.command)
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, (NumericalError, FloatingPointError)) else 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (BacounError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
