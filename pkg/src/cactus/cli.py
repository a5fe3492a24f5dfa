"""Stage-wise command line: prepare | train-cf | weights | train | evaluate | sweep.

Commands communicate only through files under the output root, so stages
can be rerun or parallelized across seeds independently. Every artifact
embeds the hash of the config that produced it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cf, guidance, report, sweep, training
from .config import ConfigError, ExperimentConfig, load_config
from .data import (DataError, load_catalog, load_interactions, load_split,
                   mask_heldout_interactions, save_catalog_manifest,
                   save_interactions, save_split, split_digest, split_interactions,
                   split_items)
from .guidance import GuidanceError
from .metrics import MetricsError, bootstrap_ci, evaluate_auc
from .models import model_from_state
from .persist import load_checkpoint, save_checkpoint
from .synthetic import generate_synthetic
from .training import TrainingError

logger = logging.getLogger(__name__)

VALIDATION_ERRORS = (ConfigError, DataError, GuidanceError, TrainingError,
                     MetricsError, cf.CFError)


class Workspace:
    """Fixed artifact layout under one output root."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.data = self.root / "data"
        self.images = self.data / "images"
        self.cf_dir = self.root / "cf"
        self.weights_dir = self.root / "weights"
        self.train_dir = self.root / "train"
        self.eval_dir = self.root / "eval"
        self.sweep_dir = self.root / "sweep"

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise DataError(f"missing artifact {path}; run `cactus {produced_by}` first")
        return path


def _load_prepared(config: ExperimentConfig, ws: Workspace):
    meta = json.loads(ws.require(ws.data / "meta.json", "prepare").read_text())
    catalog = load_catalog(ws.data / "manifest.tsv", meta["image_dir"])
    split = load_split(ws.require(ws.data / "splits.json", "prepare"))
    cf_train = load_interactions(ws.require(ws.data / "cf_train.tsv", "prepare"))
    cf_test = load_interactions(ws.require(ws.data / "cf_test.tsv", "prepare"))
    return catalog, split, cf_train, cf_test


def cmd_prepare(config: ExperimentConfig, ws: Workspace) -> int:
    ws.data.mkdir(parents=True, exist_ok=True)
    if config.dataset.mode == "synthetic":
        catalog, matrix = generate_synthetic(config.dataset.synthetic, ws.images)
        image_dir = str(ws.images)
    elif config.dataset.mode == "files":
        catalog = load_catalog(config.dataset.manifest, config.dataset.images)
        matrix = load_interactions(config.dataset.interactions)
        image_dir = config.dataset.images
    else:
        raise ConfigError(f"unknown dataset mode {config.dataset.mode!r}")
    save_catalog_manifest(catalog, ws.data / "manifest.tsv")
    save_interactions(matrix, ws.data / "interactions.tsv")

    split = split_items(catalog, config.dataset.holdout_ratio, config.seed)
    save_split(split, ws.data / "splits.json", config_hash=config.digest())
    masked = mask_heldout_interactions(matrix, split)
    cf_train, cf_test = split_interactions(
        masked, config.dataset.interaction_test_ratio, config.seed)
    save_interactions(cf_train, ws.data / "cf_train.tsv")
    save_interactions(cf_test, ws.data / "cf_test.tsv")
    (ws.data / "meta.json").write_text(json.dumps({
        "image_dir": image_dir, "config_hash": config.digest(),
        "split_hash": split_digest(split)}, indent=1, sort_keys=True) + "\n")
    print(f"prepared {len(catalog.records)} items, "
          f"{matrix.num_entries} interactions -> {ws.data}")
    return 0


def cmd_train_cf(config: ExperimentConfig, ws: Workspace) -> int:
    catalog, split, cf_train, cf_test = _load_prepared(config, ws)
    ws.cf_dir.mkdir(parents=True, exist_ok=True)
    hyper = config.cf.hyper()

    trainers = {"popularity": lambda: cf.train_popularity(cf_train),
                "bpr": lambda: cf.train_bpr(cf_train, hyper, seed=config.seed),
                "vae": lambda: cf.train_vae(cf_train, hyper, seed=config.seed)}
    if config.cf.model not in trainers:
        raise ConfigError(f"unknown cf model {config.cf.model!r}")
    if config.cf.model == "popularity":
        raise ConfigError("popularity model has no latent representation; "
                          "choose bpr or vae to produce embeddings")

    aucs = {}
    for kind in ("popularity", config.cf.model):
        model = trainers[kind]()
        mean_auc, per_user = evaluate_auc(model, cf_train, cf_test,
                                          return_per_user=True)
        lo, hi = bootstrap_ci(list(per_user.values()),
                              lambda recs: float(np.mean(recs)),
                              B=config.eval.bootstrap_B,
                              level=config.eval.level, seed=config.seed)
        aucs[kind] = {"auc": mean_auc,
                      "ci": {"level": config.eval.level, "lo": lo, "hi": hi,
                             "B": config.eval.bootstrap_B}}
        if kind == config.cf.model and kind != "popularity":
            table = cf.extract_item_embeddings(model)
            cf.save_embeddings(table, ws.cf_dir / "embeddings.tsv")
            save_checkpoint({"model": model.state(), "config_hash": config.digest(),
                             "split_hash": split_digest(split)},
                            ws.cf_dir / "model.ckpt")
    doc = {"auc": aucs, "config_hash": config.digest(),
           "split_hash": split_digest(split), "seed": config.seed}
    (ws.cf_dir / "results_cf.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"AUC {config.cf.model}={aucs[config.cf.model]['auc']:.4f} "
          f"popularity={aucs['popularity']['auc']:.4f} -> {ws.cf_dir}")
    return 0


def cmd_weights(config: ExperimentConfig, ws: Workspace) -> int:
    catalog, split, cf_train, _ = _load_prepared(config, ws)
    table = cf.load_embeddings(ws.require(ws.cf_dir / "embeddings.tsv", "train-cf"))
    ws.weights_dir.mkdir(parents=True, exist_ok=True)
    scheme = config.guidance.scheme
    if scheme == "uniform":
        weights = guidance.weight_uniform(list(split.train_items), table,
                                          omega_cap=config.guidance.omega_cap)
    elif scheme == "interaction":
        weights = guidance.weight_interaction(cf_train,
                                              omega_cap=config.guidance.omega_cap)
    elif scheme == "loss":
        probe = guidance.train_cf2label(table, catalog, split,
                                        config.guidance.probe_hyper(),
                                        seed=config.seed)
        save_checkpoint({"model": probe.state(), "config_hash": config.digest()},
                        ws.weights_dir / "probe.ckpt")
        weights = guidance.weight_lossbased(probe, table, catalog,
                                            omega_cap=config.guidance.omega_cap)
    else:
        raise ConfigError(f"unknown weighting scheme {scheme!r}")
    guidance.save_weights(weights, ws.weights_dir / "weights.tsv",
                          config_hash=config.digest())
    positive = sum(1 for w in weights.weights.values() if w > 0)
    print(f"{scheme} weights for {positive} items -> {ws.weights_dir}")
    return 0


def _method_name(config: ExperimentConfig) -> str:
    if config.mtl.regime == "mtl_reconstruct":
        return f"mtl_reconstruct_{config.guidance.scheme}"
    return config.mtl.regime


def cmd_train(config: ExperimentConfig, ws: Workspace) -> int:
    catalog, split, _, _ = _load_prepared(config, ws)
    ws.train_dir.mkdir(parents=True, exist_ok=True)
    regime = config.mtl.regime
    loss_config = config.loss_config()

    needs_embeddings = regime in ("mtl_reconstruct", "contrastive", "sequential")
    table = None
    if needs_embeddings:
        table = cf.load_embeddings(ws.require(ws.cf_dir / "embeddings.tsv", "train-cf"))
        loss_config = replace(loss_config, latent_dim=table.f)

    start = time.perf_counter()
    if regime == "image_only":
        model = training.train_image_only(catalog, split, loss_config)
    elif regime == "mtl_reconstruct":
        weights = guidance.load_weights(ws.require(ws.weights_dir / "weights.tsv",
                                                   "weights"))
        model = training.train_mtl_reconstruct(catalog, split, table, weights,
                                               loss_config)
    elif regime == "contrastive":
        model = training.train_contrastive(catalog, split, table, loss_config)
    elif regime == "sequential":
        model = training.train_sequential(catalog, split, table, loss_config)
    else:
        raise ConfigError(f"unknown regime {regime!r}")
    elapsed = time.perf_counter() - start

    method = _method_name(config)
    from .models import model_state
    save_checkpoint({"model": model_state(model), "method": method,
                     "config_hash": config.digest(),
                     "split_hash": split_digest(split), "seed": config.seed},
                    ws.train_dir / f"model_{method}.ckpt")
    training.save_training_log(model.training_history,
                               ws.train_dir / f"training_log_{method}.csv")
    (ws.train_dir / f"timing_{method}.json").write_text(
        json.dumps({"wall_clock_seconds": elapsed}) + "\n")
    print(f"trained {method} in {elapsed:.1f}s -> {ws.train_dir}")
    return 0


def cmd_evaluate(config: ExperimentConfig, ws: Workspace,
                 checkpoints: list[str] | None = None) -> int:
    catalog, split, _, _ = _load_prepared(config, ws)
    paths = [Path(p) for p in checkpoints] if checkpoints else \
        sorted(ws.train_dir.glob("model_*.ckpt"))
    if not paths:
        raise DataError("no checkpoints to evaluate; run `cactus train` first")
    reports = []
    split_hashes = set()
    for path in paths:
        state = load_checkpoint(path)
        split_hashes.add(state["split_hash"])
        if len(split_hashes) > 1:
            raise ConfigError("refusing to compare checkpoints from different "
                              f"splits: {sorted(split_hashes)}")
        model = model_from_state(state["model"])
        rep = sweep._test_map_with_ci(model, catalog, split.test_items,
                                      config.eval.bootstrap_B, config.eval.level,
                                      seed=config.seed)
        rep.method = state["method"]
        rep.seed = state["seed"]
        rep.config_hash = state["config_hash"]
        rep.split_hash = state["split_hash"]
        reports.append(rep)
        print(f"{state['method']}: test mAP {rep.map:.4f} "
              f"[{rep.ci['lo']:.4f}, {rep.ci['hi']:.4f}]")
    ws.eval_dir.mkdir(parents=True, exist_ok=True)
    report.render_report(reports, ws.eval_dir, baseline=config.eval.baseline,
                         experiment="evaluate", dataset=config.dataset.mode)
    print(f"report -> {ws.eval_dir}")
    return 0


def cmd_sweep(config: ExperimentConfig, ws: Workspace) -> int:
    catalog, split, _, _ = _load_prepared(config, ws)
    matrix = load_interactions(ws.data / "interactions.tsv")
    ws.sweep_dir.mkdir(parents=True, exist_ok=True)
    reports = sweep.run_label_ratio_sweep(
        catalog, matrix, split,
        ratios=config.eval.ratios, seeds=config.eval.sweep_seeds,
        cf_hyper=config.cf.hyper(), loss_config=config.loss_config(),
        bootstrap_B=config.eval.bootstrap_B, level=config.eval.level,
        interaction_test_ratio=config.dataset.interaction_test_ratio,
        config_hash=config.digest(), out_dir=ws.sweep_dir)
    report.render_report(reports, ws.sweep_dir, baseline=sweep.IMAGE_ONLY,
                         experiment="label_ratio_sweep",
                         dataset=config.dataset.mode)
    summary = sweep.summarize_sweep(reports)
    (ws.sweep_dir / "summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"sweep over ratios {list(config.eval.ratios)} -> {ws.sweep_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cactus",
        description="collaborative-signal guided image categorization pipeline")
    parser.add_argument("command",
                        choices=["prepare", "train-cf", "weights", "train",
                                 "evaluate", "sweep"])
    parser.add_argument("checkpoints", nargs="*",
                        help="evaluate: explicit checkpoint paths")
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None,
                        help="output root (default: $CACTUS_OUT or ./cactus_out)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_root = args.out or os.environ.get("CACTUS_OUT") or "cactus_out"
    ws = Workspace(out_root)
    try:
        config = load_config(args.config, seed_override=args.seed)
        handler = {"prepare": cmd_prepare, "train-cf": cmd_train_cf,
                   "weights": cmd_weights, "train": cmd_train,
                   "sweep": cmd_sweep}.get(args.command)
        if args.command == "evaluate":
            return cmd_evaluate(config, ws, checkpoints=args.checkpoints or None)
        return handler(config, ws)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.exception("command failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
