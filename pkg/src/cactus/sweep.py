"""Label-paucity experiments: retrain with a fraction of the labels and
compare the image-only baseline against joint training, on a fixed test set."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import cf, guidance, training
from .data import (InteractionMatrix, ItemCatalog, SplitAssignment, drop_labels,
                   mask_heldout_interactions, split_digest, split_interactions)
from .metrics import MetricsReport, bootstrap_ci, mean_average_precision
from .training import LossConfig

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.1, 0.25, 0.5, 0.75, 1.0)

IMAGE_ONLY = "image_only"
MTL_UNIFORM = "mtl_reconstruct_uniform"


class SweepError(RuntimeError):
    def __init__(self, message: str, manifest: dict):
        super().__init__(message)
        self.manifest = manifest


def _test_map_with_ci(model, catalog: ItemCatalog, test_ids: list[str],
                      B: int, level: float, seed: int) -> MetricsReport:
    import torch

    from .models import load_image
    ids = sorted(i for i in test_ids if catalog.record(i).labeled)
    images = torch.from_numpy(np.stack([load_image(catalog.record(i)) for i in ids]))
    model.eval()
    with torch.no_grad():
        logits, _ = model(images)
        scores = torch.sigmoid(logits).numpy()
    labels = np.stack([catalog.record(i).labels for i in ids])
    report = mean_average_precision(ids, scores, labels, catalog.class_names)
    records = list(zip(ids, scores, labels))

    def metric(recs):
        r_ids = [r[0] for r in recs]
        r_scores = np.stack([r[1] for r in recs])
        r_labels = np.stack([r[2] for r in recs])
        return mean_average_precision(r_ids, r_scores, r_labels,
                                      catalog.class_names).map

    lo, hi = bootstrap_ci(records, metric, B=B, level=level, seed=seed)
    report.ci = {"level": level, "lo": lo, "hi": hi, "B": B}
    return report


def run_label_ratio_sweep(catalog: ItemCatalog, matrix: InteractionMatrix,
                          split: SplitAssignment,
                          ratios: Sequence[float] = DEFAULT_RATIOS,
                          seeds: Sequence[int] = (0, 1, 2, 3, 4),
                          cf_hyper: cf.CFHyper = cf.CFHyper(f=16),
                          loss_config: LossConfig = LossConfig(),
                          bootstrap_B: int = 500, level: float = 0.95,
                          interaction_test_ratio: float = 0.2,
                          config_hash: str = "",
                          out_dir: Optional[str | Path] = None
                          ) -> list[MetricsReport]:
    """For every (ratio, seed) pair, drop labels, train both methods on the
    same data and evaluate on the identical untouched test set.

    Weighting is forced to uniform: the loss-based scheme needs exactly
    the labels the sweep removes. A failed run aborts the sweep, leaving
    a partial-results manifest.
    """
    if any(not 0.0 < r <= 1.0 for r in ratios):
        raise ValueError("ratios must lie in (0, 1]")
    masked = mask_heldout_interactions(matrix, split)
    shash = split_digest(split)
    reports: list[MetricsReport] = []
    manifest: dict = {"completed": [], "failed": None, "split_hash": shash}
    embeddings_by_seed: dict[int, cf.EmbeddingTable] = {}
    try:
        for seed in seeds:
            cf_train, _ = split_interactions(masked, interaction_test_ratio, seed)
            vae = cf.train_vae(cf_train, cf_hyper, seed=seed)
            embeddings_by_seed[seed] = cf.extract_item_embeddings(vae)
            weights = guidance.weight_uniform(list(split.train_items),
                                              embeddings_by_seed[seed],
                                              omega_cap=loss_config.omega_cap)
            for ratio in sorted(ratios):
                started = time.perf_counter()
                reduced = drop_labels(catalog, ratio, seed, split)
                cfg = replace(loss_config, seed=seed, class_weights=None,
                              latent_dim=embeddings_by_seed[seed].f)
                base = training.train_image_only(reduced, split, cfg)
                joint = training.train_mtl_reconstruct(reduced, split,
                                                       embeddings_by_seed[seed],
                                                       weights, cfg)
                for method, model in ((IMAGE_ONLY, base), (MTL_UNIFORM, joint)):
                    report = _test_map_with_ci(model, reduced, split.test_items,
                                               bootstrap_B, level,
                                               seed=seed * 1000 + int(ratio * 100))
                    report.method = method
                    report.seed = seed
                    report.label_ratio = ratio
                    report.config_hash = config_hash
                    report.split_hash = shash
                    report.wall_clock_seconds = time.perf_counter() - started
                    reports.append(report)
                base_map = reports[-2].map
                reports[-1].relative_improvement = (reports[-1].map - base_map) / base_map
                manifest["completed"].append({"seed": seed, "ratio": ratio})
                logger.info("sweep seed=%d ratio=%.2f: %s=%.4f %s=%.4f", seed, ratio,
                            IMAGE_ONLY, base_map, MTL_UNIFORM, reports[-1].map)
    except Exception as exc:
        manifest["failed"] = {"error": f"{type(exc).__name__}: {exc}"}
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "sweep_manifest.json").write_text(
                json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        raise SweepError(f"sweep aborted: {exc}", manifest) from exc
    return reports


def summarize_sweep(reports: list[MetricsReport]) -> dict:
    """Mean mAP per (method, ratio) over seeds, plus mean relative improvement."""
    summary: dict = {}
    ratios = sorted({r.label_ratio for r in reports})
    for method in sorted({r.method for r in reports}):
        rows = {}
        for ratio in ratios:
            sel = [r for r in reports if r.method == method and r.label_ratio == ratio]
            rows[ratio] = {
                "mean_map": float(np.mean([r.map for r in sel])),
                "mean_lo": float(np.mean([r.ci["lo"] for r in sel if r.ci])),
                "mean_hi": float(np.mean([r.ci["hi"] for r in sel if r.ci])),
                "seeds": sorted(r.seed for r in sel),
            }
            improvements = [r.relative_improvement for r in sel
                            if r.relative_improvement is not None]
            if improvements:
                rows[ratio]["mean_relative_improvement"] = float(np.mean(improvements))
        summary[method] = rows
    return summary
