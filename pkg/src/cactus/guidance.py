"""Confidence weighting of latent item vectors.

Holds the probe model that predicts category labels from a latent CF
vector alone (used both to validate that the vectors carry category
signal and to derive loss-based confidence weights), and the three
per-item weighting schemes that scale the auxiliary reconstruction loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .cf import EmbeddingTable
from .data import TRAIN, InteractionMatrix, ItemCatalog, SplitAssignment

logger = logging.getLogger(__name__)

EPS_PROB = 1e-7


class GuidanceError(ValueError):
    pass


@dataclass(frozen=True)
class CF2LabelHyper:
    hidden: Optional[int] = None   # None = 2*f
    hidden_layers: int = 1
    epochs: int = 200
    learning_rate: float = 5e-3
    batch_size: int = 64

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class CF2LabelModel:
    """MLP probe: latent vector (length f) -> per-class probabilities (length N).

    Rectified-linear hidden layers, sigmoid outputs, one output per class.
    """

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray]], seed: int,
                 hyper: CF2LabelHyper):
        self.layers = layers  # [(W, b), ...], last layer is the sigmoid head
        self.seed = seed
        self.hyper = hyper

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    def forward(self, Q: np.ndarray) -> np.ndarray:
        """Batch of latent vectors -> batch of probabilities in (0,1).

        Saturated sigmoids are nudged off the interval endpoints so that
        outputs stay strictly inside (0,1) in floating point.
        """
        a = np.asarray(Q, dtype=np.float64)
        for W, b in self.layers[:-1]:
            a = np.maximum(a @ W + b, 0.0)
        W, b = self.layers[-1]
        logits = a @ W + b
        return np.clip(1.0 / (1.0 + np.exp(-logits)), EPS_PROB, 1.0 - EPS_PROB)

    def state(self) -> dict:
        return {"kind": "cf2label", "seed": self.seed, "hyper": asdict(self.hyper),
                "layers": [(W, b) for W, b in self.layers]}


def predict_labels(model: CF2LabelModel, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != model.input_dim:
        raise GuidanceError(
            f"expected vector of length {model.input_dim}, got shape {q.shape}")
    return model.forward(q[None, :])[0]


def train_cf2label(embeddings: EmbeddingTable, catalog: ItemCatalog,
                   split: SplitAssignment, hyper: CF2LabelHyper = CF2LabelHyper(),
                   seed: int = 0) -> CF2LabelModel:
    """Fit the probe on train items that have both a latent vector and labels."""
    train_ids = [r.item_id for r in catalog.records
                 if r.labeled and split.roles.get(r.item_id) == TRAIN
                 and r.item_id in embeddings]
    if len(train_ids) < 2:
        raise GuidanceError("need at least 2 labeled train items with embeddings")
    Q = np.stack([embeddings.get(i) for i in train_ids])
    Y = np.stack([catalog.record(i).labels for i in train_ids]).astype(np.float64)
    f, N = Q.shape[1], catalog.num_classes
    hidden = hyper.hidden if hyper.hidden is not None else 2 * f

    rng = np.random.default_rng([seed, 303])
    dims = [f] + [hidden] * hyper.hidden_layers + [N]
    layers = []
    for din, dout in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (din + dout))
        layers.append((rng.uniform(-lim, lim, size=(din, dout)), np.zeros(dout)))

    adam_m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    adam_v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    t = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(len(train_ids))
        for start in range(0, order.size, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            x, y = Q[idx], Y[idx]
            # forward with cached activations
            acts = [x]
            for W, b in layers[:-1]:
                acts.append(np.maximum(acts[-1] @ W + b, 0.0))
            W, b = layers[-1]
            p = 1.0 / (1.0 + np.exp(-(acts[-1] @ W + b)))
            # mean-over-batch, mean-over-classes binary cross-entropy
            dlogits = (p - y) / (idx.size * N)
            grads = []
            delta = dlogits
            for li in range(len(layers) - 1, -1, -1):
                Wl, _ = layers[li]
                grads.append((acts[li].T @ delta, delta.sum(axis=0)))
                if li > 0:
                    delta = (delta @ Wl.T) * (acts[li] > 0)
            grads.reverse()
            t += 1
            for li in range(len(layers)):
                Wl, bl = layers[li]
                for slot, (param, grad) in enumerate(zip((Wl, bl), grads[li])):
                    m = adam_m[li][slot]
                    v = adam_v[li][slot]
                    m *= 0.9
                    m += 0.1 * grad
                    v *= 0.999
                    v += 0.001 * grad ** 2
                    mhat = m / (1 - 0.9 ** t)
                    vhat = v / (1 - 0.999 ** t)
                    param -= hyper.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
    model = CF2LabelModel(layers, seed, hyper)

    val_ids = [r.item_id for r in catalog.records
               if r.labeled and split.roles.get(r.item_id) == "val"
               and r.item_id in embeddings]
    if val_ids:
        from .metrics import map_from_scores
        scores = model.forward(np.stack([embeddings.get(i) for i in val_ids]))
        labels = np.stack([catalog.record(i).labels for i in val_ids])
        report = map_from_scores(val_ids, scores, labels)
        logger.info("probe validation mAP: %.4f", report.map)
    else:
        logger.debug("probe: no validation items with embeddings, mAP not logged")
    return model


def cf2label_from_state(state: dict) -> CF2LabelModel:
    hyper = CF2LabelHyper(**state["hyper"])
    return CF2LabelModel([(W, b) for W, b in state["layers"]], state["seed"], hyper)


# ---------------------------------------------------------------------------
# weighting schemes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightTable:
    weights: dict[str, float]  # item_id -> omega >= 0, mean 1 over positives
    scheme: str                # uniform | interaction | loss
    omega_cap: float

    def get(self, item_id: str) -> float:
        return self.weights.get(item_id, 0.0)


def _normalize(raw: dict[str, float], scheme: str, omega_cap: float) -> WeightTable:
    """Scale so positive weights average to 1; the cap applies at loss time."""
    for item_id, w in raw.items():
        if not math.isfinite(w) or w < 0:
            raise GuidanceError(f"invalid raw weight {w!r} for {item_id!r}")
    positives = [w for w in raw.values() if w > 0]
    if positives:
        mean = float(np.mean(positives))
        raw = {i: (w / mean if w > 0 else 0.0) for i, w in raw.items()}
    return WeightTable(weights=raw, scheme=scheme, omega_cap=omega_cap)


def weight_uniform(items: list[str], embeddings: EmbeddingTable,
                   omega_cap: float = 5.0) -> WeightTable:
    raw = {i: (1.0 if i in embeddings else 0.0) for i in items}
    return _normalize(raw, "uniform", omega_cap)


def weight_interaction(matrix: InteractionMatrix,
                       omega_cap: float = 5.0) -> WeightTable:
    """sqrt of the item's train interaction count, then mean-1 normalized."""
    counts = matrix.item_counts()
    raw = {item: float(np.sqrt(c)) for item, c in zip(matrix.items, counts)}
    return _normalize(raw, "interaction", omega_cap)


def positive_label_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood over the item's positive labels."""
    pos = np.flatnonzero(labels)
    if pos.size == 0:
        raise GuidanceError("item has no positive labels")
    clipped = np.clip(probs[pos], EPS_PROB, 1.0 - EPS_PROB)
    return float(np.mean(-np.log(clipped)))


def weight_lossbased(model: CF2LabelModel, embeddings: EmbeddingTable,
                     catalog: ItemCatalog, omega_cap: float = 5.0) -> WeightTable:
    """1 / (probe's mean NLL on positive labels): confident vectors weigh more.

    Items without labels or without an embedding get weight 0.
    """
    raw: dict[str, float] = {}
    for record in catalog.records:
        q = embeddings.get(record.item_id)
        if q is None:
            continue
        if not record.labeled:
            raw[record.item_id] = 0.0
            continue
        if record.labels.sum() == 0:
            logger.warning("item %s is labeled but has no positives; weight 0",
                           record.item_id)
            raw[record.item_id] = 0.0
            continue
        nll = positive_label_nll(model.forward(q[None, :])[0], record.labels)
        raw[record.item_id] = 1.0 / max(nll, EPS_PROB)
    return _normalize(raw, "loss", omega_cap)


# ---------------------------------------------------------------------------
# pre-study: category prediction from latent vectors alone
# ---------------------------------------------------------------------------

def run_prestudy(seed: int = 0, synthetic_config=None,
                 cf_hyper=None, probe_hyper: CF2LabelHyper = CF2LabelHyper(),
                 holdout_ratio: float = 0.3, bootstrap_B: int = 500,
                 level: float = 0.95) -> dict:
    """How much category signal do the latent vectors carry by themselves?

    Trains the CF model on the full interaction matrix (the probe rates
    vector informativeness, so held-out items keep their interactions
    here, unlike the cold-start pipeline), fits the probe on train
    items, and scores test items against the class-popularity baseline.
    """
    from dataclasses import replace

    from . import cf as cf_mod
    from .data import split_items
    from .metrics import (bootstrap_ci, class_popularity_scores,
                          mean_average_precision)
    from .synthetic import SyntheticConfig, generate_synthetic

    syn = synthetic_config or SyntheticConfig()
    syn = replace(syn, seed=seed)
    catalog, matrix = generate_synthetic(syn)  # no images needed
    split = split_items(catalog, holdout_ratio, seed)
    hyper = cf_hyper if cf_hyper is not None else cf_mod.CFHyper(f=16)
    vae = cf_mod.train_vae(matrix, hyper, seed=seed)
    table = cf_mod.extract_item_embeddings(vae)
    probe = train_cf2label(table, catalog, split, probe_hyper, seed=seed)

    test_ids = sorted(i for i in split.test_items
                      if catalog.record(i).labeled and i in table)
    labels = np.stack([catalog.record(i).labels for i in test_ids])
    probe_scores = probe.forward(np.stack([table.get(i) for i in test_ids]))
    prior = class_popularity_scores(catalog, split)
    base_scores = np.tile(prior, (len(test_ids), 1))

    out = {"seed": seed, "num_test": len(test_ids)}
    for name, scores in (("probe", probe_scores), ("baseline", base_scores)):
        rep = mean_average_precision(test_ids, scores, labels, catalog.class_names)
        records = list(zip(test_ids, scores, labels))

        def metric(recs):
            ids = [r[0] for r in recs]
            return mean_average_precision(ids, np.stack([r[1] for r in recs]),
                                          np.stack([r[2] for r in recs]),
                                          catalog.class_names).map

        lo, hi = bootstrap_ci(records, metric, B=bootstrap_B, level=level,
                              seed=seed)
        out[f"{name}_map"] = rep.map
        out[f"{name}_ci"] = (lo, hi)
    return out


def save_weights(table: WeightTable, path: str | Path, config_hash: str = "") -> None:
    """`item_id<TAB>omega<TAB>scheme` rows; a leading # line carries provenance."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# omega_cap={table.omega_cap:.9g}\tconfig_hash={config_hash}\n")
        for item_id in sorted(table.weights):
            fh.write(f"{item_id}\t{table.weights[item_id]:.9g}\t{table.scheme}\n")


def load_weights(path: str | Path) -> WeightTable:
    path = Path(path)
    weights: dict[str, float] = {}
    scheme = "uniform"
    omega_cap = 5.0
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                for field in line[1:].strip().split("\t"):
                    if field.startswith("omega_cap="):
                        omega_cap = float(field.split("=", 1)[1])
                continue
            item_id, omega, scheme = line.split("\t")
            weights[item_id] = float(omega)
    return WeightTable(weights=weights, scheme=scheme, omega_cap=omega_cap)
