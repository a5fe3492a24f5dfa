"""The four training regimes over the shared-representation model.

All regimes iterate the same seed-determined batches of train items, so
configurations that disable a term reduce exactly to the simpler regime
(identical parameter trajectories under the same seed).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses
from .cf import EmbeddingTable
from .data import TRAIN, VAL, ItemCatalog, SplitAssignment
from .guidance import WeightTable
from .metrics import MetricsReport, mean_average_precision
from .models import MTLModel, load_image, model_from_state, model_state

logger = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.5
    omega_cap: float = 5.0
    tau: float = 1.0
    epochs: int = 30
    epochs_aux: int = 15
    batch_size: int = 64
    learning_rate: float = 2e-3
    optimizer: str = "adam"     # adam | sgd; sgd cannot balance the exp-distance
    momentum: float = 0.9       # term against the classification term at any lr
    max_grad_norm: float = 5.0  # exp-distance gradients shatter without a clip
    seed: int = 0
    encoder: str = "desk-small"
    latent_dim: int = 16
    class_weights: Optional[tuple[float, ...]] = None  # derived when absent

    def __post_init__(self):
        if self.alpha < 0:
            raise TrainingError("alpha must be >= 0")
        if self.omega_cap <= 0 or self.tau <= 0:
            raise TrainingError("omega_cap and tau must be positive")

    def class_weight_vector(self) -> np.ndarray:
        if self.class_weights is None:
            raise TrainingError("class weights not derived yet")
        return np.asarray(self.class_weights, dtype=np.float64)


def _with_class_weights(config: LossConfig, catalog: ItemCatalog,
                        split: SplitAssignment) -> LossConfig:
    if config.class_weights is not None:
        return config
    w = losses.class_weights(catalog, split)
    return replace(config, class_weights=tuple(float(v) for v in w))


# ---------------------------------------------------------------------------
# in-memory training set
# ---------------------------------------------------------------------------

@dataclass
class _Bank:
    ids: list[str]
    images: torch.Tensor        # (n, 3, H, W) float32
    labels: torch.Tensor        # (n, N) float32, zeros where unlabeled
    label_mask: torch.Tensor    # (n,) float32
    targets: torch.Tensor       # (n, f) float32 latent targets, zeros if absent
    omega: torch.Tensor         # (n,) float32 effective aux weight
    index: dict[str, int]


def _load_bank(catalog: ItemCatalog, item_ids: list[str],
               embeddings: Optional[EmbeddingTable],
               weights: Optional[WeightTable], latent_dim: int) -> _Bank:
    ids = sorted(item_ids)
    images, labels, mask, targets, omega = [], [], [], [], []
    for item_id in ids:
        record = catalog.record(item_id)
        images.append(load_image(record))
        if record.labeled:
            labels.append(record.labels.astype(np.float32))
            mask.append(1.0)
        else:
            labels.append(np.zeros(catalog.num_classes, dtype=np.float32))
            mask.append(0.0)
        vec = embeddings.get(item_id) if embeddings is not None else None
        if vec is not None and len(vec) != latent_dim:
            raise TrainingError(f"embedding length {len(vec)} != latent_dim {latent_dim}")
        if vec is None:
            targets.append(np.zeros(latent_dim, dtype=np.float32))
            omega.append(0.0)
        else:
            targets.append(vec.astype(np.float32))
            omega.append(weights.get(item_id) if weights is not None else 1.0)
    return _Bank(ids=ids,
                 images=torch.from_numpy(np.stack(images)),
                 labels=torch.from_numpy(np.stack(labels)),
                 label_mask=torch.tensor(mask, dtype=torch.float32),
                 targets=torch.from_numpy(np.stack(targets)),
                 omega=torch.tensor(omega, dtype=torch.float32),
                 index={i: k for k, i in enumerate(ids)})


def _param_checksum(model: MTLModel) -> str:
    digest = hashlib.sha256()
    state = model.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].detach().numpy().tobytes())
    return digest.hexdigest()[:16]


def _val_map(model: MTLModel, bank: Optional[_Bank],
             class_names) -> Optional[MetricsReport]:
    if bank is None or float(bank.label_mask.sum()) == 0:
        return None
    model.eval()
    with torch.no_grad():
        logits, _ = model(bank.images)
        scores = torch.sigmoid(logits).numpy()
    model.train()
    keep = bank.label_mask.numpy() > 0
    ids = [i for i, k in zip(bank.ids, keep) if k]
    return mean_average_precision(ids, scores[keep],
                                  bank.labels.numpy()[keep], class_names)


# ---------------------------------------------------------------------------
# shared loop
# ---------------------------------------------------------------------------

def _run_epochs(model: MTLModel, train_bank: _Bank, val_bank: Optional[_Bank],
                catalog: ItemCatalog, config: LossConfig, epochs: int,
                rng: np.random.Generator, history: list, *,
                alpha: float, aux_mode: str,
                embeddings: Optional[EmbeddingTable] = None,
                select: bool = True, stage: str = "main",
                epoch_offset: int = 0) -> tuple[Optional[dict], float, int]:
    """One training stage; returns (best_state, best_map, best_epoch).

    aux_mode: 'none' (classification only), 'reconstruct' (weighted
    exp-distance to latent targets), 'aux_only' (reconstruction without
    the classification term), or 'triplet'.
    """
    w = torch.from_numpy(config.class_weight_vector().astype(np.float32))
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    elif config.optimizer == "sgd":
        optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                                    momentum=config.momentum)
    else:
        raise TrainingError(f"unknown optimizer {config.optimizer!r}")
    n = len(train_bank.ids)
    use_aux = aux_mode in ("reconstruct", "aux_only") and alpha != 0 \
        and bool((train_bank.omega > 0).any())
    if aux_mode == "aux_only":
        use_aux = bool((train_bank.omega > 0).any())
    best_state, best_map, best_epoch = None, -np.inf, -1
    wasted = int(((train_bank.label_mask == 0) & (train_bank.omega == 0)).sum())
    if wasted:
        logger.info("%d train items contribute to no loss term", wasted)

    # batch-norm cannot train on a single item: fold a trailing batch of
    # one into its predecessor
    bounds = list(range(0, n, config.batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)

    for epoch in range(epochs):
        order = rng.permutation(n)
        triplet_map = {}
        if aux_mode == "triplet":
            trip = losses.make_triplets(embeddings, epoch_seed=config.seed * 100003 + epoch)
            triplet_map = {a: (p, ng) for a, p, ng in trip}
        epoch_main, epoch_aux, seen = 0.0, 0.0, 0
        for start, stop in zip(bounds[:-1], bounds[1:]):
            idx = torch.from_numpy(order[start:stop].copy())
            images = train_bank.images[idx]
            logits, q_hat = model(images)
            y_hat = torch.sigmoid(logits)
            main_terms = losses.loss_main(y_hat, train_bank.labels[idx], w) \
                * train_bank.label_mask[idx]
            if aux_mode == "aux_only":
                main = torch.zeros((), dtype=main_terms.dtype)
            else:
                main = main_terms.sum() / idx.shape[0]
            aux = torch.zeros((), dtype=main_terms.dtype)
            if use_aux:
                om = train_bank.omega[idx]
                active = om > 0
                if bool(active.any()):
                    recon = losses.loss_cf_reconstruct(
                        train_bank.targets[idx][active], q_hat[active])
                    capped = torch.clamp(om[active], max=config.omega_cap)
                    aux = (capped * recon).sum() / idx.shape[0]
            elif aux_mode == "triplet":
                anchors = [k for k in range(idx.shape[0])
                           if train_bank.ids[int(idx[k])] in triplet_map]
                # batch norm needs >= 2 rows in the positive/negative forwards
                if len(anchors) >= 2:
                    pos_idx, neg_idx = [], []
                    for k in anchors:
                        p, ng = triplet_map[train_bank.ids[int(idx[k])]]
                        pos_idx.append(train_bank.index[p])
                        neg_idx.append(train_bank.index[ng])
                    _, q_p = model(train_bank.images[torch.tensor(pos_idx)])
                    _, q_n = model(train_bank.images[torch.tensor(neg_idx)])
                    hinge = losses.loss_triplet(q_hat[torch.tensor(anchors)],
                                                q_p, q_n, config.tau)
                    aux = hinge.mean()
            if aux_mode == "aux_only":
                # the zero terms keep a graph alive in batches without
                # any embedded item, contributing exactly nothing
                batch_loss = aux + 0.0 * (logits.sum() + q_hat.sum())
            elif aux_mode == "triplet" or use_aux:
                batch_loss = main + alpha * aux
            else:
                batch_loss = main
            optimizer.zero_grad()
            batch_loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optimizer.step()
            epoch_main += float(main.detach()) * idx.shape[0]
            epoch_aux += float(aux.detach()) * idx.shape[0]
            seen += idx.shape[0]

        report = _val_map(model, val_bank, catalog.class_names)
        val = report.map if report is not None else float("nan")
        history.append({"epoch": epoch_offset + epoch + 1, "stage": stage,
                        "loss_main": epoch_main / seen, "loss_aux": epoch_aux / seen,
                        "val_map": val, "checksum": _param_checksum(model)})
        if select and report is not None and report.map > best_map:
            best_map, best_epoch = report.map, epoch_offset + epoch + 1
            best_state = model_state(model)
    if select and best_state is None:
        best_state, best_map, best_epoch = model_state(model), float("nan"), epochs
    return best_state, best_map, best_epoch


def _setup(catalog: ItemCatalog, split: SplitAssignment, config: LossConfig,
           embeddings: Optional[EmbeddingTable],
           weights: Optional[WeightTable]) -> tuple[LossConfig, MTLModel, _Bank, Optional[_Bank]]:
    config = _with_class_weights(config, catalog, split)
    torch.manual_seed(config.seed)
    latent = embeddings.f if embeddings is not None and len(embeddings) else config.latent_dim
    model = MTLModel(catalog.num_classes, latent, config.encoder)
    train_bank = _load_bank(catalog, split.train_items, embeddings, weights, latent)
    val_ids = [i for i in split.val_items if catalog.record(i).labeled]
    val_bank = _load_bank(catalog, val_ids, None, None, latent) if val_ids else None
    return config, model, train_bank, val_bank


def _finish(model: MTLModel, state: dict, history: list) -> MTLModel:
    best = model_from_state(state)
    best.training_history = history
    return best


def train_image_only(catalog: ItemCatalog, split: SplitAssignment,
                     config: LossConfig) -> MTLModel:
    """Classification loss only; the reconstruction head stays at its init."""
    if not any(r.labeled and split.roles.get(r.item_id) == TRAIN
               for r in catalog.records):
        raise TrainingError("no labeled train items")
    config, model, train_bank, val_bank = _setup(catalog, split, config, None, None)
    rng = np.random.default_rng([config.seed, 505])
    history: list = []
    state, _, _ = _run_epochs(model, train_bank, val_bank, catalog, config,
                              config.epochs, rng, history,
                              alpha=0.0, aux_mode="none")
    return _finish(model, state, history)


def train_mtl_reconstruct(catalog: ItemCatalog, split: SplitAssignment,
                          embeddings: EmbeddingTable, weights: WeightTable,
                          config: LossConfig) -> MTLModel:
    """Joint classification + weighted latent reconstruction; model selection
    tracks validation mAP of the classification task only."""
    if len(embeddings) == 0:
        logger.warning("empty embedding table: degenerating to image-only training")
        return train_image_only(catalog, split, config)
    config, model, train_bank, val_bank = _setup(catalog, split, config,
                                                 embeddings, weights)
    rng = np.random.default_rng([config.seed, 505])
    history: list = []
    state, _, _ = _run_epochs(model, train_bank, val_bank, catalog, config,
                              config.epochs, rng, history,
                              alpha=config.alpha, aux_mode="reconstruct")
    return _finish(model, state, history)


def train_contrastive(catalog: ItemCatalog, split: SplitAssignment,
                      embeddings: EmbeddingTable, config: LossConfig) -> MTLModel:
    """Classification plus a triplet hinge on predicted latent vectors;
    triplets are regenerated from the stored vectors every epoch."""
    embeddings = embeddings.restrict(split.train_items)
    if len(embeddings) < 3:
        raise TrainingError("need at least 3 embedded train items for triplets")
    config, model, train_bank, val_bank = _setup(catalog, split, config,
                                                 embeddings, None)
    rng = np.random.default_rng([config.seed, 505])
    history: list = []
    state, _, _ = _run_epochs(model, train_bank, val_bank, catalog, config,
                              config.epochs, rng, history,
                              alpha=config.alpha, aux_mode="triplet",
                              embeddings=embeddings)
    return _finish(model, state, history)


def train_sequential(catalog: ItemCatalog, split: SplitAssignment,
                     embeddings: EmbeddingTable, config: LossConfig) -> MTLModel:
    """Reconstruction-only warm-up, then classification-only fine-tuning;
    checkpoint selection happens in the second stage only."""
    config, model, train_bank, val_bank = _setup(catalog, split, config,
                                                 embeddings, None)
    history: list = []
    if config.epochs_aux > 0:
        rng_aux = np.random.default_rng([config.seed, 506])
        _run_epochs(model, train_bank, val_bank, catalog, config,
                    config.epochs_aux, rng_aux, history,
                    alpha=1.0, aux_mode="aux_only", select=False, stage="aux")
    rng = np.random.default_rng([config.seed, 505])
    state, _, _ = _run_epochs(model, train_bank, val_bank, catalog, config,
                              config.epochs, rng, history,
                              alpha=0.0, aux_mode="none", stage="main",
                              epoch_offset=config.epochs_aux)
    return _finish(model, state, history)


# ---------------------------------------------------------------------------
# evaluation and logging helpers
# ---------------------------------------------------------------------------

def evaluate_model_map(model: MTLModel, catalog: ItemCatalog,
                       item_ids: list[str]) -> MetricsReport:
    """Test-time mAP of the classification head over labeled items."""
    ids = sorted(i for i in item_ids if catalog.record(i).labeled)
    if not ids:
        raise TrainingError("no labeled items to evaluate")
    images = torch.from_numpy(np.stack([load_image(catalog.record(i)) for i in ids]))
    model.eval()
    with torch.no_grad():
        logits, _ = model(images)
        scores = torch.sigmoid(logits).numpy()
    labels = np.stack([catalog.record(i).labels for i in ids])
    return mean_average_precision(ids, scores, labels, catalog.class_names)


def save_training_log(history: list, path: str | Path) -> None:
    """CSV with one row per epoch: epoch,loss_main,loss_aux,val_mAP."""
    lines = ["epoch,loss_main,loss_aux,val_mAP"]
    for row in history:
        lines.append(f"{row['epoch']},{row['loss_main']:.9g},"
                     f"{row['loss_aux']:.9g},{row['val_map']:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
