"""Loss functions for the two-headed classifier and its training regimes.

All losses accept torch tensors (any float dtype) and reduce over the
last dimension only, so the same code serves per-item calls and batched
training. Latent-vector reconstruction uses exp(L1 + L2) of the error,
confidence-scaled and capped; the contrastive alternative scores
triplets of predicted vectors with a hinge margin.
"""

from __future__ import annotations

import numpy as np
import torch

from .cf import EmbeddingTable
from .data import TRAIN, ItemCatalog, SplitAssignment

EPS_PROB = 1e-7
EXP_CAP = 700.0      # exp(710) overflows float64
EXP_CAP_F32 = 80.0   # exp(89) overflows float32
NORM_FLOOR = 1e-24   # keeps the L2 gradient finite at zero error


class LossError(ValueError):
    pass


def class_weights(catalog: ItemCatalog, split: SplitAssignment) -> np.ndarray:
    """Inverse-frequency class weights from labeled train items, scaled so
    the classes that occur average to weight 1; absent classes get 0 and
    are thereby masked out of the classification loss."""
    counts = np.zeros(catalog.num_classes, dtype=np.float64)
    for r in catalog.records:
        if r.labeled and split.roles.get(r.item_id) == TRAIN:
            counts += r.labels
    present = counts > 0
    if not present.any():
        raise LossError("no labels")
    raw = np.zeros_like(counts)
    raw[present] = 1.0 / counts[present]
    scale = present.sum() / raw[present].sum()
    return raw * scale


def loss_main(y_hat: torch.Tensor, y: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Class-weighted binary cross-entropy, minimized; the weight scales
    both the positive and the negative term of each class."""
    if y_hat.shape[-1] != y.shape[-1] or y_hat.shape[-1] != w.shape[-1]:
        raise LossError("y_hat, y and w must agree on the class dimension")
    p = torch.clamp(y_hat, EPS_PROB, 1.0 - EPS_PROB)
    ll = y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)
    return -(w * ll).sum(dim=-1)


def loss_cf_reconstruct(q: torch.Tensor, q_hat: torch.Tensor) -> torch.Tensor:
    """exp(Manhattan + Euclidean distance); >= 1, equal to 1 iff q == q_hat.

    The exponent is capped at 700 with the overflow reported additively,
    so the value stays finite and the gradient keeps its direction.
    """
    if q.shape[-1] != q_hat.shape[-1]:
        raise LossError("q and q_hat must have the same length")
    d = q_hat - q
    l1 = d.abs().sum(dim=-1)
    l2 = torch.sqrt(torch.clamp(torch.sum(d * d, dim=-1), min=NORM_FLOOR))
    s = l1 + l2
    cap = EXP_CAP if s.dtype == torch.float64 else EXP_CAP_F32
    s_capped = torch.clamp(s, max=cap)
    return torch.exp(s_capped) + (s - s_capped)


def loss_aux(q: torch.Tensor, q_hat: torch.Tensor, omega: float | torch.Tensor,
             omega_cap: float) -> torch.Tensor:
    """Confidence-capped reconstruction term: min(omega, cap) * exp-distance."""
    if omega_cap <= 0:
        raise LossError("omega cap must be positive")
    omega_t = torch.as_tensor(omega, dtype=q.dtype if torch.is_tensor(q) else None)
    if (omega_t < 0).any():
        raise LossError("omega must be >= 0")
    return torch.clamp(omega_t, max=omega_cap) * loss_cf_reconstruct(q, q_hat)


def loss_mtl(y_hat, y, q_hat, q, omega: float, config) -> torch.Tensor:
    """Per-item total: classification term (when labeled) plus
    alpha * auxiliary term (when an embedding with positive weight exists).
    Items with neither contribute exactly zero."""
    total = None
    if y is not None:
        w = torch.as_tensor(config.class_weight_vector(), dtype=y_hat.dtype)
        total = loss_main(y_hat, y, w)
    if q is not None and omega > 0 and config.alpha != 0:
        aux = config.alpha * loss_aux(q, q_hat, omega, config.omega_cap)
        total = aux if total is None else total + aux
    if total is None:
        return torch.zeros((), dtype=y_hat.dtype if torch.is_tensor(y_hat) else torch.float64)
    return total


def loss_triplet(q_hat_a: torch.Tensor, q_hat_p: torch.Tensor,
                 q_hat_n: torch.Tensor, tau: float) -> torch.Tensor:
    """Hinge on predicted vectors: max(L2(a,p) - L2(a,n) + tau, 0)."""
    if tau <= 0:
        raise LossError("triplet margin tau must be positive")
    if not (q_hat_a.shape[-1] == q_hat_p.shape[-1] == q_hat_n.shape[-1]):
        raise LossError("triplet vectors must have equal length")

    def _l2(a, b):
        d = a - b
        return torch.sqrt(torch.clamp(torch.sum(d * d, dim=-1), min=NORM_FLOOR))

    return torch.clamp(_l2(q_hat_a, q_hat_p) - _l2(q_hat_a, q_hat_n) + tau, min=0.0)


def make_triplets(embeddings: EmbeddingTable, epoch_seed: int
                  ) -> list[tuple[str, str, str]]:
    """(anchor, positive, negative) ids: every embedded item anchors once,
    the positive is its nearest neighbour in the stored vectors (ties to
    the smallest item id), the negative is uniform over the rest."""
    if len(embeddings) < 3:
        raise LossError("need at least 3 embedded items for triplets")
    order = np.argsort(embeddings.item_ids)
    ids = [embeddings.item_ids[k] for k in order]
    V = embeddings.vectors[order]
    sq = np.sum(V * V, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (V @ V.T)
    np.fill_diagonal(d2, np.inf)
    pos = np.argmin(d2, axis=1)  # first minimum = smallest id among ties
    rng = np.random.default_rng([epoch_seed, 606])
    triplets = []
    n = len(ids)
    for a in range(n):
        while True:
            neg = int(rng.integers(0, n))
            if neg != a and neg != pos[a]:
                break
        triplets.append((ids[a], ids[int(pos[a])], ids[neg]))
    return triplets
