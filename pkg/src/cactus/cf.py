"""Phase-1 collaborative filtering: popularity, pairwise-ranking MF, and a
multinomial variational autoencoder with item bias; plus extraction of
fixed-size per-item latent vectors for downstream supervision."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import InteractionMatrix

logger = logging.getLogger(__name__)


class CFError(ValueError):
    pass


@dataclass(frozen=True)
class CFHyper:
    f: int = 64
    learning_rate: float = 0.05
    epochs: int = 30
    regularization: float = 0.002
    batch_size: int = 256
    vae_hidden: Optional[int] = None   # None = 2*f
    vae_kl_cap: float = 0.2
    vae_learning_rate: float = 1e-3
    bpr_negatives: int = 1

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# embedding table
# ---------------------------------------------------------------------------

class EmbeddingTable:
    """item_id -> latent vector of fixed length f, with provenance."""

    def __init__(self, item_ids: list[str], vectors: np.ndarray, provenance: dict):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(item_ids):
            raise CFError("vectors must be (num_items, f)")
        if not np.all(np.isfinite(vectors)):
            raise CFError("embedding vectors must be finite")
        self.item_ids = list(item_ids)
        self.vectors = vectors
        self.provenance = dict(provenance)
        self._index = {i: k for k, i in enumerate(self.item_ids)}

    @property
    def f(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def get(self, item_id: str) -> Optional[np.ndarray]:
        k = self._index.get(item_id)
        return None if k is None else self.vectors[k]

    def restrict(self, item_ids) -> "EmbeddingTable":
        """Sub-table covering only the given ids (those present here)."""
        keep = [i for i in item_ids if i in self._index]
        rows = np.array([self._index[i] for i in keep], dtype=np.int64)
        return EmbeddingTable(keep, self.vectors[rows] if keep else
                              np.empty((0, self.f)), self.provenance)

    def provenance_hash(self) -> str:
        blob = json.dumps(self.provenance, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Write `f<TAB>num_items<TAB>provenance_hash` header then one row per item
    with 9 significant digits (stable under write -> read -> write)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{table.f}\t{len(table)}\t{table.provenance_hash()}\n")
        for item_id, vec in zip(table.item_ids, table.vectors):
            vals = "\t".join(f"{v:.9g}" for v in vec)
            fh.write(f"{item_id}\t{vals}\n")


def load_embeddings(path: str | Path) -> EmbeddingTable:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) != 3:
            raise CFError(f"{path}: bad embeddings header")
        f, n, phash = int(header[0]), int(header[1]), header[2]
        ids, rows = [], []
        for line in fh:
            fields = line.rstrip("\n").split("\t")
            if len(fields) != f + 1:
                raise CFError(f"{path}: row for {fields[0]!r} has wrong width")
            ids.append(fields[0])
            rows.append([float(v) for v in fields[1:]])
    if len(ids) != n:
        raise CFError(f"{path}: expected {n} rows, found {len(ids)}")
    return EmbeddingTable(ids, np.array(rows, dtype=np.float64), {"hash": phash})


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class PopularityModel:
    """Scores every item by its interaction count, identically for all users."""

    kind = "popularity"

    def __init__(self, matrix: InteractionMatrix):
        self.users = matrix.users
        self.items = matrix.items
        self.user_index = dict(matrix.user_index)
        self.counts = matrix.item_counts().astype(np.float64)
        self.seed = 0

    def score_user(self, user_id: str) -> np.ndarray:
        if user_id not in self.user_index:
            raise CFError(f"unknown user {user_id!r}")
        return self.counts.copy()

    def state(self) -> dict:
        return {"kind": self.kind, "users": self.users, "items": self.items,
                "counts": self.counts}


class BPRModel:
    kind = "bpr"

    def __init__(self, users, items, P, Q, bias, seed, hyper: CFHyper,
                 trained_items: np.ndarray):
        self.users = tuple(users)
        self.items = tuple(items)
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.P = P
        self.Q = Q
        self.bias = bias
        self.seed = seed
        self.hyper = hyper
        self.trained_items = trained_items  # bool mask: had >=1 train interaction

    def score_user(self, user_id: str) -> np.ndarray:
        if user_id not in self.user_index:
            raise CFError(f"unknown user {user_id!r}")
        return self.P[self.user_index[user_id]] @ self.Q.T + self.bias

    def state(self) -> dict:
        return {"kind": self.kind, "users": self.users, "items": self.items,
                "P": self.P, "Q": self.Q, "bias": self.bias, "seed": self.seed,
                "hyper": asdict(self.hyper), "trained_items": self.trained_items}


class VAEModel:
    kind = "vae"

    def __init__(self, users, items, params: dict, seed, hyper: CFHyper,
                 trained_items: np.ndarray, user_rows_dense: np.ndarray):
        self.users = tuple(users)
        self.items = tuple(items)
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.params = params
        self.seed = seed
        self.hyper = hyper
        self.trained_items = trained_items
        self.user_rows = user_rows_dense  # binary train rows used for encoding

    def encode_mean(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        norm = np.sqrt(np.maximum(x.sum(axis=-1, keepdims=True), 1.0))
        h = np.tanh((x / norm) @ p["W1"] + p["b1"])
        return h @ p["Wmu"] + p["bmu"]

    def decode(self, z: np.ndarray) -> np.ndarray:
        return z @ self.params["Wd"] + self.params["bd"]

    def score_user(self, user_id: str) -> np.ndarray:
        if user_id not in self.user_index:
            raise CFError(f"unknown user {user_id!r}")
        x = self.user_rows[self.user_index[user_id]][None, :]
        return self.decode(self.encode_mean(x))[0]

    def state(self) -> dict:
        return {"kind": self.kind, "users": self.users, "items": self.items,
                "params": self.params, "seed": self.seed,
                "hyper": asdict(self.hyper), "trained_items": self.trained_items,
                "user_rows": self.user_rows}


CFModel = PopularityModel | BPRModel | VAEModel


def score_user(model: CFModel, user_id: str) -> np.ndarray:
    return model.score_user(user_id)


# ---------------------------------------------------------------------------
# popularity
# ---------------------------------------------------------------------------

def train_popularity(matrix: InteractionMatrix) -> PopularityModel:
    if matrix.num_entries == 0:
        raise CFError("empty interaction matrix")
    return PopularityModel(matrix)


# ---------------------------------------------------------------------------
# pairwise ranking (BPR)
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bpr_objective(P: np.ndarray, Q: np.ndarray, bias: np.ndarray,
                  triples: np.ndarray, reg: float
                  ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Negated pairwise log-likelihood with L2 penalty on touched rows.

    loss = sum over (u, i+, i-) of -ln sigma(s(u,i+) - s(u,i-))
           + reg * (|P_u|^2 + |Q_i+|^2 + |Q_i-|^2 + b_i+^2 + b_i-^2)

    Returns (loss, dP, dQ, dbias) with dense gradient arrays.
    """
    u, ip, ng = triples[:, 0], triples[:, 1], triples[:, 2]
    Pu, Qp, Qn = P[u], Q[ip], Q[ng]
    x = np.sum(Pu * (Qp - Qn), axis=1) + bias[ip] - bias[ng]
    # -ln sigma(x), computed stably
    loss = float(np.sum(np.logaddexp(0.0, -x)))
    loss += reg * float(np.sum(Pu ** 2) + np.sum(Qp ** 2) + np.sum(Qn ** 2)
                        + np.sum(bias[ip] ** 2) + np.sum(bias[ng] ** 2))
    g = -_sigmoid(-x)  # d(-ln sigma(x))/dx
    dP = np.zeros_like(P)
    dQ = np.zeros_like(Q)
    db = np.zeros_like(bias)
    np.add.at(dP, u, g[:, None] * (Qp - Qn) + 2.0 * reg * Pu)
    np.add.at(dQ, ip, g[:, None] * Pu + 2.0 * reg * Qp)
    np.add.at(dQ, ng, -g[:, None] * Pu + 2.0 * reg * Qn)
    np.add.at(db, ip, g + 2.0 * reg * bias[ip])
    np.add.at(db, ng, -g + 2.0 * reg * bias[ng])
    return loss, dP, dQ, db


def _sample_negatives(rng: np.random.Generator, users: np.ndarray,
                      num_items: int, interacted_keys: np.ndarray) -> np.ndarray:
    """Uniform negatives i- with (u, i-) not interacted; rejection sampling."""
    neg = rng.integers(0, num_items, size=users.shape[0])
    for _ in range(100):
        keys = users * num_items + neg
        bad = np.isin(keys, interacted_keys)
        if not bad.any():
            break
        neg[bad] = rng.integers(0, num_items, size=int(bad.sum()))
    else:
        keys = users * num_items + neg
        bad = np.isin(keys, interacted_keys)
        neg[bad] = -1  # users with (almost) all items interacted: drop
    return neg


def train_bpr(matrix: InteractionMatrix, hyper: CFHyper, seed: int = 0) -> BPRModel:
    if matrix.num_entries == 0:
        raise CFError("empty interaction matrix")
    rng = np.random.default_rng([seed, 101])
    n_users, n_items, f = matrix.num_users, matrix.num_items, hyper.f
    P = rng.normal(0.0, 0.1, size=(n_users, f))
    Q = rng.normal(0.0, 0.1, size=(n_items, f))
    bias = np.zeros(n_items, dtype=np.float64)
    keys = np.sort(matrix.user_ids_idx * n_items + matrix.item_ids_idx)
    lr = hyper.learning_rate
    for _ in range(hyper.epochs):
        order = rng.permutation(matrix.num_entries)
        pos_u = np.repeat(matrix.user_ids_idx[order], hyper.bpr_negatives)
        pos_i = np.repeat(matrix.item_ids_idx[order], hyper.bpr_negatives)
        for start in range(0, pos_u.shape[0], hyper.batch_size):
            bu = pos_u[start:start + hyper.batch_size]
            bi = pos_i[start:start + hyper.batch_size]
            bn = _sample_negatives(rng, bu, n_items, keys)
            ok = bn >= 0
            if not ok.all():
                bu, bi, bn = bu[ok], bi[ok], bn[ok]
            if bu.size == 0:
                continue
            triples = np.stack([bu, bi, bn], axis=1)
            _, dP, dQ, db = bpr_objective(P, Q, bias, triples, hyper.regularization)
            P -= lr * dP
            Q -= lr * dQ
            bias -= lr * db
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(Q)) and np.all(np.isfinite(bias))):
        raise CFError("non-finite parameters after training")
    trained = matrix.item_counts() > 0
    return BPRModel(matrix.users, matrix.items, P, Q, bias, seed, hyper, trained)


# ---------------------------------------------------------------------------
# variational autoencoder with item bias
# ---------------------------------------------------------------------------

def _vae_init(rng: np.random.Generator, n_items: int, hidden: int, f: int) -> dict:
    def glorot(shape):
        lim = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-lim, lim, size=shape)
    return {
        "W1": glorot((n_items, hidden)), "b1": np.zeros(hidden),
        "Wmu": glorot((hidden, f)), "bmu": np.zeros(f),
        "Wlv": glorot((hidden, f)), "blv": np.zeros(f),
        "Wd": glorot((f, n_items)), "bd": np.zeros(n_items),
    }


def vae_loss_and_grads(params: dict, X: np.ndarray, eps: np.ndarray,
                       beta: float, reg: float = 0.0) -> tuple[float, dict]:
    """Multinomial-likelihood variational objective on a batch of user rows.

    Encoder: L2-normalized row -> tanh hidden -> (mu, logvar);
    z = mu + exp(logvar/2) * eps; decoder: z @ Wd + bd (per-item bias).
    loss = mean_u [ -sum_i x_ui * log_softmax(logits)_i + beta * KL_u ]
           + reg * |Wd|^2.
    The decoder penalty keeps the item vectors small, which the
    downstream exp-distance reconstruction loss needs for stability.
    """
    B = X.shape[0]
    norm = np.sqrt(np.maximum(X.sum(axis=1, keepdims=True), 1.0))
    Xn = X / norm
    pre = Xn @ params["W1"] + params["b1"]
    h = np.tanh(pre)
    mu = h @ params["Wmu"] + params["bmu"]
    lv = h @ params["Wlv"] + params["blv"]
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * eps
    logits = z @ params["Wd"] + params["bd"]
    lse = np.log(np.sum(np.exp(logits - logits.max(axis=1, keepdims=True)),
                        axis=1, keepdims=True)) + logits.max(axis=1, keepdims=True)
    log_sm = logits - lse
    recon = -np.sum(X * log_sm, axis=1)
    kl = 0.5 * np.sum(-lv - 1.0 + np.exp(lv) + mu ** 2, axis=1)
    loss = float(np.mean(recon + beta * kl)) + reg * float(np.sum(params["Wd"] ** 2))

    # backward, all divided by B for the batch mean
    softmax = np.exp(log_sm)
    dlogits = (softmax * X.sum(axis=1, keepdims=True) - X) / B
    dz = dlogits @ params["Wd"].T
    dWd = z.T @ dlogits
    dbd = dlogits.sum(axis=0)
    dmu = dz + beta * mu / B
    dlv = dz * eps * 0.5 * sigma + beta * 0.5 * (np.exp(lv) - 1.0) / B
    dh = dmu @ params["Wmu"].T + dlv @ params["Wlv"].T
    dpre = dh * (1.0 - h ** 2)
    grads = {
        "W1": Xn.T @ dpre, "b1": dpre.sum(axis=0),
        "Wmu": h.T @ dmu, "bmu": dmu.sum(axis=0),
        "Wlv": h.T @ dlv, "blv": dlv.sum(axis=0),
        "Wd": dWd + 2.0 * reg * params["Wd"], "bd": dbd,
    }
    return loss, grads


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-row KL(q(z|x) || N(0, I)); analytically >= 0."""
    return 0.5 * np.sum(-logvar - 1.0 + np.exp(logvar) + mu ** 2, axis=-1)


def train_vae(matrix: InteractionMatrix, hyper: CFHyper, seed: int = 0) -> VAEModel:
    if matrix.num_entries == 0:
        raise CFError("empty interaction matrix")
    rng = np.random.default_rng([seed, 202])
    n_items = matrix.num_items
    hidden = hyper.vae_hidden if hyper.vae_hidden is not None else 2 * hyper.f
    params = _vae_init(rng, n_items, hidden, hyper.f)
    X_full = matrix.dense()
    active = np.flatnonzero(X_full.sum(axis=1) > 0)  # empty rows are skipped
    adam_m = {k: np.zeros_like(v) for k, v in params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in params.items()}
    adam_t = 0
    lr, b1, b2, eps_adam = hyper.vae_learning_rate, 0.9, 0.999, 1e-8
    total_steps = max(1, hyper.epochs * int(np.ceil(active.size / hyper.batch_size)))
    step = 0
    for _ in range(hyper.epochs):
        order = active[rng.permutation(active.size)]
        for start in range(0, order.size, hyper.batch_size):
            rows = order[start:start + hyper.batch_size]
            X = X_full[rows]
            eps = rng.standard_normal(size=(rows.size, hyper.f))
            beta = hyper.vae_kl_cap * min(1.0, step / max(1, total_steps - 1))
            _, grads = vae_loss_and_grads(params, X, eps, beta,
                                          reg=hyper.regularization)
            adam_t += 1
            for k in params:
                adam_m[k] = b1 * adam_m[k] + (1 - b1) * grads[k]
                adam_v[k] = b2 * adam_v[k] + (1 - b2) * grads[k] ** 2
                mhat = adam_m[k] / (1 - b1 ** adam_t)
                vhat = adam_v[k] / (1 - b2 ** adam_t)
                params[k] -= lr * mhat / (np.sqrt(vhat) + eps_adam)
            step += 1
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise CFError(f"non-finite VAE parameter {k} after training")
    trained = matrix.item_counts() > 0
    return VAEModel(matrix.users, matrix.items, params, seed, hyper, trained, X_full)


# ---------------------------------------------------------------------------
# embedding extraction
# ---------------------------------------------------------------------------

def extract_item_embeddings(model: CFModel) -> EmbeddingTable:
    """Per-item latent vectors: MF rows of Q, or columns of the decoder's
    final weight matrix (bias excluded). Items without any training
    interaction are omitted."""
    if isinstance(model, PopularityModel):
        raise CFError("popularity model has no latent representation")
    if isinstance(model, BPRModel):
        vectors = model.Q
    else:
        vectors = model.params["Wd"].T  # (num_items, f)
    keep = np.flatnonzero(model.trained_items)
    ids = [model.items[k] for k in keep]
    provenance = {"model": model.kind, "seed": model.seed,
                  "config_hash": model.hyper.digest()}
    return EmbeddingTable(ids, vectors[keep].copy(), provenance)
