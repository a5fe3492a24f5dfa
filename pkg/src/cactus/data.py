"""Interaction logs, item catalogs, deterministic splits and label paucity."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TRAIN, VAL, TEST = "train", "val", "test"


class DataError(ValueError):
    """Raised for malformed input files or invalid split requests."""


def round_half_up(x: float) -> int:
    """round() with ties away from zero, so counts are platform-stable."""
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# interaction matrix
# ---------------------------------------------------------------------------

class InteractionMatrix:
    """Sparse binary user x item implicit-feedback matrix.

    Users and items are kept as lexicographically sorted id tuples;
    entries are stored as parallel (user_idx, item_idx) index arrays in
    canonical (user, item) order. Instances are immutable after
    construction and safe for concurrent reads.
    """

    def __init__(self, users: Sequence[str], items: Sequence[str],
                 entries: Iterable[tuple[str, str]]):
        self.users = tuple(users)
        self.items = tuple(items)
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.item_index = {i: k for k, i in enumerate(self.items)}
        pairs = {(self.user_index[u], self.item_index[i]) for u, i in entries}
        if pairs:
            arr = np.array(sorted(pairs), dtype=np.int64)
            self.user_ids_idx = arr[:, 0]
            self.item_ids_idx = arr[:, 1]
        else:
            self.user_ids_idx = np.empty(0, dtype=np.int64)
            self.item_ids_idx = np.empty(0, dtype=np.int64)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.items)

    @property
    def num_entries(self) -> int:
        return int(self.user_ids_idx.shape[0])

    @property
    def sparsity(self) -> float:
        return self.num_entries / (self.num_users * self.num_items)

    def entry_pairs(self) -> set[tuple[str, str]]:
        return {(self.users[u], self.items[i])
                for u, i in zip(self.user_ids_idx, self.item_ids_idx)}

    def item_counts(self) -> np.ndarray:
        """|U_i| per item, aligned with self.items."""
        return np.bincount(self.item_ids_idx, minlength=self.num_items).astype(np.int64)

    def interactions_per_item(self, item_id: str) -> int:
        return int(np.sum(self.item_ids_idx == self.item_index[item_id]))

    def dense(self) -> np.ndarray:
        """Dense 0/1 matrix (num_users x num_items). Desk scale only."""
        m = np.zeros((self.num_users, self.num_items), dtype=np.float64)
        m[self.user_ids_idx, self.item_ids_idx] = 1.0
        return m

    def user_rows(self) -> list[np.ndarray]:
        """Per-user sorted arrays of interacted item indices."""
        rows: list[list[int]] = [[] for _ in range(self.num_users)]
        for u, i in zip(self.user_ids_idx, self.item_ids_idx):
            rows[u].append(int(i))
        return [np.array(sorted(r), dtype=np.int64) for r in rows]

    def _with_entries(self, keep: np.ndarray) -> "InteractionMatrix":
        out = InteractionMatrix.__new__(InteractionMatrix)
        out.users = self.users
        out.items = self.items
        out.user_index = self.user_index
        out.item_index = self.item_index
        out.user_ids_idx = self.user_ids_idx[keep]
        out.item_ids_idx = self.item_ids_idx[keep]
        return out


def load_interactions(path: str | Path) -> InteractionMatrix:
    """Parse a `user_id<TAB>item_id` TSV into a de-duplicated matrix."""
    path = Path(path)
    pairs: set[tuple[str, str]] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[0] or not fields[1]:
                raise DataError(f"{path}:{lineno}: expected 'user_id<TAB>item_id', got {line!r}")
            pairs.add((fields[0], fields[1]))
    if not pairs:
        raise DataError(f"{path}: no interactions")
    users = sorted({u for u, _ in pairs})
    items = sorted({i for _, i in pairs})
    return InteractionMatrix(users, items, pairs)


def save_interactions(matrix: InteractionMatrix, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for u, i in zip(matrix.user_ids_idx, matrix.item_ids_idx):
            fh.write(f"{matrix.users[u]}\t{matrix.items[i]}\n")


# ---------------------------------------------------------------------------
# item catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    image_ref: str
    labels: Optional[np.ndarray] = None  # multi-hot over N classes, None = unlabeled

    @property
    def labeled(self) -> bool:
        return self.labels is not None


@dataclass(frozen=True)
class ItemCatalog:
    records: tuple[ItemRecord, ...]
    class_names: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def item_ids(self) -> tuple[str, ...]:
        return tuple(r.item_id for r in self.records)

    def record(self, item_id: str) -> ItemRecord:
        return self._by_id()[item_id]

    def _by_id(self) -> Mapping[str, ItemRecord]:
        if not hasattr(self, "_index"):
            object.__setattr__(self, "_index", {r.item_id: r for r in self.records})
        return self._index

    def labeled_records(self) -> list[ItemRecord]:
        return [r for r in self.records if r.labeled]


def load_catalog(manifest_path: str | Path, image_dir: str | Path) -> ItemCatalog:
    """Parse `item_id<TAB>class1,class2,...` lines; empty label field = unlabeled.

    The class universe is the set of distinct names in the manifest,
    sorted; image paths are derived as image_dir/<item_id>.png and only
    checked when an image is actually read.
    """
    manifest_path = Path(manifest_path)
    image_dir = Path(image_dir)
    rows: list[tuple[str, Optional[list[str]]]] = []
    seen: set[str] = set()
    names: set[str] = set()
    with manifest_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[0]:
                raise DataError(f"{manifest_path}:{lineno}: expected 'item_id<TAB>labels', got {line!r}")
            item_id, label_field = fields
            if item_id in seen:
                raise DataError(f"{manifest_path}:{lineno}: duplicate item_id {item_id!r}")
            seen.add(item_id)
            if label_field:
                labels = [c for c in label_field.split(",") if c]
                names.update(labels)
                rows.append((item_id, labels))
            else:
                rows.append((item_id, None))
    if not names:
        raise DataError(f"{manifest_path}: no labeled items in catalog")
    class_names = tuple(sorted(names))
    index = {c: k for k, c in enumerate(class_names)}
    records = []
    for item_id, labels in rows:
        if labels is None:
            vec = None
        else:
            vec = np.zeros(len(class_names), dtype=np.int8)
            for c in labels:
                vec[index[c]] = 1
        records.append(ItemRecord(item_id=item_id,
                                  image_ref=str(image_dir / f"{item_id}.png"),
                                  labels=vec))
    return ItemCatalog(records=tuple(records), class_names=class_names)


def save_catalog_manifest(catalog: ItemCatalog, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in catalog.records:
            if r.labeled:
                names = [catalog.class_names[k] for k in np.flatnonzero(r.labels)]
                fh.write(f"{r.item_id}\t{','.join(names)}\n")
            else:
                fh.write(f"{r.item_id}\t\n")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    roles: Mapping[str, str]  # item_id -> train|val|test
    seed: int
    ratios: tuple[float, float, float]

    def items_with_role(self, role: str) -> list[str]:
        return [i for i, r in self.roles.items() if r == role]

    @property
    def train_items(self) -> list[str]:
        return self.items_with_role(TRAIN)

    @property
    def val_items(self) -> list[str]:
        return self.items_with_role(VAL)

    @property
    def test_items(self) -> list[str]:
        return self.items_with_role(TEST)


def split_items(catalog: ItemCatalog, holdout_ratio: float, seed: int) -> SplitAssignment:
    """Hold out round(ratio*n) items; val gets ceil(h/2), test floor(h/2)."""
    if not 0.0 < holdout_ratio < 1.0:
        raise DataError(f"holdout_ratio must be in (0,1), got {holdout_ratio}")
    ids = sorted(catalog.item_ids)
    h = round_half_up(holdout_ratio * len(ids))
    if h < 2:
        raise DataError(f"holdout of {h} items cannot form val and test")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    held = [ids[k] for k in order[:h]]
    n_val = math.ceil(h / 2)
    roles = {i: TRAIN for i in ids}
    for i in held[:n_val]:
        roles[i] = VAL
    for i in held[n_val:]:
        roles[i] = TEST
    val_frac = n_val / len(ids)
    test_frac = (h - n_val) / len(ids)
    return SplitAssignment(roles=roles, seed=seed,
                           ratios=(1.0 - val_frac - test_frac, val_frac, test_frac))


def mask_heldout_interactions(matrix: InteractionMatrix,
                              split: SplitAssignment) -> InteractionMatrix:
    """Zero all interactions of val/test items; users and items stay."""
    held = {i for i, r in split.roles.items() if r != TRAIN}
    held_idx = {matrix.item_index[i] for i in held if i in matrix.item_index}
    if not held_idx:
        return matrix._with_entries(np.ones(matrix.num_entries, dtype=bool))
    keep = ~np.isin(matrix.item_ids_idx, sorted(held_idx))
    return matrix._with_entries(keep)


def split_interactions(matrix: InteractionMatrix, test_ratio: float,
                       seed: int) -> tuple[InteractionMatrix, InteractionMatrix]:
    """Partition entries uniformly at random into train/test matrices."""
    if not 0.0 < test_ratio < 1.0:
        raise DataError(f"test_ratio must be in (0,1), got {test_ratio}")
    n = matrix.num_entries
    if n == 0:
        raise DataError("cannot split an empty interaction matrix")
    n_test = round_half_up(test_ratio * n)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    test_mask = np.zeros(n, dtype=bool)
    test_mask[order[:n_test]] = True
    return matrix._with_entries(~test_mask), matrix._with_entries(test_mask)


def drop_labels(catalog: ItemCatalog, label_ratio: float, seed: int,
                split: SplitAssignment) -> ItemCatalog:
    """Keep labels on round(ratio*L) train items; the rest become unlabeled.

    Retention follows a seeded priority order over labeled train items,
    so the retained sets at different ratios nest (r1 > r2 implies the
    r2 set is a prefix of the r1 set). Val/test items are untouched.
    """
    if not 0.0 < label_ratio <= 1.0:
        raise DataError(f"label_ratio must be in (0,1], got {label_ratio}")
    labeled_train = sorted(r.item_id for r in catalog.records
                           if r.labeled and split.roles.get(r.item_id) == TRAIN)
    rng = np.random.default_rng(seed)
    priority = [labeled_train[k] for k in rng.permutation(len(labeled_train))]
    n_keep = round_half_up(label_ratio * len(labeled_train))
    kept = set(priority[:n_keep])
    records = []
    for r in catalog.records:
        if r.labeled and split.roles.get(r.item_id) == TRAIN and r.item_id not in kept:
            records.append(ItemRecord(r.item_id, r.image_ref, None))
        else:
            records.append(r)
    out = ItemCatalog(records=tuple(records), class_names=catalog.class_names)
    surviving = set()
    for r in out.records:
        if r.labeled and split.roles.get(r.item_id) == TRAIN:
            surviving.update(np.flatnonzero(r.labels).tolist())
    if len(surviving) < catalog.num_classes:
        logger.warning("label_ratio %.3f leaves only %d/%d classes with train labels",
                       label_ratio, len(surviving), catalog.num_classes)
    return out


# ---------------------------------------------------------------------------
# splits.json persistence
# ---------------------------------------------------------------------------

def save_split(split: SplitAssignment, path: str | Path,
               config_hash: str = "") -> None:
    doc = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "assignment": {i: split.roles[i] for i in sorted(split.roles)},
        "config_hash": config_hash,
    }
    doc["split_hash"] = split_digest(split)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_split(path: str | Path) -> SplitAssignment:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return SplitAssignment(roles=dict(doc["assignment"]), seed=int(doc["seed"]),
                           ratios=tuple(doc["ratios"]))


def split_digest(split: SplitAssignment) -> str:
    import hashlib
    blob = json.dumps({i: split.roles[i] for i in sorted(split.roles)},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# catalog statistics
# ---------------------------------------------------------------------------

def gini_index(counts: Sequence[float]) -> float:
    """Gini concentration of a non-negative count vector (0 = uniform)."""
    x = np.asarray(counts, dtype=np.float64)
    if x.size == 0 or np.all(x == 0):
        return 0.0
    if np.any(x < 0):
        raise ValueError("counts must be non-negative")
    x = np.sort(x)
    n = x.size
    ranks = np.arange(1, n + 1)
    return float((2.0 * np.sum(ranks * x) / (n * np.sum(x))) - (n + 1.0) / n)


def catalog_stats(catalog: ItemCatalog,
                  matrix: Optional[InteractionMatrix] = None) -> dict:
    """Dataset summary: sizes, label balance, positives per item, Gini."""
    labeled = catalog.labeled_records()
    counts = np.zeros(catalog.num_classes, dtype=np.int64)
    pos_per_item = []
    for r in labeled:
        counts += r.labels.astype(np.int64)
        pos_per_item.append(int(r.labels.sum()))
    stats = {
        "num_items": len(catalog.records),
        "num_labeled": len(labeled),
        "num_classes": catalog.num_classes,
        "class_counts": counts.tolist(),
        "avg_pos_labels": float(np.mean(pos_per_item)) if pos_per_item else 0.0,
        "gini_index": gini_index(counts),
    }
    if matrix is not None:
        stats.update({
            "num_users": matrix.num_users,
            "num_interactions": matrix.num_entries,
            "sparsity": matrix.sparsity,
        })
    return stats
