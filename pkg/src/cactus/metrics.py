"""Measurement: average precision, recommendation AUC, bootstrap intervals
and paired significance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .data import TRAIN, InteractionMatrix, ItemCatalog, SplitAssignment


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    per_class_ap: dict[str, float]
    map: float
    skipped_classes: list[str] = field(default_factory=list)
    auc: Optional[float] = None
    ci: Optional[dict] = None          # {level, lo, hi, B}
    pvalues: dict[str, float] = field(default_factory=dict)
    label_ratio: Optional[float] = None
    relative_improvement: Optional[float] = None  # vs the designated baseline
    method: str = ""
    seed: Optional[int] = None
    config_hash: str = ""
    split_hash: str = ""
    wall_clock_seconds: Optional[float] = None

    def to_dict(self, include_timing: bool = False) -> dict:
        """JSON-ready form; timing is volatile and excluded by default so
        repeated seeded runs serialize identically."""
        doc = {
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "split_hash": self.split_hash,
            "metrics": {
                "map": self.map,
                "per_class_ap": self.per_class_ap,
                "skipped_classes": self.skipped_classes,
            },
            "pvalues": self.pvalues,
        }
        if self.auc is not None:
            doc["metrics"]["auc"] = self.auc
        if self.ci is not None:
            doc["ci"] = self.ci
        if self.label_ratio is not None:
            doc["label_ratio"] = self.label_ratio
        if self.relative_improvement is not None:
            doc["relative_improvement"] = self.relative_improvement
        if include_timing and self.wall_clock_seconds is not None:
            doc["wall_clock_seconds"] = self.wall_clock_seconds
        return doc


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def _ranking(scores: np.ndarray, tie_order: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties resolved by ascending tie_order."""
    return np.lexsort((tie_order, -scores))


def average_precision(scores: Sequence[float], positives: Sequence[bool],
                      tie_order: Optional[Sequence[int]] = None) -> float:
    """Precision averaged over the ranks that hold positives.

    scores: one score per item (class-specific); positives: boolean mask
    of relevant items; tie_order: deterministic tie-break (defaults to
    input position, i.e. item-id order when callers pass items sorted).
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if scores.shape != pos.shape:
        raise MetricsError("scores and positives must align")
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise MetricsError("average precision needs at least one positive")
    order = _ranking(scores, np.arange(scores.size) if tie_order is None
                     else np.asarray(tie_order))
    hits = pos[order]
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, scores.size + 1)
    return float(np.sum(cum_hits[hits] / ranks[hits]) / n_pos)


def mean_average_precision(item_ids: Sequence[str], scores: np.ndarray,
                           labels: np.ndarray,
                           class_names: Optional[Sequence[str]] = None
                           ) -> MetricsReport:
    """mAP over classes that hold at least one positive among the items.

    scores, labels: (num_items, num_classes). Classes without positives
    are skipped and listed; ties are broken by item id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricsError("scores and labels must have the same shape")
    if labels.sum() == 0:
        raise MetricsError("no labeled positives among evaluated items")
    n_classes = scores.shape[1]
    names = list(class_names) if class_names is not None else \
        [f"class{k:02d}" for k in range(n_classes)]
    tie = np.argsort(np.argsort(np.asarray(item_ids)))  # rank by item id
    per_class: dict[str, float] = {}
    skipped: list[str] = []
    for c in range(n_classes):
        if labels[:, c].sum() == 0:
            skipped.append(names[c])
            continue
        per_class[names[c]] = average_precision(scores[:, c], labels[:, c] > 0, tie)
    return MetricsReport(per_class_ap=per_class,
                         map=float(np.mean(list(per_class.values()))),
                         skipped_classes=skipped)


def map_from_scores(item_ids, scores, labels, class_names=None) -> MetricsReport:
    return mean_average_precision(item_ids, scores, labels, class_names)


def class_popularity_scores(catalog: ItemCatalog,
                            split: SplitAssignment) -> np.ndarray:
    """Class-prior score vector from labeled train items (constant per item)."""
    counts = np.zeros(catalog.num_classes, dtype=np.float64)
    for r in catalog.records:
        if r.labeled and split.roles.get(r.item_id) == TRAIN:
            counts += r.labels
    total = counts.sum()
    if total == 0:
        raise MetricsError("no labels")
    return counts / total


# ---------------------------------------------------------------------------
# recommendation AUC
# ---------------------------------------------------------------------------

def evaluate_auc(model, train: InteractionMatrix, test: InteractionMatrix,
                 return_per_user: bool = False):
    """Mean per-user probability that a held-out positive outranks a
    never-interacted item (train items excluded from the negatives).

    Eligible users have at least one test positive and at least one
    train interaction; ties count one half.
    """
    n_items = train.num_items
    train_rows = {u: set() for u in range(train.num_users)}
    for u, i in zip(train.user_ids_idx, train.item_ids_idx):
        train_rows[u].add(int(i))
    test_rows: dict[int, set] = {}
    for u, i in zip(test.user_ids_idx, test.item_ids_idx):
        test_rows.setdefault(int(u), set()).add(int(i))

    per_user = []
    users = []
    for u, positives in sorted(test_rows.items()):
        if not train_rows.get(u):
            continue
        candidates = np.array(sorted(set(range(n_items)) - train_rows[u]),
                              dtype=np.int64)
        pos_mask = np.isin(candidates, sorted(positives))
        n_pos = int(pos_mask.sum())
        n_neg = candidates.size - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        scores = model.score_user(train.users[u])[candidates]
        ranks = stats.rankdata(scores, method="average")
        auc = (ranks[pos_mask].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        per_user.append(float(auc))
        users.append(train.users[u])
    if not per_user:
        raise MetricsError("no eligible users for AUC evaluation")
    if return_per_user:
        return float(np.mean(per_user)), dict(zip(users, per_user))
    return float(np.mean(per_user))


# ---------------------------------------------------------------------------
# uncertainty and significance
# ---------------------------------------------------------------------------

def bootstrap_ci(records: Sequence, metric: Callable[[list], float],
                 B: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile interval of `metric` over B resamples (with replacement)."""
    if B < 100:
        raise MetricsError("B must be >= 100")
    records = list(records)
    if not records:
        raise MetricsError("no records to bootstrap")
    rng = np.random.default_rng([seed, 404])
    values = np.empty(B, dtype=np.float64)
    n = len(records)
    for b in range(B):
        idx = rng.integers(0, n, size=n)
        values[b] = metric([records[k] for k in idx])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def paired_ttest(ap_a: Sequence[float], ap_b: Sequence[float]) -> float:
    """Two-sided paired t-test over aligned per-class average precisions.

    Zero-variance differences use a declared convention: p = 1 when the
    mean difference is 0, else p = 0.
    """
    a = np.asarray(ap_a, dtype=np.float64)
    b = np.asarray(ap_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError("paired t-test needs equal-length vectors")
    diff = a - b
    if np.allclose(diff.std(ddof=1) if diff.size > 1 else 0.0, 0.0):
        return 1.0 if np.isclose(diff.mean(), 0.0) else 0.0
    return float(stats.ttest_rel(a, b).pvalue)


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
