"""Desk-scale synthetic dataset: images, labels and interactions that share signal.

Every item carries a ground-truth class. The class determines both the
visual signature rendered into the item's image (color + shape, with
per-item jitter and pixel noise) and which users interact with the item
(users prefer a small set of classes). Interactions, pixels and labels
are therefore mutually informative, which is the regime in which
reconstruction of collaborative vectors can help a classifier.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import InteractionMatrix, ItemCatalog, ItemRecord

logger = logging.getLogger(__name__)

# the eight RGB-cube corners: maximally separated color directions around
# the mid-gray background
PALETTE = np.array([
    [0.92, 0.08, 0.08],  # red
    [0.08, 0.92, 0.08],  # green
    [0.08, 0.08, 0.92],  # blue
    [0.92, 0.92, 0.08],  # yellow
    [0.92, 0.08, 0.92],  # magenta
    [0.08, 0.92, 0.92],  # cyan
    [0.92, 0.92, 0.92],  # white
    [0.08, 0.08, 0.08],  # black
])

SHAPES = ("disk", "square", "triangle", "diamond", "ring", "cross", "hbar", "vbar")

BACKGROUND = 0.5


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 2000
    num_items: int = 600
    num_classes: int = 8
    factors: int = 8
    interactions_per_user: int = 20
    image_size: int = 32
    label_noise: float = 0.0      # fraction of items rendered with a wrong class signature
    seed: int = 0
    pixel_noise: float = 0.5      # std of additive Gaussian noise on [0,1] pixels
    jitter: float = 0.22          # max shape-center offset as a fraction of image size
    color_mode: str = "class"     # class: color encodes the class; item: color is a per-item distractor
    class_skew: float = 0.0       # 0 = balanced classes; >0 = Zipf long tail
    item_popularity_skew: float = 0.65  # within-class Zipf over items; 0 = uniform draws
    unlabeled_fraction: float = 0.5     # fraction of items without labels, biased to unpopular ones
    extra_label_rate: float = 0.0  # probability of a second positive label
    user_focus: int = 2           # number of classes a user draws interactions from

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _validate(config: SyntheticConfig) -> None:
    if min(config.num_users, config.num_items, config.num_classes,
           config.factors, config.interactions_per_user, config.image_size) < 2:
        raise ValueError("all synthetic counts must be >= 2")
    if not 0.0 <= config.label_noise < 0.5:
        raise ValueError(f"label_noise must be in [0, 0.5), got {config.label_noise}")
    if not 0.0 <= config.unlabeled_fraction < 1.0:
        raise ValueError("unlabeled_fraction must be in [0, 1)")
    if config.color_mode not in ("item", "class"):
        raise ValueError(f"unknown color_mode {config.color_mode!r}")
    limit = len(SHAPES) if config.color_mode == "item" else len(PALETTE) * len(SHAPES)
    if config.num_classes > limit:
        raise ValueError(f"at most {limit} classes supported with "
                         f"color_mode={config.color_mode!r}")


def _rng(config: SyntheticConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stream])


def _shape_mask(shape: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = radius
    if shape == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        return (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6) & (dy <= r)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.3 * r
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= (1.2 * r) ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(dy) <= 0.45 * r) & (np.abs(dx) <= 1.4 * r)) | \
               ((np.abs(dx) <= 0.45 * r) & (np.abs(dy) <= 1.4 * r))
    if shape == "hbar":
        return (np.abs(dy) <= 0.5 * r) & (np.abs(dx) <= 1.6 * r)
    if shape == "vbar":
        return (np.abs(dx) <= 0.5 * r) & (np.abs(dy) <= 1.6 * r)
    raise ValueError(f"unknown shape {shape!r}")


def class_signature(k: int) -> tuple[np.ndarray, str]:
    """Color and shape of class k."""
    return PALETTE[k % len(PALETTE)], SHAPES[(k // len(PALETTE) + k) % len(SHAPES)]


def render_item_image(config: SyntheticConfig, render_class: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One uint8 RGB image: the class's jittered shape on a noisy background.

    With color_mode="item" the fill color is drawn per item and carries
    no class information (the shape is the signature); with "class" the
    color is part of the class signature.
    """
    s = config.image_size
    color, shape = class_signature(render_class)
    if config.color_mode == "item":
        color = PALETTE[rng.integers(0, len(PALETTE))]
    img = np.full((s, s, 3), BACKGROUND, dtype=np.float64)
    jit = config.jitter * s
    cy = s / 2 + rng.uniform(-jit, jit)
    cx = s / 2 + rng.uniform(-jit, jit)
    radius = rng.uniform(0.09, 0.20) * s
    mask = _shape_mask(shape, s, cy, cx, radius)
    img[mask] = color
    img += rng.normal(0.0, config.pixel_noise, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def class_template(config: SyntheticConfig, k: int) -> np.ndarray:
    """Canonical noise-free float render of class k (centered, mid radius)."""
    s = config.image_size
    color, shape = class_signature(k)
    img = np.full((s, s, 3), BACKGROUND, dtype=np.float64)
    mask = _shape_mask(shape, s, s / 2, s / 2, 0.155 * s)
    img[mask] = color
    return img


def decode_dominant_signature(image: np.ndarray, config: SyntheticConfig) -> int:
    """Recover the rendered class by matching against the class templates.

    color_mode="class": denoise, locate the strongest deviation from the
    background, and pick the nearest template color by deviation
    *direction* (robust to jitter, size and blending).
    color_mode="item": the color is uninformative, so matched-filter the
    deviation-magnitude map against each class's shape mask over all
    translations and a small size grid.
    """
    from scipy.ndimage import uniform_filter

    img = image.astype(np.float64) / 255.0
    dev = uniform_filter(img, size=(5, 5, 1)) - BACKGROUND

    if config.color_mode == "class":
        if config.num_classes > len(PALETTE):
            raise ValueError("color decoding needs distinct per-class colors")
        mag = np.linalg.norm(dev, axis=2)
        core = mag >= 0.6 * mag.max()
        direction = dev[core].mean(axis=0)
        direction /= np.linalg.norm(direction)
        targets = PALETTE[:config.num_classes] - BACKGROUND
        targets = targets / np.linalg.norm(targets, axis=1, keepdims=True)
        return int(np.argmax(targets @ direction))

    from scipy.signal import fftconvolve

    s = config.image_size
    mag = np.linalg.norm(dev, axis=2)
    mag -= mag.mean()
    best_k, best_score = 0, -np.inf
    for k in range(config.num_classes):
        _, shape = class_signature(k)
        for rad_frac in (0.10, 0.145, 0.19):
            mask = _shape_mask(shape, s, s / 2, s / 2, rad_frac * s).astype(np.float64)
            mask -= mask.mean()
            corr = fftconvolve(mag, mask[::-1, ::-1], mode="same")
            score = corr.max() / np.linalg.norm(mask)
            if score > best_score:
                best_k, best_score = k, score
    return best_k


@dataclass(frozen=True)
class SyntheticGroundTruth:
    item_classes: np.ndarray          # true class per item index
    render_classes: np.ndarray        # class whose signature was drawn
    user_preferred: list[tuple[int, ...]]  # preferred classes per user index
    item_ids: tuple[str, ...]
    user_ids: tuple[str, ...]
    class_names: tuple[str, ...]
    item_weights: np.ndarray          # within-class draw weight (popularity)
    labeled_mask: np.ndarray          # False = item carries no label


def synthetic_ground_truth(config: SyntheticConfig) -> SyntheticGroundTruth:
    """Deterministic latent structure behind generate_synthetic(config)."""
    _validate(config)
    K = config.num_classes
    item_ids = tuple(f"i{k:05d}" for k in range(config.num_items))
    user_ids = tuple(f"u{k:05d}" for k in range(config.num_users))
    class_names = tuple(f"class{k:02d}" for k in range(K))

    rng_items = _rng(config, 1)
    if config.class_skew > 0.0:
        p = (np.arange(1, K + 1, dtype=np.float64)) ** (-config.class_skew)
        p /= p.sum()
        item_classes = rng_items.choice(K, size=config.num_items, p=p)
    else:
        item_classes = np.arange(config.num_items) % K
        rng_items.shuffle(item_classes)

    rng_noise = _rng(config, 2)
    render_classes = item_classes.copy()
    flip = rng_noise.random(config.num_items) < config.label_noise
    for idx in np.flatnonzero(flip):
        other = rng_noise.integers(0, K - 1)
        render_classes[idx] = other if other < item_classes[idx] else other + 1

    rng_users = _rng(config, 3)
    prototypes = rng_users.normal(size=(K, config.factors))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    focus = min(config.user_focus, K)
    user_preferred = []
    for _ in range(config.num_users):
        u = rng_users.normal(size=config.factors)
        affinity = prototypes @ u
        top = np.argsort(-affinity)[:focus]
        user_preferred.append(tuple(int(t) for t in sorted(top)))

    rng_pop = _rng(config, 7)
    item_weights = np.ones(config.num_items, dtype=np.float64)
    for k in range(K):
        members = np.flatnonzero(item_classes == k)
        if members.size == 0:
            continue
        ranks = 1.0 + rng_pop.permutation(members.size)
        w = ranks ** (-config.item_popularity_skew)
        item_weights[members] = w / w.sum()

    rng_unlab = _rng(config, 8)
    labeled_mask = np.ones(config.num_items, dtype=bool)
    n_unlab = int(np.floor(config.unlabeled_fraction * config.num_items + 0.5))
    if n_unlab > 0:
        # weighted sample without replacement, biased toward unpopular items
        bias = 1.0 / np.sqrt(item_weights + 1e-12)
        keys = rng_unlab.random(config.num_items) ** (1.0 / bias)
        labeled_mask[np.argsort(-keys)[:n_unlab]] = False

    return SyntheticGroundTruth(item_classes=item_classes,
                                render_classes=render_classes,
                                user_preferred=user_preferred,
                                item_ids=item_ids, user_ids=user_ids,
                                class_names=class_names,
                                item_weights=item_weights,
                                labeled_mask=labeled_mask)


def generate_synthetic(config: SyntheticConfig,
                       image_dir: str | Path | None = None
                       ) -> tuple[ItemCatalog, InteractionMatrix]:
    """Build a catalog and interaction matrix from the latent structure.

    When image_dir is given, one `<item_id>.png` per item is written
    there and records reference those files; otherwise records carry
    bare `<item_id>.png` refs and no files are produced (enough for
    interaction-only experiments).
    """
    truth = synthetic_ground_truth(config)
    K = config.num_classes

    rng_labels = _rng(config, 4)
    label_vectors: list = []
    for idx, cls in enumerate(truth.item_classes):
        if not truth.labeled_mask[idx]:
            label_vectors.append(None)
            continue
        vec = np.zeros(K, dtype=np.int8)
        vec[cls] = 1
        if config.extra_label_rate > 0.0 and rng_labels.random() < config.extra_label_rate:
            other = rng_labels.integers(0, K - 1)
            vec[other if other < cls else other + 1] = 1
        label_vectors.append(vec)

    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
    rng_pixels = _rng(config, 5)
    records = []
    for idx, item_id in enumerate(truth.item_ids):
        ref = f"{item_id}.png"
        if image_dir is not None:
            img = render_item_image(config, int(truth.render_classes[idx]), rng_pixels)
            path = image_dir / ref
            Image.fromarray(img, mode="RGB").save(path)
            ref = str(path)
        records.append(ItemRecord(item_id=item_id, image_ref=ref,
                                  labels=label_vectors[idx]))
    catalog = ItemCatalog(records=tuple(records), class_names=truth.class_names)

    items_of_class = [np.flatnonzero(truth.item_classes == k) for k in range(K)]
    class_cumw = []
    for k in range(K):
        w = truth.item_weights[items_of_class[k]]
        class_cumw.append(np.cumsum(w / w.sum()) if w.size else np.empty(0))
    rng_inter = _rng(config, 6)
    pairs: set[tuple[str, str]] = set()
    for uidx, preferred in enumerate(truth.user_preferred):
        usable = [k for k in preferred if items_of_class[k].size > 0]
        if not usable:
            continue
        for _ in range(config.interactions_per_user):
            k = usable[rng_inter.integers(0, len(usable))]
            pool = items_of_class[k]
            pos = int(np.searchsorted(class_cumw[k], rng_inter.random()))
            iidx = int(pool[min(pos, pool.size - 1)])
            pairs.add((truth.user_ids[uidx], truth.item_ids[iidx]))
    matrix = InteractionMatrix(sorted(truth.user_ids), sorted(truth.item_ids), pairs)
    logger.info("synthetic dataset %s: %d items, %d users, %d interactions",
                config.digest(), config.num_items, config.num_users, matrix.num_entries)
    return catalog, matrix
