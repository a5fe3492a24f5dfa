"""Synthetic dataset generator: signal alignment, determinism, rendering."""

import numpy as np
import pytest
from PIL import Image

from cactus.synthetic import (SyntheticConfig, decode_dominant_signature,
                              generate_synthetic, render_item_image,
                              synthetic_ground_truth)


class TestRenderingDecodes:
    def test_noiseless_signatures_decode_to_their_class(self):
        # label_noise 0 pins signature == class; moderate pixel noise keeps
        # the nearest-template decode deterministic
        config = SyntheticConfig(label_noise=0.0, pixel_noise=0.2, seed=3)
        truth = synthetic_ground_truth(config)
        rng = np.random.default_rng(42)
        for idx in range(config.num_items):
            img = render_item_image(config, int(truth.render_classes[idx]), rng)
            assert decode_dominant_signature(img, config) == truth.item_classes[idx]

    def test_label_noise_decouples_renders_from_classes(self):
        config = SyntheticConfig(label_noise=0.3, seed=1)
        truth = synthetic_ground_truth(config)
        flipped = (truth.render_classes != truth.item_classes).mean()
        assert 0.2 < flipped < 0.4

    def test_images_written_as_8bit_rgb(self, tmp_path):
        config = SyntheticConfig(num_items=12, num_users=10, seed=0)
        catalog, _ = generate_synthetic(config, tmp_path)
        for record in catalog.records[:3]:
            with Image.open(record.image_ref) as img:
                assert img.mode == "RGB"
                assert img.size == (config.image_size, config.image_size)


class TestInteractionStructure:
    def test_disjoint_preferences_imply_disjoint_interactions(self):
        config = SyntheticConfig(num_users=200, num_items=200, seed=2)
        truth = synthetic_ground_truth(config)
        catalog, matrix = generate_synthetic(config)
        by_user = {u: set() for u in matrix.users}
        for u, i in zip(matrix.user_ids_idx, matrix.item_ids_idx):
            by_user[matrix.users[u]].add(matrix.items[i])
        pairs_checked = 0
        for a in range(40):
            for b in range(a + 1, 40):
                if set(truth.user_preferred[a]) & set(truth.user_preferred[b]):
                    continue
                ua, ub = truth.user_ids[a], truth.user_ids[b]
                assert not (by_user.get(ua, set()) & by_user.get(ub, set()))
                pairs_checked += 1
        assert pairs_checked > 0

    def test_within_class_cooccurrence_dominates(self):
        config = SyntheticConfig()  # spec default scale
        truth = synthetic_ground_truth(config)
        _, matrix = generate_synthetic(config)
        dense = matrix.dense()
        co = dense.T @ dense  # exhaustive pair co-counting
        np.fill_diagonal(co, 0.0)
        idmap = {i: k for k, i in enumerate(truth.item_ids)}
        cls = np.array([truth.item_classes[idmap[i]] for i in matrix.items])
        same = cls[:, None] == cls[None, :]
        np.fill_diagonal(same, False)
        within = co[same].mean()
        across = co[~same].mean()
        assert within > 5 * across

    def test_unlabeled_fraction_and_popularity_bias(self):
        config = SyntheticConfig(seed=4)
        truth = synthetic_ground_truth(config)
        catalog, matrix = generate_synthetic(config)
        unlabeled = [r.item_id for r in catalog.records if not r.labeled]
        assert len(unlabeled) == round(config.unlabeled_fraction * config.num_items)
        counts = matrix.item_counts()
        labeled_mask = np.array([catalog.record(i).labeled for i in matrix.items])
        assert counts[labeled_mask].mean() > counts[~labeled_mask].mean()

    def test_balanced_classes_by_default(self):
        truth = synthetic_ground_truth(SyntheticConfig(seed=0))
        counts = np.bincount(truth.item_classes)
        assert counts.min() == counts.max() == 75

    def test_class_skew_produces_long_tail(self):
        truth = synthetic_ground_truth(SyntheticConfig(class_skew=1.5, seed=0))
        counts = np.sort(np.bincount(truth.item_classes, minlength=8))[::-1]
        assert counts[0] > 3 * counts[-1]


class TestDeterminism:
    def test_same_config_same_dataset(self, tmp_path):
        config = SyntheticConfig(num_items=40, num_users=30, seed=9)
        cat_a, mat_a = generate_synthetic(config, tmp_path / "a")
        cat_b, mat_b = generate_synthetic(config, tmp_path / "b")
        assert mat_a.entry_pairs() == mat_b.entry_pairs()
        for ra, rb in zip(cat_a.records, cat_b.records):
            assert (ra.labels is None) == (rb.labels is None)
            if ra.labels is not None:
                assert np.array_equal(ra.labels, rb.labels)
            pa = (tmp_path / "a" / f"{ra.item_id}.png").read_bytes()
            pb = (tmp_path / "b" / f"{rb.item_id}.png").read_bytes()
            assert pa == pb

    def test_different_seeds_differ(self):
        a = synthetic_ground_truth(SyntheticConfig(seed=0))
        b = synthetic_ground_truth(SyntheticConfig(seed=1))
        assert not np.array_equal(a.item_classes, b.item_classes)


class TestValidation:
    def test_small_counts_rejected(self):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(num_items=1))

    def test_label_noise_bound(self):
        with pytest.raises(ValueError, match="label_noise"):
            generate_synthetic(SyntheticConfig(label_noise=0.5))

    def test_unlabeled_fraction_bound(self):
        with pytest.raises(ValueError, match="unlabeled_fraction"):
            generate_synthetic(SyntheticConfig(unlabeled_fraction=1.0))

    def test_color_mode_checked(self):
        with pytest.raises(ValueError, match="color_mode"):
            generate_synthetic(SyntheticConfig(color_mode="stripes"))

    def test_class_limit(self):
        with pytest.raises(ValueError, match="classes"):
            synthetic_ground_truth(SyntheticConfig(num_classes=9, color_mode="item"))

    def test_digest_changes_with_fields(self):
        assert SyntheticConfig(seed=0).digest() != SyntheticConfig(seed=1).digest()
