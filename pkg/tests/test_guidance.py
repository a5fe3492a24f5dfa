"""Probe model and confidence weighting schemes."""

import math

import numpy as np
import pytest

from cactus import guidance
from cactus.cf import EmbeddingTable
from cactus.data import SplitAssignment
from cactus.guidance import (CF2LabelHyper, GuidanceError, WeightTable,
                             load_weights, positive_label_nll, predict_labels,
                             save_weights, train_cf2label, weight_interaction,
                             weight_lossbased, weight_uniform)
from cactus.metrics import class_popularity_scores, mean_average_precision


@pytest.fixture(scope="module")
def probe(bundle):
    return train_cf2label(bundle.embeddings, bundle.catalog, bundle.split,
                          CF2LabelHyper(), seed=0)


class TestTrainProbe:
    def test_deterministic_parameters(self, bundle):
        a = train_cf2label(bundle.embeddings, bundle.catalog, bundle.split, seed=4)
        b = train_cf2label(bundle.embeddings, bundle.catalog, bundle.split, seed=4)
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
            assert np.array_equal(wa, wb) and np.array_equal(ba, bb)

    def test_too_few_items_rejected(self, bundle):
        tiny = EmbeddingTable(bundle.embeddings.item_ids[:1],
                              bundle.embeddings.vectors[:1],
                              bundle.embeddings.provenance)
        with pytest.raises(GuidanceError, match="at least 2"):
            train_cf2label(tiny, bundle.catalog, bundle.split)

    def test_zero_embeddings_are_uninformative(self, bundle):
        """All-zero inputs collapse to a constant prediction whose test mAP
        sits at the class-prior baseline level (no-signal control)."""
        zeros = EmbeddingTable(bundle.embeddings.item_ids,
                               np.zeros_like(bundle.embeddings.vectors),
                               bundle.embeddings.provenance)
        model = train_cf2label(zeros, bundle.catalog, bundle.split,
                               CF2LabelHyper(epochs=60), seed=0)
        test_ids = sorted(i for i in bundle.split.test_items
                          if bundle.catalog.record(i).labeled)
        labels = np.stack([bundle.catalog.record(i).labels for i in test_ids])
        constant = model.forward(np.zeros((len(test_ids), bundle.embeddings.f)))
        assert np.allclose(constant, constant[0])  # identical for every item
        probe_map = mean_average_precision(test_ids, constant, labels).map
        prior = class_popularity_scores(bundle.catalog, bundle.split)
        base_map = mean_average_precision(
            test_ids, np.tile(prior, (len(test_ids), 1)), labels).map
        assert probe_map == pytest.approx(base_map, abs=0.08)


class TestPredictLabels:
    def test_outputs_in_unit_interval(self, probe, bundle):
        rng = np.random.default_rng(0)
        for _ in range(20):
            y = predict_labels(probe, rng.normal(size=bundle.embeddings.f))
            assert y.shape == (bundle.catalog.num_classes,)
            assert np.all((y > 0) & (y < 1))

    def test_length_mismatch_rejected(self, probe):
        with pytest.raises(GuidanceError, match="length"):
            predict_labels(probe, np.zeros(3))

    def test_forward_matches_dense_arithmetic_oracle(self, probe, bundle):
        rng = np.random.default_rng(1)
        for _ in range(10):
            q = rng.normal(size=bundle.embeddings.f)
            fast = predict_labels(probe, q)
            # naive per-unit recomputation
            act = q
            for W, b in probe.layers[:-1]:
                nxt = np.empty(W.shape[1])
                for j in range(W.shape[1]):
                    total = b[j]
                    for i in range(W.shape[0]):
                        total += act[i] * W[i, j]
                    nxt[j] = max(total, 0.0)
                act = nxt
            W, b = probe.layers[-1]
            naive = np.empty(W.shape[1])
            for j in range(W.shape[1]):
                total = b[j]
                for i in range(W.shape[0]):
                    total += act[i] * W[i, j]
                naive[j] = 1.0 / (1.0 + math.exp(-total))
            assert np.allclose(fast, naive, atol=1e-6)


class TestWeightUniform:
    def test_embedded_items_get_one(self, bundle):
        table = weight_uniform(list(bundle.split.train_items), bundle.embeddings)
        embedded = [i for i in bundle.split.train_items if i in bundle.embeddings]
        assert all(table.get(i) == 1.0 for i in embedded)

    def test_items_without_embedding_get_zero(self):
        emb = EmbeddingTable(["i1"], np.ones((1, 2)), {})
        table = weight_uniform(["i1", "i2"], emb)
        assert table.get("i2") == 0.0

    def test_mean_over_weighted_items_is_one(self, bundle):
        table = weight_uniform(list(bundle.split.train_items), bundle.embeddings)
        positive = [w for w in table.weights.values() if w > 0]
        assert np.mean(positive) == pytest.approx(1.0, abs=1e-9)


class TestWeightInteraction:
    def matrix(self):
        from cactus.data import InteractionMatrix
        pairs = {(f"u{k}", "i1") for k in range(4)} | \
                {(f"u{k}", "i2") for k in range(9)} | {("u0", "i3")}
        users = sorted({u for u, _ in pairs})
        return InteractionMatrix(users, ["i1", "i2", "i3", "i4"], pairs)

    def test_sqrt_counts_with_ratio_preserved(self):
        table = weight_interaction(self.matrix())
        assert table.get("i2") / table.get("i1") == pytest.approx(3.0 / 2.0)

    def test_zero_count_gives_zero_weight(self):
        assert weight_interaction(self.matrix()).get("i4") == 0.0

    def test_monotone_in_counts(self, bundle):
        table = weight_interaction(bundle.cf_train)
        counts = dict(zip(bundle.cf_train.items, bundle.cf_train.item_counts()))
        items = [i for i in table.weights if counts[i] > 0]
        from scipy.stats import spearmanr
        rho = spearmanr([counts[i] for i in items],
                        [table.weights[i] for i in items]).statistic
        assert rho == pytest.approx(1.0)

    def test_mean_one_after_normalization(self):
        table = weight_interaction(self.matrix())
        positive = [w for w in table.weights.values() if w > 0]
        assert np.mean(positive) == pytest.approx(1.0, abs=1e-9)


class TestWeightLossBased:
    def make_probe_stub(self, prob_rows):
        """A stand-in probe whose forward returns fixed probabilities."""
        class Stub:
            input_dim = 2

            def forward(self, Q):
                return np.tile(prob_rows, (Q.shape[0], 1))
        return Stub()

    def catalog(self, labels_by_item):
        from cactus.data import ItemCatalog, ItemRecord
        n = len(next(iter(labels_by_item.values())))
        records = tuple(ItemRecord(i, f"{i}.png",
                                   None if v is None else np.array(v, dtype=np.int8))
                        for i, v in labels_by_item.items())
        return ItemCatalog(records=records,
                           class_names=tuple(f"c{k}" for k in range(n)))

    def test_single_positive_unit_nll(self):
        # one positive predicted at e^-1: mean NLL 1, raw weight 1
        probs = np.array([math.exp(-1), 0.5])
        nll = positive_label_nll(probs, np.array([1, 0]))
        assert nll == pytest.approx(1.0, abs=1e-9)

    def test_two_positive_example(self):
        probs = np.array([math.exp(-1), math.exp(-3)])
        nll = positive_label_nll(probs, np.array([1, 1]))
        assert nll == pytest.approx(2.0, abs=1e-9)  # raw weight 1/2

    def test_perfect_prediction_capped_by_clip(self):
        nll = positive_label_nll(np.array([1.0, 0.0]), np.array([1, 0]))
        assert nll == pytest.approx(-math.log(1 - guidance.EPS_PROB), rel=1e-6)
        assert nll > 0

    def test_weights_antitone_in_nll(self):
        emb = EmbeddingTable(["i1", "i2"], np.zeros((2, 2)), {})
        cat = self.catalog({"i1": [1, 0], "i2": [0, 1]})
        stub = self.make_probe_stub(np.array([0.9, 0.2]))
        table = weight_lossbased(stub, emb, cat)
        # i1's positive is predicted 0.9 (low NLL), i2's is 0.2 (high NLL)
        assert table.get("i1") > table.get("i2") > 0

    def test_unlabeled_items_get_zero(self):
        emb = EmbeddingTable(["i1", "i2"], np.zeros((2, 2)), {})
        cat = self.catalog({"i1": [1, 0], "i2": None})
        table = weight_lossbased(self.make_probe_stub(np.array([0.5, 0.5])), emb, cat)
        assert table.get("i2") == 0.0

    def test_zero_positive_labeled_item_warns_and_zeroes(self, caplog):
        emb = EmbeddingTable(["i1", "i2"], np.zeros((2, 2)), {})
        cat = self.catalog({"i1": [1, 0], "i2": [0, 0]})
        with caplog.at_level("WARNING"):
            table = weight_lossbased(self.make_probe_stub(np.array([0.5, 0.5])), emb, cat)
        assert table.get("i2") == 0.0
        assert any("no positives" in rec.message for rec in caplog.records)

    def test_normalized_mean_one(self, bundle, probe):
        table = weight_lossbased(probe, bundle.embeddings, bundle.catalog)
        positive = [w for w in table.weights.values() if w > 0]
        assert np.mean(positive) == pytest.approx(1.0, abs=1e-9)


class TestWeightsFile:
    def test_round_trip_and_stability(self, tmp_path, bundle):
        table = weight_interaction(bundle.cf_train)
        path = tmp_path / "weights.tsv"
        save_weights(table, path, config_hash="cafe01234567")
        loaded = load_weights(path)
        assert loaded.scheme == "interaction"
        assert loaded.omega_cap == table.omega_cap
        for item, w in table.weights.items():
            assert loaded.weights[item] == pytest.approx(w, rel=1e-8)
        path2 = tmp_path / "weights2.tsv"
        save_weights(loaded, path2, config_hash="cafe01234567")
        assert path.read_bytes() == path2.read_bytes()

    def test_rows_have_three_columns(self, tmp_path, bundle):
        table = weight_uniform(list(bundle.split.train_items), bundle.embeddings)
        path = tmp_path / "weights.tsv"
        save_weights(table, path)
        rows = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        assert all(len(r.split("\t")) == 3 for r in rows)


class TestPrestudy:
    def test_probe_beats_class_popularity(self):
        from cactus.synthetic import SyntheticConfig
        result = guidance.run_prestudy(
            seed=0, synthetic_config=SyntheticConfig(num_users=400, num_items=150,
                                                     interactions_per_user=12),
            bootstrap_B=200)
        assert result["probe_map"] > result["baseline_map"]
