"""Collaborative filtering: training, scoring, extraction, persistence."""

import numpy as np
import pytest

from cactus import cf
from cactus.data import InteractionMatrix, split_interactions
from cactus.metrics import bootstrap_ci, evaluate_auc
from cactus.synthetic import SyntheticConfig, generate_synthetic


def matrix_from_pairs(pairs):
    users = sorted({u for u, _ in pairs})
    items = sorted({i for _, i in pairs})
    return InteractionMatrix(users, items, pairs)


def small_synthetic(seed=0, users=40, items=30):
    config = SyntheticConfig(num_users=users, num_items=items, num_classes=4,
                             interactions_per_user=6, seed=seed)
    _, matrix = generate_synthetic(config)
    return matrix


class TestPopularity:
    def test_scores_are_interaction_counts(self):
        pairs = {(f"u{k}", "i1") for k in range(5)} | \
                {(f"u{k}", "i2") for k in range(2)} | \
                {(f"u{k}", "i3") for k in range(9)}
        m = matrix_from_pairs(pairs)
        model = cf.train_popularity(m)
        scores = model.score_user("u0")
        by_item = dict(zip(m.items, scores))
        assert by_item == {"i1": 5.0, "i2": 2.0, "i3": 9.0}
        order = [m.items[k] for k in np.lexsort((np.arange(3), -scores))]
        assert order == ["i3", "i1", "i2"]

    def test_ties_break_by_item_id_order(self):
        pairs = {("u1", "ib"), ("u1", "ia"), ("u2", "ia"), ("u2", "ib")}
        m = matrix_from_pairs(pairs)
        scores = cf.train_popularity(m).score_user("u1")
        order = [m.items[k] for k in np.lexsort((np.arange(2), -scores))]
        assert order == ["ia", "ib"]  # equal counts: stable id order

    def test_identical_vector_for_every_user(self):
        m = small_synthetic()
        model = cf.train_popularity(m)
        base = model.score_user(m.users[0])
        for user in m.users[1:5]:
            assert np.array_equal(model.score_user(user), base)

    def test_auc_matches_brute_force_pair_counting(self):
        m = small_synthetic(seed=3)
        train, test = split_interactions(m, 0.25, seed=1)
        model = cf.train_popularity(train)
        fast = evaluate_auc(model, train, test)
        # exhaustive (positive, negative) pair comparison
        train_by_user = {u: set() for u in range(train.num_users)}
        for u, i in zip(train.user_ids_idx, train.item_ids_idx):
            train_by_user[u].add(int(i))
        test_by_user = {}
        for u, i in zip(test.user_ids_idx, test.item_ids_idx):
            test_by_user.setdefault(int(u), set()).add(int(i))
        per_user = []
        for u, positives in sorted(test_by_user.items()):
            if not train_by_user[u]:
                continue
            scores = model.score_user(train.users[u])
            negatives = set(range(train.num_items)) - train_by_user[u] - positives
            if not positives or not negatives:
                continue
            wins = 0.0
            for p in positives:
                for n in negatives:
                    if scores[p] > scores[n]:
                        wins += 1.0
                    elif scores[p] == scores[n]:
                        wins += 0.5
            per_user.append(wins / (len(positives) * len(negatives)))
        assert fast == pytest.approx(np.mean(per_user), abs=1e-12)

    def test_empty_matrix_rejected(self):
        m = matrix_from_pairs({("u1", "i1")})._with_entries(np.zeros(1, dtype=bool))
        with pytest.raises(cf.CFError):
            cf.train_popularity(m)


class TestBPR:
    def test_two_users_learn_their_items(self):
        pairs = {("u1", "i1"), ("u2", "i2")}
        m = matrix_from_pairs(pairs)
        hyper = cf.CFHyper(f=4, epochs=200, learning_rate=0.1, batch_size=2)
        model = cf.train_bpr(m, hyper, seed=0)
        s1 = model.score_user("u1")
        s2 = model.score_user("u2")
        assert s1[m.item_index["i1"]] > s1[m.item_index["i2"]]
        assert s2[m.item_index["i2"]] > s2[m.item_index["i1"]]

    def test_untrained_model_auc_near_half(self):
        rng = np.random.default_rng(12)
        pairs = {(f"u{rng.integers(0, 30)}", f"i{rng.integers(0, 40):02d}")
                 for _ in range(300)}
        m = matrix_from_pairs(pairs)
        train, test = split_interactions(m, 0.3, seed=0)
        model = cf.train_bpr(train, cf.CFHyper(f=8, epochs=0), seed=0)
        _, per_user = evaluate_auc(model, train, test, return_per_user=True)
        lo, hi = bootstrap_ci(list(per_user.values()),
                              lambda recs: float(np.mean(recs)), B=1000, level=0.95)
        assert lo <= 0.5 <= hi

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(7)
        nu, ni, f = 6, 9, 4
        P = rng.normal(0, 0.5, (nu, f))
        Q = rng.normal(0, 0.5, (ni, f))
        b = rng.normal(0, 0.2, ni)
        triples = np.stack([rng.integers(0, nu, 25), rng.integers(0, ni, 25),
                            rng.integers(0, ni, 25)], axis=1)
        reg = 0.01
        _, dP, dQ, db = cf.bpr_objective(P, Q, b, triples, reg)
        h = 1e-6
        for arr, grad in ((P, dP), (Q, dQ), (b, db)):
            flat = arr.ravel()
            for idx in rng.choice(flat.size, min(10, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = cf.bpr_objective(P, Q, b, triples, reg)[0]
                flat[idx] = orig - h
                lm = cf.bpr_objective(P, Q, b, triples, reg)[0]
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                g = grad.ravel()[idx]
                assert abs(fd - g) / max(abs(fd), abs(g), 1e-10) < 1e-4

    def test_training_is_deterministic(self):
        m = small_synthetic(seed=5)
        hyper = cf.CFHyper(f=6, epochs=3)
        a = cf.train_bpr(m, hyper, seed=11)
        b = cf.train_bpr(m, hyper, seed=11)
        assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q)
        assert np.array_equal(a.bias, b.bias)

    def test_scores_equal_naive_dot_product(self):
        m = small_synthetic(seed=1)
        model = cf.train_bpr(m, cf.CFHyper(f=5, epochs=2), seed=0)
        u = m.users[3]
        fast = model.score_user(u)
        uidx = model.user_index[u]
        naive = np.array([float(sum(model.P[uidx][k] * model.Q[i][k]
                                    for k in range(5))) + model.bias[i]
                          for i in range(m.num_items)])
        assert np.allclose(fast, naive, atol=1e-12)


class TestVAE:
    def test_kl_is_nonnegative(self):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=(50, 8))
        logvar = rng.normal(size=(50, 8))
        assert (cf.gaussian_kl(mu, logvar) >= 0).all()

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(8)
        ni, f, hidden = 11, 4, 6
        params = cf._vae_init(rng, ni, hidden, f)
        X = (rng.random((5, ni)) < 0.3).astype(float)
        X[0, 0] = 1.0
        eps = rng.standard_normal((5, f))
        _, grads = cf.vae_loss_and_grads(params, X, eps, beta=0.15, reg=0.05)
        h = 1e-6
        for key in params:
            flat = params[key].ravel()
            for idx in rng.choice(flat.size, min(8, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = cf.vae_loss_and_grads(params, X, eps, 0.15, 0.05)[0]
                flat[idx] = orig - h
                lm = cf.vae_loss_and_grads(params, X, eps, 0.15, 0.05)[0]
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                g = grads[key].ravel()[idx]
                assert abs(fd - g) / max(abs(fd), abs(g), 1e-10) < 1e-4

    def test_reconstruction_ranks_own_items(self, bundle):
        model = bundle.vae
        train = bundle.cf_train
        rows = train.dense()
        hits = 0
        total = 0
        for uidx in range(train.num_users):
            interacted = np.flatnonzero(rows[uidx])
            if interacted.size == 0:
                continue
            scores = model.score_user(train.users[uidx])
            others = np.flatnonzero(rows[uidx] == 0)
            total += 1
            if scores[interacted].mean() > scores[others].mean():
                hits += 1
        assert hits / total >= 0.90

    def test_empty_user_rows_are_skipped(self):
        pairs = {("u1", "i1"), ("u1", "i2"), ("u2", "i1"), ("u3", "i2")}
        m = matrix_from_pairs(pairs)
        keep = ~np.isin(m.user_ids_idx, [m.user_index["u3"]])
        masked = m._with_entries(keep)  # u3's row is now empty
        model = cf.train_vae(masked, cf.CFHyper(f=2, epochs=2, batch_size=2), seed=0)
        for v in model.params.values():
            assert np.all(np.isfinite(v))

    def test_training_is_deterministic(self):
        m = small_synthetic(seed=2)
        hyper = cf.CFHyper(f=4, epochs=2)
        a = cf.train_vae(m, hyper, seed=3)
        b = cf.train_vae(m, hyper, seed=3)
        for key in a.params:
            assert np.array_equal(a.params[key], b.params[key])


class TestExtraction:
    def test_vae_vectors_are_decoder_columns_without_bias(self, bundle):
        table = cf.extract_item_embeddings(bundle.vae)
        assert table.f == bundle.vae.hyper.f
        wd = bundle.vae.params["Wd"]
        for item_id in table.item_ids[:10]:
            col = bundle.vae.items.index(item_id)
            assert np.array_equal(table.get(item_id), wd[:, col])

    def test_bpr_vectors_equal_q_rows(self):
        m = small_synthetic(seed=4)
        model = cf.train_bpr(m, cf.CFHyper(f=5, epochs=2), seed=0)
        table = cf.extract_item_embeddings(model)
        for item_id in table.item_ids[:10]:
            row = model.items.index(item_id)
            assert np.array_equal(table.get(item_id), model.Q[row])

    def test_popularity_has_no_latent_representation(self):
        m = small_synthetic()
        with pytest.raises(cf.CFError, match="latent"):
            cf.extract_item_embeddings(cf.train_popularity(m))

    def test_same_seed_gives_bit_identical_tables(self):
        m = small_synthetic(seed=6)
        hyper = cf.CFHyper(f=4, epochs=2)
        a = cf.extract_item_embeddings(cf.train_vae(m, hyper, seed=1))
        b = cf.extract_item_embeddings(cf.train_vae(m, hyper, seed=1))
        assert a.item_ids == b.item_ids
        assert np.array_equal(a.vectors, b.vectors)

    def test_coverage_is_exactly_interacted_items(self, bundle):
        table = bundle.embeddings
        counts = bundle.cf_train.item_counts()
        expected = {bundle.cf_train.items[k] for k in np.flatnonzero(counts > 0)}
        assert set(table.item_ids) == expected

    def test_zero_interaction_items_have_no_entry(self, bundle):
        held = set(bundle.split.val_items) | set(bundle.split.test_items)
        assert not (held & set(bundle.embeddings.item_ids))


class TestScoring:
    def test_unknown_user_rejected(self, bundle):
        with pytest.raises(cf.CFError, match="unknown user"):
            bundle.vae.score_user("nobody")

    def test_ranking_invariant_under_monotone_transform(self, bundle):
        scores = bundle.vae.score_user(bundle.cf_train.users[0])
        transformed = 3.0 * scores + 7.0
        assert np.array_equal(np.argsort(-scores), np.argsort(-transformed))


class TestEmbeddingsFile:
    def test_round_trip_and_stability(self, tmp_path, bundle):
        path = tmp_path / "embeddings.tsv"
        cf.save_embeddings(bundle.embeddings, path)
        loaded = cf.load_embeddings(path)
        assert loaded.item_ids == bundle.embeddings.item_ids
        assert np.allclose(loaded.vectors, bundle.embeddings.vectors,
                           rtol=1e-8, atol=1e-12)
        # writing the re-read table reproduces the bytes exactly
        path2 = tmp_path / "embeddings2.tsv"
        cf.save_embeddings(loaded, path2)
        assert path2.read_text().splitlines()[1:] == path.read_text().splitlines()[1:]

    def test_header_fields(self, tmp_path, bundle):
        path = tmp_path / "embeddings.tsv"
        cf.save_embeddings(bundle.embeddings, path)
        f, n, phash = path.read_text().splitlines()[0].split("\t")
        assert int(f) == bundle.embeddings.f
        assert int(n) == len(bundle.embeddings)
        assert len(phash) == 12

    def test_malformed_rows_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("2\t1\tdeadbeef0000\ni1\t0.5\n", encoding="utf-8")
        with pytest.raises(cf.CFError):
            cf.load_embeddings(path)
