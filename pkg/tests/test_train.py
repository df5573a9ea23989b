import dataclasses
import math

import mpmath
import numpy as np
import pytest

from bitgcf.graph import split_train_test
from bitgcf.model import ModelParams, VariantFlags, forward
from bitgcf.train import (AdamState, Batch, DivergenceError, Gradients,
                          SamplingError, TrainConfig, adam_step,
                          annealing_schedule, backward, bpr_loss, compute_batch,
                          rec_loss, sample_batch, sample_negatives, ste_backward,
                          total_loss, train_loop)
from conftest import graph_from_edges, random_graph

LN2 = math.log(2.0)


class TestSampling:
    def test_single_candidate_always_chosen(self, rng):
        # u0 interacts with every item except item 7
        edges = [(0, i) for i in range(8) if i != 7]
        g = graph_from_edges(1, 8, edges)
        negs = sample_negatives(g, np.zeros(50, dtype=np.int64), 1, rng)
        assert np.all(negs == 7)

    def test_deterministic_under_seed(self, rng):
        g = random_graph(rng, 10, 12, density=0.3)
        users = rng.integers(0, 10, size=64)
        a = sample_negatives(g, users, 2, np.random.default_rng(5))
        b = sample_negatives(g, users, 2, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_negatives_never_collide_with_train(self, rng):
        g = random_graph(rng, 10, 12, density=0.5)
        users = rng.integers(0, 10, size=200)
        negs = sample_negatives(g, users, 3, rng)
        grid = np.broadcast_to(users[:, None], negs.shape)
        assert not g.has_edges(grid, negs).any()

    def test_impossible_sampling_raises(self):
        g = graph_from_edges(1, 3, [(0, 0), (0, 1), (0, 2)])
        with pytest.raises(SamplingError):
            sample_negatives(g, np.array([0]), 1, np.random.default_rng(0))

    def test_empirical_distribution_uniform(self):
        # u0's non-neighbors are items 3..9; counts of 1e5 draws should sit
        # within 3 sigma of the multinomial expectation for each candidate
        g = graph_from_edges(1, 10, [(0, 0), (0, 1), (0, 2)])
        draws = 100_000
        negs = sample_negatives(g, np.zeros(draws, dtype=np.int64), 1,
                                np.random.default_rng(42)).ravel()
        counts = np.bincount(negs, minlength=10)
        assert counts[:3].sum() == 0
        p = 1.0 / 7.0
        sigma = math.sqrt(draws * p * (1 - p))
        for item in range(3, 10):
            assert abs(counts[item] - draws * p) < 3 * sigma

    def test_sample_batch_shapes_and_membership(self, rng):
        g = random_graph(rng, 8, 9, density=0.4)
        split = split_train_test(g, 0.25, seed=1)
        batch = sample_batch(split, 32, 2, np.random.default_rng(3), rec_neg_per_pos=1)
        assert batch.users.shape == (32,) and batch.pos_items.shape == (32,)
        assert batch.bpr_neg_items.shape == (32, 2)
        assert batch.rec_neg_items.shape == (32, 1)
        assert split.train.has_edges(batch.users, batch.pos_items).all()


class TestBprLoss:
    def test_equal_scores_give_ln2(self):
        assert bpr_loss([1.0, -2.0], [1.0, -2.0]) == pytest.approx(LN2, rel=1e-12)

    def test_large_gaps_are_stable(self):
        assert bpr_loss([50.0], [0.0]) == pytest.approx(0.0, abs=1e-20)
        assert bpr_loss([0.0], [50.0]) == pytest.approx(50.0, rel=1e-12)
        assert np.isfinite(bpr_loss([-1000.0], [1000.0]))

    def test_matches_extended_precision_oracle(self, rng):
        # term-by-term -ln(sigmoid(pos - neg)) at 60 decimal digits
        pos = rng.standard_normal(200) * 10
        neg = rng.standard_normal(200) * 10
        with mpmath.workdps(60):
            terms = [-mpmath.log(mpmath.sig(p - n)) if hasattr(mpmath, "sig")
                     else -mpmath.log(1 / (1 + mpmath.e ** (n - p)))
                     for p, n in zip(pos, neg)]
            oracle = float(mpmath.fsum(terms) / len(terms))
        assert bpr_loss(pos, neg) == pytest.approx(oracle, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bpr_loss([1.0, 2.0], [1.0])


class TestRecLoss:
    def test_zero_scores_give_ln2(self):
        v_u = np.array([[1.0, 0.0]])
        v_pos = np.array([[0.0, 1.0]])
        v_neg = np.array([[[0.0, -1.0]]])
        assert rec_loss(v_u, v_pos, v_neg) == pytest.approx(LN2, rel=1e-12)

    def test_confident_scores(self):
        v_u = np.array([[50.0]])
        # positive with score +50 -> ~0; negative with score +50 -> ~50
        assert rec_loss(v_u, np.array([[1.0]]), np.array([[[1.0]]])) == \
            pytest.approx(25.0, rel=1e-10)
        assert rec_loss(v_u, np.array([[1.0]]), np.array([[[-1.0]]])) == \
            pytest.approx(0.0, abs=1e-12)

    def test_mean_over_all_terms(self, rng):
        v_u = rng.standard_normal((4, 3))
        v_p = rng.standard_normal((4, 3))
        v_n = rng.standard_normal((4, 2, 3))
        z_pos = (v_u * v_p).sum(1)
        z_neg = np.einsum("bc,bnc->bn", v_u, v_n)
        oracle = (np.log1p(np.exp(-z_pos)).sum() + np.log1p(np.exp(z_neg)).sum()) / 12
        assert rec_loss(v_u, v_p, v_n) == pytest.approx(oracle, rel=1e-12)


class TestTotalLoss:
    def _params(self):
        return ModelParams(base_embeddings=np.full((2, 2), 0.5),
                           transform=np.full((2, 2), -0.5), num_layers=1)

    def test_zero_lambda_sums_losses(self):
        assert total_loss(0.3, 0.4, self._params(), 0.0) == pytest.approx(0.7)

    def test_switches(self):
        p = self._params()
        assert total_loss(0.3, 0.4, p, 0.0, use_bpr=False) == pytest.approx(0.4)
        assert total_loss(0.3, 0.4, p, 0.0, use_rec=False) == pytest.approx(0.3)
        with pytest.raises(ValueError):
            total_loss(0.3, 0.4, p, 0.0, use_bpr=False, use_rec=False)

    def test_regularizer_counts_all_tensors(self):
        # 8 entries of 0.25 squared = 2.0, times lambda
        assert total_loss(0.0, 0.0, self._params(), 0.5) == pytest.approx(1.0)

    def test_zero_params_no_penalty(self):
        p = ModelParams(base_embeddings=np.zeros((2, 2)), transform=np.zeros((2, 2)),
                        num_layers=1)
        assert total_loss(1.0, 1.0, p, 123.0) == pytest.approx(2.0)


class TestSteBackward:
    def test_clipping_rule(self):
        out = ste_backward(np.array([0.3, 0.7]), np.array([0.5, -1.5]))
        np.testing.assert_array_equal(out, [0.3, 0.0])

    def test_boundary_passes(self):
        g = np.array([2.0, -3.0])
        np.testing.assert_array_equal(ste_backward(g, np.array([1.0, -1.0])), g)

    def test_zero_upstream(self, rng):
        phi = rng.standard_normal(20)
        np.testing.assert_array_equal(ste_backward(np.zeros(20), phi), np.zeros(20))

    def test_mask_is_exact_indicator(self, rng):
        g = rng.standard_normal(100)
        phi = rng.standard_normal(100) * 2
        np.testing.assert_array_equal(ste_backward(g, phi), g * (np.abs(phi) <= 1))


def finite_difference_grads(loss_fn, params, h=1e-4):
    """Central differences of a scalar loss over every parameter tensor."""
    out = {}
    for name, tensor in params.named_tensors():
        g = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + h
            up = loss_fn(params)
            tensor[idx] = orig - h
            down = loss_fn(params)
            tensor[idx] = orig
            g[idx] = (up - down) / (2 * h)
            it.iternext()
        out[name] = g
    return out


def make_fixed_batch(split, size, seed, rec_negs=True):
    rng = np.random.default_rng(seed)
    return sample_batch(split, size, 1, rng, rec_neg_per_pos=1 if rec_negs else None)


class TestBackward:
    def test_masked_gradients_match_finite_differences(self, rng):
        # 6-node graph, quantization masked: the model is differentiable
        g = random_graph(rng, 3, 3, density=0.6)
        split = split_train_test(g, 0.3, seed=2)
        params = ModelParams.initialize(g.num_nodes, 3, 3, 2,
                                        np.random.default_rng(1), init_std=0.5)
        flags = VariantFlags(mode="end", quantization_enabled=False)
        batch = make_fixed_batch(split, 8, seed=4)

        def loss_fn(p):
            values, _ = compute_batch(p, split.train, batch, flags, 0.01,
                                      want_grads=False)
            return values.total

        _, grads = compute_batch(params, split.train, batch, flags, 0.01)
        fd = finite_difference_grads(loss_fn, params)
        for name, analytic in grads.named_tensors():
            denom = np.maximum(np.abs(fd[name]), 1e-8)
            rel = np.abs(analytic - fd[name]) / denom
            assert rel.max() < 1e-4, f"{name}: max rel err {rel.max():.2e}"

    def test_learnable_factor_gradients_match_inner_product_rule(self, rng):
        g = random_graph(rng, 3, 4, density=0.5)
        params = ModelParams.initialize(g.num_nodes, 3, 3, 2,
                                        np.random.default_rng(2),
                                        learnable_rescaling=True)
        params.learnable_factors[:] = rng.uniform(0.5, 1.5, params.learnable_factors.shape)
        flags = VariantFlags(mode="anl", rescaling="learnable")
        cache = forward(params, g, flags)
        grad_f = rng.standard_normal((g.num_nodes, 3))
        grads = backward(cache, grad_f, params, flags, training=True)
        upstream = grad_f / (cache.num_layers + 1)
        for layer in range(cache.num_layers + 1):
            expected = (upstream * cache.codes[layer]).sum(axis=1)
            np.testing.assert_allclose(grads.learnable_factors[:, layer], expected,
                                       atol=1e-12)

    def test_saturated_quantization_blocks_ranking_gradients(self, rng):
        # every |phi| > 1 at every layer: the straight-through mask zeroes the
        # whole ranking path, so only the continuous-entry gradient survives
        g = random_graph(rng, 3, 3, density=0.6)
        base = rng.uniform(1.0, 2.0, size=(g.num_nodes, 2))
        transform = np.full((2, 2), 5.0) + np.diag([1.0, 2.0])
        params = ModelParams(base_embeddings=base, transform=transform, num_layers=1)
        flags = VariantFlags(mode="end")
        cache = forward(params, g, flags)
        for layer in range(2):
            assert np.all(np.abs(cache.preactivation[layer]) > 1)

        grad_f = rng.standard_normal((g.num_nodes, 2))
        grad_vL = rng.standard_normal((g.num_nodes, 2))
        full = backward(cache, grad_f, params, flags, grad_last_continuous=grad_vL)
        rec_only = backward(cache, np.zeros_like(grad_f), params, flags,
                            grad_last_continuous=grad_vL)
        np.testing.assert_array_equal(full.base_embeddings, rec_only.base_embeddings)
        np.testing.assert_array_equal(full.transform, rec_only.transform)

    def test_zero_upstream_zero_gradients(self, rng):
        g = random_graph(rng, 3, 3, density=0.5)
        params = ModelParams.initialize(g.num_nodes, 2, 2, 1, np.random.default_rng(0))
        flags = VariantFlags(mode="end")
        cache = forward(params, g, flags)
        grads = backward(cache, np.zeros((g.num_nodes, 2)), params, flags)
        assert not grads.base_embeddings.any()
        assert not grads.transform.any()

    def test_batch_regularizer_gradient_matches_finite_differences(self, rng):
        g = random_graph(rng, 3, 3, density=0.6)
        split = split_train_test(g, 0.3, seed=5)
        params = ModelParams.initialize(g.num_nodes, 2, 2, 1,
                                        np.random.default_rng(3), init_std=0.3)
        flags = VariantFlags(mode="end", quantization_enabled=False)
        batch = make_fixed_batch(split, 6, seed=6)

        def reg_only(p):
            with_reg, _ = compute_batch(p, split.train, batch, flags, 0.7,
                                        want_grads=False)
            without, _ = compute_batch(p, split.train, batch, flags, 0.0,
                                       want_grads=False)
            return with_reg.total - without.total

        _, g_with = compute_batch(params, split.train, batch, flags, 0.7)
        _, g_without = compute_batch(params, split.train, batch, flags, 0.0)
        fd = finite_difference_grads(reg_only, params)
        for name, _ in params.named_tensors():
            analytic = getattr(g_with, name) - getattr(g_without, name)
            np.testing.assert_allclose(analytic, fd[name], atol=1e-7)

    def test_full_table_l2_gradient_is_2_lambda_theta(self, rng):
        # the standalone objective regularizes every tensor entry
        params = ModelParams.initialize(6, 2, 2, 1, np.random.default_rng(4),
                                        init_std=0.5)
        lam = 0.31

        def loss_fn(p):
            return total_loss(0.0, 0.0, p, lam)

        fd = finite_difference_grads(loss_fn, params, h=1e-5)
        for name, tensor in params.named_tensors():
            np.testing.assert_allclose(fd[name], 2 * lam * tensor, atol=1e-8)


class TestAdam:
    def _toy_params(self, value=0.0):
        return ModelParams(base_embeddings=np.full((1, 1), value),
                           transform=np.full((1, 1), value), num_layers=1)

    def test_first_step_magnitude_is_learning_rate(self):
        params = self._toy_params(0.0)
        state = AdamState.for_params(params)
        grads = Gradients(base_embeddings=np.array([[3.7]]),
                          transform=np.array([[-0.002]]))
        adam_step(params, grads, state, learning_rate=0.01)
        # bias-corrected first step is lr * g / (|g| + eps) ~= lr * sign(g)
        assert params.base_embeddings[0, 0] == pytest.approx(-0.01, rel=1e-6)
        assert params.transform[0, 0] == pytest.approx(0.01, rel=1e-4)

    def test_zero_gradient_keeps_params(self):
        params = self._toy_params(1.5)
        state = AdamState.for_params(params)
        grads = Gradients(base_embeddings=np.zeros((1, 1)), transform=np.zeros((1, 1)))
        adam_step(params, grads, state, learning_rate=0.1)
        assert params.base_embeddings[0, 0] == 1.5
        assert params.transform[0, 0] == 1.5

    def test_non_finite_gradient_raises(self):
        params = self._toy_params(0.0)
        state = AdamState.for_params(params)
        grads = Gradients(base_embeddings=np.array([[np.nan]]),
                          transform=np.zeros((1, 1)))
        with pytest.raises(DivergenceError):
            adam_step(params, grads, state, learning_rate=0.1)

    def test_quadratic_bowl_descends_monotonically(self):
        # scalar toy problem: minimize theta^2 from theta = 1; at lr = 0.01 the
        # 100 steps stay in the descent phase, before Adam's ringing sets in
        params = self._toy_params(1.0)
        state = AdamState.for_params(params)
        losses = []
        for _ in range(100):
            losses.append(params.base_embeddings[0, 0] ** 2
                          + params.transform[0, 0] ** 2)
            grads = Gradients(base_embeddings=2 * params.base_embeddings,
                              transform=2 * params.transform)
            adam_step(params, grads, state, learning_rate=0.01)
        losses.append(params.base_embeddings[0, 0] ** 2 + params.transform[0, 0] ** 2)
        assert np.all(np.diff(losses) < 0)
        assert losses[-1] < 0.06 * losses[0]


class TestAnnealingSchedule:
    def test_half_epoch_trigger(self):
        cfg = TrainConfig(mode="anl", epochs=100)
        assert cfg.anneal_trigger_epoch == 50
        assert annealing_schedule(49, cfg) is False
        assert annealing_schedule(50, cfg) is True

    def test_end_mode_always_on(self):
        cfg = TrainConfig(mode="end", epochs=10)
        assert all(annealing_schedule(e, cfg) for e in range(1, 11))

    def test_trigger_one_quantizes_from_start(self):
        cfg = TrainConfig(mode="anl", epochs=10, anneal_trigger_epoch=1)
        assert all(annealing_schedule(e, cfg) for e in range(1, 11))

    def test_fp_mode_never_quantizes(self):
        cfg = TrainConfig(mode="fp", epochs=10)
        assert not any(annealing_schedule(e, cfg) for e in range(1, 11))

    def test_epoch_bounds(self):
        cfg = TrainConfig(mode="end", epochs=5)
        with pytest.raises(ValueError):
            annealing_schedule(0, cfg)
        with pytest.raises(ValueError):
            annealing_schedule(6, cfg)


class TestTrainConfig:
    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(l2_coeff=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(mode="half")
        with pytest.raises(ValueError):
            TrainConfig(mode="end", anneal_trigger_epoch=5, epochs=10)
        with pytest.raises(ValueError):
            TrainConfig(mode="anl", epochs=10, anneal_trigger_epoch=11)

    def test_variant_table(self):
        assert TrainConfig.for_variant("wo-tq").topology_aware is False
        assert TrainConfig.for_variant("wo-bpr").use_bpr is False
        assert TrainConfig.for_variant("wo-rec").use_rec is False
        assert TrainConfig.for_variant("wo-raf").rescaling == "none"
        assert TrainConfig.for_variant("in-lf").rescaling == "learnable"
        wo_at = TrainConfig.for_variant("wo-at", epochs=40)
        assert wo_at.mode == "anl" and wo_at.anneal_trigger_epoch == 1
        with pytest.raises(ValueError):
            TrainConfig.for_variant("wo-everything")

    def test_anl_defaults_to_deterministic_rescaling(self):
        assert TrainConfig(mode="anl").rescaling == "deterministic"
        assert TrainConfig(mode="end").rescaling == "none"


def tiny_config(**kw):
    base = dict(batch_size=16, epochs=2, num_layers=1, embed_dim=4, code_dim=4,
                seed=3, mode="end")
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_bitwise_reproducible(self, rng):
        g = random_graph(rng, 5, 6, density=0.35)
        split = split_train_test(g, 0.3, seed=1)
        p1, h1 = train_loop(tiny_config(), split)
        p2, h2 = train_loop(tiny_config(), split)
        np.testing.assert_array_equal(p1.base_embeddings, p2.base_embeddings)
        np.testing.assert_array_equal(p1.transform, p2.transform)
        assert [dataclasses.astuple(r) for r in h1.records] == \
            [dataclasses.astuple(r) for r in h2.records]

    def test_one_record_per_epoch(self, rng):
        g = random_graph(rng, 5, 6, density=0.35)
        split = split_train_test(g, 0.3, seed=1)
        _, hist = train_loop(tiny_config(epochs=5), split)
        assert [r.epoch for r in hist.records] == [1, 2, 3, 4, 5]

    def test_loss_collapses_on_toy_graph_when_masked(self):
        # two clean user/item blocks, 50 train edges, quantization masked
        from bitgcf.graph import SplitDataset
        edges = [(u, i) for u in range(5) for i in range(5)] + \
                [(u + 5, i + 5) for u in range(5) for i in range(5)]
        g = graph_from_edges(10, 10, edges)
        split = SplitDataset(train=g,
                             test_positives=[np.array([], dtype=np.int64)] * 10)
        cfg = TrainConfig(mode="fp", epochs=200, batch_size=64, num_layers=2,
                          embed_dim=8, code_dim=8, learning_rate=0.01, seed=1)
        _, hist = train_loop(cfg, split)
        assert hist.records[-1].total_loss < 0.1 * hist.records[0].total_loss

    def test_disabled_losses_fail_before_training(self, rng):
        g = random_graph(rng, 4, 4, density=0.5)
        split = split_train_test(g, 0.3, seed=1)
        with pytest.raises(ValueError):
            train_loop(tiny_config(use_bpr=False, use_rec=False), split)

    def test_history_csv_format(self, rng, tmp_path):
        g = random_graph(rng, 5, 6, density=0.4)
        split = split_train_test(g, 0.3, seed=1)
        _, hist = train_loop(tiny_config(epochs=3, eval_every=2, eval_k=5), split)
        path = tmp_path / "history.csv"
        hist.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,total_loss,bpr_loss,rec_loss,quant_enabled,recall@5,ndcg@5"
        assert len(lines) == 4
        row1 = lines[1].split(",")
        assert row1[0] == "1" and row1[5] == "" and row1[6] == ""
        row2 = lines[2].split(",")
        assert row2[5] != "" and row2[6] != ""

    def test_early_stopping_cuts_run_short(self, rng):
        g = random_graph(rng, 6, 7, density=0.5)
        split = split_train_test(g, 0.3, seed=2)
        cfg = tiny_config(epochs=40, eval_every=1, early_stop_patience=3)
        _, hist = train_loop(cfg, split)
        assert len(hist.records) < 40
