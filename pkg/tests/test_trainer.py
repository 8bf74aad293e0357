import math

import numpy as np
import pytest

from graphmoe.csbm import sample_blended_csbm, sample_csbm, CsbmParams
from graphmoe.experts import Expert, ExpertSpec, build_ensemble
from graphmoe.graph import build_graph
from graphmoe.nn import (
    derive_seed,
    max_relative_error,
    numerical_gradient,
    rng_stream,
    softmax_cross_entropy,
)
from graphmoe.patterns import WalkConfig, sample_walk_contexts
from graphmoe.training import (
    Masks,
    RunResult,
    SplitSpec,
    TrainConfig,
    accuracy,
    build_mixture,
    config_from_dict,
    default_expert_specs,
    joint_train,
    load_mixture,
    make_splits,
    moe_loss,
    pretrain_experts,
    run_experiment,
    run_one,
    train_single_expert,
)


def tiny_blend(n=240, seed=0, sigma=0.6):
    return sample_blended_csbm(
        n=n, homo=(0.16, 0.04), hetero=(0.04, 0.16),
        mu=np.array([-0.5, 0.0]), nu=np.array([0.5, 0.0]),
        sigma=sigma, seed=seed)


def small_config(**kw):
    base = dict(
        expert_specs=tuple(default_expert_specs(hidden=32)),
        gating_hidden=32,
        disc_hidden=(32,),
        walk=WalkConfig(walk_length=5, num_walks=2),
        pretrain_epochs=60,
        joint_epochs=80,
        patience=30,
        expert_lr=0.01,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestSplits:
    def test_exact_fractions(self):
        masks = make_splits(10, SplitSpec(seed=0))
        assert (masks.train.sum(), masks.val.sum(), masks.test.sum()) == (6, 2, 2)

    def test_floor_floor_remainder(self):
        masks = make_splits(7, SplitSpec(seed=0))
        assert (masks.train.sum(), masks.val.sum(), masks.test.sum()) == (4, 1, 2)

    def test_deterministic(self):
        a = make_splits(50, SplitSpec(seed=3, split_index=4))
        b = make_splits(50, SplitSpec(seed=3, split_index=4))
        assert (a.train == b.train).all() and (a.test == b.test).all()

    def test_different_split_indices_differ(self):
        a = make_splits(50, SplitSpec(seed=3, split_index=0))
        b = make_splits(50, SplitSpec(seed=3, split_index=1))
        assert (a.train != b.train).any()

    def test_masks_partition(self):
        masks = make_splits(33, SplitSpec(seed=1, split_index=2))
        total = masks.train.astype(int) + masks.val.astype(int) + masks.test.astype(int)
        assert (total == 1).all()

    def test_overlapping_masks_rejected(self):
        m = np.ones(5, dtype=bool)
        with pytest.raises(ValueError):
            Masks(train=m, val=m, test=m)

    def test_split_index_range(self):
        with pytest.raises(ValueError):
            SplitSpec(seed=0, split_index=10)


class TestMoeLoss:
    def test_single_expert_reduces_to_plain_loss(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((6, 3))
        labels = rng.integers(0, 3, size=6)
        mask = np.ones(6, dtype=bool)
        gate = np.ones((6, 1))
        loss, dlogits, dgate = moe_loss([logits], gate, labels, mask)
        ref_loss, ref_grad = softmax_cross_entropy(logits, labels)
        assert loss == pytest.approx(ref_loss, rel=1e-12)
        np.testing.assert_allclose(dlogits[0], ref_grad, atol=1e-15)

    def test_zero_mixed_logit_gives_log_two(self):
        logits = np.zeros((4, 2))
        gate = np.ones((4, 1))
        labels = np.array([0, 1, 0, 1])
        loss, _, _ = moe_loss([logits], gate, labels, np.ones(4, dtype=bool))
        assert loss == pytest.approx(math.log(2), rel=1e-12)

    def test_opposing_experts_cancel_to_log_c(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((5, 4))
        gate = np.full((5, 2), 0.5)
        labels = rng.integers(0, 4, size=5)
        loss, _, _ = moe_loss([z, -z], gate, labels, np.ones(5, dtype=bool))
        assert loss == pytest.approx(math.log(4), rel=1e-12)

    def test_binary_matches_logistic_form(self):
        # two-class softmax CE equals log(1 + exp(-y * (z1 - z0))), y in {-1,+1}
        rng = np.random.default_rng(2)
        logits = [rng.standard_normal((8, 2)) for _ in range(3)]
        gate = np.random.default_rng(3).dirichlet(np.ones(3), size=8)
        labels = rng.integers(0, 2, size=8)
        mask = np.ones(8, dtype=bool)
        loss, _, _ = moe_loss(logits, gate, labels, mask)
        mixed = sum(gate[:, j:j + 1] * logits[j] for j in range(3))
        signed = np.where(labels == 1, 1.0, -1.0)
        expected = np.mean(np.log1p(np.exp(-signed * (mixed[:, 1] - mixed[:, 0]))))
        assert loss == pytest.approx(expected, rel=1e-10)

    def test_loss_averages_over_mask_only(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((6, 2))
        labels = rng.integers(0, 2, size=6)
        mask = np.zeros(6, dtype=bool)
        mask[:3] = True
        loss, dlogits, _ = moe_loss([logits], np.ones((6, 1)), labels, mask)
        ref, _ = softmax_cross_entropy(logits[:3], labels[:3])
        assert loss == pytest.approx(ref, rel=1e-12)
        assert (dlogits[0][3:] == 0).all()

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            moe_loss([np.zeros((3, 2))], np.ones((3, 1)),
                     np.zeros(3, dtype=int), np.zeros(3, dtype=bool))


class TestComposedGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_mixture_loss_matches_finite_differences(self, seed):
        """End-to-end check: experts + discriminator + gate, one objective."""
        rng = np.random.default_rng(seed)
        edges = [(i, j) for i in range(9) for j in range(i + 1, 9)
                 if rng.random() < 0.4]
        g = build_graph(edges, 9)
        feats = rng.standard_normal((9, 3))
        labels = rng.integers(0, 2, size=9)
        mask = np.zeros(9, dtype=bool)
        mask[rng.permutation(9)[:6]] = True
        if not mask.any():
            mask[0] = True

        run_seed = 1000 + seed
        specs = [ExpertSpec(kind=k, hidden=32)
                 for k in ("gcn", "highpass_residual", "mlp")]
        config = TrainConfig(expert_specs=tuple(specs), gating_hidden=32,
                             walk=WalkConfig(5, 2), seed=run_seed)
        model = build_mixture(config, 3, 2, run_seed)
        # pull the gate off the uniform zero-init for generic softmax grads
        last = model.pattern_gate.gating.gate.layers[-1]
        last.W[:] = np.random.default_rng(seed + 7).standard_normal(last.W.shape) * 0.2
        contexts = sample_walk_contexts(g, config.walk,
                                        rng_stream(run_seed, "walks", 0))

        def loss_fn():
            w = model.pattern_gate.forward(g, feats, contexts)
            logits = model.ensemble.forward(g, feats)
            return moe_loss(logits, w, labels, mask)[0]

        weights = model.pattern_gate.forward(g, feats, contexts)
        logits = model.ensemble.forward(g, feats)
        _, dlogits, dgate = moe_loss(logits, weights, labels, mask)
        model.ensemble.zero_grads()
        model.pattern_gate.zero_grads()
        model.ensemble.backward(dlogits)
        model.pattern_gate.backward(dgate)

        analytic = {}
        analytic.update({f"ensemble/{k}": v
                         for k, v in model.ensemble.gradients().items()})
        analytic.update({f"pattern_gate/{k}": v
                         for k, v in model.pattern_gate.gradients().items()})
        numeric = numerical_gradient(loss_fn, model.parameters())
        err = max_relative_error(analytic, numeric)
        assert err < 1e-4, f"seed {seed}: rel err {err}"


class TestSingleExpertTraining:
    def test_deterministic_checkpoints(self):
        graph, feats, labels = sample_csbm(
            CsbmParams(n=120, p=0.1, q=0.02, mu=np.array([-0.4, 0.0]),
                       nu=np.array([0.4, 0.0]), sigma=0.4), seed=0)
        masks = make_splits(120, SplitSpec(seed=0))

        def run():
            expert = Expert(ExpertSpec(kind="gcn", hidden=32), 2, 2,
                            rng_stream(5, "init"))
            train_single_expert(expert, graph, feats, labels, masks.train,
                                masks.val, lr=0.001, weight_decay=5e-5,
                                epochs=40, patience=20,
                                rng=rng_stream(5, "train"))
            return {k: v.copy() for k, v in expert.parameters().items()}

        a, b = run(), run()
        for k in a:
            assert (a[k] == b[k]).all()

    def test_early_stop_restores_best(self):
        graph, feats, labels = sample_csbm(
            CsbmParams(n=100, p=0.12, q=0.03, mu=np.array([-0.4, 0.0]),
                       nu=np.array([0.4, 0.0]), sigma=0.5), seed=1)
        masks = make_splits(100, SplitSpec(seed=1))
        expert = Expert(ExpertSpec(kind="mlp", hidden=32), 2, 2,
                        rng_stream(9, "init"))
        hist = train_single_expert(expert, graph, feats, labels, masks.train,
                                   masks.val, lr=0.001, weight_decay=1e-5,
                                   epochs=50, patience=10,
                                   rng=rng_stream(9, "train"))
        logits = expert.forward(graph, feats)
        assert accuracy(logits, labels, masks.val) == pytest.approx(
            hist["best_val_acc"])


class TestPretraining:
    def _data(self):
        graph, feats, labels, _ = tiny_blend(seed=2)
        masks = make_splits(graph.num_nodes, SplitSpec(seed=2))
        return graph, feats, labels, masks

    def test_same_seed_identical_checkpoints(self):
        graph, feats, labels, masks = self._data()
        config = small_config(pretrain_epochs=25)
        e1, _ = pretrain_experts(config, graph, feats, labels, masks, run_seed=7)
        e2, _ = pretrain_experts(config, graph, feats, labels, masks, run_seed=7)
        p1, p2 = e1.parameters(), e2.parameters()
        for k in p1:
            assert (p1[k] == p2[k]).all()

    def test_subsample_too_small_rejected(self):
        graph, feats, labels, masks = self._data()
        config = small_config(pretrain_fraction=0.01)
        with pytest.raises(ValueError, match="class count"):
            pretrain_experts(config, graph, feats, labels, masks, run_seed=0)

    @pytest.mark.parametrize("fraction", [0.5, 1.0])
    def test_pretraining_exceeds_chance(self, fraction):
        # patience must ride out the small-lr plateau at the start
        graph, feats, labels, masks = self._data()
        config = small_config(pretrain_fraction=fraction, pretrain_epochs=80,
                              patience=80)
        ensemble, hists = pretrain_experts(config, graph, feats, labels, masks,
                                           run_seed=3)
        for hist in hists:
            assert hist["best_val_acc"] > 0.5  # random = 1/C = 0.5

    def test_load_or_train_round_trip(self, tmp_path):
        graph, feats, labels, masks = self._data()
        config = small_config(pretrain_epochs=20)
        e1, h1 = pretrain_experts(config, graph, feats, labels, masks,
                                  run_seed=11, checkpoint_dir=str(tmp_path))
        assert (tmp_path / "ensemble.json").exists()
        e2, h2 = pretrain_experts(config, graph, feats, labels, masks,
                                  run_seed=11, checkpoint_dir=str(tmp_path))
        p1, p2 = e1.parameters(), e2.parameters()
        for k in p1:
            assert (p1[k] == p2[k]).all()

    def test_stale_checkpoint_ignored(self, tmp_path):
        graph, feats, labels, masks = self._data()
        config = small_config(pretrain_epochs=15)
        pretrain_experts(config, graph, feats, labels, masks, run_seed=11,
                         checkpoint_dir=str(tmp_path))
        other = small_config(pretrain_epochs=16)
        # different config hash: must retrain, not load
        e2, _ = pretrain_experts(other, graph, feats, labels, masks,
                                 run_seed=11, checkpoint_dir=str(tmp_path))
        assert (tmp_path / "ensemble.json").exists()


class TestJointTraining:
    def test_single_expert_mixture_bit_identical_to_solo(self):
        graph, feats, labels, _ = tiny_blend(n=160, seed=4)
        masks = make_splits(160, SplitSpec(seed=4))
        spec = ExpertSpec(kind="gcn", hidden=32, dropout=0.3)
        config = small_config(expert_specs=(spec,), joint_epochs=30,
                              patience=15, expert_lr=0.01,
                              expert_weight_decay=5e-5)
        run_seed = 99

        solo = build_ensemble([spec], 2, 2, run_seed).experts[0]
        train_single_expert(solo, graph, feats, labels, masks.train, masks.val,
                            lr=config.expert_lr,
                            weight_decay=config.expert_weight_decay,
                            epochs=config.joint_epochs, patience=config.patience,
                            rng=rng_stream(run_seed, "expert", 0))

        ensemble = build_ensemble([spec], 2, 2, run_seed)
        model, record = joint_train(config, ensemble, graph, feats, labels,
                                    masks, run_seed)
        solo_params = solo.parameters()
        joint_params = model.ensemble.experts[0].parameters()
        for k in solo_params:
            assert (solo_params[k] == joint_params[k]).all(), k

    def test_restored_model_reaches_recorded_val_accuracy(self):
        graph, feats, labels, _ = tiny_blend(n=200, seed=5)
        masks = make_splits(200, SplitSpec(seed=5))
        config = small_config(joint_epochs=25, patience=12)
        ensemble, _ = pretrain_experts(config, graph, feats, labels, masks,
                                       run_seed=21)
        model, record = joint_train(config, ensemble, graph, feats, labels,
                                    masks, run_seed=21)
        contexts = model.contexts_for_eval(graph)
        val_acc = model.evaluate(graph, feats, labels, masks.val,
                                 contexts=contexts)
        assert val_acc == pytest.approx(record["val_acc"])

    def test_uniform_gate_arm_runs(self):
        graph, feats, labels, _ = tiny_blend(n=160, seed=6)
        masks = make_splits(160, SplitSpec(seed=6))
        config = small_config(uniform_gate=True, joint_epochs=15, patience=10)
        ensemble, _ = pretrain_experts(config, graph, feats, labels, masks,
                                       run_seed=2)
        model, record = joint_train(config, ensemble, graph, feats, labels,
                                    masks, run_seed=2)
        weights = model.gate_weights(graph, feats)
        np.testing.assert_allclose(weights, 1.0 / len(config.expert_specs))

    def test_checkpoint_save_load_round_trip(self, tmp_path):
        graph, feats, labels, _ = tiny_blend(n=160, seed=7)
        masks = make_splits(160, SplitSpec(seed=7))
        config = small_config(joint_epochs=10, patience=5)
        ensemble, _ = pretrain_experts(config, graph, feats, labels, masks,
                                       run_seed=31)
        model, record = joint_train(config, ensemble, graph, feats, labels,
                                    masks, run_seed=31)
        path = tmp_path / "mixture.npz"
        model.save(str(path))
        loaded = load_mixture(str(path))
        test_acc = loaded.evaluate(graph, feats, labels, masks.test,
                                   contexts=loaded.contexts_for_eval(graph))
        assert test_acc == pytest.approx(record["test_acc"])


class TestRunExperiment:
    def test_bookkeeping_identities(self):
        graph, feats, labels, _ = tiny_blend(n=150, seed=8)
        config = small_config(pretrain_epochs=10, joint_epochs=10, patience=5)
        result = run_experiment(config, graph, feats, labels,
                                split_indices=range(2), seeds=(0, 1))
        assert len(result.entries) == 4
        accs = result.accuracies
        assert result.mean_acc == pytest.approx(float(accs.mean()))
        assert result.std_acc == pytest.approx(float(accs.std()))
        shuffled = RunResult(entries=list(reversed(result.entries)),
                             config_hash=result.config_hash)
        assert shuffled.mean_acc == pytest.approx(result.mean_acc)
        assert shuffled.std_acc == pytest.approx(result.std_acc)

    def test_run_one_deterministic(self):
        graph, feats, labels, _ = tiny_blend(n=150, seed=9)
        config = small_config(pretrain_epochs=8, joint_epochs=8, patience=4)
        a = run_one(config, graph, feats, labels, split_index=0, seed_value=1)
        b = run_one(config, graph, feats, labels, split_index=0, seed_value=1)
        assert a["test_acc"] == b["test_acc"]
        assert a["val_acc"] == b["val_acc"]

    def test_parallel_jobs_match_serial(self):
        graph, feats, labels, _ = tiny_blend(n=150, seed=10)
        config = small_config(pretrain_epochs=6, joint_epochs=6, patience=3)
        serial = run_experiment(config, graph, feats, labels,
                                split_indices=range(2), seeds=(0,), jobs=1)
        parallel = run_experiment(config, graph, feats, labels,
                                  split_indices=range(2), seeds=(0,), jobs=2)
        assert serial.accuracies.tolist() == parallel.accuracies.tolist()


def unit_blend(seed, n=600):
    """Mean degree ~5 keeps any single expert from solving both halves."""
    return sample_blended_csbm(
        n=n, homo=(0.0267, 0.0067), hetero=(0.0067, 0.0267),
        mu=np.array([-0.5, 0.0, 0.0, 0.0]), nu=np.array([0.5, 0.0, 0.0, 0.0]),
        sigma=0.6, seed=seed)


def blend_config(**kw):
    base = dict(
        expert_specs=tuple(default_expert_specs(hidden=64, dropout=0.5)),
        gating_hidden=64, disc_hidden=(64,), walk=WalkConfig(5, 8),
        pretrain_epochs=150, joint_epochs=400, patience=150,
        pretrain_fraction=0.5, expert_lr=0.001, expert_weight_decay=5e-3,
        seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainedBehavior:
    """Slower checks of what training actually produces on the blend."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_joint_val_never_far_below_best_pretrained_expert(self, seed):
        # guard rail: the gate can express any single expert
        graph, feats, labels, _ = unit_blend(seed)
        masks = make_splits(graph.num_nodes, SplitSpec(seed=seed))
        config = blend_config()
        run_seed = derive_seed(0, "unit", seed)
        ensemble, hists = pretrain_experts(config, graph, feats, labels,
                                           masks, run_seed)
        best_pre = max(h["best_val_acc"] for h in hists)
        _, record = joint_train(config, ensemble, graph, feats, labels,
                                masks, run_seed)
        assert record["val_acc"] >= best_pre - 0.01

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_training_widens_discriminator_separation(self, seed):
        # the end-to-end objective fixes the discriminator only up to
        # sign, so compare |same - diff| score separation before/after
        from graphmoe.patterns import EdgeDiscriminator

        graph, feats, labels, _ = unit_blend(seed)
        masks = make_splits(graph.num_nodes, SplitSpec(seed=seed))
        config = blend_config()
        run_seed = derive_seed(0, "unit", seed)
        ensemble, _ = pretrain_experts(config, graph, feats, labels, masks,
                                       run_seed)
        model, _ = joint_train(config, ensemble, graph, feats, labels,
                               masks, run_seed)
        rng = np.random.default_rng(seed)
        test_nodes = np.flatnonzero(masks.test)
        t = rng.choice(test_nodes, 3000)
        c = rng.choice(test_nodes, 3000)
        keep = t != c
        t, c = t[keep], c[keep]
        same = labels[t] == labels[c]
        init_disc = EdgeDiscriminator(4, hidden=config.disc_hidden,
                                      rng=rng_stream(run_seed, "disc-init"))

        def separation(disc):
            scores = disc.score_pairs(feats, t, c)
            return abs(scores[same].mean() - scores[~same].mean())

        assert separation(model.pattern_gate.disc) > separation(init_disc)

    @pytest.mark.parametrize("seed", [0, 2])
    def test_frozen_experts_gate_beats_best_frozen_expert(self, seed):
        graph, feats, labels, _ = sample_blended_csbm(
            n=1000, homo=(0.016, 0.004), hetero=(0.004, 0.016),
            mu=np.array([-0.5, 0.0, 0.0, 0.0]),
            nu=np.array([0.5, 0.0, 0.0, 0.0]), sigma=0.6, seed=seed)
        masks = make_splits(1000, SplitSpec(seed=seed))
        config = blend_config(freeze_experts=True, pretrain_fraction=1.0,
                              pretrain_epochs=400, joint_epochs=600,
                              patience=200)
        run_seed = derive_seed(0, "frozen", seed)
        ensemble, _ = pretrain_experts(config, graph, feats, labels, masks,
                                       run_seed)
        frozen_before = {k: v.copy() for k, v in ensemble.parameters().items()}
        frozen_accs = [accuracy(e.forward(graph, feats), labels, masks.test)
                       for e in ensemble.experts]
        model, record = joint_train(config, ensemble, graph, feats, labels,
                                    masks, run_seed)
        after = model.ensemble.parameters()
        for k, v in frozen_before.items():
            assert (after[k] == v).all(), "frozen experts must not move"
        assert record["test_acc"] > max(frozen_accs)


class TestConfig:
    def test_search_space_enforced(self):
        with pytest.raises(ValueError):
            small_config(expert_lr=0.02)
        with pytest.raises(ValueError):
            small_config(gating_lr=0.01)
        with pytest.raises(ValueError):
            small_config(gating_hidden=48)
        with pytest.raises(ValueError):
            small_config(pretrain_fraction=0.0)

    def test_dict_round_trip(self):
        config = small_config()
        again = config_from_dict(config.to_dict())
        assert again == config
        assert again.hash() == config.hash()

    def test_hash_changes_with_values(self):
        assert small_config().hash() != small_config(joint_epochs=81).hash()
