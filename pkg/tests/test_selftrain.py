import math

import numpy as np
import pytest

from strel.classifier import (
    ModelParams,
    background_loss_grad,
    add_grads,
    class_weights,
    init_params,
    sgd_step,
    supervised_loss_grad,
)
from strel.errors import ConfigError
from strel.labels import BG_INDEX, Dataset, annotated_counts, build_catalog
from strel.rngs import stream
from strel.selftrain import (
    BatchPartition,
    PseudoLabel,
    SelfTrainConfig,
    TripletRef,
    assign_pseudo_labels,
    load_checkpoint,
    partition_batch,
    run,
    save_checkpoint,
    three_term_loss,
)
from strel.thresholds import ThresholdState, never_policy, uniform_coefficients

from _oracles import gradient_relative_error
from conftest import build_scene


def make_dataset(n_scenes=12, labels=(1, 2, 1, 0), observed=None, n_fg=2, seed=0):
    rng = np.random.default_rng(seed)
    scenes = tuple(
        build_scene(i, list(labels), rng=rng, observed=list(observed) if observed else None)
        for i in range(n_scenes)
    )
    counts = annotated_counts(scenes, n_fg)
    catalog = build_catalog({f"c{i}": max(c, 1) for i, c in enumerate(counts)})
    return Dataset(scenes=scenes, catalog=catalog, split="train")


def refs_for(scene, indices=None):
    idx = range(len(scene.triplets)) if indices is None else indices
    return [TripletRef(scene.scene_id, i, scene.triplets[i]) for i in idx]


def open_state(n_fg, tau=0.0):
    return ThresholdState(
        tau=np.full(n_fg, float(tau)),
        coefficients=uniform_coefficients(n_fg, 0.5),
        iteration=0,
    )


class TestPartitionBatch:
    def test_definitional_split(self, scene_factory):
        scene = scene_factory(0, [1, 0, 2, 0], observed=[1, 0, 2, 0])
        annotated, unannotated = partition_batch([scene])
        assert len(annotated) == 2 and len(unannotated) == 2

    def test_fully_annotated_batch(self, scene_factory):
        scene = scene_factory(0, [1, 2])
        annotated, unannotated = partition_batch([scene])
        assert len(annotated) == 2 and unannotated == ()

    def test_exhaustive_and_disjoint(self):
        rng = np.random.default_rng(5)
        scenes = [
            build_scene(i, list(rng.integers(0, 3, size=4)), rng=rng) for i in range(8)
        ]
        annotated, unannotated = partition_batch(scenes)
        keys_a = {(r.scene_id, r.index) for r in annotated}
        keys_u = {(r.scene_id, r.index) for r in unannotated}
        assert not keys_a & keys_u
        assert len(keys_a) + len(keys_u) == sum(len(s.triplets) for s in scenes)
        assert all(r.triplet.observed_label != BG_INDEX for r in annotated)
        assert all(r.triplet.observed_label == BG_INDEX for r in unannotated)

    def test_sparse_masking_ratio(self):
        ds = make_dataset(n_scenes=250, labels=[1] * 4, observed=None)
        from strel.synthgen import mask_annotations

        masked = mask_annotations(ds, 0.045, seed=3)
        annotated, unannotated = partition_batch(masked.scenes)
        assert len(annotated) == 45 and len(unannotated) == 955


class TestAssignPseudoLabels:
    def test_cap_keeps_highest_confidence(self, scene_factory):
        scene = scene_factory(0, [1] * 5, observed=[0] * 5)
        refs = refs_for(scene)
        conf = np.array([0.9, 0.8, 0.7, 0.95, 0.65])
        out = assign_pseudo_labels(refs, np.ones(5, dtype=int), conf, open_state(1), cap=3)
        assert sorted(p.confidence for p in out) == [0.8, 0.9, 0.95]

    def test_cap_ties_keep_lowest_index(self, scene_factory):
        scene = scene_factory(0, [1] * 4, observed=[0] * 4)
        refs = refs_for(scene)
        conf = np.array([0.5, 0.5, 0.5, 0.5])
        out = assign_pseudo_labels(refs, np.ones(4, dtype=int), conf, open_state(1), cap=2)
        assert [p.ref.index for p in out] == [0, 1]

    def test_gate_blocks_candidates(self, scene_factory):
        scene = scene_factory(0, [1, 1], observed=[0, 0])
        refs = refs_for(scene)
        out = assign_pseudo_labels(
            refs, np.ones(2, dtype=int), np.array([0.9, 0.9]), open_state(1),
            cap=3, gates=[False, True],
        )
        assert [p.ref.index for p in out] == [1]

    def test_threshold_blocks_candidates(self, scene_factory):
        scene = scene_factory(0, [1, 1], observed=[0, 0])
        refs = refs_for(scene)
        out = assign_pseudo_labels(
            refs, np.ones(2, dtype=int), np.array([0.5, 0.9]), open_state(1, tau=0.7), cap=3
        )
        assert [p.ref.index for p in out] == [1]

    def test_background_argmax_skipped(self, scene_factory):
        scene = scene_factory(0, [1], observed=[0])
        refs = refs_for(scene)
        out = assign_pseudo_labels(
            refs, np.zeros(1, dtype=int), np.array([0.99]), open_state(1), cap=3
        )
        assert out == ()

    def test_empty_input(self):
        assert assign_pseudo_labels([], np.zeros(0), np.zeros(0), open_state(1), cap=1) == ()

    def test_never_policy_accepts_nothing(self, scene_factory):
        scene = scene_factory(0, [1, 1], observed=[0, 0])
        refs = refs_for(scene)
        out = assign_pseudo_labels(
            refs, np.ones(2, dtype=int), np.array([0.9, 0.9]), never_policy(1), cap=3
        )
        assert out == ()

    def test_cap_is_per_scene_and_class(self):
        rng = np.random.default_rng(9)
        scenes = [build_scene(i, [1, 1, 2, 2, 2], rng=rng, observed=[0] * 5) for i in range(4)]
        refs = [r for s in scenes for r in refs_for(s)]
        pred = np.array([r.triplet.hidden_label for r in refs])
        conf = rng.uniform(0.5, 1.0, size=len(refs))
        out = assign_pseudo_labels(refs, pred, conf, open_state(2), cap=2)
        per_key = {}
        for p in out:
            key = (p.ref.scene_id, p.assigned_class)
            per_key[key] = per_key.get(key, 0) + 1
        assert all(v <= 2 for v in per_key.values())


def crafted_three_instance_setup():
    """Model and partition hitting probabilities 0.5 / 0.5 / 0.7 by design."""
    # one-hot features select a weight row each, so rows are the wanted logits
    logits = np.array(
        [
            [math.log(0.25), math.log(0.5), math.log(0.25)],  # annotated, class 1
            [math.log(0.5), math.log(0.25), math.log(0.25)],  # background
            [math.log(0.15), math.log(0.15), math.log(0.7)],  # pseudo, class 2
        ]
    )
    params = ModelParams(arch="linear", layers=((logits.copy(), np.zeros(3)),))
    scene = build_scene(0, [1, 0, 2], observed=[1, 0, 0], dim=2)
    # overwrite features with one-hot selectors
    import dataclasses

    triplets = []
    eye = np.eye(3)
    for i, t in enumerate(scene.triplets):
        triplets.append(dataclasses.replace(t, features=eye[i]))
    refs = [TripletRef(0, i, t) for i, t in enumerate(triplets)]
    partition = BatchPartition(
        annotated=(refs[0],),
        pseudo_labeled=(PseudoLabel(refs[2], assigned_class=2, confidence=0.7),),
        background=(refs[1],),
    )
    return params, partition


class TestThreeTermLoss:
    def test_hand_computed_sum(self):
        params, partition = crafted_three_instance_setup()
        total, _, breakdown = three_term_loss(params, partition, np.ones(3), beta=1.0)
        expected = 2.0 * math.log(2.0) - math.log(0.7)  # ln2 + ln2 + (-ln 0.7)
        assert total == pytest.approx(expected, abs=1e-12)
        assert breakdown.annotated == pytest.approx(math.log(2), abs=1e-12)
        assert breakdown.background == pytest.approx(math.log(2), abs=1e-12)
        assert breakdown.pseudo == pytest.approx(-math.log(0.7), abs=1e-12)

    def test_beta_zero_drops_pseudo_term(self):
        params, partition = crafted_three_instance_setup()
        total, _, breakdown = three_term_loss(params, partition, np.ones(3), beta=0.0)
        assert total == pytest.approx(2.0 * math.log(2.0), abs=1e-12)
        assert breakdown.pseudo > 0.0  # reported, just unweighted

    def test_empty_pseudo_reduces_to_two_terms(self):
        params, partition = crafted_three_instance_setup()
        bare = BatchPartition(partition.annotated, (), partition.background)
        total, _, breakdown = three_term_loss(params, bare, np.ones(3), beta=1.0)
        assert breakdown.pseudo == 0.0
        assert total == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_total_is_exactly_the_weighted_sum(self):
        params, partition = crafted_three_instance_setup()
        for beta in (0.0, 0.3, 1.0, 2.5):
            total, _, bd = three_term_loss(params, partition, np.ones(3), beta=beta)
            assert total == bd.annotated + bd.background + beta * bd.pseudo
            assert bd.annotated >= 0.0 and bd.background >= 0.0 and bd.pseudo >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = stream(55, "ttl-grad")
        for trial in range(5):
            ds = make_dataset(n_scenes=2, labels=(1, 2, 1, 0), observed=(1, 0, 0, 0), seed=trial)
            annotated, unannotated = partition_batch(ds.scenes)
            pseudo = tuple(
                PseudoLabel(r, assigned_class=int(rng.integers(1, 3)), confidence=0.9)
                for r in unannotated[:2]
            )
            background = unannotated[2:]
            partition = BatchPartition(annotated, pseudo, background)
            params = init_params("mlp", 8, 3, hidden_dim=4, seed=trial)
            w = np.array([1.0, 1.3, 0.7])
            beta = 0.7
            _, grads, _ = three_term_loss(params, partition, w, beta)
            err = gradient_relative_error(
                grads, lambda p: three_term_loss(p, partition, w, beta)[0], params
            )
            assert err <= 1e-4


def small_selftrain_config(**overrides):
    base = dict(
        max_iterations=12,
        batch_size=4,
        learning_rate=0.3,
        seed=5,
        policy="catm",
        alpha_inc=0.4,
        alpha_dec=0.4,
    )
    base.update(overrides)
    return SelfTrainConfig(**base)


def masked_dataset(n_scenes=16, seed=1):
    ds = make_dataset(n_scenes=n_scenes, labels=(1, 2, 1, 2), seed=seed)
    from strel.synthgen import mask_annotations, split

    masked = mask_annotations(ds, 0.25, seed=2)
    return split(masked, (0.6, 0.2, 0.2), seed=3)


class TestRun:
    def test_zero_iterations_is_identity(self):
        train, val, _ = masked_dataset()
        params = init_params("linear", 8, 3, seed=9)
        result = run(params, train, val, small_selftrain_config(max_iterations=0))
        for (w1, b1), (w2, b2) in zip(params.layers, result.params.layers):
            assert np.array_equal(w1, w2) and np.array_equal(b1, b2)
        assert result.log.iterations == ()

    def test_deterministic_replay(self):
        train, val, _ = masked_dataset()
        params = init_params("linear", 8, 3, seed=9)
        cfg = small_selftrain_config()
        a = run(params, train, val, cfg)
        b = run(params, train, val, cfg)
        assert a.log.iterations == b.log.iterations
        for (w1, _), (w2, _) in zip(a.params.layers, b.params.layers):
            assert np.array_equal(w1, w2)

    def test_snapshot_isolation_of_decisions(self):
        # every accepted confidence clears the threshold recorded one step earlier
        train, val, _ = masked_dataset(n_scenes=20)
        params = init_params("linear", 8, 3, seed=9)
        cfg = small_selftrain_config(max_iterations=20, initial_tau=0.0)
        result = run(params, train, val, cfg)
        tau_after = {r.iteration: r.tau for r in result.log.iterations}
        for a in result.assignments:
            if a.iteration == 0:
                previous = 0.0  # initial threshold
            else:
                previous = tau_after[a.iteration - 1][a.assigned_class - 1]
            assert a.confidence >= previous - 1e-12

    def test_cumulative_counts_are_consistent(self):
        train, val, _ = masked_dataset(n_scenes=20)
        params = init_params("linear", 8, 3, seed=9)
        result = run(params, train, val, small_selftrain_config(max_iterations=15))
        last = np.zeros(train.catalog.n_foreground, dtype=int)
        for rec in result.log.iterations:
            current = np.asarray(rec.cumulative_counts)
            assert np.all(current >= last)
            last = current
        assert last.sum() == len(result.assignments)

    def test_never_policy_equals_supervised_continuation(self):
        train, val, _ = masked_dataset(n_scenes=15)
        start = init_params("linear", 8, 3, seed=4)
        cfg = small_selftrain_config(
            policy="never", max_iterations=8, batch_size=5, bg_downsample=1.0, beta=1.0
        )
        result = run(start, train, val, cfg)

        # independent reference: conventional two-term supervised loop over
        # the same deterministic batch stream
        w = class_weights(train.catalog, "none")
        params = start
        n = len(train.scenes)
        batches_per_epoch = math.ceil(n / cfg.batch_size)
        it = 0
        epoch = 0
        while it < cfg.max_iterations:
            order = stream(cfg.seed, "epoch-order", epoch).permutation(n)
            for b in range(batches_per_epoch):
                if it >= cfg.max_iterations:
                    break
                scenes = [train.scenes[int(i)] for i in order[b * 5 : (b + 1) * 5]]
                ann = [t for s in scenes for t in s.triplets if t.observed_label != BG_INDEX]
                bg = [t for s in scenes for t in s.triplets if t.observed_label == BG_INDEX]
                la, ga = supervised_loss_grad(params, ann, w)
                lb, gb = background_loss_grad(params, bg, w)
                params = sgd_step(params, add_grads(ga, gb), cfg.learning_rate)
                it += 1
            epoch += 1

        for (w1, b1), (w2, b2) in zip(result.params.layers, params.layers):
            assert np.array_equal(w1, w2)
            assert np.array_equal(b1, b2)
        assert len(result.assignments) == 0

    def test_validation_required_for_quantile_policies(self):
        train, _, _ = masked_dataset()
        params = init_params("linear", 8, 3, seed=1)
        with pytest.raises(ConfigError):
            run(params, train, None, small_selftrain_config(policy="fixed-class"))

    def test_epoch_metrics_logged(self):
        train, val, _ = masked_dataset(n_scenes=20)
        params = init_params("linear", 8, 3, seed=9)
        result = run(params, train, val, small_selftrain_config(max_iterations=6), metric_ks=(2,))
        assert result.log.epochs
        for rec in result.log.epochs:
            r, mr, f = rec.metrics[2]
            assert 0 <= r <= 100 and 0 <= mr <= 100 and 0 <= f <= 100

    def test_gsl_gating_and_joint_training(self):
        train, val, _ = masked_dataset(n_scenes=20)
        params = init_params("linear", 8, 3, seed=9)
        cfg = small_selftrain_config(max_iterations=10, use_gsl=True)
        result = run(params, train, val, cfg, keep_edge_trace=True)
        assert result.edge_learner is not None
        assert result.edge_trace  # rows logged
        # gated acceptance: every assignment's pair had an on edge that iteration
        on = {
            (t.iteration, t.scene_id, t.triplet_index)
            for t in result.edge_trace
            if t.hard == 1
        }
        for a in result.assignments:
            assert (a.iteration, a.scene_id, a.triplet_index) in on

    def test_checkpoint_resume_matches_straight_run(self, tmp_path):
        train, val, _ = masked_dataset(n_scenes=15)
        start = init_params("linear", 8, 3, seed=4)
        cfg = small_selftrain_config(max_iterations=10)
        full = run(start, train, val, cfg)

        half_cfg = small_selftrain_config(max_iterations=5)
        half = run(start, train, val, half_cfg)
        path = tmp_path / "resume.ckpt"
        save_checkpoint(
            path, half.params, half.thresholds, 5,
            half.log.iterations[-1].cumulative_counts, cfg.seed,
        )
        params, thresholds, iteration, counts, _ = load_checkpoint(path)
        resumed = run(
            params, train, val, cfg,
            start_iteration=iteration, thresholds=thresholds, cumulative_counts=counts,
        )
        for (w1, _), (w2, _) in zip(full.params.layers, resumed.params.layers):
            assert np.array_equal(w1, w2)
        assert full.log.iterations[5:] == resumed.log.iterations
