import dataclasses

import numpy as np
import pytest

import hfsoftmax.trainer as trainer_mod
from hfsoftmax.allocation import AllocationSchedule
from hfsoftmax.data import DatasetSpec, generate_dataset
from hfsoftmax.extractors import MLP, Identity, Linear, make_extractor
from hfsoftmax.param_store import ParamStore
from hfsoftmax.selectors import SelectorConfig
from hfsoftmax.softmax_core import softmax
from hfsoftmax.trainer import TrainConfig, TrainingError, epoch_order, evaluate, train


def small_dataset(**kw):
    base = dict(n_classes=50, dim=8, samples_per_class=12, n_super=4, holdout_per_class=2, noise=0.5, seed=1)
    base.update(kw)
    return generate_dataset(DatasetSpec(**base))


def small_config(kind="full", **kw):
    sel = dict(kind=kind, M=10, L=3, T=7, leaf_size=8, code_bits=3, n_groups=8)
    sel.update(kw.pop("selector", {}))
    base = dict(selector=SelectorConfig(**sel), epochs=2, batch_size=16, learning_rate=0.1,
                monitor_size=32, overlap_every=5)
    base.update(kw)
    return TrainConfig(**base)


def run(config, dataset, init_seed=0):
    store = ParamStore.initialize(dataset.n_classes, dataset.spec.dim, seed=init_seed)
    return train(config, dataset, store), store


# -- dataset ---------------------------------------------------------------------


def test_dataset_shapes_and_split():
    ds = small_dataset()
    assert ds.X.shape == (600, 8) and ds.y.shape == (600,)
    assert np.all((ds.y >= 0) & (ds.y < 50))
    assert np.intersect1d(ds.train_idx, ds.holdout_idx).size == 0
    assert ds.train_idx.size + ds.holdout_idx.size == 600
    assert np.all(np.bincount(ds.y_holdout, minlength=50) == 2)
    np.testing.assert_allclose(np.linalg.norm(ds.X, axis=1), 1.0)
    np.testing.assert_allclose(np.linalg.norm(ds.centers, axis=1), 1.0)


def test_dataset_is_deterministic():
    a, b = small_dataset(), small_dataset()
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.holdout_idx, b.holdout_idx)
    assert not np.array_equal(a.X, small_dataset(seed=2).X)


def test_zero_noise_samples_are_their_centers():
    ds = small_dataset(noise=0.0)
    np.testing.assert_array_equal(ds.X, ds.centers[ds.y])


def test_nuisance_directions_are_shared_within_super_clusters():
    ds = small_dataset(noise=0.0, nuisance_rank=2, nuisance_scale=1.0, samples_per_class=30)
    # a sample is its center plus a move inside the super-cluster's plane, rescaled,
    # so two classes of one super-cluster span 4 dimensions and of two supers span 6
    same = [c for c in range(50) if ds.super_of[c] == ds.super_of[0]][:2]
    other = next(c for c in range(50) if ds.super_of[c] != ds.super_of[0])

    def rank(classes):
        sv = np.linalg.svd(ds.X[np.isin(ds.y, classes)], compute_uv=False)
        return int(np.sum(sv > 1e-9 * sv[0]))

    assert rank(same[:1]) == 3
    assert rank(same) == 4
    assert rank([same[0], other]) == 6


def test_groups_are_consecutive_ids_inside_one_super_cluster():
    ds = small_dataset(group_size=3, group_spread=0.0, noise=0.0)
    np.testing.assert_array_equal(ds.group_of, np.arange(50) // 3)
    for g in range(17):
        members = np.flatnonzero(ds.group_of == g)
        assert np.unique(ds.super_of[members]).size == 1
        # zero spread inside a group: its classes share one centre
        np.testing.assert_array_equal(ds.centers[members], np.broadcast_to(ds.centers[members[0]], (members.size, 8)))


def test_group_members_are_closer_than_other_siblings():
    ds = small_dataset(dim=32, group_size=2, group_spread=0.1, class_spread=0.6, noise=0.0)
    cos = ds.centers @ ds.centers.T
    for c in range(0, 50, 2):
        siblings = np.flatnonzero((ds.super_of == ds.super_of[c]) & (ds.group_of != ds.group_of[c]))
        if siblings.size:
            assert cos[c, c + 1] > cos[c, siblings].max()


def test_group_size_one_ignores_group_spread():
    a, b = small_dataset(nuisance_rank=2, nuisance_scale=1.0), small_dataset(nuisance_rank=2, nuisance_scale=1.0,
                                                                             group_spread=0.7)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.group_of, np.arange(50))


def test_nuisance_directions_can_be_shared_within_groups():
    ds = small_dataset(noise=0.0, nuisance_rank=2, nuisance_scale=1.0, samples_per_class=30,
                       group_size=2, group_spread=0.3, nuisance_by="group")
    other = next(c for c in range(2, 50) if ds.super_of[c] == ds.super_of[0])

    def rank(classes):
        sv = np.linalg.svd(ds.X[np.isin(ds.y, classes)], compute_uv=False)
        return int(np.sum(sv > 1e-9 * sv[0]))

    assert rank([0, 1]) == 4
    # same super-cluster but another group: the planes differ
    assert rank([0, other]) == 6


@pytest.mark.parametrize(
    "kwargs",
    [dict(noise=-0.1), dict(n_classes=1), dict(holdout_per_class=12), dict(nuisance_rank=9),
     dict(nuisance_scale=-1.0), dict(class_spread=-1.0), dict(group_size=0), dict(group_spread=-0.1),
     dict(nuisance_by="class")],
)
def test_dataset_validation(kwargs):
    with pytest.raises(ValueError):
        small_dataset(**kwargs)


def test_single_super_cluster_with_huge_noise_is_near_chance():
    ds = generate_dataset(DatasetSpec(n_classes=100, dim=16, samples_per_class=30, n_super=1,
                                      class_spread=0.3, noise=100.0, holdout_per_class=10, seed=3))
    result, _ = run(TrainConfig(selector=SelectorConfig(kind="full"), epochs=3, batch_size=32,
                                learning_rate=0.05, monitor_size=64), ds)
    assert result.final_accuracy < 5 / 100


# -- evaluate --------------------------------------------------------------------


def test_evaluate_centers_on_clean_data_is_perfect():
    ds = small_dataset(noise=0.0)
    assert evaluate(ds.centers, Identity(), ds.X_holdout, ds.y_holdout) == 1.0


def test_evaluate_matches_argmax_oracle():
    ds = small_dataset()
    W = np.random.default_rng(0).normal(size=(50, 8))
    hits = sum(int(max(range(50), key=lambda c: (W[c] @ x, -c)) == y) for x, y in zip(ds.X_holdout, ds.y_holdout))
    assert evaluate(W, Identity(), ds.X_holdout, ds.y_holdout, chunk=7) == hits / len(ds.y_holdout)


def test_evaluate_random_weights_is_chance():
    rng = np.random.default_rng(4)
    n, samples = 200, 20_000
    W = rng.normal(size=(n, 16))
    X = rng.normal(size=(samples, 16))
    y = np.repeat(np.arange(n), samples // n)
    acc = evaluate(W, Identity(), X, y)
    assert abs(acc - 1 / n) <= 3 * np.sqrt((1 / n) * (1 - 1 / n) / samples)


def test_evaluate_rejects_empty_holdout():
    with pytest.raises(ValueError):
        evaluate(np.eye(3), Identity(), np.zeros((0, 3)), np.zeros(0, dtype=int))


# -- extractors ------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_extractor_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(5)
    ext = make_extractor(kind, 6, 4, hidden=7, seed=1)
    O = rng.normal(size=(3, 6))
    G = rng.normal(size=(3, 4))
    X, cache = ext.forward(O)
    ext.backward(cache, G)
    h = 1e-6
    for name, p in ext.params.items():
        for idx in list(np.ndindex(p.shape))[:12]:
            old = p[idx]
            p[idx] = old + h
            up = np.sum(ext(O) * G)
            p[idx] = old - h
            down = np.sum(ext(O) * G)
            p[idx] = old
            assert ext.grads[name][idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)


def test_linear_extractor_starts_at_identity():
    O = np.random.default_rng(6).normal(size=(4, 5))
    np.testing.assert_array_equal(Linear(5, 5)(O), O)
    assert MLP(5, 3, hidden=4)(O).shape == (4, 3)
    with pytest.raises(ValueError):
        make_extractor("cnn", 5, 5)


# -- training loop -----------------------------------------------------------------


def dense_reference(dataset, config, store, iterations):
    """Monolithic full-softmax momentum SGD over the same sample order."""
    W = store.snapshot_for_rebuild().weights.copy()
    Mom = np.zeros_like(W)
    X, y = dataset.X_train, dataset.y_train
    b = config.batch_size
    done = 0
    for epoch in range(config.epochs):
        order = epoch_order(config.seed, epoch, len(y))
        for start in range(0, len(y), b):
            if done == iterations:
                return W
            idx = order[start:start + b]
            P = softmax(X[idx] @ W.T)
            P[np.arange(len(idx)), y[idx]] -= 1.0
            Mom = config.momentum * Mom + P.T @ X[idx]
            W = W - config.learning_rate * Mom
            done += 1
    return W


def test_full_selector_matches_dense_trainer():
    ds = small_dataset(samples_per_class=34)  # 1600 training samples, 100 batches of 16
    config = small_config("full", epochs=1)
    store = ParamStore.initialize(50, 8, seed=0)
    expected = dense_reference(ds, config, store, 100)
    result = train(config, ds, store)
    assert len(result.records) == 100
    assert np.max(np.abs(store.snapshot_for_rebuild().weights - expected)) <= 1e-9


def test_zero_learning_rate_leaves_weights_bit_identical():
    ds = small_dataset()
    store = ParamStore.initialize(50, 8, seed=0)
    before = store.snapshot_for_rebuild().weights.tobytes()
    train(small_config("hf", learning_rate=0.0), ds, store)
    assert store.snapshot_for_rebuild().weights.tobytes() == before


@pytest.mark.parametrize("kind", ["full", "random", "optimal", "pca", "kmeans", "hf"])
def test_runs_are_deterministic(kind):
    ds = small_dataset()
    config = small_config(kind, selector=dict(batch_cap="auto"))
    a, _ = run(config, ds)
    b, _ = run(config, ds)
    assert [r.timing_free() for r in a.records] == [r.timing_free() for r in b.records]
    assert a.final_accuracy == b.final_accuracy


def test_records_are_ordered_and_complete():
    ds = small_dataset()
    result, _ = run(small_config("hf", epochs=3), ds)
    its = [r.iteration for r in result.records]
    # 500 training samples in batches of 16 give 32 batches per epoch
    assert its == list(range(len(its))) == list(range(3 * 32))
    assert [r.epoch for r in result.records] == [i // 32 for i in its]
    with_acc = [r for r in result.records if r.holdout_acc is not None]
    assert [r.iteration for r in with_acc] == [31, 63, 95]
    measured = [r.iteration for r in result.records if r.overlap_optimal is not None]
    assert measured == list(range(0, 96, 5))
    assert all(r.L == 3 and r.T == 7 for r in result.records)


def test_every_batch_label_is_gathered(monkeypatch):
    ds = small_dataset()
    seen = []
    original = ParamStore.scatter_update

    def spy(self, ids, *args, **kwargs):
        seen.append(np.asarray(ids).copy())
        return original(self, ids, *args, **kwargs)

    monkeypatch.setattr(ParamStore, "scatter_update", spy)
    config = small_config("random", selector=dict(batch_cap=16))
    result, _ = run(config, ds)
    assert len(seen) == len(result.records)
    for it, ids in enumerate(seen):
        epoch, bi = divmod(it, 32)
        idx = epoch_order(config.seed, epoch, len(ds.y_train))[bi * 16:(bi + 1) * 16]
        assert np.all(np.isin(ds.y_train[idx], ids))


def test_module_error_aborts_with_iteration(monkeypatch):
    ds = small_dataset()
    calls = {"n": 0}
    original = trainer_mod.batch_loss_and_grads

    def failing(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 4:
            raise FloatingPointError("boom")
        return original(*args, **kwargs)

    monkeypatch.setattr(trainer_mod, "batch_loss_and_grads", failing)
    with pytest.raises(TrainingError) as info:
        run(small_config("full"), ds)
    assert info.value.iteration == 3
    assert len(info.value.records) == 3


class LossTrackingStore(ParamStore):
    """Store that evaluates the full training loss after every update."""

    dataset = None

    def scatter_update(self, ids, grads, lr, momentum=0.0):
        version = super().scatter_update(ids, grads, lr, momentum)
        W = self.snapshot_for_rebuild().weights
        P = softmax(self.dataset.X_train @ W.T)
        self.losses.append(float(-np.mean(np.log(P[np.arange(len(P)), self.dataset.y_train]))))
        return version


def test_full_batch_loss_mostly_decreases():
    ds = small_dataset(noise=0.2)
    store = LossTrackingStore(ParamStore.initialize(50, 8, seed=0).snapshot_for_rebuild().weights.copy())
    store.dataset, store.losses = ds, []
    train(small_config("full", epochs=3, learning_rate=0.02, momentum=0.5), ds, store)
    steps = np.diff(store.losses)
    assert np.mean(steps > 0) <= 0.05
    assert store.losses[-1] < store.losses[0]


def test_concentration_rises_during_training():
    ds = small_dataset(n_classes=200, samples_per_class=20, n_super=8, noise=0.4)
    result, _ = run(small_config("full", epochs=5, learning_rate=0.1, monitor_size=64), ds)
    first, last = result.epochs[0], result.epochs[-1]
    assert last.monitor_cp_k > first.monitor_cp_k
    assert last.monitor_ncg_k > first.monitor_ncg_k
    assert last.holdout_acc > first.holdout_acc


def test_adaptive_schedule_updates_phase_parameters():
    ds = small_dataset(n_classes=200, samples_per_class=20, n_super=8, noise=0.4)
    schedule = AllocationSchedule(n_phases=3, epochs_per_phase=1, L_start=2, L_end=6, T_start=5, T_end=15)
    config = small_config("hf", epochs=3, schedule=schedule, selector=dict(batch_cap="auto"))
    result, _ = run(config, ds)
    assert [p.phase_index for p in result.phases] == [0, 1, 2]
    assert [(p.L, p.T) for p in result.phases] == [(2, 5), (4, 10), (6, 15)]
    for rec in result.records:
        phase = result.phases[rec.epoch]
        assert (rec.M, rec.L, rec.T, rec.tau_cp) == (phase.M, phase.L, phase.T, phase.tau_cp)
    lo, hi = schedule.m_bounds(200, 16)
    assert all(lo <= p.M <= hi for p in result.phases)


def test_synchronous_rebuild_is_also_deterministic():
    ds = small_dataset()
    config = small_config("hf", background_rebuild=False)
    a, _ = run(config, ds)
    b, _ = run(config, ds)
    assert [r.timing_free() for r in a.records] == [r.timing_free() for r in b.records]


@pytest.mark.parametrize(
    "kwargs",
    [dict(batch_size=0), dict(learning_rate=-1.0), dict(momentum=1.0), dict(extractor="cnn"),
     dict(cp_fraction=0.0), dict(selector=SelectorConfig(batch_cap=8))],
)
def test_train_config_validation(kwargs):
    base = dict(batch_size=16)
    base.update(kwargs)
    with pytest.raises(ValueError):
        TrainConfig(**base)


def test_dataset_store_mismatch():
    with pytest.raises(ValueError):
        train(small_config(), small_dataset(), ParamStore.initialize(49, 8))


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_trainable_extractor_is_updated(kind):
    ds = small_dataset(noise=0.3)
    config = dataclasses.replace(small_config("hf", epochs=2, selector=dict(batch_cap="auto")),
                                 extractor=kind, hidden=16)
    seen = {}
    result = train(config, ds, ParamStore.initialize(50, 8, seed=0),
                   on_epoch_end=lambda epoch, store, ext: seen.setdefault(epoch, {k: v.copy() for k, v in ext.params.items()}))
    assert len(result.records) == 64
    fresh = make_extractor(kind, 8, 8, hidden=16, seed=config.init_seed)
    assert any(not np.array_equal(fresh.params[k], seen[1][k]) for k in fresh.params)
    assert any(not np.array_equal(seen[0][k], seen[1][k]) for k in fresh.params)
