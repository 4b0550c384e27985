import numpy as np
import pytest

from skyfuse.catalog import synthetic_catalog
from skyfuse.net import model as M
from skyfuse.scene import generate_dataset
from skyfuse.sphere import ClusterModel, nearest_two_batch, spherical_kmeans, uniform_sphere
from skyfuse.train_eval import (
    TrainConfig,
    TrainingDiverged,
    adam_step,
    adjacency_from_predictions,
    evaluate,
    evaluate_probabilities,
    history_text,
    optimizer_step,
    sgd_step,
    train,
)


@pytest.fixture(scope="module")
def k4():
    return spherical_kmeans(uniform_sphere(3000, np.random.default_rng(0)), 4, np.random.default_rng(0))


@pytest.fixture(scope="module")
def small_sets(k4):
    cat = synthetic_catalog(6000, np.random.default_rng(1000))
    return (
        generate_dataset(cat, k4, 48, master_seed=1),
        generate_dataset(cat, k4, 16, master_seed=2, split="val"),
        generate_dataset(cat, k4, 1, master_seed=3),
    )


def test_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lam=-1), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig(use_photometric=False, use_heatmap=False, use_coords=False)


def test_sgd_scalar_step():
    p = {"t": np.array([1.0])}
    sgd_step(p, {"t": np.array([0.5])}, {}, TrainConfig(optimizer="sgd", learning_rate=0.1))
    assert p["t"][0] == pytest.approx(0.95, abs=1e-15)
    sgd_step(p, {"t": np.array([0.0])}, {}, TrainConfig(optimizer="sgd", learning_rate=0.1))
    assert p["t"][0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_accumulates():
    cfg = TrainConfig(optimizer="sgd_momentum", learning_rate=0.1, momentum=0.9)
    p, state = {"t": np.array([0.0])}, {}
    for _ in range(2):
        sgd_step(p, {"t": np.array([1.0])}, state, cfg)
    assert p["t"][0] == pytest.approx(-0.1 - 0.19)


@pytest.mark.parametrize("g", [1e-6, 1.0, 1e4])
def test_adam_first_step_is_lr(g):
    p = {"t": np.array([0.0])}
    adam_step(p, {"t": np.array([g])}, {}, TrainConfig(learning_rate=1e-3))
    assert abs(p["t"][0]) == pytest.approx(1e-3, rel=1e-2)


def test_adam_zero_gradient_only_moves_state():
    p, state = {"t": np.array([1.5])}, {}
    adam_step(p, {"t": np.array([0.0])}, state, TrainConfig())
    assert p["t"][0] == 1.5 and state["t"] == 1


def test_non_finite_gradient_aborts():
    with pytest.raises(FloatingPointError):
        optimizer_step({"t": np.array([1.0])}, {"t": np.array([np.nan])}, {}, TrainConfig())


def test_perfect_predictor():
    labels = np.array([0, 1, 2, 3, 4, 0])
    r = evaluate_probabilities(np.eye(5)[labels], labels)
    assert r.top1 == r.top3 == r.top5 == 1.0
    assert np.array_equal(r.confusion, np.diag(np.bincount(labels, minlength=5)))


def test_uniform_predictor_tie_break():
    labels = np.arange(12).repeat(3)
    r = evaluate_probabilities(np.full((36, 12), 1 / 12), labels)
    for k in (1, 3, 5):
        assert r.top[k] == k / 12
    assert np.all(r.confusion[:, 0] == 3)


def test_metric_identities_random():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(6), size=300)
    labels = rng.integers(6, size=300)
    r = evaluate_probabilities(probs, labels)
    assert r.top1 <= r.top3 <= r.top5
    assert np.trace(r.confusion) / r.n == r.top1
    assert np.array_equal(r.confusion.sum(axis=1), r.per_class)


def test_top_k_at_least_k_classes():
    r = evaluate_probabilities(np.array([[0.1, 0.9], [0.8, 0.2]]), np.array([0, 0]), (1, 3, 5))
    assert r.top1 == 0.5 and r.top3 == 1.0 and r.top5 == 1.0


def test_adjacency_examples():
    model = spherical_kmeans(uniform_sphere(3000, np.random.default_rng(1)), 12, np.random.default_rng(1))
    b = uniform_sphere(500, np.random.default_rng(2))
    truth = model.labels(b)
    assert adjacency_from_predictions(truth, truth, b, model) == (0.0, 0, 0)
    second = nearest_two_batch(model, b)[:, 1]
    frac, adj, total = adjacency_from_predictions(second, truth, b, model)
    assert frac == 1.0 and adj == total == 500


def test_adjacency_random_predictor_is_one_in_k_minus_one():
    model = spherical_kmeans(uniform_sphere(5000, np.random.default_rng(3)), 12, np.random.default_rng(3))
    b = uniform_sphere(20000, np.random.default_rng(4))
    pred = np.random.default_rng(5).integers(12, size=20000)
    frac, _, total = adjacency_from_predictions(pred, model.labels(b), b, model)
    assert total > 15000
    assert abs(frac - 1 / 11) <= 0.05


def test_report_text(small_sets, k4):
    tr, va, _ = small_sets
    cfg = M.NetworkConfig(k=4)
    params = M.init_params(cfg, np.random.default_rng(0), np.float32)
    r = evaluate(params, cfg, va, (1, 3, 5), k4)
    lines = r.lines()
    assert lines[0] == "n=16" and any(l.startswith("adjacency_error_fraction=") for l in lines)
    assert 0.0 <= r.adjacency_error_fraction <= 1.0
    assert len(r.confusion_text().splitlines()) == 4
    assert r.top1 <= r.top3 <= r.top5


def test_zero_learning_rate_keeps_params(small_sets):
    tr, va, _ = small_sets
    cfg = M.NetworkConfig(k=4)
    init = M.init_params(cfg, np.random.default_rng(9), np.float32)
    res = train(tr, va, TrainConfig(epochs=2, learning_rate=0.0), cfg, init=init)
    assert all(np.array_equal(res.params[k], init[k]) for k in init)


def test_history_deterministic(small_sets):
    tr, va, _ = small_sets
    a = train(tr, va, TrainConfig(epochs=2, seed=4))
    b = train(tr, va, TrainConfig(epochs=2, seed=4))
    assert history_text(a.history) == history_text(b.history)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert history_text(a.history).splitlines()[0] == "epoch,train_loss,val_loss,val_top1,train_reg"


def test_best_epoch_selection(small_sets):
    tr, va, _ = small_sets
    res = train(tr, va, TrainConfig(epochs=3, seed=1))
    best = max(h.val_top1 for h in res.history)
    chosen = res.history[res.best_epoch - 1]
    assert chosen.val_top1 == best
    assert all(h.val_top1 < best for h in res.history[res.best_epoch :])


def test_single_sample_memorization(small_sets):
    _, _, one = small_sets
    res = train(one, one, TrainConfig(epochs=200, batch_size=1, learning_rate=1e-3))
    assert res.history[-1].train_loss < 0.01
    r = evaluate(res.params, res.cfg, one)
    assert r.top1 == 1.0


def test_divergence_reports_position(small_sets):
    tr, va, _ = small_sets
    with pytest.raises(TrainingDiverged) as exc:
        with np.errstate(all="ignore"):
            train(tr, va, TrainConfig(epochs=3, optimizer="sgd", learning_rate=1e30, lam=0.0))
    assert exc.value.epoch >= 1 and exc.value.batch >= 0


def test_ablation_freezes_branch(small_sets):
    tr, va, _ = small_sets
    cfg = M.NetworkConfig(k=4)
    init = M.init_params(cfg, np.random.default_rng(2), np.float32)
    res = train(tr, va, TrainConfig(epochs=1, use_heatmap=False), cfg, init=init)
    assert not res.cfg.use_heatmap
    for name in init:
        if name.startswith("conv"):
            assert np.array_equal(res.params[name], init[name])
    assert not np.array_equal(res.params["mlp1_w"], init["mlp1_w"])


def test_mismatched_datasets_rejected(small_sets):
    tr, va, _ = small_sets
    other = ClusterModel(np.eye(3))
    cat = synthetic_catalog(500, np.random.default_rng(0))
    va3 = generate_dataset(cat, other, 4, master_seed=7)
    with pytest.raises(M.ConfigError):
        train(tr, va3, TrainConfig(epochs=1))
