import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from driftlab import autodiff as ad
from driftlab import meta
from driftlab.bayes import FeatureNetwork, feature_forward
from driftlab.dynamics import mirror, sample_plant_ensemble
from driftlab.meta import (AdamState, EpisodeBatch, TrainConfig, adam_step, grad_nll,
                           init_params, nll_loss, nll_reference)

SHIFT = np.array([0, 10, 0, 10, 0, 500, 0, 500.0])
SCALE = np.array([0.3, 4, 0.2, 4, 0.2, 600, 0.2, 600.0])


def small_params(rng, hidden=12, d=5):
    net = FeatureNetwork.init(int(rng.integers(1000)), SHIFT, SCALE, hidden=hidden, n_features=d)
    p = init_params(net, sigma=[0.05, 0.1, 0.02, 0.2], n_features=d)
    p["theta0"] = 0.1 * rng.normal(size=p["theta0"].shape)
    p["lam_chol"] = p["lam_chol"] + 0.2 * rng.normal(size=p["lam_chol"].shape)
    p["log_sigma"] = p["log_sigma"] + 0.1 * rng.normal(size=4)
    for k in ("b1", "b2", "b_out"):
        p[k] = 0.1 * rng.normal(size=p[k].shape)
    return p


def random_batch(rng, B=3, T=10):
    z = SHIFT + SCALE * rng.normal(size=(B, T, 8))
    h = rng.normal(size=(B, T, 4))
    y = h + 0.1 * rng.normal(size=(B, T, 4))
    return EpisodeBatch(z, h, y, np.arange(B))


# loss


def test_loss_matches_reference_implementation(rng):
    for _ in range(3):
        p = small_params(rng)
        b = random_batch(rng)
        a, r = float(nll_loss(p, b, SHIFT, SCALE)), nll_reference(p, b, SHIFT, SCALE)
        assert abs(a - r) <= 1e-10 * max(1.0, abs(r))


def test_realizable_data_scores_only_normalization(rng):
    p = small_params(rng)
    p["lam_chol"] = np.tile(-1e3 * np.eye(p["lam_chol"].shape[-1]), (4, 1, 1))  # Lam0^-1 = 0
    b = random_batch(rng)
    phi = feature_forward(p, SHIFT, SCALE, b.z)
    y = b.h + np.einsum("btid,id->bti", phi, p["theta0"])
    b = EpisodeBatch(b.z, b.h, y, b.task)
    want = b.z.shape[0] * b.z.shape[1] * np.sum(2 * p["log_sigma"])
    assert float(nll_loss(p, b, SHIFT, SCALE)) == pytest.approx(want, rel=1e-12)


def test_loss_is_additive_over_windows(rng):
    p = small_params(rng)
    b = random_batch(rng)
    two = EpisodeBatch.concat([b, b])
    assert float(nll_loss(p, two, SHIFT, SCALE)) == pytest.approx(2 * float(nll_loss(p, b, SHIFT, SCALE)),
                                                                   rel=1e-13)


# gradients


def central_difference(p, b, key, idx, h=1e-5):
    q = {k: v.copy() for k, v in p.items()}
    q[key][idx] += h
    f1 = float(nll_loss(q, b, SHIFT, SCALE))
    q[key][idx] -= 2 * h
    f0 = float(nll_loss(q, b, SHIFT, SCALE))
    return (f1 - f0) / (2 * h)


def test_gradient_matches_finite_differences(rng):
    p = small_params(rng)
    b = random_batch(rng)
    _, g = grad_nll(p, b, SHIFT, SCALE)
    for key in sorted(p):
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in p[key].shape)
            fd = central_difference(p, b, key, idx)
            assert abs(g[key][idx] - fd) <= 1e-4 * max(abs(fd), 1e-2), (key, idx)


def test_perfect_fit_is_stationary_in_prior_mean(rng):
    p = small_params(rng)
    b = random_batch(rng)
    phi = feature_forward(p, SHIFT, SCALE, b.z)
    b = EpisodeBatch(b.z, b.h, b.h + np.einsum("btid,id->bti", phi, p["theta0"]), b.task)
    _, g = grad_nll(p, b, SHIFT, SCALE)
    assert np.max(np.abs(g["theta0"])) < 1e-10


def test_gradient_is_linear_in_batches(rng):
    p = small_params(rng)
    b1, b2 = random_batch(rng), random_batch(rng)
    _, g1 = grad_nll(p, b1, SHIFT, SCALE)
    _, g2 = grad_nll(p, b2, SHIFT, SCALE)
    _, g = grad_nll(p, EpisodeBatch.concat([b1, b2]), SHIFT, SCALE)
    for k in p:
        assert np.allclose(g[k], g1[k] + g2[k], rtol=1e-10, atol=1e-10)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_is_reported(rng):
    p = small_params(rng)
    p["log_sigma"] = np.full(4, -1e4)
    with pytest.raises(meta.NonFinite):
        grad_nll(p, random_batch(rng), SHIFT, SCALE)


@given(st.integers(0, 10_000))
def test_prior_parameterization_is_psd(seed):
    raw = 3.0 * np.random.default_rng(seed).normal(size=(4, 6, 6))
    lam = np.asarray(ad.value(meta.lam_inv_from_chol(raw)))
    assert np.array_equal(lam, np.swapaxes(lam, 1, 2))
    assert np.min(np.linalg.eigvalsh(lam)) >= -1e-10


def test_prior_parameterization_inverts():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(4, 6, 6))
    lam = M @ np.swapaxes(M, 1, 2) + np.eye(6)
    back = np.asarray(ad.value(meta.lam_inv_from_chol(meta.chol_from_lam_inv(lam))))
    assert np.allclose(back, lam, rtol=1e-10, atol=1e-10)


# optimizer


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    s = AdamState({"w": np.array([0.5, 0.5])}, {"w": np.array([0.1, 0.1])}, 3)
    s2, p2 = adam_step(s, p, {"w": np.zeros(2)}, 1e-3)
    assert np.allclose(s2.m["w"], 0.45) and np.allclose(s2.v["w"], 0.0999)
    # bias-corrected first moment is non-zero here, so only the zero-moment case is a no-op
    s0 = AdamState.zeros_like(p)
    _, p3 = adam_step(s0, p, {"w": np.zeros(2)}, 1e-3)
    assert np.array_equal(p3["w"], p["w"])


def test_adam_unit_step():
    p = {"w": np.array([0.0])}
    s = AdamState.zeros_like(p)
    lr = 1e-3
    for _ in range(1000):
        prev = p["w"].copy()
        s, p = adam_step(s, p, {"w": np.array([3.7])}, lr)
    assert abs(abs(prev[0] - p["w"][0]) - lr) <= 0.01 * lr


def test_adam_three_step_trace():
    g = [0.5, -1.0, 2.0]
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    m = v = 0.0
    x = 1.0
    for t, gt in enumerate(g, start=1):
        m = b1 * m + (1 - b1) * gt
        v = b2 * v + (1 - b2) * gt * gt
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    # hand-worked values of the same arithmetic
    assert x == pytest.approx(1.0 - 0.1 - 0.1 * (-0.055 / 0.19) / math.sqrt(0.00124975 / 0.001999)
                              - 0.1 * 0.1505 / 0.271 / math.sqrt(0.00524850025 / 0.002997001), rel=1e-7)  # eps omitted
    p = {"w": np.array([1.0])}
    s = AdamState.zeros_like(p)
    for gt in g:
        s, p = adam_step(s, p, {"w": np.array([gt])}, lr)
    assert p["w"][0] == pytest.approx(x, rel=1e-14)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    c, n = meta.clip_global_norm(g, 1.0)
    assert n == 5.0 and np.allclose([c["a"][0], c["b"][0]], [0.6, 0.8])
    assert meta.clip_global_norm(g, 10.0)[0] is g


# dataset


@pytest.fixture(scope="module")
def small_dataset():
    return meta.build_dataset(sample_plant_ensemble(0, 2), seed=0, steps=40)


def test_dataset_shape_and_mirroring(small_dataset):
    n = 2 * len(meta.DEFAULT_SCENARIOS)
    plain = meta.build_dataset(sample_plant_ensemble(0, 2), seed=0, steps=40, mirrored=False)
    assert len(plain) == n and len(small_dataset) == 2 * n
    for a, b in zip(plain, small_dataset[n:]):
        m = mirror(a)
        assert np.array_equal(m.x, b.x) and np.array_equal(m.u, b.u)


def test_dataset_deterministic(small_dataset):
    again = meta.build_dataset(sample_plant_ensemble(0, 2), seed=0, steps=40)
    assert all(np.array_equal(a.x, b.x) for a, b in zip(small_dataset, again))


def test_dataset_requires_plants():
    with pytest.raises(ValueError):
        meta.build_dataset([])


# training


def test_zero_epochs_returns_initialization(small_dataset):
    cfg = TrainConfig(epochs=0, seed=4)
    res = meta.meta_train(small_dataset, cfg)
    train, _ = meta.split_tasks(small_dataset, cfg.holdout_fraction, cfg.seed)
    shift, scale = meta.fit_normalization(train)
    init = FeatureNetwork.init(4, shift, scale)
    for k, v in init.params().items():
        assert np.array_equal(res.params[k], v)
    assert len(res.curve) == 1


def test_training_is_deterministic_and_improves(small_dataset):
    cfg = TrainConfig(epochs=4, seed=1, batch_size=8, holdout_fraction=0.5)
    a = meta.meta_train(small_dataset, cfg)
    b = meta.meta_train(small_dataset, cfg)
    assert a.curve == b.curve
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.curve[-1]["train_nll"] < a.curve[0]["train_nll"]
    assert [r["epoch"] for r in a.curve] == list(range(5))


def test_holdout_tasks_never_drive_updates(small_dataset):
    cfg = TrainConfig(epochs=2, seed=1, batch_size=8, holdout_fraction=0.5)
    full = meta.meta_train(small_dataset, cfg)
    train, hold = meta.split_tasks(small_dataset, cfg.holdout_fraction, cfg.seed)
    assert hold
    only = meta.meta_train(train, TrainConfig(epochs=2, seed=1, batch_size=8, holdout_fraction=0.0))
    for k in full.params:
        assert np.array_equal(full.params[k], only.params[k])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(decay=1.5)
    with pytest.raises(ValueError):
        TrainConfig(horizon=0)


def test_curve_csv(tmp_path, small_dataset):
    res = meta.meta_train(small_dataset, TrainConfig(epochs=1, seed=0, batch_size=8))
    meta.write_curve(tmp_path / "c.csv", res.curve)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_nll,holdout_nll,step_size" and len(lines) == 3


def test_adapted_mse_needs_spare_transitions(small_dataset):
    res = meta.random_feature_model(small_dataset, TrainConfig(seed=0))
    mse = meta.adapted_mse(res.net, res.belief, small_dataset[:2], n_updates=10)
    assert math.isfinite(mse) and mse > 0
    with pytest.raises(ValueError):
        meta.adapted_mse(res.net, res.belief, small_dataset[:1], n_updates=10_000)
