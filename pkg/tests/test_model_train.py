from dataclasses import replace

import numpy as np
import pytest

from sketchabs.core import InvalidInputError
from sketchabs.losses import LinearGenerator, LossWeights
from sketchabs.model import ModelConfig, ModelParams, encode, forward, init_params
from sketchabs.synth_data import generate_dataset
from sketchabs.train import (SGD, Adam, StepNoise, TrainConfig, TrainingError, gradcheck,
                             make_batch, objective, train, train_step)

MCFG = ModelConfig(d_obs=12, hidden=10, d=6, r=2)


@pytest.fixture(scope="module")
def small():
    ds = generate_dataset(n_objects=30, d_z=8, d_obs=12, sigma=0.1, seed=3)
    rngs = [np.random.default_rng(40 + i) for i in range(5)]
    params = init_params(MCFG, rngs[0])
    batch = make_batch(ds, ds.train[:6], rngs[1])
    noise = StepNoise.draw(tuple(rngs[2:]), 6, MCFG.d)
    gen = LinearGenerator(MCFG.d, 12, seed=1)
    return ds, params, batch, noise, gen


def test_zero_weights_give_zero_matrix():
    params = ModelParams(MCFG)
    m, pooled = forward(np.ones(12), "sketch", params)
    assert m.shape == (9, 6)
    np.testing.assert_array_equal(m, 0.0)
    np.testing.assert_array_equal(pooled, 0.0)


def test_forward_is_deterministic_and_rows_unit(rng):
    params = init_params(MCFG, rng)
    x = rng.normal(size=12)
    a, _ = forward(x, "photo", params)
    b, _ = forward(x, "photo", params)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, rtol=1e-12)
    with pytest.raises(InvalidInputError):
        forward(np.ones(11), "photo", params)
    with pytest.raises(InvalidInputError):
        forward(x, "drawing", params)


def test_heads_are_independent(rng):
    params = init_params(MCFG, rng)
    x = rng.normal(size=(3, 12))
    before, _, _ = encode(params, x, "sketch")
    params["sketch_w"][5] += rng.normal(size=params["sketch_w"][5].shape)
    after, _, _ = encode(params, x, "sketch")
    changed = np.any(before != after, axis=(0, 2))
    assert changed.tolist() == [r == 5 for r in range(9)]


def test_lr_zero_leaves_params(small):
    _, params, batch, noise, gen = small
    cfg = TrainConfig(batch_size=6, lr=0.0)
    for opt in (Adam(0.0), SGD(0.0)):
        new, _ = train_step(params, batch, opt, cfg, gen, noise)
        for k in params:
            np.testing.assert_array_equal(new[k], params[k])


def test_sgd_update_is_exact(small):
    _, params, batch, noise, gen = small
    cfg = TrainConfig(batch_size=6, optimizer="sgd", lr=0.01)
    _, grads, _ = objective(params, batch, cfg, gen, noise)
    new, _ = train_step(params, batch, SGD(0.01), cfg, gen, noise)
    for k in params:
        np.testing.assert_array_equal(new[k], params[k] - 0.01 * grads[k])


def test_adam_first_step_has_lr_magnitude(small):
    _, params, batch, noise, gen = small
    cfg = TrainConfig(batch_size=6)
    _, grads, _ = objective(params, batch, cfg, gen, noise)
    new = Adam(1e-3).step(params, grads)
    step = params["backbone_w1"] - new["backbone_w1"]
    big = np.abs(grads["backbone_w1"]) > 1e-6
    np.testing.assert_allclose(np.abs(step[big]), 1e-3, rtol=1e-2)


def test_recon_only_step_decreases_recon(small):
    _, params, batch, noise, gen = small
    cfg = TrainConfig(batch_size=6, optimizer="sgd", lr=1e-3, weights=LossWeights(1.0, 0.0, 0.0))
    before = objective(params, batch, cfg, gen, noise)[2]["L_recons"]
    new, _ = train_step(params, batch, SGD(1e-3), cfg, gen, noise)
    after = objective(new, batch, cfg, gen, noise)[2]["L_recons"]
    assert after < before


def test_metrics_report_components(small):
    _, params, batch, noise, gen = small
    total, _, m = objective(params, batch, TrainConfig(batch_size=6), gen, noise)
    assert total == pytest.approx(0.5 * m["L_recons"] + m["L_accq"] + 0.5 * m["L_abs"])
    assert -1.0 <= m["L_accq"] <= 0.0
    assert m["mask_hist"].sum() == 6


def test_degenerate_grouping_matches_no_mask(small):
    _, params, batch, noise, gen = small
    t_all = TrainConfig(batch_size=6, group_sizes=(9, 0, 0), gumbel_hard=False)
    t_off = TrainConfig(batch_size=6, use_mask=False)
    a_total, a_grads, _ = objective(params, batch, t_all, gen, noise)
    b_total, b_grads, _ = objective(params, batch, t_off, gen, noise)
    assert a_total == pytest.approx(b_total, rel=1e-12)
    for k in a_grads:
        np.testing.assert_allclose(a_grads[k], b_grads[k], atol=1e-12)


def test_non_finite_gradient_aborts(small):
    _, params, batch, noise, gen = small
    bad = params.copy()
    bad["backbone_b1"][0] = np.inf
    with pytest.raises((TrainingError, InvalidInputError)):
        train_step(bad, batch, SGD(0.1), TrainConfig(batch_size=6), gen, noise)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=1)
    with pytest.raises(InvalidInputError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(InvalidInputError):
        TrainConfig(group_sizes=(3, 3, 2))


def test_training_is_seed_deterministic(small):
    ds = small[0]
    cfg = TrainConfig(batch_size=8, epochs=3, seed=5)
    p1, r1 = train(ds, cfg, MCFG)
    p2, r2 = train(ds, cfg, MCFG)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    assert r1 == r2
    p3, _ = train(ds, replace(cfg, seed=6), MCFG)
    assert not np.array_equal(p1["backbone_w1"], p3["backbone_w1"])


def test_zero_epochs_returns_init(small):
    ds = small[0]
    params, rows = train(ds, TrainConfig(epochs=0, seed=2), MCFG)
    from sketchabs.train import _Streams
    ref = init_params(MCFG, _Streams(2).init)
    assert rows == []
    for k in params:
        np.testing.assert_array_equal(params[k], ref[k])


def test_loss_trace_finite_and_drops(small):
    ds = small[0]
    _, rows = train(ds, TrainConfig(batch_size=8, epochs=25, lr=3e-3), MCFG)
    totals = [r["L_total"] for r in rows]
    assert all(np.isfinite(totals))
    assert np.mean(totals[-5:]) < np.mean(totals[:5])
    assert all(sum(r["mask_hist"]) == 24 for r in rows)


def test_triplet_training_runs(small):
    ds = small[0]
    _, rows = train(ds, TrainConfig(batch_size=8, epochs=2, loss="triplet"), MCFG)
    assert all(r["L_accq"] >= 0 for r in rows)


def test_gradcheck_generator_only(small):
    _, params, batch, noise, gen = small
    cfg = TrainConfig(batch_size=6, weights=LossWeights(1.0, 0.0, 0.0))
    report = gradcheck(params, batch, cfg, gen, noise)
    assert max(r["max_rel_err"] for r in report.values()) < 1e-6


@pytest.mark.parametrize("loss", ["accq", "triplet"])
def test_gradcheck_full_objective(small, loss):
    _, params, batch, noise, gen = small
    cfg = TrainConfig(batch_size=6, loss=loss, accq=replace(TrainConfig().accq, tau2=0.1))
    report = gradcheck(params, batch, cfg, gen, noise)
    assert set(report) == set(params)
    worst = max(report.values(), key=lambda r: r["max_rel_err"])
    assert worst["max_rel_err"] < 1e-4, worst
