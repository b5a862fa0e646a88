"""Acceptance gate A1-A9.

Each test appends one PASS/FAIL line to the terminal summary. Trained models
are shared through a module fixture so every (loss, seed) pair trains once.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES
from sketchabs import abstraction_mask as am
from sketchabs.accq import accq_loss, batch_accuracy_at_q, hard_rank, hard_ranks
from sketchabs.cli import run_training
from sketchabs.config import RunConfig
from sketchabs.evaluation import (Retriever, accuracy_from_ranks, entropy_study,
                                  mixed_completion_accuracy, percentile_score)
from sketchabs.losses import (LinearGenerator, abstraction_ce_loss,
                              reconstruction_loss, triplet_loss)
from sketchabs.model import ModelConfig, init_params
from sketchabs.synth_data import generate_dataset, write_dataset
from sketchabs.train import StepNoise, TrainConfig, gradcheck, make_batch, train

SEEDS = (0, 1, 2)
T_GRID = [round(0.1 * i, 1) for i in range(1, 11)]


def record(name, ok, detail):
    ACCEPTANCE_LINES.append(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")


class Runs:
    """Lazily trains and caches one model per (variant, seed)."""

    variants = {
        "full": {},
        "triplet": {"loss": "triplet"},
        "fixed_q1": {"fixed_q": 1},
    }

    def __init__(self):
        self.datasets = {s: generate_dataset(seed=s) for s in SEEDS}
        self.models = {}
        self.seconds = {}

    def get(self, variant, seed):
        key = (variant, seed)
        if key not in self.models:
            start = time.perf_counter()
            cfg = TrainConfig(seed=seed, **self.variants[variant])
            params, _ = train(self.datasets[seed], cfg)
            self.seconds[key] = time.perf_counter() - start
            self.models[key] = params
        return self.models[key]

    def retriever(self, variant, seed):
        return Retriever(self.get(variant, seed), self.datasets[seed])

    def train_time(self, variant):
        return sum(v for (name, _), v in self.seconds.items() if name == variant)


@pytest.fixture(scope="module")
def runs():
    return Runs()


def fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        p, m = x.copy(), x.copy()
        p[idx] += h
        m[idx] -= h
        g[idx] = (f(p) - f(m)) / (2 * h)
    return g


def rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def test_a1_mask_states():
    start = time.perf_counter()
    expected = {am.Level.COARSE: [1, 0, 0], am.Level.MID: [1, 1, 0], am.Level.FINE: [1, 1, 1]}
    ok = True
    for level, state in expected.items():
        mask3 = am.build_selection_mask(level.one_hot())
        mask9 = am.expand_mask(mask3)
        ok &= mask3.tolist() == state and mask9.tolist() == np.repeat(state, 3).tolist()
    ok &= am.expand_mask([1, 1, 0]).tolist() == [1, 1, 1, 1, 1, 1, 0, 0, 0]
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1.0
    record("A1", ok, f"3 levels + footnote expansion exact, {elapsed:.3f}s")
    assert ok


def test_a2_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"accq": 0.0, "abs": 0.0, "recons": 0.0, "triplet": 0.0, "total": 0.0}
    counts = dict.fromkeys(worst, 0)

    while counts["accq"] < 20:
        b = int(rng.choice([2, 4, 8]))
        dist = rng.uniform(0.1, 2.0, size=(b, b))
        q = rng.choice([1.0, 5.0, 10.0], size=b)
        _, g = accq_loss(dist, q, 1.0, 0.1)
        worst["accq"] = max(worst["accq"], rel_err(g, fd(lambda d: accq_loss(d, q, 1.0, 0.1)[0], dist)))
        counts["accq"] += 1

    while counts["abs"] < 20:
        a_hat = am.softmax(rng.normal(size=3))
        gt = np.eye(3)[rng.integers(3)]
        _, g = abstraction_ce_loss(a_hat, gt)
        worst["abs"] = max(worst["abs"], rel_err(g, fd(lambda x: abstraction_ce_loss(x, gt)[0], a_hat)))
        counts["abs"] += 1

    gen = LinearGenerator(4, 10, seed=3)
    while counts["recons"] < 20:
        zs, zp, p = rng.normal(size=(14, 4)), rng.normal(size=(14, 4)), rng.normal(size=10)
        _, gs, gp = reconstruction_loss(zs, zp, p, gen)
        err = max(rel_err(gs, fd(lambda x: reconstruction_loss(x, zp, p, gen)[0], zs)),
                  rel_err(gp, fd(lambda x: reconstruction_loss(zs, x, p, gen)[0], zp)))
        worst["recons"] = max(worst["recons"], err)
        counts["recons"] += 1

    while counts["triplet"] < 20:
        fs, fp, fn = (rng.normal(size=(9, 3)) for _ in range(3))
        mask = am.expand_mask(am.build_selection_mask(np.eye(3)[rng.integers(3)]))
        val, grads = triplet_loss(fs, fp, fn, 1.0, mask)
        if val < 1e-3:
            continue  # hinge kink or inactive
        for k, g in enumerate(grads):
            def f(x, k=k):
                args = [fs, fp, fn]
                args[k] = x
                return triplet_loss(*args, mu=1.0, mask9=mask)[0]
            worst["triplet"] = max(worst["triplet"], rel_err(g, fd(f, [fs, fp, fn][k])))
        counts["triplet"] += 1

    ds = generate_dataset(n_objects=20, d_z=8, d_obs=12, seed=7)
    mcfg = ModelConfig(d_obs=12, hidden=10, d=6, r=2)
    gen = LinearGenerator(6, 12, seed=7)
    for i in range(20):
        rngs = [np.random.default_rng(100 * i + j) for j in range(5)]
        cfg = TrainConfig(batch_size=4, loss="accq" if i % 2 == 0 else "triplet",
                          accq=replace(TrainConfig().accq, tau2=0.1))
        params = init_params(mcfg, rngs[0])
        batch = make_batch(ds, [ds.train[j] for j in rngs[1].choice(16, 4, replace=False)], rngs[1])
        noise = StepNoise.draw(tuple(rngs[2:]), 4, 6)
        report = gradcheck(params, batch, cfg, gen, noise, samples_per_group=6, seed=i)
        worst["total"] = max(worst["total"], max(r["max_rel_err"] for r in report.values()))
        counts["total"] += 1

    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and min(counts.values()) >= 20 and elapsed < 30
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record("A2", ok, f"max rel err {detail} (<1e-4), {elapsed:.1f}s")
    assert ok


def test_a3_surrogate_matches_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    b = 16
    worst = 0.0
    for _ in range(100):
        dist = rng.uniform(0, 2, size=(b, b))
        q = rng.choice([1, 5, 10], size=b)
        loss, _ = accq_loss(dist, q, 1e-4, 1e-4)
        worst = max(worst, abs(-loss - batch_accuracy_at_q(dist, q)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1 / (2 * b) and elapsed < 10
    record("A3", ok, f"max |-L - Acc@q| = {worst:.2e} (<= {1 / (2 * b):.4f}), {elapsed:.2f}s")
    assert ok


def test_a4_end_to_end_training(runs):
    accs, chance = [], []
    for s in SEEDS:
        r = runs.retriever("full", s)
        ranks, _, _ = r.ranks(1.0)
        accs.append(accuracy_from_ranks(ranks, (1,))[1])
        chance.append(1.0 / r.n_gallery)
    elapsed = runs.train_time("full")
    ok = all(a >= 0.5 for a in accs) and all(c == 0.05 for c in chance) and elapsed < 600 * 3
    record("A4", ok, f"Acc@1 per seed {accs} (>=0.50, chance 0.05), "
                     f"train {elapsed / len(SEEDS):.1f}s/seed")
    assert ok


def test_a5_entropy_trend(runs):
    start = time.perf_counter()
    rho_full, rho_trip = [], []
    for s in SEEDS:
        for name, out in (("full", rho_full), ("triplet", rho_trip)):
            curve = entropy_study(runs.retriever(name, s), T_GRID)
            out.append(float(spearmanr(T_GRID, [h for _, h in curve])[0]))
    elapsed = time.perf_counter() - start
    per_seed = [f <= -0.8 and t > f for f, t in zip(rho_full, rho_trip)]
    ok = all(per_seed) and elapsed < 300
    record("A5", ok, f"spearman full {np.round(rho_full, 3).tolist()} (<= -0.8), "
                     f"triplet {np.round(rho_trip, 3).tolist()} (must exceed full)")
    assert ok


def test_a6_level_q_benefit(runs):
    full, fixed = [], []
    for s in SEEDS:
        for name, out in (("full", full), ("fixed_q1", fixed)):
            ranks, _, _ = runs.retriever(name, s).ranks(0.3)
            out.append(accuracy_from_ranks(ranks, (10,))[10])
    ok = np.mean(full) >= np.mean(fixed) and runs.train_time("fixed_q1") < 900
    record("A6", ok, f"Acc@10 at t=0.3: per-level q {np.mean(full):.3f} vs q=1 {np.mean(fixed):.3f}")
    assert ok


def _oracle_rank(row, true):
    order = sorted(range(len(row)), key=lambda j: (row[j], j != true))
    return order.index(true) + 1


def test_a7_rank_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        # coarse integer grid so ties occur
        dist = rng.integers(0, 10, size=(n, n)).astype(float)
        true = rng.integers(0, n, size=n)
        ranks = hard_ranks(dist, true)
        oracle = np.array([_oracle_rank(list(dist[i]), true[i]) for i in range(n)])
        mismatches += int(np.any(ranks != oracle))
        mismatches += int(any(hard_rank(dist[i], true[i]) != oracle[i] for i in range(min(3, n))))
        ma = percentile_score(ranks, n)
        ma_oracle = np.array([100.0 * (n - r) / (n - 1) for r in oracle])
        mismatches += int(np.any(ma != ma_oracle))
        mismatches += int(np.any(1.0 / ranks != np.array([1.0 / r for r in oracle])))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 5
    record("A7", ok, f"{mismatches} mismatches over 1000 instances, {elapsed:.2f}s")
    assert ok


def test_a8_determinism(tmp_path):
    cfg = RunConfig()
    data = tmp_path / "data"
    write_dataset(generate_dataset(seed=cfg.data.seed), data)
    start = time.perf_counter()
    run_training(cfg, data, tmp_path / "a")
    one = time.perf_counter() - start
    run_training(cfg, data, tmp_path / "b")
    both = time.perf_counter() - start
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("checkpoint.bin", "metrics.csv"))
    ok = same and both < 2 * one + 5
    record("A8", ok, f"checkpoint + metrics bitwise identical={same}, {both:.1f}s for two runs")
    assert ok


def test_a9_dynamic_vs_random(runs):
    dyn, rnd = [], []
    for s in SEEDS:
        r = runs.retriever("full", s)
        dyn.append(mixed_completion_accuracy(r, (1,), "dynamic", seed=s)[1])
        rnd.append(mixed_completion_accuracy(r, (1,), "random", seed=s)[1])
    ok = np.mean(dyn) >= np.mean(rnd)
    record("A9", ok, f"mixed-completion Acc@1 dynamic {np.mean(dyn):.3f} vs random {np.mean(rnd):.3f}")
    assert ok
