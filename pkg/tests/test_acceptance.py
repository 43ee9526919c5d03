"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The experiment-scale tests (memorization, guidance direction, end-to-end) are
marked ``slow``; deselect them with ``-m "not slow"``.
"""

import math
import time
from functools import partial

import numpy as np
import pytest
import torch

from conftest import random_episode, record_criterion
from eaq.diffusion import TrainConfig, forward_noise, guided_loss_terms, make_schedule, train
from eaq.episode_data import (
    Episode,
    TensorizedDataset,
    compute_reward_to_go,
    detensorize,
    downsample_dataset,
    layout_for,
    tensorize,
)
from eaq.marl import (
    EnvConfig,
    LearnerConfig,
    available_actions,
    bcq_admissible,
    cooperation_metric,
    cql_penalty,
    evaluate,
    generate_offline_dataset,
    train_offline,
)
from eaq.rad import RadConfig, rad_augment, rad_dataset
from eaq.sampler import augment, decode_and_filter, sample_trajectories

ENV = EnvConfig()


def brute_rtg(r, gamma):
    return np.array([sum(gamma ** (j - i) * r[j] for j in range(i, len(r))) for i in range(len(r))])


def test_rtg_oracle():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 60))
        r = rng.normal(size=T) * rng.choice([0.1, 1.0, 20.0])
        gamma = float(rng.choice([0.9, 0.99, 1.0]))
        e = Episode(np.zeros((T, 1, 1)), np.zeros((T, 1), dtype=int), r)
        worst = max(worst, float(np.abs(compute_reward_to_go(e, gamma).rtg - brute_rtg(r, gamma)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 5
    record_criterion("RTG oracle", ok, f"max |err| = {worst:.2e} (tol 1e-10) over 1000 sequences, {dt:.2f}s")
    assert ok


def test_round_trip():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    eps = [random_episode(rng, N=3, d_obs=5, num_actions=6, T_max=20) for _ in range(500)]
    for e in eps[::7]:
        e.obs[:] *= 50.0  # wide dynamic range on some episodes
    ds = tensorize(eps, layout_for(eps, 6, T_max=20))
    exact = True
    worst = 0.0
    for i, e in enumerate(eps):
        d = detensorize(ds, i)
        exact &= d.length == e.length and np.array_equal(d.actions, e.actions)
        for got, want in ((d.obs, e.obs), (d.rewards, e.rewards), (d.rtg, e.rtg)):
            scale = np.maximum(np.abs(want), 1e-12)
            worst = max(worst, float((np.abs(got - want) / scale)[np.abs(want) > 1e-9].max(initial=0.0)))
    dt = time.perf_counter() - t0
    ok = exact and worst <= 1e-6 and dt < 30
    record_criterion("Round-trip", ok,
                     f"actions/done/lengths exact={exact}, max rel err {worst:.1e} (tol 1e-6), 500 episodes, {dt:.1f}s")
    assert ok


def test_schedule_and_forward_noise():
    t0 = time.perf_counter()
    s = make_schedule(3, 0.1, 0.3)
    exact = np.allclose(s.alpha_bars, [0.9, 0.72, 0.504], rtol=0, atol=1e-15)
    rng = np.random.default_rng(2)
    sched = make_schedule(1000)
    tau0 = rng.uniform(-1, 1, size=6)
    n = 10_000
    within = True
    for k in (1, 10, 250, 1000):
        ab = sched.alpha_bars[k - 1]
        draws = forward_noise(np.broadcast_to(tau0, (n, 6)), k, rng.normal(size=(n, 6)), sched)
        se_m = math.sqrt((1 - ab) / n)
        se_v = (1 - ab) * math.sqrt(2 / (n - 1))
        within &= bool(np.all(np.abs(draws.mean(0) - math.sqrt(ab) * tau0) < 3 * se_m))
        within &= bool(np.all(np.abs(draws.var(0, ddof=1) - (1 - ab)) < 3 * se_v))
    dt = time.perf_counter() - t0
    ok = exact and within and dt < 30
    record_criterion("Schedule/forward-noise", ok,
                     f"K=3 alpha_bar exact={exact}, mean/var within 3 SE at k in {{1,10,250,1000}}={within}, {dt:.1f}s")
    assert ok


def _const_q(values, F=6, T=4):
    x = torch.zeros(len(values), F, T, dtype=torch.float64)
    for i, v in enumerate(values):
        x[i, F - 2] = v
    return x


def test_guided_loss_contract():
    t0 = time.perf_counter()
    lam = 0.1
    L = torch.full((3,), 4)
    tau0 = _const_q([0.1, 0.6, -0.4])
    # generated Q above / at / below the batch max 0.6
    pred = _const_q([0.9, 0.6, 0.2])
    _, _, hinge, q_max, _ = guided_loss_terms(tau0, pred, L, 4, lam)
    expected = [0.0, 0.0, lam * 0.4]
    hinge_ok = float(q_max) == pytest.approx(0.6) and np.allclose((lam * hinge).numpy(), expected, atol=1e-12)

    worst = 0.0
    rng = np.random.default_rng(3)
    for _ in range(10):
        F, T = int(rng.integers(3, 9)), int(rng.integers(1, 7))
        tau0 = torch.as_tensor(rng.normal(size=(4, F, T)))
        p = torch.as_tensor(rng.normal(size=(4, F, T))).requires_grad_(True)
        lens = torch.as_tensor(rng.integers(1, T + 1, size=4))
        loss = guided_loss_terms(tau0, p, lens, F - 2, 0.5)[0]
        (g,) = torch.autograd.grad(loss, p)
        base = p.detach()
        num = torch.zeros_like(base)
        h = 1e-6
        for idx in np.ndindex(*base.shape):
            a, b = base.clone(), base.clone()
            a[idx] += h
            b[idx] -= h
            num[idx] = (guided_loss_terms(tau0, a, lens, F - 2, 0.5)[0]
                        - guided_loss_terms(tau0, b, lens, F - 2, 0.5)[0]) / (2 * h)
        worst = max(worst, float((g - num).abs().max() / g.abs().max().clamp_min(1e-12)))
    dt = time.perf_counter() - t0
    ok = hinge_ok and worst < 1e-4 and dt < 120
    record_criterion("Guided-loss contract", ok,
                     f"hinge cases ok={hinge_ok}, FD gradient max rel err {worst:.1e} (tol 1e-4), {dt:.1f}s")
    assert ok


@pytest.mark.slow
def test_memorization():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    ep = generate_offline_dataset(ENV, "medium", 1, seed=5)[0]
    layout = layout_for([ep], ENV.num_actions, ENV.T_max)
    ds = tensorize([ep], layout)
    # one episode; each of the 2000 steps sees it under 32 independent noise levels
    ds = TensorizedDataset(np.repeat(ds.data, 32, axis=0), layout, ds.stats,
                           np.repeat(ds.episode_lengths, 32))
    cfg = TrainConfig(lam=0.1, K=50, epochs=2000, batch_size=32, lr=1e-3, seed=0)
    model = train(ds, cfg)

    # denoising error averaged over every step index, fresh noise
    g = torch.Generator().manual_seed(1)
    x0 = torch.as_tensor(ds.data[:1], dtype=torch.float32).expand(200, -1, -1)
    k = torch.randint(1, 51, (200,), generator=g)
    ab = torch.as_tensor(model.schedule.alpha_bars, dtype=torch.float32)[k - 1].view(-1, 1, 1)
    xk = ab.sqrt() * x0 + (1 - ab).sqrt() * torch.randn(x0.shape, generator=g)
    with torch.no_grad():
        mse = float(((model.net(xk, k) - x0) ** 2).mean())

    samples = sample_trajectories(model, 20, seed=2)
    decoded, _ = decode_and_filter(samples, layout, ds.stats)
    matches = []
    for d in decoded:
        n = min(d.length, ep.length)
        matches.append(float((d.actions[:n] == ep.actions[:n]).sum()) / (ep.length * ep.num_agents))
    matches += [0.0] * (20 - len(decoded))
    med = float(np.median(matches))
    dt = time.perf_counter() - t0
    ok = mse < 0.01 and med >= 0.9 and dt < 600
    record_criterion("Memorization", ok,
                     f"denoising MSE {mse:.4f} (< 0.01), median action match {med:.3f} (>= 0.9) over 20 samples, "
                     f"K=50, 2000 steps, {dt:.0f}s")
    assert ok


def _q_generated_mean(episodes):
    return float(np.mean([np.mean(e.q_generated) for e in episodes]))


@pytest.mark.slow
def test_guidance_direction():
    """lambda=0.1 vs lambda=0 on 200 poor episodes, three seeds."""
    t0 = time.perf_counter()
    q_wins = coop_wins = 0
    details = []
    for seed in range(3):
        data = generate_offline_dataset(ENV, "poor", 200, seed=100 + seed)
        layout = layout_for(data, ENV.num_actions, ENV.T_max)
        ds = tensorize(data, layout)
        out = {}
        for lam in (0.0, 0.1):
            cfg = TrainConfig(lam=lam, K=100, epochs=200, batch_size=32, lr=2e-4, seed=seed)
            model = train(ds, cfg)
            syn, _ = decode_and_filter(sample_trajectories(model, 200, seed=seed), layout, ds.stats)
            out[lam] = syn
        q0, q1 = _q_generated_mean(out[0.0]), _q_generated_mean(out[0.1])
        c_orig = cooperation_metric(data, ENV.n_enemies, ENV.alive_index)
        c_syn = cooperation_metric(out[0.1], ENV.n_enemies, ENV.alive_index)
        q_wins += q1 > q0
        coop_wins += c_syn is not None and c_orig is not None and c_syn >= c_orig
        details.append(f"seed {seed}: q {q1:.3f} vs {q0:.3f}, coop {c_syn} vs {c_orig:.3f}")
    dt = time.perf_counter() - t0
    ok = q_wins >= 2 and coop_wins >= 2 and dt < 3600
    record_criterion("Guidance direction", ok,
                     f"q_tot higher in {q_wins}/3, cooperation >= original in {coop_wins}/3; "
                     + "; ".join(details) + f"; {dt:.0f}s")
    assert ok


def _e2e_seed(seed, pool, avail):
    """Returns {(regularizer, 'orig'|'aug'): mean eval return} for one seed."""
    original = downsample_dataset(pool, 0.03, seed)
    layout = layout_for(original, ENV.num_actions, ENV.T_max)
    ds = tensorize(original, layout)
    model = train(ds, TrainConfig(lam=0.1, seed=seed))  # full-size defaults: K=1000, 5000 epochs
    augmented = augment(original, model, 5, seed)
    assert len(augmented) == 6 * len(original)
    res = {}
    for reg in ("cql", "bcq"):
        for name, data in (("orig", original), ("aug", augmented)):
            pol = train_offline(LearnerConfig(regularizer=reg), data, 3000, seed, ENV.num_actions, avail).policy
            res[reg, name] = evaluate(pol, ENV, 100, seed=1000 + seed).mean_return
    return res


@pytest.mark.slow
def test_end_to_end_direction():
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    avail = partial(available_actions, config=ENV)
    pool = generate_offline_dataset(ENV, "poor", 1000, seed=0)
    runs = [_e2e_seed(s, pool, avail) for s in range(3)]
    wins = {reg: sum(r[reg, "aug"] >= r[reg, "orig"] for r in runs) for reg in ("cql", "bcq")}
    dt = time.perf_counter() - t0
    ok = wins["cql"] >= 2 and wins["bcq"] >= 2 and dt < 7200
    detail = "; ".join(
        f"{reg.upper()} aug>=orig in {wins[reg]}/3 ("
        + ", ".join(f"{r[reg, 'aug']:.2f} vs {r[reg, 'orig']:.2f}" for r in runs) + ")"
        for reg in ("cql", "bcq"))
    record_criterion("End-to-end direction", ok, f"{detail}; {dt:.0f}s")
    assert ok


def test_baseline_plumbing():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    checks = {}

    real = [random_episode(rng, N=2, d_obs=3, num_actions=4, T_max=6) for _ in range(7)]
    ds = tensorize(real, layout_for(real, 4, T_max=6))
    model = train(ds, TrainConfig(epochs=1, K=5, dim=8))
    aug = augment(real, model, 5, seed=0)
    rad = rad_dataset(real, RadConfig(), 5)
    checks["|D_aug| = (1+S)|D_real|"] = len(aug) == 42 and len(rad) == 42

    pos = [random_episode(rng) for _ in range(20)]
    for e in pos:
        e.obs[:] = np.abs(e.obs)
    bounds = True
    for mode in ("single", "multi"):
        for a, b in zip(pos, rad_augment(pos, RadConfig(mode=mode, seed=1))):
            bounds &= bool(np.all(b.obs >= 0.8 * a.obs - 1e-15) and np.all(b.obs <= 1.2 * a.obs + 1e-15))
            bounds &= a.actions.tobytes() == b.actions.tobytes() and a.rewards.tobytes() == b.rewards.tobytes()
    ident = all(np.array_equal(a.obs, b.obs) for a, b in zip(pos, rad_augment(pos, RadConfig(1.0, 1.0))))
    checks["RAD bounds/identity"] = bounds and ident

    q = torch.as_tensor(rng.normal(size=(10_000, 8)) * rng.choice([0.01, 1, 100], size=(10_000, 1)))
    a = torch.as_tensor(rng.integers(0, 8, size=10_000))
    checks["CQL >= 0 (10k)"] = bool((cql_penalty(q, a) >= 0).all())

    probs = rng.dirichlet(np.full(8, 0.3), size=10_000)
    thr = rng.uniform(1e-3, 1.0, size=(10_000, 1))
    mask = bcq_admissible(probs, thr)
    checks["BCQ keeps argmax (10k)"] = bool(mask[np.arange(10_000), probs.argmax(1)].all())

    data = generate_offline_dataset(ENV, "medium", 20, seed=0)
    mixer = train_offline(LearnerConfig(), data, 300, seed=0, num_actions=ENV.num_actions).mixer
    worst = np.inf
    h = 1e-3
    for _ in range(100):
        qs = torch.as_tensor(rng.normal(size=(1, ENV.n_allies)) * 3, dtype=torch.float32)
        st = torch.as_tensor(rng.normal(size=(1, ENV.n_allies * ENV.obs_dim)), dtype=torch.float32)
        with torch.no_grad():
            for i in range(ENV.n_allies):
                up, dn = qs.clone(), qs.clone()
                up[0, i] += h
                dn[0, i] -= h
                worst = min(worst, float((mixer(up, st) - mixer(dn, st)) / (2 * h)))
    checks["mixer monotone (100 pts)"] = worst >= -1e-6
    dt = time.perf_counter() - t0
    ok = all(checks.values()) and dt < 300
    record_criterion("Baseline plumbing", ok,
                     ", ".join(f"{k}={v}" for k, v in checks.items()) + f", min dQtot/dQi {worst:.2e}, {dt:.1f}s")
    assert ok
