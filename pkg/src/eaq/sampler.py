"""Ancestral DDPM sampling from a trained denoiser and assembly of augmented datasets."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
import torch

from .diffusion import DiffusionModel, NoiseSchedule
from .episode_data import ChannelLayout, Episode, NormalizationStats, compute_reward_to_go, decode_matrix

log = logging.getLogger(__name__)


def reverse_step(tau_k, k, model, sched: NoiseSchedule, eps):
    """One draw from p(tau_{k-1} | tau_k) with clipped x0 and fixed variance ``beta_tilde_k``.

    ``tau_k`` is a (B, F, T) tensor and ``k`` a Python int shared by the batch.
    ``model`` is any callable ``(x, k_tensor) -> x0_hat``.
    """
    sched.check_step(k)
    kk = torch.full((tau_k.shape[0],), int(k), dtype=torch.int64)
    with torch.no_grad():
        x0_hat = model(tau_k, kk).clamp(-1.0, 1.0)
    c0, ck = sched.posterior_mean_coefs
    mean = float(c0[k - 1]) * x0_hat + float(ck[k - 1]) * tau_k
    if k == 1:
        return mean
    return mean + float(np.sqrt(sched.posterior_variance[k - 1])) * eps


def sample_trajectories(model: DiffusionModel, count: int, seed, batch_size=256):
    """Run ``count`` independent reverse chains from N(0, I); returns a (count, F, T) array.

    Chain ``i`` draws from its own generator seeded by (seed, i), so results depend
    on ``batch_size`` only through float32 rounding inside the network.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    F, T = model.layout.num_features, model.layout.T_max
    sched = model.schedule
    net = model.net
    net.eval()
    children = np.random.SeedSequence(seed).spawn(count)
    gens = [torch.Generator().manual_seed(int(c.generate_state(1)[0])) for c in children]
    out = []
    for start in range(0, count, batch_size):
        g = gens[start:start + batch_size]
        x = torch.stack([torch.randn((F, T), generator=gi) for gi in g])
        for k in range(sched.K, 0, -1):
            eps = torch.stack([torch.randn((F, T), generator=gi) for gi in g]) if k > 1 else None
            x = reverse_step(x, k, net, sched, eps)
        out.append(x.numpy().astype(np.float64))
    return np.concatenate(out)


def decode_and_filter(samples, layout: ChannelLayout, stats: NormalizationStats, gamma=0.99,
                      recompute_rtg=True):
    """Decode generated tensors into episodes.

    The generated q_tot channel is kept as ``episode.q_generated``; ``rtg`` is
    recomputed from the decoded rewards unless ``recompute_rtg`` is False.
    Returns ``(episodes, dropped)``.
    """
    episodes = []
    dropped = 0
    for x in samples:
        try:
            e = decode_matrix(x, layout, stats)
        except ValueError:
            dropped += 1
            continue
        if e.length == 0:
            dropped += 1
            continue
        e = replace(e, q_generated=e.rtg)
        if recompute_rtg:
            e = compute_reward_to_go(e, gamma)
        episodes.append(e)
    if dropped:
        log.info("dropped %d of %d generated samples", dropped, len(samples))
    return episodes, dropped


def augment(real, model: DiffusionModel, scale: int, seed, gamma=0.99, recompute_rtg=True,
            source="synthetic"):
    """Return real episodes (tagged ``real``) followed by ``scale * len(real)`` synthetic ones."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    real = [replace(e, source="real") for e in real]
    target = scale * len(real)
    synthetic = []
    attempt = 0
    # zero-length decodes cannot occur with the T_max fallback, so this normally runs once
    while len(synthetic) < target:
        need = target - len(synthetic)
        samples = sample_trajectories(model, need, [int(seed), attempt])
        decoded, _ = decode_and_filter(samples, model.layout, model.stats, gamma, recompute_rtg)
        synthetic += [replace(e, source=source) for e in decoded]
        attempt += 1
    return real + synthetic[:target]
