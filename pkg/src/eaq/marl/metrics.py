"""Policy evaluation, focus-fire cooperation and observation coverage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from .env import FIRST_ATTACK, EnvConfig, FocusFireEnv, rollout


@dataclass
class EvalResult:
    mean_return: float
    std_return: float
    returns: np.ndarray
    episodes: list = field(repr=False, default_factory=list)

    def __iter__(self):
        # allows ``mean, std = evaluate(...)``
        return iter((self.mean_return, self.std_return))


def evaluate(policy, config: EnvConfig, episodes=20, seed=0) -> EvalResult:
    """Greedy rollouts of ``policy`` (callable on the (N, d_obs) joint observation)."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = FocusFireEnv(config)
    seeds = np.random.SeedSequence(seed).spawn(episodes)
    act = lambda obs, rng: np.asarray(policy(obs), dtype=np.int64)  # noqa: E731
    eps = [rollout(env, act, s) for s in seeds]
    returns = np.array([e.episode_return for e in eps])
    return EvalResult(float(returns.mean()), float(returns.std()), returns, eps)


def cooperation_metric(dataset, n_enemies, alive_index=2, first_attack=FIRST_ATTACK):
    """Share of all-alive-agents-attack timesteps in which every attack hits one enemy.

    Alive agents are read from the observation flag at ``alive_index``. Returns
    None when no timestep has every alive agent attacking.
    """
    focused = total = 0
    for e in dataset:
        alive = e.obs[:, :, alive_index] > 0.5
        f, t = kernels.focus_fire_counts(e.actions, alive, first_attack, n_enemies)
        focused += f
        total += t
    return focused / total if total else None


def _flat_obs(episodes):
    return np.concatenate([e.obs.reshape(-1, e.obs_dim) for e in episodes])


def coverage_statistic(reference, candidate):
    """Mean distance from each candidate observation vector to its nearest reference one."""
    if not reference:
        raise ValueError("empty reference set")
    ref = _flat_obs(reference)
    if not candidate:
        return 0.0
    cand = _flat_obs(candidate)
    if cand.shape[1] != ref.shape[1]:
        raise ValueError(f"d_obs mismatch: {cand.shape[1]} vs {ref.shape[1]}")
    return float(kernels.nearest_distances(cand, ref).mean())
