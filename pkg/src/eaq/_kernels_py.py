"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def discounted_cumsum(rewards, gamma):
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def batch_discounted_cumsum(rewards, lengths, gamma):
    rewards = np.asarray(rewards, dtype=np.float64)
    lengths = np.asarray(lengths)
    mask = np.arange(rewards.shape[1])[None, :] < lengths[:, None]
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        acc = np.where(mask[:, t], rewards[:, t] + gamma * acc, 0.0)
        out[:, t] = acc
    return out


def nearest_distances(cand, ref):
    cand = np.asarray(cand, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    out = np.empty(len(cand))
    # bound the (chunk, m, d) difference tensor to ~32 MB
    chunk = max(1, 4_000_000 // max(1, ref.size))
    for start in range(0, len(cand), chunk):
        diff = cand[start:start + chunk, None, :] - ref[None, :, :]
        out[start:start + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).min(axis=1))
    return out


def focus_fire_counts(actions, alive, first_attack, num_attack):
    actions = np.asarray(actions)
    alive = np.asarray(alive, dtype=bool)
    is_attack = (actions >= first_attack) & (actions < first_attack + num_attack)
    any_alive = alive.any(axis=1)
    all_attack = np.where(alive, is_attack, True).all(axis=1) & any_alive
    big = np.iinfo(np.int64).max
    lo = np.where(alive, actions, big).min(axis=1)
    hi = np.where(alive, actions, -1).max(axis=1)
    focused = all_attack & (lo == hi)
    return int(focused.sum()), int(all_attack.sum())
