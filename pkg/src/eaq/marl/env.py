"""Cooperative focus-fire gridworld: N allies against M stationary enemies.

Actions per agent: 0 noop, 1-4 move N/S/E/W, 5+j attack enemy j (range-free).
Each step: moves, then attacks (1 damage each), then every surviving enemy
strikes for 1 damage: at its nearest attacker if it was hit this step,
otherwise at the nearest alive ally (Manhattan distance, lowest index on ties).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..episode_data import Episode, compute_reward_to_go

NOOP = 0
FIRST_ATTACK = 5
_MOVES = np.array([[0, 0], [0, 1], [0, -1], [1, 0], [-1, 0]])


@dataclass(frozen=True)
class EnvConfig:
    n_allies: int = 3
    n_enemies: int = 3
    grid: int = 5
    enemy_hp: int = 3
    ally_hp: int = 4
    T_max: int = 30
    damage_reward: float = 0.1
    kill_reward: float = 1.0
    win_reward: float = 20.0

    @property
    def num_actions(self):
        return FIRST_ATTACK + self.n_enemies

    @property
    def obs_dim(self):
        # own x, y, alive; per enemy dx, dy, hp fraction, alive
        return 3 + 4 * self.n_enemies

    @property
    def max_return(self):
        return self.win_reward + self.n_enemies * (self.kill_reward + self.damage_reward * self.enemy_hp)

    @property
    def alive_index(self):
        return 2

    @property
    def scenario(self):
        return f"{self.n_allies}v{self.n_enemies}"

    def to_dict(self):
        return asdict(self)


class FocusFireEnv:
    def __init__(self, config: EnvConfig = EnvConfig()):
        self.config = config
        self.state_log = []

    def reset(self, seed=None):
        c = self.config
        rng = np.random.default_rng(seed)
        self.ally_pos = rng.integers(0, c.grid, size=(c.n_allies, 2))
        self.enemy_pos = rng.integers(0, c.grid, size=(c.n_enemies, 2))
        self.ally_hp = np.full(c.n_allies, c.ally_hp, dtype=np.int64)
        self.enemy_hp = np.full(c.n_enemies, c.enemy_hp, dtype=np.int64)
        self.t = 0
        self.done = False
        self.state_log = [self._snapshot()]
        return self.observe()

    def _snapshot(self):
        return {"ally_hp": self.ally_hp.copy(), "enemy_hp": self.enemy_hp.copy(),
                "ally_pos": self.ally_pos.copy()}

    def observe(self):
        c = self.config
        scale = max(c.grid - 1, 1)
        obs = np.zeros((c.n_allies, c.obs_dim))
        enemy_alive = self.enemy_hp > 0
        for n in range(c.n_allies):
            if self.ally_hp[n] <= 0:
                continue
            obs[n, 0:2] = self.ally_pos[n] / scale
            obs[n, 2] = 1.0
            rel = (self.enemy_pos - self.ally_pos[n]) / scale
            block = np.column_stack([rel, self.enemy_hp / c.enemy_hp, enemy_alive.astype(float)])
            block[~enemy_alive, :2] = 0.0
            obs[n, 3:] = block.reshape(-1)
        return obs

    def step(self, actions):
        """Advance one step; returns ``(obs, reward, done, info)``.

        ``info["actions"]`` holds the effective actions (dead allies forced to noop).
        """
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        c = self.config
        actions = np.asarray(actions, dtype=np.int64).copy()
        if actions.shape != (c.n_allies,) or actions.min() < 0 or actions.max() >= c.num_actions:
            raise ValueError(f"invalid joint action {actions}")
        alive = self.ally_hp > 0
        actions[~alive] = NOOP

        moving = (actions >= 1) & (actions < FIRST_ATTACK)
        self.ally_pos[moving] = np.clip(self.ally_pos[moving] + _MOVES[actions[moving]], 0, c.grid - 1)

        attackers = [[] for _ in range(c.n_enemies)]
        for n in np.flatnonzero(actions >= FIRST_ATTACK):
            j = actions[n] - FIRST_ATTACK
            if self.enemy_hp[j] > 0:
                attackers[j].append(n)
        damage = 0
        kills = 0
        for j, hitters in enumerate(attackers):
            if not hitters:
                continue
            dealt = min(len(hitters), int(self.enemy_hp[j]))
            self.enemy_hp[j] -= dealt
            damage += dealt
            if self.enemy_hp[j] == 0:
                kills += 1

        for j, hitters in enumerate(attackers):
            if self.enemy_hp[j] <= 0:
                continue
            pool = hitters or list(np.flatnonzero(self.ally_hp > 0))
            if not pool:
                break
            dist = np.abs(self.ally_pos[pool] - self.enemy_pos[j]).sum(axis=1)
            target = pool[int(np.argmin(dist))]
            self.ally_hp[target] = max(self.ally_hp[target] - 1, 0)

        reward = c.damage_reward * damage + c.kill_reward * kills
        self.t += 1
        victory = bool(np.all(self.enemy_hp == 0))
        defeat = bool(np.all(self.ally_hp == 0))
        if victory:
            reward += c.win_reward * float(np.mean(self.ally_hp > 0))
        self.done = victory or defeat or self.t >= c.T_max
        self.state_log.append(self._snapshot())
        info = {"actions": actions, "damage": damage, "kills": kills, "victory": victory}
        return self.observe(), float(reward), self.done, info


def available_actions(obs, config: EnvConfig):
    """Boolean (..., N, |A|) mask read off observations.

    Dead agents may only noop; alive agents may noop, move, or attack an alive enemy.
    """
    obs = np.asarray(obs)
    alive = obs[..., config.alive_index] > 0.5
    enemy_alive = obs[..., 3:].reshape(*obs.shape[:-1], config.n_enemies, 4)[..., 3] > 0.5
    mask = np.zeros((*obs.shape[:-1], config.num_actions), dtype=bool)
    mask[..., NOOP] = True
    mask[..., 1:FIRST_ATTACK] = alive[..., None]
    mask[..., FIRST_ATTACK:] = alive[..., None] & enemy_alive
    return mask


def scripted_action(obs, config: EnvConfig):
    """Focus fire: every alive agent attacks the alive enemy with the lowest HP."""
    alive = obs[:, config.alive_index] > 0.5
    acts = np.zeros(len(obs), dtype=np.int64)
    enemy = obs[:, 3:].reshape(len(obs), config.n_enemies, 4)
    for n in np.flatnonzero(alive):
        hp = np.where(enemy[n, :, 3] > 0.5, enemy[n, :, 2], np.inf)
        if np.isfinite(hp).any():
            acts[n] = FIRST_ATTACK + int(np.argmin(hp))
    return acts


POLICY_EPSILON = {"medium": 0.3, "poor": 0.9, "expert": 0.0}


def rollout(env: FocusFireEnv, act_fn, seed):
    """Play one episode; ``act_fn(obs, rng) -> joint action``."""
    rng = np.random.default_rng(seed)
    obs = env.reset(seed=rng.integers(2**63))
    obs_seq, act_seq, rew_seq = [], [], []
    done = False
    while not done:
        a = act_fn(obs, rng)
        nxt, r, done, info = env.step(a)
        obs_seq.append(obs)
        act_seq.append(info["actions"])
        rew_seq.append(r)
        obs = nxt
    return Episode(np.array(obs_seq), np.array(act_seq), np.array(rew_seq))


def behavior_policy(config: EnvConfig, epsilon):
    def act(obs, rng):
        a = scripted_action(obs, config)
        explore = rng.random(len(a)) < epsilon
        a[explore] = rng.integers(0, config.num_actions, size=int(explore.sum()))
        return a

    return act


def generate_offline_dataset(config: EnvConfig, policy="medium", num_episodes=100, seed=0, gamma=0.99):
    """Roll out an epsilon-perturbed focus-fire behavior policy; rtg is filled in."""
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    eps = POLICY_EPSILON[policy] if isinstance(policy, str) else float(policy)
    env = FocusFireEnv(config)
    act = behavior_policy(config, eps)
    seeds = np.random.SeedSequence(seed).spawn(num_episodes)
    return [compute_reward_to_go(rollout(env, act, s), gamma) for s in seeds]
