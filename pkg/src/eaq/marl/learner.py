"""Offline QMIX with CQL or discrete-BCQ regularization."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class LearnerConfig:
    regularizer: str = "cql"  # "cql", "bcq" or "none"
    cql_weight: float = 10.0
    bcq_threshold: float = 0.3
    gamma: float = 0.99
    lr: float = 5e-4
    batch_size: int = 64
    target_period: int = 200
    hidden: int = 64
    mixer_embed: int = 32
    grad_clip: float = 10.0
    double_q: bool = True

    def __post_init__(self):
        if self.regularizer not in ("cql", "bcq", "none"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if not 0.0 <= self.bcq_threshold <= 1.0:
            raise ValueError("bcq_threshold must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def cql_penalty(q_values, data_action, avail=None):
    """logsumexp(q) - q[data_action].

    Tensors (any leading batch shape) give a tensor; plain sequences give a float.
    ``avail`` restricts the logsumexp to available actions (the data action is
    always kept).
    """
    if not torch.is_tensor(q_values):
        q = torch.as_tensor(np.asarray(q_values, dtype=np.float64))
        return float(cql_penalty(q.unsqueeze(0), torch.tensor([int(data_action)]),
                                 None if avail is None else torch.as_tensor(avail).unsqueeze(0))[0])
    a = torch.as_tensor(data_action).unsqueeze(-1)
    q_data = q_values.gather(-1, a).squeeze(-1)
    if avail is not None:
        keep = avail.clone().scatter_(-1, a, True)
        q_values = q_values.masked_fill(~keep, -torch.inf)
    return torch.logsumexp(q_values, dim=-1) - q_data


def bcq_admissible(behavior_probs, threshold):
    """Boolean mask of actions whose probability is at least ``threshold`` times the best one."""
    p = np.asarray(behavior_probs, dtype=np.float64)
    top = p.max(axis=-1, keepdims=True)
    if np.any(top <= 0):
        raise ValueError("behavior probabilities are all zero")
    return p / top >= threshold


class AgentNet(nn.Module):
    """Shared per-agent network; input is the observation plus a one-hot agent id."""

    def __init__(self, obs_dim, n_agents, n_actions, hidden):
        super().__init__()
        self.n_agents = n_agents
        self.net = nn.Sequential(
            nn.Linear(obs_dim + n_agents, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, n_actions),
        )

    def forward(self, obs):
        # obs: (..., N, d_obs)
        ids = torch.eye(self.n_agents, dtype=obs.dtype).expand(*obs.shape[:-1], self.n_agents)
        return self.net(torch.cat([obs, ids], dim=-1))


class QMixer(nn.Module):
    """Monotonic mixer; weights on agent utilities are absolute values of hypernetwork outputs."""

    def __init__(self, n_agents, state_dim, embed):
        super().__init__()
        self.n_agents = n_agents
        self.embed = embed
        self.hyper_w1 = nn.Linear(state_dim, n_agents * embed)
        self.hyper_b1 = nn.Linear(state_dim, embed)
        self.hyper_w2 = nn.Linear(state_dim, embed)
        self.v = nn.Sequential(nn.Linear(state_dim, embed), nn.ReLU(), nn.Linear(embed, 1))

    def forward(self, agent_qs, state):
        # agent_qs: (B, N); state: (B, state_dim)
        w1 = self.hyper_w1(state).abs().view(-1, self.n_agents, self.embed)
        b1 = self.hyper_b1(state).view(-1, 1, self.embed)
        hidden = F.elu(torch.bmm(agent_qs.unsqueeze(1), w1) + b1)
        w2 = self.hyper_w2(state).abs().view(-1, self.embed, 1)
        return (torch.bmm(hidden, w2).view(-1) + self.v(state).view(-1))


def episodes_to_transitions(episodes):
    """Flatten episodes into arrays (obs, actions, rewards, next_obs, done).

    The final step of every episode is terminal.
    """
    obs, act, rew, nxt, done = [], [], [], [], []
    for e in episodes:
        T = e.length
        obs.append(e.obs)
        act.append(e.actions)
        rew.append(e.rewards)
        nxt.append(np.concatenate([e.obs[1:], np.zeros_like(e.obs[:1])]))
        d = np.zeros(T)
        d[-1] = 1.0
        done.append(d)
    cat = np.concatenate
    return {
        "obs": torch.as_tensor(cat(obs), dtype=torch.float32),
        "actions": torch.as_tensor(cat(act), dtype=torch.int64),
        "rewards": torch.as_tensor(cat(rew), dtype=torch.float32),
        "next_obs": torch.as_tensor(cat(nxt), dtype=torch.float32),
        "done": torch.as_tensor(cat(done), dtype=torch.float32),
    }


class GreedyPolicy:
    """Decentralized greedy policy: each agent acts on its own observation only.

    ``avail_fn(obs) -> bool mask`` restricts choices to available actions.
    """

    def __init__(self, agent_net, n_actions, behavior_net=None, threshold=0.0, avail_fn=None):
        self.agent_net = agent_net
        self.behavior_net = behavior_net
        self.threshold = threshold
        self.n_actions = n_actions
        self.avail_fn = avail_fn

    def q_values(self, obs):
        with torch.no_grad():
            return self.agent_net(torch.as_tensor(obs, dtype=torch.float32))

    def act(self, obs, rng=None):
        with torch.no_grad():
            o = torch.as_tensor(np.asarray(obs), dtype=torch.float32)
            q = self.agent_net(o)
            avail = None
            if self.avail_fn is not None:
                avail = torch.as_tensor(self.avail_fn(np.asarray(obs)))
            return masked_argmax(q, self._bcq_mask(o), avail).numpy()

    def _bcq_mask(self, o):
        if self.behavior_net is None or self.threshold <= 0:
            return None
        return relative_prob_mask(self.behavior_net(o), self.threshold)

    __call__ = act

    def save(self, path, extra=None):
        header = json.dumps({
            "format": "eaq-policy-v1",
            "n_actions": self.n_actions,
            "threshold": self.threshold,
            "agent_net": self._net_shape(self.agent_net),
            "has_behavior": self.behavior_net is not None,
            "extra": extra or {},
        }, sort_keys=True).encode()
        state = {"agent": self.agent_net.state_dict()}
        if self.behavior_net is not None:
            state["behavior"] = self.behavior_net.state_dict()
        buf = io.BytesIO()
        torch.save(state, buf)
        with open(path, "wb") as fh:
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            fh.write(buf.getvalue())

    @staticmethod
    def _net_shape(net):
        first = net.net[0]
        return {"in": first.in_features, "n_agents": net.n_agents, "hidden": first.out_features,
                "n_actions": net.net[-1].out_features}

    @classmethod
    def load(cls, path, avail_fn=None):
        raw = open(path, "rb").read()
        hlen = int.from_bytes(raw[:8], "little")
        header = json.loads(raw[8:8 + hlen])
        if header.get("format") != "eaq-policy-v1":
            raise ValueError(f"{path} is not a policy checkpoint")
        state = torch.load(io.BytesIO(raw[8 + hlen:]), weights_only=True)
        s = header["agent_net"]
        make = lambda: AgentNet(s["in"] - s["n_agents"], s["n_agents"], s["n_actions"], s["hidden"])  # noqa: E731
        agent = make()
        agent.load_state_dict(state["agent"])
        behavior = None
        if header["has_behavior"]:
            behavior = make()
            behavior.load_state_dict(state["behavior"])
        return cls(agent, header["n_actions"], behavior, header["threshold"], avail_fn)


@dataclass
class TrainResult:
    policy: GreedyPolicy
    mixer: QMixer
    losses: list


def relative_prob_mask(logits, threshold):
    probs = torch.softmax(logits, dim=-1)
    return probs / probs.max(dim=-1, keepdim=True).values >= threshold


def masked_argmax(q, *masks):
    """Argmax over actions allowed by every non-None mask.

    Falls back to the unmasked argmax for rows where the masks leave nothing.
    """
    allowed = torch.ones_like(q, dtype=torch.bool)
    for m in masks:
        if m is not None:
            allowed &= m
    empty = ~allowed.any(dim=-1, keepdim=True)
    allowed |= empty
    return q.masked_fill(~allowed, -torch.inf).argmax(dim=-1)


def train_offline(config: LearnerConfig, dataset, iterations=3000, seed=0, num_actions=None,
                  avail_fn=None) -> TrainResult:
    """Fit QMIX on a fixed episode list with the configured offline regularizer.

    ``avail_fn(obs) -> bool mask (..., N, |A|)`` restricts the bootstrap max and
    the returned policy to available actions.
    """
    if not dataset:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    tr = episodes_to_transitions(dataset)
    n_trans, N, d = tr["obs"].shape
    if num_actions is None:
        num_actions = int(tr["actions"].max()) + 1
    A = num_actions
    avail_now = avail_next = None
    if avail_fn is not None:
        avail_now = torch.as_tensor(avail_fn(tr["obs"].numpy()))
        avail_next = torch.as_tensor(avail_fn(tr["next_obs"].numpy()))

    agent = AgentNet(d, N, A, config.hidden)
    mixer = QMixer(N, N * d, config.mixer_embed)
    target_agent = AgentNet(d, N, A, config.hidden)
    target_mixer = QMixer(N, N * d, config.mixer_embed)
    target_agent.load_state_dict(agent.state_dict())
    target_mixer.load_state_dict(mixer.state_dict())
    params = list(agent.parameters()) + list(mixer.parameters())
    behavior = None
    if config.regularizer == "bcq":
        behavior = AgentNet(d, N, A, config.hidden)
        params += list(behavior.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)

    losses = []
    for it in range(iterations):
        idx = torch.randint(0, n_trans, (min(config.batch_size, n_trans),), generator=gen)
        obs, act = tr["obs"][idx], tr["actions"][idx]
        rew, nxt, done = tr["rewards"][idx], tr["next_obs"][idx], tr["done"][idx]
        B = len(idx)

        q_all = agent(obs)  # (B, N, A)
        q_taken = q_all.gather(-1, act.unsqueeze(-1)).squeeze(-1)
        q_tot = mixer(q_taken, obs.reshape(B, -1))

        with torch.no_grad():
            bcq_mask = None
            if behavior is not None and config.bcq_threshold > 0:
                bcq_mask = relative_prob_mask(behavior(nxt), config.bcq_threshold)
            avail = avail_next[idx] if avail_next is not None else None
            # double Q: online net picks the admissible argmax, target net scores it
            chooser = agent(nxt) if config.double_q else target_agent(nxt)
            a_next = masked_argmax(chooser, bcq_mask, avail).unsqueeze(-1)
            q_next = target_agent(nxt).gather(-1, a_next).squeeze(-1)
            target = rew + config.gamma * (1.0 - done) * target_mixer(q_next, nxt.reshape(B, -1))

        td = F.mse_loss(q_tot, target)
        loss = td
        if config.regularizer == "cql" and config.cql_weight > 0:
            avail = avail_now[idx] if avail_now is not None else None
            loss = loss + config.cql_weight * cql_penalty(q_all, act, avail).mean()
        if behavior is not None:
            loss = loss + F.cross_entropy(behavior(obs).reshape(-1, A), act.reshape(-1))

        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it} (td={float(td)})")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        losses.append(float(loss.detach()))
        if (it + 1) % config.target_period == 0:
            target_agent.load_state_dict(agent.state_dict())
            target_mixer.load_state_dict(mixer.state_dict())

    threshold = config.bcq_threshold if config.regularizer == "bcq" else 0.0
    policy = GreedyPolicy(agent, A, behavior, threshold, avail_fn)
    return TrainResult(policy, mixer, losses)
