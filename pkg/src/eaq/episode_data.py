"""Episode records, JSON-lines storage, reward-to-go and the (B, F, T) trajectory tensor.

Row order of the tensor, per episode::

    agent 0 obs (d_obs rows), agent 0 one-hot action (|A| rows),
    ...
    agent N-1 obs, agent N-1 one-hot action,
    reward, q_tot, done
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels


class EpisodeError(ValueError):
    """Invalid episode content (empty, missing reward-to-go, bad action id)."""


class LayoutError(ValueError):
    """Episode dimensions disagree with a ChannelLayout."""


class SchemaError(ValueError):
    """Episode file is well-formed JSON but violates the dataset schema."""


class EpisodeParseError(ValueError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class Episode:
    obs: np.ndarray  # (T, N, d_obs) float64
    actions: np.ndarray  # (T, N) int64
    rewards: np.ndarray  # (T,) float64
    rtg: Optional[np.ndarray] = None
    source: Optional[str] = None
    # q_tot channel as emitted by a generator, kept for diagnostics
    q_generated: Optional[np.ndarray] = None

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        if self.rtg is not None:
            self.rtg = np.asarray(self.rtg, dtype=np.float64).reshape(-1)
        if self.obs.ndim != 3 or self.actions.ndim != 2:
            raise EpisodeError(
                f"obs must be (T, N, d_obs) and actions (T, N); got {self.obs.shape}, {self.actions.shape}"
            )
        T = len(self.rewards)
        if T < 1:
            raise EpisodeError("episode has no steps")
        if self.obs.shape[0] != T or self.actions.shape[0] != T:
            raise EpisodeError("obs, actions and rewards must have the same length")
        if self.actions.shape[1] != self.obs.shape[1]:
            raise EpisodeError("obs and actions disagree on the number of agents")
        if self.rtg is not None and len(self.rtg) != T:
            raise EpisodeError("rtg length differs from episode length")

    @property
    def num_agents(self) -> int:
        return self.obs.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[2]

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def check_actions(self, num_actions):
        if self.actions.min() < 0 or self.actions.max() >= num_actions:
            raise SchemaError(f"action id outside [0, {num_actions})")


def compute_reward_to_go(episode: Episode, gamma: float = 0.99) -> Episode:
    """Return a copy of ``episode`` with ``rtg[t] = sum_{t'>=t} gamma^(t'-t) r[t']``."""
    if not 0.0 < gamma <= 1.0:
        raise EpisodeError(f"gamma must lie in (0, 1], got {gamma}")
    if episode.length == 0:
        raise EpisodeError("cannot compute reward-to-go of an empty episode")
    return replace(episode, rtg=kernels.discounted_cumsum(episode.rewards, gamma))


# --------------------------------------------------------------------------- layout


@dataclass(frozen=True)
class ChannelLayout:
    num_agents: int
    obs_dim: int
    num_actions: int
    T_max: int

    @property
    def agent_block(self) -> int:
        return self.obs_dim + self.num_actions

    @property
    def num_features(self) -> int:
        return self.num_agents * self.agent_block + 3

    @property
    def reward_row(self) -> int:
        return self.num_features - 3

    @property
    def q_row(self) -> int:
        return self.num_features - 2

    @property
    def done_row(self) -> int:
        return self.num_features - 1

    def obs_rows(self, agent):
        start = agent * self.agent_block
        return slice(start, start + self.obs_dim)

    def action_rows(self, agent):
        start = agent * self.agent_block + self.obs_dim
        return slice(start, start + self.num_actions)

    @property
    def row_map(self):
        """One ``(role, agent, index)`` tuple per feature row, in tensor order."""
        rows = []
        for n in range(self.num_agents):
            rows += [("obs", n, j) for j in range(self.obs_dim)]
            rows += [("action_onehot", n, a) for a in range(self.num_actions)]
        rows += [("reward", None, None), ("q_tot", None, None), ("done", None, None)]
        return rows

    def binary_mask(self):
        mask = np.zeros(self.num_features, dtype=bool)
        for n in range(self.num_agents):
            mask[self.action_rows(n)] = True
        mask[self.done_row] = True
        return mask

    def to_dict(self):
        return {
            "num_agents": self.num_agents,
            "obs_dim": self.obs_dim,
            "num_actions": self.num_actions,
            "T_max": self.T_max,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["num_agents"]), int(d["obs_dim"]), int(d["num_actions"]), int(d["T_max"]))


@dataclass(frozen=True)
class NormalizationStats:
    mins: np.ndarray
    maxs: np.ndarray
    binary: np.ndarray  # bool per row

    def normalize(self, raw):
        """Map raw values to [-1, 1] along the feature axis (second to last)."""
        lo, span = self._bcast(raw)
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, 2.0 * (raw - lo) / safe - 1.0, 0.0)

    def denormalize(self, x):
        lo, span = self._bcast(x)
        return np.where(span > 0, (x + 1.0) * 0.5 * span + lo, lo)

    def _bcast(self, x):
        shape = (-1, 1) if np.ndim(x) >= 2 else (-1,)
        lo = self.mins.reshape(shape)
        return lo, (self.maxs - self.mins).reshape(shape)

    def row_affine(self, row):
        """``(scale, offset)`` such that raw = scale * normalized + offset for one row."""
        span = self.maxs[row] - self.mins[row]
        if span <= 0:
            return 0.0, float(self.mins[row])
        return 0.5 * span, float(self.mins[row] + 0.5 * span)

    def to_dict(self):
        return {
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
            "binary": self.binary.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["mins"], dtype=np.float64),
            np.asarray(d["maxs"], dtype=np.float64),
            np.asarray(d["binary"], dtype=bool),
        )


@dataclass(frozen=True)
class TensorizedDataset:
    data: np.ndarray  # (B, F, T_max), normalized
    layout: ChannelLayout
    stats: NormalizationStats
    episode_lengths: np.ndarray = field(repr=False)

    def __len__(self):
        return self.data.shape[0]

    def raw(self):
        return self.stats.denormalize(self.data)


def layout_for(episodes, num_actions, T_max=None) -> ChannelLayout:
    if not episodes:
        raise EpisodeError("no episodes")
    first = episodes[0]
    if T_max is None:
        T_max = max(e.length for e in episodes)
    return ChannelLayout(first.num_agents, first.obs_dim, num_actions, T_max)


def raw_matrix(episode: Episode, layout: ChannelLayout) -> np.ndarray:
    """Un-normalized (F, T_max) matrix of one episode, zero-padded past its end."""
    if episode.num_agents != layout.num_agents or episode.obs_dim != layout.obs_dim:
        raise LayoutError(
            f"episode has N={episode.num_agents}, d_obs={episode.obs_dim}; "
            f"layout expects N={layout.num_agents}, d_obs={layout.obs_dim}"
        )
    if episode.length > layout.T_max:
        raise LayoutError(f"episode length {episode.length} exceeds T_max={layout.T_max}")
    if episode.rtg is None:
        raise EpisodeError("episode has no reward-to-go; call compute_reward_to_go first")
    try:
        episode.check_actions(layout.num_actions)
    except SchemaError as exc:
        raise LayoutError(str(exc)) from None
    T = episode.length
    m = np.zeros((layout.num_features, layout.T_max))
    steps = np.arange(T)
    for n in range(layout.num_agents):
        m[layout.obs_rows(n), :T] = episode.obs[:, n, :].T
        start = layout.action_rows(n).start
        m[start + episode.actions[:, n], steps] = 1.0
    m[layout.reward_row, :T] = episode.rewards
    m[layout.q_row, :T] = episode.rtg
    m[layout.done_row, T - 1] = 1.0
    return m


def tensorize(episodes, layout: ChannelLayout, stats: NormalizationStats | None = None) -> TensorizedDataset:
    """Stack episodes into the normalized (B, F, T_max) tensor.

    ``stats`` defaults to per-row min/max over this dataset (padding included);
    pass existing stats to encode new episodes on a fixed scale.
    """
    if not episodes:
        raise EpisodeError("cannot tensorize an empty episode list")
    raw = np.stack([raw_matrix(e, layout) for e in episodes])
    if stats is None:
        binary = layout.binary_mask()
        mins = np.where(binary, 0.0, raw.min(axis=(0, 2)))
        maxs = np.where(binary, 1.0, raw.max(axis=(0, 2)))
        stats = NormalizationStats(mins, maxs, binary)
    data = np.clip(stats.normalize(raw), -1.0, 1.0)
    lengths = np.array([e.length for e in episodes], dtype=np.int64)
    return TensorizedDataset(data, layout, stats, lengths)


def decode_matrix(x: np.ndarray, layout: ChannelLayout, stats: NormalizationStats, done_threshold=0.5) -> Episode:
    """Decode one normalized (F, T_max) matrix; the q_tot row becomes ``rtg``."""
    raw = stats.denormalize(np.asarray(x, dtype=np.float64))
    hits = np.flatnonzero(raw[layout.done_row] >= done_threshold)
    T = int(hits[0]) + 1 if len(hits) else layout.T_max
    obs = np.stack([raw[layout.obs_rows(n), :T].T for n in range(layout.num_agents)], axis=1)
    actions = np.stack(
        [raw[layout.action_rows(n), :T].argmax(axis=0) for n in range(layout.num_agents)], axis=1
    )
    return Episode(obs, actions, raw[layout.reward_row, :T].copy(), rtg=raw[layout.q_row, :T].copy())


def detensorize(ds: TensorizedDataset, index: int) -> Episode:
    if not 0 <= index < len(ds):
        raise IndexError(f"episode index {index} out of range for {len(ds)} episodes")
    return decode_matrix(ds.data[index], ds.layout, ds.stats)


# --------------------------------------------------------------------------- tensor cache

_CACHE_MAGIC = b"EAQTENS1"


def save_tensor_cache(ds: TensorizedDataset, path):
    """Binary cache: magic, 8-byte header length, JSON header, raw little-endian arrays."""
    header = json.dumps(
        {
            "layout": ds.layout.to_dict(),
            "stats": {
                "binary": ds.stats.binary.astype(int).tolist(),
            },
            "shape": list(ds.data.shape),
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for arr in (ds.stats.mins, ds.stats.maxs, ds.data):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.episode_lengths, dtype="<i8").tobytes())


def load_tensor_cache(path) -> TensorizedDataset:
    buf = Path(path).read_bytes()
    if buf[:8] != _CACHE_MAGIC:
        raise SchemaError(f"{path} is not a tensor cache")
    hlen = int.from_bytes(buf[8:16], "little")
    header = json.loads(buf[16:16 + hlen])
    layout = ChannelLayout.from_dict(header["layout"])
    B, F, T = header["shape"]
    stream = io.BytesIO(buf[16 + hlen:])

    def take(count, dtype):
        return np.frombuffer(stream.read(count * 8), dtype=dtype).copy()

    mins = take(F, "<f8")
    maxs = take(F, "<f8")
    data = take(B * F * T, "<f8").reshape(B, F, T)
    lengths = take(B, "<i8")
    stats = NormalizationStats(mins, maxs, np.asarray(header["stats"]["binary"], dtype=bool))
    return TensorizedDataset(data, layout, stats, lengths)


# --------------------------------------------------------------------------- JSON lines


@dataclass
class DatasetMeta:
    obs_dim: int
    num_actions: int
    T_max: int
    gamma: float = 0.99
    extra: dict = field(default_factory=dict)

    def to_record(self):
        rec = {"meta": True, "d_obs": self.obs_dim, "num_actions": self.num_actions,
               "T_max": self.T_max, "gamma": self.gamma}
        rec.update(self.extra)
        return rec


def _episode_record(e: Episode):
    rec = {
        "num_agents": e.num_agents,
        "obs": e.obs.tolist(),
        "actions": e.actions.tolist(),
        "rewards": e.rewards.tolist(),
    }
    if e.rtg is not None:
        rec["rtg"] = e.rtg.tolist()
    if e.source is not None:
        rec["source"] = e.source
    if e.q_generated is not None:
        rec["q_generated"] = np.asarray(e.q_generated).tolist()
    return rec


def save_episodes(episodes, path, meta: DatasetMeta | None = None):
    """Write the metadata line followed by one JSON object per episode."""
    episodes = list(episodes)
    if meta is None:
        if not episodes:
            raise EpisodeError("metadata is required to save an empty episode list")
        meta = DatasetMeta(
            episodes[0].obs_dim,
            int(max(e.actions.max() for e in episodes)) + 1,
            max(e.length for e in episodes),
        )
    with open(path, "w") as fh:
        fh.write(json.dumps(meta.to_record()) + "\n")
        for e in episodes:
            fh.write(json.dumps(_episode_record(e)) + "\n")


def read_episode_file(path):
    """Parse an episode file into ``(meta, episodes)``; ``meta`` is None for an empty file."""
    meta = None
    episodes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EpisodeParseError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise EpisodeParseError(lineno, "record is not a JSON object")
            if rec.get("meta"):
                if meta is not None or episodes:
                    raise EpisodeParseError(lineno, "metadata must be the first record")
                try:
                    extra = {k: v for k, v in rec.items()
                             if k not in ("meta", "d_obs", "num_actions", "T_max", "gamma")}
                    meta = DatasetMeta(int(rec["d_obs"]), int(rec["num_actions"]), int(rec["T_max"]),
                                       float(rec.get("gamma", 0.99)), extra)
                except (KeyError, TypeError, ValueError) as exc:
                    raise EpisodeParseError(lineno, f"bad metadata: {exc}") from None
                continue
            try:
                e = Episode(rec["obs"], rec["actions"], rec["rewards"], rtg=rec.get("rtg"),
                            source=rec.get("source"), q_generated=rec.get("q_generated"))
            except KeyError as exc:
                raise EpisodeParseError(lineno, f"missing key {exc}") from None
            except (EpisodeError, TypeError, ValueError) as exc:
                raise EpisodeParseError(lineno, str(exc)) from None
            if int(rec.get("num_agents", e.num_agents)) != e.num_agents:
                raise SchemaError(f"line {lineno}: num_agents disagrees with obs shape")
            if episodes and (e.num_agents, e.obs_dim) != (episodes[0].num_agents, episodes[0].obs_dim):
                raise SchemaError(
                    f"line {lineno}: N={e.num_agents}, d_obs={e.obs_dim} differs from "
                    f"N={episodes[0].num_agents}, d_obs={episodes[0].obs_dim}"
                )
            if meta is not None:
                if e.obs_dim != meta.obs_dim:
                    raise SchemaError(f"line {lineno}: d_obs={e.obs_dim}, metadata says {meta.obs_dim}")
                try:
                    e.check_actions(meta.num_actions)
                except SchemaError as exc:
                    raise SchemaError(f"line {lineno}: {exc}") from None
            episodes.append(e)
    return meta, episodes


def load_episodes(path):
    return read_episode_file(path)[1]


def downsample_dataset(episodes, fraction, seed):
    """Uniformly choose ``ceil(fraction * B)`` episodes without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    episodes = list(episodes)
    # round away float noise first so 0.03 * 100 gives 3, not 4
    k = math.ceil(round(fraction * len(episodes), 9))
    idx = np.random.default_rng(seed).choice(len(episodes), size=k, replace=False)
    return [episodes[i] for i in idx]
