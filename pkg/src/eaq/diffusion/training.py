"""Q-total guided x0-prediction loss and the training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..episode_data import ChannelLayout, NormalizationStats, TensorizedDataset
from .schedule import NoiseSchedule, make_schedule
from .unet import TemporalUnet

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.1
    batch_size: int = 32
    lr: float = 2e-4
    epochs: int = 5000
    gamma: float = 0.99
    K: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    dim: int = 32
    dim_mults: tuple = (1, 2, 4)
    # "normalized" or "raw": space in which the q_tot episode means are compared
    q_space: str = "normalized"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.q_space not in ("normalized", "raw"):
            raise ValueError(f"q_space must be 'normalized' or 'raw', got {self.q_space!r}")
        self.dim_mults = tuple(self.dim_mults)

    def to_dict(self):
        d = asdict(self)
        d["dim_mults"] = list(self.dim_mults)
        return d


def q_channel_mean(traj, layout: ChannelLayout, length: int) -> float:
    """Mean of the q_tot row over the first ``length`` columns of one (F, T) array."""
    if not 1 <= length <= np.shape(traj)[-1]:
        raise ValueError(f"length {length} outside [1, {np.shape(traj)[-1]}]")
    return float(np.mean(np.asarray(traj)[layout.q_row, :length]))


def masked_q_means(x: torch.Tensor, q_row: int, lengths: torch.Tensor) -> torch.Tensor:
    """Per-sample mean of row ``q_row`` over each sample's valid columns."""
    T = x.shape[-1]
    mask = (torch.arange(T, device=x.device)[None, :] < lengths[:, None]).to(x.dtype)
    return (x[:, q_row, :] * mask).sum(-1) / lengths.to(x.dtype)


def guided_loss_terms(tau0, tau0_hat, lengths, q_row, lam, q_affine=(1.0, 0.0)):
    """Loss from clean targets and model predictions.

    ``q_affine`` = (scale, offset) maps the stored q row to the comparison
    space; identity compares in normalized space.

    Returns ``(loss, mse, hinge, q_max, q_gen)`` where ``mse`` and ``hinge`` are
    per-sample tensors.
    """
    scale, offset = q_affine
    mse = ((tau0 - tau0_hat) ** 2).flatten(1).mean(dim=1)
    with torch.no_grad():
        q_max = (scale * masked_q_means(tau0, q_row, lengths) + offset).max()
    q_gen = scale * masked_q_means(tau0_hat, q_row, lengths) + offset
    hinge = torch.clamp(q_max - q_gen, min=0.0)
    loss = (mse + lam * hinge).mean()
    return loss, mse, hinge, q_max, q_gen


def guided_loss(tau0, lengths, model, sched: NoiseSchedule, lam, generator=None, q_row=None,
                q_affine=(1.0, 0.0)):
    """One stochastic evaluation of the guided x0-prediction objective on a minibatch.

    Draws ``k ~ Uniform{1..K}`` and Gaussian noise per sample, denoises with
    ``model`` and returns ``(loss, diagnostics)``.
    """
    if tau0.shape[0] < 1:
        raise ValueError("empty minibatch")
    if q_row is None:
        q_row = tau0.shape[1] - 2
    B = tau0.shape[0]
    k = torch.randint(1, sched.K + 1, (B,), generator=generator)
    eps = torch.randn(tau0.shape, generator=generator, dtype=tau0.dtype)
    ab = torch.as_tensor(sched.alpha_bars, dtype=tau0.dtype)[k - 1][:, None, None]
    tau_k = ab.sqrt() * tau0 + (1.0 - ab).sqrt() * eps
    tau0_hat = model(tau_k, k)
    loss, mse, hinge, q_max, q_gen = guided_loss_terms(tau0, tau0_hat, lengths, q_row, lam, q_affine)
    diag = {
        "mse": float(mse.detach().mean()),
        "hinge": float(hinge.detach().mean()),
        "q_max_batch": float(q_max),
        "q_gen_mean": float(q_gen.detach().mean()),
    }
    return loss, diag


@dataclass
class DiffusionModel:
    """Trained denoiser bundled with everything needed to sample without the dataset."""

    net: TemporalUnet
    schedule: NoiseSchedule
    layout: ChannelLayout
    stats: NormalizationStats
    config: TrainConfig
    log: list = field(default_factory=list)

    def denoise(self, x, k):
        return self.net(x, k)

    def save(self, path):
        header = {
            "format": "eaq-diffusion-v1",
            "net": self.net.config,
            "config": self.config.to_dict(),
            "layout": self.layout.to_dict(),
            "stats": self.stats.to_dict(),
            "schedule": self.schedule.to_dict(),
        }
        buf = io.BytesIO()
        torch.save(self.net.state_dict(), buf)
        header = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path):
        raw = open(path, "rb").read()
        hlen = int.from_bytes(raw[:8], "little")
        header = json.loads(raw[8:8 + hlen])
        if header.get("format") != "eaq-diffusion-v1":
            raise ValueError(f"{path} is not a diffusion checkpoint")
        net = TemporalUnet(**header["net"])
        net.load_state_dict(torch.load(io.BytesIO(raw[8 + hlen:]), weights_only=True))
        net.eval()
        return cls(
            net,
            NoiseSchedule.from_dict(header["schedule"]),
            ChannelLayout.from_dict(header["layout"]),
            NormalizationStats.from_dict(header["stats"]),
            TrainConfig(**header["config"]),
        )


LOG_COLUMNS = ("epoch", "mse", "hinge", "q_max_batch", "q_gen_mean")


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in LOG_COLUMNS})


def train(dataset: TensorizedDataset, config: TrainConfig, progress=None) -> DiffusionModel:
    """Minimize the guided loss with Adam; one epoch is one shuffled pass over the episodes."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    sched = make_schedule(config.K, config.beta_start, config.beta_end)
    layout = dataset.layout
    net = TemporalUnet(layout.num_features, dim=config.dim, dim_mults=config.dim_mults)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)

    data = torch.as_tensor(dataset.data, dtype=torch.float32)
    lengths = torch.as_tensor(dataset.episode_lengths, dtype=torch.int64)
    q_affine = (1.0, 0.0)
    if config.q_space == "raw":
        q_affine = dataset.stats.row_affine(layout.q_row)

    B = len(dataset)
    rows = []
    net.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(B, generator=gen)
        acc = {"mse": [], "hinge": [], "q_max_batch": [], "q_gen_mean": []}
        for start in range(0, B, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, diag = guided_loss(data[idx], lengths[idx], net, sched, config.lam, gen,
                                     layout.q_row, q_affine)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}: mse={diag['mse']}, hinge={diag['hinge']}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            for key in acc:
                acc[key].append(diag[key])
        row = {"epoch": epoch, **{key: float(np.mean(v)) for key, v in acc.items()}}
        rows.append(row)
        if progress is not None:
            progress(row)
        if epoch % 100 == 0:
            log.debug("epoch %d mse %.5f hinge %.5f", epoch, row["mse"], row["hinge"])
    net.eval()
    return DiffusionModel(net, sched, layout, dataset.stats, config, rows)
