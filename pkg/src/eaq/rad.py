"""Random amplitude scaling of observations (RAD-s / RAD-m)."""

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class RadConfig:
    alpha: float = 0.8
    beta: float = 1.2
    mode: str = "single"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= self.beta:
            raise ValueError(f"need 0 < alpha <= beta, got alpha={self.alpha}, beta={self.beta}")
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be 'single' or 'multi', got {self.mode!r}")

    @property
    def source_tag(self):
        return "rad_s" if self.mode == "single" else "rad_m"


def rad_augment(episodes, config: RadConfig):
    """Scale every observation by z ~ U[alpha, beta].

    ``single`` draws one z per (timestep, agent) shared by all observation
    dimensions; ``multi`` draws one per dimension. Everything else is copied
    unchanged. Episode ``i`` uses its own stream derived from ``config.seed``.
    """
    streams = np.random.SeedSequence(config.seed).spawn(len(episodes))
    out = []
    for e, ss in zip(episodes, streams):
        rng = np.random.default_rng(ss)
        T, N, d = e.obs.shape
        shape = (T, N, 1) if config.mode == "single" else (T, N, d)
        z = rng.uniform(config.alpha, config.beta, size=shape)
        out.append(replace(e, obs=e.obs * z, source=config.source_tag))
    return out


def rad_dataset(episodes, config: RadConfig, scale: int):
    """Originals (tagged ``real``) followed by ``scale`` perturbed copies of each episode."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    real = [replace(e, source="real") for e in episodes]
    synthetic = []
    for copy_idx in range(scale):
        cfg = replace(config, seed=int(np.random.SeedSequence([config.seed, copy_idx]).generate_state(1)[0]))
        synthetic += rad_augment(episodes, cfg)
    return real + synthetic
