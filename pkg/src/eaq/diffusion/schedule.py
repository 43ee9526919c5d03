from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule. Step ``k`` is 1-based; arrays are indexed ``k - 1``."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def K(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    @property
    def alpha_bars_prev(self):
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self):
        """Variance of q(x_{k-1} | x_k, x_0) per step; 0 at k=1."""
        return self.betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)

    @property
    def posterior_mean_coefs(self):
        """``(c0, ck)`` with posterior mean = c0 * x0 + ck * x_k."""
        ab, abp = self.alpha_bars, self.alpha_bars_prev
        c0 = self.betas * np.sqrt(abp) / (1.0 - ab)
        ck = (1.0 - abp) * np.sqrt(self.alphas) / (1.0 - ab)
        return c0, ck

    def check_step(self, k):
        if not 1 <= int(k) <= self.K:
            raise ValueError(f"diffusion step {k} outside [1, {self.K}]")

    def to_dict(self):
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["betas"]))


def make_schedule(K=1000, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, K))


def forward_noise(tau0, k, eps, sched: NoiseSchedule):
    """Closed-form q(tau_k | tau_0) sample for a single step ``k``.

    Works on numpy arrays or torch tensors of matching shape.
    """
    if tuple(np.shape(tau0)) != tuple(np.shape(eps)):
        raise ValueError(f"shape mismatch: tau0 {np.shape(tau0)} vs eps {np.shape(eps)}")
    sched.check_step(k)
    ab = float(sched.alpha_bars[int(k) - 1])
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps
