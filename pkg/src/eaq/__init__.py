"""Q-guided trajectory diffusion for augmenting offline multi-agent RL datasets."""

from .episode_data import (
    ChannelLayout,
    DatasetMeta,
    Episode,
    NormalizationStats,
    TensorizedDataset,
    compute_reward_to_go,
    detensorize,
    downsample_dataset,
    load_episodes,
    save_episodes,
    tensorize,
)
from .kernels import BACKEND

__version__ = "0.1.0"
