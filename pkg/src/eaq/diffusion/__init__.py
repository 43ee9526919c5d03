from .schedule import NoiseSchedule, forward_noise, make_schedule
from .training import (
    DiffusionModel,
    DivergenceError,
    TrainConfig,
    guided_loss,
    guided_loss_terms,
    masked_q_means,
    q_channel_mean,
    train,
    write_log_csv,
)
from .unet import TemporalUnet

__all__ = [
    "DiffusionModel",
    "DivergenceError",
    "NoiseSchedule",
    "TemporalUnet",
    "TrainConfig",
    "forward_noise",
    "guided_loss",
    "guided_loss_terms",
    "make_schedule",
    "masked_q_means",
    "q_channel_mean",
    "train",
    "write_log_csv",
]
