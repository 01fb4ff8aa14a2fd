from .autodiff import DisconnectedParameterWarning, backward, grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoder import (
    CapeNet,
    EncoderConfig,
    NonFiniteActivationError,
    ProjectionHead,
    ResNetEncoder,
    embed_array,
    encoder_forward,
    projection_forward,
)
from .heads import HeadConfig, MLPAgeRegressor, MLPSexClassifier, train_head
from .optim import AdamState, CosineSchedule, NonFiniteGradientError, adam_step, cosine_lr

__all__ = [
    "AdamState", "CapeNet", "CheckpointError", "CosineSchedule", "DisconnectedParameterWarning",
    "EncoderConfig", "HeadConfig", "MLPAgeRegressor", "MLPSexClassifier", "NonFiniteActivationError",
    "NonFiniteGradientError", "ProjectionHead", "ResNetEncoder", "adam_step", "backward", "cosine_lr",
    "embed_array", "encoder_forward", "grad_check", "load_checkpoint", "projection_forward",
    "save_checkpoint", "train_head",
]
