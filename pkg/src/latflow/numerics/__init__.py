from .autodiff import NonFiniteError, Parameter, Tape, Tensor, backward
from .nn import MLP, FiLMGenerator, Linear, Module, film
from .normalize import MinMaxNormalizer, denormalize_actions, normalize_actions
from .optim import EMA, AdamW, adamw_step, clip_grad_norm, ema_update
from .rng import Streams, stream

__all__ = [
    "NonFiniteError", "Parameter", "Tape", "Tensor", "backward",
    "MLP", "FiLMGenerator", "Linear", "Module", "film",
    "MinMaxNormalizer", "normalize_actions", "denormalize_actions",
    "EMA", "AdamW", "adamw_step", "clip_grad_norm", "ema_update",
    "Streams", "stream",
]
