"""Text-guided audio captioning with a Patchout spectrogram transformer."""

from captioner.errors import CaptionerError, CheckpointError, ConfigError, ContractError, DimensionError, InputError
from captioner.model import Captioner, ModelConfig
from captioner.vocab import Vocabulary

__all__ = [
    "Captioner",
    "CaptionerError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "InputError",
    "ModelConfig",
    "Vocabulary",
]
__version__ = "0.1.0"
