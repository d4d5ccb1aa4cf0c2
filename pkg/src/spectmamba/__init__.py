"""Singing melody extraction with a bidirectional selective-state-space encoder.

The pipeline turns 8 kHz audio into a 3-channel CFP representation, encodes it
with stacked bidirectional selective-scan blocks, and decodes per-frame f0 and
note distributions. Unlabeled audio contributes through a consistency loss on
the top-k confidence split of weak and strong augmented views.
"""

from .cfp import AudioClip, CfpConfig, CfpFeature, FrameLabels, cfp_from_audio
from .encoder import EncoderConfig
from .errors import AudioIOError, ConfigError, NumericError, SpectMambaError, ValidationError
from .metrics import EvalReport, evaluate
from .model import SpectMamba
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "CfpConfig", "CfpFeature", "FrameLabels", "cfp_from_audio", "EncoderConfig",
    "AudioIOError", "ConfigError", "NumericError", "SpectMambaError", "ValidationError",
    "EvalReport", "evaluate", "SpectMamba", "TrainConfig", "train",
]
