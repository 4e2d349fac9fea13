"""Transformer sequence-to-sequence voice conversion with text-to-speech
pretraining, on a small numpy autodiff engine."""

from .inference import DecodeOptions, convert, synthesize_tts
from .model import Checkpoint, ModelConfig, VTN

__version__ = "0.1.0"

__all__ = ["Checkpoint", "DecodeOptions", "ModelConfig", "VTN", "convert", "synthesize_tts", "__version__"]
