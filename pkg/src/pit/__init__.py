"""Pseudo-inverse tied token interfaces on a numpy autodiff engine."""
from .interface import PitHead, SharedTokenMemory, SpdTransform, TtHead, init_scratch, init_teacher, retract
from .model import ModelConfig, ToyTransformer, param_count, preset

__version__ = "0.1.0"

__all__ = [
    "PitHead", "SharedTokenMemory", "SpdTransform", "TtHead", "init_scratch", "init_teacher", "retract",
    "ModelConfig", "ToyTransformer", "param_count", "preset",
]
