"""Prototype-guided polyp segmentation on a small numpy autodiff engine."""

from .model import ABLATIONS, ForwardOutput, ModelConfig, PrototypeLab, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["ABLATIONS", "ForwardOutput", "ModelConfig", "PrototypeLab", "load_checkpoint", "save_checkpoint"]
