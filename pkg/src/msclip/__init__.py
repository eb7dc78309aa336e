"""Multispectral CLIP at desk scale: data, model, contrastive training and zero-shot evaluation."""

from __future__ import annotations

from ._accel import backend
from .data import Band, MultispectralImage, SceneRecord, SynthConfig, generate_synthetic
from .loss import ContrastiveBatch, info_nce, info_nce_backward
from .model import FreezePolicy, InitMode, ModelConfig, ModelParameters, extend_patch_embed, init_model
from .trainer import TrainConfig, train

__all__ = [
    "Band", "ContrastiveBatch", "FreezePolicy", "InitMode", "ModelConfig", "ModelParameters",
    "MultispectralImage", "SceneRecord", "SynthConfig", "TrainConfig", "backend",
    "extend_patch_embed", "generate_synthetic", "info_nce", "info_nce_backward", "init_model", "train",
]
__version__ = "0.1.0"
