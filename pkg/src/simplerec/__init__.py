"""Inductive recommendation with relation-gated graph convolutions over a collaborative KG."""

from .ckg import CollabKG, SplitSpec, build_ckg, generate_synthetic, split_cold_start
from .model import ModelConfig, SimpleRec
from .trainer import fit

__all__ = [
    "CollabKG",
    "ModelConfig",
    "SimpleRec",
    "SplitSpec",
    "build_ckg",
    "fit",
    "generate_synthetic",
    "split_cold_start",
]
