"""Noise-level-aware volumetric denoising.

Quantifies per-patch relative Poisson noise (Otsu mask -> mean counts ->
COV), conditions a small residual 3D conv network on that noise level
through a learned scale-and-shift embedding, and ships the simulation,
training and evaluation machinery to measure the effect.
"""

from .kernels import BACKEND, HAVE_NUMBA
from .noise import BinningConfig, EmbedStats, NoiseBin, NoiseDescriptor, describe_patch
from .network import ModelConfig, init_params, infer_volume, orsnet_backward, orsnet_forward
from .phantom import CountSimConfig, PhantomSpec, make_paired_dataset
from .training import PatchStore, TrainConfig, train_loop
from .volume import Domain, Patch, Volume, extract_patches, load_volume, reassemble, save_volume

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "HAVE_NUMBA",
    "BinningConfig",
    "CountSimConfig",
    "Domain",
    "EmbedStats",
    "ModelConfig",
    "NoiseBin",
    "NoiseDescriptor",
    "Patch",
    "PatchStore",
    "PhantomSpec",
    "TrainConfig",
    "Volume",
    "describe_patch",
    "extract_patches",
    "infer_volume",
    "init_params",
    "load_volume",
    "make_paired_dataset",
    "orsnet_backward",
    "orsnet_forward",
    "reassemble",
    "save_volume",
    "train_loop",
]
