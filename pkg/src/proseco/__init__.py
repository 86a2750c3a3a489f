"""Desk-scale masked discrete diffusion with progressive self-correction.

A tiny trainable denoiser learns to jointly unmask corrupted sequences and
correct its own decoding mistakes; samplers interleave unmasking steps with
corrector loops. Everything is verifiable at small scale: brute-force
oracles, exact enumeration of sampler laws, and a sweep harness over the
quality/compute trade-off.
"""

from .core import NoiseSchedule, Rng, Vocabulary
from .denoiser import Denoiser, DenoiserConfig
from .objectives import TrainConfig, TrainState, train_step
from .samplers import SamplerConfig, proseco_sample, proseco_sample_block_ar

__all__ = [
    "NoiseSchedule",
    "Rng",
    "Vocabulary",
    "Denoiser",
    "DenoiserConfig",
    "TrainConfig",
    "TrainState",
    "train_step",
    "SamplerConfig",
    "proseco_sample",
    "proseco_sample_block_ar",
]

__version__ = "0.1.0"
