"""Two-stage audio-driven lip sync on a synthetic speaker world.

Stage 1 predicts mouth-motion parameters from audio with speaking style
aggregated from a reference clip via audio-aware cross-attention.  Stage 2
renders frames with a conditional half-latent diffusion model.  Everything
runs on a small numpy-backed reverse-mode autodiff engine and is
bit-reproducible from explicit seeds.
"""

from . import diffarray
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    GenerationError,
    NumericError,
)

__all__ = [
    "diffarray",
    "face3dmm",
    "synthworld",
    "lipmotion",
    "renderer",
    "evalkit",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "GenerationError",
    "NumericError",
]

__version__ = "0.1.0"
