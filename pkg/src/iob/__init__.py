"""Information-ordered bottleneck autoencoders on a small numpy autodiff core.

Submodules
----------
nn
    Tensors, tape-based reverse-mode differentiation, layers and Adam.
bottleneck
    Prefix masks, per-width weight profiles and composite objectives.
datasets
    S-curve, n-Disk and linear-Gaussian generators; tensor and PGM files.
training
    Architecture presets, training loops, manifests and parameter files.
baselines
    PCA compression, TwoNN and broken-stick dimensionality estimates.
intrinsic
    Nested likelihood-ratio sweep for global intrinsic dimensionality.
analysis
    Compression tables, latent interpolation, heterogeneous reports.
cli
    The ``iob`` command.
"""

from . import analysis, baselines, bottleneck, datasets, intrinsic, nn, training
from .errors import DimensionError, DomainError, FormatError, IOBError, NumericalError, UsageError

__version__ = "0.1.0"

__all__ = [
    "nn",
    "bottleneck",
    "datasets",
    "training",
    "baselines",
    "intrinsic",
    "analysis",
    "IOBError",
    "DimensionError",
    "DomainError",
    "UsageError",
    "FormatError",
    "NumericalError",
]
