"""Numerical feature probing for matrix-multiply-accumulate hardware.

Generates format-parameterized test vectors that reveal the numeric
behaviour of block-FMA units (block width, alignment and carry headroom,
normalisation timing, rounding modes, combine ordering), classifies the
outputs into a feature report, and ships a bit-exact configurable
simulator that serves as both verification target and reference model.
"""

from .formats import (
    Dyadic,
    FpFormat,
    REGISTRY,
    RoundingMode,
    Special,
    decode,
    encode,
    lookup_format,
    pow2,
    sum_of_pow2,
)
from .simulator import (
    AlignmentPolicy,
    BlockFmaConfig,
    CarryOverflow,
    NormPolicy,
    Ordering,
    block_fma,
    exact_oracle,
    exact_products,
    mma_dot,
)
from .backend import ExecBackend, SimBackend, open_backend
from .inference import FeatureReport, InferOptions, infer_features, render_report

__version__ = "0.1.0"

__all__ = [
    "Dyadic", "FpFormat", "REGISTRY", "RoundingMode", "Special",
    "decode", "encode", "lookup_format", "pow2", "sum_of_pow2",
    "AlignmentPolicy", "BlockFmaConfig", "CarryOverflow", "NormPolicy",
    "Ordering", "block_fma", "exact_oracle", "exact_products", "mma_dot",
    "ExecBackend", "SimBackend", "open_backend",
    "FeatureReport", "InferOptions", "infer_features", "render_report",
    "__version__",
]
