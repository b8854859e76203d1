"""Transformer history encoders for pointwise ranking with amortized candidate inference."""

from .amortized import EquivalenceReport, PackedRequest, check_equivalence, encode_amortized, pack_amortized
from .costmodel import FlopReport, flops_exact, flops_leading
from .encoder import (
    AttentionActivations,
    EncoderConfig,
    EncoderWeights,
    encoder_forward,
    init_weights,
    match_params,
    multi_head_attention,
    param_count,
)
from .errors import AmortizationUnsupported, ContractError, DimensionError
from .fusion import CandidateSet, EncodedOutput, FusionMode, HistorySequence, encode_regular, fuse
from .tensor import GradTape, Tensor, precision

__version__ = "0.1.0"
