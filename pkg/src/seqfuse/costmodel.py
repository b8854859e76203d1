"""
FLOP accounting for regular vs amortized inference.

Two views are kept side by side. The leading-term view is the asymptotic
polynomial in (layers, history length, candidates, width):

    regular   = l*m*n*d^2 + l*m*n^2*d
    amortized = l*(n+m)*d^2 + l*(n+m)^2*d

The exact view walks the shapes the encoder actually executes, including
key/ffwd widths, heads, biases, masking, layer norms and residuals, with
the per-primitive constants from :mod:`seqfuse.tensor`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .encoder import EncoderConfig
from .errors import AmortizationUnsupported
from .fusion import FusionMode
from .tensor import LAYERNORM_FLOPS_PER_ELEMENT, SOFTMAX_FLOPS_PER_ELEMENT


@dataclass
class FlopReport:
    mode: str  # "regular" | "amortized"
    leading_projection_term: int
    leading_attention_term: int
    leading_total: int
    exact_total: int | None
    inputs: dict
    exact_breakdown: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _leading(l: int, n: int, m: int, d: int) -> tuple[tuple[int, int], tuple[int, int]]:
    regular = (l * m * n * d * d, l * m * n * n * d)
    amortized = (l * (n + m) * d * d, l * (n + m) ** 2 * d)
    return regular, amortized


def flops_leading(l: int, n: int, m: int, d: int) -> tuple[FlopReport, FlopReport, Fraction]:
    """Leading-term counts for both inference modes and their exact ratio regular/amortized."""
    (rp, ra), (ap, aa) = _leading(l, n, m, d)
    inputs = {"l": l, "n": n, "m": m, "d": d}
    regular = FlopReport("regular", rp, ra, rp + ra, None, inputs)
    amortized = FlopReport("amortized", ap, aa, ap + aa, None, inputs)
    ratio = Fraction(regular.leading_total, amortized.leading_total) if amortized.leading_total else Fraction(0)
    return regular, amortized, ratio


def _sequence_flops(config: EncoderConfig, n_q: int, n_kv: int) -> dict[str, int]:
    """FLOPs of one encoder pass over a sequence with ``n_q`` query rows and ``n_kv`` key rows."""
    d, k, f, h = config.token_dim, config.key_dim, config.ffwd_dim, config.num_heads
    per_head_proj = (2 * n_q * d * k + n_q * k) + 2 * (2 * n_kv * d * k + n_kv * k)
    per_head_attn = (
        2 * n_q * k * n_kv  # scores
        + n_q * n_kv  # 1/sqrt(k) scaling
        + n_q * n_kv  # mask bias
        + (SOFTMAX_FLOPS_PER_ELEMENT * n_q * n_kv)
        + 2 * n_q * n_kv * k  # probs @ values
    )
    out_proj = 2 * n_q * h * k * d + n_q * d + n_q * d  # W_o, bias, fully-masked-row zeroing
    ffwd = 2 * n_q * d * f + n_q * f + n_q * f + 2 * n_q * f * d + n_q * d
    residual = 2 * n_q * d
    norm = 2 * LAYERNORM_FLOPS_PER_ELEMENT * n_q * d
    l = config.num_layers
    breakdown = {
        "projection": l * (h * per_head_proj + out_proj),
        "attention": l * h * per_head_attn,
        "ffwd": l * ffwd,
        "residual": l * residual,
        "layer_norm": l * norm,
        "positional": n_q * d if config.positional else 0,
    }
    return breakdown


def flops_exact(config: EncoderConfig, n: int, m: int, fusion_mode, inference_mode: str) -> FlopReport:
    """Exact encoder FLOPs for one request with a history of ``n`` slots and ``m`` candidates.

    ``config.token_dim`` must already be the fused token width. The
    leading-term fields are filled in with ``d = config.token_dim``.
    """
    mode = FusionMode.parse(fusion_mode)
    if inference_mode not in ("regular", "amortized"):
        raise ValueError(f"inference_mode must be 'regular' or 'amortized', got {inference_mode!r}")
    if inference_mode == "amortized":
        if mode is not FusionMode.APPEND_CROSS:
            raise AmortizationUnsupported(f"amortized inference is undefined for {mode.value}")
        per_seq, sequences = _sequence_flops(config, n + m, n), 1
    elif mode is FusionMode.APPEND_CROSS:
        per_seq, sequences = _sequence_flops(config, n + 1, n), m
    elif mode is FusionMode.APPEND_SELF:
        per_seq, sequences = _sequence_flops(config, n + 1, n + 1), m
    else:
        per_seq, sequences = _sequence_flops(config, n, n), m

    breakdown = {key: sequences * value for key, value in per_seq.items()}
    (rp, ra), (ap, aa) = _leading(config.num_layers, n, m, config.token_dim)
    proj, attn = (rp, ra) if inference_mode == "regular" else (ap, aa)
    inputs = {
        "l": config.num_layers, "n": n, "m": m, "d": config.token_dim,
        "k": config.key_dim, "f": config.ffwd_dim, "h": config.num_heads,
        "fusion_mode": mode.value,
    }
    return FlopReport(inference_mode, proj, attn, proj + attn, sum(breakdown.values()), inputs, breakdown)
