"""
Amortized inference: one shared history, all candidates, one encoder pass.

The m candidates of a request are appended after the (padded) history to
form a single ``(n_max + m) x d`` sequence. Keys and values come from the
history rows only, so no row ever attends to a candidate, and every
candidate output equals what regular append-cross inference produces for
that candidate alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderWeights, encoder_forward
from .errors import AmortizationUnsupported, DimensionError, ContractError
from .fusion import CandidateSet, EncodedOutput, FusionMode, HistorySequence, encode_regular, masked_row_mean
from .tensor import Tensor


@dataclass
class PackedRequest:
    tokens: Tensor  # [(n_max + m) x d]
    kv_range: range  # history rows
    mask: np.ndarray  # [(n_max + m) x n_max]
    positions: np.ndarray
    m: int
    n_max: int


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    max_rel_diff: float
    per_candidate_abs: np.ndarray
    per_candidate_rel: np.ndarray
    summary_max_abs_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_diff <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_abs_diff": self.max_abs_diff,
            "max_rel_diff": self.max_rel_diff,
            "summary_max_abs_diff": self.summary_max_abs_diff,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "per_candidate_rel": self.per_candidate_rel.tolist(),
        }


def _require_cross(mode) -> None:
    mode = FusionMode.parse(mode)
    if mode is not FusionMode.APPEND_CROSS:
        raise AmortizationUnsupported(
            f"amortized inference needs append-cross fusion; under {mode.value} history rows "
            "depend on the candidate, so candidates cannot share one sequence"
        )


def pack_amortized(history: HistorySequence, candidates: CandidateSet) -> PackedRequest:
    if history.d != candidates.d:
        raise DimensionError(f"candidate width {candidates.d} does not match history width {history.d}")
    n_max, m = history.n_max, candidates.m
    tokens = T.concat([history.embeddings, candidates.embeddings], axis=0)
    mask = np.broadcast_to(history.valid[None, :], (n_max + m, n_max))
    # every candidate shares the slot right after the history
    positions = np.concatenate([np.arange(n_max), np.full(m, n_max)])
    return PackedRequest(tokens, range(0, n_max), mask, positions, m, n_max)


def encode_amortized(
    history: HistorySequence,
    candidates: CandidateSet,
    weights: EncoderWeights,
    mode=FusionMode.APPEND_CROSS,
) -> EncodedOutput:
    _require_cross(mode)
    if candidates.m == 0:
        raise ContractError("no candidates")
    packed = pack_amortized(history, candidates)
    out, _ = encoder_forward(packed.tokens, packed.kv_range, packed.mask, weights, packed.positions)
    n_max, m = packed.n_max, packed.m
    cand_out = T.slice_axis(out, 0, n_max, n_max + m)
    hist_rows = T.reshape(T.slice_axis(out, 0, 0, n_max), (1, n_max, out.shape[1]))
    summary = masked_row_mean(hist_rows, history.valid[None, :])
    summary = T.broadcast_to(summary, (m, out.shape[1]))
    return EncodedOutput(cand_out, summary, FusionMode.APPEND_CROSS)


def relative_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def compare_outputs(regular: EncodedOutput, amortized: EncodedOutput, tolerance: float) -> EquivalenceReport:
    a, b = regular.candidates.data, amortized.candidates.data
    abs_diff = np.abs(a.astype(np.float64) - b)
    rel = relative_diff(a, b)
    m = a.shape[0]
    return EquivalenceReport(
        max_abs_diff=float(abs_diff.max(initial=0.0)),
        max_rel_diff=float(rel.max(initial=0.0)),
        per_candidate_abs=abs_diff.reshape(m, -1).max(axis=1, initial=0.0),
        per_candidate_rel=rel.reshape(m, -1).max(axis=1, initial=0.0),
        summary_max_abs_diff=float(
            np.abs(regular.history_summary.data.astype(np.float64) - amortized.history_summary.data).max(initial=0.0)
        ),
        tolerance=tolerance,
    )


def check_equivalence(
    history: HistorySequence,
    candidates: CandidateSet,
    weights: EncoderWeights,
    tolerance: float | None = None,
    mode=FusionMode.APPEND_CROSS,
) -> EquivalenceReport:
    """Run regular and amortized inference and compare candidate outputs elementwise.

    The default tolerance is 1e-5 in f32 mode and 1e-10 in f64 mode.
    """
    if tolerance is None:
        tolerance = 1e-10 if T.get_precision() == "f64" else 1e-5
    if tolerance <= 0:
        raise ContractError(f"tolerance must be positive, got {tolerance}")
    _require_cross(mode)
    regular, _ = encode_regular(history, candidates, mode, weights)
    amortized = encode_amortized(history, candidates, weights, mode)
    return compare_outputs(regular, amortized, tolerance)


def force_packed(history: HistorySequence, candidates: CandidateSet, weights: EncoderWeights) -> EncodedOutput:
    """Pack the request but let every row attend to every row (append-self semantics).

    This is the invalid shortcut amortization would take for append-self
    models; it exists to show that the shortcut changes the outputs.
    """
    n_max, m = history.n_max, candidates.m
    tokens = T.concat([history.embeddings, candidates.embeddings], axis=0)
    cols = np.concatenate([history.valid, np.ones(m, dtype=bool)])
    mask = np.broadcast_to(cols[None, :], (n_max + m, n_max + m))
    positions = np.concatenate([np.arange(n_max), np.full(m, n_max)])
    out, _ = encoder_forward(tokens, range(0, n_max + m), mask, weights, positions)
    cand_out = T.slice_axis(out, 0, n_max, n_max + m)
    return EncodedOutput(cand_out, Tensor(np.zeros((m, out.shape[1]))), FusionMode.APPEND_SELF)
