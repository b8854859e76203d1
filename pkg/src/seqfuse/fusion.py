"""Early-fusion input construction and regular (one sequence per candidate) inference."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import AttentionActivations, EncoderWeights, encoder_forward
from .errors import ContractError, DimensionError
from .tensor import Tensor


class FusionMode(str, enum.Enum):
    APPEND_SELF = "append-self"
    APPEND_CROSS = "append-cross"
    CONCAT = "concat"

    @classmethod
    def parse(cls, value) -> FusionMode:
        if isinstance(value, cls):
            return value
        aliases = {"append": cls.APPEND_CROSS, "self": cls.APPEND_SELF, "cross": cls.APPEND_CROSS}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ContractError(f"unknown fusion mode {value!r}") from None


def token_width(emb_dim: int, mode: FusionMode) -> int:
    return 2 * emb_dim if FusionMode.parse(mode) is FusionMode.CONCAT else emb_dim


@dataclass
class HistorySequence:
    """Up to ``n_max`` engaged-item embeddings; ``valid[i]`` marks real items.

    Padding rows may hold anything; they are masked out everywhere.
    """

    embeddings: Tensor  # [n_max x d]
    valid: np.ndarray  # [n_max] bool

    def __post_init__(self) -> None:
        self.embeddings = T.as_tensor(self.embeddings)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.embeddings.ndim != 2 or self.valid.shape != (self.embeddings.shape[0],):
            raise DimensionError(
                f"history embeddings {self.embeddings.shape} and valid mask {self.valid.shape} disagree"
            )

    @property
    def n_max(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass
class CandidateSet:
    embeddings: Tensor  # [m x d]

    def __post_init__(self) -> None:
        self.embeddings = T.as_tensor(self.embeddings)
        if self.embeddings.ndim != 2:
            raise DimensionError(f"candidates must be [m x d], got {self.embeddings.shape}")

    @property
    def m(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class FusedInput:
    tokens: Tensor  # [n_seq x d_tok] or [B x n_seq x d_tok]
    kv_range: range
    mask: np.ndarray  # [n_q x n_kv] or [B x n_q x n_kv]
    positions: np.ndarray  # [n_seq] positional slot per row


@dataclass
class EncodedOutput:
    """Per-candidate encoder outputs.

    ``history_summary`` has one row per candidate: the mean of the valid
    history-row outputs of that candidate's sequence (rows are identical
    under cross-attention; all zero under concat or empty histories).
    """

    candidates: Tensor  # [m x d_tok]
    history_summary: Tensor  # [m x d_tok]
    mode: FusionMode


def fuse(history: HistorySequence, candidate, mode) -> FusedInput:
    """Encoder input for a single (history, candidate) pair.

    Append modes keep padded history rows in place and put the candidate
    last at row ``n_max``; concat pairs the candidate with every history
    row. Hidden mask columns are padding positions.
    """
    cand = T.as_tensor(candidate)
    if cand.ndim == 1:
        cand = T.reshape(cand, (1, cand.shape[0]))
    fused = fuse_batch(history.embeddings, history.valid, cand, mode)
    return FusedInput(
        T.reshape(fused.tokens, fused.tokens.shape[1:]), fused.kv_range, fused.mask[0], fused.positions
    )


def fuse_batch(history_emb, valid, candidates, mode) -> FusedInput:
    """Batched :func:`fuse`: one sequence per candidate row.

    ``history_emb`` is either shared ``[n_max x d]`` (one request) or
    per-example ``[B x n_max x d]``; ``valid`` follows the same layout.
    """
    mode = FusionMode.parse(mode)
    hist = T.as_tensor(history_emb)
    cands = T.as_tensor(candidates)
    valid = np.asarray(valid, dtype=bool)
    if cands.ndim != 2:
        raise DimensionError(f"candidates must be [B x d], got {cands.shape}")
    if hist.shape[-1] != cands.shape[-1]:
        raise DimensionError(
            f"candidate width {cands.shape[-1]} does not match history width {hist.shape[-1]}"
        )
    b, d = cands.shape
    n_max = hist.shape[-2]
    if hist.ndim == 2:
        hist = T.broadcast_to(hist, (b, n_max, d))
        valid = np.broadcast_to(valid, (b, n_max))
    elif hist.shape[0] != b or valid.shape != (b, n_max):
        raise DimensionError(f"history batch {hist.shape} / {valid.shape} does not match {b} candidates")

    if mode is FusionMode.CONCAT:
        cand_rows = T.broadcast_to(T.reshape(cands, (b, 1, d)), (b, n_max, d))
        tokens = T.concat([hist, cand_rows], axis=-1)
        mask = valid[:, :, None] & valid[:, None, :]
        return FusedInput(tokens, range(0, n_max), mask, np.arange(n_max))

    tokens = T.concat([hist, T.reshape(cands, (b, 1, d))], axis=-2)
    positions = np.arange(n_max + 1)
    if mode is FusionMode.APPEND_CROSS:
        mask = np.broadcast_to(valid[:, None, :], (b, n_max + 1, n_max))
        return FusedInput(tokens, range(0, n_max), mask, positions)
    cols = np.concatenate([valid, np.ones((b, 1), dtype=bool)], axis=1)
    mask = np.broadcast_to(cols[:, None, :], (b, n_max + 1, n_max + 1))
    return FusedInput(tokens, range(0, n_max + 1), mask, positions)


def masked_row_mean(x: Tensor, valid: np.ndarray) -> Tensor:
    """Mean of the rows of ``x`` ([B x n x w]) flagged in ``valid`` ([B x n]); zero when none are."""
    valid = np.asarray(valid, dtype=bool)
    counts = np.maximum(valid.sum(axis=-1, keepdims=True), 1)
    weights = (valid / counts)[:, None, :]  # [B x 1 x n]
    pooled = Tensor(weights) @ x
    return T.reshape(pooled, (pooled.shape[0], pooled.shape[2]))


def encode_batch(
    history_emb,
    valid,
    candidates,
    mode,
    weights: EncoderWeights,
    record: bool = False,
) -> tuple[Tensor, Tensor, list[AttentionActivations]]:
    """Encode one sequence per candidate row and read out (candidate output, history summary)."""
    mode = FusionMode.parse(mode)
    fused = fuse_batch(history_emb, valid, candidates, mode)
    out, acts = encoder_forward(fused.tokens, fused.kv_range, fused.mask, weights, fused.positions, record)
    b, n_seq, width = out.shape
    n_max = np.shape(valid)[-1]
    valid_b = np.broadcast_to(np.asarray(valid, dtype=bool), (b, n_max))
    if mode is FusionMode.CONCAT:
        cand_out = masked_row_mean(out, valid_b)
        summary = Tensor(np.zeros((b, width)))
    else:
        cand_out = T.reshape(T.slice_axis(out, -2, n_max, n_seq), (b, width))
        summary = masked_row_mean(T.slice_axis(out, -2, 0, n_max), valid_b)
    return cand_out, summary, acts


def encode_regular(
    history: HistorySequence,
    candidates: CandidateSet,
    mode,
    weights: EncoderWeights,
    batch_size: int | None = None,
    record_candidate: int | None = None,
) -> tuple[EncodedOutput, list[AttentionActivations] | None]:
    """Regular inference: each candidate is fused with the history into its own sequence.

    Sequences are encoded in chunks of ``batch_size`` (all at once by
    default; ``batch_size=1`` is a literal per-candidate loop). Returns the
    attention activations of candidate ``record_candidate`` when requested.
    """
    mode = FusionMode.parse(mode)
    m = candidates.m
    if m == 0:
        raise ContractError("no candidates")
    if candidates.d != history.d:
        raise DimensionError(f"candidate width {candidates.d} does not match history width {history.d}")
    step = m if batch_size is None else batch_size
    if step < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")

    outs, sums = [], []
    for start in range(0, m, step):
        chunk = T.slice_axis(candidates.embeddings, 0, start, min(start + step, m))
        cand_out, summary, _ = encode_batch(history.embeddings, history.valid, chunk, mode, weights)
        outs.append(cand_out)
        sums.append(summary)
    result = EncodedOutput(T.concat(outs, axis=0), T.concat(sums, axis=0), mode)

    acts = None
    if record_candidate is not None:
        if not 0 <= record_candidate < m:
            raise ContractError(f"record_candidate {record_candidate} outside [0, {m})")
        fused = fuse(history, candidates.embeddings.data[record_candidate], mode)
        _, acts = encoder_forward(fused.tokens, fused.kv_range, fused.mask, weights, fused.positions, record=True)
    return result, acts
