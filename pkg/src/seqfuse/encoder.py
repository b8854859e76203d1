"""Multi-head attention with separate query and key/value sources, and a post-LN encoder stack."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

WEIGHT_FORMAT_VERSION = 1
MASK_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture extents.

    ``token_dim`` is the width of one sequence position as seen by the
    encoder (twice the item embedding width under concat fusion).
    ``key_dim`` is the per-head width of the query, key and value projections.
    """

    token_dim: int
    key_dim: int
    ffwd_dim: int
    num_heads: int = 1
    num_layers: int = 2
    max_seq_len: int = 1024
    eps: float = 1e-5
    positional: bool = False

    def __post_init__(self) -> None:
        for name in ("token_dim", "key_dim", "ffwd_dim", "num_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ContractError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.eps <= 0:
            raise ContractError(f"eps must be positive, got {self.eps}")

    def replace(self, **changes) -> EncoderConfig:
        return EncoderConfig(**{**asdict(self), **changes})


@dataclass
class LayerWeights:
    wq: list[Tensor]  # per head [d_tok x k]
    bq: list[Tensor]  # per head [k]
    wk: list[Tensor]
    bk: list[Tensor]
    wv: list[Tensor]
    bv: list[Tensor]
    wo: Tensor  # [h*k x d_tok]
    bo: Tensor
    w1: Tensor  # [d_tok x f]
    b1: Tensor
    w2: Tensor  # [f x d_tok]
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    # name -> (is per-head list)
    ARRAYS = (
        ("wq", True), ("bq", True), ("wk", True), ("bk", True), ("wv", True), ("bv", True),
        ("wo", False), ("bo", False), ("w1", False), ("b1", False), ("w2", False), ("b2", False),
        ("ln1_gamma", False), ("ln1_beta", False), ("ln2_gamma", False), ("ln2_beta", False),
    )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, per_head in self.ARRAYS:
            value = getattr(self, name)
            if per_head:
                for h, t in enumerate(value):
                    yield f"{name}[{h}]", t
            else:
                yield name, value


@dataclass
class EncoderWeights:
    config: EncoderConfig
    layers: list[LayerWeights]
    positions: Tensor | None = None  # [max_seq_len x d_tok] when config.positional

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_parameters():
                yield f"layers.{i}.{name}", t
        if self.positions is not None:
            yield "positions", self.positions

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


@dataclass
class AttentionActivations:
    """Per-head scaled logits and probabilities of one attention call.

    Probability rows of queries with no visible key are all zero.
    """

    logits: list[np.ndarray] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_weights(config: EncoderConfig, seed: int | np.random.Generator = 0) -> EncoderWeights:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, k, f, h = config.token_dim, config.key_dim, config.ffwd_dim, config.num_heads

    def p(a) -> Tensor:
        return Tensor(a, requires_grad=True)

    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                wq=[p(glorot(rng, d, k, (d, k))) for _ in range(h)],
                bq=[p(np.zeros(k)) for _ in range(h)],
                wk=[p(glorot(rng, d, k, (d, k))) for _ in range(h)],
                bk=[p(np.zeros(k)) for _ in range(h)],
                wv=[p(glorot(rng, d, k, (d, k))) for _ in range(h)],
                bv=[p(np.zeros(k)) for _ in range(h)],
                wo=p(glorot(rng, h * k, d, (h * k, d))),
                bo=p(np.zeros(d)),
                w1=p(glorot(rng, d, f, (d, f))),
                b1=p(np.zeros(f)),
                w2=p(glorot(rng, f, d, (f, d))),
                b2=p(np.zeros(d)),
                ln1_gamma=p(np.ones(d)),
                ln1_beta=p(np.zeros(d)),
                ln2_gamma=p(np.ones(d)),
                ln2_beta=p(np.zeros(d)),
            )
        )
    positions = None
    if config.positional:
        positions = p(rng.normal(0.0, 0.02, size=(config.max_seq_len, d)))
    return EncoderWeights(config, layers, positions)


def zero_weights(config: EncoderConfig) -> EncoderWeights:
    """All matrices and biases zero, layer-norm gains one."""
    w = init_weights(config, 0)
    for name, t in w.named_parameters():
        t.data[...] = 1.0 if "gamma" in name else 0.0
    return w


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------


class _SequenceCounter:
    """Counts encoder invocations, one per encoded sequence."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.sequences = 0
        self.calls = 0

    def record(self, sequences: int) -> None:
        with self._lock:
            self.sequences += sequences
            self.calls += 1

    def reset(self) -> None:
        with self._lock:
            self.sequences = 0
            self.calls = 0


ENCODER_STATS = _SequenceCounter()


def multi_head_attention(
    q_src: Tensor,
    kv_src: Tensor,
    mask: np.ndarray,
    layer: LayerWeights,
    record: bool = False,
) -> tuple[Tensor, AttentionActivations | None]:
    """Attention of ``q_src`` rows over ``kv_src`` rows.

    ``mask[..., i, j]`` is true when key ``j`` is visible to query ``i``.
    Hidden keys get an additive bias of -1e9. A query that sees no key at
    all produces a zero output row (the output projection bias included).
    """
    mask = np.asarray(mask, dtype=bool)
    n_q, n_kv = q_src.shape[-2], kv_src.shape[-2]
    if mask.shape[-2:] != (n_q, n_kv):
        raise DimensionError(f"mask shape {mask.shape} does not match {n_q} queries x {n_kv} keys")
    dtype = T.get_dtype()
    bias = Tensor(np.where(mask, 0.0, MASK_BIAS).astype(dtype))
    visible = mask.any(axis=-1, keepdims=True)
    k = layer.wq[0].shape[1]
    inv_sqrt_k = 1.0 / math.sqrt(k)
    acts = AttentionActivations() if record else None

    heads = []
    for wq, bq, wk, bk, wv, bv in zip(layer.wq, layer.bq, layer.wk, layer.bk, layer.wv, layer.bv):
        q = q_src @ wq + bq
        key = kv_src @ wk + bk
        v = kv_src @ wv + bv
        logits = T.scale(q @ T.transpose(key), inv_sqrt_k)
        probs = T.softmax_rows(logits + bias)
        heads.append(probs @ v)
        if record:
            acts.logits.append(logits.data.copy())
            acts.probs.append(np.where(visible, probs.data, 0.0))
    out = T.concat(heads, axis=-1) @ layer.wo + layer.bo
    out = out * Tensor(visible.astype(dtype))
    return out, acts


def _kv_bounds(kv_range, n_seq: int) -> tuple[int, int]:
    if isinstance(kv_range, range):
        if kv_range.step != 1:
            raise ContractError("kv_range must be contiguous")
        lo, hi = kv_range.start, kv_range.stop
    else:
        lo, hi = kv_range
    if not 0 <= lo <= hi <= n_seq:
        raise ContractError(f"kv_range [{lo}, {hi}) outside sequence of length {n_seq}")
    return lo, hi


def encoder_forward(
    tokens: Tensor,
    kv_range,
    mask: np.ndarray,
    weights: EncoderWeights,
    positions: np.ndarray | None = None,
    record: bool = False,
) -> tuple[Tensor, list[AttentionActivations]]:
    """Run the encoder stack over one sequence ``[n_seq x d]`` or a batch ``[B x n_seq x d]``.

    At every layer the keys and values come from the current layer input
    restricted to ``kv_range`` (a ``range`` or ``(start, stop)`` pair of
    row indices), so ``kv_range`` covering all rows gives self-attention
    and a strict prefix gives cross-attention from every row onto that
    prefix. Each layer is ``x = LN(x + MHA(x)); x = LN(x + FFN(x))``.

    ``positions`` holds the positional-table slot of every row and is
    required when the config enables positional embeddings.
    """
    config = weights.config
    tokens = T.as_tensor(tokens)
    if tokens.ndim not in (2, 3) or tokens.shape[-1] != config.token_dim:
        raise DimensionError(
            f"tokens of shape {tokens.shape} do not match token_dim {config.token_dim}"
        )
    n_seq = tokens.shape[-2]
    lo, hi = _kv_bounds(kv_range, n_seq)
    ENCODER_STATS.record(tokens.shape[0] if tokens.ndim == 3 else 1)

    x = tokens
    if config.positional:
        if positions is None:
            raise ContractError("positional embeddings enabled but no positions given")
        x = x + T.gather_rows(weights.positions, positions)

    all_acts = []
    for layer in weights.layers:
        kv = x if (lo, hi) == (0, n_seq) else T.slice_axis(x, -2, lo, hi)
        attn, acts = multi_head_attention(x, kv, mask, layer, record)
        all_acts.append(acts)
        x = T.layer_norm(x + attn, layer.ln1_gamma, layer.ln1_beta, config.eps)
        hidden = T.relu(x @ layer.w1 + layer.b1)
        x = T.layer_norm(x + (hidden @ layer.w2 + layer.b2), layer.ln2_gamma, layer.ln2_beta, config.eps)
    return x, all_acts


# --------------------------------------------------------------------------
# Parameter accounting
# --------------------------------------------------------------------------


def param_count(config: EncoderConfig) -> int:
    """Number of scalars in the encoder weights for ``config``.

    Concat fusion doubles the token width; pass the config whose
    ``token_dim`` already reflects that.
    """
    d, k, f, h, l = config.token_dim, config.key_dim, config.ffwd_dim, config.num_heads, config.num_layers
    per_layer = 3 * h * (d * k + k) + (h * k * d + d) + (d * f + f) + (f * d + d) + 4 * d
    extra = config.max_seq_len * d if config.positional else 0
    return l * per_layer + extra


@dataclass
class MatchResult:
    config: EncoderConfig
    key_dim: int
    ffwd_dim: int
    reference_count: int
    target_count: int

    @property
    def relative_gap(self) -> float:
        return abs(self.target_count - self.reference_count) / self.reference_count


def default_grid(step: int = 4, max_dim: int = 512) -> list[tuple[int, int]]:
    dims = range(step, max_dim + 1, step)
    return [(k, f) for k in dims for f in dims]


def match_params(
    reference: EncoderConfig,
    target: EncoderConfig,
    grid: Iterable[tuple[int, int]] | None = None,
    prefer: str = "closest",
    tolerance: float = 0.01,
) -> MatchResult:
    """Pick ``(key_dim, ffwd_dim)`` for ``target`` so its parameter count tracks ``reference``.

    ``prefer="closest"`` minimises the absolute count gap, breaking ties by
    smaller key dim and then smaller ffwd dim. ``prefer="balanced"``
    restricts to pairs within ``tolerance`` relative gap and picks the one
    with the smallest ``|k - f|`` (then smallest gap, smaller k, smaller f);
    if no pair is within tolerance it falls back to ``closest``.
    """
    grid = list(default_grid() if grid is None else grid)
    if not grid:
        raise ContractError("match_params needs a nonempty (key_dim, ffwd_dim) grid")
    if prefer not in ("closest", "balanced"):
        raise ContractError(f"prefer must be 'closest' or 'balanced', got {prefer!r}")
    ref_count = param_count(reference)

    scored = []
    for k, f in grid:
        count = param_count(target.replace(key_dim=k, ffwd_dim=f))
        scored.append((abs(count - ref_count), k, f, count))

    choice = None
    if prefer == "balanced":
        within = [s for s in scored if s[0] <= tolerance * ref_count]
        if within:
            choice = min(within, key=lambda s: (abs(s[1] - s[2]), s[0], s[1], s[2]))
    if choice is None:
        choice = min(scored)
    _, k, f, count = choice
    return MatchResult(target.replace(key_dim=k, ffwd_dim=f), k, f, ref_count, count)


# --------------------------------------------------------------------------
# Weight files
# --------------------------------------------------------------------------


def weights_to_dict(weights: EncoderWeights) -> dict:
    layers = []
    for layer in weights.layers:
        entry = {}
        for name, per_head in LayerWeights.ARRAYS:
            value = getattr(layer, name)
            entry[name] = [t.data.tolist() for t in value] if per_head else value.data.tolist()
        layers.append(entry)
    return {
        "format_version": WEIGHT_FORMAT_VERSION,
        "config": asdict(weights.config),
        "layers": layers,
        "positions": None if weights.positions is None else weights.positions.data.tolist(),
    }


def weights_from_dict(doc: dict) -> EncoderWeights:
    version = doc.get("format_version")
    if version != WEIGHT_FORMAT_VERSION:
        raise ContractError(f"unsupported weight format_version {version!r}")
    known = {f.name for f in fields(EncoderConfig)}
    config = EncoderConfig(**{k: v for k, v in doc["config"].items() if k in known})
    expected = init_weights(config, 0)
    if len(doc["layers"]) != config.num_layers:
        raise ContractError(f"weight file has {len(doc['layers'])} layers, config says {config.num_layers}")

    def load(raw, like: Tensor, name: str) -> Tensor:
        t = Tensor(np.asarray(raw, dtype=np.float64), requires_grad=True)
        if t.shape != like.shape:
            raise DimensionError(f"{name}: expected shape {like.shape}, got {t.shape}")
        return t

    layers = []
    for i, (entry, blank) in enumerate(zip(doc["layers"], expected.layers)):
        kwargs = {}
        for name, per_head in LayerWeights.ARRAYS:
            like = getattr(blank, name)
            if per_head:
                if len(entry[name]) != config.num_heads:
                    raise DimensionError(f"layers.{i}.{name}: expected {config.num_heads} heads")
                kwargs[name] = [load(r, l, f"layers.{i}.{name}") for r, l in zip(entry[name], like)]
            else:
                kwargs[name] = load(entry[name], like, f"layers.{i}.{name}")
        layers.append(LayerWeights(**kwargs))
    positions = None
    if config.positional:
        positions = load(doc["positions"], expected.positions, "positions")
    return EncoderWeights(config, layers, positions)


def save_weights(weights: EncoderWeights, path: str | Path) -> None:
    Path(path).write_text(json.dumps(weights_to_dict(weights)))


def load_weights(path: str | Path) -> EncoderWeights:
    return weights_from_dict(json.loads(Path(path).read_text()))
