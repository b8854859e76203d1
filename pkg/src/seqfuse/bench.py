"""Wall-clock benchmarking of regular vs amortized inference, and attention dumps."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .amortized import encode_amortized
from .encoder import EncoderConfig, EncoderWeights, encoder_forward, init_weights
from .errors import AmortizationUnsupported, ContractError
from .fusion import CandidateSet, FusionMode, HistorySequence, encode_regular, fuse

DEFAULT_N_SWEEP = (16, 32, 64, 128, 256)


@dataclass
class BenchRecord:
    inference: str
    l: int
    n: int
    m: int
    d_tok: int
    k: int
    f: int
    h: int
    precision: str
    passes: int
    warmup: int
    total_seconds: float
    seconds_per_pass: float
    threads: int


BENCH_COLUMNS = [f.name for f in fields(BenchRecord)]


def make_request(emb_dim: int, n: int, m: int, seed: int, n_valid: int | None = None) -> tuple[HistorySequence, CandidateSet]:
    """Random history (first ``n_valid`` of ``n`` slots valid) and ``m`` candidates."""
    rng = np.random.default_rng([seed, n, m])
    n_valid = n if n_valid is None else n_valid
    history = HistorySequence(rng.normal(size=(n, emb_dim)), np.arange(n) < n_valid)
    return history, CandidateSet(rng.normal(size=(m, emb_dim)))


def _timed(fn, passes: int, warmup: int, repeats: int) -> float:
    for _ in range(warmup):
        fn()
    totals = []
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(passes):
            fn()
        totals.append(time.perf_counter() - start)
    return statistics.median(totals)


def run_benchmark(
    config: EncoderConfig,
    n_sweep: Sequence[int] = DEFAULT_N_SWEEP,
    m: int = 512,
    passes: int = 100,
    warmup: int = 10,
    inference: Sequence[str] = ("regular", "amortized"),
    fusion_mode=FusionMode.APPEND_CROSS,
    seed: int = 0,
    threads: int = 1,
    repeats: int = 1,
    regular_batch: int | None = None,
) -> list[BenchRecord]:
    """Time ``passes`` encoder forward passes per (history length, inference mode).

    Inputs for a given ``n`` are generated once and shared by both modes.
    ``config.token_dim`` is the fused token width.
    """
    if passes < 1:
        raise ContractError(f"passes must be >= 1, got {passes}")
    if repeats < 1:
        raise ContractError(f"repeats must be >= 1, got {repeats}")
    mode = FusionMode.parse(fusion_mode)
    for kind in inference:
        if kind not in ("regular", "amortized"):
            raise ContractError(f"unknown inference mode {kind!r}")
        if kind == "amortized" and mode is not FusionMode.APPEND_CROSS:
            raise AmortizationUnsupported(f"amortized inference is undefined for {mode.value}")
    emb_dim = config.token_dim // 2 if mode is FusionMode.CONCAT else config.token_dim
    weights = init_weights(config.replace(max_seq_len=max(config.max_seq_len, max(n_sweep) + 1)), seed)

    records = []
    with threadpool_limits(limits=threads):
        for n in n_sweep:
            history, candidates = make_request(emb_dim, n, m, seed)
            runners = {
                "regular": lambda: encode_regular(history, candidates, mode, weights, batch_size=regular_batch),
                "amortized": lambda: encode_amortized(history, candidates, weights, mode),
            }
            for kind in inference:
                total = _timed(runners[kind], passes, warmup, repeats)
                records.append(
                    BenchRecord(
                        inference=kind, l=config.num_layers, n=n, m=m, d_tok=config.token_dim,
                        k=config.key_dim, f=config.ffwd_dim, h=config.num_heads,
                        precision=T.get_precision(), passes=passes, warmup=warmup,
                        total_seconds=total, seconds_per_pass=total / passes, threads=threads,
                    )
                )
    return records


def speedups(records: Sequence[BenchRecord]) -> dict[int, float]:
    """regular / amortized seconds per pass, keyed by history length."""
    regular = {r.n: r.seconds_per_pass for r in records if r.inference == "regular"}
    amortized = {r.n: r.seconds_per_pass for r in records if r.inference == "amortized"}
    return {n: regular[n] / amortized[n] for n in regular if n in amortized}


def write_bench_csv(records: Sequence[BenchRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))


def read_bench_csv(path: str | Path) -> list[BenchRecord]:
    types = {f.name: f.type for f in fields(BenchRecord)}
    casts = {"int": int, "float": float, "str": str}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != BENCH_COLUMNS:
            raise ContractError(f"unexpected benchmark columns {reader.fieldnames}")
        return [BenchRecord(**{k: casts[types[k]](v) for k, v in row.items()}) for row in reader]


ATTENTION_COLUMNS = ["layer", "head", "query_index", "key_index", "weight"]


def dump_attention(
    weights: EncoderWeights,
    history: HistorySequence,
    candidate,
    layer: int,
    fusion_mode,
) -> list[dict]:
    """Post-softmax attention weights of one (history, candidate) example at ``layer``.

    One row per (head, query, key). Keys of padded history slots carry
    weight exactly 0.
    """
    if not 0 <= layer < weights.config.num_layers:
        raise ContractError(f"layer {layer} outside [0, {weights.config.num_layers})")
    fused = fuse(history, candidate, fusion_mode)
    _, acts = encoder_forward(fused.tokens, fused.kv_range, fused.mask, weights, fused.positions, record=True)
    rows = []
    for head, probs in enumerate(acts[layer].probs):
        n_q, n_kv = probs.shape
        for q in range(n_q):
            for k in range(n_kv):
                rows.append({"layer": layer, "head": head, "query_index": q, "key_index": k, "weight": float(probs[q, k])})
    return rows


def write_attention_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ATTENTION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
