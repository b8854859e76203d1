"""Command-line entry point: ``seqfuse <subcommand> [flags]``.

Every subcommand writes its machine-readable result (CSV or JSON) to
``--out`` when given and a short human summary to stdout. Exit status is 0
on success, 1 on contract errors or failed checks, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import tensor as T
from .amortized import check_equivalence
from .bench import DEFAULT_N_SWEEP, dump_attention, make_request, run_benchmark, speedups, write_attention_csv, write_bench_csv
from .costmodel import flops_exact, flops_leading
from .encoder import EncoderConfig, init_weights, match_params, param_count, default_grid
from .errors import ContractError
from .fusion import FusionMode, HistorySequence, token_width
from .presets import PRESET_PAIRS, get_preset
from .trainer import (
    ModelSpec,
    OptimizerSpec,
    RatingModel,
    SyntheticSpec,
    baseline_mae,
    evaluate_mae,
    generate_synthetic,
    load_dataset,
    save_dataset,
    train,
)

REPORT_FORMAT_VERSION = 1


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_json(path: str | None, doc: dict) -> None:
    if path:
        Path(path).write_text(json.dumps({"format_version": REPORT_FORMAT_VERSION, **doc}, indent=2) + "\n")


def _add_dims(p: argparse.ArgumentParser, preset_default: str | None = None) -> None:
    p.add_argument("--preset", default=preset_default, help="architecture preset (e.g. feed, public-concat)")
    p.add_argument("--mode", default=None, help="fusion mode: append-cross | append-self | concat")
    p.add_argument("--d", type=int, default=None, help="item embedding width")
    p.add_argument("--k", type=int, default=None, help="key dimension")
    p.add_argument("--f", type=int, default=None, help="feedforward dimension")
    p.add_argument("--h", type=int, default=None, help="number of heads")
    p.add_argument("--l", type=int, default=None, help="number of layers")


def _resolve_config(args) -> tuple[EncoderConfig, FusionMode, int]:
    """Encoder config, fusion mode and history length from --preset plus overrides."""
    if args.preset:
        preset = get_preset(args.preset)
        mode = FusionMode.parse(args.mode or preset.mode)
        emb = args.d or preset.emb_dim
        seq_len = preset.seq_len
        base = dict(key_dim=preset.key_dim, ffwd_dim=preset.ffwd_dim, num_heads=preset.num_heads, num_layers=preset.num_layers)
    else:
        if args.d is None:
            raise ContractError("give --preset or at least --d")
        mode = FusionMode.parse(args.mode or "append-cross")
        emb, seq_len = args.d, 48
        base = dict(key_dim=args.d, ffwd_dim=args.d, num_heads=1, num_layers=2)
    overrides = {"key_dim": args.k, "ffwd_dim": args.f, "num_heads": args.h, "num_layers": args.l}
    base.update({k: v for k, v in overrides.items() if v is not None})
    n = getattr(args, "n", None)
    max_len = max(seq_len, n or 0) + 1
    config = EncoderConfig(token_dim=token_width(emb, mode), max_seq_len=max_len, **base)
    return config, mode, seq_len


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_bench(args) -> int:
    config, mode, _ = _resolve_config(args)
    records = run_benchmark(
        config, n_sweep=args.n_sweep, m=args.m, passes=args.passes, warmup=args.warmup,
        inference=args.inference, fusion_mode=mode, seed=args.seed, threads=args.threads,
        repeats=args.repeats, regular_batch=args.regular_batch,
    )
    if args.out:
        write_bench_csv(records, args.out)
    print(f"{'inference':<10} {'n':>5} {'m':>5} {'total_s':>10} {'s/pass':>10}")
    for r in records:
        print(f"{r.inference:<10} {r.n:>5} {r.m:>5} {r.total_seconds:>10.4f} {r.seconds_per_pass:>10.5f}")
    for n, s in speedups(records).items():
        print(f"speedup n={n}: {s:.2f}x")
    return 0


def cmd_equiv(args) -> int:
    config, mode, seq_len = _resolve_config(args)
    n = seq_len if args.n is None else args.n
    weights = init_weights(config, args.seed)
    history, candidates = make_request(config.token_dim, n, args.m, args.seed, args.n_valid)
    report = check_equivalence(history, candidates, weights, args.tol, mode)
    _write_json(args.out, {"config": asdict(config), "n": n, "m": args.m, "seed": args.seed,
                           "precision": T.get_precision(), **report.to_dict()})
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max_rel_diff={report.max_rel_diff:.3e} max_abs_diff={report.max_abs_diff:.3e} tol={report.tolerance:g}")
    return 0 if report.passed else 1


def cmd_flops(args) -> int:
    regular, amortized, ratio = flops_leading(args.l, args.n, args.m, args.d)
    config = EncoderConfig(token_dim=args.d, key_dim=args.k or args.d, ffwd_dim=args.f or args.d,
                           num_heads=args.h, num_layers=args.l)
    exact_regular = flops_exact(config, args.n, args.m, FusionMode.APPEND_CROSS, "regular")
    exact_amortized = flops_exact(config, args.n, args.m, FusionMode.APPEND_CROSS, "amortized")
    regular.exact_total, regular.exact_breakdown = exact_regular.exact_total, exact_regular.exact_breakdown
    amortized.exact_total, amortized.exact_breakdown = exact_amortized.exact_total, exact_amortized.exact_breakdown
    doc = {
        "inputs": {"l": args.l, "n": args.n, "m": args.m, "d": args.d, "k": config.key_dim, "f": config.ffwd_dim, "h": args.h},
        "regular": regular.to_dict(),
        "amortized": amortized.to_dict(),
        "ratio": float(ratio),
        "ratio_fraction": f"{ratio.numerator}/{ratio.denominator}",
        "exact_ratio": exact_regular.exact_total / exact_amortized.exact_total,
    }
    _write_json(args.out, doc)
    if args.format == "json":
        print(json.dumps(doc, indent=2))
    else:
        print(f"{'':<10} {'projection':>16} {'attention':>16} {'leading':>16} {'exact':>16}")
        for r in (regular, amortized):
            print(f"{r.mode:<10} {r.leading_projection_term:>16} {r.leading_attention_term:>16} "
                  f"{r.leading_total:>16} {r.exact_total:>16}")
        print(f"leading ratio {float(ratio):.4f}, exact ratio {doc['exact_ratio']:.4f}")
    return 0


def cmd_params(args) -> int:
    config, mode, _ = _resolve_config(args)
    count = param_count(config)
    _write_json(args.out, {"preset": args.preset, "mode": mode.value, "config": asdict(config), "param_count": count})
    print(f"{args.preset or 'custom'} ({mode.value}, token width {config.token_dim}): {count} parameters")
    return 0


def cmd_match(args) -> int:
    if args.dataset:
        target_name, reference_name = PRESET_PAIRS[args.dataset]
    else:
        reference_name, target_name = args.reference, args.target
    if not reference_name or not target_name:
        raise ContractError("give --dataset or both --reference and --target")
    ref, tgt = get_preset(reference_name), get_preset(target_name)
    grid = default_grid(args.step, args.max_dim)
    result = match_params(ref.encoder_config(), tgt.encoder_config(), grid, prefer=args.prefer, tolerance=args.tol)
    doc = {
        "reference": ref.name, "target": tgt.name, "key_dim": result.key_dim, "ffwd_dim": result.ffwd_dim,
        "reference_count": result.reference_count, "target_count": result.target_count,
        "relative_gap": result.relative_gap, "step": args.step, "prefer": args.prefer, "tolerance": args.tol,
    }
    _write_json(args.out, doc)
    print(f"{tgt.name}: key_dim={result.key_dim} ffwd_dim={result.ffwd_dim} -> {result.target_count} params "
          f"vs {ref.name} {result.reference_count} (gap {100 * result.relative_gap:.2f}%)")
    return 0


def _synthetic_spec(args) -> SyntheticSpec:
    return SyntheticSpec(
        num_items=args.items, num_users=args.users, emb_dim=args.emb_dim, user_dim=args.user_dim,
        n_max=args.n_max, num_examples=args.examples, noise_sd=args.noise_sd,
    )


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    d = SyntheticSpec()
    p.add_argument("--items", type=int, default=d.num_items)
    p.add_argument("--users", type=int, default=d.num_users)
    p.add_argument("--emb-dim", type=int, default=d.emb_dim)
    p.add_argument("--user-dim", type=int, default=d.user_dim)
    p.add_argument("--n-max", type=int, default=d.n_max)
    p.add_argument("--examples", type=int, default=d.num_examples)
    p.add_argument("--noise-sd", type=float, default=d.noise_sd)


def cmd_gen_data(args) -> int:
    dataset = generate_synthetic(_synthetic_spec(args), args.seed)
    if args.out:
        save_dataset(dataset, args.out)
    print(f"{len(dataset)} examples, baseline test MAE {baseline_mae(dataset):.4f}")
    return 0


def _load_or_generate(args):
    if args.data:
        return load_dataset(args.data)
    return generate_synthetic(_synthetic_spec(args), args.data_seed)


def cmd_train(args) -> int:
    dataset = _load_or_generate(args)
    spec = ModelSpec(
        emb_dim=dataset.spec.emb_dim, user_dim=dataset.spec.user_dim, key_dim=args.key_dim,
        ffwd_dim=args.ffwd_dim, num_heads=args.heads, num_layers=args.layers, positional=args.positional,
    )
    opt = OptimizerSpec(kind=args.optimizer, lr=args.lr, steps=args.steps, batch=args.batch)
    model, report = train(spec, args.mode, dataset, opt, seed=args.seed, eval_every=args.eval_every)
    if args.out:
        model.save(args.out)
    if args.metrics:
        with open(args.metrics, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "train_mse", "val_mae"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(report.metrics_rows())
    if args.report:
        doc = report.to_dict()
        doc.pop("train_mse")
        _write_json(args.report, doc)
    print(f"{FusionMode.parse(args.mode).value}: test MAE {report.test_mae:.4f} "
          f"(baseline {report.baseline_mae:.4f}, ratio {report.test_mae / report.baseline_mae:.3f}) "
          f"in {report.wall_seconds:.1f}s")
    return 0


def cmd_eval(args) -> int:
    model = RatingModel.load(args.model)
    dataset = load_dataset(args.data)
    value = evaluate_mae(model, dataset, args.split)
    base = baseline_mae(dataset, args.split)
    _write_json(args.out, {"split": args.split, "mae": value, "baseline_mae": base})
    print(f"{args.split} MAE {value:.4f} (baseline {base:.4f})")
    return 0


def cmd_attn_dump(args) -> int:
    if args.model:
        if not args.data:
            raise ContractError("--model needs --data to pick the example")
        model = RatingModel.load(args.model)
        dataset = load_dataset(args.data)
        if not 0 <= args.index < len(dataset):
            raise ContractError(f"--index {args.index} outside dataset of {len(dataset)} examples")
        i = args.index
        table = model.item_table.data
        history = HistorySequence(table[dataset.history_ids[i]], dataset.valid[i])
        candidate = table[dataset.candidate_ids[i]]
        weights, mode = model.encoder, model.mode
    else:
        config, mode, seq_len = _resolve_config(args)
        n = seq_len if args.n is None else args.n
        weights = init_weights(config, args.seed)
        emb = config.token_dim // 2 if mode is FusionMode.CONCAT else config.token_dim
        history, cands = make_request(emb, n, 1, args.seed, args.n_valid)
        candidate = cands.embeddings.data[0]
    rows = dump_attention(weights, history, candidate, args.layer, mode)
    if args.out:
        write_attention_csv(rows, args.out)
    heads = {r["head"] for r in rows}
    queries = {r["query_index"] for r in rows}
    keys = {r["key_index"] for r in rows}
    print(f"layer {args.layer}: {len(heads)} head(s) x {len(queries)} queries x {len(keys)} keys")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--precision", choices=["f32", "f64"], default=None,
                        help="numeric precision (default: $SEQFUSE_PRECISION or f32)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="machine-readable output path")
        return p

    p = add("bench", cmd_bench, "time regular vs amortized inference over history lengths")
    _add_dims(p, "feed")
    p.add_argument("--n-sweep", type=_int_list, default=list(DEFAULT_N_SWEEP))
    p.add_argument("--m", type=int, default=512)
    p.add_argument("--passes", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--repeats", type=int, default=1, help="timed blocks per row; the median is reported")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--regular-batch", type=int, default=None, help="candidates per regular-inference chunk")
    p.add_argument("--inference", type=lambda s: s.split(","), default=["regular", "amortized"])

    p = add("equiv-check", cmd_equiv, "compare amortized and regular candidate outputs")
    _add_dims(p, "feed")
    p.add_argument("--n", type=int, default=None, help="history slots (default: preset length)")
    p.add_argument("--n-valid", type=int, default=None)
    p.add_argument("--m", type=int, default=512)
    p.add_argument("--tol", type=float, default=None)

    p = add("flops", cmd_flops, "leading-term and exact FLOP counts")
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--f", type=int, default=None)
    p.add_argument("--h", type=int, default=1)
    p.add_argument("--format", choices=["json", "text"], default="json")

    p = add("params", cmd_params, "encoder parameter count")
    _add_dims(p)

    p = add("match-params", cmd_match, "choose key/ffwd dims that match a reference parameter count")
    p.add_argument("--dataset", choices=sorted(PRESET_PAIRS), default=None,
                   help="match the append preset of this row to its concat preset")
    p.add_argument("--reference", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--step", type=int, default=4)
    p.add_argument("--max-dim", type=int, default=512)
    p.add_argument("--prefer", choices=["balanced", "closest"], default="balanced")
    p.add_argument("--tol", type=float, default=0.01)

    p = add("gen-data", cmd_gen_data, "generate a synthetic rating dataset")
    _add_data_flags(p)

    p = add("train", cmd_train, "train a rating model on synthetic data")
    p.add_argument("--data", default=None, help="dataset file (default: generate from the data flags)")
    p.add_argument("--data-seed", type=int, default=42)
    _add_data_flags(p)
    p.add_argument("--mode", default="append-cross")
    p.add_argument("--key-dim", type=int, default=16)
    p.add_argument("--ffwd-dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--positional", action="store_true")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--metrics", default=None, help="metrics CSV path (step,train_mse,val_mae)")
    p.add_argument("--report", default=None, help="JSON training report path")

    p = add("eval", cmd_eval, "MAE of a saved model on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")

    p = add("attn-dump", cmd_attn_dump, "dump attention probabilities of one example")
    _add_dims(p, "feed")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--n-valid", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with T.precision(args.precision or T.get_precision()):
            return args.func(args)
    except (ContractError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
