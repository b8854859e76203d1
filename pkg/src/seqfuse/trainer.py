"""
Desk-scale rating prediction: synthetic data, an encoder + MLP rating model,
MSE training through the tape, MAE evaluation and finite-difference checks.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    glorot,
    init_weights,
    weights_from_dict,
    weights_to_dict,
)
from .errors import ContractError
from .fusion import FusionMode, encode_batch, token_width
from .tensor import GradTape, Tensor

LATENT_SD = 0.6
USER_BIAS_SD = 0.4
TEACHER_WINDOW = 8
RATING_MIN, RATING_MAX = 1.0, 5.0


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_items: int = 100
    num_users: int = 50
    emb_dim: int = 16
    user_dim: int = 8
    n_max: int = 8
    num_examples: int = 8000
    noise_sd: float = 0.1
    latent_dim: int = 4

    def __post_init__(self) -> None:
        for name in ("num_items", "num_users", "emb_dim", "user_dim", "n_max", "num_examples", "latent_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.noise_sd < 0:
            raise ContractError("noise_sd must be >= 0")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    seed: int
    item_latents: np.ndarray  # [V x latent_dim]
    user_bias: np.ndarray  # [U]
    user_ids: np.ndarray  # [N]
    history_ids: np.ndarray  # [N x n_max], padding slots hold 0
    valid: np.ndarray  # [N x n_max] bool, valid items form a prefix
    candidate_ids: np.ndarray  # [N]
    ratings: np.ndarray  # [N]

    def __len__(self) -> int:
        return len(self.ratings)

    def split(self, name: str) -> np.ndarray:
        """Example indices of ``train`` / ``val`` / ``test``: an 80/10/10 split by generation index."""
        n = len(self)
        a, b = int(0.8 * n), int(0.9 * n)
        bounds = {"train": (0, a), "val": (a, b), "test": (b, n), "all": (0, n)}
        if name not in bounds:
            raise ContractError(f"unknown split {name!r}")
        lo, hi = bounds[name]
        return np.arange(lo, hi)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "spec": asdict(self.spec),
            "seed": self.seed,
            "item_latents": self.item_latents.tolist(),
            "user_bias": self.user_bias.tolist(),
            "user_ids": self.user_ids.tolist(),
            "history_ids": self.history_ids.tolist(),
            "valid": self.valid.astype(int).tolist(),
            "candidate_ids": self.candidate_ids.tolist(),
            "ratings": self.ratings.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> SyntheticDataset:
        if doc.get("format_version") != 1:
            raise ContractError(f"unsupported dataset format_version {doc.get('format_version')!r}")
        return cls(
            spec=SyntheticSpec(**doc["spec"]),
            seed=doc["seed"],
            item_latents=np.asarray(doc["item_latents"], dtype=np.float64),
            user_bias=np.asarray(doc["user_bias"], dtype=np.float64),
            user_ids=np.asarray(doc["user_ids"], dtype=np.int64),
            history_ids=np.asarray(doc["history_ids"], dtype=np.int64),
            valid=np.asarray(doc["valid"], dtype=bool),
            candidate_ids=np.asarray(doc["candidate_ids"], dtype=np.int64),
            ratings=np.asarray(doc["ratings"], dtype=np.float64),
        )


def teacher_rating(item_latents, user_bias, user_ids, history_ids, valid, candidate_ids, noise) -> np.ndarray:
    """clip(3 + 2 <candidate latent, mean of the last 8 valid history latents> + user bias + noise, 1, 5)."""
    lengths = valid.sum(axis=1)
    slot = np.arange(history_ids.shape[1])[None, :]
    window = valid & (slot >= (lengths - TEACHER_WINDOW)[:, None])
    counts = np.maximum(window.sum(axis=1, keepdims=True), 1)
    pooled = (item_latents[history_ids] * window[:, :, None]).sum(axis=1) / counts
    affinity = (item_latents[candidate_ids] * pooled).sum(axis=1)
    raw = 3.0 + 2.0 * affinity + user_bias[user_ids] + noise
    return np.clip(raw, RATING_MIN, RATING_MAX)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 42) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    item_latents = rng.normal(0.0, LATENT_SD, size=(spec.num_items, spec.latent_dim))
    user_bias = rng.normal(0.0, USER_BIAS_SD, size=spec.num_users)
    n = spec.num_examples
    user_ids = rng.integers(0, spec.num_users, size=n)
    lengths = rng.integers(1, spec.n_max + 1, size=n)
    valid = np.arange(spec.n_max)[None, :] < lengths[:, None]
    history_ids = np.where(valid, rng.integers(0, spec.num_items, size=(n, spec.n_max)), 0)
    candidate_ids = rng.integers(0, spec.num_items, size=n)
    noise = rng.normal(0.0, spec.noise_sd, size=n) if spec.noise_sd > 0 else np.zeros(n)
    ratings = teacher_rating(item_latents, user_bias, user_ids, history_ids, valid, candidate_ids, noise)
    return SyntheticDataset(
        spec, seed, item_latents, user_bias, user_ids, history_ids, valid, candidate_ids, ratings
    )


def save_dataset(dataset: SyntheticDataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset.to_dict()))


def load_dataset(path: str | Path) -> SyntheticDataset:
    return SyntheticDataset.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    emb_dim: int = 16
    user_dim: int = 8
    key_dim: int = 16
    ffwd_dim: int = 16
    num_heads: int = 1
    num_layers: int = 2
    hidden: tuple[int, ...] = (64, 32)
    positional: bool = False

    def encoder_config(self, mode, n_max: int) -> EncoderConfig:
        return EncoderConfig(
            token_dim=token_width(self.emb_dim, mode),
            key_dim=self.key_dim,
            ffwd_dim=self.ffwd_dim,
            num_heads=self.num_heads,
            num_layers=self.num_layers,
            max_seq_len=n_max + 1,
            positional=self.positional,
        )


class RatingModel:
    """Item/user embedding tables, a history encoder and an MLP rating head.

    Head input is ``[candidate output, history summary, user embedding]``
    for append modes and ``[pooled output, user embedding]`` for concat.
    """

    def __init__(
        self,
        spec: ModelSpec,
        mode,
        num_items: int,
        num_users: int,
        n_max: int,
        seed: int = 0,
        output_bias: float = 3.0,
    ) -> None:
        self.spec = spec
        self.mode = FusionMode.parse(mode)
        self.num_items = num_items
        self.num_users = num_users
        self.n_max = n_max
        rng = np.random.default_rng(seed)
        self.config = spec.encoder_config(self.mode, n_max)
        self.item_table = Tensor(rng.normal(0.0, 0.1, size=(num_items, spec.emb_dim)), requires_grad=True)
        self.user_table = Tensor(rng.normal(0.0, 0.1, size=(num_users, spec.user_dim)), requires_grad=True)
        self.encoder: EncoderWeights = init_weights(self.config, rng)
        self.head: list[tuple[Tensor, Tensor]] = []
        widths = [self.head_input_dim, *spec.hidden, 1]
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = Tensor(glorot(rng, fan_in, fan_out, (fan_in, fan_out)), requires_grad=True)
            b = Tensor(np.zeros(fan_out), requires_grad=True)
            self.head.append((w, b))
        self.head[-1][1].data[...] = output_bias

    @property
    def head_input_dim(self) -> int:
        if self.mode is FusionMode.CONCAT:
            return self.config.token_dim + self.spec.user_dim
        return 2 * self.config.token_dim + self.spec.user_dim

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("item_table", self.item_table), ("user_table", self.user_table)]
        named += [(f"encoder.{name}", t) for name, t in self.encoder.named_parameters()]
        for i, (w, b) in enumerate(self.head):
            named += [(f"head.{i}.w", w), (f"head.{i}.b", b)]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def predict(self, user_ids, history_ids, valid, candidate_ids) -> Tensor:
        """Predicted ratings, shape ``[B x 1]``."""
        hist = T.gather_rows(self.item_table, history_ids)
        cand = T.gather_rows(self.item_table, candidate_ids)
        cand_out, summary, _ = encode_batch(hist, valid, cand, self.mode, self.encoder)
        user = T.gather_rows(self.user_table, user_ids)
        if self.mode is FusionMode.CONCAT:
            x = T.concat([cand_out, user], axis=-1)
        else:
            x = T.concat([cand_out, summary, user], axis=-1)
        for i, (w, b) in enumerate(self.head):
            x = x @ w + b
            if i < len(self.head) - 1:
                x = T.relu(x)
        return x

    def predict_examples(self, dataset: SyntheticDataset, idx: np.ndarray) -> Tensor:
        return self.predict(
            dataset.user_ids[idx], dataset.history_ids[idx], dataset.valid[idx], dataset.candidate_ids[idx]
        )

    def loss(self, dataset: SyntheticDataset, idx: np.ndarray) -> Tensor:
        pred = self.predict_examples(dataset, idx)
        target = Tensor(dataset.ratings[idx].reshape(-1, 1))
        diff = pred - target
        return T.mean_all(diff * diff)

    def to_dict(self) -> dict:
        doc = weights_to_dict(self.encoder)
        doc["model"] = {
            "mode": self.mode.value,
            "spec": asdict(self.spec),
            "num_items": self.num_items,
            "num_users": self.num_users,
            "n_max": self.n_max,
            "item_table": self.item_table.data.tolist(),
            "user_table": self.user_table.data.tolist(),
            "head": [{"w": w.data.tolist(), "b": b.data.tolist()} for w, b in self.head],
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> RatingModel:
        if "model" not in doc:
            raise ContractError("weight file carries no rating model block")
        meta = doc["model"]
        raw = dict(meta["spec"])
        raw["hidden"] = tuple(raw["hidden"])
        model = cls(ModelSpec(**raw), meta["mode"], meta["num_items"], meta["num_users"], meta["n_max"])
        model.encoder = weights_from_dict(doc)
        model.config = model.encoder.config
        model.item_table = Tensor(meta["item_table"], requires_grad=True)
        model.user_table = Tensor(meta["user_table"], requires_grad=True)
        model.head = [
            (Tensor(layer["w"], requires_grad=True), Tensor(layer["b"], requires_grad=True)) for layer in meta["head"]
        ]
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> RatingModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Optimisers
# --------------------------------------------------------------------------


@dataclass
class OptimizerSpec:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class _Adam:
    def __init__(self, params: list[Tensor], spec: OptimizerSpec) -> None:
        self.params = params
        self.spec = spec
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        s = self.spec
        self.t += 1
        c1 = 1 - s.beta1**self.t
        c2 = 1 - s.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= s.beta1
            m += (1 - s.beta1) * g
            v *= s.beta2
            v += (1 - s.beta2) * g * g
            p.data -= (s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)).astype(p.data.dtype)


class _SGD:
    def __init__(self, params: list[Tensor], spec: OptimizerSpec) -> None:
        self.params = params
        self.lr = spec.lr

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p.data -= (self.lr * g).astype(p.data.dtype)


def make_optimizer(params: list[Tensor], spec: OptimizerSpec):
    kinds = {"adam": _Adam, "sgd": _SGD}
    if spec.kind not in kinds:
        raise ContractError(f"unknown optimizer {spec.kind!r}")
    return kinds[spec.kind](params, spec)


# --------------------------------------------------------------------------
# Training and evaluation
# --------------------------------------------------------------------------


@dataclass
class TrainReport:
    train_mse: list[float]
    val_trace: list[tuple[int, float]]
    val_mae: float
    test_mae: float
    baseline_mae: float
    wall_seconds: float
    seed: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def metrics_rows(self) -> list[dict]:
        """Rows for the ``step,train_mse,val_mae`` metrics CSV; val_mae is blank between evaluations."""
        val = dict(self.val_trace)
        rows = [{"step": i + 1, "train_mse": mse, "val_mae": val.get(i + 1, "")} for i, mse in enumerate(self.train_mse)]
        if 0 in val:
            rows.insert(0, {"step": 0, "train_mse": "", "val_mae": val[0]})
        return rows


def mae(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if predictions.size == 0:
        raise ContractError("MAE of an empty split")
    if predictions.shape != targets.shape:
        raise ContractError(f"{predictions.size} predictions for {targets.size} targets")
    return float(np.abs(predictions - targets).mean())


def evaluate_mae(model: RatingModel, dataset: SyntheticDataset, split: str | np.ndarray = "test", chunk: int = 1024) -> float:
    idx = dataset.split(split) if isinstance(split, str) else np.asarray(split)
    if idx.size == 0:
        raise ContractError("cannot evaluate an empty split")
    preds = [model.predict_examples(dataset, idx[i : i + chunk]).data for i in range(0, idx.size, chunk)]
    return mae(np.concatenate(preds), dataset.ratings[idx])


def baseline_mae(dataset: SyntheticDataset, split: str = "test") -> float:
    """MAE of predicting the mean training rating for every example."""
    mean = dataset.ratings[dataset.split("train")].mean()
    idx = dataset.split(split)
    return mae(np.full(idx.size, mean), dataset.ratings[idx])


def train(
    model_spec: ModelSpec,
    mode,
    dataset: SyntheticDataset,
    optimizer: OptimizerSpec = OptimizerSpec(),
    seed: int = 0,
    eval_every: int = 100,
    full_batch: bool = False,
) -> tuple[RatingModel, TrainReport]:
    """Minibatch MSE training of a fresh model; deterministic for a given seed.

    With ``full_batch`` every step uses the whole training split.
    """
    if optimizer.steps < 0:
        raise ContractError("steps must be >= 0")
    start = time.perf_counter()
    train_idx = dataset.split("train")
    model = RatingModel(
        model_spec,
        mode,
        dataset.spec.num_items,
        dataset.spec.num_users,
        dataset.spec.n_max,
        seed=seed,
        output_bias=float(dataset.ratings[train_idx].mean()),
    )
    params = model.parameters()
    opt = make_optimizer(params, optimizer)
    rng = np.random.default_rng(seed + 1)
    mse_trace: list[float] = []
    val_trace = [(0, evaluate_mae(model, dataset, "val"))] if eval_every else []
    for step in range(1, optimizer.steps + 1):
        batch = train_idx if full_batch else rng.choice(train_idx, size=min(optimizer.batch, train_idx.size), replace=False)
        with GradTape() as tape:
            loss = model.loss(dataset, batch)
        grads = tape.backward(loss, params)
        opt.step(grads)
        mse_trace.append(loss.item())
        if eval_every and step % eval_every == 0:
            val_trace.append((step, evaluate_mae(model, dataset, "val")))
    report = TrainReport(
        train_mse=mse_trace,
        val_trace=val_trace,
        val_mae=evaluate_mae(model, dataset, "val"),
        test_mae=evaluate_mae(model, dataset, "test"),
        baseline_mae=baseline_mae(dataset, "test"),
        wall_seconds=time.perf_counter() - start,
        seed=seed,
        config={"mode": model.mode.value, "model": asdict(model_spec), "optimizer": asdict(optimizer),
                "encoder": asdict(model.config), "precision": T.get_precision()},
    )
    return model, report


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------

GRAD_FAMILIES = ("W_q", "W_k", "W_v", "W_o", "ffwd", "layernorm", "head", "embeddings")


def param_family(name: str) -> str:
    if name.startswith(("item_table", "user_table")) or name == "encoder.positions":
        return "embeddings"
    if name.startswith("head."):
        return "head"
    leaf = name.split(".")[-1]
    if leaf.startswith(("wq", "bq")):
        return "W_q"
    if leaf.startswith(("wk", "bk")):
        return "W_k"
    if leaf.startswith(("wv", "bv")):
        return "W_v"
    if leaf.startswith(("wo", "bo")):
        return "W_o"
    if leaf.startswith(("w1", "b1", "w2", "b2")):
        return "ffwd"
    return "layernorm"


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    by_family: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradient_check(
    model_spec: ModelSpec,
    mode,
    batch: int = 8,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    num_checks: int = 240,
    denominator_floor: float = 1e-6,
    data_spec: SyntheticSpec | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences on a random subset of parameters.

    Entries are drawn from every parameter family; for embedding tables
    only rows the batch touches are sampled. Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, denominator_floor)``.
    """
    if T.get_precision() != "f64":
        raise ContractError("gradient_check needs f64 precision")
    data_spec = data_spec or SyntheticSpec(
        num_items=12, num_users=5, emb_dim=model_spec.emb_dim, user_dim=model_spec.user_dim, n_max=4, num_examples=40
    )
    dataset = generate_synthetic(data_spec, seed)
    model = RatingModel(model_spec, mode, data_spec.num_items, data_spec.num_users, data_spec.n_max, seed=seed)
    rng = np.random.default_rng(seed + 7)
    # Randomise biases and layer-norm parameters so their gradients are generic.
    for name, t in model.named_parameters():
        if t.ndim == 1:
            t.data += rng.normal(0.0, 0.1, size=t.shape)
    idx = np.arange(min(batch, len(dataset)))
    named = model.named_parameters()
    params = [t for _, t in named]
    with GradTape() as tape:
        loss = model.loss(dataset, idx)
    grads = dict(zip((n for n, _ in named), tape.backward(loss, params)))

    used_items = np.unique(np.concatenate([dataset.history_ids[idx][dataset.valid[idx]], dataset.candidate_ids[idx]]))
    used_users = np.unique(dataset.user_ids[idx])
    by_family: dict[str, list[tuple[str, Tensor]]] = {f: [] for f in GRAD_FAMILIES}
    for name, t in named:
        by_family[param_family(name)].append((name, t))
    present = [f for f in GRAD_FAMILIES if by_family[f]]
    per_family = math.ceil(num_checks / len(present))

    def loss_value() -> float:
        return model.loss(dataset, idx).item()

    worst: dict[str, float] = {}
    max_abs = 0.0
    checked = 0
    for family in present:
        members = by_family[family]
        for _ in range(per_family):
            name, t = members[rng.integers(len(members))]
            if name == "item_table":
                pos = (int(rng.choice(used_items)), int(rng.integers(t.shape[1])))
            elif name == "user_table":
                pos = (int(rng.choice(used_users)), int(rng.integers(t.shape[1])))
            else:
                pos = tuple(int(rng.integers(s)) for s in t.shape)
            original = t.data[pos]
            t.data[pos] = original + h
            up = loss_value()
            t.data[pos] = original - h
            down = loss_value()
            t.data[pos] = original
            numeric = (up - down) / (2 * h)
            analytic = float(grads[name][pos])
            err = abs(analytic - numeric)
            rel = err / max(abs(analytic), abs(numeric), denominator_floor)
            worst[family] = max(worst.get(family, 0.0), rel)
            max_abs = max(max_abs, err)
            checked += 1
    return GradCheckReport(max(worst.values()), max_abs, checked, worst, tolerance)
