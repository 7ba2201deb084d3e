"""Attention network over event triplets and stock identity, with training.

Events enter as subject + action - object compositions of learned
embeddings. A summary token attends over the day's events and the stock
embedding; weekly inputs run a second attention pass over per-day
summaries. An MLP maps the summary to a return forecast.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .events import PAD, UNK, PAD_KEY, UNK_KEY, FirmPeriodObservation, Panel, Vocabulary
from .seeding import rng_for

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ser-returns-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    daily_layers: int = 2
    weekly_layers: int = 2
    mlp_layers: int = 2
    hidden: int | None = None
    n_max: int = 30
    days: int = 5
    mode: str = "daily"
    l2: float = 1e-5
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    init_std: float = 0.02
    seed: int = 0
    transe_weight: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if min(self.heads, self.mlp_layers, self.n_max, self.days, self.epochs, self.batch_size) < 1:
            raise ValueError("counts must be at least 1")
        if self.daily_layers < 0 or self.weekly_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.mode not in ("daily", "weekly"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.hidden or self.dim

    @property
    def day_slots(self) -> int:
        return self.days if self.mode == "weekly" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Grouped hyperparameter transfer: one preset per group of consecutive splits.
PRESETS: dict[str, dict] = {
    "desk": dict(dim=16, heads=2, daily_layers=1, weekly_layers=1, mlp_layers=2, n_max=8,
                 epochs=6, batch_size=128, lr=3e-3, l2=1e-6, init_std=0.3),
    "tiny": dict(dim=8, heads=2, daily_layers=1, weekly_layers=1, mlp_layers=2, n_max=4, days=2),
    "default": {},
}


def config_for_split(split_index: int, group_presets: Sequence[str], group_size: int = 5, **overrides) -> ModelConfig:
    """Config frozen for the group containing ``split_index``."""
    group = min(split_index // group_size, len(group_presets) - 1)
    return ModelConfig(**{**PRESETS[group_presets[group]], **overrides})


# ------------------------------------------------------------------ params


def param_shapes(cfg: ModelConfig, n_entities: int, n_actions: int, n_stocks: int) -> dict[str, tuple[int, int]]:
    M, dk = cfg.dim, cfg.head_dim
    shapes = {
        "entity": (n_entities, M),
        "action": (n_actions, M),
        "stock": (n_stocks, M),
        "cls_daily": (1, M),
        "cls_weekly": (1, M),
    }
    stacks = [("daily", cfg.daily_layers)]
    if cfg.mode == "weekly":
        stacks.append(("weekly", cfg.weekly_layers))
    for name, layers in stacks:
        for l in range(layers):
            for h in range(cfg.heads):
                shapes[f"{name}.{l}.q{h}"] = (M, dk)
                shapes[f"{name}.{l}.k{h}"] = (M, dk)
                shapes[f"{name}.{l}.v{h}"] = (M, dk)
            shapes[f"{name}.{l}.o"] = (cfg.heads * dk, M)
    width = M
    for s in range(cfg.mlp_layers):
        out = 1 if s == cfg.mlp_layers - 1 else cfg.hidden_dim
        shapes[f"mlp.{s}.w"] = (width, out)
        shapes[f"mlp.{s}.b"] = (1, out)
        width = out
    return shapes


def init_params(cfg: ModelConfig, n_entities: int, n_actions: int, n_stocks: int,
                rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    rng = rng if rng is not None else rng_for(cfg.seed, "init")
    return {
        name: rng.normal(0.0, cfg.init_std, size=shape)
        for name, shape in param_shapes(cfg, n_entities, n_actions, n_stocks).items()
    }


@dataclass
class SERModel:
    """Config, parameters and the token keys that index the embedding rows."""

    cfg: ModelConfig
    params: dict[str, np.ndarray]
    entity_keys: list[str]
    action_keys: list[str]
    stock_keys: list[str]

    @classmethod
    def for_panel(cls, cfg: ModelConfig, panel: Panel, vocab: Vocabulary) -> "SERModel":
        """Fresh model whose tables cover only tokens seen in ``panel``."""
        ents, acts, stocks = set(), set(), set()
        for o in panel:
            t = o.tokens[o.mask]
            ents.update(t[:, 0].tolist())
            ents.update(t[:, 2].tolist())
            acts.update(t[:, 1].tolist())
            stocks.add(o.stock_id)
        ent_keys = [PAD_KEY, UNK_KEY] + [vocab.entities.key(i) for i in sorted(ents - {PAD, UNK})]
        act_keys = [PAD_KEY, UNK_KEY] + [vocab.actions.key(i) for i in sorted(acts - {PAD, UNK})]
        stock_keys = [PAD_KEY, UNK_KEY] + [str(s) for s in sorted(stocks)]
        params = init_params(cfg, len(ent_keys), len(act_keys), len(stock_keys))
        return cls(cfg, params, ent_keys, act_keys, stock_keys)

    def remap(self, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
        """Arrays translating panel-vocabulary ids to table rows (unseen -> UNK)."""
        ent_rows = {k: i for i, k in enumerate(self.entity_keys)}
        act_rows = {k: i for i, k in enumerate(self.action_keys)}
        ent_map = np.array([ent_rows.get(k, UNK) for k in vocab.entities.keys()], dtype=np.int64)
        act_map = np.array([act_rows.get(k, UNK) for k in vocab.actions.keys()], dtype=np.int64)
        ent_map[PAD] = PAD
        act_map[PAD] = PAD
        return ent_map, act_map

    def stock_row(self, stock_id: int) -> int:
        rows = getattr(self, "_stock_rows", None)
        if rows is None:
            rows = {k: i for i, k in enumerate(self.stock_keys)}
            self._stock_rows = rows
        return rows.get(str(stock_id), UNK)


# ----------------------------------------------------------------- batches


@dataclass
class Batch:
    tokens: np.ndarray  # (B, D, N, 3) table rows
    mask: np.ndarray  # (B, D, N)
    stocks: np.ndarray  # (B,)
    targets: np.ndarray  # (B,)
    source: np.ndarray | None = None  # (B, D, N, 3) panel-vocabulary ids, same slot order

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def take(self, idx) -> "Batch":
        src = None if self.source is None else self.source[idx]
        return Batch(self.tokens[idx], self.mask[idx], self.stocks[idx], self.targets[idx], src)


def canonical_order(tokens: np.ndarray, mask: np.ndarray, *carry: np.ndarray):
    """Sort each day's slots: real events first, then by (subject, action, object).

    Attention is permutation invariant over events; a canonical slot order
    makes that hold bit-for-bit in floating point too. ``carry`` arrays shaped
    like ``tokens`` are permuted alongside.
    """
    flat_t = tokens.reshape(-1, tokens.shape[-2], 3)
    flat_m = mask.reshape(-1, mask.shape[-1])
    order = np.lexsort((flat_t[..., 2], flat_t[..., 1], flat_t[..., 0], ~flat_m), axis=-1)
    m = np.take_along_axis(flat_m, order, axis=1)
    out = []
    for arr in (tokens,) + carry:
        a = np.take_along_axis(arr.reshape(flat_t.shape), order[..., None], axis=1)
        out.append(np.where(m[..., None], a, PAD).reshape(tokens.shape))
    return (out[0], m.reshape(mask.shape), *out[1:])


def encode(model: SERModel, observations: Sequence[FirmPeriodObservation], vocab: Vocabulary) -> Batch:
    cfg = model.cfg
    D = cfg.day_slots
    ent_map, act_map = model.remap(vocab)
    B = len(observations)
    tokens = np.zeros((B, D, cfg.n_max, 3), dtype=np.int64)
    mask = np.zeros((B, D, cfg.n_max), dtype=bool)
    for b, o in enumerate(observations):
        if o.days != D:
            raise ValueError(f"observation has {o.days} day slots; model expects {D}")
        n = min(o.tokens.shape[1], cfg.n_max)
        tokens[b, :, :n] = o.tokens[:, :n]
        mask[b, :, :n] = o.mask[:, :n]
    source = tokens.copy()
    tokens[..., 0] = ent_map[tokens[..., 0]]
    tokens[..., 2] = ent_map[tokens[..., 2]]
    tokens[..., 1] = act_map[tokens[..., 1]]
    tokens, mask, source = canonical_order(tokens, mask, source)
    stocks = np.array([model.stock_row(o.stock_id) for o in observations], dtype=np.int64)
    targets = np.array([o.target_return for o in observations], dtype=np.float64)
    return Batch(tokens, mask, stocks, targets, source)


# ----------------------------------------------------------------- forward


@dataclass
class Trace:
    """Intermediate tensors of one forward pass, for attribution."""

    yhat: ad.Tensor
    subject: ad.Tensor  # (B*D, N, M) subject embeddings
    action: ad.Tensor
    object: ad.Tensor
    event: ad.Tensor  # (B*D, N, M) composed event rows
    stock: ad.Tensor  # (B*D, 1, M) stock embedding rows
    leaves: dict[str, ad.Tensor] = field(default_factory=dict)
    aux: ad.Tensor | None = None


def encode_events(P: dict[str, ad.Tensor], tokens: np.ndarray):
    """Compose subject + action - object rows for (..., N, 3) token rows."""
    es = ad.embedding_lookup(P["entity"], tokens[..., 0])
    ea = ad.embedding_lookup(P["action"], tokens[..., 1])
    eo = ad.embedding_lookup(P["entity"], tokens[..., 2])
    return ad.sub(ad.add(es, ea), eo), es, ea, eo


def attention_layer(x: ad.Tensor, key_mask: np.ndarray, P: dict[str, ad.Tensor], prefix: str, heads: int) -> ad.Tensor:
    dk = P[f"{prefix}.q0"].shape[1]
    mask = key_mask[..., None, :]
    outs = []
    for h in range(heads):
        q = ad.matmul(x, P[f"{prefix}.q{h}"])
        k = ad.matmul(x, P[f"{prefix}.k{h}"])
        v = ad.matmul(x, P[f"{prefix}.v{h}"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dk))
        outs.append(ad.matmul(ad.masked_softmax_rows(scores, mask), v))
    cat = outs[0] if heads == 1 else ad.concat_cols(outs)
    return ad.matmul(cat, P[f"{prefix}.o"])


def attention_stack(x: ad.Tensor, key_mask: np.ndarray, P: dict[str, ad.Tensor], name: str,
                    layers: int, heads: int) -> ad.Tensor:
    """``layers`` rounds of multi-head self-attention with key masking.

    No residual path or normalisation: each layer is projection, masked
    softmax, value mix, output projection.
    """
    for l in range(layers):
        x = attention_layer(x, key_mask, P, f"{name}.{l}", heads)
    return x


def daily_forward(P: dict[str, ad.Tensor], tokens: np.ndarray, mask: np.ndarray, stocks: np.ndarray, cfg: ModelConfig):
    """Summary vectors (B, 1, M) for day slices ``tokens`` (B, N, 3)."""
    z, es, ea, eo = encode_events(P, tokens)
    stock = ad.embedding_lookup(P["stock"], stocks[:, None])
    seq = ad.concat_rows([P["cls_daily"], z, stock])
    B = tokens.shape[0]
    key_mask = np.concatenate([np.ones((B, 1), bool), mask, np.ones((B, 1), bool)], axis=1)
    out = attention_stack(seq, key_mask, P, "daily", cfg.daily_layers, cfg.heads)
    return ad.slice_row(out, 0), (z, es, ea, eo, stock)


def weekly_forward(P: dict[str, ad.Tensor], tokens: np.ndarray, mask: np.ndarray, stocks: np.ndarray, cfg: ModelConfig):
    """Summary vectors (B, 1, M) for weeks ``tokens`` (B, D, N, 3)."""
    B, D, N = mask.shape
    day_rows, parts = daily_forward(
        P, tokens.reshape(B * D, N, 3), mask.reshape(B * D, N), np.repeat(stocks, D), cfg
    )
    days = ad.reshape(day_rows, (B, D, cfg.dim))
    seq = ad.concat_rows([P["cls_weekly"], days])
    out = attention_stack(seq, np.ones((B, D + 1), bool), P, "weekly", cfg.weekly_layers, cfg.heads)
    return ad.slice_row(out, 0), parts


def mlp_head(P: dict[str, ad.Tensor], z: ad.Tensor, layers: int) -> ad.Tensor:
    h = z
    for s in range(layers):
        h = ad.add(ad.matmul(h, P[f"mlp.{s}.w"]), P[f"mlp.{s}.b"])
        if s < layers - 1:
            h = ad.relu(h)
    return h


def forward(model: SERModel, batch: Batch, tape: ad.Tape | None = None) -> Trace:
    """Predictions (B, 1, 1) with every parameter bound as a leaf on ``tape``."""
    cfg = model.cfg
    tape = ad.Tape() if tape is None else tape
    P = {name: tape.leaf(v) for name, v in model.params.items()}
    if cfg.mode == "daily":
        z_sum, (z, es, ea, eo, stock) = daily_forward(P, batch.tokens[:, 0], batch.mask[:, 0], batch.stocks, cfg)
    else:
        z_sum, (z, es, ea, eo, stock) = weekly_forward(P, batch.tokens, batch.mask, batch.stocks, cfg)
    yhat = mlp_head(P, z_sum, cfg.mlp_layers)
    trace = Trace(yhat, es, ea, eo, z, stock, P)
    if cfg.transe_weight > 0:
        real = batch.mask.reshape(-1, batch.mask.shape[-1])
        picked = ad.mul_const(z, real[..., None].astype(np.float64))
        trace.aux = ad.scale(ad.mean_sq(picked), real.size / max(int(real.sum()), 1))
    return trace


def predict_batch(model: SERModel, batch: Batch) -> np.ndarray:
    return forward(model, batch).yhat.value.reshape(-1)


def predict(model: SERModel, observations: Sequence[FirmPeriodObservation], vocab: Vocabulary,
            chunk: int = 1024) -> np.ndarray:
    out = []
    for i in range(0, len(observations), chunk):
        out.append(predict_batch(model, encode(model, observations[i : i + chunk], vocab)))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- training


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    model: SERModel
    epoch_mse: list[float]
    param_norms: list[float]
    seed: int
    wall_time: float


def loss_and_grads(model: SERModel, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    tape = ad.Tape()
    trace = forward(model, batch, tape)
    y = ad.Tensor(batch.targets.reshape(-1, 1, 1))
    mse = ad.mean_sq(ad.sub(trace.yhat, y))
    loss = mse if trace.aux is None else ad.add(mse, ad.scale(trace.aux, model.cfg.transe_weight))
    grads = tape.backward(loss)
    l2 = model.cfg.l2
    out = {k: grads[t] + 2.0 * l2 * model.params[k] for k, t in trace.leaves.items()}
    return float(mse.value[0, 0]), out


def param_norm(params: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for v in params.values()))


def train(panel: Panel, vocab: Vocabulary, cfg: ModelConfig, model: SERModel | None = None) -> TrainReport:
    """Minibatch Adam on MSE + l2 * ||theta||^2; deterministic given ``cfg.seed``.

    A fresh model (all tables re-initialised) is built from ``panel`` unless
    one is passed in.
    """
    if len(panel) == 0:
        raise ValueError("cannot train on an empty panel")
    start = time.perf_counter()
    model = model or SERModel.for_panel(cfg, panel, vocab)
    data = encode(model, list(panel), vocab)
    opt = Adam(model.params, cfg.lr)
    rng = rng_for(cfg.seed, "shuffle")
    epoch_mse, norms = [], []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sse = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            mse, grads = loss_and_grads(model, data.take(idx))
            if not math.isfinite(mse):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
            sse += mse * len(idx)
            opt.step(model.params, grads)
        epoch_mse.append(sse / n)
        norms.append(param_norm(model.params))
        log.debug("epoch %d mse %.6g", epoch, epoch_mse[-1])
    return TrainReport(model, epoch_mse, norms, cfg.seed, time.perf_counter() - start)


def evaluate_mse(model: SERModel, panel: Panel, vocab: Vocabulary) -> float:
    obs = list(panel)
    pred = predict(model, obs, vocab)
    y = np.array([o.target_return for o in obs])
    return float(np.mean((pred - y) ** 2))


# -------------------------------------------------------------- checkpoint


def checkpoint_dict(model: SERModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "sizes": {"entities": len(model.entity_keys), "actions": len(model.action_keys), "stocks": len(model.stock_keys)},
        "entity_keys": model.entity_keys,
        "action_keys": model.action_keys,
        "stock_keys": model.stock_keys,
        "tensors": {
            name: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for name, v in sorted(model.params.items())
        },
    }


def save_checkpoint(model: SERModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model), sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> SERModel:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    params = {
        name: np.array(t["data"], dtype=np.float64).reshape(t["shape"]) for name, t in d["tensors"].items()
    }
    return SERModel(ModelConfig.from_dict(d["config"]), params, d["entity_keys"], d["action_keys"], d["stock_keys"])


def with_params(model: SERModel, **updates: np.ndarray) -> SERModel:
    params = dict(model.params)
    params.update(updates)
    return replace(model, params=params)
