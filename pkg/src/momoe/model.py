"""Frozen toy causal decoder whose last feed-forward is the trainable MoE layer.

Layout per block (pre-norm)::

    x = x + attention(rmsnorm(x))
    x = x + swiglu(rmsnorm(x))          # standard blocks
    x = x + moe(x)                      # final block

followed by a final rmsnorm and a linear LM head. Only the MoE tensors are
trainable, so backward runs along head -> final norm -> residual -> MoE and
nothing upstream of the MoE input is ever differentiated.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import moe as moe_mod
from .data import LABELS, PAD, VOCAB_SIZE, SentimentLabel, SftExample, answer_mask_positions, byte_tokenize
from .errors import ConfigError, InputError, ShapeError, TrainingError
from .moe import LoadBalanceStats, MoECache, MoEConfig, MoEParams, RoutingDecision
from .numerics import cross_entropy, log_softmax_rows, rmsnorm, rmsnorm_backward, seeded_rng, silu, softmax_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    model_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 256
    moe: MoEConfig | None = None
    init_seed: int = 0

    def __post_init__(self):
        if self.moe is None:
            object.__setattr__(self, "moe", MoEConfig(model_dim=self.model_dim))
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4", "vocab_size")
        if self.model_dim < 1:
            raise ConfigError("model_dim must be >= 1", "model_dim")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}", "num_heads"
            )
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1", "num_layers")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2", "max_seq_len")
        if self.moe.model_dim != self.model_dim:
            raise ConfigError("moe.model_dim must equal model_dim", "moe.model_dim")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        moe_d = d.pop("moe", None)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model field {sorted(unknown)[0]!r}", f"model.{sorted(unknown)[0]}")
        dim = d.get("model_dim", cls.model_dim)
        if moe_d is not None:
            moe_d = dict(moe_d)
            moe_d.setdefault("model_dim", dim)
            bad = set(moe_d) - {f for f in MoEConfig.__dataclass_fields__}
            if bad:
                raise ConfigError(f"unknown moe field {sorted(bad)[0]!r}", f"model.moe.{sorted(bad)[0]}")
            d["moe"] = MoEConfig(**moe_d)
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 1
    alpha: float = 0.01
    shuffle_seed: int = 0
    max_steps: int | None = None  # when set, cycle epochs until this many steps

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0", "learning_rate")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        if not self.alpha >= 0:
            raise ConfigError("alpha must be nonnegative", "alpha")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0", "max_steps")


@dataclass
class TokenBatch:
    """``loss_mask[b, i] == 1`` means position ``i`` is trained to predict ``ids[b, i + 1]``."""

    ids: np.ndarray  # B x L int64
    loss_mask: np.ndarray  # B x L 0/1

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.int64)
        if self.ids.ndim != 2 or self.ids.shape != self.loss_mask.shape:
            raise ShapeError("ids and loss_mask must both be B x L")
        if np.any(self.loss_mask[:, -1] != 0):
            raise InputError("the last position of every sequence has no next-token target")

    @property
    def targets(self) -> np.ndarray:
        t = np.full_like(self.ids, PAD)
        t[:, :-1] = self.ids[:, 1:]
        return t


def make_batch(examples: Sequence[SftExample], pad_to: int | None = None) -> TokenBatch:
    """Pad rendered examples into a batch with answer-only loss masking."""
    seqs = [ex.token_ids() for ex in examples]
    length = max(len(s) for s in seqs) if pad_to is None else pad_to
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros_like(ids)
    for b, (s, ex) in enumerate(zip(seqs, examples)):
        if len(s) > length:
            raise InputError(f"sequence of {len(s)} tokens exceeds batch length {length}")
        ids[b, : len(s)] = s
        mask[b, answer_mask_positions(ex)] = 1
    return TokenBatch(ids, mask)


@dataclass
class Model:
    config: ModelConfig
    frozen: dict[str, np.ndarray]
    moe: MoEParams

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray, bool]]:
        for name, t in self.frozen.items():
            yield name, t, False
        for name, t in self.moe.named_tensors().items():
            yield f"moe.{name}", t, True


@dataclass
class ForwardCache:
    x_attn: np.ndarray  # (B*L) x d, MoE input
    moe_cache: MoECache
    x_final: np.ndarray  # (B*L) x d
    shape: tuple[int, int]


@dataclass(frozen=True)
class LossRecord:
    task: float
    balance: float
    total: float


def build_model(cfg: ModelConfig) -> Model:
    rng = seeded_rng(cfg.init_seed)
    d, h = cfg.model_dim, 4 * cfg.model_dim
    scale = 1.0 / math.sqrt(d)

    def w(*shape):
        return rng.standard_normal(shape) * scale

    frozen = {"tok_emb": w(cfg.vocab_size, d), "pos_emb": w(cfg.max_seq_len, d)}
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        frozen[p + "attn_norm"] = np.ones((1, d))
        for name in ("wq", "wk", "wv", "wo"):
            frozen[p + name] = w(d, d)
        if i < cfg.num_layers - 1:
            frozen[p + "ffn_norm"] = np.ones((1, d))
            frozen[p + "w_gate"] = w(d, h)
            frozen[p + "w_up"] = w(d, h)
            frozen[p + "w_down"] = w(h, d)
    frozen["final_norm"] = np.ones((1, d))
    frozen["head"] = w(d, cfg.vocab_size)
    return Model(cfg, frozen, moe_mod.init_moe_params(cfg.moe, rng))


def _attention(x: np.ndarray, m: Model, prefix: str) -> np.ndarray:
    """Causal multi-head self-attention over x of shape B x L x d."""
    cfg = m.config
    f = m.frozen
    bsz, length, d = x.shape
    nh, dh = cfg.num_heads, d // cfg.num_heads
    xn = rmsnorm(x.reshape(-1, d), f[prefix + "attn_norm"]).reshape(bsz, length, d)

    def heads(t):
        return t.reshape(bsz, length, nh, dh).transpose(0, 2, 1, 3)

    q, k, v = (heads(xn @ f[prefix + n]) for n in ("wq", "wk", "wv"))
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    future = np.triu(np.ones((length, length), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    att = softmax_rows(scores)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, length, d)
    return out @ f[prefix + "wo"]


def _ffn(x: np.ndarray, m: Model, prefix: str) -> np.ndarray:
    f = m.frozen
    d = x.shape[-1]
    xn = rmsnorm(x.reshape(-1, d), f[prefix + "ffn_norm"]).reshape(x.shape)
    return (silu(xn @ f[prefix + "w_gate"]) * (xn @ f[prefix + "w_up"])) @ f[prefix + "w_down"]


def backbone(m: Model, ids: np.ndarray) -> np.ndarray:
    """Frozen part of the network: returns the MoE input, shape (B*L) x d."""
    cfg = m.config
    bsz, length = ids.shape
    if length > cfg.max_seq_len:
        raise InputError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise InputError("token id outside the vocabulary")
    x = m.frozen["tok_emb"][ids] + m.frozen["pos_emb"][:length][None]
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        x = x + _attention(x, m, p)
        if i < cfg.num_layers - 1:
            x = x + _ffn(x, m, p)
    return x.reshape(bsz * length, cfg.model_dim)


def _head(m: Model, x_attn: np.ndarray, selected=None):
    y, decisions, mcache = moe_mod.moe_forward(x_attn, m.moe, m.config.moe, selected)
    x_final = y + x_attn
    logits = rmsnorm(x_final, m.frozen["final_norm"]) @ m.frozen["head"]
    return logits, decisions, mcache, x_final


def forward(m: Model, batch: TokenBatch | np.ndarray, selected=None, x_attn: np.ndarray | None = None):
    """Returns ``(logits B x L x V, routing decisions for all B*L tokens, cache)``.

    ``x_attn`` may carry precomputed backbone features for ``batch`` (see
    :class:`FeatureCache`); the backbone is frozen so they never go stale.
    """
    ids = batch.ids if isinstance(batch, TokenBatch) else np.asarray(batch, dtype=np.int64)
    bsz, length = ids.shape
    if x_attn is None:
        x_attn = backbone(m, ids)
    elif x_attn.shape != (bsz * length, m.config.model_dim):
        raise ShapeError("precomputed features do not match the batch")
    logits, decisions, mcache, x_final = _head(m, x_attn, selected)
    cache = ForwardCache(x_attn, mcache, x_final, (bsz, length))
    return logits.reshape(bsz, length, -1), decisions, cache


def balance_stats(m: Model, decisions: Sequence[RoutingDecision]) -> LoadBalanceStats:
    return moe_mod.load_balance_loss(decisions, m.config.moe.num_experts, m.config.moe.top_k)


def task_loss(logits: np.ndarray, batch: TokenBatch) -> tuple[float, np.ndarray]:
    vocab = logits.shape[-1]
    return cross_entropy(logits.reshape(-1, vocab), batch.targets.reshape(-1), batch.loss_mask.reshape(-1))


def total_loss(logits: np.ndarray, batch: TokenBatch, stats: LoadBalanceStats, alpha: float) -> float:
    ce, _ = task_loss(logits, batch)
    return ce + alpha * stats.loss


def loss_and_grads(
    m: Model, batch: TokenBatch, alpha: float, x_attn: np.ndarray | None = None
) -> tuple[LossRecord, MoEParams]:
    logits, decisions, cache = forward(m, batch, x_attn=x_attn)
    stats = balance_stats(m, decisions)
    ce, dlogits = task_loss(logits, batch)
    record = LossRecord(task=ce, balance=stats.loss, total=ce + alpha * stats.loss)
    if not all(math.isfinite(v) for v in (record.task, record.balance, record.total)):
        raise TrainingError(f"non-finite loss: task={record.task} balance={record.balance}")
    dnorm = dlogits @ m.frozen["head"].T
    dx_final = rmsnorm_backward(dnorm, cache.x_final, m.frozen["final_norm"])
    grads = moe_mod.moe_backward(dx_final, cache.moe_cache, alpha)
    return record, grads


def apply_sgd(params: MoEParams, grads: MoEParams, lr: float) -> None:
    named_g = grads.named_tensors()
    for name, t in params.named_tensors().items():
        t -= lr * named_g[name]
    params.version += 1


def train_step(m: Model, batch: TokenBatch, tc: TrainConfig, x_attn: np.ndarray | None = None) -> LossRecord:
    record, grads = loss_and_grads(m, batch, tc.alpha, x_attn)
    apply_sgd(m.moe, grads, tc.learning_rate)
    return record


class FeatureCache:
    """Backbone outputs per example, computed once.

    Causality means a position's features depend only on the tokens at or
    before it, so each example is run once padded to the longest example and
    sliced to whatever batch length it later lands in.
    """

    def __init__(self, m: Model, examples: Sequence[SftExample], chunk: int = 64):
        self.length = max(len(ex.token_ids()) for ex in examples)
        if self.length > m.config.max_seq_len:
            raise InputError(f"an example has {self.length} tokens, max_seq_len is {m.config.max_seq_len}")
        d = m.config.model_dim
        self._index = {id(ex): i for i, ex in enumerate(examples)}
        self._feats = np.empty((len(examples), self.length, d))
        for start in range(0, len(examples), chunk):
            part = examples[start : start + chunk]
            ids = make_batch(part, pad_to=self.length).ids
            self._feats[start : start + len(part)] = backbone(m, ids).reshape(len(part), self.length, d)

    def batch_features(self, chunk: Sequence[SftExample], length: int) -> np.ndarray:
        rows = [self._index[id(ex)] for ex in chunk]
        return self._feats[rows, :length].reshape(len(rows) * length, -1)


def iter_batches(examples: Sequence[SftExample], tc: TrainConfig) -> Iterator[list[SftExample]]:
    rng = seeded_rng(tc.shuffle_seed)
    steps = 0
    epoch = 0
    while True:
        order = rng.permutation(len(examples))
        for start in range(0, len(order), tc.batch_size):
            if tc.max_steps is not None and steps >= tc.max_steps:
                return
            yield [examples[i] for i in order[start : start + tc.batch_size]]
            steps += 1
        epoch += 1
        if tc.max_steps is None and epoch >= tc.epochs:
            return


def train(
    m: Model,
    examples: Sequence[SftExample],
    tc: TrainConfig,
    on_step: Callable[[int, LossRecord], None] | None = None,
) -> list[LossRecord]:
    if not examples:
        raise InputError("no training examples")
    feats = FeatureCache(m, examples)
    history = []
    for step, chunk in enumerate(iter_batches(examples, tc)):
        batch = make_batch(chunk)
        rec = train_step(m, batch, tc, feats.batch_features(chunk, batch.ids.shape[1]))
        history.append(rec)
        if on_step is not None:
            on_step(step, rec)
        log.debug("step %d task=%.5f balance=%.5f", step, rec.task, rec.balance)
    return history


def gradient_errors(
    m: Model, batch: TokenBatch, eps: float = 1e-5, alpha: float | None = None, floor: float = 1e-6
) -> dict[str, float]:
    """Per-tensor max relative error between analytic and central-difference gradients.

    Top-k selections are pinned to those of the unperturbed forward. Relative
    error is ``|a - n| / max(|a|, |n|, floor)`` so entries that are numerically
    zero compare absolutely.
    """
    alpha = m.config.moe.alpha if alpha is None else alpha
    _, grads = loss_and_grads(m, batch, alpha)
    x_attn = backbone(m, batch.ids)
    _, decisions, _, _ = _head(m, x_attn)
    pinned = [dec.selected for dec in decisions]

    def loss() -> float:
        logits, decs, _, _ = _head(m, x_attn, pinned)
        stats = balance_stats(m, decs)
        return total_loss(logits, batch, stats, alpha)

    analytic = grads.named_tensors()
    errors = {}
    for name, t in m.moe.named_tensors().items():
        a = analytic[name]
        worst = 0.0
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + eps
            lp = loss()
            t[idx] = orig - eps
            lm = loss()
            t[idx] = orig
            num = (lp - lm) / (2 * eps)
            err = abs(a[idx] - num) / max(abs(a[idx]), abs(num), floor)
            worst = max(worst, err)
        errors[f"moe.{name}"] = worst
    return errors


def gradient_check(m: Model, batch: TokenBatch, eps: float = 1e-5, alpha: float | None = None) -> float:
    return max(gradient_errors(m, batch, eps, alpha).values())


def continuation_logprobs(m: Model, prompt: str, continuations: Sequence[str]) -> list[float]:
    """Total log-probability of each continuation's tokens given ``prompt``."""
    n_prompt = 1 + len(prompt.encode("utf-8"))
    seqs = []
    for cont in continuations:
        ids = byte_tokenize(prompt + cont)[:-1]  # drop EOS
        if len(ids) > m.config.max_seq_len:
            raise InputError(f"prompt plus continuation is {len(ids)} tokens, max_seq_len is {m.config.max_seq_len}")
        seqs.append(ids)
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
    logits, _, _ = forward(m, ids)
    out = []
    for b, s in enumerate(seqs):
        pos = np.arange(n_prompt - 1, len(s) - 1)
        logp = log_softmax_rows(logits[b, pos])
        out.append(float(logp[np.arange(pos.size), np.asarray(s)[pos + 1]].sum()))
    return out


def pick_label(scores: dict[SentimentLabel, float]) -> SentimentLabel:
    best = max(scores.values())
    winners = [lab for lab, s in scores.items() if s == best]
    if len(winners) > 1:
        return SentimentLabel.NEUTRAL
    return winners[0]


def score_labels(m: Model, prompt_text: str) -> tuple[SentimentLabel, dict[SentimentLabel, float]]:
    scores = dict(zip(LABELS, continuation_logprobs(m, prompt_text, [f" {lab.value}" for lab in LABELS])))
    return pick_label(scores), scores


def save_model(m: Model, path: str | Path) -> None:
    arrays = {f"frozen/{k}": v for k, v in m.frozen.items()}
    arrays.update({f"moe/{k}": v for k, v in m.moe.named_tensors().items()})
    meta = {"format": "momoe-checkpoint-v1", "config": m.config.to_dict(), "moe_version": m.moe.version}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_model(path: str | Path) -> Model:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "momoe-checkpoint-v1":
            raise InputError(f"{path}: not a momoe checkpoint")
        cfg = ModelConfig.from_dict(meta["config"])
        frozen = {k[len("frozen/"):]: z[k].copy() for k in z.files if k.startswith("frozen/")}
        moe_t = {k[len("moe/"):]: z[k].copy() for k in z.files if k.startswith("moe/")}
    experts = [
        moe_mod.ExpertParams(moe_t[f"experts.{i}.w_gate"], moe_t[f"experts.{i}.w_up"], moe_t[f"experts.{i}.w_down"])
        for i in range(cfg.moe.num_experts)
    ]
    params = MoEParams(moe_t["w_router"], experts, version=int(meta.get("moe_version", 0)))
    params.check(cfg.moe)
    return Model(cfg, frozen, params)
