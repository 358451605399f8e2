"""Top-k gated mixture-of-experts feed-forward layer with SwiGLU experts.

Forward: a bias-free linear router produces gate scores, a row softmax turns
them into routing probabilities, each token keeps its k most probable experts
and mixes their outputs with the kept probabilities renormalised to sum to one.

The auxiliary balance loss is ``(1/E) * sum_e f_e * p_e`` where ``f_e`` is the
fraction of tokens that kept expert ``e`` and ``p_e`` is its mean routing
probability. In the backward pass the top-k choice (and hence ``f``) is held
constant; gradient reaches the router through the kept mixture weights and
through ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, InputError, ShapeError
from .numerics import Matrix, matmul, seeded_rng, silu, silu_grad, softmax_rows


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int = 4
    top_k: int = 2
    model_dim: int = 32
    expert_hidden: int | None = None  # None -> 4 * model_dim
    alpha: float = 0.01

    def __post_init__(self):
        if self.expert_hidden is None:
            object.__setattr__(self, "expert_hidden", 4 * self.model_dim)
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1", "num_experts")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}", "top_k")
        if self.model_dim < 1:
            raise ConfigError("model_dim must be >= 1", "model_dim")
        if self.expert_hidden < 1:
            raise ConfigError("expert_hidden must be >= 1", "expert_hidden")
        if not self.alpha >= 0:
            raise ConfigError("alpha must be nonnegative", "alpha")


@dataclass
class ExpertParams:
    w_gate: Matrix  # d x h
    w_up: Matrix  # d x h
    w_down: Matrix  # h x d

    def tensors(self) -> dict[str, Matrix]:
        return {"w_gate": self.w_gate, "w_up": self.w_up, "w_down": self.w_down}


@dataclass
class MoEParams:
    w_router: Matrix  # d x E
    experts: list[ExpertParams]
    # bumped on every in-place update so stale caches can be detected
    version: int = 0

    def named_tensors(self) -> dict[str, Matrix]:
        out = {"w_router": self.w_router}
        for i, e in enumerate(self.experts):
            for k, v in e.tensors().items():
                out[f"experts.{i}.{k}"] = v
        return out

    def check(self, cfg: MoEConfig) -> None:
        d, h, n = cfg.model_dim, cfg.expert_hidden, cfg.num_experts
        if self.w_router.shape != (d, n):
            raise ShapeError(f"w_router must be {d}x{n}, got {self.w_router.shape}")
        if len(self.experts) != n:
            raise ShapeError(f"expected {n} experts, got {len(self.experts)}")
        for e in self.experts:
            if e.w_gate.shape != (d, h) or e.w_up.shape != (d, h) or e.w_down.shape != (h, d):
                raise ShapeError("expert weight shapes do not match the config")


@dataclass(frozen=True)
class RoutingDecision:
    probs: np.ndarray  # length E, sums to 1
    selected: tuple[int, ...]  # k distinct experts, most probable first
    weights: tuple[float, ...]  # renormalised over `selected`


@dataclass(frozen=True)
class LoadBalanceStats:
    f: np.ndarray
    p: np.ndarray
    loss: float


@dataclass
class MoECache:
    params: MoEParams
    params_version: int
    h_in: Matrix
    probs: Matrix  # T x E
    weights: Matrix  # T x E, zero outside the selected set
    selected_mask: np.ndarray  # T x E bool
    expert_tokens: dict[int, np.ndarray] = field(default_factory=dict)
    expert_out: dict[int, Matrix] = field(default_factory=dict)
    expert_cache: dict[int, tuple] = field(default_factory=dict)
    f: np.ndarray | None = None


def init_moe_params(cfg: MoEConfig, rng: np.random.Generator) -> MoEParams:
    d, h = cfg.model_dim, cfg.expert_hidden
    scale = 1.0 / np.sqrt(d)
    w_router = rng.standard_normal((d, cfg.num_experts)) * scale
    experts = []
    for _ in range(cfg.num_experts):
        experts.append(
            ExpertParams(
                w_gate=rng.standard_normal((d, h)) * scale,
                w_up=rng.standard_normal((d, h)) * scale,
                w_down=rng.standard_normal((h, d)) * scale,
            )
        )
    return MoEParams(w_router=w_router, experts=experts)


def random_moe_params(cfg: MoEConfig, seed: int) -> MoEParams:
    return init_moe_params(cfg, seeded_rng(seed))


def gate_scores(h_in: Matrix, params: MoEParams) -> Matrix:
    return matmul(h_in, params.w_router)


def _route_arrays(g: Matrix, k: int, selected=None) -> tuple[Matrix, np.ndarray, Matrix]:
    n_tok, n_experts = g.shape
    if not 1 <= k <= n_experts:
        raise ConfigError(f"top_k must be in [1, {n_experts}], got {k}", "top_k")
    probs = softmax_rows(g)
    if selected is None:
        # stable sort on -p keeps ascending expert index among equal probabilities
        chosen = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    else:
        chosen = np.asarray(selected, dtype=np.int64).reshape(-1, k)
        if chosen.shape[0] != n_tok:
            raise ContractError("pinned selection does not match the number of tokens")
        if any(len(set(row)) != k for row in chosen.tolist()):
            raise ContractError("pinned selection must hold k distinct experts")
    kept = np.take_along_axis(probs, chosen, axis=1)
    return probs, chosen, kept / kept.sum(axis=1, keepdims=True)


def _decisions(probs: Matrix, chosen: np.ndarray, weights: Matrix) -> list[RoutingDecision]:
    return [
        RoutingDecision(probs=p, selected=tuple(c), weights=tuple(w))
        for p, c, w in zip(probs, chosen.tolist(), weights.tolist())
    ]


def route(
    g: Matrix, k: int, selected: Sequence[Sequence[int]] | None = None
) -> list[RoutingDecision]:
    """Softmax the gate scores and keep the top ``k`` experts per token.

    Ties go to the lower expert index. ``selected`` pins the chosen expert sets
    (finite-difference checks must not let a perturbation flip the choice).
    """
    return _decisions(*_route_arrays(g, k, selected))


def expert_forward(x: Matrix, e: ExpertParams) -> tuple[Matrix, tuple]:
    """SwiGLU feed-forward: ``(silu(x Wg) * (x Wu)) Wd``."""
    a = matmul(x, e.w_gate)
    b = matmul(x, e.w_up)
    s = silu(a)
    m = s * b
    y = matmul(m, e.w_down)
    return y, (x, a, b, s, m)


def expert_backward(dy: Matrix, e: ExpertParams, cache: tuple) -> dict[str, Matrix]:
    x, a, b, s, m = cache
    d_down = m.T @ dy
    dm = dy @ e.w_down.T
    da = dm * b * silu_grad(a)
    db = dm * s
    return {"w_gate": x.T @ da, "w_up": x.T @ db, "w_down": d_down}


def moe_forward(
    h_in: Matrix,
    params: MoEParams,
    cfg: MoEConfig,
    selected: Sequence[Sequence[int]] | None = None,
) -> tuple[Matrix, list[RoutingDecision], MoECache]:
    """Route every token and mix the outputs of its selected experts.

    Experts that no token selected are never evaluated.
    """
    if h_in.ndim != 2 or h_in.shape[1] != cfg.model_dim:
        raise ShapeError(f"MoE input must be T x {cfg.model_dim}, got {h_in.shape}")
    params.check(cfg)
    probs, chosen, kept = _route_arrays(gate_scores(h_in, params), cfg.top_k, selected)
    n_tok, n_exp = h_in.shape[0], cfg.num_experts
    weights = np.zeros((n_tok, n_exp))
    np.put_along_axis(weights, chosen, kept, axis=1)
    mask = np.zeros((n_tok, n_exp), dtype=bool)
    np.put_along_axis(mask, chosen, True, axis=1)
    decisions = _decisions(probs, chosen, kept)

    cache = MoECache(params, params.version, h_in, probs, weights, mask)
    y = np.zeros_like(h_in, dtype=np.float64)
    for e in range(n_exp):
        tokens = np.flatnonzero(mask[:, e])
        if tokens.size == 0:
            continue
        out, ecache = expert_forward(h_in[tokens], params.experts[e])
        y[tokens] += weights[tokens, e][:, None] * out
        cache.expert_tokens[e] = tokens
        cache.expert_out[e] = out
        cache.expert_cache[e] = ecache
    cache.f = mask.sum(axis=0) / max(n_tok, 1)
    return y, decisions, cache


def load_balance_loss(decisions: Sequence[RoutingDecision], num_experts: int, top_k: int) -> LoadBalanceStats:
    if not decisions:
        raise InputError("no tokens")
    if any(len(dec.selected) != top_k for dec in decisions):
        raise ContractError(f"every decision must select exactly {top_k} experts")
    n_tok = len(decisions)
    sel = np.array([dec.selected for dec in decisions], dtype=np.int64)
    f = np.bincount(sel.ravel(), minlength=num_experts) / n_tok
    p = np.stack([dec.probs for dec in decisions]).mean(axis=0)
    loss = float(np.sum(f * p) / num_experts)
    return LoadBalanceStats(f=f, p=p, loss=loss)


def moe_backward(upstream: Matrix, cache: MoECache, alpha: float) -> MoEParams:
    """Gradients of ``sum(upstream * y) + alpha * L_balance`` for every MoE tensor.

    Returned as an :class:`MoEParams` holding gradients in place of weights.
    """
    params = cache.params
    if params.version != cache.params_version:
        raise ContractError("MoE cache is stale: parameters changed after the forward pass")
    if upstream.shape != cache.h_in.shape:
        raise ContractError(f"upstream gradient {upstream.shape} does not match MoE output {cache.h_in.shape}")
    n_tok, n_exp = cache.probs.shape

    grads = [
        ExpertParams(np.zeros_like(e.w_gate), np.zeros_like(e.w_up), np.zeros_like(e.w_down))
        for e in params.experts
    ]
    d_weights = np.zeros((n_tok, n_exp))
    for e, tokens in cache.expert_tokens.items():
        up = upstream[tokens]
        d_weights[tokens, e] = np.sum(up * cache.expert_out[e], axis=1)
        dy = cache.weights[tokens, e][:, None] * up
        g = expert_backward(dy, params.experts[e], cache.expert_cache[e])
        grads[e] = ExpertParams(g["w_gate"], g["w_up"], g["w_down"])

    # kept weights are a softmax restricted to the selected scores
    w = cache.weights
    d_scores = w * (d_weights - np.sum(w * d_weights, axis=1, keepdims=True))

    if alpha != 0.0 and n_tok:
        # d L_balance / d r_{t,e} = f_e / (E T), then through the full softmax
        c = np.broadcast_to(alpha * cache.f / (n_exp * n_tok), cache.probs.shape)
        r = cache.probs
        d_scores = d_scores + r * (c - np.sum(r * c, axis=1, keepdims=True))

    d_router = cache.h_in.T @ d_scores
    return MoEParams(w_router=d_router, experts=grads)
