"""Top-1 gated expert routing with capacity limits.

Tokens arrive flattened to ``[T, d_model]``. The gate picks an expert per
token, an assignment algorithm hands out capacity slots (plain scan order,
per-group scan, or a random priority order), and dispatch/combine move token
rows into and out of a fixed-shape ``[E, capacity, d_model]`` buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DROPPED = -1

PLAIN = "plain"
GROUPED = "grouped"
RTS = "rts"
ASSIGNMENT_MODES = (PLAIN, GROUPED, RTS)

TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class RouterConfig:
    num_experts: int
    capacity_factor_train: float = 1.0
    capacity_factor_eval: float = 2.0
    jitter_eps: float = 0.01
    balance_coeff: float = 0.01
    assignment_mode: str = PLAIN
    group_count: int = 1
    top_k: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.capacity_factor_train <= 0 or self.capacity_factor_eval <= 0:
            raise ValueError("capacity factors must be positive")
        if self.balance_coeff < 0:
            raise ValueError("balance_coeff must be >= 0")
        if not 0 <= self.jitter_eps < 1:
            raise ValueError("jitter_eps must lie in [0, 1)")
        if self.assignment_mode not in ASSIGNMENT_MODES:
            raise ValueError(f"unknown assignment mode {self.assignment_mode!r}")
        if self.group_count < 1:
            raise ValueError("group_count must be >= 1")
        if self.top_k not in (1, 2) or self.top_k > self.num_experts:
            raise ValueError("top_k must be 1 or 2 and at most num_experts")

    def capacity_factor(self, phase: str) -> float:
        if phase == TRAIN:
            return self.capacity_factor_train
        if phase == EVAL:
            return self.capacity_factor_eval
        raise ValueError(f"unknown phase {phase!r}")


@dataclass
class RoutingDecision:
    """Per-token routing outcome.

    Arrays have shape ``[T, k]``: column 0 is the argmax expert, column 1 (top-2
    only) the runner-up. ``slot`` is ``DROPPED`` where the expert was full.
    """

    expert_id: np.ndarray
    slot: np.ndarray
    gate_prob: np.ndarray
    capacity: int
    num_experts: int

    @property
    def num_tokens(self) -> int:
        return self.expert_id.shape[0]

    @property
    def choice(self) -> np.ndarray:
        return self.expert_id[:, 0]

    @property
    def kept(self) -> np.ndarray:
        return self.slot != DROPPED

    @property
    def dropped(self) -> np.ndarray:
        """Tokens that found no slot with any of their experts."""
        return ~self.kept.any(axis=1)

    def kept_per_expert(self) -> np.ndarray:
        return np.bincount(self.expert_id[self.kept], minlength=self.num_experts)


@dataclass
class DispatchBuffer:
    data: Tensor
    occupancy: np.ndarray = field(repr=False)


def capacity(tokens: int, cfg: RouterConfig, phase: str) -> int:
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    raw = cfg.capacity_factor(phase) * tokens / cfg.num_experts
    # round() guards against float fuzz like 8.000000000000002
    return max(1, math.ceil(round(raw, 9)))


# ------------------------------------------------------------------ gating


def gate_forward(x: Tensor, gate_w: Tensor, cfg: RouterConfig, phase: str,
                 rng: np.random.Generator | None = None):
    """Return ``(probs [T, E], choice [T, k], gate_prob [T, k])``.

    In the train phase the gate input is multiplied by uniform noise in
    ``[1 - jitter_eps, 1 + jitter_eps]``. Argmax ties go to the lowest index.
    For top-2 the two gate probabilities are renormalized to sum to one.
    """
    if x.data.ndim != 2 or gate_w.shape != (x.shape[1], cfg.num_experts):
        raise ShapeError(f"gate shapes do not conform: x {x.shape}, gate {gate_w.shape}")
    h = x
    if phase == TRAIN and cfg.jitter_eps > 0:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        noise = rng.uniform(1.0 - cfg.jitter_eps, 1.0 + cfg.jitter_eps, size=x.shape)
        h = T.mul(x, Tensor(noise))
    probs = T.softmax(T.matmul(h, gate_w), axis=-1)
    k = cfg.top_k
    choice = np.argsort(-probs.data, axis=-1, kind="stable")[:, :k]
    gate_prob = T.take_along_last(probs, choice)
    if k > 1:
        gate_prob = T.div(gate_prob, T.sum_(gate_prob, axis=-1, keepdims=True))
    return probs, choice, gate_prob


# -------------------------------------------------------------- assignment


def _as_2d(choice) -> np.ndarray:
    c = np.asarray(choice, dtype=np.int64)
    return c[:, None] if c.ndim == 1 else c


def _scan(choice: np.ndarray, cap: int, order: np.ndarray, num_experts: int) -> np.ndarray:
    """Hand out slots by visiting tokens in ``order``; column j after column j-1."""
    slot = np.full(choice.shape, DROPPED, dtype=np.int64)
    fill = np.zeros(num_experts, dtype=np.int64)
    for j in range(choice.shape[1]):
        ch = choice[order, j]
        by_expert = np.argsort(ch, kind="stable")
        sorted_e = ch[by_expert]
        rank = np.empty(len(ch), dtype=np.int64)
        rank[by_expert] = np.arange(len(ch)) - np.searchsorted(sorted_e, sorted_e, side="left")
        pos = fill[ch] + rank
        keep = pos < cap
        slot[order[keep], j] = pos[keep]
        fill += np.bincount(ch[keep], minlength=num_experts)
    return slot


def _decision(choice, slot, cap, num_experts, gate_prob) -> RoutingDecision:
    if gate_prob is None:
        gate_prob = np.ones(choice.shape)
    gate_prob = np.asarray(gate_prob, dtype=np.float64).reshape(choice.shape)
    return RoutingDecision(choice, slot, gate_prob, cap, num_experts)


def _num_experts(choice: np.ndarray, num_experts: int | None) -> int:
    if choice.size and choice.min() < 0:
        raise ValueError("expert ids must be non-negative")
    inferred = int(choice.max()) + 1 if choice.size else 1
    if num_experts is None:
        return inferred
    if inferred > num_experts:
        raise ValueError(f"expert id {inferred - 1} out of range for {num_experts} experts")
    return num_experts


def assign_plain(choice, cap: int, num_experts: int | None = None,
                 gate_prob=None) -> RoutingDecision:
    """Scan tokens in flattened order; overflow at the tail is dropped."""
    c = _as_2d(choice)
    E = _num_experts(c, num_experts)
    slot = _scan(c, cap, np.arange(len(c)), E)
    return _decision(c, slot, cap, E, gate_prob)


def assign_grouped(choice, cap: int, group_count: int, num_experts: int | None = None,
                   gate_prob=None) -> RoutingDecision:
    """Split tokens into contiguous groups, each with ``ceil(cap / G)`` slots per expert.

    Group ``g`` owns slots ``[g * cap_g, (g + 1) * cap_g)`` of each expert, so the
    decision's capacity is ``G * cap_g`` (equal to ``cap`` when G divides it).
    """
    c = _as_2d(choice)
    n = len(c)
    if group_count < 1 or n % group_count:
        raise ValueError(f"group_count {group_count} does not divide {n} tokens")
    E = _num_experts(c, num_experts)
    per_group = math.ceil(cap / group_count)
    size = n // group_count
    slot = np.full(c.shape, DROPPED, dtype=np.int64)
    for g in range(group_count):
        part = slice(g * size, (g + 1) * size)
        local = _scan(c[part], per_group, np.arange(size), E)
        slot[part] = np.where(local == DROPPED, DROPPED, local + g * per_group)
    return _decision(c, slot, per_group * group_count, E, gate_prob)


def assign_rts(choice, cap: int, rng_seed=None, num_experts: int | None = None,
               gate_prob=None) -> RoutingDecision:
    """Plain assignment over a uniformly random token priority order.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    c = _as_2d(choice)
    E = _num_experts(c, num_experts)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    slot = _scan(c, cap, rng.permutation(len(c)), E)
    return _decision(c, slot, cap, E, gate_prob)


def assign(choice, cap: int, cfg: RouterConfig, phase: str,
           rng: np.random.Generator | None = None, gate_prob=None) -> RoutingDecision:
    """Dispatch to the configured algorithm; evaluation always scans plainly."""
    mode = cfg.assignment_mode if phase == TRAIN else PLAIN
    E = cfg.num_experts
    if mode == GROUPED:
        return assign_grouped(choice, cap, cfg.group_count, E, gate_prob)
    if mode == RTS:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        return assign_rts(choice, cap, rng, E, gate_prob)
    return assign_plain(choice, cap, E, gate_prob)


# -------------------------------------------------------- dispatch / combine


def _kept_coords(decision: RoutingDecision):
    rows, cols = np.nonzero(decision.kept)
    e = decision.expert_id[rows, cols]
    s = decision.slot[rows, cols]
    if s.size and (s.max() >= decision.capacity or s.min() < 0):
        raise IndexError("slot index out of range for the decision's capacity")
    return rows, cols, e, s


def dispatch(x: Tensor, decision: RoutingDecision) -> DispatchBuffer:
    """Scatter kept token rows into a zero ``[E, capacity, d]`` buffer."""
    if x.data.ndim != 2 or x.shape[0] != decision.num_tokens:
        raise ShapeError(f"x {x.shape} does not match a decision over {decision.num_tokens} tokens")
    rows, _, e, s = _kept_coords(decision)
    E, cap, d = decision.num_experts, decision.capacity, x.shape[1]
    buf = np.zeros((E, cap, d))
    buf[e, s] = x.data[rows]
    occupancy = np.zeros((E, cap), dtype=bool)
    occupancy[e, s] = True

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g[e, s])
        x._accumulate(gx)

    return DispatchBuffer(T._make(buf, (x,), backward), occupancy)


def combine(buffer_out: Tensor, decision: RoutingDecision, residual: Tensor,
            weights: Tensor | None = None) -> Tensor:
    """Gather expert outputs back to token order.

    Kept tokens get ``sum_j weight[t, j] * out[e_j, slot_j]``; tokens dropped by
    every expert get ``residual[t]`` unchanged. ``weights`` defaults to the
    decision's gate probabilities (treated as constants).
    """
    E, cap = decision.num_experts, decision.capacity
    if buffer_out.data.ndim != 3 or buffer_out.shape[:2] != (E, cap):
        raise ShapeError(f"expert output {buffer_out.shape} does not match [{E}, {cap}, d]")
    if residual.shape != (decision.num_tokens, buffer_out.shape[2]):
        raise ShapeError(f"residual {residual.shape} does not match the decision")
    if weights is None:
        weights = Tensor(decision.gate_prob)
    w = weights.data.reshape(decision.expert_id.shape)
    rows, cols, e, s = _kept_coords(decision)
    dropped = decision.dropped
    picked = buffer_out.data[e, s]
    out = np.zeros(residual.shape)
    np.add.at(out, rows, w[rows, cols][:, None] * picked)
    out[dropped] = residual.data[dropped]

    def backward(g):
        if buffer_out.requires_grad:
            gb = np.zeros_like(buffer_out.data)
            np.add.at(gb, (e, s), w[rows, cols][:, None] * g[rows])
            buffer_out._accumulate(gb)
        if weights.requires_grad:
            gw = np.zeros(decision.expert_id.shape)
            gw[rows, cols] = (g[rows] * picked).sum(axis=1)
            weights._accumulate(gw.reshape(weights.shape))
        if residual.requires_grad:
            gr = np.zeros_like(residual.data)
            gr[dropped] = g[dropped]
            residual._accumulate(gr)

    return T._make(out, (buffer_out, residual, weights), backward)


# ----------------------------------------------------------------- experts


@dataclass
class MoeLayerParams:
    """Gate ``[d, E]`` plus per-expert two-layer FFN weights."""

    gate: Tensor
    w1: list[Tensor]
    b1: list[Tensor]
    w2: list[Tensor]
    b2: list[Tensor]

    @property
    def num_experts(self) -> int:
        return len(self.w1)

    def tensors(self) -> list[Tensor]:
        return [self.gate, *self.w1, *self.b1, *self.w2, *self.b2]


def expert_ffn(buf: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Batched ``relu(buf @ w1 + b1) @ w2 + b2`` over the leading expert axis."""
    n, f, d = w1.shape[0], w1.shape[2], w2.shape[2]
    h = T.relu(T.add(T.matmul(buf, w1), T.reshape(b1, (n, 1, f))))
    return T.add(T.matmul(h, w2), T.reshape(b2, (n, 1, d)))


def stacked_experts(layer: MoeLayerParams):
    return (T.stack(layer.w1), T.stack(layer.b1), T.stack(layer.w2), T.stack(layer.b2))


# ----------------------------------------------------------------- losses


def balance_loss(probs: Tensor, decision: RoutingDecision, alpha: float = 0.01) -> Tensor:
    """``alpha * E * sum_e f_e * mean_prob_e`` with the argmax fractions ``f`` held constant."""
    if not np.allclose(probs.data.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise ValueError("probability rows must sum to 1")
    n, E = probs.shape
    frac = np.bincount(decision.choice, minlength=E) / n
    mean_prob = T.mean(probs, axis=0)
    return T.scale(T.sum_(T.mul(mean_prob, Tensor(frac))), alpha * E)


# ------------------------------------------------------------------ layer


def route(x: Tensor, gate_w: Tensor, cfg: RouterConfig, phase: str,
          rng: np.random.Generator | None = None):
    """Gate and assign; returns ``(probs, gate_prob, decision)``."""
    probs, choice, gate_prob = gate_forward(x, gate_w, cfg, phase, rng)
    cap = capacity(x.shape[0], cfg, phase)
    decision = assign(choice, cap, cfg, phase, rng, gate_prob.data)
    return probs, gate_prob, decision


def moe_layer_forward(x: Tensor, layer: MoeLayerParams, cfg: RouterConfig, phase: str,
                      rng: np.random.Generator | None = None,
                      residual: Tensor | None = None):
    """Gate, assign, dispatch, run experts, combine.

    Returns ``(y, aux_loss, decision)``. Dropped tokens come out as ``residual``,
    which defaults to ``x`` itself.
    """
    if layer.num_experts != cfg.num_experts:
        raise ShapeError(f"layer has {layer.num_experts} experts, config says {cfg.num_experts}")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    probs, gate_prob, decision = route(x, layer.gate, cfg, phase, rng)
    buf = dispatch(x, decision)
    out = expert_ffn(buf.data, *stacked_experts(layer))
    y = combine(out, decision, x if residual is None else residual, gate_prob)
    aux = balance_loss(probs, decision, cfg.balance_coeff)
    return y, aux, decision
