"""Expert-parallel execution on virtual ranks, and a per-GPU memory planner.

Memory accounting is the usual mixed-precision one: 2 bytes of fp16 weights,
2 bytes of fp16 gradients and 12 bytes of fp32 optimizer state (master copy,
momentum, variance) per parameter. Activations are not modelled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import routing
from .routing import MoeLayerParams, RouterConfig
from .tensor import Tensor, no_grad

PARAM_BYTES = 2
GRAD_BYTES = 2
OPTIM_BYTES = 12
STATE_BYTES = GRAD_BYTES + OPTIM_BYTES

GPU = "gpu"
CPU = "cpu"


class PlanError(ValueError):
    pass


class UniformShapeError(ValueError):
    """Ranks disagree on token count, so All-to-All buffers would differ in shape."""


@dataclass(frozen=True)
class ParallelPlan:
    world_size: int
    expert_parallel: int = 1
    model_parallel: int = 1
    zero_stage: int = 0
    offload: bool = False

    def __post_init__(self):
        n, ep, mp = self.world_size, self.expert_parallel, self.model_parallel
        if min(n, ep, mp) < 1:
            raise PlanError("all parallel degrees must be >= 1")
        if n % mp:
            raise PlanError(f"model_parallel {mp} does not divide world_size {n}")
        if mp * ep > n:
            raise PlanError(f"model_parallel * expert_parallel = {mp * ep} exceeds world_size {n}")
        if self.data_parallel % ep:
            raise PlanError(f"expert_parallel {ep} does not divide data_parallel {self.data_parallel}")
        if self.zero_stage not in (0, 2):
            raise PlanError("zero_stage must be 0 or 2")

    @property
    def data_parallel(self) -> int:
        return self.world_size // self.model_parallel


def load_plan(path) -> ParallelPlan:
    """Read a plan from JSON or ``key=value`` lines."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError:
        raw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, _, v = line.partition("=")
                raw[k.strip()] = v.strip()
    kw = {}
    for k, v in raw.items():
        if k not in ParallelPlan.__dataclass_fields__:
            raise PlanError(f"unknown plan key {k!r}")
        if k == "offload":
            kw[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
        else:
            kw[k] = int(v)
    return ParallelPlan(**kw)


@dataclass(frozen=True)
class MemoryEstimate:
    """Bytes held by one GPU (and its host) under a plan."""

    nonexpert_params: float
    expert_params: float
    gradients: float
    optimizer_states: float
    state_device: str = GPU

    @property
    def gpu_bytes(self) -> float:
        params = self.nonexpert_params + self.expert_params
        return params if self.state_device == CPU else params + self.gradients + self.optimizer_states

    @property
    def cpu_bytes(self) -> float:
        return self.gradients + self.optimizer_states if self.state_device == CPU else 0.0

    @property
    def total_bytes(self) -> float:
        return self.nonexpert_params + self.expert_params + self.gradients + self.optimizer_states

    @property
    def state_share(self) -> float:
        """Fraction of training state taken by gradients plus optimizer states."""
        return (self.gradients + self.optimizer_states) / self.total_bytes

    def rows(self) -> list[tuple[str, str, float]]:
        return [
            ("nonexpert_params", GPU, self.nonexpert_params),
            ("expert_params", GPU, self.expert_params),
            ("gradients", self.state_device, self.gradients),
            ("optimizer_states", self.state_device, self.optimizer_states),
        ]


def _per_gpu_params(plan: ParallelPlan, p_ne, p_e):
    return p_ne / plan.model_parallel, p_e / (plan.expert_parallel * plan.model_parallel)


def memory_per_gpu(plan: ParallelPlan, nonexpert_params, expert_params) -> MemoryEstimate:
    ne, ex = _per_gpu_params(plan, nonexpert_params, expert_params)
    ne_state, ex_state = ne, ex
    if plan.zero_stage == 2:
        ne_state = ne / plan.data_parallel
        ex_state = ex / (plan.data_parallel // plan.expert_parallel)
    state = ne_state + ex_state
    return MemoryEstimate(
        nonexpert_params=PARAM_BYTES * ne,
        expert_params=PARAM_BYTES * ex,
        gradients=GRAD_BYTES * state,
        optimizer_states=OPTIM_BYTES * state,
        state_device=CPU if plan.offload else GPU,
    )


def _gpu_bytes_exact(plan: ParallelPlan, p_ne: int, p_e: int) -> Fraction:
    """GPU bytes as an exact rational; mirrors :func:`memory_per_gpu`."""
    mp, ep, dp = plan.model_parallel, plan.expert_parallel, plan.data_parallel
    ne = Fraction(p_ne, mp)
    ex = Fraction(p_e, ep * mp)
    total = PARAM_BYTES * (ne + ex)
    if not plan.offload:
        if plan.zero_stage == 2:
            ne, ex = ne / dp, ex / (dp // ep)
        total += STATE_BYTES * (ne + ex)
    return total


@dataclass(frozen=True)
class ModelSizeLimit:
    num_experts: int
    total_params: int
    expert_params_bound: Fraction
    total_params_bound: Fraction


def max_model_size(plan: ParallelPlan, gpu_budget_bytes, nonexpert_params: int,
                   params_per_expert: int) -> ModelSizeLimit:
    """Largest expert count whose per-GPU footprint fits the budget.

    Also returns the continuous bound on total parameters (the budget filled
    exactly, expert count treated as real).
    """
    budget = Fraction(gpu_budget_bytes)
    base = _gpu_bytes_exact(plan, nonexpert_params, 0)
    if base >= budget:
        raise PlanError(f"base model alone needs {float(base):.4g} bytes per GPU, budget is {float(budget):.4g}")
    per_expert = _gpu_bytes_exact(plan, 0, params_per_expert)
    expert_bound = (budget - base) / per_expert * params_per_expert
    lo, hi = 0, 1
    while _gpu_bytes_exact(plan, nonexpert_params, hi * params_per_expert) <= budget:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _gpu_bytes_exact(plan, nonexpert_params, mid * params_per_expert) <= budget:
            lo = mid
        else:
            hi = mid
    return ModelSizeLimit(lo, nonexpert_params + lo * params_per_expert,
                          expert_bound, nonexpert_params + expert_bound)


def min_world_size(nonexpert_params: int, num_experts: int, params_per_expert: int,
                   gpu_budget_bytes, zero_stage: int = 2, offload: bool = False,
                   limit: int = 1 << 20) -> int:
    """Fewest GPUs (powers of two, ``ep = min(N, E)``) that hold a fixed model."""
    n = 1
    while n <= limit:
        ep = min(n, num_experts)
        while n % ep:
            ep -= 1
        plan = ParallelPlan(n, ep, 1, zero_stage, offload)
        if _gpu_bytes_exact(plan, nonexpert_params, num_experts * params_per_expert) <= gpu_budget_bytes:
            return n
        n *= 2
    raise PlanError("model does not fit within the GPU limit")


def format_memory_table(est: MemoryEstimate) -> str:
    lines = [f"{'category':<18} {'device':<6} {'GiB':>12}"]
    for name, dev, b in est.rows():
        lines.append(f"{name:<18} {dev:<6} {b / 2**30:>12.4f}")
    lines.append(f"{'gpu_total':<18} {GPU:<6} {est.gpu_bytes / 2**30:>12.4f}")
    lines.append(f"{'cpu_total':<18} {CPU:<6} {est.cpu_bytes / 2**30:>12.4f}")
    lines.append(f"{'grad+optim share':<25} {est.state_share:>12.4f}")
    return "\n".join(lines)


def memory_csv_rows(est: MemoryEstimate) -> list[list]:
    return [["category", "device", "bytes"], *[[n, d, repr(float(b))] for n, d, b in est.rows()]]


# ------------------------------------------------------- rank simulation


@dataclass
class VirtualRank:
    rank: int
    experts: list[int]
    tokens: np.ndarray | None = None


def make_ranks(num_experts: int, ep: int) -> list[VirtualRank]:
    if ep < 1 or num_experts % ep:
        raise PlanError(f"expert_parallel {ep} does not divide {num_experts} experts")
    per = num_experts // ep
    return [VirtualRank(r, list(range(r * per, (r + 1) * per))) for r in range(ep)]


def rank_rng(cfg: RouterConfig, rank: int) -> np.random.Generator:
    """Per-rank RNG stream used for jitter and random token priority."""
    return np.random.default_rng([cfg.rng_seed, rank])


@dataclass(frozen=True)
class Message:
    phase: str  # "dispatch" or "return"
    src: int
    dst: int
    experts: tuple[int, ...]
    elements: int


@dataclass
class SimulationResult:
    outputs: list[np.ndarray]
    aux_losses: list[float]
    decisions: list[routing.RoutingDecision]
    log: list[Message] = field(default_factory=list)


def simulate_expert_parallel_step(ranks: list[VirtualRank], xs: list[np.ndarray],
                                  layer: MoeLayerParams, cfg: RouterConfig,
                                  phase: str = routing.TRAIN) -> SimulationResult:
    """One MoE layer forward with experts sharded across ``ranks``.

    Every rank gates its own tokens, fills a ``[E, cap, d]`` dispatch buffer and
    exchanges expert slices with every other rank (ordered by sender, then
    expert). Owners run their experts, send results back, and each rank combines.
    """
    ep = len(ranks)
    E = layer.num_experts
    owner = {}
    for r in ranks:
        for e in r.experts:
            owner[e] = r.rank
    if sorted(owner) != list(range(E)) or any(len(r.experts) != E // ep for r in ranks):
        raise PlanError("expert shards must partition the experts evenly across ranks")
    counts = {x.shape[0] for x in xs}
    if len(xs) != ep:
        raise ValueError(f"{len(xs)} token blocks for {ep} ranks")
    if len(counts) != 1:
        raise UniformShapeError(f"per-rank token counts differ: {[x.shape[0] for x in xs]}")

    log: list[Message] = []
    with no_grad():
        decisions, gate_probs, bufs, auxes = [], [], [], []
        for r, x in zip(ranks, xs):
            xt = Tensor(x)
            probs, gate_prob, dec = routing.route(xt, layer.gate, cfg, phase, rank_rng(cfg, r.rank))
            bufs.append(routing.dispatch(xt, dec).data.data)
            decisions.append(dec)
            gate_probs.append(gate_prob)
            auxes.append(routing.balance_loss(probs, dec, cfg.balance_coeff).item())
            r.tokens = x
        shapes = {b.shape for b in bufs}
        if len(shapes) != 1:
            raise UniformShapeError(f"dispatch buffers differ in shape: {sorted(shapes)}")
        cap, d = bufs[0].shape[1:]

        # All-to-All: inbox[dst][src] is the slice of src's buffer for dst's experts
        inbox = [[None] * ep for _ in range(ep)]
        for src in ranks:
            for dst in ranks:
                block = bufs[src.rank][dst.experts]
                inbox[dst.rank][src.rank] = block
                if src.rank != dst.rank:
                    log.append(Message("dispatch", src.rank, dst.rank, tuple(dst.experts), block.size))

        outbox = [[None] * ep for _ in range(ep)]
        for dst in ranks:
            for j, e in enumerate(dst.experts):
                blocks = np.stack([inbox[dst.rank][s][j] for s in range(ep)])
                w = [np.stack([t.data] * ep) for t in
                     (layer.w1[e], layer.b1[e], layer.w2[e], layer.b2[e])]
                out = routing.expert_ffn(Tensor(blocks), *map(Tensor, w)).data
                for s in range(ep):
                    if outbox[dst.rank][s] is None:
                        outbox[dst.rank][s] = np.zeros((len(dst.experts), cap, d))
                    outbox[dst.rank][s][j] = out[s]

        outputs = []
        for src in ranks:
            full = np.zeros((E, cap, d))
            for dst in ranks:
                full[dst.experts] = outbox[dst.rank][src.rank]
                if src.rank != dst.rank:
                    log.append(Message("return", dst.rank, src.rank, tuple(dst.experts),
                                       outbox[dst.rank][src.rank].size))
            y = routing.combine(Tensor(full), decisions[src.rank], Tensor(xs[src.rank]),
                                gate_probs[src.rank])
            outputs.append(y.data)
    return SimulationResult(outputs, auxes, decisions, log)


def a2a_traffic(log: list[Message], ep: int, bytes_per_elem: int = 8) -> np.ndarray:
    """Bytes sent from rank i to rank j (both exchange directions), ``[ep, ep]``."""
    out = np.zeros((ep, ep), dtype=np.int64)
    for m in log:
        out[m.src, m.dst] += m.elements * bytes_per_elem
    return out


def expected_a2a_bytes(ep: int, num_experts: int, cap: int, d_model: int,
                       bytes_per_elem: int = 8) -> int:
    """Closed form: every rank ships ``cap * d`` rows for each remote expert, there and back."""
    remote = num_experts - num_experts // ep
    return 2 * ep * remote * cap * d_model * bytes_per_elem
