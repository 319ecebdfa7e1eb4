"""Aggregation of experts (checkpoint merging) and expert pruning."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .model import EXPERT, GATE, NON_EXPERT, ModelParams, Role, forward, teacher_forcing
from .routing import EVAL, RouterConfig
from .tensor import Tensor, no_grad

TOP_UTILIZATION = "top_utilization"
RANDOM = "random"

_EXPERT_NAME = re.compile(r"^(.*\.moe\.expert\.)(\d+)(\..*)$")


def _renamed(name: str, new_index: int) -> str:
    m = _EXPERT_NAME.match(name)
    return f"{m.group(1)}{new_index}{m.group(3)}"


def aoe_merge(a: ModelParams, b: ModelParams) -> ModelParams:
    """Average non-expert weights, concatenate gates (a's columns first), collect experts.

    The result has ``E_a + E_b`` experts; b's experts are renumbered from ``E_a``.
    """
    if a.arch.replace(num_experts=1) != b.arch.replace(num_experts=1):
        raise ValueError("checkpoints differ in more than their expert count")
    ea, eb = a.arch.num_experts, b.arch.num_experts
    tensors: dict[str, Tensor] = {}
    roles: dict[str, Role] = {}
    done: set[str] = set()
    for name, role in a.roles.items():
        ta = a.tensors[name]
        if role.kind == NON_EXPERT:
            tb = b.tensors[name]
            if ta.shape != tb.shape:
                raise ValueError(f"non-expert tensor {name} differs in shape")
            tensors[name] = Tensor((ta.data + tb.data) / 2.0, requires_grad=True)
            roles[name] = role
        elif role.kind == GATE:
            tensors[name] = Tensor(np.concatenate([ta.data, b.tensors[name].data], axis=1),
                                   requires_grad=True)
            roles[name] = role
        elif role.kind == EXPERT:
            stem = name[: name.index(".moe.expert.")]
            if stem not in done:
                # emit a's and b's experts for this layer together, in merged order
                done.add(stem)
                for src, offset in ((a, 0), (b, ea)):
                    for n, r in src.roles.items():
                        if r.kind == EXPERT and n.startswith(f"{stem}.moe.expert."):
                            new = _renamed(n, r.expert + offset)
                            tensors[new] = Tensor(src.tensors[n].data.copy(), requires_grad=True)
                            roles[new] = Role(EXPERT, r.layer, r.expert + offset)
    return ModelParams(a.arch.replace(num_experts=ea + eb), tensors, roles)


@dataclass
class UtilizationCounts:
    layers: list[str]
    counts: np.ndarray  # [num_layers, E]
    tokens_seen: np.ndarray  # [num_layers]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "expert", "count"])
            for name, row in zip(self.layers, self.counts):
                for e, c in enumerate(row):
                    w.writerow([name, e, int(c)])

    @classmethod
    def from_csv(cls, path) -> UtilizationCounts:
        rows: dict[str, dict[int, int]] = {}
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.setdefault(r["layer"], {})[int(r["expert"])] = int(r["count"])
        layers = list(rows)
        E = 1 + max(max(v) for v in rows.values())
        counts = np.zeros((len(layers), E), dtype=np.int64)
        for i, name in enumerate(layers):
            for e, c in rows[name].items():
                counts[i, e] = c
        return cls(layers, counts, counts.sum(axis=1))


def count_utilization(model: ModelParams, batches: Iterable[tuple[np.ndarray, np.ndarray]],
                      cfg: RouterConfig) -> UtilizationCounts:
    """Count argmax routing per expert per MoE layer over eval-phase forwards.

    ``batches`` yields ``(src, tgt)`` pairs of ``[B, L]`` id arrays (targets
    without BOS/EOS). Counting happens before capacity filtering.
    """
    layers = model.moe_prefixes()
    E = model.arch.num_experts
    counts = np.zeros((len(layers), E), dtype=np.int64)
    seen = np.zeros(len(layers), dtype=np.int64)
    V = model.arch.vocab
    with no_grad():
        for src, tgt in batches:
            src = np.atleast_2d(src)
            if src.max() >= V or np.max(tgt) >= V:
                raise ValueError(f"token id outside the checkpoint's vocabulary of {V}")
            dec_in, _ = teacher_forcing(tgt)
            _, _, decisions = forward(model, src, dec_in, cfg, EVAL)
            for name, dec in decisions:
                i = layers.index(name)
                counts[i] += np.bincount(dec.choice, minlength=E)
                seen[i] += dec.num_tokens
    return UtilizationCounts(layers, counts, seen)


def select_experts(num_experts: int, k: int, strategy: str, layers: list[str],
                   counts: UtilizationCounts | None = None, seed: int | None = None) -> dict[str, list[int]]:
    """Indices to keep per MoE layer, in ascending order."""
    if not 1 <= k <= num_experts:
        raise ValueError(f"k={k} outside [1, {num_experts}]")
    if strategy == TOP_UTILIZATION:
        if counts is None:
            raise ValueError("top-utilization pruning needs utilization counts")
        keep = {}
        for name in layers:
            row = counts.counts[counts.layers.index(name)]
            order = np.argsort(-row, kind="stable")  # ties go to the lower index
            keep[name] = sorted(int(i) for i in order[:k])
        return keep
    if strategy == RANDOM:
        chosen = sorted(int(i) for i in np.random.default_rng(seed).choice(num_experts, k, replace=False))
        return {name: chosen for name in layers}
    raise ValueError(f"unknown pruning strategy {strategy!r}")


def prune_experts(model: ModelParams, k: int, strategy: str = TOP_UTILIZATION,
                  counts: UtilizationCounts | None = None, seed: int | None = None) -> ModelParams:
    """Keep ``k`` experts (and their gate columns) per MoE layer; copy everything else."""
    layers = model.moe_prefixes()
    keep = select_experts(model.arch.num_experts, k, strategy, layers, counts, seed)
    tensors: dict[str, Tensor] = {}
    roles: dict[str, Role] = {}
    for name, role in model.roles.items():
        t = model.tensors[name]
        if role.kind == NON_EXPERT:
            tensors[name] = Tensor(t.data.copy(), requires_grad=True)
            roles[name] = role
        elif role.kind == GATE:
            kept = keep[name[: -len(".moe.gate")]]
            tensors[name] = Tensor(t.data[:, kept].copy(), requires_grad=True)
            roles[name] = role
        else:
            kept = keep[name[: name.index(".moe.expert.")]]
            if role.expert in kept:
                j = kept.index(role.expert)
                new = _renamed(name, j)
                tensors[new] = Tensor(t.data.copy(), requires_grad=True)
                roles[new] = Role(EXPERT, role.layer, j)
    return ModelParams(model.arch.replace(num_experts=k), tensors, roles)
