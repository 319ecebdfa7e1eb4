"""Pre-LN transformer encoder-decoder with MoE FFNs in every other layer.

Activations are kept time-major, ``[seq_len * batch, d_model]`` with row
``pos * batch + b``, so the MoE layers see tokens flattened position-first.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import routing
from . import tensor as T
from .routing import EVAL, MoeLayerParams, RouterConfig
from .tensor import Tensor, no_grad

PAD, BOS, EOS = 0, 1, 2

NON_EXPERT = "non_expert"
EXPERT = "expert"
GATE = "gate"


@dataclass(frozen=True)
class ArchConfig:
    vocab: int
    d_model: int
    ffn_dim: int
    enc_layers: int
    dec_layers: int
    heads: int
    num_experts: int = 1
    moe_every: int = 2
    tied_embeddings: bool = True
    dense: bool = False

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.moe_every < 1 or self.num_experts < 1:
            raise ValueError("moe_every and num_experts must be >= 1")
        if not self.tied_embeddings:
            raise ValueError("only tied embeddings are supported")
        if min(self.vocab, self.d_model, self.ffn_dim, self.heads) < 1:
            raise ValueError("vocab, d_model, ffn_dim and heads must be positive")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValueError("layer counts must be non-negative")

    def is_moe(self, layer_idx: int) -> bool:
        """1-based even layers carry experts (for the default stride of 2)."""
        return not self.dense and (layer_idx + 1) % self.moe_every == 0

    @property
    def num_moe_layers(self) -> int:
        if self.dense:
            return 0
        return self.enc_layers // self.moe_every + self.dec_layers // self.moe_every

    def replace(self, **kw) -> ArchConfig:
        return ArchConfig(**{**asdict(self), **kw})


LARGE = ArchConfig(vocab=250_000, d_model=1024, ffn_dim=4096, enc_layers=24, dec_layers=12,
                   heads=16, num_experts=64)
SMALL = ArchConfig(vocab=250_000, d_model=768, ffn_dim=3072, enc_layers=12, dec_layers=6,
                   heads=12, num_experts=64)
TOY = ArchConfig(vocab=32, d_model=16, ffn_dim=32, enc_layers=2, dec_layers=2, heads=2,
                 num_experts=2)
PRESETS = {"large": LARGE, "small": SMALL, "toy": TOY}


class ParamCount(NamedTuple):
    total: int
    non_expert: int
    expert: int
    gate: int


def param_count(arch: ArchConfig) -> ParamCount:
    d, f = arch.d_model, arch.ffn_dim
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + d + f
    ln = 2 * d
    non_expert = arch.vocab * d + 2 * ln  # tied embedding, final encoder/decoder norms
    expert = gate = 0
    for stack, n_layers in (("enc", arch.enc_layers), ("dec", arch.dec_layers)):
        for i in range(n_layers):
            if stack == "enc":
                non_expert += attn + 2 * ln
            else:
                non_expert += 2 * attn + 3 * ln
            if arch.is_moe(i):
                expert += arch.num_experts * ffn
                gate += d * arch.num_experts
            else:
                non_expert += ffn
    return ParamCount(non_expert + expert + gate, non_expert, expert, gate)


class Role(NamedTuple):
    kind: str
    layer: int | None = None
    expert: int | None = None


class ModelParams:
    """Named, role-tagged parameter tensors of one model."""

    def __init__(self, arch: ArchConfig, tensors: dict[str, Tensor], roles: dict[str, Role]):
        if tensors.keys() != roles.keys():
            raise ValueError("every tensor needs exactly one role tag")
        self.arch = arch
        self.tensors = tensors
        self.roles = roles

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def moe_layer(self, prefix: str) -> MoeLayerParams:
        E = self.arch.num_experts
        t = self.tensors
        return MoeLayerParams(
            gate=t[f"{prefix}.moe.gate"],
            w1=[t[f"{prefix}.moe.expert.{e}.w1"] for e in range(E)],
            b1=[t[f"{prefix}.moe.expert.{e}.b1"] for e in range(E)],
            w2=[t[f"{prefix}.moe.expert.{e}.w2"] for e in range(E)],
            b2=[t[f"{prefix}.moe.expert.{e}.b2"] for e in range(E)],
        )

    def moe_prefixes(self) -> list[str]:
        return [n[: -len(".moe.gate")] for n in self.tensors if n.endswith(".moe.gate")]

    def copy(self) -> ModelParams:
        return ModelParams(
            self.arch,
            {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()},
            dict(self.roles),
        )


def _layer_index(arch: ArchConfig, stack: str, i: int) -> int:
    return i if stack == "enc" else arch.enc_layers + i


def layer_names(arch: ArchConfig) -> list[tuple[str, Role, tuple[int, ...], str]]:
    """``(name, role, shape, init)`` for every tensor, in construction order."""
    d, f, E = arch.d_model, arch.ffn_dim, arch.num_experts
    out = [("embed", Role(NON_EXPERT), (arch.vocab, d), "embed")]
    ne = Role(NON_EXPERT)

    def ln(p):
        return [(f"{p}.g", ne, (d,), "one"), (f"{p}.b", ne, (d,), "zero")]

    def attn(p):
        rows = []
        for m in ("q", "k", "v", "o"):
            rows += [(f"{p}.{m}.w", ne, (d, d), "mat"), (f"{p}.{m}.b", ne, (d,), "zero")]
        return rows

    def ffn(p, role):
        return [(f"{p}.w1", role, (d, f), "mat"), (f"{p}.b1", role, (f,), "zero"),
                (f"{p}.w2", role, (f, d), "mat"), (f"{p}.b2", role, (d,), "zero")]

    for stack, n_layers in (("enc", arch.enc_layers), ("dec", arch.dec_layers)):
        for i in range(n_layers):
            p = f"{stack}.{i}"
            L = _layer_index(arch, stack, i)
            out += ln(f"{p}.ln1") + attn(f"{p}.self")
            if stack == "dec":
                out += ln(f"{p}.ln2") + attn(f"{p}.cross")
            out += ln(f"{p}.ln_ffn")
            if arch.is_moe(i):
                out.append((f"{p}.moe.gate", Role(GATE, L), (d, E), "mat"))
                for e in range(E):
                    out += ffn(f"{p}.moe.expert.{e}", Role(EXPERT, L, e))
            else:
                out += ffn(f"{p}.ffn", ne)
        out += ln(f"{stack}.ln_f")
    return out


def build_model(arch: ArchConfig, seed: int = 0) -> ModelParams:
    """Embeddings ~ truncated normal(0.02); matrices ~ truncated normal with Glorot std."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    roles: dict[str, Role] = {}
    for name, role, shape, init in layer_names(arch):
        if init == "embed":
            t = T.init_truncated_normal(shape, 0.02, rng=rng)
        elif init == "mat":
            t = T.init_truncated_normal(shape, math.sqrt(2.0 / (shape[0] + shape[1])), rng=rng)
        elif init == "one":
            t = T.ones(shape)
        else:
            t = T.zeros(shape)
        tensors[name] = t
        roles[name] = role
    return ModelParams(arch, tensors, roles)


# ------------------------------------------------------------------ forward


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : (d - d // 2)])
    return pe


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _ln(m: ModelParams, x: Tensor, p: str) -> Tensor:
    return T.layernorm(x, m[f"{p}.g"], m[f"{p}.b"])


def _attention(m: ModelParams, xq: Tensor, xkv: Tensor, p: str, batch: int,
               mask: np.ndarray) -> Tensor:
    """Multi-head attention on time-major rows; ``mask`` is additive ``[B, 1, Tq, Tk]``."""
    d, h = m.arch.d_model, m.arch.heads
    dh = d // h
    tq, tk = xq.shape[0] // batch, xkv.shape[0] // batch
    q = T.transpose(T.reshape(_linear(xq, m[f"{p}.q.w"], m[f"{p}.q.b"]), (tq, batch, h, dh)), (1, 2, 0, 3))
    k = T.transpose(T.reshape(_linear(xkv, m[f"{p}.k.w"], m[f"{p}.k.b"]), (tk, batch, h, dh)), (1, 2, 3, 0))
    v = T.transpose(T.reshape(_linear(xkv, m[f"{p}.v.w"], m[f"{p}.v.b"]), (tk, batch, h, dh)), (1, 2, 0, 3))
    scores = T.add(T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh)), Tensor(mask))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (2, 0, 1, 3)), (tq * batch, d))
    return _linear(ctx, m[f"{p}.o.w"], m[f"{p}.o.b"])


def bucket_order(length: int, batch: int, groups: int) -> np.ndarray:
    """Row order under which each of ``groups`` contiguous blocks holds one bucket
    of ``batch // groups`` whole sentences, still time-major inside the bucket."""
    if batch % groups:
        raise ValueError(f"group_count {groups} does not divide batch size {batch}")
    per = batch // groups
    rows = np.arange(length)[:, None] * batch + np.arange(per)[None, :]
    return np.concatenate([(rows + g * per).ravel() for g in range(groups)])


def _ffn_sublayer(m: ModelParams, x: Tensor, stack: str, i: int, batch: int, cfg: RouterConfig,
                  phase: str, rng: np.random.Generator, aux: list, decisions: list) -> Tensor:
    p = f"{stack}.{i}"
    u = _ln(m, x, f"{p}.ln_ffn")
    if m.arch.is_moe(i):
        zero = Tensor(np.zeros(u.shape))
        grouped = phase == routing.TRAIN and cfg.assignment_mode == routing.GROUPED
        if grouped and cfg.group_count > 1:
            order = bucket_order(u.shape[0] // batch, batch, cfg.group_count)
            y, a, dec = routing.moe_layer_forward(T.take_rows(u, order), m.moe_layer(p), cfg, phase,
                                                  rng, residual=zero)
            y = T.take_rows(y, np.argsort(order))
        else:
            y, a, dec = routing.moe_layer_forward(u, m.moe_layer(p), cfg, phase, rng, residual=zero)
        aux.append(a)
        decisions.append((p, dec))
    else:
        h = T.relu(_linear(u, m[f"{p}.ffn.w1"], m[f"{p}.ffn.b1"]))
        y = _linear(h, m[f"{p}.ffn.w2"], m[f"{p}.ffn.b2"])
    return T.add(x, y)


def _as_batch(tokens) -> np.ndarray:
    a = np.asarray(tokens, dtype=np.int64)
    return a[None, :] if a.ndim == 1 else a


def _embed(m: ModelParams, ids: np.ndarray) -> Tensor:
    """Time-major embedding rows for a ``[B, L]`` id batch."""
    B, L = ids.shape
    d = m.arch.d_model
    x = T.scale(T.embed(m["embed"], ids.T.reshape(-1)), math.sqrt(d))
    pe = np.repeat(sinusoidal_positions(L, d), B, axis=0)
    return T.add(x, Tensor(pe))


def _key_mask(ids: np.ndarray, tq: int) -> np.ndarray:
    pad = (ids == PAD)[:, None, None, :]
    return np.broadcast_to(np.where(pad, -1e9, 0.0), (ids.shape[0], 1, tq, ids.shape[1]))


def encode(m: ModelParams, src: np.ndarray, cfg: RouterConfig, phase: str,
           rng: np.random.Generator, aux: list, decisions: list) -> Tensor:
    B, S = src.shape
    x = _embed(m, src)
    mask = _key_mask(src, S)
    for i in range(m.arch.enc_layers):
        p = f"enc.{i}"
        x = T.add(x, _self_attn(m, x, p, B, mask))
        x = _ffn_sublayer(m, x, "enc", i, B, cfg, phase, rng, aux, decisions)
    return _ln(m, x, "enc.ln_f")


def _self_attn(m: ModelParams, x: Tensor, p: str, batch: int, mask: np.ndarray) -> Tensor:
    u = _ln(m, x, f"{p}.ln1")
    return _attention(m, u, u, f"{p}.self", batch, mask)


def decode(m: ModelParams, enc_out: Tensor, src: np.ndarray, tgt: np.ndarray,
           cfg: RouterConfig, phase: str, rng: np.random.Generator,
           aux: list, decisions: list) -> Tensor:
    B, L = tgt.shape
    x = _embed(m, tgt)
    causal = np.triu(np.full((L, L), -1e9), k=1)[None, None]
    self_mask = _key_mask(tgt, L) + causal
    cross_mask = _key_mask(src, L)
    for i in range(m.arch.dec_layers):
        p = f"dec.{i}"
        x = T.add(x, _self_attn(m, x, p, B, self_mask))
        x = T.add(x, _attention(m, _ln(m, x, f"{p}.ln2"), enc_out, f"{p}.cross", B, cross_mask))
        x = _ffn_sublayer(m, x, "dec", i, B, cfg, phase, rng, aux, decisions)
    x = _ln(m, x, "dec.ln_f")
    return T.matmul(x, T.transpose(m["embed"], (1, 0)))


def forward(model: ModelParams, src_tokens, tgt_tokens, cfg: RouterConfig, phase: str,
            rng: np.random.Generator | None = None):
    """Teacher-forced forward pass.

    ``tgt_tokens`` is the decoder input (normally BOS-prefixed). Accepts single
    sequences or ``[B, L]`` batches. Returns ``(logits, total_aux_loss,
    decisions)`` with logits ``[L, V]`` or ``[B, L, V]`` and ``decisions`` a list
    of ``(layer_name, RoutingDecision)``.
    """
    single = np.asarray(tgt_tokens).ndim == 1
    src, tgt = _as_batch(src_tokens), _as_batch(tgt_tokens)
    if src.shape[0] != tgt.shape[0]:
        raise ValueError("source and target batches differ in size")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    aux: list[Tensor] = []
    decisions: list = []
    enc_out = encode(model, src, cfg, phase, rng, aux, decisions)
    logits = decode(model, enc_out, src, tgt, cfg, phase, rng, aux, decisions)
    B, L = tgt.shape
    logits = T.transpose(T.reshape(logits, (L, B, model.arch.vocab)), (1, 0, 2))
    if single:
        logits = T.reshape(logits, (L, model.arch.vocab))
    total_aux = aux[0] if aux else Tensor(0.0)
    for a in aux[1:]:
        total_aux = T.add(total_aux, a)
    return logits, total_aux, decisions


def teacher_forcing(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs ``[BOS] + y`` and labels ``y + [EOS]`` for a padded ``[B, L]`` batch."""
    y = _as_batch(targets)
    B, L = y.shape
    dec_in = np.concatenate([np.full((B, 1), BOS), y], axis=1)
    labels = np.concatenate([y, np.full((B, 1), PAD)], axis=1)
    lengths = (y != PAD).sum(axis=1)
    labels[np.arange(B), lengths] = EOS
    return dec_in, labels


def sequence_loss(model: ModelParams, src, tgt, cfg: RouterConfig, phase: str,
                  rng: np.random.Generator | None = None):
    """Token-mean cross entropy on ``tgt + EOS``; returns ``(ce, aux, decisions)``."""
    src = _as_batch(src)
    dec_in, labels = teacher_forcing(tgt)
    logits, aux, decisions = forward(model, src, dec_in, cfg, phase, rng)
    ce = T.cross_entropy(logits, labels, labels != PAD)
    return ce, aux, decisions


def generate(model: ModelParams, src_tokens, max_len: int, cfg: RouterConfig) -> list[int]:
    """Greedy decoding with evaluation-phase routing; stops at EOS or ``max_len``."""
    src = _as_batch(src_tokens)
    out: list[int] = []
    if max_len <= 0:
        return out
    with no_grad():
        rng = np.random.default_rng(cfg.rng_seed)
        enc_out = encode(model, src, cfg, EVAL, rng, [], [])
        for _ in range(max_len):
            dec_in = np.array([[BOS, *out]])
            logits = decode(model, enc_out, src, dec_in, cfg, EVAL, rng, [], [])
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
    return out
