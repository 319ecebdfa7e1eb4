"""Toy-scale training experiments: assignment ablation, merged warm start, pruning, sample efficiency."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from . import routing as R
from .model import ArchConfig, ModelParams, build_model
from .multitask import (MT, Language, SyntheticCorpus, Trainer, evaluate, heldout_mt)
from .optim import LrSchedule, Optimizer
from .routing import RouterConfig
from .surgery import RANDOM, TOP_UTILIZATION, aoe_merge, count_utilization, prune_experts


@dataclass(frozen=True)
class ToySetup:
    """Everything that stays fixed across the arms of a comparison."""

    languages: tuple[tuple[int, int], ...] = ((4000, 11), (2000, 12), (1000, 13))
    alphabet: int = 24
    min_len: int = 4
    max_len: int = 8
    d_model: int = 32
    ffn_dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 2
    budget_tokens: int = 192
    base_lr: float = 0.03
    warmup_steps: int = 200
    eval_every: int = 100
    heldout_per_language: int = 60
    group_count: int = 4
    smooth_window: int = 5  # evals averaged for the "final smoothed" loss

    def corpus(self) -> SyntheticCorpus:
        langs = [Language(f"l{i}", size, seed) for i, (size, seed) in enumerate(self.languages)]
        return SyntheticCorpus(langs, self.alphabet, self.min_len, self.max_len)

    def arch(self, num_experts: int) -> ArchConfig:
        return ArchConfig(vocab=self.corpus().vocab_size, d_model=self.d_model, ffn_dim=self.ffn_dim,
                          enc_layers=self.enc_layers, dec_layers=self.dec_layers, heads=self.heads,
                          num_experts=num_experts, dense=num_experts == 1)

    def router(self, num_experts: int, mode: str = R.PLAIN, seed: int = 0) -> RouterConfig:
        return RouterConfig(num_experts, assignment_mode=mode, group_count=self.group_count,
                            rng_seed=seed)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.warmup_steps)


DEFAULT_SETUP = ToySetup()


@dataclass
class Curve:
    """Eval points of one training run."""

    label: str
    seed: int
    steps: list[int] = field(default_factory=list)
    eval_ce: list[float] = field(default_factory=list)
    train_ce: list[float] = field(default_factory=list)
    dropped_frac: list[float] = field(default_factory=list)
    tokens_per_step: list[int] = field(default_factory=list)
    drop_hist: np.ndarray | None = None

    def smoothed_final(self, window: int) -> float:
        return float(np.mean(self.eval_ce[-window:]))

    def steps_to(self, threshold: float) -> int | None:
        for s, v in zip(self.steps, self.eval_ce):
            if v <= threshold:
                return s
        return None


def train_run(setup: ToySetup, model: ModelParams, cfg: RouterConfig, steps: int, seed: int,
              label: str, corpus: SyntheticCorpus | None = None, heldout=None,
              eval_at_zero: bool = False) -> Curve:
    """Train ``model`` in place on toy MT for ``steps`` steps, evaluating every ``eval_every``."""
    corpus = corpus or setup.corpus()
    heldout = heldout if heldout is not None else heldout_mt(corpus, setup.heldout_per_language,
                                                             setup.budget_tokens)
    opt = Optimizer(model.parameters(), setup.schedule())
    trainer = Trainer(model, corpus, opt, cfg, tasks=(MT,), budget_tokens=setup.budget_tokens,
                      seed=seed)
    curve = Curve(label, seed)
    if eval_at_zero:
        curve.steps.append(0)
        curve.eval_ce.append(evaluate(model, heldout, cfg).mt_ce)
        curve.train_ce.append(float("nan"))
        curve.dropped_frac.append(0.0)
    train_sum, n_since = 0.0, 0
    for s in range(1, steps + 1):
        m = trainer.step()
        train_sum += m.losses[MT]
        n_since += 1
        curve.tokens_per_step.append(m.routed)
        if s % setup.eval_every == 0 or s == steps:
            ev = evaluate(model, heldout, cfg)
            curve.steps.append(s)
            curve.eval_ce.append(ev.mt_ce)
            curve.train_ce.append(train_sum / n_since)
            curve.dropped_frac.append(m.dropped_frac)
            curve.drop_hist = ev.drop_hist if curve.drop_hist is None else curve.drop_hist + ev.drop_hist
            train_sum, n_since = 0.0, 0
    return curve


def curve_rows(curves: Sequence[Curve]) -> list[list]:
    rows = [["label", "seed", "step", "train_ce", "eval_ce", "dropped_frac"]]
    for c in curves:
        for s, tr, ev, dr in zip(c.steps, c.train_ce, c.eval_ce, c.dropped_frac):
            rows.append([c.label, c.seed, s, f"{tr:.6f}", f"{ev:.6f}", f"{dr:.6f}"])
    return rows


# ------------------------------------------------------- assignment ablation


MODES = (R.PLAIN, R.GROUPED, R.RTS)


@dataclass
class AblationResult:
    curves: list[Curve]
    medians: dict[str, float]

    @property
    def ordered(self) -> bool:
        m = self.medians
        return m[R.RTS] <= m[R.GROUPED] <= m[R.PLAIN]


def rts_ablation(setup: ToySetup, seeds: Sequence[int], steps: int, num_experts: int = 8,
                 modes: Sequence[str] = MODES) -> AblationResult:
    """Identical models and data streams per seed, differing only in assignment mode."""
    corpus = setup.corpus()
    heldout = heldout_mt(corpus, setup.heldout_per_language, setup.budget_tokens)
    curves = []
    for seed in seeds:
        for mode in modes:
            model = build_model(setup.arch(num_experts), seed)
            cfg = setup.router(num_experts, mode, seed)
            curves.append(train_run(setup, model, cfg, steps, seed, mode, corpus, heldout))
    medians = {mode: float(np.median([c.smoothed_final(setup.smooth_window)
                                      for c in curves if c.label == mode])) for mode in modes}
    return AblationResult(curves, medians)


def oversubscribed_choice(num_tokens: int = 512, num_experts: int = 8, stride: int = 4) -> np.ndarray:
    """Every ``stride``-th token wants expert 0; the rest cycle over the other experts.

    Expert 0 is oversubscribed by a factor ``num_experts / stride`` at a capacity
    factor of 1, and its tokens are spread evenly over the flattened positions,
    so where the drops land depends only on the assignment rule.
    """
    idx = np.arange(num_tokens)
    others = 1 + (idx - idx // stride - 1) % (num_experts - 1)
    return np.where(idx % stride == 0, 0, others)


@dataclass
class DropPositionResult:
    plain_final_half: float
    rts_chi2: float
    rts_p_value: float
    rts_hist: np.ndarray


def drop_positions(num_tokens: int = 512, num_experts: int = 8, capacity_factor: float = 1.0,
                   buckets: int = 8, trials: int = 200, seed: int = 0) -> DropPositionResult:
    """Where drops land under plain and random-priority assignment on an oversubscribed batch."""
    choice = oversubscribed_choice(num_tokens, num_experts)
    cap = R.capacity(num_tokens, RouterConfig(num_experts, capacity_factor_train=capacity_factor), R.TRAIN)
    plain = R.assign_plain(choice, cap, num_experts)
    dropped = np.nonzero(plain.dropped)[0]
    final_half = float(np.mean(dropped >= num_tokens // 2)) if dropped.size else 0.0

    hist = np.zeros(buckets, dtype=np.int64)
    for t in range(trials):
        d = R.assign_rts(choice, cap, np.random.default_rng([seed, t]), num_experts)
        pos = np.nonzero(d.dropped)[0]
        hist += np.bincount(pos * buckets // num_tokens, minlength=buckets)
    # expected drops per bucket are proportional to the hot tokens it holds
    weight = np.bincount(np.arange(num_tokens) * buckets // num_tokens,
                         weights=(choice == 0).astype(float), minlength=buckets)
    expected = hist.sum() * weight / weight.sum()
    chi2, p = stats.chisquare(hist, expected)
    return DropPositionResult(final_half, float(chi2), float(p), hist)


# ------------------------------------------------------------ merged warm start


@dataclass
class AoeResult:
    curves: list[Curve]
    target: dict[int, float]
    merged_steps: dict[int, int | None]
    scratch_steps: dict[int, int | None]

    @staticmethod
    def _median(d: dict[int, int | None], horizon: int) -> float:
        return float(np.median([horizon + 1 if v is None else v for v in d.values()]))


def aoe_experiment(setup: ToySetup, seeds: Sequence[int], donor_steps: int, steps: int,
                   num_experts: int = 4) -> AoeResult:
    """Two donors share one initialization and see different data; their merge
    is trained against a fresh model with the merged expert count."""
    corpus = setup.corpus()
    heldout = heldout_mt(corpus, setup.heldout_per_language, setup.budget_tokens)
    curves, target, merged_steps, scratch_steps = [], {}, {}, {}
    for seed in seeds:
        cfg = setup.router(num_experts, seed=seed)
        donor_a = build_model(setup.arch(num_experts), seed)
        donor_b = donor_a.copy()
        ca = train_run(setup, donor_a, cfg, donor_steps, 2 * seed + 1000, "donor_a", corpus, heldout)
        train_run(setup, donor_b, cfg, donor_steps, 2 * seed + 1001, "donor_b", corpus, heldout)
        target[seed] = ca.eval_ce[-1]
        big = setup.router(2 * num_experts, seed=seed)
        merged = aoe_merge(donor_a, donor_b)
        cm = train_run(setup, merged, big, steps, seed, "merged", corpus, heldout, eval_at_zero=True)
        scratch = build_model(setup.arch(2 * num_experts), seed + 500)
        cs = train_run(setup, scratch, big, steps, seed, "scratch", corpus, heldout, eval_at_zero=True)
        curves += [ca, cm, cs]
        merged_steps[seed] = cm.steps_to(target[seed])
        scratch_steps[seed] = cs.steps_to(target[seed])
    return AoeResult(curves, target, merged_steps, scratch_steps)


# -------------------------------------------------------------------- pruning


@dataclass
class PruneResult:
    donor_ce: dict[int, float]
    pruned_ce: dict[int, float]
    scratch_ce: dict[int, float]
    top_ce: dict[int, float]
    random_ce: dict[int, float]


def _finetune_ce(setup: ToySetup, model: ModelParams, k: int, steps: int, seed: int,
                 corpus, heldout) -> float:
    cfg = setup.router(k, seed=seed)
    if steps:
        return train_run(setup, model, cfg, steps, seed, "ft", corpus, heldout).eval_ce[-1]
    return evaluate(model, heldout, cfg).mt_ce


def prune_experiment(setup: ToySetup, seeds: Sequence[int], selection_seeds: Sequence[int],
                     donor_steps: int, finetune_steps: int, scratch_steps: int,
                     num_experts: int = 8, k: int = 2) -> PruneResult:
    """Top-utilization pruning + short fine-tune vs. a longer scratch run at size k,
    and top-utilization vs. random selection on one donor."""
    corpus = setup.corpus()
    heldout = heldout_mt(corpus, setup.heldout_per_language, setup.budget_tokens)
    validation = [(b.src, b.tgt) for b in heldout]
    res = PruneResult({}, {}, {}, {}, {})
    donors = {}
    for seed in seeds:
        donor = build_model(setup.arch(num_experts), seed)
        curve = train_run(setup, donor, setup.router(num_experts, seed=seed), donor_steps, seed,
                          "donor", corpus, heldout)
        donors[seed] = donor
        res.donor_ce[seed] = curve.eval_ce[-1]
    counts = {s: count_utilization(d, validation, setup.router(num_experts, seed=s))
              for s, d in donors.items()}
    for seed in seeds:
        pruned = prune_experts(donors[seed], k, TOP_UTILIZATION, counts=counts[seed])
        res.pruned_ce[seed] = _finetune_ce(setup, pruned, k, finetune_steps, seed, corpus, heldout)
        scratch = build_model(setup.arch(k), seed + 500)
        res.scratch_ce[seed] = _finetune_ce(setup, scratch, k, scratch_steps, seed, corpus, heldout)
    base = seeds[0]
    for s in selection_seeds:
        top = prune_experts(donors[base], k, TOP_UTILIZATION, counts=counts[base])
        res.top_ce[s] = _finetune_ce(setup, top, k, finetune_steps, s, corpus, heldout)
        rnd = prune_experts(donors[base], k, RANDOM, seed=s)
        res.random_ce[s] = _finetune_ce(setup, rnd, k, finetune_steps, s, corpus, heldout)
    return res


# -------------------------------------------------------- sample efficiency


@dataclass
class EfficiencyResult:
    curves: list[Curve]
    threshold: dict[int, float]
    steps_to: dict[int, dict[int, int | None]]  # E -> seed -> step


def sample_efficiency(setup: ToySetup, expert_counts: Sequence[int], seeds: Sequence[int],
                      steps: int) -> EfficiencyResult:
    """Same data and seeds for every expert count; the threshold per seed is the
    smallest count's final eval loss."""
    corpus = setup.corpus()
    heldout = heldout_mt(corpus, setup.heldout_per_language, setup.budget_tokens)
    base = min(expert_counts)
    curves, threshold, steps_to = [], {}, {e: {} for e in expert_counts}
    for seed in seeds:
        by_e = {}
        for e in expert_counts:
            model = build_model(setup.arch(e), seed)
            by_e[e] = train_run(setup, model, setup.router(e, seed=seed), steps, seed, f"E{e}",
                                corpus, heldout)
            curves.append(by_e[e])
        threshold[seed] = by_e[base].eval_ce[-1]
        for e in expert_counts:
            steps_to[e][seed] = by_e[e].steps_to(threshold[seed])
    return EfficiencyResult(curves, threshold, steps_to)


def median_steps(d: dict[int, int | None], horizon: int) -> float:
    """Median steps-to-threshold; runs that never reach it count as ``horizon + 1``."""
    return float(np.median([horizon + 1 if v is None else v for v in d.values()]))


def with_overrides(setup: ToySetup, **kw) -> ToySetup:
    return replace(setup, **kw)
