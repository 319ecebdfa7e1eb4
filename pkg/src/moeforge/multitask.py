"""Toy multilingual corpus, DAE noising, temperature sampling and the MT+DAE training step."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import BOS, EOS, PAD, ModelParams, generate, sequence_loss
from .optim import Optimizer
from .routing import EVAL, GROUPED, TRAIN, RouterConfig
from .tensor import no_grad

MASK, BLANK = 3, 4
MT_TAG, DAE_TAG = 5, 6
FIRST_LANG_TAG = 7
SPECIALS = (PAD, BOS, EOS, MASK, BLANK, MT_TAG, DAE_TAG)

MT = "mt"
DAE = "dae"
TASKS = (MT, DAE)
_TASK_ID = {MT: 0, DAE: 1}

METRICS_HEADER = ["step", "lr", "mt_loss", "dae_loss", "aux_loss", "dropped_frac", "wall_ms"]


# ------------------------------------------------------------------ corpus


@dataclass(frozen=True)
class Language:
    name: str
    size: int
    seed: int


@dataclass
class SyntheticCorpus:
    """Per-language random sentences and their deterministic translations.

    A language draws tokens from a skewed unigram distribution over a shared
    alphabet. Its translation of sentence ``s`` is ``reverse(cipher(s))`` with a
    per-language substitution cipher. Training sentences use indices
    ``[0, size)``; held-out sentences use indices from ``size`` on.
    """

    languages: list[Language]
    alphabet: int = 24
    min_len: int = 4
    max_len: int = 8
    _train: list[list[np.ndarray]] = field(init=False, repr=False)
    _ciphers: list[np.ndarray] = field(init=False, repr=False)
    _weights: list[np.ndarray] = field(init=False, repr=False)
    _buckets: list[dict[int, np.ndarray]] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.languages:
            raise ValueError("corpus needs at least one language")
        if any(lang.size <= 0 for lang in self.languages):
            raise ValueError("language sizes must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.vocab_size > 512:
            raise ValueError("toy vocabulary is limited to 512 symbols")
        self._ciphers, self._weights, self._train, self._buckets = [], [], [], []
        for lang in self.languages:
            rng = np.random.default_rng([lang.seed, 0])
            self._ciphers.append(rng.permutation(self.alphabet))
            w = 1.0 / np.arange(1, self.alphabet + 1)
            self._weights.append(w[rng.permutation(self.alphabet)] / w.sum())
            sents = [self._sentence(len(self._train), i) for i in range(lang.size)]
            self._train.append(sents)
            lengths = np.array([len(s) for s in sents])
            self._buckets.append({int(n): np.nonzero(lengths == n)[0] for n in np.unique(lengths)})

    @property
    def content_start(self) -> int:
        return FIRST_LANG_TAG + len(self.languages)

    @property
    def vocab_size(self) -> int:
        return self.content_start + self.alphabet

    @property
    def sizes(self) -> list[int]:
        return [lang.size for lang in self.languages]

    def lang_tag(self, lang: int) -> int:
        return FIRST_LANG_TAG + lang

    def _sentence(self, lang: int, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.languages[lang].seed, 1, index])
        n = int(rng.integers(self.min_len, self.max_len + 1))
        return rng.choice(self.alphabet, size=n, p=self._weights[lang]) + self.content_start

    def sentence(self, lang: int, index: int) -> np.ndarray:
        if index < self.languages[lang].size:
            return self._train[lang][index]
        return self._sentence(lang, index)

    def translate(self, lang: int, sent: np.ndarray) -> np.ndarray:
        c = self.content_start
        return (self._ciphers[lang][sent - c] + c)[::-1]

    def mt_pair(self, lang: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.sentence(lang, index)
        return np.concatenate([[self.lang_tag(lang)], s]), self.translate(lang, s)

    def token_ids(self) -> set[int]:
        return set(range(self.content_start, self.vocab_size))


# ---------------------------------------------------------------- DAE noise


@dataclass(frozen=True)
class DaeNoiseConfig:
    """Noise settings. ``swap_window`` bounds displacement: a token moves fewer
    than ``swap_window`` places, so a window of 1 disables swapping."""

    infill_ratio: float = 0.2
    drop_prob: float = 0.1
    blank_prob: float = 0.1
    swap_window: int = 3
    span_length_mean: float = 3.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("infill_ratio", "drop_prob", "blank_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.swap_window < 1:
            raise ValueError("swap_window must be >= 1")
        if self.span_length_mean <= 0:
            raise ValueError("span_length_mean must be positive")


def infill_mask(n: int, ratio: float, span_mean: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask covering ``round(ratio * n)`` positions with Poisson-length spans."""
    target = int(round(ratio * n))
    mask = np.zeros(n, dtype=bool)
    covered = 0
    while covered < target:
        span = min(max(1, int(rng.poisson(span_mean))), target - covered)
        start = int(rng.integers(0, n - span + 1))
        covered += int((~mask[start:start + span]).sum())
        mask[start:start + span] = True
    return mask


def noise_dae(clean: Sequence[int], cfg: DaeNoiseConfig,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Span infilling, then word drop, word blank and local word swap."""
    clean = np.asarray(clean, dtype=np.int64)
    if clean.size == 0:
        raise ValueError("cannot noise an empty sequence")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    mask = infill_mask(len(clean), cfg.infill_ratio, cfg.span_length_mean, rng)
    # each maximal masked run collapses to one MASK token
    starts = mask & ~np.concatenate([[False], mask[:-1]])
    toks = np.where(starts, MASK, clean)[~mask | starts]
    is_word = ~(mask & starts)[~mask | starts]

    drop = is_word & (rng.random(len(toks)) < cfg.drop_prob)
    if drop.all():
        drop[int(rng.integers(len(drop)))] = False
    toks, is_word = toks[~drop], is_word[~drop]

    blank = is_word & (rng.random(len(toks)) < cfg.blank_prob)
    toks = np.where(blank, BLANK, toks)

    if cfg.swap_window > 1:
        keys = np.arange(len(toks)) + rng.uniform(0, cfg.swap_window, len(toks))
        toks = toks[np.argsort(keys, kind="stable")]
    return toks


# -------------------------------------------------------------- sampling


def language_probs(sizes: Sequence[float], temperature: float) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if (sizes <= 0).any():
        raise ValueError("corpus sizes must be positive")
    p = (sizes / sizes.sum()) ** (1.0 / temperature)
    return p / p.sum()


def sample_language(sizes: Sequence[float], temperature: float, rng: np.random.Generator) -> int:
    return int(rng.choice(len(sizes), p=language_probs(sizes, temperature)))


# ---------------------------------------------------------------- batches


@dataclass
class TaskBatch:
    task: str
    src: np.ndarray  # [B, S], PAD-padded
    tgt: np.ndarray  # [B, L], without BOS/EOS
    lang: int

    @property
    def num_tokens(self) -> int:
        return int((self.src != PAD).sum() + (self.tgt != PAD).sum() + len(self.tgt))


def _pad(rows: list[np.ndarray]) -> np.ndarray:
    out = np.full((len(rows), max(len(r) for r in rows)), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(corpus: SyntheticCorpus, task: str, lang: int, budget_tokens: int,
               rng: np.random.Generator, noise: DaeNoiseConfig | None = None,
               multiple: int = 1) -> TaskBatch:
    """Same-length sentences from one language, as many as fit in the token budget.

    A sentence of length ``n`` costs ``2 * (n + 1)`` tokens (source with its tag
    plus target with EOS). The sentence count is rounded down to a multiple of
    ``multiple`` (but never below it), which keeps grouped routing divisible.
    """
    buckets = corpus._buckets[lang]
    lengths = np.array(sorted(buckets))
    counts = np.array([len(buckets[n]) for n in lengths])
    n = int(rng.choice(lengths, p=counts / counts.sum()))
    b = max(multiple, budget_tokens // (2 * (n + 1)) // multiple * multiple)
    pool = buckets[n]
    idx = rng.choice(pool, size=b, replace=len(pool) < b)
    if task == MT:
        pairs = [corpus.mt_pair(lang, int(i)) for i in idx]
        return TaskBatch(MT, np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), lang)
    if task == DAE:
        noise = noise or DaeNoiseConfig()
        clean = [corpus.translate(lang, corpus.sentence(lang, int(i))) for i in idx]
        src = [np.concatenate([[DAE_TAG], noise_dae(c, noise, rng)]) for c in clean]
        return TaskBatch(DAE, _pad(src), np.stack(clean), lang)
    raise ValueError(f"unknown task {task!r}")


def heldout_mt(corpus: SyntheticCorpus, per_language: int, budget_tokens: int) -> list[TaskBatch]:
    """Deterministic held-out MT batches grouped by sentence length."""
    out = []
    for lang, spec in enumerate(corpus.languages):
        pairs = [corpus.mt_pair(lang, spec.size + i) for i in range(per_language)]
        by_len: dict[int, list] = {}
        for p in pairs:
            by_len.setdefault(len(p[1]), []).append(p)
        for n in sorted(by_len):
            group = by_len[n]
            b = max(1, budget_tokens // (2 * (n + 1)))
            for i in range(0, len(group), b):
                chunk = group[i:i + b]
                out.append(TaskBatch(MT, np.stack([p[0] for p in chunk]),
                                     np.stack([p[1] for p in chunk]), lang))
    return out


# ---------------------------------------------------------------- training


@dataclass
class StepMetrics:
    step: int
    lr: float
    losses: dict[str, float]
    aux_loss: float
    dropped: int
    routed: int
    wall_ms: float = 0.0

    @property
    def dropped_frac(self) -> float:
        return self.dropped / self.routed if self.routed else 0.0

    def row(self, with_time: bool = False) -> list:
        return [self.step, repr(self.lr), _fmt(self.losses.get(MT)), _fmt(self.losses.get(DAE)),
                repr(self.aux_loss), repr(self.dropped_frac),
                f"{self.wall_ms:.1f}" if with_time else ""]


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(x)


def task_loss(model: ModelParams, batch: TaskBatch, cfg: RouterConfig, phase: str,
              rng: np.random.Generator):
    return sequence_loss(model, batch.src, batch.tgt, cfg, phase, rng)


def draw_batches(corpus: SyntheticCorpus, tasks: Sequence[str], budget_tokens: int,
                 seed: int, step: int, temperature: float = 5.0,
                 noise: DaeNoiseConfig | None = None, multiple: int = 1) -> dict[str, TaskBatch]:
    """One batch per task, each from a temperature-sampled language; keyed by (seed, step, task)."""
    out = {}
    for task in tasks:
        rng = np.random.default_rng([seed, step, _TASK_ID[task], 1])
        lang = sample_language(corpus.sizes, temperature, rng)
        out[task] = make_batch(corpus, task, lang, budget_tokens, rng, noise, multiple)
    return out


def multitask_step(model: ModelParams, batches: dict[str, TaskBatch], optimizer: Optimizer,
                   cfg: RouterConfig, seed: int = 0, step: int | None = None) -> StepMetrics:
    """Sum cross entropy and balancing losses over all task batches, one backward, one update."""
    if not batches:
        raise ValueError("need at least one task batch")
    step = optimizer.step_count + 1 if step is None else step
    t0 = time.perf_counter()
    optimizer.zero_grad()
    total = None
    losses: dict[str, float] = {}
    aux_total = 0.0
    dropped = routed = 0
    for task, batch in batches.items():
        rng = np.random.default_rng([seed, step, _TASK_ID[task], 2])
        ce, aux, decisions = task_loss(model, batch, cfg, TRAIN, rng)
        term = T.add(ce, aux)
        total = term if total is None else T.add(total, term)
        losses[task] = ce.item()
        aux_total += aux.item()
        for _, d in decisions:
            dropped += int(d.dropped.sum())
            routed += d.num_tokens
    total.backward()
    lr = optimizer.step()
    return StepMetrics(step, lr, losses, aux_total, dropped, routed,
                       (time.perf_counter() - t0) * 1000.0)


@dataclass
class Trainer:
    model: ModelParams
    corpus: SyntheticCorpus
    optimizer: Optimizer
    router: RouterConfig
    tasks: tuple[str, ...] = TASKS
    budget_tokens: int = 4096
    temperature: float = 5.0
    noise: DaeNoiseConfig = field(default_factory=DaeNoiseConfig)
    seed: int = 0
    batches_consumed: dict[str, int] = field(default_factory=dict)

    def step(self) -> StepMetrics:
        n = self.optimizer.step_count + 1
        multiple = self.router.group_count if self.router.assignment_mode == GROUPED else 1
        batches = draw_batches(self.corpus, self.tasks, self.budget_tokens, self.seed, n,
                               self.temperature, self.noise, multiple)
        for task in batches:
            self.batches_consumed[task] = self.batches_consumed.get(task, 0) + 1
        return multitask_step(self.model, batches, self.optimizer, self.router, self.seed, n)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    mt_ce: float
    exact_match: float | None
    drop_hist: np.ndarray
    dropped: int
    tokens: int


def evaluate(model: ModelParams, heldout: Sequence[TaskBatch], cfg: RouterConfig,
             exact_match_limit: int = 0, max_positions: int = 64) -> EvalResult:
    """Held-out MT cross entropy with evaluation routing (plain scan, eval capacity, no jitter).

    ``drop_hist[p]`` counts tokens at sequence position ``p`` dropped by some MoE layer.
    Exact match greedily decodes the first ``exact_match_limit`` sentences.
    """
    nll = 0.0
    count = 0
    hist = np.zeros(max_positions, dtype=np.int64)
    with no_grad():
        for batch in heldout:
            ce, _, decisions = task_loss(model, batch, cfg, EVAL, np.random.default_rng(cfg.rng_seed))
            n = int((batch.tgt != PAD).sum()) + len(batch.tgt)
            nll += ce.item() * n
            count += n
            B = len(batch.src)
            for _, d in decisions:
                pos = np.nonzero(d.dropped)[0] // B
                hist += np.bincount(np.minimum(pos, max_positions - 1), minlength=max_positions)
    exact = None
    if exact_match_limit:
        hits = total = 0
        for batch in heldout:
            for src, tgt in zip(batch.src, batch.tgt):
                if total >= exact_match_limit:
                    break
                ref = tgt[tgt != PAD]
                out = generate(model, src[src != PAD], len(ref) + 2, cfg)
                hits += int(list(out) == list(ref))
                total += 1
        exact = hits / total if total else 0.0
    return EvalResult(nll / count, exact, hist, int(hist.sum()), count)


def write_metrics(path, rows: list[StepMetrics], with_time: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.row(with_time))
