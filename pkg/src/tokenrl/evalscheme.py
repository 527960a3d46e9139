"""Evaluation scheme: reflection words and ratios, pass@k, accuracy tabs, run aggregation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .policy import GenerationConfig, PolicyParams, Response, rng_stream, sample
from .rewards import score
from .taskgen import Query, Vocabulary

REFLECTION_WORDS = (
    "re-check", "re-evaluate", "re-examine", "re-think", "recheck",
    "reevaluate", "reexamine", "reevaluation", "rethink", "check again",
    "think again", "try again", "verify", "wait", "yet",
)

# a match may not touch a letter on either side: "yet" is not in "yesterday"
_WORD_PATTERNS = {
    w: re.compile(r"(?<![a-z])" + re.escape(w) + r"(?![a-z])") for w in REFLECTION_WORDS
}
_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text.lower())


def count_reflection_words(text: str) -> dict[str, int]:
    """Occurrence counts of the reflection words (nonzero entries only)."""
    norm = normalize_text(text)
    counts = {}
    for word, pat in _WORD_PATTERNS.items():
        n = len(pat.findall(norm))
        if n:
            counts[word] = n
    return counts


@dataclass
class ReflectionStats:
    N: int = 0
    N_ref: int = 0
    N_plus: int = 0
    N_ref_plus: int = 0
    per_word_counts: dict[str, int] = field(default_factory=lambda: {w: 0 for w in REFLECTION_WORDS})

    def __post_init__(self):
        if not 0 <= self.N_ref_plus <= min(self.N_ref, self.N_plus) or max(self.N_ref, self.N_plus) > self.N:
            raise ValueError(f"inconsistent reflection counters {self}")

    def add(self, text: str, correct: bool) -> None:
        counts = count_reflection_words(text)
        has_ref = bool(counts)
        self.N += 1
        self.N_ref += has_ref
        self.N_plus += bool(correct)
        self.N_ref_plus += has_ref and bool(correct)
        for w, n in counts.items():
            self.per_word_counts[w] += n

    @classmethod
    def from_texts(cls, texts: Sequence[str], correct: Sequence[bool]) -> "ReflectionStats":
        stats = cls()
        for t, c in zip(texts, correct):
            stats.add(t, c)
        return stats


RATIO_NAMES = (
    "reflection_ratio",
    "reflection_ratio_in_correct_answers",
    "reflection_ratio_in_incorrect_answers",
    "correct_ratio_in_reflection_texts",
    "correct_ratio_in_no_reflection_texts",
)


def _div(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def reflection_ratios(stats: ReflectionStats) -> dict[str, Optional[float]]:
    """The five ratios; ``None`` where the denominator is zero."""
    N, R, P, RP = stats.N, stats.N_ref, stats.N_plus, stats.N_ref_plus
    return {
        "reflection_ratio": _div(R, N),
        "reflection_ratio_in_correct_answers": _div(RP, P),
        "reflection_ratio_in_incorrect_answers": _div(R - RP, N - P),
        "correct_ratio_in_reflection_texts": _div(RP, R),
        "correct_ratio_in_no_reflection_texts": _div(P - RP, N - R),
    }


# ---------------------------------------------------------------------------
# validation / test accuracy

@dataclass(frozen=True)
class EvalConfig:
    config_id: str
    k: int
    temperature: float
    top_p: float

    def generation(self, max_tokens: int) -> GenerationConfig:
        return GenerationConfig(temperature=self.temperature, top_p=self.top_p, max_tokens=max_tokens,
                                n_samples=self.k)


EVAL_CONFIGS = {
    "pass8_t1": EvalConfig("pass8_t1", k=8, temperature=1.0, top_p=1.0),
    "pass1_t06": EvalConfig("pass1_t06", k=1, temperature=0.6, top_p=1.0),
    "pass1_t001": EvalConfig("pass1_t001", k=1, temperature=0.01, top_p=0.001),
}
# purpose tags that keep evaluation RNG streams apart from training rollouts
_EVAL_PURPOSE = {"pass8_t1": 11, "pass1_t06": 12, "pass1_t001": 13}

Sampler = Callable[[Query, GenerationConfig, np.random.Generator], Response]


def pass_at_k(correct: np.ndarray, k: int) -> float:
    """Fraction of rows with at least one success among the first ``k`` columns."""
    correct = np.asarray(correct, dtype=bool)
    if correct.ndim != 2 or correct.shape[0] == 0:
        raise ValueError("expected a non-empty (queries, samples) matrix")
    if not 1 <= k <= correct.shape[1]:
        raise ValueError(f"k={k} outside [1, {correct.shape[1]}]")
    return float(correct[:, :k].any(axis=1).mean())


def correctness_matrix(queries: Sequence[Query], cfg: EvalConfig, vocab: Vocabulary, sampler: Sampler, *,
                       seed: int, epoch: int, max_tokens: int) -> np.ndarray:
    gen = cfg.generation(max_tokens)
    purpose = _EVAL_PURPOSE.get(cfg.config_id, 10)
    out = np.zeros((len(queries), cfg.k), dtype=bool)
    for i, q in enumerate(queries):
        for j in range(cfg.k):
            resp = sampler(q, gen, rng_stream(seed, purpose, epoch, q.id, j))
            out[i, j] = score(resp.tokens, q.gold_answer, vocab).accuracy_reward == 1.0
    return out


def evaluate_split(params: Optional[PolicyParams], queries: Sequence[Query], config_id: str,
                   vocab: Vocabulary, *, seed: int = 0, epoch: int = 0, max_tokens: int = 32,
                   sampler: Optional[Sampler] = None) -> float:
    """pass@k accuracy of a policy on a split under one of the three eval configs.

    ``sampler`` overrides policy sampling (used to plug in synthetic policies).
    """
    if not queries:
        raise ValueError("cannot evaluate an empty split")
    if config_id not in EVAL_CONFIGS:
        raise ConfigError(f"unknown eval config {config_id!r}; expected one of {sorted(EVAL_CONFIGS)}")
    cfg = EVAL_CONFIGS[config_id]
    if sampler is None:
        if params is None:
            raise ValueError("either params or sampler is required")
        sampler = lambda q, gen, rng: sample(params, q, gen, rng, vocab)  # noqa: E731
    mat = correctness_matrix(queries, cfg, vocab, sampler, seed=seed, epoch=epoch, max_tokens=max_tokens)
    return pass_at_k(mat, cfg.k)


# ---------------------------------------------------------------------------
# summaries across epochs and runs

def accuracy_tabs(runs: Sequence[Sequence[float]]) -> dict[str, float]:
    """Per run: mean and max over epochs; each then averaged over runs."""
    if not runs or any(len(r) == 0 for r in runs):
        raise ValueError("need at least one run with at least one epoch")
    means = [float(np.mean(r)) for r in runs]
    maxes = [float(np.max(r)) for r in runs]
    return {"mean": float(np.mean(means)), "max": float(np.mean(maxes))}


@dataclass
class RunAggregate:
    x: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_runs: int


def aggregate_runs(curves: Sequence[tuple[Sequence[float], Sequence[float]]]) -> RunAggregate:
    """Pointwise mean and population std of ``(x, y)`` curves.

    Curves on differing x-grids are linearly resampled onto the coarsest
    grid (fewest points) restricted to the range all curves cover.
    """
    if not curves:
        raise ValueError("aggregate_runs needs at least one run")
    xs = [np.asarray(x, dtype=np.float64) for x, _ in curves]
    ys = [np.asarray(y, dtype=np.float64) for _, y in curves]
    if all(len(x) == len(xs[0]) and np.array_equal(x, xs[0]) for x in xs):
        grid = xs[0]
        stack = np.vstack(ys) if ys[0].size else np.zeros((len(ys), 0))
    else:
        lo = max(x.min() for x in xs)
        hi = min(x.max() for x in xs)
        base = min(xs, key=len)
        grid = base[(base >= lo) & (base <= hi)]
        stack = np.vstack([np.interp(grid, x, y) for x, y in zip(xs, ys)])
    return RunAggregate(x=grid, mean=stack.mean(axis=0), std=stack.std(axis=0), n_runs=len(curves))


def aggregate_nullable(values: Sequence[Optional[float]]) -> tuple[Optional[float], Optional[float]]:
    """Mean/std over the non-null entries of one x position."""
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    arr = np.asarray(present, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def epoch_accuracy(batch_correct: Sequence[int], batch_seen: Sequence[int]) -> float:
    """Cumulative accuracy over an epoch from per-batch tallies."""
    seen = int(np.sum(batch_seen))
    return float(np.sum(batch_correct) / seen) if seen else float("nan")


def format_optional(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def ratio_row(stats: ReflectionStats) -> Mapping[str, str]:
    return {name: format_optional(v) for name, v in reflection_ratios(stats).items()}
