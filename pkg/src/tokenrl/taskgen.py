"""Synthetic verifiable tasks, the token vocabulary, and dataset files.

A query asks the policy to emit an integer inside ``\\boxed{...}``. In the
text-dominant variant the answer digits are part of the prompt (a copy task);
in the vision-dominant variant the prompt carries distractor digits and the
answer is only recoverable from the context vector.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DatasetParseError

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
BOX_OPEN = "\\boxed{"
BRACE_CLOSE = "}"
PROMPT_END = "?"
DIGITS = tuple(str(d) for d in range(10))
PROMPT_WORDS = (" compute", " answer", " in", " box")
FILLER_WORDS = (" let", " me", " so", " the", " result", " is", ".")
# every entry of the 15-word reflection list, as a single token
REFLECTION_TOKENS = (
    " re-check", " re-evaluate", " re-examine", " re-think", " recheck",
    " reevaluate", " reexamine", " reevaluation", " rethink", " check again",
    " think again", " try again", " verify", " wait", " yet",
)
MARKER_TOKENS = (" 答案", " 等等")

NOISE_DIMS = 4
NOISE_SCALE = 0.1


class Dominance(str, enum.Enum):
    TEXT = "text"
    VISION = "vision"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Vocabulary:
    """Ordered token alphabet with named special ids.

    Token strings form a prefix-free code, so ``encode(decode(ids)) == ids``
    via greedy longest match.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ConfigError("duplicate token strings in vocabulary")
        for name in (PAD, BOS, EOS, BOX_OPEN, BRACE_CLOSE, PROMPT_END, *DIGITS):
            if name not in self._index:
                raise ConfigError(f"vocabulary is missing required token {name!r}")
        self.pad = self._index[PAD]
        self.bos = self._index[BOS]
        self.eos = self._index[EOS]
        self.box_open = self._index[BOX_OPEN]
        self.brace_close = self._index[BRACE_CLOSE]
        self.prompt_end = self._index[PROMPT_END]
        self.digits = tuple(self._index[d] for d in DIGITS)
        self.reflection_ids = tuple(self._index[t] for t in REFLECTION_TOKENS if t in self._index)
        self.marker_ids = frozenset(self._index[t] for t in MARKER_TOKENS if t in self._index)
        # PAD and BOS are never emitted by the policy
        self.emittable = np.array(
            [i for i in range(len(self.tokens)) if i not in (self.pad, self.bos)], dtype=np.int64
        )
        self._max_len = max(len(t) for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[int(i)] for i in ids)

    def encode(self, text: str) -> list[int]:
        ids = []
        pos = 0
        while pos < len(text):
            for n in range(min(self._max_len, len(text) - pos), 0, -1):
                tid = self._index.get(text[pos:pos + n])
                if tid is not None:
                    ids.append(tid)
                    pos += n
                    break
            else:
                raise ValueError(f"cannot tokenize text at offset {pos}: {text[pos:pos + 10]!r}")
        return ids

    def digits_of(self, value: int) -> list[int]:
        return [self.digits[int(c)] for c in str(value)]

    @property
    def vocab_hash(self) -> str:
        blob = json.dumps(list(self.tokens), ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def default_vocabulary() -> Vocabulary:
    return Vocabulary(
        (PAD, BOS, EOS, BOX_OPEN, BRACE_CLOSE, PROMPT_END)
        + DIGITS + PROMPT_WORDS + FILLER_WORDS + REFLECTION_TOKENS + MARKER_TOKENS
    )


@dataclass(frozen=True)
class Query:
    id: int
    prompt_tokens: tuple[int, ...]
    context: tuple[float, ...]
    gold_answer: int
    dominance: Dominance
    split: Split

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "prompt_tokens": list(self.prompt_tokens),
            "context": list(self.context),
            "gold_answer": self.gold_answer,
            "dominance": self.dominance.value,
            "split": self.split.value,
        }


@dataclass
class Dataset:
    queries: list[Query]
    split_sizes: dict[str, int]
    seed: int
    vocab_hash: str = field(default_factory=lambda: default_vocabulary().vocab_hash)

    def split(self, which: Split | str) -> list[Query]:
        which = Split(which)
        return [q for q in self.queries if q.split is which]

    @property
    def context_dim(self) -> int:
        return len(self.queries[0].context) if self.queries else 0


@dataclass(frozen=True)
class TaskSpec:
    n_train: int
    n_val: int
    n_test: int
    dominance_mix: float = 1.0
    answer_range: tuple[int, int] = (0, 99)
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.dominance_mix <= 1.0:
            raise ConfigError(f"dominance_mix must lie in [0, 1], got {self.dominance_mix}")
        lo, hi = self.answer_range
        if lo > hi:
            raise ConfigError(f"answer_range [{lo}, {hi}] is empty")
        if lo < 0:
            raise ConfigError("answer_range must be non-negative (digit tokens only)")


def context_dim_for(answer_hi: int) -> int:
    return 10 * len(str(answer_hi)) + NOISE_DIMS


def encode_context(answer: int, n_blocks: int, rng: np.random.Generator) -> np.ndarray:
    """One-hot digit blocks (most significant first) plus small uniform noise."""
    ctx = rng.uniform(0.0, NOISE_SCALE, size=10 * n_blocks + NOISE_DIMS)
    for b, ch in enumerate(str(answer).zfill(n_blocks)):
        ctx[10 * b + int(ch)] = 1.0
    return ctx


def decode_context(context: Sequence[float]) -> int:
    """Inverse of :func:`encode_context`."""
    ctx = np.asarray(context)
    n_blocks = (len(ctx) - NOISE_DIMS) // 10
    return int("".join(str(int(np.argmax(ctx[10 * b:10 * b + 10]))) for b in range(n_blocks)))


def _contains(seq: Sequence[int], sub: Sequence[int]) -> bool:
    n = len(sub)
    return any(tuple(seq[i:i + n]) == tuple(sub) for i in range(len(seq) - n + 1))


def build_prompt(
    vocab: Vocabulary, answer: int, dominance: Dominance, rng: np.random.Generator
) -> list[int]:
    middle = vocab.digits_of(answer)
    if dominance is Dominance.VISION:
        while True:
            n = int(rng.integers(1, 4))
            distractor = [vocab.digits[int(d)] for d in rng.integers(0, 10, size=n)]
            if not _contains(distractor, middle):
                middle = distractor
                break
    # digits sit right before the terminator: short recall distance for the policy
    return [vocab.bos] + [vocab.id(w) for w in PROMPT_WORDS] + middle + [vocab.prompt_end]


def generate_dataset(spec: TaskSpec, vocab: Vocabulary | None = None) -> Dataset:
    spec.validate()
    vocab = vocab or default_vocabulary()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.answer_range
    n_blocks = len(str(hi))
    splits = [Split.TRAIN] * spec.n_train + [Split.VAL] * spec.n_val + [Split.TEST] * spec.n_test
    queries = []
    for qid, split in enumerate(splits):
        dominance = Dominance.TEXT if rng.random() < spec.dominance_mix else Dominance.VISION
        answer = int(rng.integers(lo, hi + 1))
        prompt = build_prompt(vocab, answer, dominance, rng)
        ctx = encode_context(answer, n_blocks, rng)
        queries.append(Query(
            id=qid,
            prompt_tokens=tuple(prompt),
            context=tuple(float(x) for x in ctx),
            gold_answer=answer,
            dominance=dominance,
            split=split,
        ))
    return Dataset(
        queries=queries,
        split_sizes={"train": spec.n_train, "val": spec.n_val, "test": spec.n_test},
        seed=spec.seed,
        vocab_hash=vocab.vocab_hash,
    )


def dumps_dataset(ds: Dataset) -> str:
    header = {"seed": ds.seed, "vocab_hash": ds.vocab_hash, "split_sizes": ds.split_sizes}
    lines = [json.dumps(header)]
    lines.extend(json.dumps(q.to_json()) for q in ds.queries)
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


_ROW_KEYS = {"id", "prompt_tokens", "context", "gold_answer", "dominance", "split"}


def _parse_row(obj: object, line: int) -> Query:
    if not isinstance(obj, dict) or set(obj) != _ROW_KEYS:
        raise DatasetParseError(f"expected an object with keys {sorted(_ROW_KEYS)}", line)
    try:
        prompt = tuple(obj["prompt_tokens"])
        context = tuple(float(x) for x in obj["context"])
        if not all(isinstance(t, int) and not isinstance(t, bool) for t in prompt) or not prompt:
            raise ValueError("prompt_tokens must be a non-empty list of ints")
        if not isinstance(obj["id"], int) or not isinstance(obj["gold_answer"], int):
            raise ValueError("id and gold_answer must be integers")
        return Query(
            id=obj["id"],
            prompt_tokens=prompt,
            context=context,
            gold_answer=obj["gold_answer"],
            dominance=Dominance(obj["dominance"]),
            split=Split(obj["split"]),
        )
    except (TypeError, ValueError) as exc:
        raise DatasetParseError(str(exc), line) from exc


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetParseError("empty file, missing header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"invalid JSON header: {exc.msg}", 1) from exc
    if not isinstance(header, dict) or {"seed", "vocab_hash", "split_sizes"} - set(header):
        raise DatasetParseError("header must carry seed, vocab_hash and split_sizes", 1)
    sizes = header["split_sizes"]
    if not isinstance(sizes, dict) or set(sizes) != {s.value for s in Split}:
        raise DatasetParseError("split_sizes must give train/val/test counts", 1)

    queries: list[Query] = []
    seen: set[int] = set()
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"invalid JSON: {exc.msg}", lineno) from exc
        q = _parse_row(obj, lineno)
        if q.id in seen:
            raise DatasetParseError(f"duplicate query id {q.id}", lineno)
        seen.add(q.id)
        queries.append(q)

    counts = {s.value: 0 for s in Split}
    for q in queries:
        counts[q.split.value] += 1
    if counts != sizes:
        raise DatasetParseError(
            f"split counts {counts} disagree with header split_sizes {sizes}", len(lines)
        )
    return Dataset(
        queries=queries, split_sizes=dict(sizes), seed=header["seed"], vocab_hash=header["vocab_hash"]
    )


def read_dataset(path: str | Path) -> Dataset:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))
