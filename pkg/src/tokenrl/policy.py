"""A tanh recurrent token policy with exact backpropagation through time.

    h_0 = tanh(C @ context)
    h_t = tanh(A @ h_{t-1} + B @ emb[x_t] + b_h)
    logits_t = U @ h_t + b_out

The softmax runs over the emittable tokens only (PAD and BOS have
probability zero). Every sequence is evaluated on its own with fixed-shape
operations, so results never depend on how sequences are grouped into
chunks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation
from .rlcore import AdamState, TrainConfig, Trajectory, objective_logprob_grad, optimizer_step
from .taskgen import (BOX_OPEN, FILLER_WORDS, MARKER_TOKENS, REFLECTION_TOKENS, Dominance, Vocabulary,
                      build_prompt, context_dim_for, encode_context)

GREEDY_TEMPERATURE = 0.01
GREEDY_TOP_P = 0.001


@dataclass
class PolicyParams:
    emb: np.ndarray    # (V, E)
    A: np.ndarray      # (H, H)
    B: np.ndarray      # (H, E)
    C: np.ndarray      # (H, D)
    b_h: np.ndarray    # (H,)
    U: np.ndarray      # (V, H)
    b_out: np.ndarray  # (V,)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **arrays: np.ndarray) -> "PolicyParams":
        merged = self.arrays()
        merged.update(arrays)
        return PolicyParams(**merged)

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, like: "PolicyParams") -> "PolicyParams":
        out, pos = {}, 0
        for name, a in like.arrays().items():
            out[name] = np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy()
            pos += a.size
        return cls(**out)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, a in self.arrays().items():
            h.update(name.encode())
            h.update(repr(a.shape).encode())
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    @property
    def dims(self) -> dict[str, int]:
        return {"V": self.emb.shape[0], "E": self.emb.shape[1], "H": self.A.shape[0], "D": self.C.shape[1]}

    def check(self) -> None:
        V, E = self.emb.shape
        H = self.A.shape[0]
        D = self.C.shape[1]
        expected = {"emb": (V, E), "A": (H, H), "B": (H, E), "C": (H, D), "b_h": (H,), "U": (V, H),
                    "b_out": (V,)}
        for name, a in self.arrays().items():
            if a.shape != expected[name]:
                raise ContractViolation(f"{name} has shape {a.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(a)):
                raise ContractViolation(f"{name} has non-finite entries")


@dataclass(frozen=True)
class PolicySnapshot:
    """Read-only copy of parameters, used for the rollout and reference policies."""

    params: PolicyParams
    step: int
    weights_hash: str

    @classmethod
    def of(cls, params: PolicyParams, step: int = 0) -> "PolicySnapshot":
        frozen = params.copy()
        for a in frozen.arrays().values():
            a.setflags(write=False)
        return cls(params=frozen, step=step, weights_hash=frozen.content_hash())


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 2048
    n_samples: int = 1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if not isinstance(self.max_tokens, int) or self.max_tokens <= 0:
            raise ConfigError(f"max_tokens must be a positive integer, got {self.max_tokens}")
        if not isinstance(self.n_samples, int) or self.n_samples <= 0:
            raise ConfigError(f"n_samples must be a positive integer, got {self.n_samples}")

    @property
    def greedy(self) -> bool:
        return self.temperature <= GREEDY_TEMPERATURE and self.top_p <= GREEDY_TOP_P


@dataclass(frozen=True)
class Response:
    tokens: tuple[int, ...]
    finished: bool

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos_index(self) -> Optional[int]:
        return len(self.tokens) - 1 if self.finished else None


# ---------------------------------------------------------------------------
# forward / backward for one sequence


@dataclass
class _Trace:
    inputs: np.ndarray       # token ids fed to the recurrence, length T
    hs: np.ndarray           # (T + 1, H), hs[0] = h_0
    emb_x: np.ndarray        # (T, E)
    out_start: int           # index into hs of the state predicting response token 0
    logp_all: np.ndarray     # (L, |emittable|) log-softmax over emittable ids
    targets: np.ndarray      # (L,) column of each response token in the emittable axis


def _emittable_columns(vocab_size: int, emittable: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    lookup = np.full(vocab_size, -1, dtype=np.int64)
    lookup[emittable] = np.arange(len(emittable))
    cols = lookup[tokens]
    if np.any(cols < 0):
        raise ContractViolation("response contains a token the policy cannot emit (PAD/BOS or out of vocab)")
    return cols


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _forward(params: PolicyParams, prompt: np.ndarray, response: np.ndarray, context: np.ndarray,
             emittable: np.ndarray) -> _Trace:
    V = params.emb.shape[0]
    if len(response) == 0:
        raise ContractViolation("response must be non-empty")
    if np.any(prompt < 0) or np.any(prompt >= V) or np.any(response < 0) or np.any(response >= V):
        raise ContractViolation("token id out of vocabulary")
    targets = _emittable_columns(V, emittable, response)
    inputs = np.concatenate([prompt, response[:-1]]).astype(np.int64)
    T = len(inputs)
    emb_x = params.emb[inputs]
    pre_in = emb_x @ params.B.T + params.b_h
    hs = np.empty((T + 1, params.A.shape[0]))
    hs[0] = np.tanh(params.C @ context)
    A = params.A
    for t in range(T):
        hs[t + 1] = np.tanh(A @ hs[t] + pre_in[t])
    out_start = len(prompt)
    h_out = hs[out_start:]
    logits = h_out @ params.U[emittable].T + params.b_out[emittable]
    return _Trace(inputs=inputs, hs=hs, emb_x=emb_x, out_start=out_start, logp_all=_log_softmax(logits),
                  targets=targets)


def _backward(params: PolicyParams, trace: _Trace, context: np.ndarray, emittable: np.ndarray,
              dlp: np.ndarray, grad: PolicyParams) -> None:
    """Accumulate d(sum_j dlp[j] * logp_j)/d(params) into ``grad`` in place."""
    L = len(dlp)
    probs = np.exp(trace.logp_all)
    dz = -probs * dlp[:, None]
    dz[np.arange(L), trace.targets] += dlp
    h_out = trace.hs[trace.out_start:]
    grad.U[emittable] += dz.T @ h_out
    grad.b_out[emittable] += dz.sum(axis=0)

    T = len(trace.inputs)
    dh = np.zeros_like(trace.hs)
    dh[trace.out_start:] = dz @ params.U[emittable]
    da = np.empty((T, params.A.shape[0]))
    AT = params.A.T
    for t in range(T, 0, -1):
        da_t = dh[t] * (1.0 - trace.hs[t] ** 2)
        da[t - 1] = da_t
        dh[t - 1] += AT @ da_t
    grad.A += da.T @ trace.hs[:-1]
    grad.B += da.T @ trace.emb_x
    grad.b_h += da.sum(axis=0)
    np.add.at(grad.emb, trace.inputs, da @ params.B)
    d0 = dh[0] * (1.0 - trace.hs[0] ** 2)
    grad.C += np.outer(d0, context)


def _as_arrays(prompt, response, context):
    return (np.asarray(prompt, dtype=np.int64), np.asarray(response, dtype=np.int64),
            np.asarray(context, dtype=np.float64))


def sequence_logprobs(params: PolicyParams, prompt, response, context, vocab: Vocabulary) -> np.ndarray:
    prompt, response, context = _as_arrays(prompt, response, context)
    tr = _forward(params, prompt, response, context, vocab.emittable)
    return tr.logp_all[np.arange(len(response)), tr.targets]


def response_logprobs(params: PolicyParams, query, response_tokens, vocab: Vocabulary) -> np.ndarray:
    """Per-token log pi(o_t | prompt, context, o_<t) for a query's response."""
    return sequence_logprobs(params, query.prompt_tokens, response_tokens, query.context, vocab)


def next_token_distribution(params: PolicyParams, prompt, prefix, context, vocab: Vocabulary) -> np.ndarray:
    """Full-vocabulary probabilities for the token after ``prompt + prefix``."""
    prompt, prefix, context = _as_arrays(prompt, prefix, context)
    h = np.tanh(params.C @ context)
    for x in np.concatenate([prompt, prefix]):
        h = np.tanh(params.A @ h + params.B @ params.emb[x] + params.b_h)
    z = params.U[vocab.emittable] @ h + params.b_out[vocab.emittable]
    out = np.zeros(len(vocab))
    out[vocab.emittable] = np.exp(_log_softmax(z))
    return out


# ---------------------------------------------------------------------------
# sampling


def rng_stream(*key: int) -> np.random.Generator:
    """Independent generator keyed by integers, e.g. (run_seed, purpose, epoch, query_id, sample)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def _pick(z: np.ndarray, gen: GenerationConfig, rng: Optional[np.random.Generator]) -> int:
    """Column index into the emittable axis."""
    if gen.greedy or rng is None:
        return int(np.argmax(z))  # first max = lowest token id
    p = np.exp(_log_softmax(z / gen.temperature))
    if gen.top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        csum = np.cumsum(p[order])
        keep = int(np.searchsorted(csum, gen.top_p, side="left")) + 1
        kept = order[:min(keep, len(order))]
        q = np.zeros_like(p)
        q[kept] = p[kept]
        p = q
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def sample(params: PolicyParams, query, gen: GenerationConfig, rng: Optional[np.random.Generator],
           vocab: Vocabulary) -> Response:
    """Draw one response; stops at EOS or after ``gen.max_tokens`` tokens."""
    return sample_tokens(params, query.prompt_tokens, query.context, gen, rng, vocab)


def sample_tokens(params: PolicyParams, prompt, context, gen: GenerationConfig,
                  rng: Optional[np.random.Generator], vocab: Vocabulary) -> Response:
    prompt = np.asarray(prompt, dtype=np.int64)
    context = np.asarray(context, dtype=np.float64)
    em = vocab.emittable
    U_em, b_em = params.U[em], params.b_out[em]
    A, B, emb, b_h = params.A, params.B, params.emb, params.b_h
    h = np.tanh(params.C @ context)
    for x in prompt:
        h = np.tanh(A @ h + B @ emb[x] + b_h)
    out: list[int] = []
    for _ in range(gen.max_tokens):
        tok = int(em[_pick(U_em @ h + b_em, gen, rng)])
        out.append(tok)
        if tok == vocab.eos:
            return Response(tokens=tuple(out), finished=True)
        h = np.tanh(A @ h + B @ emb[tok] + b_h)
    return Response(tokens=tuple(out), finished=False)


# ---------------------------------------------------------------------------
# gradients


def loss_gradient(params: PolicyParams, trajs: Sequence[Trajectory], cfg: TrainConfig, vocab: Vocabulary,
                  batch_denominator: Optional[int] = None, grad: Optional[PolicyParams] = None):
    """Gradient of the clipped objective (loss form) over a minibatch.

    Per-response contributions are added into ``grad`` in list order, so
    splitting a minibatch into accumulation chunks reproduces the same sum.
    Returns ``(grad, new_logprobs)``.
    """
    denom = batch_denominator or len(trajs)
    grad = params.zeros_like() if grad is None else grad
    new_lps = []
    for traj in trajs:
        prompt, response, context = _as_arrays(traj.query_tokens, traj.response_tokens, traj.context)
        tr = _forward(params, prompt, response, context, vocab.emittable)
        lp = tr.logp_all[np.arange(len(response)), tr.targets]
        new_lps.append(lp)
        dlp = objective_logprob_grad(lp, traj, cfg, denom)
        _backward(params, tr, context, vocab.emittable, dlp, grad)
    return grad, new_lps


def logprob_weighted_gradient(params: PolicyParams, prompt, response, context, weights,
                              vocab: Vocabulary, grad: Optional[PolicyParams] = None) -> PolicyParams:
    """Gradient of ``sum_t weights[t] * logp_t``; the building block for custom objectives."""
    prompt, response, context = _as_arrays(prompt, response, context)
    grad = params.zeros_like() if grad is None else grad
    tr = _forward(params, prompt, response, context, vocab.emittable)
    _backward(params, tr, context, vocab.emittable, np.asarray(weights, dtype=np.float64), grad)
    return grad


# ---------------------------------------------------------------------------
# initialization


@dataclass(frozen=True)
class PolicyDims:
    E: int = 32
    H: int = 128
    D: int = context_dim_for(99)


WARM_START_STEPS = 200
WARM_START_BATCH = 32
WARM_START_LR = 1e-2
EMB_SCALE = 0.3
REC_GAIN = 1.0
# a partial copy skill: strong enough for RL to find reward, weak enough to leave headroom
WARM_START_COPY_FRACTION = 0.85


def _template_response(vocab: Vocabulary, rng: np.random.Generator, answer_hi: int, answer: int,
                       copy_fraction: float) -> list[int]:
    words = [vocab.id(w) for w in FILLER_WORDS + REFLECTION_TOKENS]
    prefix_len = int(rng.choice([0, 0, 1, 2, 3]))
    head = [words[int(i)] for i in rng.integers(0, len(words), size=prefix_len)]
    if rng.random() < 0.02:
        head.append(vocab.id(MARKER_TOKENS[int(rng.integers(len(MARKER_TOKENS)))]))
    value = answer if rng.random() < copy_fraction else int(rng.integers(0, answer_hi + 1))
    return head + [vocab.box_open] + vocab.digits_of(value) + [vocab.brace_close, vocab.eos]


def init_policy(vocab: Vocabulary, dims: PolicyDims, seed: int, warm_start: bool = False,
                warm_start_steps: int = WARM_START_STEPS, answer_hi: int = 99,
                copy_fraction: float = WARM_START_COPY_FRACTION) -> PolicyParams:
    """Random small-weight policy; with ``warm_start`` it is additionally fitted
    by supervised steps on boxed-answer template strings. A ``copy_fraction``
    of the templates box the true answer, the rest a random number, so the
    start knows the format and only part of the task."""
    if min(dims.E, dims.H, dims.D) <= 0:
        raise ContractViolation("policy dimensions must be positive")
    rng = rng_stream(seed, 0x1A17)
    V, E, H, D = len(vocab), dims.E, dims.H, dims.D
    params = PolicyParams(
        emb=rng.normal(0.0, EMB_SCALE, (V, E)),
        A=rng.normal(0.0, REC_GAIN / np.sqrt(H), (H, H)),
        B=rng.normal(0.0, 1.0 / np.sqrt(E), (H, E)),
        C=rng.normal(0.0, 1.0 / np.sqrt(D), (H, D)),
        b_h=np.zeros(H),
        U=rng.normal(0.0, 0.01, (V, H)),
        b_out=np.zeros(V),
    )
    if not warm_start:
        return params
    n_blocks = len(str(answer_hi))
    if D < 10 * n_blocks:
        raise ContractViolation(f"context dim {D} too small for answers up to {answer_hi}")
    state = AdamState.zeros_like(params)
    for _ in range(warm_start_steps):
        grad = params.zeros_like()
        for _ in range(WARM_START_BATCH):
            answer = int(rng.integers(0, answer_hi + 1))
            prompt = build_prompt(vocab, answer, Dominance.TEXT, rng)
            ctx = encode_context(answer, n_blocks, rng)
            ctx = np.resize(ctx, D) if len(ctx) >= D else np.concatenate([ctx, np.zeros(D - len(ctx))])
            resp = _template_response(vocab, rng, answer_hi, answer, copy_fraction)
            w = np.full(len(resp), -1.0 / (len(resp) * WARM_START_BATCH))
            logprob_weighted_gradient(params, prompt, resp, ctx, w, vocab, grad=grad)
        params, state, _ = optimizer_step(params, grad, state, WARM_START_LR, 1.0)
    return params


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    blocks = [{"name": k, "shape": list(a.shape)} for k, a in params.arrays().items()]
    doc = {
        "header": {"format": "tokenrl-policy-v1", "blocks": blocks, "sha256": params.content_hash()},
        "data": {k: [float(x) for x in a.ravel()] for k, a in params.arrays().items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> PolicyParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    arrays = {}
    for block in doc["header"]["blocks"]:
        arrays[block["name"]] = np.asarray(doc["data"][block["name"]], dtype=np.float64).reshape(block["shape"])
    params = PolicyParams(**arrays)
    if params.content_hash() != doc["header"]["sha256"]:
        raise ContractViolation(f"checkpoint {path} failed its content hash check")
    return params
