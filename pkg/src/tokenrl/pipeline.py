"""The four-step training iteration and the run driver.

I.   step1_prepare: pad query prompts into model inputs.
II.  step2_collect: sync weights into the sampling engine, sample one
     response per query, pad responses to an aligned length.
III. step3_build_trajectories: concatenate query + response, recompute
     masks/positions, score old and reference log-probs in chunks, reward.
IV.  step4_update: token rewards, advantages, shuffled minibatch updates.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evalscheme as ev
from .config import RunConfig
from .errors import ConfigError, NonFiniteError, PipelineFault
from .policy import (GenerationConfig, PolicyDims, PolicyParams, PolicySnapshot, Response, init_policy,
                     loss_gradient, rng_stream, sample, save_checkpoint, sequence_logprobs)
from .rewards import score
from .rlcore import (AdamState, TrainConfig, Trajectory, assemble_token_rewards, clipped_objective,
                     estimate_advantages, lr_schedule, normalize_advantages, optimizer_step)
from .taskgen import Dataset, Query, Split, Vocabulary, default_vocabulary

log = logging.getLogger(__name__)

# RNG purpose tags; evaluation uses 11..13 (see evalscheme)
PURPOSE_ROLLOUT = 1
PURPOSE_ORDER = 2
PURPOSE_SHUFFLE = 3

MAX_PROMPT_LEN = 64


# ---------------------------------------------------------------------------
# Step I


@dataclass
class ModelInputs:
    queries: list[Query]
    input_ids: np.ndarray       # (B, P_max), right-padded with PAD
    attention_mask: np.ndarray  # (B, P_max)
    context: np.ndarray         # (B, D)
    query_tokens: list[tuple[int, ...]]


def step1_prepare(queries: Sequence[Query], vocab: Vocabulary, max_prompt_len: int = MAX_PROMPT_LEN) -> ModelInputs:
    if not queries:
        raise ConfigError("cannot prepare an empty batch")
    for q in queries:
        if q.split is not Split.TRAIN:
            raise ConfigError(f"query {q.id} is from the {q.split.value} split, not train")
        if len(q.prompt_tokens) > max_prompt_len:
            raise ConfigError(f"query {q.id} prompt length {len(q.prompt_tokens)} exceeds {max_prompt_len}")
    width = max(len(q.prompt_tokens) for q in queries)
    ids = np.full((len(queries), width), vocab.pad, dtype=np.int64)
    mask = np.zeros((len(queries), width), dtype=np.int64)
    for i, q in enumerate(queries):
        ids[i, :len(q.prompt_tokens)] = q.prompt_tokens
        mask[i, :len(q.prompt_tokens)] = 1
    context = np.array([q.context for q in queries], dtype=np.float64)
    return ModelInputs(list(queries), ids, mask, context, [tuple(q.prompt_tokens) for q in queries])


def strip_padding(inputs: ModelInputs) -> list[tuple[int, ...]]:
    return [tuple(int(t) for t in row[m == 1]) for row, m in zip(inputs.input_ids, inputs.attention_mask)]


# ---------------------------------------------------------------------------
# Step II


class SamplingEngine:
    """In-process stand-in for a separate inference engine.

    Holds its own frozen copy of the weights; the pipeline must call
    :meth:`sync_weights` after every update before collecting again.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._snapshot: Optional[PolicySnapshot] = None

    def sync_weights(self, snapshot: PolicySnapshot) -> None:
        self._snapshot = snapshot

    @property
    def weights_hash(self) -> Optional[str]:
        return None if self._snapshot is None else self._snapshot.weights_hash

    def generate(self, query: Query, gen: GenerationConfig, rng: Optional[np.random.Generator]) -> Response:
        if self._snapshot is None:
            raise PipelineFault("sampling engine has no weights; call sync_weights first")
        return sample(self._snapshot.params, query, gen, rng, self.vocab)


@dataclass
class RolloutBatch:
    queries: list[Query]
    responses: list[Response]
    padded: np.ndarray           # (B, L_max) response tokens right-padded with PAD
    response_mask: np.ndarray    # (B, L_max)
    generation_step: int


def pad_responses(responses: Sequence[Response], pad: int) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(r) for r in responses), default=0)
    out = np.full((len(responses), width), pad, dtype=np.int64)
    mask = np.zeros((len(responses), width), dtype=np.int64)
    for i, r in enumerate(responses):
        out[i, :len(r)] = r.tokens
        mask[i, :len(r)] = 1
    return out, mask


def step2_collect(engine: SamplingEngine, inputs: ModelInputs, gen: GenerationConfig, live_params: PolicyParams,
                  *, seed: int, epoch: int, generation_step: int) -> RolloutBatch:
    live_hash = live_params.content_hash()
    if engine.weights_hash != live_hash:
        raise PipelineFault(
            f"sampling engine is stale (engine {str(engine.weights_hash)[:12]}, live {live_hash[:12]}); "
            "sync_weights was skipped after an update"
        )
    responses = [
        engine.generate(q, gen, rng_stream(seed, PURPOSE_ROLLOUT, epoch, q.id, 0)) for q in inputs.queries
    ]
    padded, mask = pad_responses(responses, engine.vocab.pad)
    return RolloutBatch(list(inputs.queries), responses, padded, mask, generation_step)


# ---------------------------------------------------------------------------
# Step III


def _concat_masks(prompt_len: int, resp_len: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    real = prompt_len + resp_len
    mask = np.zeros(width, dtype=np.int64)
    mask[:real] = 1
    pos = np.zeros(width, dtype=np.int64)
    pos[:real] = np.arange(real)
    return mask, pos


def step3_build_trajectories(batch: RolloutBatch, params: PolicyParams, ref: PolicySnapshot, cfg: TrainConfig,
                             vocab: Vocabulary, lambda_lang: float = 0.5) -> list[Trajectory]:
    """Score responses under the current and reference policies, chunk by chunk."""
    prompt_width = max(len(q.prompt_tokens) for q in batch.queries)
    width = prompt_width + batch.padded.shape[1]
    trajs: list[Trajectory] = []
    n = len(batch.queries)
    for start in range(0, n, cfg.forward_batch_size):
        for i in range(start, min(start + cfg.forward_batch_size, n)):
            q, resp = batch.queries[i], batch.responses[i]
            tokens = np.asarray(resp.tokens, dtype=np.int64)
            old = sequence_logprobs(params, q.prompt_tokens, tokens, q.context, vocab)
            ref_lp = sequence_logprobs(ref.params, q.prompt_tokens, tokens, q.context, vocab)
            mask, pos = _concat_masks(len(q.prompt_tokens), len(tokens), width)
            text = vocab.decode(tokens)
            counts = ev.count_reflection_words(text)
            trajs.append(Trajectory(
                query_id=q.id,
                query_tokens=np.asarray(q.prompt_tokens, dtype=np.int64),
                response_tokens=tokens,
                context=np.asarray(q.context, dtype=np.float64),
                attention_mask=mask,
                position_ids=pos,
                old_logprobs=old,
                ref_logprobs=ref_lp,
                reward=score(tokens, q.gold_answer, vocab, lambda_lang),
                eos_index=resp.eos_index,
                reflection_flags={w: w in counts for w in ev.REFLECTION_WORDS},
            ))
    return trajs


# ---------------------------------------------------------------------------
# Step IV


@dataclass
class StepCounters:
    generation_steps: int = 0
    gradient_steps: int = 0
    backward_passes: int = 0
    epoch: int = 0


@dataclass
class UpdateStats:
    loss: float
    pg_loss: float
    kl_loss: float
    mean_ratio: float
    clip_fraction: float
    grad_norm: float
    lr: float


def prepare_advantages(trajs: Sequence[Trajectory], cfg: TrainConfig) -> None:
    for t in trajs:
        t.token_rewards = assemble_token_rewards(t, cfg)
        t.advantages = estimate_advantages(t.token_rewards, cfg.gamma)
    if cfg.advantage_normalization:
        for t, a in zip(trajs, normalize_advantages([t.advantages for t in trajs])):
            t.advantages = a


def step4_update(trajs: Sequence[Trajectory], params: PolicyParams, opt_state: AdamState, cfg: TrainConfig,
                 counters: StepCounters, vocab: Vocabulary, total_steps: int):
    """Run ``(batch_size // ppo_batch_size) * ppo_epochs`` optimizer steps.

    Returns ``(params, opt_state, counters, stats)``.
    """
    if len(trajs) != cfg.batch_size:
        raise PipelineFault(f"expected {cfg.batch_size} trajectories, got {len(trajs)}")
    prepare_advantages(trajs, cfg)
    stats: list[UpdateStats] = []
    n_mini = cfg.batch_size // cfg.ppo_batch_size
    for ppo_epoch in range(cfg.ppo_epochs):
        order = rng_stream(cfg.seed, PURPOSE_SHUFFLE, counters.generation_steps, ppo_epoch).permutation(len(trajs))
        for m in range(n_mini):
            mini = [trajs[i] for i in order[m * cfg.ppo_batch_size:(m + 1) * cfg.ppo_batch_size]]
            grad = params.zeros_like()
            new_lps: list[np.ndarray] = []
            for a in range(cfg.gradient_accumulation_steps):
                micro = mini[a * cfg.ppo_backward_batch_size:(a + 1) * cfg.ppo_backward_batch_size]
                _, lps = loss_gradient(params, micro, cfg, vocab, batch_denominator=cfg.ppo_batch_size, grad=grad)
                new_lps.extend(lps)
                counters.backward_passes += 1
            obj = clipped_objective(new_lps, mini, cfg)
            if not math.isfinite(obj.loss):
                raise NonFiniteError(
                    f"non-finite loss {obj.loss} at gradient step {counters.gradient_steps} "
                    f"(generation step {counters.generation_steps})"
                )
            lr = lr_schedule(min(counters.gradient_steps + 1, total_steps), total_steps, cfg)
            params, opt_state, gnorm = optimizer_step(params, grad, opt_state, lr, cfg.clip_grad_norm)
            counters.gradient_steps += 1
            stats.append(UpdateStats(obj.loss, obj.pg_loss, obj.kl_loss, obj.mean_ratio, obj.clip_fraction,
                                     gnorm, lr))
    return params, opt_state, counters, stats


# ---------------------------------------------------------------------------
# driver


def generation_steps_per_epoch(n_train: int, rollout_batch: int, drop_last: bool = True) -> int:
    if drop_last:
        return n_train // rollout_batch
    return -(-n_train // rollout_batch)


TRAIN_COLUMNS = (["epoch", "generation_step", "train_acc", "mean_len"] + list(ev.RATIO_NAMES)
                 + [f"count_{w}" for w in ev.REFLECTION_WORDS])
EVAL_COLUMNS = ["epoch", "split", "config_id", "accuracy"]
REFLECTION_COLUMNS = ["epoch", "generation_step", "N", "N_ref", "N_plus", "N_ref_plus"]


@dataclass
class RunSpec:
    dataset: Dataset
    config: RunConfig
    out_dir: Optional[Path] = None
    vocab: Vocabulary = field(default_factory=default_vocabulary)
    dataset_path: Optional[str] = None


@dataclass
class RunResult:
    counters: StepCounters
    train_accuracy: list[float]
    eval_accuracy: dict[tuple[str, str], list[float]]
    params: PolicyParams
    run_dir: Optional[Path]
    events: list[dict] = field(default_factory=list)


class _CsvSink:
    def __init__(self, path: Optional[Path], columns: Sequence[str]):
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._w = csv.writer(self._fh, lineterminator="\n")
            self._w.writerow(columns)
            self._fh.flush()

    def write(self, row: Sequence) -> None:
        if self._fh is not None:
            self._w.writerow(row)
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_manifest(run_dir: Path, status: str, **extra) -> None:
    doc = {"status": status, "updated": _dt.datetime.now(_dt.timezone.utc).isoformat(), **extra}
    (run_dir / "MANIFEST.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def train(spec: RunSpec) -> RunResult:
    """Full run: baseline evaluation, then ``epochs`` passes of the four steps."""
    rc = spec.config
    cfg, gen, vocab = rc.train, rc.generation, spec.vocab
    train_qs = spec.dataset.split(Split.TRAIN)
    steps_per_epoch = generation_steps_per_epoch(len(train_qs), cfg.batch_size, cfg.drop_last)
    if cfg.epochs > 0 and steps_per_epoch == 0:
        raise ConfigError(f"{len(train_qs)} training queries cannot fill one batch of {cfg.batch_size}")
    total_steps = max(cfg.epochs * steps_per_epoch * cfg.updates_per_generation_step, 1)

    run_dir = None
    if spec.out_dir is not None:
        run_dir = Path(spec.out_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        write_manifest(run_dir, "running", seed=cfg.seed)
        resolved = rc.to_flat()
        resolved["dataset"] = {"path": spec.dataset_path, "seed": spec.dataset.seed,
                               "vocab_hash": spec.dataset.vocab_hash, "split_sizes": spec.dataset.split_sizes}
        (run_dir / "config.json").write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")

    sinks = {
        "train": _CsvSink(run_dir and run_dir / "metrics_train.csv", TRAIN_COLUMNS),
        "eval": _CsvSink(run_dir and run_dir / "metrics_eval.csv", EVAL_COLUMNS),
        "refl": _CsvSink(run_dir and run_dir / "reflection.csv", REFLECTION_COLUMNS),
    }
    events_fh = open(run_dir / "events.jsonl", "w", encoding="utf-8") if run_dir else None

    dims = PolicyDims(E=rc.policy.embed_dim, H=rc.policy.hidden_dim, D=spec.dataset.context_dim)
    answer_hi = max((q.gold_answer for q in spec.dataset.queries), default=99)
    params = init_policy(vocab, dims, seed=cfg.seed, warm_start=rc.policy.warm_start,
                         warm_start_steps=rc.policy.warm_start_steps, answer_hi=max(answer_hi, 9),
                         copy_fraction=rc.policy.warm_start_copy_fraction)
    ref = PolicySnapshot.of(params, step=0)
    if run_dir:
        save_checkpoint(params, run_dir / "checkpoints" / "init.json")
    opt_state = AdamState.zeros_like(params)
    counters = StepCounters()
    engine = SamplingEngine(vocab)
    eval_max_tokens = gen.max_tokens
    result = RunResult(counters, [], {}, params, run_dir)

    def run_eval(epoch: int, p: PolicyParams) -> None:
        for split in rc.eval.eval_splits:
            qs = spec.dataset.split(split)
            if not qs:
                continue
            for cid in rc.eval.eval_configs:
                acc = ev.evaluate_split(p, qs, cid, vocab, seed=cfg.seed, epoch=epoch, max_tokens=eval_max_tokens)
                result.eval_accuracy.setdefault((split, cid), []).append(acc)
                sinks["eval"].write([epoch, split, cid, _fmt(acc)])

    def emit_event(doc: dict) -> None:
        result.events.append(doc)
        if events_fh:
            events_fh.write(json.dumps(doc) + "\n")
            events_fh.flush()

    try:
        run_eval(0, params)
        for epoch in range(1, cfg.epochs + 1):
            counters.epoch = epoch
            order = rng_stream(cfg.seed, PURPOSE_ORDER, epoch).permutation(len(train_qs))
            if not cfg.drop_last and len(order) % cfg.batch_size:
                fill = cfg.batch_size - len(order) % cfg.batch_size
                order = np.concatenate([order, order[:fill]])
            epoch_correct: list[int] = []
            epoch_seen: list[int] = []
            for b in range(steps_per_epoch):
                batch_qs = [train_qs[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                inputs = step1_prepare(batch_qs, vocab)
                engine.sync_weights(PolicySnapshot.of(params, step=counters.gradient_steps))
                rollout = step2_collect(engine, inputs, gen, params, seed=cfg.seed, epoch=epoch,
                                        generation_step=counters.generation_steps)
                counters.generation_steps += 1
                trajs = step3_build_trajectories(rollout, params, ref, cfg, vocab, rc.reward.lambda_lang)
                params, opt_state, counters, stats = step4_update(trajs, params, opt_state, cfg, counters, vocab,
                                                                  total_steps)

                n_correct = sum(t.correct for t in trajs)
                epoch_correct.append(n_correct)
                epoch_seen.append(len(trajs))
                refl = ev.ReflectionStats.from_texts([vocab.decode(t.response_tokens) for t in trajs],
                                                     [t.correct for t in trajs])
                ratios = ev.reflection_ratios(refl)
                mean_len = float(np.mean([t.response_length for t in trajs]))
                train_acc = ev.epoch_accuracy(epoch_correct, epoch_seen)
                sinks["train"].write(
                    [epoch, counters.generation_steps, _fmt(train_acc), _fmt(mean_len)]
                    + [_fmt(ratios[n]) for n in ev.RATIO_NAMES]
                    + [refl.per_word_counts[w] for w in ev.REFLECTION_WORDS]
                )
                sinks["refl"].write([epoch, counters.generation_steps, refl.N, refl.N_ref, refl.N_plus,
                                     refl.N_ref_plus])
                emit_event({
                    "epoch": epoch,
                    "generation_step": counters.generation_steps,
                    "gradient_steps": counters.gradient_steps,
                    "batch_accuracy": n_correct / len(trajs),
                    "loss": float(np.mean([s.loss for s in stats])),
                    "pg_loss": float(np.mean([s.pg_loss for s in stats])),
                    "kl_loss": float(np.mean([s.kl_loss for s in stats])),
                    "mean_ratio": float(np.mean([s.mean_ratio for s in stats])),
                    "first_mean_ratio": stats[0].mean_ratio,
                    "clip_fraction": float(np.mean([s.clip_fraction for s in stats])),
                    "grad_norm": float(np.mean([s.grad_norm for s in stats])),
                    "lr": stats[-1].lr,
                })
            acc = ev.epoch_accuracy(epoch_correct, epoch_seen)
            result.train_accuracy.append(acc)
            log.info("seed %d epoch %d train_acc %.4f", cfg.seed, epoch, acc)
            if epoch % rc.eval.eval_every == 0 or epoch == cfg.epochs:
                run_eval(epoch, params)
    except Exception as exc:
        if run_dir:
            emit_event({"abort": True, "error": f"{type(exc).__name__}: {exc}",
                        "generation_step": counters.generation_steps, "gradient_steps": counters.gradient_steps})
            write_manifest(run_dir, "incomplete", seed=cfg.seed, error=f"{type(exc).__name__}: {exc}")
        raise
    finally:
        for s in sinks.values():
            s.close()
        if events_fh:
            events_fh.close()

    result.params = params
    if run_dir:
        save_checkpoint(params, run_dir / "checkpoints" / "final.json")
        write_manifest(run_dir, "complete", seed=cfg.seed, generation_steps=counters.generation_steps,
                       gradient_steps=counters.gradient_steps)
    return result
