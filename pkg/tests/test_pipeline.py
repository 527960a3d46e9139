import dataclasses
import json

import numpy as np
import pytest

from tokenrl import pipeline as pl
from tokenrl.config import EvalPlan, PolicyConfig, RunConfig
from tokenrl.errors import ConfigError, NonFiniteError, PipelineFault
from tokenrl.policy import GenerationConfig, PolicySnapshot
from tokenrl.rlcore import AdamState, TrainConfig
from tokenrl.taskgen import Dominance, Query, Split

from helpers import V, small_dataset, small_policy

GEN = GenerationConfig(max_tokens=8)


def _q(qid, n_prompt):
    toks = (V.bos,) + tuple(V.digits[i % 10] for i in range(n_prompt - 2)) + (V.prompt_end,)
    return Query(qid, toks, tuple([0.0] * 24), 0, Dominance.TEXT, Split.TRAIN)


def test_step1_padding():
    inputs = pl.step1_prepare([_q(0, 5), _q(1, 7)], V)
    assert inputs.input_ids.shape == (2, 7)
    assert inputs.attention_mask.sum(axis=1).tolist() == [5, 7]
    assert (inputs.input_ids[0, 5:] == V.pad).all()
    assert pl.strip_padding(inputs) == [_q(0, 5).prompt_tokens, _q(1, 7).prompt_tokens]


def test_step1_errors():
    with pytest.raises(ConfigError):
        pl.step1_prepare([], V)
    with pytest.raises(ConfigError, match="exceeds"):
        pl.step1_prepare([_q(0, 100)], V)


def test_step1_roundtrip_dataset():
    qs = small_dataset(30, 0, mix=0.5).split(Split.TRAIN)
    assert pl.strip_padding(pl.step1_prepare(qs, V)) == [q.prompt_tokens for q in qs]


def test_step2_sync_and_staleness():
    params = small_policy(0)
    qs = small_dataset(128, 0).split(Split.TRAIN)
    engine = pl.SamplingEngine(V)
    inputs = pl.step1_prepare(qs, V)
    with pytest.raises(PipelineFault):
        pl.step2_collect(engine, inputs, GEN, params, seed=0, epoch=1, generation_step=0)
    engine.sync_weights(PolicySnapshot.of(params))
    assert engine.weights_hash == params.content_hash()
    batch = pl.step2_collect(engine, inputs, GEN, params, seed=0, epoch=1, generation_step=0)
    assert len(batch.responses) == 128
    assert batch.padded.shape[0] == 128
    assert batch.response_mask.sum() == sum(len(r) for r in batch.responses)
    updated = params.replace(A=params.A + 1e-3)
    with pytest.raises(PipelineFault, match="stale"):
        pl.step2_collect(engine, inputs, GEN, updated, seed=0, epoch=1, generation_step=1)


def _rollout(params, qs, seed=0):
    engine = pl.SamplingEngine(V)
    engine.sync_weights(PolicySnapshot.of(params))
    return pl.step2_collect(engine, pl.step1_prepare(qs, V), GEN, params, seed=seed, epoch=1, generation_step=0)


def _traj_bytes(trajs):
    out = []
    for t in trajs:
        for a in (t.response_tokens, t.attention_mask, t.position_ids, t.old_logprobs, t.ref_logprobs):
            out.append(np.asarray(a).tobytes())
        if t.advantages is not None:
            out.append(t.advantages.tobytes())
        out.append(repr(t.reward).encode())
    return out


def _update_once(cfg, params, ref, batch):
    trajs = pl.step3_build_trajectories(batch, params, ref, cfg, V)
    counters = pl.StepCounters(generation_steps=1)
    new, _, counters, stats = pl.step4_update(trajs, params, AdamState.zeros_like(params), cfg, counters, V,
                                              total_steps=cfg.updates_per_generation_step)
    return trajs, new, counters, stats


def test_chunk_invariance_bitwise():
    params = small_policy(1, warm=True, steps=10)
    ref = PolicySnapshot.of(params)
    qs = small_dataset(16, 0, seed=4).split(Split.TRAIN)
    batch = _rollout(params, qs)
    results = []
    for fbs in (1, 4, 16):
        for gas in (1, 2):
            cfg = TrainConfig(batch_size=16, forward_batch_size=fbs, ppo_batch_size=4,
                              gradient_accumulation_steps=gas, learning_rate=1e-3)
            trajs, new, _, stats = _update_once(cfg, params, ref, batch)
            results.append((_traj_bytes(trajs), new.content_hash(), [s.loss for s in stats]))
    assert all(r == results[0] for r in results[1:])


def test_trajectory_fields():
    params = small_policy(2, warm=True, steps=10)
    qs = small_dataset(8, 0, seed=5).split(Split.TRAIN)
    batch = _rollout(params, qs)
    cfg = TrainConfig(batch_size=8, forward_batch_size=4, ppo_batch_size=4)
    trajs = pl.step3_build_trajectories(batch, params, PolicySnapshot.of(params), cfg, V)
    pl.prepare_advantages(trajs, cfg)
    for t, q, r in zip(trajs, qs, batch.responses):
        assert len(t.advantages) == len(r) == t.response_length
        L = len(q.prompt_tokens) + len(r)
        assert t.attention_mask.sum() == L
        np.testing.assert_array_equal(t.position_ids[:L], np.arange(L))
        np.testing.assert_array_equal(t.old_logprobs, t.ref_logprobs)  # ref == current at init


def test_correct_response_reward_recorded():
    from tokenrl.policy import Response
    qs = small_dataset(4, 0, seed=6).split(Split.TRAIN)
    params = small_policy(0)
    responses = [Response(tuple(V.encode("\\boxed{" + str(q.gold_answer) + "}<eos>")), True) for q in qs]
    padded, mask = pl.pad_responses(responses, V.pad)
    batch = pl.RolloutBatch(qs, responses, padded, mask, 0)
    trajs = pl.step3_build_trajectories(batch, params, PolicySnapshot.of(params), TrainConfig(batch_size=4, forward_batch_size=4), V)
    assert all(t.reward.total == 1.0 and t.correct for t in trajs)


@pytest.mark.parametrize("ppo_epochs, expected", [(1, 32), (2, 64)])
def test_step4_optimizer_step_count(ppo_epochs, expected):
    params = small_policy(3)
    qs = small_dataset(128, 0, seed=7).split(Split.TRAIN)
    cfg = TrainConfig(ppo_epochs=ppo_epochs, learning_rate=1e-3)
    trajs, _, counters, stats = _update_once(cfg, params, PolicySnapshot.of(params), _rollout(params, qs))
    assert counters.gradient_steps == expected == len(stats)
    assert counters.backward_passes == expected * cfg.gradient_accumulation_steps
    assert abs(stats[0].mean_ratio - 1.0) < 1e-9


def test_step4_nonfinite_loss_raises():
    params = small_policy(3)
    qs = small_dataset(8, 0, seed=8).split(Split.TRAIN)
    cfg = TrainConfig(batch_size=8, forward_batch_size=8, ppo_batch_size=4, learning_rate=1e-3)
    trajs = pl.step3_build_trajectories(_rollout(params, qs), params, PolicySnapshot.of(params), cfg, V)
    trajs[0].reward = dataclasses.replace(trajs[0].reward, accuracy_reward=float("inf"))
    with pytest.raises((NonFiniteError, ValueError)):
        pl.step4_update(trajs, params, AdamState.zeros_like(params), cfg, pl.StepCounters(), V, 2)


def test_generation_step_arithmetic():
    # rollout batch 896, last partial batch dropped
    assert 30 * pl.generation_steps_per_epoch(5000, 896) == 150
    assert 50 * pl.generation_steps_per_epoch(2101, 896) == 100
    assert pl.generation_steps_per_epoch(1000, 128) == 7
    assert pl.generation_steps_per_epoch(1000, 128, drop_last=False) == 8


def _tiny_run(tmp_path=None, epochs=2, seed=0, **train_kw):
    ds = small_dataset(32, 4, seed=9)
    kw = dict(batch_size=16, ppo_batch_size=4, epochs=epochs, learning_rate=1e-3, seed=seed)
    kw.update(train_kw)
    rc = RunConfig(train=TrainConfig(**kw), generation=GEN,
                   policy=PolicyConfig(embed_dim=6, hidden_dim=8, warm_start_steps=5),
                   eval=EvalPlan(eval_splits=("val",), eval_configs=("pass1_t001", "pass8_t1")))
    return pl.train(pl.RunSpec(dataset=ds, config=rc, out_dir=tmp_path))


@pytest.mark.parametrize("ppo_batch_size, ppo_epochs", [(4, 1), (8, 2), (2, 1), (16, 3), (4, 2)])
def test_counter_law(ppo_batch_size, ppo_epochs):
    res = _tiny_run(ppo_batch_size=ppo_batch_size, ppo_epochs=ppo_epochs)
    c = res.counters
    assert c.generation_steps == 2 * 2
    assert c.gradient_steps == c.generation_steps * (16 // ppo_batch_size) * ppo_epochs


def test_epochs_zero_is_baseline_only(tmp_path):
    res = _tiny_run(tmp_path / "r", epochs=0)
    assert res.counters.generation_steps == 0 and res.train_accuracy == []
    assert res.eval_accuracy[("val", "pass1_t001")] and len(res.eval_accuracy[("val", "pass1_t001")]) == 1
    assert (tmp_path / "r" / "metrics_train.csv").read_text().count("\n") == 1


def test_run_directory_layout_and_determinism(tmp_path):
    _tiny_run(tmp_path / "a", seed=3)
    _tiny_run(tmp_path / "b", seed=3)
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("metrics_train.csv", "metrics_eval.csv", "reflection.csv", "events.jsonl", "config.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "checkpoints" / "init.json").exists() and (a / "checkpoints" / "final.json").exists()
    manifest = json.loads((a / "MANIFEST.json").read_text())
    assert manifest["status"] == "complete"
    events = [json.loads(l) for l in (a / "events.jsonl").read_text().splitlines()]
    assert len(events) == 4 and abs(events[0]["first_mean_ratio"] - 1.0) < 1e-9
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["kl_loss_coeff"] == 0.001 and cfg["seed"] == 3


def test_train_accuracy_is_cumulative_tally(tmp_path):
    res = _tiny_run(tmp_path / "r", epochs=1)
    events = res.events
    correct = [round(e["batch_accuracy"] * 16) for e in events]
    assert res.train_accuracy[0] == sum(correct) / (16 * len(events))


def test_abort_marks_manifest_incomplete(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteError("injected")
    monkeypatch.setattr(pl, "step4_update", boom)
    with pytest.raises(NonFiniteError):
        _tiny_run(tmp_path / "r")
    manifest = json.loads((tmp_path / "r" / "MANIFEST.json").read_text())
    assert manifest["status"] == "incomplete" and "injected" in manifest["error"]
    # the baseline evaluation rows written before the fault survive
    assert "pass1_t001" in (tmp_path / "r" / "metrics_eval.csv").read_text()


def test_reference_snapshot_is_fixed(tmp_path):
    res = _tiny_run(tmp_path / "r", epochs=2)
    from tokenrl.policy import load_checkpoint
    init = load_checkpoint(tmp_path / "r" / "checkpoints" / "init.json")
    final = load_checkpoint(tmp_path / "r" / "checkpoints" / "final.json")
    assert init.content_hash() != final.content_hash() == res.params.content_hash()
