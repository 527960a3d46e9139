import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from tokenrl.errors import ConfigError, ContractViolation, NonFiniteError
from tokenrl.policy import PolicyParams
from tokenrl.rlcore import (AdamState, TrainConfig, assemble_token_rewards, clipped_objective,
                            estimate_advantages, global_norm, kl_k3, lr_schedule, normalize_advantages,
                            objective_logprob_grad, optimizer_step, warmup_steps)

from helpers import make_traj
from oracles import advantages_bruteforce, advantages_power_sum, objective_mp


# --- k3 ------------------------------------------------------------------

def test_k3_identity_and_ln2():
    assert kl_k3(-1.3, -1.3) == 0.0
    with mpmath.workdps(40):
        exact = float(2 - 1 - mpmath.log(2))
    assert kl_k3(0.0, math.log(2.0)) == pytest.approx(exact, abs=1e-15)
    assert exact == pytest.approx(0.30685, abs=1e-5)


def test_k3_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(0, 3, 100_000)
        b = rng.normal(0, 3, 100_000)
        assert np.all(kl_k3(a, b) >= 0.0)


# --- token rewards / advantages ------------------------------------------

def test_token_rewards_terminal_only():
    rng = np.random.default_rng(1)
    t = make_traj(5, rng, reward=1.0)
    r = assemble_token_rewards(t, TrainConfig())
    assert list(r) == [0, 0, 0, 0, 1.0]


def test_token_rewards_require_eos():
    rng = np.random.default_rng(1)
    t = make_traj(5, rng, reward=1.0, eos=False)
    assert not assemble_token_rewards(t, TrainConfig(require_eos_for_reward=True)).any()
    assert assemble_token_rewards(t, TrainConfig())[-1] == 1.0


def test_token_rewards_kl_loop_oracle():
    rng = np.random.default_rng(2)
    t = make_traj(4, rng, reward=1.0)
    cfg = TrainConfig(kl_reward_coeff=0.1)
    expected = []
    for i in range(4):
        q = math.exp(t.ref_logprobs[i] - t.old_logprobs[i])
        expected.append(-0.1 * (q - 1 - math.log(q)) + (1.0 if i == 3 else 0.0))
    np.testing.assert_allclose(assemble_token_rewards(t, cfg), expected, rtol=1e-13, atol=1e-15)


def test_advantages_examples():
    np.testing.assert_array_equal(estimate_advantages([0, 0, 1], 0.5), [0.25, 0.5, 1.0])
    np.testing.assert_array_equal(estimate_advantages([0, 0, 0], 0.9), [0, 0, 0])
    np.testing.assert_array_equal(estimate_advantages([0] * 6 + [0.7], 1.0), [0.7] * 7)


def test_advantages_exact_rational():
    rng = np.random.default_rng(3)
    for gamma in (Fraction(0), Fraction(1, 2), Fraction(1)):
        for _ in range(50):
            # dyadic rewards keep every partial sum exactly representable
            # (at gamma=1/2 only while 3 + T + 5 bits fit the 53-bit mantissa)
            T = int(rng.integers(1, 65 if gamma != Fraction(1, 2) else 41))
            r = [Fraction(int(k), 8) for k in rng.integers(-16, 17, T)]
            exact = advantages_power_sum(r, gamma)
            got = estimate_advantages([float(x) for x in r], float(gamma))
            assert [Fraction(float(g)) for g in got] == exact


def test_normalize_batch_wide():
    advs = [np.array([1.0, 1.0]), np.array([3.0])]
    out = normalize_advantages(advs)
    flat = np.concatenate(out)
    assert abs(flat.mean()) < 1e-12
    assert flat.std() == pytest.approx(1.0, rel=1e-6)


# --- objective --------------------------------------------------------------

def test_objective_on_policy_equals_mean_advantage():
    rng = np.random.default_rng(4)
    trajs = [make_traj(L, rng, adv=rng.normal(size=L)) for L in (3, 5)]
    cfg = TrainConfig(kl_loss_coeff=0.0)
    res = clipped_objective([t.old_logprobs for t in trajs], trajs, cfg)
    expected = -np.mean([t.advantages.mean() for t in trajs])
    assert res.loss == pytest.approx(expected, abs=1e-14)
    assert res.clip_fraction == 0.0 and res.mean_ratio == pytest.approx(1.0)


def test_objective_clip_arithmetic():
    rng = np.random.default_rng(5)
    t = make_traj(1, rng, adv=[1.0], old=[-1.0], ref=[-1.0])
    cfg = TrainConfig(kl_loss_coeff=0.0, epsilon=0.2)
    res = clipped_objective([np.array([-1.0 + math.log(1.5)])], [t], cfg)
    assert res.loss == pytest.approx(-1.2, abs=1e-14)
    assert res.clip_fraction == 1.0


def test_objective_matches_mpmath():
    rng = np.random.default_rng(6)
    for beta in (0.0, 0.001, 0.1):
        trajs = [make_traj(L, rng, adv=rng.normal(size=L)) for L in (2, 4, 7)]
        new = [t.old_logprobs + rng.normal(0, 0.3, t.response_length) for t in trajs]
        cfg = TrainConfig(kl_loss_coeff=beta)
        got = clipped_objective(new, trajs, cfg).loss
        ref = objective_mp(new, [t.old_logprobs for t in trajs], [t.ref_logprobs for t in trajs],
                           [t.advantages for t in trajs], cfg.epsilon, beta)
        assert abs(got + float(ref)) < 1e-10


def test_objective_logprob_grad_fd():
    rng = np.random.default_rng(7)
    cfg = TrainConfig(kl_loss_coeff=0.05)
    t = make_traj(6, rng, adv=rng.normal(size=6))
    lp = t.old_logprobs + rng.normal(0, 0.4, 6)
    g = objective_logprob_grad(lp, t, cfg, 1)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        fd = (clipped_objective([lp + e], [t], cfg).loss - clipped_objective([lp - e], [t], cfg).loss) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_objective_rejects_nan():
    rng = np.random.default_rng(8)
    t = make_traj(3, rng, adv=[1.0, np.nan, 0.0])
    with pytest.raises(ContractViolation):
        clipped_objective([t.old_logprobs], [t], TrainConfig())


# --- optimizer -------------------------------------------------------------

def _params(rng, scale=1.0):
    shapes = dict(emb=(4, 3), A=(2, 2), B=(2, 3), C=(2, 5), b_h=(2,), U=(4, 2), b_out=(4,))
    return PolicyParams(**{k: rng.normal(0, scale, s) for k, s in shapes.items()})


def test_zero_gradient_keeps_params():
    rng = np.random.default_rng(9)
    p = _params(rng)
    new, _, norm = optimizer_step(p, p.zeros_like(), AdamState.zeros_like(p), 1e-3, 1.0)
    assert norm == 0.0
    assert new.content_hash() == p.content_hash()


def test_clip_to_unit_norm():
    rng = np.random.default_rng(10)
    p = _params(rng)
    g = _params(rng)
    g = g.replace(**{k: a * (10.0 / global_norm(g)) for k, a in g.arrays().items()})
    assert global_norm(g) == pytest.approx(10.0)
    _, state, norm = optimizer_step(p, g, AdamState.zeros_like(p), 1e-3, 1.0)
    assert norm == pytest.approx(10.0)
    # first Adam moment after one step is (1 - beta1) * clipped gradient
    assert global_norm(state.m) / 0.1 == pytest.approx(1.0, abs=1e-9)


def test_optimizer_deterministic_and_nonfinite():
    rng = np.random.default_rng(11)
    p, g = _params(rng), _params(rng)
    s = AdamState.zeros_like(p)
    a, _, _ = optimizer_step(p, g, s, 1e-3, 1.0)
    b, _, _ = optimizer_step(p, g, s, 1e-3, 1.0)
    assert a.content_hash() == b.content_hash()
    bad = g.replace(A=np.full((2, 2), np.inf))
    with pytest.raises(NonFiniteError, match="A"):
        optimizer_step(p, bad, s, 1e-3, 1.0)


# --- schedule ---------------------------------------------------------------

def test_lr_schedule_endpoints():
    cfg = TrainConfig()
    total = 960
    w = warmup_steps(total, cfg)
    assert w == math.ceil(0.03 * total)
    assert lr_schedule(0, total, cfg) == 0.0
    assert lr_schedule(w, total, cfg) == 5.0e-6
    assert abs(lr_schedule(total, total, cfg)) < 1e-12
    vals = [lr_schedule(s, total, cfg) for s in range(w, total + 1)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ContractViolation):
        lr_schedule(total + 1, total, cfg)


# --- config -------------------------------------------------------------------

def test_reference_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.forward_batch_size, cfg.ppo_batch_size, cfg.ppo_backward_batch_size) == (128, 16, 4, 4)
    assert (cfg.gradient_accumulation_steps, cfg.ppo_epochs, cfg.clip_grad_norm) == (1, 1, 1.0)
    assert (cfg.epsilon, cfg.gamma, cfg.kl_loss_coeff, cfg.kl_reward_coeff) == (0.2, 1.0, 0.001, 0.0)
    assert cfg.learning_rate == 5.0e-6
    assert cfg.updates_per_generation_step == 32


@pytest.mark.parametrize("kw", [
    dict(ppo_batch_size=5),
    dict(ppo_batch_size=4, gradient_accumulation_steps=3),
    dict(ppo_backward_batch_size=3),
    dict(epsilon=0.0),
    dict(gamma=1.5),
    dict(forward_batch_size=256),
    dict(batch_size=0),
])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
