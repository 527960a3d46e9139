"""Small builders shared by the test modules."""

import numpy as np

from tokenrl.policy import PolicyDims, init_policy
from tokenrl.rewards import RewardBreakdown
from tokenrl.rlcore import Trajectory
from tokenrl.taskgen import TaskSpec, default_vocabulary, generate_dataset

V = default_vocabulary()
SMALL = PolicyDims(E=6, H=8, D=24)


def make_traj(L, rng, reward=1.0, eos=True, spread=0.3, adv=None, old=None, ref=None, qid=0):
    old = rng.normal(-1.5, 0.5, L) if old is None else np.asarray(old, dtype=np.float64)
    ref = old + rng.normal(0, spread, L) if ref is None else np.asarray(ref, dtype=np.float64)
    t = Trajectory(
        query_id=qid,
        query_tokens=np.array([V.bos, V.prompt_end]),
        response_tokens=rng.integers(2, len(V), L),
        context=np.zeros(24),
        attention_mask=np.ones(L + 2, dtype=np.int64),
        position_ids=np.arange(L + 2),
        old_logprobs=old,
        ref_logprobs=ref,
        reward=RewardBreakdown(reward, 0.0),
        eos_index=L - 1 if eos else None,
    )
    if adv is not None:
        t.advantages = np.asarray(adv, dtype=np.float64)
    return t


def small_dataset(n_train=16, n_val=4, seed=0, mix=1.0):
    return generate_dataset(TaskSpec(n_train, n_val, 0, mix, (0, 99), seed=seed))


def small_policy(seed=0, dims=SMALL, warm=False, steps=5):
    return init_policy(V, dims, seed=seed, warm_start=warm, warm_start_steps=steps)
