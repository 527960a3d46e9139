"""Clipped policy-gradient objective with a k3 KL penalty, advantages, and Adam.

Everything here operates on per-response numpy arrays of response-token
log-probabilities; the policy module turns the per-token derivatives into
parameter gradients.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, NonFiniteError
from .rewards import RewardBreakdown


@dataclass
class TrainConfig:
    batch_size: int = 128
    forward_batch_size: int = 16
    ppo_batch_size: int = 4
    ppo_backward_batch_size: Optional[int] = None
    gradient_accumulation_steps: int = 1
    ppo_epochs: int = 1
    epochs: int = 30
    epsilon: float = 0.2
    gamma: float = 1.0
    kl_loss_coeff: float = 0.001
    kl_reward_coeff: float = 0.0
    learning_rate: float = 5.0e-6
    warmup_fraction: float = 0.03
    clip_grad_norm: float = 1.0
    advantage_normalization: bool = False
    require_eos_for_reward: bool = False
    drop_last: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.ppo_backward_batch_size is None and self.gradient_accumulation_steps > 0:
            self.ppo_backward_batch_size = self.ppo_batch_size // self.gradient_accumulation_steps
        self.validate()

    def validate(self) -> None:
        positive = ("batch_size", "forward_batch_size", "ppo_batch_size", "gradient_accumulation_steps",
                    "ppo_epochs")
        for name in positive:
            if not isinstance(getattr(self, name), int) or getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size % self.ppo_batch_size:
            raise ConfigError(
                f"ppo_batch_size={self.ppo_batch_size} does not divide batch_size={self.batch_size}"
            )
        if self.ppo_batch_size % self.gradient_accumulation_steps:
            raise ConfigError(
                f"gradient_accumulation_steps={self.gradient_accumulation_steps} does not divide "
                f"ppo_batch_size={self.ppo_batch_size}"
            )
        if self.ppo_backward_batch_size * self.gradient_accumulation_steps != self.ppo_batch_size:
            raise ConfigError(
                "ppo_backward_batch_size must equal ppo_batch_size // gradient_accumulation_steps "
                f"({self.ppo_batch_size // self.gradient_accumulation_steps}), got {self.ppo_backward_batch_size}"
            )
        if self.forward_batch_size > self.batch_size:
            raise ConfigError("forward_batch_size must not exceed batch_size")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.kl_loss_coeff < 0 or self.kl_reward_coeff < 0:
            raise ConfigError("KL coefficients must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if not self.clip_grad_norm > 0:
            raise ConfigError("clip_grad_norm must be > 0")

    @property
    def updates_per_generation_step(self) -> int:
        return (self.batch_size // self.ppo_batch_size) * self.ppo_epochs

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Trajectory:
    """Per-response learning record. Sequence fields cover response tokens only,
    except ``attention_mask``/``position_ids`` which span prompt + padded response."""

    query_id: int
    query_tokens: np.ndarray
    response_tokens: np.ndarray
    context: np.ndarray
    attention_mask: np.ndarray
    position_ids: np.ndarray
    old_logprobs: np.ndarray
    ref_logprobs: np.ndarray
    reward: RewardBreakdown
    eos_index: Optional[int]
    reflection_flags: dict[str, bool] = field(default_factory=dict)
    token_rewards: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None

    @property
    def response_length(self) -> int:
        return int(len(self.response_tokens))

    @property
    def correct(self) -> bool:
        return self.reward.accuracy_reward == 1.0


def kl_k3(logp_policy: Any, logp_ref: Any) -> Any:
    """k3 estimate ``r - 1 - log r`` with ``r = exp(logp_ref - logp_policy)``.

    Non-negative and unbiased for KL(policy || ref) when tokens are drawn
    from the policy. Works elementwise on arrays.
    """
    log_r = np.subtract(logp_ref, logp_policy)
    # expm1 keeps precision near r = 1; the clamp absorbs a last-ulp rounding below zero
    return np.maximum(np.expm1(log_r) - log_r, 0.0)


def _check_finite(*arrays: Any) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ContractViolation("non-finite value in objective inputs")


def assemble_token_rewards(traj: Trajectory, cfg: TrainConfig) -> np.ndarray:
    L = traj.response_length
    if cfg.kl_reward_coeff:
        rewards = -cfg.kl_reward_coeff * kl_k3(traj.old_logprobs, traj.ref_logprobs)
    else:
        rewards = np.zeros(L)
    if traj.eos_index is not None:
        terminal = traj.eos_index
    elif not cfg.require_eos_for_reward and L > 0:
        terminal = L - 1
    else:
        terminal = None
    if terminal is not None:
        rewards[terminal] += traj.reward.total
    return rewards


def estimate_advantages(token_rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Discounted reward-to-go, one backward pass."""
    r = np.asarray(token_rewards, dtype=np.float64)
    adv = np.empty_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        running = r[t] + gamma * running
        adv[t] = running
    return adv


def normalize_advantages(advantages: list[np.ndarray], eps: float = 1e-8) -> list[np.ndarray]:
    """Standardize over all valid response tokens of the batch."""
    flat = np.concatenate(advantages) if advantages else np.zeros(0)
    if flat.size == 0:
        return advantages
    mean = flat.mean()
    std = flat.std()
    return [(a - mean) / (std + eps) for a in advantages]


@dataclass
class ObjectiveResult:
    loss: float
    pg_loss: float
    kl_loss: float
    mean_ratio: float
    clip_fraction: float
    n_tokens: int


def _token_terms(new_lp: np.ndarray, traj: Trajectory, cfg: TrainConfig):
    ratio = np.exp(new_lp - traj.old_logprobs)
    adv = traj.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon) * adv
    clip_active = clipped < unclipped
    surrogate = np.where(clip_active, clipped, unclipped)
    kl = kl_k3(new_lp, traj.ref_logprobs)
    return ratio, surrogate, clip_active, kl


def clipped_objective(
    new_logprobs: Sequence[np.ndarray],
    trajs: Sequence[Trajectory],
    cfg: TrainConfig,
    batch_denominator: Optional[int] = None,
) -> ObjectiveResult:
    """Negated clipped surrogate minus the KL penalty.

    Each response contributes ``1/|o|`` times its token sum; responses are
    averaged over ``batch_denominator`` (defaults to ``len(trajs)``).
    """
    if len(new_logprobs) != len(trajs):
        raise ContractViolation("new_logprobs and trajectories differ in length")
    denom = batch_denominator or len(trajs)
    pg = 0.0
    kl_total = 0.0
    ratio_sum = 0.0
    n_clip = 0
    n_tok = 0
    for lp, traj in zip(new_logprobs, trajs):
        lp = np.asarray(lp, dtype=np.float64)
        if lp.shape != traj.old_logprobs.shape or traj.advantages is None:
            raise ContractViolation("logprob/advantage shapes do not match trajectory")
        _check_finite(lp, traj.old_logprobs, traj.ref_logprobs, traj.advantages)
        ratio, surrogate, clip_active, kl = _token_terms(lp, traj, cfg)
        inv_len = 1.0 / len(lp)
        pg -= surrogate.sum() * inv_len
        kl_total += cfg.kl_loss_coeff * kl.sum() * inv_len
        ratio_sum += ratio.sum()
        n_clip += int(clip_active.sum())
        n_tok += len(lp)
    pg /= denom
    kl_total /= denom
    return ObjectiveResult(
        loss=float(pg + kl_total),
        pg_loss=float(pg),
        kl_loss=float(kl_total),
        mean_ratio=float(ratio_sum / n_tok) if n_tok else float("nan"),
        clip_fraction=float(n_clip / n_tok) if n_tok else 0.0,
        n_tokens=n_tok,
    )


def objective_logprob_grad(new_lp: np.ndarray, traj: Trajectory, cfg: TrainConfig, batch_denominator: int) -> np.ndarray:
    """d(loss)/d(new_lp) for a single response, including the ``1/denominator`` factor."""
    new_lp = np.asarray(new_lp, dtype=np.float64)
    _check_finite(new_lp, traj.old_logprobs, traj.ref_logprobs, traj.advantages)
    ratio, _, clip_active, _ = _token_terms(new_lp, traj, cfg)
    d_surr = np.where(clip_active, 0.0, ratio * traj.advantages)
    # d k3 / d logp_policy = 1 - exp(logp_ref - logp_policy)
    d_kl = -np.expm1(traj.ref_logprobs - new_lp)
    scale = 1.0 / (len(new_lp) * batch_denominator)
    return (-d_surr + cfg.kl_loss_coeff * d_kl) * scale


# ---------------------------------------------------------------------------
# optimizer

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: Any
    v: Any
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Any) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0)


def global_norm(grad: Any) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in grad.arrays().values()))


def optimizer_step(params: Any, gradient: Any, state: AdamState, lr_now: float, clip_grad_norm: float):
    """Clip to ``clip_grad_norm`` then apply one Adam update.

    ``params``/``gradient`` are any objects exposing ``arrays()`` and
    ``replace(**arrays)`` (see :class:`tokenrl.policy.PolicyParams`).
    Returns ``(new_params, new_state, grad_norm_before_clip)``.
    """
    norm = global_norm(gradient)
    if not math.isfinite(norm):
        bad = [k for k, a in gradient.arrays().items() if not np.all(np.isfinite(a))]
        raise NonFiniteError(f"non-finite gradient in blocks {bad}")
    coef = clip_coefficient(norm, clip_grad_norm)
    b1, b2 = ADAM_BETAS
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    m_arrays, v_arrays = state.m.arrays(), state.v.arrays()
    g_arrays = gradient.arrays()
    for name, p in params.arrays().items():
        g = g_arrays[name] * coef
        m = b1 * m_arrays[name] + (1 - b1) * g
        v = b2 * v_arrays[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[name] = p - lr_now * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return (
        params.replace(**new_p),
        AdamState(m=state.m.replace(**new_m), v=state.v.replace(**new_v), step=t),
        norm,
    )


def clip_coefficient(norm: float, clip_grad_norm: float) -> float:
    return min(1.0, clip_grad_norm / (norm + 1e-12)) if norm > 0 else 1.0


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(math.ceil(cfg.warmup_fraction * total_steps))


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractViolation(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.learning_rate * step / warm
    if total_steps == warm:
        return cfg.learning_rate
    progress = (step - warm) / (total_steps - warm)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))
