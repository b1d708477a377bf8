"""Group-normalized advantages and the clipped policy-gradient surrogate.

All functions are pure; gradients are exact analytic derivatives of the
surrogate for the single-token categorical policy, with the conventional
stop-gradient on the active clip branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .env import PolicySnapshot, RolloutGroup, policy_probs


class Membership(Enum):
    SUP = "sup"
    UNSUP = "unsup"
    DROP = "drop"


@dataclass(frozen=True)
class ClipConfig:
    delta: float = 0.2
    epsilon: float = 1e-6
    kl_coeff: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kl_coeff < 0.0:
            raise ValueError(f"kl_coeff must be >= 0, got {self.kl_coeff}")


@dataclass(frozen=True)
class AdvantageVector:
    values: np.ndarray
    epsilon_used: float
    degenerate: bool


@dataclass(frozen=True)
class MixedAdvantage:
    """Per-group advantages after the supervised/pseudo/drop routing.

    Supervised groups carry the ground-truth advantages unchanged, retained
    unsupervised groups carry reliability-weighted pseudo advantages, and
    dropped groups are all zero.
    """

    values: np.ndarray
    source: Membership
    reliability: float = 1.0


def compute_advantages(rewards, epsilon: float = 0.0) -> AdvantageVector:
    """Group-normalize binary verifier rewards: (r - mean) / (std + epsilon).

    The std is the population standard deviation over the group. A
    zero-variance group is degenerate and maps to exact zeros regardless of
    epsilon (an all-correct or all-wrong group carries no signal).
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a non-empty 1-d vector")
    if not np.all((r == 0.0) | (r == 1.0)):
        raise ValueError("rewards must be binary (0 or 1)")
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    std = float(r.std())
    if std == 0.0:
        return AdvantageVector(values=np.zeros_like(r), epsilon_used=epsilon, degenerate=True)
    values = (r - r.mean()) / (std + epsilon)
    return AdvantageVector(values=values, epsilon_used=epsilon, degenerate=False)


def mix_advantages(
    gt_adv: AdvantageVector | None,
    pseudo_adv: AdvantageVector | None,
    membership: Membership,
    reliability: float = 1.0,
) -> MixedAdvantage:
    """Route a group into the mixed-advantage rule for its membership."""
    if membership is Membership.SUP:
        if gt_adv is None:
            raise ValueError("supervised membership requires a ground-truth advantage vector")
        return MixedAdvantage(values=gt_adv.values.copy(), source=membership, reliability=1.0)
    if membership is Membership.UNSUP:
        if pseudo_adv is None:
            raise ValueError("unsupervised membership requires a pseudo advantage vector")
        if not 0.0 <= reliability <= 1.0:
            raise ValueError(f"reliability must be in [0, 1], got {reliability}")
        return MixedAdvantage(
            values=reliability * pseudo_adv.values, source=membership, reliability=reliability
        )
    if membership is Membership.DROP:
        size = len(gt_adv.values) if gt_adv is not None else len(pseudo_adv.values)
        return MixedAdvantage(values=np.zeros(size), source=membership, reliability=0.0)
    raise ValueError(f"unknown membership {membership!r}")


def oracle_decay_advantages(
    gt_adv: AdvantageVector, cag: float, decay_coeff: float = 100.0
) -> AdvantageVector:
    """Scale ground-truth advantages by exp(-decay_coeff * cag).

    Correctly pseudo-labeled groups (cag = 0) pass through unchanged; wrong
    votes with sizeable gap are suppressed to numeric zero.
    """
    if cag < 0.0:
        raise ValueError(f"cag must be >= 0, got {cag}")
    factor = np.exp(-decay_coeff * cag)
    return AdvantageVector(
        values=gt_adv.values * factor,
        epsilon_used=gt_adv.epsilon_used,
        degenerate=gt_adv.degenerate,
    )


def _advantage_values(advantages) -> np.ndarray:
    return np.asarray(getattr(advantages, "values", advantages), dtype=float)


def categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * (np.log(p) - np.log(q))))


def grpo_surrogate_and_gradient(
    policy: PolicySnapshot,
    old_policy: PolicySnapshot,
    prompt_features: np.ndarray,
    group: RolloutGroup,
    advantages,
    clip: ClipConfig,
    ref_policy: PolicySnapshot | None = None,
) -> tuple[float, np.ndarray]:
    """Clipped surrogate objective for one rollout group and its exact gradient.

    objective = (1/G) sum_g min(rho_g A_g, clip(rho_g, 1-delta, 1+delta) A_g)
    with rho_g the probability ratio of the sampled answer under the current
    versus the sampling policy. When ``clip.kl_coeff > 0`` a categorical KL
    penalty to ``ref_policy`` is subtracted. The gradient is taken over the
    policy weight matrix; a strictly smaller saturated clip branch
    contributes zero gradient.
    """
    adv = _advantage_values(advantages)
    if adv.shape != group.answers.shape:
        raise ValueError(f"advantage length {adv.shape} != group size {group.answers.shape}")
    old_probs = np.asarray(group.probs, dtype=float)
    if np.any(old_probs <= 0.0):
        raise FloatingPointError("sampled answer has zero probability under the old policy")

    probs = policy_probs(policy, prompt_features)
    new_probs = probs[group.answers]
    ratios = new_probs / old_probs
    unclipped = ratios * adv
    clipped = np.clip(ratios, 1.0 - clip.delta, 1.0 + clip.delta) * adv
    per_rollout = np.minimum(unclipped, clipped)
    objective = float(per_rollout.mean())

    # d/dW rho_g A_g = (A_g / pi_old_g) * pi(a_g) * (e_{a_g} - pi) phi^T,
    # active only where the unclipped branch attains the min (ties included).
    g = group.group_size
    active = unclipped <= clipped
    coeff = np.where(active, adv / old_probs, 0.0) * new_probs / g
    bucket = np.zeros(len(probs))
    np.add.at(bucket, group.answers, coeff)
    grad = np.outer(bucket - coeff.sum() * probs, prompt_features)

    if clip.kl_coeff > 0.0:
        if ref_policy is None:
            raise ValueError("kl_coeff > 0 requires a reference policy")
        ref_probs = policy_probs(ref_policy, prompt_features)
        kl = categorical_kl(probs, ref_probs)
        objective -= clip.kl_coeff * kl
        dkl_dlogits = probs * (np.log(probs) - np.log(ref_probs) - kl)
        grad -= clip.kl_coeff * np.outer(dkl_dlogits, prompt_features)

    return objective, grad
