"""Supervision-value scores for rollout groups.

The corrective advantage gap (CAG) is the L2 distance between the advantage
vectors induced by ground-truth and by pseudo rewards. Under a wrong
majority vote it is a pure function of (G, majority size m, correct
non-majority count k), which the class-wise form exploits. Entropy and mean
sampling probability are the scalar scores used by the baseline selectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import ClusterSummary, RolloutGroup
from .grpo import AdvantageVector, compute_advantages

EXACT = "exact"
CLASSWISE = "classwise"
EXPECTED = "expected"


@dataclass(frozen=True)
class CagScore:
    value: float
    basis: str
    k: int | None = None


@dataclass(frozen=True)
class AdmissibleCounts:
    """Counts of correct non-majority responses consistent with a wrong vote.

    All correct responses share one answer, so they form a single cluster
    that cannot exceed the majority size: 0 <= k <= G - m and k <= m (k = m
    is possible when the vote tie-break went against the truth).
    """

    group_size: int
    majority_size: int
    counts: tuple[int, ...]


def admissible_counts(group_size: int, majority_size: int) -> AdmissibleCounts:
    if not 1 <= majority_size <= group_size:
        raise ValueError(f"majority size {majority_size} outside [1, {group_size}]")
    upper = min(group_size - majority_size, majority_size)
    return AdmissibleCounts(
        group_size=group_size,
        majority_size=majority_size,
        counts=tuple(range(upper + 1)),
    )


def cag_exact(gt_adv: AdvantageVector, pseudo_adv: AdvantageVector) -> CagScore:
    """L2 gap between ground-truth and pseudo advantage vectors."""
    if gt_adv.values.shape != pseudo_adv.values.shape:
        raise ValueError(
            f"advantage lengths differ: {gt_adv.values.shape} vs {pseudo_adv.values.shape}"
        )
    return CagScore(value=float(np.linalg.norm(gt_adv.values - pseudo_adv.values)), basis=EXACT)


def cag_classwise(group_size: int, majority_size: int, k: int, epsilon: float = 0.0) -> CagScore:
    """CAG of the canonical reward pair for a wrong vote with k correct responses.

    Pseudo rewards put m ones on the majority slots; candidate ground-truth
    rewards put k ones on non-majority slots. Advantage normalization is
    permutation-equivariant and the L2 gap permutation-invariant, so this
    equals the exact CAG of any group with the same (G, m, k).
    """
    admissible = admissible_counts(group_size, majority_size)
    if k not in admissible.counts:
        raise ValueError(
            f"k={k} inadmissible for G={group_size}, m={majority_size} "
            f"(admissible: {admissible.counts})"
        )
    m = majority_size
    pseudo = np.zeros(group_size)
    pseudo[:m] = 1.0
    true = np.zeros(group_size)
    true[m : m + k] = 1.0
    gap = cag_exact(
        compute_advantages(true, epsilon), compute_advantages(pseudo, epsilon)
    )
    return CagScore(value=gap.value, basis=CLASSWISE, k=k)


def expected_cag(
    count_dist, group_size: int, majority_size: int, epsilon: float = 0.0
) -> CagScore:
    """Expectation of the class-wise CAG under a distribution over counts.

    ``count_dist`` has one entry per count 0..G; it must sum to one and put
    zero mass outside the admissible set.
    """
    dist = np.asarray(count_dist, dtype=float)
    if dist.shape != (group_size + 1,):
        raise ValueError(f"count distribution must have length G+1={group_size + 1}")
    if np.any(dist < -1e-12):
        raise ValueError("count distribution has negative entries")
    if abs(dist.sum() - 1.0) > 1e-9:
        raise ValueError(f"count distribution sums to {dist.sum()}, expected 1")
    admissible = set(admissible_counts(group_size, majority_size).counts)
    value = 0.0
    for k, weight in enumerate(dist):
        if weight == 0.0:
            continue
        if k not in admissible:
            raise ValueError(f"count distribution puts mass {weight} on inadmissible k={k}")
        value += weight * cag_classwise(group_size, majority_size, k, epsilon).value
    return CagScore(value=value, basis=EXPECTED)


def unvoted_classwise_values(group_size: int) -> np.ndarray:
    """Class-wise CAG when no vote exists (zero valid rollouts).

    The pseudo advantage is the degenerate zero vector, so the gap is the
    norm of the candidate ground-truth advantage: sqrt(G) for any
    non-degenerate count, 0 for k = 0 or k = G.
    """
    values = np.full(group_size + 1, np.sqrt(group_size))
    values[0] = 0.0
    values[group_size] = 0.0
    return values


def entropy_score(summary: ClusterSummary) -> float:
    """Shannon entropy (natural log) of the answer-cluster proportions."""
    counts = np.array([c for _, c in summary.clusters], dtype=float)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def prob_score(group: RolloutGroup) -> float:
    """Mean sampling probability over the valid rollouts (lower = less confident)."""
    if not group.valid.any():
        raise ValueError("prob score requires at least one valid rollout")
    return float(group.probs[group.valid].mean())
