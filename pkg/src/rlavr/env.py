"""Synthetic verifiable-answer environment.

Prompt banks with ground-truth answers, a shared linear softmax policy,
rollout sampling, rule-based verification, majority-vote pseudo-labeling,
and the rollout-derived features consumed by the acquisition classifiers.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN = "train"
EVAL = "eval"


class NoPseudoLabelError(Exception):
    """A rollout group has zero valid responses, so no majority vote exists."""


@dataclass(frozen=True)
class Prompt:
    prompt_id: int
    features: np.ndarray
    truth: int


@dataclass(frozen=True)
class PromptBank:
    """Immutable collection of prompts sharing one answer space."""

    prompts: tuple[Prompt, ...]
    n_answers: int
    feature_dim: int
    split: str
    seed: int

    def __post_init__(self):
        for p in self.prompts:
            if p.features.shape != (self.feature_dim,):
                raise ValueError(f"prompt {p.prompt_id}: feature dim {p.features.shape} != ({self.feature_dim},)")
            if not 0 <= p.truth < self.n_answers:
                raise ValueError(f"prompt {p.prompt_id}: truth {p.truth} outside [0, {self.n_answers})")

    def __len__(self):
        return len(self.prompts)


@dataclass(frozen=True)
class PolicySnapshot:
    """One immutable version of the shared linear softmax policy."""

    weights: np.ndarray  # (n_answers, feature_dim)
    version: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("policy weights must be finite")


@dataclass(frozen=True)
class RolloutGroup:
    """G sampled answers for one prompt with their sampling probabilities."""

    prompt_id: int
    answers: np.ndarray  # int, (G,)
    probs: np.ndarray  # float, (G,), categorical prob of each sampled answer
    valid: np.ndarray  # bool, (G,)
    lengths: np.ndarray  # float, (G,), synthetic response length / max length
    policy_version: int

    @property
    def group_size(self) -> int:
        return len(self.answers)


@dataclass(frozen=True)
class ClusterSummary:
    """Answer clusters of a rollout group, largest first, ties to the smallest answer index."""

    clusters: tuple[tuple[int, int], ...]  # (answer, count)
    majority: int
    majority_size: int


@dataclass(frozen=True)
class ClassifierFeatures:
    """Rollout-derived representation fed to the acquisition classifiers.

    ``response_feats`` rows hold (sampling probability, normalized length,
    cluster-rank one-hot); invalid responses carry an all-zero rank block.
    """

    prompt_repr: np.ndarray  # (feature_dim,)
    valid_ratio: float
    cluster_dist: np.ndarray  # (G,), sorted descending, zero-padded
    response_feats: np.ndarray  # (G, 2 + G)


@dataclass(frozen=True)
class LengthModel:
    """Synthetic response lengths: normal, mean shifted for correct answers."""

    base_mean: float = 200.0
    std: float = 40.0
    correct_shift: float = -60.0
    max_len: float = 512.0


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def policy_probs(policy: PolicySnapshot, features: np.ndarray) -> np.ndarray:
    """Exact categorical distribution of the policy on one prompt."""
    return softmax(policy.weights @ features)


def sample_group(
    policy: PolicySnapshot,
    prompt: Prompt,
    group_size: int,
    rng_seed,
    q_invalid: float = 0.0,
    length_model: LengthModel = LengthModel(),
) -> RolloutGroup:
    """Sample ``group_size`` i.i.d. answers from the policy for one prompt.

    Each rollout is independently marked invalid with probability
    ``q_invalid``. Identical (seed, policy version, prompt) reproduce the
    identical group.
    """
    if group_size < 2:
        raise ValueError(f"group_size must be >= 2, got {group_size}")
    if not 0.0 <= q_invalid < 1.0:
        raise ValueError(f"q_invalid must be in [0, 1), got {q_invalid}")
    rng = np.random.default_rng(rng_seed)
    probs = policy_probs(policy, prompt.features)
    answers = rng.choice(len(probs), size=group_size, p=probs)
    valid = rng.random(group_size) >= q_invalid
    correct = answers == prompt.truth
    means = length_model.base_mean + np.where(correct, length_model.correct_shift, 0.0)
    raw = rng.normal(means, length_model.std)
    lengths = np.clip(raw, 1.0, length_model.max_len) / length_model.max_len
    return RolloutGroup(
        prompt_id=prompt.prompt_id,
        answers=answers,
        probs=probs[answers],
        valid=valid,
        lengths=lengths,
        policy_version=policy.version,
    )


def verify(group: RolloutGroup, truth: int) -> np.ndarray:
    """Rule-based verifier: reward 1 iff the answer matches truth and is valid."""
    return ((group.answers == truth) & group.valid).astype(float)


def pseudo_rewards(group: RolloutGroup, summary: ClusterSummary | None) -> np.ndarray:
    """Rewards induced by the majority-vote pseudo-label (all zero without a vote)."""
    if summary is None:
        return np.zeros(group.group_size)
    return verify(group, summary.majority)


def majority_vote(group: RolloutGroup) -> ClusterSummary:
    """Cluster valid answers; the majority is the largest cluster, ties to the smallest answer index."""
    valid_answers = group.answers[group.valid]
    if valid_answers.size == 0:
        raise NoPseudoLabelError(f"prompt {group.prompt_id}: no valid rollouts to vote over")
    counts = Counter(int(a) for a in valid_answers)
    clusters = tuple(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))
    majority, majority_size = clusters[0]
    return ClusterSummary(clusters=clusters, majority=majority, majority_size=majority_size)


def extract_features(
    prompt: Prompt, group: RolloutGroup, summary: ClusterSummary | None
) -> ClassifierFeatures:
    """Build the classifier representation of one rollout group.

    ``summary`` may be None (no valid rollouts): the cluster distribution and
    all rank one-hots are then zero.
    """
    g = group.group_size
    n_valid = int(group.valid.sum())
    cluster_dist = np.zeros(g)
    rank_of: dict[int, int] = {}
    if summary is not None:
        for rank, (answer, count) in enumerate(summary.clusters):
            cluster_dist[rank] = count / n_valid
            rank_of[answer] = rank
    rows = np.zeros((g, 2 + g))
    rows[:, 0] = group.probs
    rows[:, 1] = group.lengths
    for i in range(g):
        if group.valid[i]:
            rows[i, 2 + rank_of[int(group.answers[i])]] = 1.0
    return ClassifierFeatures(
        prompt_repr=prompt.features,
        valid_ratio=n_valid / g,
        cluster_dist=cluster_dist,
        response_feats=rows,
    )


def evaluate_policy(
    policy: PolicySnapshot,
    bank: PromptBank,
    mode: str = "greedy",
    k: int = 8,
    temperature: float = 1.0,
    rng_seed=None,
) -> float:
    """Accuracy of the policy on an eval bank.

    ``greedy``: fraction of prompts whose argmax answer is the truth.
    ``avg_at_k``: mean over prompts of (correct among k samples)/k, sampling
    at the given temperature.
    """
    if bank.split != EVAL:
        raise ValueError(f"evaluation requires an eval bank, got split={bank.split!r}")
    if len(bank) == 0:
        raise ValueError("cannot evaluate on an empty bank")
    if mode == "greedy":
        hits = sum(
            int(np.argmax(policy.weights @ p.features)) == p.truth for p in bank.prompts
        )
        return hits / len(bank)
    if mode == "avg_at_k":
        rng = np.random.default_rng(rng_seed)
        total = 0.0
        for p in bank.prompts:
            probs = softmax((policy.weights @ p.features) / temperature)
            draws = rng.choice(len(probs), size=k, p=probs)
            total += float(np.mean(draws == p.truth))
        return total / len(bank)
    raise ValueError(f"unknown eval mode {mode!r}")


def _row_normalize(w: np.ndarray) -> np.ndarray:
    return w / np.linalg.norm(w, axis=1, keepdims=True)


@dataclass(frozen=True)
class Environment:
    train: PromptBank
    eval: PromptBank
    policy: PolicySnapshot
    achieved_hardness: float


def generate_environment(
    n_answers: int,
    feature_dim: int,
    train_size: int,
    eval_size: int,
    hardness: float,
    policy_scale: float,
    seed: int,
    n_clusters: int = 0,
    cluster_spread: float = 0.5,
) -> Environment:
    """Create train/eval banks plus the matching initial policy.

    Truths are the argmax of a hidden row-normalized teacher matrix, so they
    are realizable by the policy class. The initial policy is the teacher
    perturbed by noise whose scale is bisected until roughly ``hardness`` of
    the train prompts have a wrong modal answer.

    With ``n_clusters > 0`` prompt features are drawn around shared cluster
    centers (spread ``cluster_spread`` relative to the center norm). Related
    prompts then share representation directions, so reinforcing a wrong
    majority on part of a cluster drags its correct members along; this is
    what makes pure pseudo-label training degrade vote accuracy instead of
    just freezing the initial votes.
    """
    if not 0.0 <= hardness < 1.0:
        raise ValueError(f"hardness must be in [0, 1), got {hardness}")
    n_total = train_size + eval_size
    rng_feat = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    rng_teacher = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    rng_noise = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    if n_clusters > 0:
        centers = rng_feat.normal(size=(n_clusters, feature_dim))
        assignment = np.arange(n_total) % n_clusters
        deviations = rng_feat.normal(size=(n_total, feature_dim))
        feats = (centers[assignment] + cluster_spread * deviations) / np.sqrt(
            feature_dim * (1.0 + cluster_spread**2)
        )
    else:
        feats = rng_feat.normal(size=(n_total, feature_dim)) / np.sqrt(feature_dim)
    teacher = _row_normalize(rng_teacher.normal(size=(n_answers, feature_dim)))
    truths = np.argmax(feats @ teacher.T, axis=1)
    noise = rng_noise.normal(size=(n_answers, feature_dim))

    train_feats, train_truths = feats[:train_size], truths[:train_size]

    def weights_at(sigma: float) -> np.ndarray:
        return policy_scale * _row_normalize(teacher + sigma * noise)

    def frac_wrong(sigma: float) -> float:
        pred = np.argmax(train_feats @ weights_at(sigma).T, axis=1)
        return float(np.mean(pred != train_truths))

    if hardness == 0.0:
        sigma = 0.0
    else:
        lo, hi = 0.0, 64.0
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            if frac_wrong(mid) < hardness:
                lo = mid
            else:
                hi = mid
        sigma = hi if abs(frac_wrong(hi) - hardness) <= abs(frac_wrong(lo) - hardness) else lo

    w0 = weights_at(sigma)
    achieved = frac_wrong(sigma)

    def build(split: str, offset: int, size: int) -> PromptBank:
        prompts = tuple(
            Prompt(prompt_id=offset + i, features=feats[offset + i], truth=int(truths[offset + i]))
            for i in range(size)
        )
        return PromptBank(
            prompts=prompts, n_answers=n_answers, feature_dim=feature_dim, split=split, seed=seed
        )

    return Environment(
        train=build(TRAIN, 0, train_size),
        eval=build(EVAL, train_size, eval_size),
        policy=PolicySnapshot(weights=w0, version=0),
        achieved_hardness=achieved,
    )


def bank_to_dict(bank: PromptBank) -> dict:
    return {
        "C": bank.n_answers,
        "d_p": bank.feature_dim,
        "seed": bank.seed,
        "split": bank.split,
        "prompts": [
            {"id": p.prompt_id, "features": p.features.tolist(), "truth": p.truth}
            for p in bank.prompts
        ],
    }


def bank_from_dict(data: dict) -> PromptBank:
    prompts = tuple(
        Prompt(prompt_id=int(p["id"]), features=np.asarray(p["features"], float), truth=int(p["truth"]))
        for p in data["prompts"]
    )
    return PromptBank(
        prompts=prompts,
        n_answers=int(data["C"]),
        feature_dim=int(data["d_p"]),
        split=data.get("split", TRAIN),
        seed=int(data["seed"]),
    )


def save_bank(bank: PromptBank, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bank_to_dict(bank)))


def load_bank(path: str | Path) -> PromptBank:
    return bank_from_dict(json.loads(Path(path).read_text()))
