"""Acquisition strategies: partition a rollout batch into supervised,
unsupervised, and dropped prompts under the annotation budget.

The budget ledger offers each step a quota of floor(n*p + carry) with the
fractional remainder carried forward, so the running average annotation rate
matches the target ratio exactly up to integer rounding. GT and OracleDecay
are unbudgeted reference strategies that annotate everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cag import admissible_counts, cag_classwise, cag_exact, entropy_score, prob_score, unvoted_classwise_values
from .classifiers import ClassifierState, _count_mask, stage1_forward_batch, stage2_forward_batch
from .env import ClassifierFeatures, ClusterSummary, Prompt, RolloutGroup, pseudo_rewards, verify
from .grpo import compute_advantages

STRATEGIES = ("TTRL", "Random", "Entropy", "Prob", "OracleCAG", "OracleDecay", "GT", "CARE")
UNBUDGETED = frozenset({"GT", "OracleDecay"})


@dataclass
class BudgetLedger:
    """Running annotation budget accounting for one training run."""

    p: float
    per_step_quota: int = 0
    cumulative_queried: int = 0
    cumulative_seen: int = 0
    deficit_carry: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"budget ratio must be in [0, 1], got {self.p}")


def ledger_advance(ledger: BudgetLedger, batch_size: int) -> int:
    """Quota for the next batch: floor(n*p + carry), remainder carried over."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    raw = batch_size * ledger.p + ledger.deficit_carry
    quota = int(math.floor(raw + 1e-12))
    ledger.deficit_carry = raw - quota
    ledger.cumulative_seen += batch_size
    ledger.per_step_quota = quota
    return quota


def record_queries(ledger: BudgetLedger, count: int) -> None:
    ledger.cumulative_queried += count


def budget_ok(ledger: BudgetLedger) -> bool:
    if ledger.cumulative_seen == 0:
        return ledger.cumulative_queried == 0
    return ledger.cumulative_queried <= math.ceil(ledger.p * ledger.cumulative_seen)


@dataclass(frozen=True)
class BatchItem:
    """Everything a strategy may look at for one prompt of the batch."""

    prompt: Prompt
    group: RolloutGroup
    summary: ClusterSummary | None
    features: ClassifierFeatures


@dataclass(frozen=True)
class AcquisitionDecision:
    """Disjoint, exhaustive partition of a batch with per-prompt pseudo weights."""

    sup: tuple[int, ...]
    unsup: tuple[tuple[int, float], ...]  # (prompt_id, reliability weight)
    drop: tuple[int, ...]
    strategy: str
    quota: int
    stage1_scores: dict[int, float] | None = None
    stage2_top1: dict[int, int] | None = None

    def membership_counts(self) -> tuple[int, int, int]:
        return len(self.sup), len(self.unsup), len(self.drop)


def exact_cag_for_item(item: BatchItem, truth: int) -> float:
    """Ground-truth CAG of one rollout group (epsilon = 0 convention)."""
    gt = compute_advantages(verify(item.group, truth), epsilon=0.0)
    pseudo = compute_advantages(pseudo_rewards(item.group, item.summary), epsilon=0.0)
    return cag_exact(gt, pseudo).value


def _take_top(candidates: list[tuple[float, int]], quota: int) -> tuple[set[int], list[int]]:
    """Top-quota ids by descending score, ties to the smaller prompt id."""
    ranked = sorted(candidates, key=lambda si: (-si[0], si[1]))
    chosen = {pid for _, pid in ranked[:quota]}
    rest = [pid for _, pid in ranked[quota:]]
    return chosen, rest


def decide(
    strategy: str,
    items: list[BatchItem],
    quota: int,
    classifiers: ClassifierState | None = None,
    truths: dict[int, int] | None = None,
    p2: float = 0.0,
    rng_seed=None,
    warmup: bool = False,
    oracle_wrong_vote_only: bool = False,
) -> AcquisitionDecision:
    """Partition a batch according to the chosen strategy.

    CARE routes the top-p2 fraction by predicted reliability to the
    unsupervised set (weighted by the reliability score), ranks the rest by
    expected CAG, annotates the top-quota, and drops the remainder. During
    warmup the reliability stage is bypassed and every prompt is a
    supervision candidate. Baselines annotate top-quota by their criterion
    and keep the rest as weight-1 pseudo-labeled prompts.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r} (choose from {STRATEGIES})")
    if not 0.0 <= p2 <= 1.0:
        raise ValueError(f"p2 must be in [0, 1], got {p2}")
    ids = [it.prompt.prompt_id for it in items]

    if strategy == "TTRL":
        return AcquisitionDecision(
            sup=(), unsup=tuple((i, 1.0) for i in ids), drop=(), strategy=strategy, quota=quota
        )

    if strategy in UNBUDGETED:
        return AcquisitionDecision(
            sup=tuple(ids), unsup=(), drop=(), strategy=strategy, quota=quota
        )

    if strategy == "Random":
        rng = np.random.default_rng(rng_seed)
        order = [ids[i] for i in rng.permutation(len(ids))]
        sup = set(order[:quota])
        unsup = tuple((i, 1.0) for i in ids if i not in sup)
        return AcquisitionDecision(
            sup=tuple(sorted(sup)), unsup=unsup, drop=(), strategy=strategy, quota=quota
        )

    if strategy == "Entropy":
        scored = [
            (entropy_score(it.summary) if it.summary is not None else np.inf, it.prompt.prompt_id)
            for it in items
        ]
        sup, _ = _take_top(scored, quota)  # highest entropy queried
        unsup = tuple((i, 1.0) for i in ids if i not in sup)
        return AcquisitionDecision(
            sup=tuple(sorted(sup)), unsup=unsup, drop=(), strategy=strategy, quota=quota
        )

    if strategy == "Prob":
        scored = [
            (-(prob_score(it.group) if it.group.valid.any() else 0.0), it.prompt.prompt_id)
            for it in items
        ]
        sup, _ = _take_top(scored, quota)  # lowest mean probability queried
        unsup = tuple((i, 1.0) for i in ids if i not in sup)
        return AcquisitionDecision(
            sup=tuple(sorted(sup)), unsup=unsup, drop=(), strategy=strategy, quota=quota
        )

    if strategy == "OracleCAG":
        if truths is None:
            raise ValueError("OracleCAG requires ground-truth answers")
        candidates = []
        for it in items:
            pid = it.prompt.prompt_id
            if oracle_wrong_vote_only:
                vote_ok = it.summary is not None and it.summary.majority == truths[pid]
                if vote_ok:
                    continue
            candidates.append((exact_cag_for_item(it, truths[pid]), pid))
        sup, _ = _take_top(candidates, quota)
        unsup = tuple((i, 1.0) for i in ids if i not in sup)
        return AcquisitionDecision(
            sup=tuple(sorted(sup)), unsup=unsup, drop=(), strategy=strategy, quota=quota
        )

    # CARE
    if classifiers is None:
        raise ValueError("CARE requires classifier state")
    voted = [it for it in items if it.summary is not None]
    unvoted = [it for it in items if it.summary is None]
    stage1_scores: dict[int, float] = {}
    unsup_pairs: list[tuple[int, float]] = []
    if warmup:
        err_items = list(items)
    else:
        if voted:
            rel, _ = stage1_forward_batch(classifiers.stage1, [it.features for it in voted])
            for it, score in zip(voted, rel):
                stage1_scores[it.prompt.prompt_id] = float(score)
        n_unsup = int(math.floor(p2 * len(items)))
        ranked = sorted(
            ((stage1_scores[it.prompt.prompt_id], it.prompt.prompt_id) for it in voted),
            key=lambda si: (-si[0], si[1]),
        )
        keep = {pid for _, pid in ranked[:n_unsup]}
        unsup_pairs = [(pid, score) for score, pid in ranked[:n_unsup]]
        unsup_pairs.sort(key=lambda pw: pw[0])
        err_items = [it for it in voted if it.prompt.prompt_id not in keep] + unvoted

    stage2_top1: dict[int, int] = {}
    scored = []
    if err_items:
        g = err_items[0].group.group_size
        masks = np.stack(
            [
                _count_mask(g, it.summary.majority_size if it.summary is not None else None)
                for it in err_items
            ]
        )
        dists = stage2_forward_batch(classifiers.stage2, [it.features for it in err_items], masks)
        classwise_cache: dict[int, np.ndarray] = {}
        unvoted_values = unvoted_classwise_values(g)
        for it, dist in zip(err_items, dists):
            pid = it.prompt.prompt_id
            stage2_top1[pid] = int(np.argmax(dist))
            if it.summary is None:
                values = unvoted_values
            else:
                m = it.summary.majority_size
                if m not in classwise_cache:
                    vals = np.zeros(g + 1)
                    for k in admissible_counts(g, m).counts:
                        vals[k] = cag_classwise(g, m, k).value
                    classwise_cache[m] = vals
                values = classwise_cache[m]
            scored.append((float(dist @ values), pid))
    sup, rest = _take_top(scored, quota)
    return AcquisitionDecision(
        sup=tuple(sorted(sup)),
        unsup=tuple(unsup_pairs),
        drop=tuple(sorted(rest)),
        strategy=strategy,
        quota=quota,
        stage1_scores=stage1_scores or None,
        stage2_top1=stage2_top1 or None,
    )
