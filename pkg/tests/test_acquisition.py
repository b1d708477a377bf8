"""Budget ledger arithmetic and the strategy partition contracts."""

import math

import numpy as np
import pytest

from rlavr import env
from rlavr.acquisition import (
    BatchItem,
    BudgetLedger,
    budget_ok,
    decide,
    exact_cag_for_item,
    ledger_advance,
    record_queries,
)
from rlavr.classifiers import init_classifier_state


def test_ledger_carry_sequence():
    ledger = BudgetLedger(p=0.2)
    quotas = [ledger_advance(ledger, 64) for _ in range(10)]
    assert quotas[0] == 12 and quotas[1] == 13
    assert sorted(set(quotas)) == [12, 13]
    assert np.mean(quotas) == pytest.approx(12.8)  # running average hits n*p exactly
    assert ledger.cumulative_seen == 640


def test_ledger_first_step_carry():
    ledger = BudgetLedger(p=0.2)
    assert ledger_advance(ledger, 64) == 12
    assert ledger.deficit_carry == pytest.approx(0.8)
    assert ledger_advance(ledger, 64) == 13
    assert ledger.deficit_carry == pytest.approx(0.6)


def test_ledger_zero_budget():
    ledger = BudgetLedger(p=0.0)
    for _ in range(5):
        assert ledger_advance(ledger, 64) == 0
    assert budget_ok(ledger)


def test_ledger_validation():
    with pytest.raises(ValueError):
        BudgetLedger(p=1.5)
    ledger = BudgetLedger(p=0.5)
    with pytest.raises(ValueError):
        ledger_advance(ledger, 0)


def test_budget_never_exceeded_when_quota_respected():
    rng = np.random.default_rng(0)
    for p in (0.1, 0.2, 0.37, 0.8):
        ledger = BudgetLedger(p=p)
        for _ in range(200):
            n = int(rng.integers(1, 100))
            quota = ledger_advance(ledger, n)
            record_queries(ledger, quota)
            assert budget_ok(ledger)
            assert ledger.cumulative_queried <= math.ceil(p * ledger.cumulative_seen)


def _make_items(n, seed=0, group_size=8, n_answers=6, q_invalid=0.0):
    e = env.generate_environment(n_answers, 8, n, 4, 0.4, 5.0, seed=seed)
    items = []
    truths = {}
    for prompt in e.train.prompts:
        group = env.sample_group(
            e.policy, prompt, group_size, rng_seed=[seed, prompt.prompt_id], q_invalid=q_invalid
        )
        try:
            summary = env.majority_vote(group)
        except env.NoPseudoLabelError:
            summary = None
        feats = env.extract_features(prompt, group, summary)
        items.append(BatchItem(prompt=prompt, group=group, summary=summary, features=feats))
        truths[prompt.prompt_id] = prompt.truth
    return items, truths


def _assert_partition(decision, items):
    ids = {it.prompt.prompt_id for it in items}
    sup = set(decision.sup)
    unsup = {i for i, _ in decision.unsup}
    drop = set(decision.drop)
    assert sup | unsup | drop == ids
    assert not (sup & unsup) and not (sup & drop) and not (unsup & drop)


def test_ttrl_all_unsup():
    items, _ = _make_items(16)
    d = decide("TTRL", items, quota=4)
    assert d.sup == () and d.drop == ()
    assert all(w == 1.0 for _, w in d.unsup)
    _assert_partition(d, items)


def test_gt_and_oracle_decay_all_sup():
    items, _ = _make_items(16)
    for strategy in ("GT", "OracleDecay"):
        d = decide(strategy, items, quota=3)
        assert len(d.sup) == 16 and d.unsup == () and d.drop == ()


def test_random_respects_quota_and_is_deterministic():
    items, _ = _make_items(20)
    d1 = decide("Random", items, quota=5, rng_seed=9)
    d2 = decide("Random", items, quota=5, rng_seed=9)
    assert d1.sup == d2.sup
    assert len(d1.sup) == 5
    _assert_partition(d1, items)
    d3 = decide("Random", items, quota=5, rng_seed=10)
    assert d3.sup != d1.sup  # overwhelmingly likely


def test_entropy_selects_most_dispersed():
    items, _ = _make_items(24, seed=3)
    d = decide("Entropy", items, quota=6)
    _assert_partition(d, items)
    from rlavr.cag import entropy_score

    chosen = {i.prompt.prompt_id: entropy_score(i.summary) for i in items if i.prompt.prompt_id in set(d.sup)}
    rest = [entropy_score(i.summary) for i in items if i.prompt.prompt_id not in set(d.sup)]
    assert min(chosen.values()) >= max(rest) - 1e-12


def test_prob_selects_least_confident():
    items, _ = _make_items(24, seed=4)
    d = decide("Prob", items, quota=6)
    from rlavr.cag import prob_score

    chosen = [prob_score(i.group) for i in items if i.prompt.prompt_id in set(d.sup)]
    rest = [prob_score(i.group) for i in items if i.prompt.prompt_id not in set(d.sup)]
    assert max(chosen) <= min(rest) + 1e-12


def test_oracle_cag_selects_highest_gap():
    items, truths = _make_items(24, seed=5)
    d = decide("OracleCAG", items, quota=6, truths=truths)
    scores = {i.prompt.prompt_id: exact_cag_for_item(i, truths[i.prompt.prompt_id]) for i in items}
    chosen = [scores[i] for i in d.sup]
    rest = [scores[i.prompt.prompt_id] for i in items if i.prompt.prompt_id not in set(d.sup)]
    assert min(chosen) >= max(rest) - 1e-12
    with pytest.raises(ValueError):
        decide("OracleCAG", items, quota=6)  # truths required


def test_oracle_wrong_vote_only_mode():
    items, truths = _make_items(32, seed=6)
    d = decide("OracleCAG", items, quota=10, truths=truths, oracle_wrong_vote_only=True)
    for pid in d.sup:
        item = next(i for i in items if i.prompt.prompt_id == pid)
        assert item.summary is None or item.summary.majority != truths[pid]


def test_care_partition_and_quota():
    items, _ = _make_items(32, seed=7)
    clf = init_classifier_state(feature_dim=8, group_size=8, rng_seed=1)
    d = decide("CARE", items, quota=6, classifiers=clf, p2=0.25, rng_seed=2)
    _assert_partition(d, items)
    assert len(d.sup) == 6
    assert len(d.unsup) == int(0.25 * 32)
    assert len(d.drop) == 32 - 6 - len(d.unsup)
    # unsup weights are the stage-1 reliability scores
    for pid, w in d.unsup:
        assert 0.0 < w < 1.0
        assert abs(d.stage1_scores[pid] - w) < 1e-12


def test_care_warmup_bypasses_stage1():
    items, _ = _make_items(16, seed=8)
    clf = init_classifier_state(feature_dim=8, group_size=8, rng_seed=3)
    d = decide("CARE", items, quota=4, classifiers=clf, p2=0.25, warmup=True)
    assert d.unsup == ()
    assert len(d.sup) == 4
    assert len(d.drop) == 12


def test_care_p2_zero_matches_warmup_partition():
    items, _ = _make_items(16, seed=9)
    clf = init_classifier_state(feature_dim=8, group_size=8, rng_seed=4)
    d_zero = decide("CARE", items, quota=4, classifiers=clf, p2=0.0)
    d_warm = decide("CARE", items, quota=4, classifiers=clf, p2=0.25, warmup=True)
    assert d_zero.sup == d_warm.sup
    assert d_zero.unsup == ()
    assert d_zero.drop == d_warm.drop


def test_care_selection_consistency_and_requirements():
    items, _ = _make_items(32, seed=10)
    clf = init_classifier_state(feature_dim=8, group_size=8, rng_seed=5)
    d = decide("CARE", items, quota=5, classifiers=clf, p2=0.25)
    with pytest.raises(ValueError):
        decide("CARE", items, quota=5)  # classifiers required
    # every supervised prompt has expected CAG >= every dropped prompt; recompute
    from rlavr.cag import admissible_counts, cag_classwise, unvoted_classwise_values
    from rlavr.classifiers import _count_mask, stage2_forward_batch

    pool = [i for i in items if i.prompt.prompt_id in set(d.sup) | set(d.drop)]
    masks = np.stack([_count_mask(8, i.summary.majority_size if i.summary else None) for i in pool])
    dists = stage2_forward_batch(clf.stage2, [i.features for i in pool], masks)
    scores = {}
    for item, dist in zip(pool, dists):
        g = 8
        if item.summary is None:
            vals = unvoted_classwise_values(g)
        else:
            vals = np.zeros(g + 1)
            for k in admissible_counts(g, item.summary.majority_size).counts:
                vals[k] = cag_classwise(g, item.summary.majority_size, k).value
        scores[item.prompt.prompt_id] = float(dist @ vals)
    if d.sup and d.drop:
        assert min(scores[i] for i in d.sup) >= max(scores[i] for i in d.drop) - 1e-12


def test_partition_property_fuzzed_all_strategies():
    rng = np.random.default_rng(11)
    clf = init_classifier_state(feature_dim=8, group_size=8, rng_seed=6)
    for trial in range(10):
        n = int(rng.integers(4, 40))
        items, truths = _make_items(n, seed=100 + trial, q_invalid=0.15)
        quota = int(rng.integers(0, n + 1))
        for strategy in ("TTRL", "Random", "Entropy", "Prob", "OracleCAG", "OracleDecay", "GT"):
            d = decide(strategy, items, quota=quota, truths=truths, rng_seed=trial)
            _assert_partition(d, items)
            if strategy not in ("GT", "OracleDecay"):
                assert len(d.sup) <= quota
        d = decide("CARE", items, quota=quota, classifiers=clf, p2=0.25, rng_seed=trial)
        _assert_partition(d, items)
        assert len(d.sup) <= quota


def test_unvoted_items_enter_stage2_candidates():
    # all rollouts invalid -> no vote -> CARE must route the prompt to stage 2
    e = env.generate_environment(6, 8, 4, 4, 0.4, 5.0, seed=12)
    items = []
    for prompt in e.train.prompts:
        group = env.sample_group(e.policy, prompt, 8, rng_seed=prompt.prompt_id)
        group = env.RolloutGroup(
            prompt_id=group.prompt_id,
            answers=group.answers,
            probs=group.probs,
            valid=np.zeros(8, bool),
            lengths=group.lengths,
            policy_version=0,
        )
        items.append(BatchItem(prompt=prompt, group=group, summary=None,
                               features=env.extract_features(prompt, group, None)))
    clf = init_classifier_state(feature_dim=8, group_size=8, rng_seed=7)
    d = decide("CARE", items, quota=2, classifiers=clf, p2=0.5)
    _assert_partition(d, items)
    assert d.unsup == ()  # unvoted prompts can never be kept as pseudo-labeled
    assert len(d.sup) == 2
