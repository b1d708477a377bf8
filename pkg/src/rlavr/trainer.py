"""End-to-end training loop: rollout, acquisition, policy and classifier
updates, budget accounting, and metric logging.

A run is fully determined by its config (which includes the seed): every
random draw flows from named seed streams derived from it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import env as env_mod
from .acquisition import (
    STRATEGIES,
    UNBUDGETED,
    AcquisitionDecision,
    BatchItem,
    BudgetLedger,
    decide,
    exact_cag_for_item,
    ledger_advance,
    record_queries,
)
from .cag import cag_exact
from .classifiers import (
    AdamWConfig,
    ClassifierConfig,
    ClassifierState,
    LabeledSample,
    classifier_update,
    init_classifier_state,
    save_classifier_state,
)
from .env import LengthModel, PolicySnapshot, PromptBank
from .grpo import (
    ClipConfig,
    Membership,
    compute_advantages,
    grpo_surrogate_and_gradient,
    mix_advantages,
    oracle_decay_advantages,
)

# seed-stream tags; every rng in a run is keyed [seed, tag, ...context]
_S_ENV = 0
_S_CLASSIFIER = 1
_S_EPOCH = 2
_S_ROLLOUT = 3
_S_DECISION = 4
_S_REPLAY = 5
_S_EVAL = 6


class ConfigError(ValueError):
    """A run config field is invalid; carries the field name for reporting."""

    def __init__(self, fld: str, message: str):
        super().__init__(f"config field '{fld}': {message}")
        self.field = fld


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "CARE"
    seed: int = 0
    # geometry
    group_size: int = 8
    batch_size: int = 64
    grpo_updates: int = 1
    epochs: int = 60
    # acquisition
    p: float = 0.2
    p2: float = 0.25
    warmup_steps: int = 10
    charge_per_query: bool = False
    physical_drop: bool = False
    oracle_wrong_vote_only: bool = False
    decay_coeff: float = 100.0
    # environment
    n_answers: int = 8
    feature_dim: int = 16
    train_size: int = 256
    eval_size: int = 128
    hardness: float = 0.45
    policy_scale: float = 8.0
    n_clusters: int = 16
    cluster_spread: float = 0.6
    q_invalid: float = 0.0
    length_base_mean: float = 200.0
    length_std: float = 40.0
    length_correct_shift: float = -60.0
    length_max: float = 512.0
    # optimization
    learning_rate: float = 8.0
    clip_delta: float = 0.2
    adv_epsilon: float = 1e-6
    kl_coeff: float = 0.0
    classifier_lr: float = 1e-4
    aux_weight: float = 1.5
    replay_mix: int = 16
    replay_capacity: int = 2048
    # evaluation
    eval_every: int = 10
    eval_mode: str = "greedy"
    eval_k: int = 8
    eval_temperature: float = 1.0


_RATIO_FIELDS = ("p", "p2", "hardness", "q_invalid")
_POSITIVE_FIELDS = (
    "group_size",
    "batch_size",
    "grpo_updates",
    "epochs",
    "n_answers",
    "feature_dim",
    "train_size",
    "eval_size",
    "eval_every",
    "eval_k",
    "replay_capacity",
)


def validate_config(cfg: RunConfig) -> RunConfig:
    if cfg.strategy not in STRATEGIES:
        raise ConfigError("strategy", f"{cfg.strategy!r} not one of {STRATEGIES}")
    for fld in _RATIO_FIELDS:
        value = getattr(cfg, fld)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(fld, f"must be in [0, 1], got {value}")
    if cfg.q_invalid >= 1.0:
        raise ConfigError("q_invalid", f"must be below 1, got {cfg.q_invalid}")
    for fld in _POSITIVE_FIELDS:
        value = getattr(cfg, fld)
        if value < 1:
            raise ConfigError(fld, f"must be >= 1, got {value}")
    if cfg.group_size < 2:
        raise ConfigError("group_size", "needs at least 2 rollouts per prompt")
    if not 0.0 < cfg.clip_delta < 1.0:
        raise ConfigError("clip_delta", f"must be in (0, 1), got {cfg.clip_delta}")
    for fld in ("adv_epsilon", "kl_coeff", "decay_coeff", "warmup_steps", "replay_mix",
                "n_clusters", "cluster_spread"):
        if getattr(cfg, fld) < 0:
            raise ConfigError(fld, "must be >= 0")
    for fld in ("learning_rate", "classifier_lr", "policy_scale", "eval_temperature"):
        if getattr(cfg, fld) <= 0:
            raise ConfigError(fld, "must be > 0")
    if cfg.eval_mode not in ("greedy", "avg_at_k"):
        raise ConfigError("eval_mode", f"must be 'greedy' or 'avg_at_k', got {cfg.eval_mode!r}")
    if cfg.hardness >= 1.0:
        raise ConfigError("hardness", "must be below 1")
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config key")
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise ConfigError("(config)", str(exc)) from exc
    return validate_config(cfg)


@dataclass
class StepRecord:
    step: int
    eval_accuracy: float  # nan when not evaluated this step
    pseudo_label_accuracy: float
    queried_count: int
    cumulative_budget_ratio: float
    mean_cag_selected: float
    stage1_accuracy: float
    stage2_top1_accuracy: float
    drop_count: int
    objective: float


METRIC_COLUMNS = [f.name for f in dataclasses.fields(StepRecord)]


@dataclass
class RunResult:
    config: RunConfig
    records: list[StepRecord]
    decisions: list[dict]
    best_step: int
    best_accuracy: float
    best_policy: PolicySnapshot
    final_policy: PolicySnapshot
    best_classifiers: ClassifierState | None
    achieved_hardness: float
    unique_annotations: int
    ledger: BudgetLedger


def _evaluate(cfg: RunConfig, policy: PolicySnapshot, bank: PromptBank, step: int) -> float:
    return env_mod.evaluate_policy(
        policy,
        bank,
        mode=cfg.eval_mode,
        k=cfg.eval_k,
        temperature=cfg.eval_temperature,
        rng_seed=np.random.SeedSequence([cfg.seed, _S_EVAL, step]),
    )


def _labeled_sample(item: BatchItem, truth: int, group_size: int) -> LabeledSample:
    correct = env_mod.verify(item.group, truth)
    if item.summary is None:
        reliable = None
        majority_size = None
        count_label = int(correct.sum())
    else:
        vote_ok = item.summary.majority == truth
        reliable = int(vote_ok)
        majority_size = item.summary.majority_size
        count_label = None if vote_ok else int(correct.sum())
    return LabeledSample(
        features=item.features,
        reliable=reliable,
        response_correct=correct,
        count_label=count_label,
        majority_size=majority_size,
        group_size=group_size,
    )


def build_environment(cfg: RunConfig) -> env_mod.Environment:
    """Banks plus initial policy implied by the config's env fields and seed."""
    return env_mod.generate_environment(
        n_answers=cfg.n_answers,
        feature_dim=cfg.feature_dim,
        train_size=cfg.train_size,
        eval_size=cfg.eval_size,
        hardness=cfg.hardness,
        policy_scale=cfg.policy_scale,
        seed=np.random.SeedSequence([cfg.seed, _S_ENV]).generate_state(1)[0].item(),
        n_clusters=cfg.n_clusters,
        cluster_spread=cfg.cluster_spread,
    )


def run_experiment(config: RunConfig) -> RunResult:
    """Execute one full training run and return its metrics and checkpoints."""
    cfg = validate_config(config)
    environment = build_environment(cfg)
    policy = environment.policy
    length_model = LengthModel(
        base_mean=cfg.length_base_mean,
        std=cfg.length_std,
        correct_shift=cfg.length_correct_shift,
        max_len=cfg.length_max,
    )
    clip = ClipConfig(delta=cfg.clip_delta, epsilon=cfg.adv_epsilon, kl_coeff=cfg.kl_coeff)
    truths = {p.prompt_id: p.truth for p in environment.train.prompts}

    classifiers: ClassifierState | None = None
    if cfg.strategy == "CARE":
        classifiers = init_classifier_state(
            feature_dim=cfg.feature_dim,
            group_size=cfg.group_size,
            rng_seed=np.random.SeedSequence([cfg.seed, _S_CLASSIFIER]),
            config=ClassifierConfig(
                aux_weight=cfg.aux_weight,
                replay_mix=cfg.replay_mix,
                replay_capacity=cfg.replay_capacity,
                adamw=AdamWConfig(lr=cfg.classifier_lr),
            ),
        )

    ledger = BudgetLedger(p=cfg.p)
    annotated: set[int] = set()
    records: list[StepRecord] = []
    decisions_log: list[dict] = []
    best_step, best_accuracy = -1, -1.0
    best_policy = policy
    best_classifiers = None
    step = 0
    steps_per_epoch = math.ceil(cfg.train_size / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    for epoch in range(cfg.epochs):
        ref_policy = policy
        order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _S_EPOCH, epoch]))
        order = order_rng.permutation(cfg.train_size)
        for start in range(0, cfg.train_size, cfg.batch_size):
            step += 1
            batch_prompts = [environment.train.prompts[i] for i in order[start : start + cfg.batch_size]]
            old_policy = policy

            items: list[BatchItem] = []
            for prompt in batch_prompts:
                group = env_mod.sample_group(
                    old_policy,
                    prompt,
                    cfg.group_size,
                    rng_seed=np.random.SeedSequence([cfg.seed, _S_ROLLOUT, step, prompt.prompt_id]),
                    q_invalid=cfg.q_invalid,
                    length_model=length_model,
                )
                try:
                    summary = env_mod.majority_vote(group)
                except env_mod.NoPseudoLabelError:
                    summary = None
                items.append(
                    BatchItem(
                        prompt=prompt,
                        group=group,
                        summary=summary,
                        features=env_mod.extract_features(prompt, group, summary),
                    )
                )

            quota = ledger_advance(ledger, len(items))
            decision = decide(
                cfg.strategy,
                items,
                quota,
                classifiers=classifiers,
                truths=truths,
                p2=cfg.p2,
                rng_seed=np.random.SeedSequence([cfg.seed, _S_DECISION, step]),
                warmup=step <= cfg.warmup_steps,
                oracle_wrong_vote_only=cfg.oracle_wrong_vote_only,
            )
            if cfg.charge_per_query:
                charged = len(decision.sup)
            else:
                charged = len(set(decision.sup) - annotated)
            annotated.update(decision.sup)
            record_queries(ledger, charged)

            sup_set = set(decision.sup)
            drop_set = set(decision.drop)
            unsup_weight = dict(decision.unsup)
            mixed: dict[int, np.ndarray] = {}
            cag_selected: list[float] = []
            for item in items:
                pid = item.prompt.prompt_id
                if pid in sup_set:
                    gt_adv = compute_advantages(
                        env_mod.verify(item.group, truths[pid]), cfg.adv_epsilon
                    )
                    if cfg.strategy == "OracleDecay":
                        score = exact_cag_for_item(item, truths[pid])
                        gt_adv = oracle_decay_advantages(gt_adv, score, cfg.decay_coeff)
                    mixed[pid] = mix_advantages(gt_adv, None, Membership.SUP).values
                    cag_selected.append(exact_cag_for_item(item, truths[pid]))
                elif pid in drop_set:
                    mixed[pid] = np.zeros(cfg.group_size)
                else:
                    pseudo_adv = compute_advantages(
                        env_mod.pseudo_rewards(item.group, item.summary), cfg.adv_epsilon
                    )
                    mixed[pid] = mix_advantages(
                        None, pseudo_adv, Membership.UNSUP, unsup_weight[pid]
                    ).values

            objective_sum = 0.0
            for _ in range(cfg.grpo_updates):
                grad_total = np.zeros_like(policy.weights)
                obj_total = 0.0
                for item in items:
                    pid = item.prompt.prompt_id
                    if cfg.physical_drop and pid in drop_set:
                        continue
                    obj, grad = grpo_surrogate_and_gradient(
                        policy,
                        old_policy,
                        item.prompt.features,
                        item.group,
                        mixed[pid],
                        clip,
                        ref_policy=ref_policy if cfg.kl_coeff > 0 else None,
                    )
                    obj_total += obj
                    grad_total += grad
                obj_total /= len(items)
                grad_total /= len(items)
                policy = PolicySnapshot(
                    weights=policy.weights + cfg.learning_rate * grad_total,
                    version=policy.version + 1,
                )
                objective_sum += obj_total

            if classifiers is not None:
                fresh = [
                    _labeled_sample(item, truths[item.prompt.prompt_id], cfg.group_size)
                    for item in items
                    if item.prompt.prompt_id in sup_set
                ]
                classifiers = classifier_update(
                    classifiers,
                    fresh,
                    rng_seed=np.random.SeedSequence([cfg.seed, _S_REPLAY, step]),
                )

            votes_ok = sum(
                1
                for item in items
                if item.summary is not None and item.summary.majority == truths[item.prompt.prompt_id]
            )
            stage1_acc = np.nan
            if decision.stage1_scores:
                hits = 0
                for item in items:
                    pid = item.prompt.prompt_id
                    if item.summary is None or pid not in decision.stage1_scores:
                        continue
                    predicted = decision.stage1_scores[pid] >= 0.5
                    actual = item.summary.majority == truths[pid]
                    hits += int(predicted == actual)
                stage1_acc = hits / len(decision.stage1_scores)
            stage2_acc = np.nan
            if decision.stage2_top1:
                hits = 0
                for item in items:
                    pid = item.prompt.prompt_id
                    if pid not in decision.stage2_top1:
                        continue
                    true_k = int(env_mod.verify(item.group, truths[pid]).sum())
                    hits += int(decision.stage2_top1[pid] == true_k)
                stage2_acc = hits / len(decision.stage2_top1)

            eval_accuracy = np.nan
            if step % cfg.eval_every == 0 or step == total_steps:
                eval_accuracy = _evaluate(cfg, policy, environment.eval, step)
                if eval_accuracy > best_accuracy:
                    best_accuracy = eval_accuracy
                    best_step = step
                    best_policy = policy
                    if classifiers is not None:
                        best_classifiers = dataclasses.replace(
                            classifiers,
                            stage1={k: v.copy() for k, v in classifiers.stage1.items()},
                            stage2={k: v.copy() for k, v in classifiers.stage2.items()},
                        )

            records.append(
                StepRecord(
                    step=step,
                    eval_accuracy=eval_accuracy,
                    pseudo_label_accuracy=votes_ok / len(items),
                    queried_count=charged,
                    cumulative_budget_ratio=ledger.cumulative_queried / ledger.cumulative_seen,
                    mean_cag_selected=float(np.mean(cag_selected)) if cag_selected else np.nan,
                    stage1_accuracy=stage1_acc,
                    stage2_top1_accuracy=stage2_acc,
                    drop_count=len(decision.drop),
                    objective=objective_sum / cfg.grpo_updates,
                )
            )
            decisions_log.append(
                {
                    "step": step,
                    "strategy": decision.strategy,
                    "sup": list(decision.sup),
                    "unsup": [[pid, w] for pid, w in decision.unsup],
                    "drop": list(decision.drop),
                    "quota": decision.quota,
                    "charged": charged,
                    "batch_size": len(items),
                }
            )

    return RunResult(
        config=cfg,
        records=records,
        decisions=decisions_log,
        best_step=best_step,
        best_accuracy=best_accuracy,
        best_policy=best_policy,
        final_policy=policy,
        best_classifiers=best_classifiers,
        achieved_hardness=environment.achieved_hardness,
        unique_annotations=len(annotated),
        ledger=ledger,
    )


def _csv_cell(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def write_metrics_csv(records: list[StepRecord], path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rec in records:
            writer.writerow([_csv_cell(getattr(rec, col)) for col in METRIC_COLUMNS])


def run_summary(result: RunResult) -> dict:
    last = result.records[-1]
    return {
        "strategy": result.config.strategy,
        "seed": result.config.seed,
        "steps": len(result.records),
        "best_step": result.best_step,
        "best_accuracy": result.best_accuracy,
        "final_pseudo_label_accuracy": last.pseudo_label_accuracy,
        "cumulative_queried": result.ledger.cumulative_queried,
        "cumulative_seen": result.ledger.cumulative_seen,
        "budget_ratio": result.ledger.cumulative_queried / max(result.ledger.cumulative_seen, 1),
        "unique_annotations": result.unique_annotations,
        "achieved_hardness": result.achieved_hardness,
    }


def write_run_artifacts(result: RunResult, out_dir: str | Path) -> None:
    """metrics.csv, summary.json, decisions.jsonl, resolved config, checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.records, out / "metrics.csv")
    (out / "summary.json").write_text(json.dumps(run_summary(result), indent=2) + "\n")
    with (out / "decisions.jsonl").open("w") as fh:
        for row in result.decisions:
            fh.write(json.dumps(row) + "\n")
    (out / "config.yaml").write_text(
        yaml.safe_dump(dataclasses.asdict(result.config), sort_keys=True)
    )
    np.savez(
        out / "policy_best.npz",
        weights=result.best_policy.weights,
        version=result.best_policy.version,
        step=result.best_step,
    )
    if result.best_classifiers is not None:
        save_classifier_state(result.best_classifiers, out / "classifiers_best.npz")


_ENV_FIELDS = (
    "group_size",
    "batch_size",
    "grpo_updates",
    "epochs",
    "n_answers",
    "feature_dim",
    "train_size",
    "eval_size",
    "hardness",
    "policy_scale",
    "q_invalid",
)


def compare_strategies(configs: list[RunConfig]) -> list[dict]:
    """Run several strategy variants over shared seeds and rank them.

    All configs must describe the identical environment (same env fields and
    the same seed set per strategy); the comparison is then paired by seed.
    """
    if not configs:
        raise ValueError("no configs to compare")
    reference = configs[0]
    for cfg in configs[1:]:
        for fld in _ENV_FIELDS:
            if getattr(cfg, fld) != getattr(reference, fld):
                raise ValueError(
                    f"configs disagree on environment field '{fld}'; comparisons must share the environment"
                )
    by_strategy: dict[str, dict[int, float]] = {}
    for cfg in configs:
        result = run_experiment(cfg)
        by_strategy.setdefault(cfg.strategy, {})[cfg.seed] = result.best_accuracy
    seed_sets = {frozenset(v) for v in by_strategy.values()}
    if len(seed_sets) > 1:
        raise ValueError("every strategy must be run over the same seed set")
    rows = []
    for strategy, accs in by_strategy.items():
        values = np.array([accs[s] for s in sorted(accs)])
        rows.append(
            {
                "strategy": strategy,
                "seeds": sorted(accs),
                "best_accuracies": values.tolist(),
                "mean": float(values.mean()),
                "std": float(values.std()),
            }
        )
    rows.sort(key=lambda r: -r["mean"])
    return rows
