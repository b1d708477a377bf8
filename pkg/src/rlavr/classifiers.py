"""Cascaded acquisition classifiers.

Two numpy MLPs with a shared encoder layout and manual backprop: stage 1
predicts pseudo-label reliability (plus an auxiliary per-response
correctness head), stage 2 predicts a distribution over the number of
correct non-majority responses with inadmissible counts masked out. Training
uses AdamW, FIFO replay buffers with stratified mixing for stage 2, and
class-balanced loss weights.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cag import AdmissibleCounts
from .env import ClassifierFeatures

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpDims:
    global_dim: int
    resp_dim: int
    n_counts: int
    prompt_hidden: int = 128
    resp_hidden: int = 64
    resp_out: int = 512
    head_hidden: int = 256

    @property
    def trunk_dim(self) -> int:
        return self.prompt_hidden + self.resp_out

    @property
    def aux_in_dim(self) -> int:
        return self.resp_out + self.prompt_hidden


def dims_for(feature_dim: int, group_size: int, **overrides) -> MlpDims:
    """Network dimensions implied by the environment's feature layout."""
    return MlpDims(
        global_dim=feature_dim + 1 + group_size,
        resp_dim=2 + group_size,
        n_counts=group_size + 1,
        **overrides,
    )


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8


@dataclass
class AdamWState:
    m: Params
    v: Params
    step: int = 0


def adamw_init(params: Params) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adamw_step(params: Params, grads: Params, state: AdamWState, cfg: AdamWConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    A zero gradient leaves the moment term at zero, so the parameter moves
    only by -lr * weight_decay * param.
    """
    state.step += 1
    t = state.step
    for key, p in params.items():
        g = grads[key]
        state.m[key] = cfg.beta1 * state.m[key] + (1 - cfg.beta1) * g
        state.v[key] = cfg.beta2 * state.v[key] + (1 - cfg.beta2) * g * g
        m_hat = state.m[key] / (1 - cfg.beta1**t)
        v_hat = state.v[key] / (1 - cfg.beta2**t)
        p -= cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p)


def _linear_init(rng, out_dim, in_dim):
    bound = 1.0 / np.sqrt(in_dim)
    return (
        rng.uniform(-bound, bound, size=(out_dim, in_dim)),
        rng.uniform(-bound, bound, size=out_dim),
    )


def _encoder_init(dims: MlpDims, rng) -> Params:
    p: Params = {}
    p["enc_g_W"], p["enc_g_b"] = _linear_init(rng, dims.prompt_hidden, dims.global_dim)
    p["enc_r1_W"], p["enc_r1_b"] = _linear_init(rng, dims.resp_hidden, dims.resp_dim)
    p["enc_r2_W"], p["enc_r2_b"] = _linear_init(rng, dims.resp_out, dims.resp_hidden)
    return p


def init_stage1_params(dims: MlpDims, rng_seed) -> Params:
    rng = np.random.default_rng(rng_seed)
    p = _encoder_init(dims, rng)
    p["rel1_W"], p["rel1_b"] = _linear_init(rng, dims.head_hidden, dims.trunk_dim)
    p["rel2_W"], p["rel2_b"] = _linear_init(rng, 1, dims.head_hidden)
    p["aux1_W"], p["aux1_b"] = _linear_init(rng, dims.head_hidden, dims.aux_in_dim)
    p["aux2_W"], p["aux2_b"] = _linear_init(rng, 1, dims.head_hidden)
    return p


def init_stage2_params(dims: MlpDims, rng_seed) -> Params:
    rng = np.random.default_rng(rng_seed)
    p = _encoder_init(dims, rng)
    p["head1_W"], p["head1_b"] = _linear_init(rng, dims.head_hidden, dims.trunk_dim)
    p["head2_W"], p["head2_b"] = _linear_init(rng, dims.n_counts, dims.head_hidden)
    return p


def pack_features(feats: ClassifierFeatures) -> tuple[np.ndarray, np.ndarray]:
    gvec = np.concatenate([feats.prompt_repr, [feats.valid_ratio], feats.cluster_dist])
    return gvec, feats.response_feats


def pack_batch(batch: list[ClassifierFeatures]) -> tuple[np.ndarray, np.ndarray]:
    pairs = [pack_features(f) for f in batch]
    return np.stack([g for g, _ in pairs]), np.stack([r for _, r in pairs])


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_with_logits(logits, labels):
    return np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))


def _encoder_forward(params: Params, xg: np.ndarray, xr: np.ndarray) -> dict:
    eg_pre = xg @ params["enc_g_W"].T + params["enc_g_b"]
    eg = np.maximum(eg_pre, 0.0)
    h1_pre = xr @ params["enc_r1_W"].T + params["enc_r1_b"]
    h1 = np.maximum(h1_pre, 0.0)
    h2_pre = h1 @ params["enc_r2_W"].T + params["enc_r2_b"]
    h2 = np.maximum(h2_pre, 0.0)
    er = h2.mean(axis=1)
    z = np.concatenate([eg, er], axis=1)
    return dict(xg=xg, xr=xr, eg_pre=eg_pre, eg=eg, h1_pre=h1_pre, h1=h1, h2_pre=h2_pre, h2=h2, z=z)


def _encoder_backward(params: Params, cache: dict, dz: np.ndarray, dh2_extra, deg_extra) -> Params:
    """Backprop dz (at the trunk) plus head-specific extras into encoder grads."""
    hp = cache["eg"].shape[1]
    g = cache["h2"].shape[1]
    deg = dz[:, :hp]
    der = dz[:, hp:]
    dh2 = np.repeat(der[:, None, :], g, axis=1) / g
    if dh2_extra is not None:
        dh2 = dh2 + dh2_extra
    if deg_extra is not None:
        deg = deg + deg_extra
    dh2_pre = dh2 * (cache["h2_pre"] > 0)
    grads: Params = {}
    grads["enc_r2_W"] = np.einsum("bgo,bgh->oh", dh2_pre, cache["h1"])
    grads["enc_r2_b"] = dh2_pre.sum(axis=(0, 1))
    dh1 = dh2_pre @ params["enc_r2_W"]
    dh1_pre = dh1 * (cache["h1_pre"] > 0)
    grads["enc_r1_W"] = np.einsum("bgh,bgd->hd", dh1_pre, cache["xr"])
    grads["enc_r1_b"] = dh1_pre.sum(axis=(0, 1))
    deg_pre = deg * (cache["eg_pre"] > 0)
    grads["enc_g_W"] = deg_pre.T @ cache["xg"]
    grads["enc_g_b"] = deg_pre.sum(axis=0)
    return grads


def _stage1_forward_arrays(params: Params, xg: np.ndarray, xr: np.ndarray) -> dict:
    cache = _encoder_forward(params, xg, xr)
    rh_pre = cache["z"] @ params["rel1_W"].T + params["rel1_b"]
    rh = np.maximum(rh_pre, 0.0)
    rel_logit = (rh @ params["rel2_W"].T + params["rel2_b"])[:, 0]
    g = xr.shape[1]
    a_in = np.concatenate([cache["h2"], np.repeat(cache["eg"][:, None, :], g, axis=1)], axis=2)
    ah_pre = a_in @ params["aux1_W"].T + params["aux1_b"]
    ah = np.maximum(ah_pre, 0.0)
    aux_logit = (ah @ params["aux2_W"].T + params["aux2_b"])[..., 0]
    cache.update(rh_pre=rh_pre, rh=rh, rel_logit=rel_logit, a_in=a_in, ah_pre=ah_pre, ah=ah,
                 aux_logit=aux_logit)
    return cache


def stage1_forward_batch(
    params: Params, batch: list[ClassifierFeatures]
) -> tuple[np.ndarray, np.ndarray]:
    """Reliability probabilities (B,) and per-response correctness probabilities (B, G)."""
    xg, xr = pack_batch(batch)
    cache = _stage1_forward_arrays(params, xg, xr)
    return _sigmoid(cache["rel_logit"]), _sigmoid(cache["aux_logit"])


def stage1_forward(params: Params, feats: ClassifierFeatures) -> tuple[float, np.ndarray]:
    rel, aux = stage1_forward_batch(params, [feats])
    return float(rel[0]), aux[0]


def _count_mask(group_size: int, majority_size: int | None) -> np.ndarray:
    """Admissible-count mask over 0..G; no vote (None) admits the full range."""
    mask = np.zeros(group_size + 1, dtype=bool)
    if majority_size is None:
        mask[:] = True
    else:
        mask[: min(group_size - majority_size, majority_size) + 1] = True
    return mask


def _masked_softmax(logits: np.ndarray, masks: np.ndarray) -> np.ndarray:
    shifted = np.where(masks, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(masks, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _stage2_forward_arrays(params: Params, xg: np.ndarray, xr: np.ndarray) -> dict:
    cache = _encoder_forward(params, xg, xr)
    sh_pre = cache["z"] @ params["head1_W"].T + params["head1_b"]
    sh = np.maximum(sh_pre, 0.0)
    logits = sh @ params["head2_W"].T + params["head2_b"]
    cache.update(sh_pre=sh_pre, sh=sh, logits=logits)
    return cache


def stage2_forward_batch(
    params: Params, batch: list[ClassifierFeatures], masks: np.ndarray
) -> np.ndarray:
    """Masked count distributions (B, G+1); masked classes carry exactly zero."""
    if not masks.any(axis=-1).all():
        raise ValueError("every sample needs a non-empty admissible count set")
    xg, xr = pack_batch(batch)
    cache = _stage2_forward_arrays(params, xg, xr)
    return _masked_softmax(cache["logits"], masks)


def stage2_forward(
    params: Params, feats: ClassifierFeatures, admissible: AdmissibleCounts | None
) -> np.ndarray:
    """Count distribution for one sample; ``admissible=None`` admits all counts."""
    group_size = feats.response_feats.shape[0]
    if admissible is None:
        mask = _count_mask(group_size, None)
    else:
        mask = np.zeros(group_size + 1, dtype=bool)
        mask[list(admissible.counts)] = True
        if not mask.any():
            raise ValueError("empty admissible count set")
    return stage2_forward_batch(params, [feats], mask[None, :])[0]


def class_balanced_weights(
    labels, n_classes: int, power: float = 0.5, clip_range: tuple[float, float] = (0.25, 4.0)
) -> np.ndarray:
    """Per-class weights clip((mean_freq / freq_c)^power, lo, hi); absent classes get 0."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("cannot balance an empty batch")
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    present = counts > 0
    freq = counts / labels.size
    mean_freq = freq[present].mean()
    weights = np.zeros(n_classes)
    weights[present] = np.clip((mean_freq / freq[present]) ** power, *clip_range)
    return weights


@dataclass(frozen=True)
class LabeledSample:
    """One annotated prompt's classifier training record.

    ``reliable`` is None when no vote existed; ``count_label`` is None when
    the vote was correct (the correct-count concept applies to wrong votes).
    """

    features: ClassifierFeatures
    reliable: int | None
    response_correct: np.ndarray
    count_label: int | None
    majority_size: int | None
    group_size: int


def stage1_loss(
    params: Params,
    batch: list[LabeledSample],
    lambda_aux: float = 1.5,
    class_weights: np.ndarray | None = None,
) -> tuple[float, Params]:
    """Class-weighted reliability BCE plus lambda_aux times mean response BCE.

    Returns the scalar loss and exact gradients for every parameter.
    """
    if not batch:
        raise ValueError("stage-1 loss requires a non-empty batch")
    labels = np.array([s.reliable for s in batch], dtype=float)
    if np.any(np.isnan(labels)):
        raise ValueError("stage-1 samples must carry reliability labels")
    xg, xr = pack_batch([s.features for s in batch])
    y_aux = np.stack([s.response_correct for s in batch])
    b, g = y_aux.shape
    if class_weights is None:
        class_weights = np.ones(2)
    w = class_weights[labels.astype(int)]

    cache = _stage1_forward_arrays(params, xg, xr)
    rel_ce = _bce_with_logits(cache["rel_logit"], labels)
    aux_ce = _bce_with_logits(cache["aux_logit"], y_aux)
    loss = float(np.mean(w * rel_ce) + lambda_aux * np.mean(aux_ce))

    d_rel_logit = w * (_sigmoid(cache["rel_logit"]) - labels) / b
    d_aux_logit = lambda_aux * (_sigmoid(cache["aux_logit"]) - y_aux) / (b * g)

    grads: Params = {}
    grads["rel2_W"] = (d_rel_logit[None, :] @ cache["rh"])
    grads["rel2_b"] = np.array([d_rel_logit.sum()])
    drh = np.outer(d_rel_logit, params["rel2_W"][0])
    drh_pre = drh * (cache["rh_pre"] > 0)
    grads["rel1_W"] = drh_pre.T @ cache["z"]
    grads["rel1_b"] = drh_pre.sum(axis=0)
    dz = drh_pre @ params["rel1_W"]

    grads["aux2_W"] = np.einsum("bg,bgh->h", d_aux_logit, cache["ah"])[None, :]
    grads["aux2_b"] = np.array([d_aux_logit.sum()])
    dah = d_aux_logit[..., None] * params["aux2_W"][0]
    dah_pre = dah * (cache["ah_pre"] > 0)
    grads["aux1_W"] = np.einsum("bgh,bgd->hd", dah_pre, cache["a_in"])
    grads["aux1_b"] = dah_pre.sum(axis=(0, 1))
    da_in = dah_pre @ params["aux1_W"]
    resp_out = cache["h2"].shape[2]
    dh2_extra = da_in[:, :, :resp_out]
    deg_extra = da_in[:, :, resp_out:].sum(axis=1)

    grads.update(_encoder_backward(params, cache, dz, dh2_extra, deg_extra))
    return loss, grads


def stage2_loss(
    params: Params,
    batch: list[LabeledSample],
    class_weights: np.ndarray | None = None,
) -> tuple[float, Params]:
    """Class-weighted cross-entropy over the masked count distribution."""
    if not batch:
        raise ValueError("stage-2 loss requires a non-empty batch")
    labels = np.array([s.count_label for s in batch], dtype=int)
    xg, xr = pack_batch([s.features for s in batch])
    masks = np.stack([_count_mask(s.group_size, s.majority_size) for s in batch])
    b = len(batch)
    n_counts = masks.shape[1]
    if class_weights is None:
        class_weights = np.ones(n_counts)
    w = class_weights[labels]

    cache = _stage2_forward_arrays(params, xg, xr)
    probs = _masked_softmax(cache["logits"], masks)
    picked = probs[np.arange(b), labels]
    if np.any(picked <= 0.0):
        raise ValueError("count label lies outside the admissible set")
    loss = float(np.mean(w * -np.log(picked)))

    one_hot = np.zeros_like(probs)
    one_hot[np.arange(b), labels] = 1.0
    d_logits = (w[:, None] * (probs - one_hot)) / b

    grads: Params = {}
    grads["head2_W"] = d_logits.T @ cache["sh"]
    grads["head2_b"] = d_logits.sum(axis=0)
    dsh = d_logits @ params["head2_W"]
    dsh_pre = dsh * (cache["sh_pre"] > 0)
    grads["head1_W"] = dsh_pre.T @ cache["z"]
    grads["head1_b"] = dsh_pre.sum(axis=0)
    dz = dsh_pre @ params["head1_W"]
    grads.update(_encoder_backward(params, cache, dz, None, None))
    return loss, grads


class ReplayBuffer:
    """Fixed-capacity FIFO of labeled samples."""

    def __init__(self, capacity: int = 2048):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: deque[LabeledSample] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, sample: LabeledSample) -> None:
        self.entries.append(sample)

    def extend(self, samples) -> None:
        for s in samples:
            self.append(s)

    def sample_uniform(self, n: int, rng: np.random.Generator) -> list[LabeledSample]:
        if not self.entries:
            return []
        take = min(n, len(self.entries))
        idx = rng.choice(len(self.entries), size=take, replace=False)
        return [self.entries[int(i)] for i in idx]

    def sample_stratified(self, n: int, rng: np.random.Generator) -> list[LabeledSample]:
        """Draw ~n samples cycling over the count labels present in the buffer."""
        if not self.entries:
            return []
        by_label: dict[int, list[LabeledSample]] = {}
        for s in self.entries:
            by_label.setdefault(int(s.count_label), []).append(s)
        classes = sorted(by_label)
        out = []
        for j in range(min(n, len(self.entries))):
            members = by_label[classes[j % len(classes)]]
            out.append(members[int(rng.integers(len(members)))])
        return out


@dataclass(frozen=True)
class ClassifierConfig:
    aux_weight: float = 1.5
    replay_mix: int = 16
    replay_capacity: int = 2048
    adamw: AdamWConfig = field(default_factory=AdamWConfig)


@dataclass
class ClassifierState:
    """Everything the trainer owns for the cascade: params, moments, buffers."""

    dims: MlpDims
    stage1: Params
    stage2: Params
    opt1: AdamWState
    opt2: AdamWState
    buffer1: ReplayBuffer
    buffer2: ReplayBuffer
    config: ClassifierConfig
    updates: int = 0


def init_classifier_state(
    feature_dim: int,
    group_size: int,
    rng_seed,
    config: ClassifierConfig = ClassifierConfig(),
    dims: MlpDims | None = None,
) -> ClassifierState:
    dims = dims if dims is not None else dims_for(feature_dim, group_size)
    seq = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    s1_seed, s2_seed = seq.spawn(2)
    stage1 = init_stage1_params(dims, s1_seed)
    stage2 = init_stage2_params(dims, s2_seed)
    return ClassifierState(
        dims=dims,
        stage1=stage1,
        stage2=stage2,
        opt1=adamw_init(stage1),
        opt2=adamw_init(stage2),
        buffer1=ReplayBuffer(config.replay_capacity),
        buffer2=ReplayBuffer(config.replay_capacity),
        config=config,
        updates=0,
    )


def classifier_update(
    state: ClassifierState, fresh: list[LabeledSample], rng_seed
) -> ClassifierState:
    """One online update from this round's annotated samples.

    Replay is drawn from the buffers as they stood before this round's
    samples are inserted (so mixed-in samples are genuinely historical),
    then the fresh samples are appended with FIFO eviction. Stage-2 replay
    is stratified by count label. An empty batch for a stage is a no-op.
    """
    rng = np.random.default_rng(rng_seed)
    fresh1 = [s for s in fresh if s.reliable is not None]
    fresh2 = [s for s in fresh if s.count_label is not None]

    batch1 = fresh1 + state.buffer1.sample_uniform(state.config.replay_mix, rng)
    if batch1:
        weights = class_balanced_weights([s.reliable for s in batch1], 2)
        _, grads = stage1_loss(state.stage1, batch1, state.config.aux_weight, weights)
        adamw_step(state.stage1, grads, state.opt1, state.config.adamw)

    batch2 = fresh2 + state.buffer2.sample_stratified(state.config.replay_mix, rng)
    if batch2:
        weights = class_balanced_weights(
            [s.count_label for s in batch2], state.dims.n_counts
        )
        _, grads = stage2_loss(state.stage2, batch2, weights)
        adamw_step(state.stage2, grads, state.opt2, state.config.adamw)

    state.buffer1.extend(fresh1)
    state.buffer2.extend(fresh2)
    state.updates += 1
    return state


def save_classifier_state(state: ClassifierState, path: str | Path) -> None:
    """Parameter dump: npz archive of both stages plus a JSON shape header."""
    arrays = {f"stage1/{k}": v for k, v in state.stage1.items()}
    arrays.update({f"stage2/{k}": v for k, v in state.stage2.items()})
    header = {
        "global_dim": state.dims.global_dim,
        "resp_dim": state.dims.resp_dim,
        "n_counts": state.dims.n_counts,
        "prompt_hidden": state.dims.prompt_hidden,
        "resp_hidden": state.dims.resp_hidden,
        "resp_out": state.dims.resp_out,
        "head_hidden": state.dims.head_hidden,
        "shapes": {f"stage1/{k}": list(v.shape) for k, v in state.stage1.items()}
        | {f"stage2/{k}": list(v.shape) for k, v in state.stage2.items()},
    }
    arrays["header"] = np.array(json.dumps(header))
    np.savez(path, **arrays)


def load_classifier_params(path: str | Path) -> tuple[MlpDims, Params, Params]:
    data = np.load(path, allow_pickle=False)
    header = json.loads(str(data["header"]))
    dims = MlpDims(
        global_dim=header["global_dim"],
        resp_dim=header["resp_dim"],
        n_counts=header["n_counts"],
        prompt_hidden=header["prompt_hidden"],
        resp_hidden=header["resp_hidden"],
        resp_out=header["resp_out"],
        head_hidden=header["head_hidden"],
    )
    stage1 = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("stage1/")}
    stage2 = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("stage2/")}
    return dims, stage1, stage2
