"""Cascade classifiers: forward contracts, gradient checks, replay, balancing, AdamW."""

import numpy as np
import pytest

from rlavr.cag import admissible_counts
from rlavr.classifiers import (
    AdamWConfig,
    ClassifierConfig,
    LabeledSample,
    MlpDims,
    ReplayBuffer,
    adamw_init,
    adamw_step,
    class_balanced_weights,
    classifier_update,
    init_classifier_state,
    init_stage1_params,
    init_stage2_params,
    load_classifier_params,
    save_classifier_state,
    stage1_forward,
    stage1_forward_batch,
    stage1_loss,
    stage2_forward,
    stage2_loss,
)
from rlavr.env import ClassifierFeatures

SMALL = MlpDims(
    global_dim=6, resp_dim=5, n_counts=4, prompt_hidden=7, resp_hidden=4, resp_out=6, head_hidden=5
)
SMALL_G = 3  # resp_dim = 2 + G, n_counts = G + 1


def _random_features(rng, dims=SMALL, group_size=SMALL_G):
    d_p = dims.global_dim - 1 - group_size
    return ClassifierFeatures(
        prompt_repr=rng.normal(size=d_p),
        valid_ratio=float(rng.random()),
        cluster_dist=np.sort(rng.dirichlet(np.ones(group_size)))[::-1],
        response_feats=rng.normal(size=(group_size, dims.resp_dim)),
    )


def _random_sample(rng, dims=SMALL, group_size=SMALL_G):
    majority = int(rng.integers(1, group_size + 1))
    kmax = min(group_size - majority, majority)
    return LabeledSample(
        features=_random_features(rng, dims, group_size),
        reliable=int(rng.integers(2)),
        response_correct=rng.integers(0, 2, size=group_size).astype(float),
        count_label=int(rng.integers(0, kmax + 1)),
        majority_size=majority,
        group_size=group_size,
    )


def test_stage1_zero_final_layers_give_half():
    params = init_stage1_params(SMALL, rng_seed=0)
    params["rel2_W"][:] = 0.0
    params["rel2_b"][:] = 0.0
    params["aux2_W"][:] = 0.0
    params["aux2_b"][:] = 0.0
    rng = np.random.default_rng(1)
    rel, aux = stage1_forward(params, _random_features(rng))
    assert rel == 0.5
    np.testing.assert_array_equal(aux, np.full(SMALL_G, 0.5))


def test_stage1_outputs_in_open_unit_interval_and_pure():
    params = init_stage1_params(SMALL, rng_seed=2)
    rng = np.random.default_rng(3)
    feats = _random_features(rng)
    rel1, aux1 = stage1_forward(params, feats)
    rel2, aux2 = stage1_forward(params, feats)
    assert rel1 == rel2
    np.testing.assert_array_equal(aux1, aux2)
    assert 0.0 < rel1 < 1.0
    assert np.all((aux1 > 0.0) & (aux1 < 1.0))


def test_stage2_single_admissible_class_is_point_mass():
    params = init_stage2_params(SMALL, rng_seed=4)
    rng = np.random.default_rng(5)
    feats = _random_features(rng)
    dist = stage2_forward(params, feats, admissible_counts(SMALL_G, SMALL_G))  # K = {0}
    np.testing.assert_array_equal(dist, [1.0, 0.0, 0.0, 0.0])


def test_stage2_zero_logits_uniform_over_admissible():
    params = init_stage2_params(SMALL, rng_seed=6)
    params["head2_W"][:] = 0.0
    params["head2_b"][:] = 0.0
    rng = np.random.default_rng(7)
    feats = _random_features(rng)
    dist = stage2_forward(params, feats, admissible_counts(SMALL_G, 1))  # K = {0, 1}
    np.testing.assert_allclose(dist, [0.5, 0.5, 0.0, 0.0])


def test_stage2_masked_classes_zero_probability():
    params = init_stage2_params(SMALL, rng_seed=8)
    rng = np.random.default_rng(9)
    for _ in range(20):
        feats = _random_features(rng)
        m = int(rng.integers(1, SMALL_G + 1))
        adm = admissible_counts(SMALL_G, m)
        dist = stage2_forward(params, feats, adm)
        assert abs(dist.sum() - 1.0) < 1e-12
        for k in range(SMALL_G + 1):
            if k not in adm.counts:
                assert dist[k] == 0.0


def _flatten(params):
    keys = sorted(params)
    return keys, np.concatenate([params[k].ravel() for k in keys])


def _unflatten(keys, vec, template):
    out = {}
    pos = 0
    for k in keys:
        size = template[k].size
        out[k] = vec[pos : pos + size].reshape(template[k].shape)
        pos += size
    return out


def _check_gradients(loss_fn, params, rel_tol=1e-4, h=1e-6):
    loss, grads = loss_fn(params)
    keys, flat = _flatten(params)
    _, flat_grads = _flatten(grads)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        fd[i] = (loss_fn(_unflatten(keys, up, params))[0] - loss_fn(_unflatten(keys, down, params))[0]) / (2 * h)
    scale = max(np.abs(fd).max(), np.abs(flat_grads).max(), 1e-8)
    assert np.abs(flat_grads - fd).max() / scale < rel_tol


def test_stage1_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    for trial in range(5):
        params = init_stage1_params(SMALL, rng_seed=100 + trial)
        batch = [_random_sample(rng) for _ in range(3)]
        weights = class_balanced_weights([s.reliable for s in batch], 2)
        _check_gradients(lambda p: stage1_loss(p, batch, 1.5, weights), params)


def test_stage2_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for trial in range(5):
        params = init_stage2_params(SMALL, rng_seed=200 + trial)
        batch = [_random_sample(rng) for _ in range(3)]
        weights = class_balanced_weights([s.count_label for s in batch], SMALL.n_counts)
        _check_gradients(lambda p: stage2_loss(p, batch, weights), params)


def test_stage1_loss_uniform_prediction_is_ln2():
    params = init_stage1_params(SMALL, rng_seed=12)
    params["rel2_W"][:] = 0.0
    params["rel2_b"][:] = 0.0
    rng = np.random.default_rng(13)
    batch = [_random_sample(rng) for _ in range(4)]
    loss, _ = stage1_loss(params, batch, lambda_aux=0.0, class_weights=np.ones(2))
    assert abs(loss - np.log(2)) < 1e-12


def test_stage1_loss_vanishes_as_predictions_reach_labels():
    # overfit a single item: the loss must approach zero
    params = init_stage1_params(SMALL, rng_seed=14)
    rng = np.random.default_rng(15)
    single = [_random_sample(rng)]
    opt = adamw_init(params)
    cfg = AdamWConfig(lr=5e-3, weight_decay=0.0)
    w = class_balanced_weights([s.reliable for s in single], 2)
    for _ in range(800):
        _, grads = stage1_loss(params, single, 1.5, w)
        adamw_step(params, grads, opt, cfg)
    final, _ = stage1_loss(params, single, 1.5, w)
    assert final < 0.05


def test_stage2_masked_grad_is_zero_for_masked_logits():
    params = init_stage2_params(SMALL, rng_seed=16)
    rng = np.random.default_rng(17)
    s = _random_sample(rng)
    s = LabeledSample(
        features=s.features,
        reliable=s.reliable,
        response_correct=s.response_correct,
        count_label=0,
        majority_size=SMALL_G,  # admissible set {0}
        group_size=SMALL_G,
    )
    _, grads = stage2_loss(params, [s])
    # gradient through logits for masked classes must vanish in the final layer rows
    np.testing.assert_array_equal(grads["head2_W"][1:], np.zeros_like(grads["head2_W"][1:]))
    np.testing.assert_array_equal(grads["head2_b"][1:], np.zeros(SMALL.n_counts - 1))


def test_class_balanced_weights():
    np.testing.assert_allclose(class_balanced_weights([0, 1, 0, 1], 2), [1.0, 1.0])
    w = class_balanced_weights([0] * 15 + [1], 2)  # freqs 0.9375 / 0.0625
    np.testing.assert_allclose(w, [0.7302967433402214, 2.8284271247461903], atol=1e-12)
    w = class_balanced_weights([0] * 512 + [1] * 2, 2)  # beyond 256:1
    assert w[1] == 4.0
    w = class_balanced_weights([2, 2, 2], 4)
    assert w[2] == 1.0 and w[0] == 0.0 and w[1] == 0.0 and w[3] == 0.0
    with pytest.raises(ValueError):
        class_balanced_weights([], 2)


def test_replay_buffer_fifo():
    rng = np.random.default_rng(18)
    buf = ReplayBuffer(capacity=4)
    samples = [_random_sample(rng) for _ in range(6)]
    for s in samples[:4]:
        buf.append(s)
    assert len(buf) == 4
    buf.append(samples[4])
    assert len(buf) == 4
    assert buf.entries[0] is samples[1]  # oldest evicted first
    assert buf.entries[-1] is samples[4]
    buf.append(samples[5])
    assert buf.entries[0] is samples[2]


def test_replay_buffer_capacity_2048_default():
    assert ReplayBuffer().capacity == 2048


def test_replay_stratified_covers_labels():
    rng = np.random.default_rng(19)
    buf = ReplayBuffer(capacity=64)
    # flood with count label 0, add two rare labels
    for _ in range(40):
        s = _random_sample(rng)
        buf.append(
            LabeledSample(s.features, s.reliable, s.response_correct, 0, SMALL_G, SMALL_G)
        )
    rare1 = _random_sample(rng)
    buf.append(LabeledSample(rare1.features, 1, rare1.response_correct, 1, 1, SMALL_G))
    picked = buf.sample_stratified(16, np.random.default_rng(20))
    labels = {s.count_label for s in picked}
    assert labels == {0, 1}


def test_adamw_zero_gradient_pure_decay():
    params = {"w": np.array([[1.0, -2.0]]), "b": np.array([0.5])}
    grads = {"w": np.zeros((1, 2)), "b": np.zeros(1)}
    cfg = AdamWConfig(lr=1e-4, weight_decay=0.01)
    state = adamw_init(params)
    before = {k: v.copy() for k, v in params.items()}
    adamw_step(params, grads, state, cfg)
    for k in params:
        np.testing.assert_allclose(
            params[k], before[k] * (1 - cfg.lr * cfg.weight_decay), rtol=0, atol=1e-18
        )
    assert state.step == 1


def test_classifier_update_mixing_and_fifo():
    state = init_classifier_state(feature_dim=3, group_size=SMALL_G, rng_seed=21)
    rng = np.random.default_rng(22)
    dims = state.dims
    fresh = [_random_sample(rng, dims) for _ in range(12)]
    state = classifier_update(state, fresh, rng_seed=23)
    assert len(state.buffer1) == 12
    assert len(state.buffer2) == 12
    assert state.updates == 1
    # optimizer advanced exactly one step per stage
    assert state.opt1.step == 1
    assert state.opt2.step == 1
    # gradient batch is fresh + up to 16 replayed
    more = [_random_sample(rng, dims) for _ in range(12)]
    state = classifier_update(state, more, rng_seed=24)
    assert len(state.buffer1) == 24


def test_classifier_update_empty_fresh_replays_only():
    state = init_classifier_state(feature_dim=3, group_size=SMALL_G, rng_seed=25)
    rng = np.random.default_rng(26)
    state = classifier_update(state, [_random_sample(rng, state.dims) for _ in range(4)], 27)
    w_before = state.stage1["rel2_W"].copy()
    state = classifier_update(state, [], rng_seed=28)
    assert not np.array_equal(w_before, state.stage1["rel2_W"])  # replay-only step still learns


def test_stage1_convergence_on_separable_toy_set():
    # reliability is decided by the top cluster share, a linearly separable signal
    group_size = 4
    state = init_classifier_state(
        feature_dim=3,
        group_size=group_size,
        rng_seed=29,
        config=ClassifierConfig(adamw=AdamWConfig(lr=1e-3)),
    )
    rng = np.random.default_rng(30)
    samples = []
    for i in range(32):
        reliable = i % 2
        share = 0.95 if reliable else 0.35
        dist = np.zeros(group_size)
        dist[0] = share
        dist[1] = 1.0 - share
        feats = ClassifierFeatures(
            prompt_repr=rng.normal(size=3),
            valid_ratio=1.0,
            cluster_dist=dist,
            response_feats=rng.normal(size=(group_size, 2 + group_size)) * 0.1,
        )
        samples.append(
            LabeledSample(feats, reliable, np.full(group_size, float(reliable)), None, None, group_size)
        )

    for step in range(500):
        w = class_balanced_weights([s.reliable for s in samples], 2)
        _, grads = stage1_loss(state.stage1, samples, 1.5, w)
        adamw_step(state.stage1, grads, state.opt1, state.config.adamw)
    rel, _ = stage1_forward_batch(state.stage1, [s.features for s in samples])
    acc = np.mean((rel >= 0.5).astype(int) == np.array([s.reliable for s in samples]))
    assert acc > 0.95


def test_checkpoint_roundtrip(tmp_path):
    state = init_classifier_state(feature_dim=4, group_size=SMALL_G, rng_seed=31)
    path = tmp_path / "classifiers.npz"
    save_classifier_state(state, path)
    dims, stage1, stage2 = load_classifier_params(path)
    assert dims == state.dims
    for k, v in state.stage1.items():
        np.testing.assert_array_equal(stage1[k], v)
    for k, v in state.stage2.items():
        np.testing.assert_array_equal(stage2[k], v)
