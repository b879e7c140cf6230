import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lst import autodiff as ad
from lst.autodiff import Tape
from lst.config import TrainConfig
from lst.episodes import DatasetSpec, build_dataset
from lst.model import (
    Backbone,
    CheckpointError,
    DivergenceError,
    classify,
    compute_prototypes,
    extract_features,
    identity_scale_shift,
    init_mlp,
    init_swn,
    leaves,
    load_checkpoint,
    pretrain_backbone,
    save_checkpoint,
    swn_weights,
    weighted_cross_entropy,
)


def tiny_backbone(seed=0, sizes=(4, 6, 5, 3)):
    return Backbone(init_mlp(sizes, np.random.default_rng(seed)))


def plain_forward(x, params, n_layers):
    h = x
    for i in range(n_layers):
        h = np.maximum(h @ params[f"W{i}"] + params[f"b{i}"], 0.0)
    return h


# ---------------------------------------------------------------------------
# features


def test_identity_scale_shift_reproduces_frozen_backbone(rng):
    bb = tiny_backbone()
    x = rng.normal(size=(7, 4))
    out = extract_features(x, bb, identity_scale_shift(bb)).value
    np.testing.assert_array_equal(out, plain_forward(x, bb.params, bb.n_layers))


def test_zero_last_scale_leaves_only_shift(rng):
    bb = tiny_backbone()
    ss = identity_scale_shift(bb)
    last = bb.n_layers - 1
    ss[f"scale{last}"] = np.zeros_like(ss[f"scale{last}"])
    ss[f"shift{last}"] = np.array([0.5, -2.0, 1.0]) - bb.params[f"b{last}"]
    out = extract_features(rng.normal(size=(4, 4)), bb, ss).value
    np.testing.assert_allclose(out, np.tile([0.5, 0.0, 1.0], (4, 1)), atol=1e-15)


def test_downstream_gradient_reaches_scale_shift_not_backbone(rng):
    bb = tiny_backbone()
    tape = Tape()
    ss = leaves(tape, identity_scale_shift(bb), "ss")
    feats = extract_features(rng.normal(size=(5, 4)), bb, ss)
    grads = ad.backward(tape, ad.cross_entropy(feats, [0, 1, 2, 0, 1]))
    assert set(grads) == {f"ss.{k}" for k in identity_scale_shift(bb)}
    assert any(np.any(g != 0) for g in grads.values())
    before = {k: v.copy() for k, v in bb.params.items()}
    assert all(np.array_equal(before[k], bb.params[k]) for k in before)


def test_feature_shape_mismatch(rng):
    bb = tiny_backbone()
    with pytest.raises(ad.ShapeError, match="columns"):
        extract_features(rng.normal(size=(2, 5)), bb, identity_scale_shift(bb))


# ---------------------------------------------------------------------------
# classifier


def test_zero_classifier_is_uniform(rng):
    tape = Tape()
    logits = classify(tape.leaf(rng.normal(size=(3, 4))), {"W": np.zeros((4, 5)), "b": np.zeros(5)})
    np.testing.assert_allclose(ad.softmax_rows(logits).value, 0.2)


def test_hand_set_two_way_classifier():
    tape = Tape()
    logits = classify(tape.leaf([[3.0]]), {"W": np.array([[1.0, 0.0]]), "b": np.zeros(2)})
    np.testing.assert_array_equal(logits.value, [[3.0, 0.0]])
    e = math.exp(3.0)
    np.testing.assert_allclose(ad.softmax_rows(logits).value, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-15)
    np.testing.assert_allclose(ad.softmax_rows(logits).value, [[0.953, 0.047]], atol=5e-4)


def test_permuting_columns_permutes_logits(rng):
    tape = Tape()
    f = tape.leaf(rng.normal(size=(4, 3)))
    W, b = rng.normal(size=(3, 5)), rng.normal(size=5)
    perm = rng.permutation(5)
    a = classify(f, {"W": W, "b": b}).value
    p = classify(f, {"W": W[:, perm], "b": b[perm]}).value
    np.testing.assert_array_equal(p, a[:, perm])


def test_classifier_shape_mismatch(rng):
    tape = Tape()
    with pytest.raises(ad.ShapeError, match="classify"):
        classify(tape.leaf(rng.normal(size=(2, 3))), {"W": np.zeros((4, 5)), "b": np.zeros(5)})


# ---------------------------------------------------------------------------
# prototypes and SWN


def test_one_shot_prototype_is_the_sample(rng):
    tape = Tape()
    f = rng.normal(size=(3, 4))
    protos = compute_prototypes(tape.leaf(f), [2, 0, 1], 3).value
    np.testing.assert_array_equal(protos, f[[1, 2, 0]])


def test_prototype_is_class_mean(rng):
    tape = Tape()
    u, v = rng.normal(size=4), rng.normal(size=4)
    protos = compute_prototypes(tape.leaf(np.stack([u, v, u, u])), [0, 0, 1, 1], 2).value
    np.testing.assert_allclose(protos[0], (u + v) / 2, rtol=1e-15)
    np.testing.assert_array_equal(protos[1], u)


def test_missing_support_class_is_contract_error(rng):
    tape = Tape()
    with pytest.raises(ad.ContractError):
        compute_prototypes(tape.leaf(rng.normal(size=(2, 4))), [0, 0], 2)


def test_identical_prototypes_give_uniform_weights(rng):
    tape = Tape()
    swn = init_swn(4, rng)
    protos = tape.leaf(np.tile(rng.normal(size=4), (5, 1)))
    w = swn_weights(tape.leaf(rng.normal(size=(6, 4))), protos, swn).value
    assert np.array_equal(w, np.full((6, 5), w[0, 0]))
    np.testing.assert_allclose(w, 0.2, rtol=1e-15)


def test_hand_set_linear_swn():
    # hidden unit 0 copies the prototype's first coordinate, output = that unit
    d = 2
    swn = {"W1": np.zeros((2 * d, 8)), "b1": np.zeros(8), "W2": np.zeros((8, 1)), "b2": np.zeros(1)}
    swn["W1"][d, 0] = 1.0
    swn["W2"][0, 0] = 1.0
    tape = Tape()
    w = swn_weights(tape.leaf([[0.3, -0.7]]), tape.leaf([[1.0, 0.0], [0.0, 0.0]]), swn).value
    e = math.e
    np.testing.assert_allclose(w, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-15)
    np.testing.assert_allclose(w, [[0.731, 0.269]], atol=5e-4)


def test_swn_shape_mismatch(rng):
    tape = Tape()
    with pytest.raises(ad.ShapeError):
        swn_weights(tape.leaf(rng.normal(size=(2, 4))), tape.leaf(rng.normal(size=(3, 5))), init_swn(4, rng))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(2, 6))
def test_swn_weights_are_a_distribution(seed, n, way):
    rng = np.random.default_rng(seed)
    tape = Tape()
    w = swn_weights(tape.leaf(rng.normal(size=(n, 4))), tape.leaf(rng.normal(size=(way, 4))), init_swn(4, rng)).value
    assert np.all((w > 0) & (w < 1))
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# weighted cross-entropy


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_unit_weights_equal_plain_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    z = tape.leaf(rng.normal(scale=3, size=(4, 5)))
    y = rng.integers(0, 5, size=4)
    assert weighted_cross_entropy(z, np.ones((4, 5)), y).value == ad.cross_entropy(z, y).value


def test_uniform_logits_give_log_n(rng):
    # equal logits stay equal under any weighting only when they are zero;
    # nonzero equal logits stay equal under uniform weights
    tape = Tape()
    w = rng.dirichlet(np.ones(5), size=3)
    ce = weighted_cross_entropy(tape.leaf(np.zeros((3, 5))), w, [0, 3, 4]).value
    assert ce == pytest.approx(math.log(5), rel=1e-14)
    ce = weighted_cross_entropy(tape.leaf(np.full((3, 5), 1.7)), np.full((3, 5), 0.2), [0, 3, 4]).value
    assert ce == pytest.approx(math.log(5), rel=1e-14)


def test_weighted_cross_entropy_scalar_oracle():
    tape = Tape()
    ce = weighted_cross_entropy(tape.leaf([[2.0, 1.0]]), np.array([[0.8, 0.2]]), [0]).value
    oracle = -math.log(math.exp(1.6) / (math.exp(1.6) + math.exp(0.2)))
    assert ce == pytest.approx(oracle, rel=1e-14)
    assert ce == pytest.approx(0.2204, abs=1e-4)


def test_weighted_cross_entropy_invalid_label():
    tape = Tape()
    with pytest.raises((ad.ContractError, IndexError, ValueError)):
        weighted_cross_entropy(tape.leaf([[2.0, 1.0]]), np.array([[0.5, 0.5]]), [2])


@pytest.mark.parametrize("seed", range(5))
def test_weighted_loss_gradients_through_swn_scale_shift_and_classifier(seed):
    rng = np.random.default_rng(seed)
    bb = tiny_backbone(seed)
    xs, xr = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    ys, yr = np.array([0, 1, 2]), rng.integers(0, 3, size=4)
    params = {f"ss.{k}": v + 0.1 * rng.normal(size=v.shape) for k, v in identity_scale_shift(bb).items()}
    params |= {f"swn.{k}": v + 0.1 * rng.normal(size=v.shape) for k, v in init_swn(3, rng).items()}
    params |= {"theta.W": rng.normal(size=(3, 3)), "theta.b": rng.normal(size=3)}

    def fn(tape, p):
        group = lambda pre: {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}
        ss, swn, th = group("ss."), group("swn."), group("theta.")
        fs, fr = extract_features(xs, bb, ss), extract_features(xr, bb, ss)
        w = swn_weights(fr, compute_prototypes(fs, ys, 3), swn)
        logits = ad.concat_rows(classify(fs, th), ad.multiply(classify(fr, th), w))
        return ad.cross_entropy(logits, np.concatenate([ys, yr]))

    report = ad.grad_check(fn, params, 1e-5, 1e-4)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# pre-training


@pytest.fixture(scope="module")
def twenty_way():
    cfg = TrainConfig(n_classes=30, splits=(20, 5, 5), distractors=0, sweep_distractors=(0,))
    return cfg, build_dataset(DatasetSpec.from_config(cfg), 7)


def test_pretraining_beats_seventy_percent(twenty_way):
    cfg, ds = twenty_way
    bb = pretrain_backbone(ds, cfg, seed=0)
    assert bb.heldout_accuracy > 0.70
    assert bb.embed_dim == cfg.embed_dim and bb.input_dim == cfg.dim


def test_one_step_is_chance(twenty_way):
    cfg, ds = twenty_way
    bb = pretrain_backbone(ds, cfg, seed=0, steps=1)
    assert abs(bb.train_accuracy - 1 / 20) <= 0.05


def test_pretraining_is_deterministic(twenty_way):
    cfg, ds = twenty_way
    a, b = pretrain_backbone(ds, cfg, seed=3, steps=20), pretrain_backbone(ds, cfg, seed=3, steps=20)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_pretraining_divergence_is_reported(twenty_way):
    cfg, ds = twenty_way
    with pytest.raises(DivergenceError, match="lower pretrain_lr"):
        pretrain_backbone(ds, cfg.replace(pretrain_lr=1e6), seed=0, steps=50)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    cfg = TrainConfig()
    arrays = {"W0": rng.normal(size=(3, 4)), "b0": rng.normal(size=4) * 1e-300, "x": np.array([np.pi, -0.0, 1e308])}
    path = tmp_path / "ck.npz"
    save_checkpoint(path, "backbone", arrays, cfg, {"train_accuracy": 0.5})
    ck = load_checkpoint(path, "backbone")
    assert set(ck.arrays) == set(arrays)
    for k in arrays:
        assert ck.arrays[k].dtype == np.float64 and ck.arrays[k].shape == arrays[k].shape
        assert ck.arrays[k].tobytes() == arrays[k].tobytes()
    assert ck.config_hash == cfg.config_hash() and ck.config_text == cfg.dumps()
    assert ck.extra == {"train_accuracy": 0.5}


def test_checkpoint_kind_and_version_checks(tmp_path):
    path = tmp_path / "ck.npz"
    save_checkpoint(path, "meta", {"a": np.zeros(2)}, TrainConfig())
    with pytest.raises(CheckpointError, match="backbone"):
        load_checkpoint(path, "backbone")
    np.savez(tmp_path / "other.npz", a=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.npz")
