from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from normfree_fl.errors import CheckpointError, DegenerateBatch, InvalidSpec, ShapeMismatch, StaleCache
from normfree_fl.model import (
    NORM_ROLES,
    VARIANTS,
    ModelSpec,
    ParamRole,
    backward,
    build_cnn6,
    forward,
    forward_loss,
    from_checkpoint,
    parameter_count,
    to_checkpoint,
)
from normfree_fl.optim import OptimSpec, sgd_step
from normfree_fl.tensor_core import RngStream

from grad_audit import audit_model

TINY = dict(input_shape=(1, 16, 16), num_classes=10, width_scale=Fraction(1, 8))


def tiny(variant, **kw):
    return build_cnn6(ModelSpec(variant=variant, **{**TINY, **kw}), RngStream(0).split("init"))


def closed_form_count(c_in, h, w, k, scale, variant):
    c1, c2, c3 = (int(64 * scale), int(64 * scale), int(128 * scale))
    f1, f2 = int(2048 * scale), int(512 * scale)
    convs = [(c_in, c1), (c1, c2), (c2, c3)]
    n = sum(o * i * 25 + o for i, o in convs)
    if variant == "wsconv":
        n += c1 + c2 + c3
    elif variant != "plain":
        n += 2 * (c1 + c2 + c3)
    flat = c3 * (h // 4) * (w // 4)
    n += flat * f1 + f1 + f1 * f2 + f2 + f2 * k + k
    return n


def test_full_width_layout():
    spec = ModelSpec((3, 28, 28), 10, 1, 0.5, "bn")
    assert spec.flat_features == 6272
    m = build_cnn6(spec, RngStream(0))
    assert m["conv1.weight"].shape == (64, 3, 5, 5)
    assert m["conv3.weight"].shape == (128, 64, 5, 5)
    assert m["fc1.weight"].shape == (2048, 6272)
    assert m["fc2.weight"].shape == (512, 2048)
    assert m["fc3.weight"].shape == (10, 512)


@pytest.mark.parametrize("variant", VARIANTS)
def test_parameter_count_closed_form(variant):
    counts = parameter_count(ModelSpec(variant=variant, **TINY))
    assert counts["trainable"] == closed_form_count(1, 16, 16, 10, Fraction(1, 8), variant)
    assert tiny(variant).num_trainable() == counts["trainable"]
    assert counts["buffers"] == (2 * (8 + 8 + 16) if variant == "bn" else 0)


def test_count_parity_between_norm_variants():
    counts = {v: parameter_count(ModelSpec(variant=v, **TINY))["trainable"] for v in VARIANTS}
    assert counts["bn"] == counts["gn"] == counts["ln"]
    assert counts["bn"] - counts["wsconv"] == 8 + 8 + 16


def test_roles():
    ws = tiny("wsconv")
    assert not ws.keys_with_roles(NORM_ROLES)
    assert len(ws.keys_with_roles({ParamRole.WSGain})) == 3
    bn = tiny("bn")
    assert bn.keys_with_roles({ParamRole.NormRunningStat}) == [
        f"norm{i}.{s}" for i in (1, 2, 3) for s in ("running_mean", "running_var")]
    assert "norm1.running_mean" not in bn.trainable_keys()


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        ModelSpec(variant="bogus")
    with pytest.raises(InvalidSpec):
        ModelSpec((1, 18, 18), 10, Fraction(1, 8))
    with pytest.raises(InvalidSpec):
        ModelSpec((1, 16, 16), 10, Fraction(1, 3))


def test_gn_groups_scale_with_width():
    assert ModelSpec(variant="gn", **TINY).gn_groups == (8, 8, 16)
    assert ModelSpec((3, 28, 28), 10, 1, 0.5, "gn").gn_groups == (32, 32, 64)


def test_states_are_immutable():
    m = tiny("wsconv")
    with pytest.raises(ValueError):
        m["conv1.weight"][0, 0, 0, 0] = 1.0
    m2 = m.replace({"conv1.bias": np.ones(8)})
    assert not m.equal(m2)
    assert np.array_equal(m2["conv1.bias"], np.ones(8))
    assert np.all(m["conv1.bias"] == 0)
    with pytest.raises(ShapeMismatch):
        m.replace({"conv1.bias": np.ones(9)})


def _batch(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 1, 16, 16)), np.arange(n) % 10


@pytest.mark.parametrize("variant", VARIANTS)
def test_initial_loss_near_uniform(variant):
    loss, logits, _ = forward_loss(tiny(variant), _batch(), "eval")
    assert logits.shape == (10, 10)
    assert abs(loss - np.log(10)) < 0.2


@pytest.mark.parametrize("variant", VARIANTS)
def test_eval_is_deterministic(variant):
    m = tiny(variant)
    a = forward_loss(m, _batch(), "eval")[0]
    b = forward_loss(m, _batch(), "eval")[0]
    assert a == b


@pytest.mark.parametrize("variant", VARIANTS)
def test_training_step_replays_bitwise(variant):
    m = tiny(variant)
    outs = []
    for _ in range(2):
        loss, _, cache = forward_loss(m, _batch(), "train", RngStream(4))
        outs.append((loss, backward(m, cache)))
    assert outs[0][0] == outs[1][0]
    assert all(np.array_equal(outs[0][1][k], outs[1][1][k]) for k in outs[0][1])


@pytest.mark.parametrize("variant", VARIANTS)
def test_gradient_keys_and_zero_seed(variant):
    m = tiny(variant)
    _, _, cache = forward_loss(m, _batch(), "train", RngStream(2))
    g = backward(m, cache, 0.0)
    assert list(g) == m.trainable_keys()
    assert all(g[k].shape == m[k].shape and not g[k].any() for k in g)


def test_stale_cache_rejected():
    m = tiny("ln")
    _, _, cache = forward_loss(m, _batch(), "train", RngStream(2))
    with pytest.raises(StaleCache):
        backward(m.replace({"fc3.bias": np.ones(10)}), cache)


def test_bn_single_sample_training_is_degenerate():
    x, y = _batch(1)
    with pytest.raises(DegenerateBatch):
        forward_loss(tiny("bn"), (x, y), "train", RngStream(0))
    forward_loss(tiny("wsconv"), (x, y), "train", RngStream(0))


@pytest.mark.parametrize("variant", VARIANTS)
def test_whole_model_gradient_check(variant):
    worst, kinked, probed = audit_model(variant)
    assert worst < 1e-4
    assert kinked <= 0.05 * probed


@pytest.mark.parametrize("variant", VARIANTS)
def test_memorization_loss_decreases(variant):
    m = build_cnn6(ModelSpec(variant=variant, dropout_rate=0.0, **TINY), RngStream(0))
    x, y = _batch(32, seed=5)
    spec = OptimSpec(0.1)
    losses = []
    for step in range(50):
        loss, _, cache = forward_loss(m, (x, y), "train", RngStream(step))
        losses.append(loss)
        m = sgd_step(m, backward(m, cache), spec)
        if cache.new_buffers:
            m = m.replace(cache.new_buffers)
    assert losses[-1] < losses[0] - 0.05


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_roundtrip_is_exact(variant, tmp_path):
    m = tiny(variant)
    m = m.replace({"fc3.bias": np.array([np.pi * 10.0**i for i in range(-5, 5)])})
    text = to_checkpoint(m, {"note": "x"})
    back = from_checkpoint(text)
    assert back.equal(m)
    assert back.arch_id == m.arch_id and back.variant == m.variant
    assert [back.role(k) for k in back.keys()] == [m.role(k) for k in m.keys()]


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        from_checkpoint('{"format": "other"}')
    with pytest.raises(CheckpointError):
        from_checkpoint("not json")


@settings(max_examples=10)
@given(st.integers(1, 5), st.sampled_from(["gn", "wsconv", "plain"]))
def test_logit_shape(batch, variant):
    logits, _ = forward(tiny(variant), np.zeros((batch, 1, 16, 16)), "eval")
    assert logits.shape == (batch, 10)
