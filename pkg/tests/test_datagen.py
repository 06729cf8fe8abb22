from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from normfree_fl.datagen import (
    DomainSpec,
    default_domain_specs,
    dirichlet_partition,
    domain_partition,
    dump_dataset,
    gen_domains,
    iid_partition,
    label_entropy,
    load_dataset,
    total_variation,
)
from normfree_fl.errors import IndivisibleSplit, InvalidAlpha, InvalidCounts, RetriesExhausted
from normfree_fl.model import ModelSpec, accuracy, backward, build_cnn6, forward_loss
from normfree_fl.optim import OptimSpec, sgd_step
from normfree_fl.tensor_core import RngStream

SMALL = (1, 16, 16)


def _gen(seed=0, **kw):
    args = dict(num_domains=3, num_classes=10, train_per_domain=60, test_per_domain=20, image_shape=SMALL)
    args.update(kw)
    return gen_domains(stream=RngStream(seed), **args)


def _is_cover(parts, n):
    allidx = np.concatenate(parts) if parts else np.zeros(0)
    return len(allidx) == n and np.array_equal(np.sort(allidx), np.arange(n))


def test_noise_free_samples_of_a_class_are_identical():
    (train, _), = _gen(num_domains=1, noise=0.0, jitter=0)
    for c in range(10):
        xs = train.x[train.y == c]
        assert np.all(xs == xs[0])
    assert len({train.x[train.y == c][0].tobytes() for c in range(10)}) == 10


def test_generation_is_deterministic():
    a, b = _gen(3), _gen(3)
    for (tr_a, te_a), (tr_b, te_b) in zip(a, b):
        assert np.array_equal(tr_a.x, tr_b.x) and np.array_equal(te_a.y, te_b.y)
    assert not np.array_equal(_gen(4)[0][0].x, a[0][0].x)


def test_value_range_and_balance():
    for train, test in _gen(jitter=2):
        assert train.x.min() >= 0 and train.x.max() <= 1
        assert np.array_equal(np.bincount(train.y), np.full(10, 6))
        assert train.split == "train" and test.split == "test"
        assert len(test) == 20


def test_brightness_offset_shifts_mean():
    base = DomainSpec(0, offset=0.1, contrast=0.5, noise=0.0, texture="none", texture_amp=0.0)
    bright = DomainSpec(1, offset=0.3, contrast=0.5, noise=0.0, texture="none", texture_amp=0.0)
    doms = gen_domains(2, 10, 100, 10, SMALL, RngStream(0), domain_specs=[base, bright])
    delta = doms[1][0].x.mean() - doms[0][0].x.mean()
    assert delta == pytest.approx(0.2, abs=0.01)


def test_domain_gap_knob_zero_makes_domains_alike():
    specs = default_domain_specs(3, gap=0.0, noise=0.0)
    assert specs[0].offset == specs[1].offset == specs[2].offset
    assert all(s.texture_amp == 0 for s in specs)


def test_transforms_preserve_labels():
    # the same label sequence is drawn regardless of the domain's appearance
    a = gen_domains(1, 10, 50, 10, SMALL, RngStream(0), gap=0.0)
    b = gen_domains(1, 10, 50, 10, SMALL, RngStream(0), gap=1.0, noise=0.4)
    assert np.array_equal(a[0][0].y, b[0][0].y)


def test_invalid_counts():
    with pytest.raises(InvalidCounts):
        _gen(num_classes=1)
    with pytest.raises(InvalidCounts):
        _gen(num_domains=0)


def test_domain_partition_structure():
    doms = _gen()
    shards = domain_partition(doms, 3, RngStream(1))
    assert len(shards) == 9
    for d, (train, _) in enumerate(doms):
        mine = shards[3 * d:3 * d + 3]
        assert all(s.domain_id == d and len(s) == 20 for s in mine)
        rows = np.concatenate([s.x.reshape(20, -1) for s in mine])
        assert sorted(map(bytes, rows)) == sorted(map(bytes, train.x.reshape(60, -1)))
    one = domain_partition(doms, 1, RngStream(1))
    assert np.array_equal(np.sort(one[0].y), np.sort(doms[0][0].y))
    with pytest.raises(IndivisibleSplit):
        domain_partition(doms, 7, RngStream(1))


def test_hundred_clients_from_five_domains():
    doms = gen_domains(5, 10, 40, 5, SMALL, RngStream(0))
    assert len(domain_partition(doms, 20, RngStream(0))) == 100


@settings(max_examples=30)
@given(st.integers(1, 12), st.sampled_from([0.05, 0.1, 0.5, 1.0, 10.0]), st.integers(0, 10_000))
def test_dirichlet_is_a_disjoint_cover(k, alpha, seed):
    labels = np.repeat(np.arange(10), 30)
    parts = dirichlet_partition(labels, k, alpha, RngStream(seed))
    assert len(parts) == k
    assert _is_cover(parts, len(labels))
    assert all(len(p) > 0 for p in parts)


def test_dirichlet_single_client():
    labels = np.arange(20) % 4
    parts = dirichlet_partition(labels, 1, 0.3, RngStream(0))
    assert np.array_equal(parts[0], np.arange(20))


def test_dirichlet_errors():
    with pytest.raises(InvalidAlpha):
        dirichlet_partition([0, 1], 2, 0.0, RngStream(0))
    with pytest.raises(RetriesExhausted):
        dirichlet_partition([0, 1, 2], 5, 1.0, RngStream(0), max_retries=3)


def _mean_entropy(alpha, draws=50, k=10):
    labels = np.repeat(np.arange(10), 100)
    ent = []
    for s in range(draws):
        parts = dirichlet_partition(labels, k, alpha, RngStream(s))
        ent.append(np.mean([label_entropy(labels[p], 10) for p in parts]))
    return float(np.mean(ent))


def test_label_skew_shrinks_with_alpha():
    labels = np.repeat(np.arange(10), 100)
    tv = []
    for alpha in (0.1, 0.5, 1.0, 10.0):
        vals = []
        for s in range(20):
            parts = dirichlet_partition(labels, 10, alpha, RngStream(s))
            vals.append(np.mean([total_variation(labels[p], labels, 10) for p in parts]))
        tv.append(np.mean(vals))
    assert tv[0] > tv[1] > tv[2] > tv[3]
    assert _mean_entropy(0.1, 20) < _mean_entropy(1.0, 20)


def test_iid_partition():
    labels = np.tile(np.arange(10), 250)
    parts = iid_partition(labels, 5, RngStream(0))
    assert _is_cover(parts, len(labels))
    assert {len(p) for p in parts} == {500}
    for p in parts:
        frac = np.bincount(labels[p], minlength=10) / len(p)
        assert np.all(np.abs(frac - 0.1) <= 0.05)
    assert np.array_equal(iid_partition(labels, 1, RngStream(0))[0], np.arange(len(labels)))
    sizes = {len(p) for p in iid_partition(np.arange(11), 3, RngStream(0))}
    assert sizes == {3, 4}


def test_dump_roundtrip(tmp_path):
    doms = _gen(jitter=1)
    dump_dataset(tmp_path, doms, default_domain_specs(3))
    back = load_dataset(tmp_path)
    for (a_tr, a_te), (b_tr, b_te) in zip(doms, back):
        assert np.array_equal(a_tr.x, b_tr.x) and np.array_equal(a_tr.y, b_tr.y)
        assert a_te.domain_id == b_te.domain_id and b_te.split == "test"
    assert (tmp_path / "manifest.json").exists()


def test_single_domain_is_learnable():
    (train, test), = gen_domains(1, 10, 320, 100, SMALL, RngStream(0))
    m = build_cnn6(ModelSpec(SMALL, 10, Fraction(1, 8), 0.5, "wsconv"), RngStream(1))
    spec = OptimSpec(0.1)
    s = RngStream(2)
    for step in range(200):
        idx = s.split("b", step).permutation(len(train))[:32]
        _, _, cache = forward_loss(m, (train.x[idx], train.y[idx]), "train", s.split("d", step))
        m = sgd_step(m, backward(m, cache), spec)
    assert accuracy(m, test.x, test.y) >= 0.9
