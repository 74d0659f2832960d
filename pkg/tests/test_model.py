import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcasim.config import ModelConfig
from fcasim.errors import ConfigError, ValidationError
from fcasim.model import ParamKey, SurrogateModel, load_checkpoint, save_checkpoint
from fcasim.numerics import Optimizer, OptimizerState, Tape


def make(num_layers=2, channels=4, clients=3, classes=2, size=8, seed=0, **kw):
    return SurrogateModel(ModelConfig(num_layers=num_layers, channels=channels, **kw), clients, classes, size, seed)


def zero_trainable(m):
    for p in m.main_parameters():
        p.value[...] = 0.0


def test_zero_adapters_and_decoder_give_zero_logits():
    m = make()
    zero_trainable(m)
    x = np.random.default_rng(0).random((3, 8, 8, 1))
    assert not m(x).any()


def test_forward_is_deterministic_across_constructions():
    x = np.random.default_rng(1).random((2, 8, 8, 1))
    assert np.array_equal(make(seed=5)(x), make(seed=5)(x))
    assert not np.array_equal(make(seed=5)(x), make(seed=6)(x))


def test_single_block_hand_computed_forward():
    m = make(num_layers=1, channels=2, clients=2, classes=1, size=2, backbone_kernel=1)
    w0, b0 = m.backbone[0]
    w0.value[...] = np.array([1.0, -1.0]).reshape(1, 1, 1, 2)
    b0.value[...] = [0.0, 0.5]
    ad = m.adapters[0]
    ad.weight.value[...] = np.array([[1.0, 2.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    ad.bias.value[...] = [0.1, -0.1]
    m.decoder_weight.value[...] = np.array([1.0, 3.0]).reshape(1, 1, 2, 1)
    m.decoder_bias.value[...] = [-1.0]
    img = np.array([[0.2, 0.4], [0.6, 0.8]]).reshape(2, 2, 1)
    logits = m.forward(img).logits[..., 0]
    for (i, j), v in np.ndenumerate(img[..., 0]):
        r = np.array([max(v, 0.0), max(-v + 0.5, 0.0)])
        a = np.array([r[0] * 1.0 + 0.1, r[0] * 2.0 + r[1] * 1.0 - 0.1])
        h = r + a
        assert logits[i, j] == pytest.approx(h[0] + 3.0 * h[1] - 1.0, abs=1e-14)


def test_forward_rejects_wrong_image_shape():
    with pytest.raises(ConfigError):
        make()(np.zeros((1, 7, 8, 1)))


# -- GLD branch -----------------------------------------------------------------


def test_gld_zero_weights_uniform():
    m = make(clients=3)
    p, f_d = m.gld_forward(0, np.random.default_rng(0).random((8, 8, 4)))
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)
    assert f_d.shape == (4,)


def test_gld_saturates_when_aligned():
    m = make(channels=2, clients=2)
    m.adapters[0].gld.weight.value[...] = [[40.0, -40.0], [0.0, 0.0]]
    f = np.zeros((8, 8, 2))
    f[..., 0] = 1.0
    p, _ = m.gld_forward(0, f)
    assert abs(p[0] - 1.0) < 1e-6


def test_gld_softmax_oracle():
    m = make(channels=2, clients=2)
    m.adapters[0].gld.weight.value[...] = np.eye(2)
    f = np.stack([np.full((3, 3), 1.0), np.full((3, 3), 2.0)], axis=-1)
    p, f_d = m.gld_forward(0, f)
    np.testing.assert_allclose(f_d, [1.0, 2.0])
    np.testing.assert_allclose(p, [0.2689414213699951, 0.7310585786300049], atol=1e-12)


def test_pretext_zero_weights_ln3():
    m = make(clients=3)
    x = np.random.default_rng(0).random((4, 8, 8, 1))
    outs = m.forward(x).adapter_outputs
    loss, probs, feats = m.pretext_loss(outs, 1)
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert len(probs) == len(feats) == m.cfg.num_layers


def test_pretext_single_sample_hand_computed():
    m = make(num_layers=1, channels=2, clients=2)
    m.adapters[0].gld.weight.value[...] = [[0.5, -1.0], [2.0, 0.0]]
    f = np.stack([np.full((2, 2), 1.0), np.full((2, 2), -0.5)], axis=-1)
    loss, _, _ = m.pretext_loss([f], 0)
    z = np.array([1.0 * 0.5 + -0.5 * 2.0, 1.0 * -1.0])
    expect = -(z[0] - math.log(math.exp(z[0]) + math.exp(z[1])))
    assert loss == pytest.approx(expect, abs=1e-12)


def test_pretext_converged_discriminator_on_separable_features():
    m = make(num_layers=1, channels=2, clients=2)
    rng = np.random.default_rng(0)
    feats = []
    for k in range(2):
        f = rng.uniform(0.0, 0.2, size=(16, 4, 4, 2))
        f[..., k] += 1.0
        feats.append(f)
    opt = Optimizer(m.discriminator_parameters(), OptimizerState("sgd", 1.0))
    for _ in range(300):
        for k in range(2):
            t = Tape()
            loss, _, _ = m.pretext_loss([feats[k]], k, t)
            t.backward(loss)
        opt.step()
    for k in range(2):
        assert m.pretext_loss([feats[k]], k)[0] < 0.01


def test_pretext_errors():
    m = make(clients=3)
    outs = m.forward(np.zeros((2, 8, 8, 1))).adapter_outputs
    with pytest.raises(ValidationError):
        m.pretext_loss(outs, 3)
    with pytest.raises(ValidationError):
        m.pretext_loss([o[:0] for o in outs], 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gld_probabilities_sum_to_one(seed):
    m = make(clients=4)
    rng = np.random.default_rng(seed)
    m.adapters[1].gld.weight.value[...] = rng.normal(scale=3.0, size=(4, 4))
    p, _ = m.gld_forward(1, rng.normal(size=(8, 8, 4)))
    assert abs(p.sum() - 1.0) <= 1e-12


# -- gradient isolation and frozen backbone ------------------------------------------


def _grads(m, x, masks, pretext):
    for p in m.main_parameters() + m.discriminator_parameters():
        p.zero_grad()
    t = Tape()
    fr = m.forward(x, tape=t)
    loss = t.binary_cross_entropy(fr.logits, masks)
    if pretext:
        pre, _, _ = m.pretext_loss(fr.adapter_outputs, 1, t)
        loss = t.add(loss, pre) if pretext == "joint" else pre
    t.backward(loss)
    return [p.grad.copy() for p in m.main_parameters()], [p.grad.copy() for p in m.discriminator_parameters()]


@pytest.mark.parametrize("seed", range(10))
def test_gradient_isolation_bit_identical(seed):
    m = make(seed=seed)
    rng = np.random.default_rng(seed)
    for ad in m.adapters:
        ad.gld.weight.value[...] = rng.normal(size=ad.gld.weight.shape)
    x = rng.random((3, 8, 8, 1))
    masks = (rng.random((3, 8, 8, 2)) < 0.3).astype(float)
    main_joint, disc_joint = _grads(m, x, masks, "joint")
    main_seg, disc_seg = _grads(m, x, masks, None)
    for a, b in zip(main_joint, main_seg):
        assert np.array_equal(a, b)
    assert not any(d.any() for d in disc_seg)
    _, disc_pre = _grads(m, x, masks, "only")
    for a, b in zip(disc_joint, disc_pre):
        assert np.array_equal(a, b)
    assert all(d.any() for d in disc_joint)


def test_reverse_mode_does_reach_adapters():
    m = make(grl_mode="reverse")
    rng = np.random.default_rng(0)
    for ad in m.adapters:
        ad.gld.weight.value[...] = rng.normal(size=ad.gld.weight.shape)
    x = rng.random((2, 8, 8, 1))
    masks = np.zeros((2, 8, 8, 2))
    joint, _ = _grads(m, x, masks, "joint")
    seg, _ = _grads(m, x, masks, None)
    assert any(not np.array_equal(a, b) for a, b in zip(joint, seg))


def test_backbone_stays_frozen_under_training():
    m = make()
    before = [p.value.copy() for p in m.frozen_parameters()]
    rng = np.random.default_rng(0)
    opt = Optimizer(m.main_parameters(), OptimizerState("adam", 0.05, 0.01))
    opt_d = Optimizer(m.discriminator_parameters(), OptimizerState("sgd", 0.1))
    for _ in range(5):
        x = rng.random((2, 8, 8, 1))
        masks = (rng.random((2, 8, 8, 2)) < 0.5).astype(float)
        t = Tape()
        fr = m.forward(x, tape=t)
        pre, _, _ = m.pretext_loss(fr.adapter_outputs, 0, t)
        t.backward(t.add(t.binary_cross_entropy(fr.logits, masks), pre))
        opt.step()
        opt_d.step()
    for a, p in zip(before, m.frozen_parameters()):
        assert np.array_equal(a, p.value)


# -- units and registry ----------------------------------------------------------


def test_enumerate_units_counts():
    assert len(make(num_layers=1, channels=8).enumerate_units()) == 8
    assert len(make(num_layers=1, channels=16, adapter_kinds=["fc"]).enumerate_units()) == 16
    mixed = make(num_layers=3, channels=5, adapter_kinds=["conv", "fc"])
    assert len(mixed.enumerate_units()) == 15
    assert [ad.kind for ad in mixed.adapters] == ["conv", "fc", "conv"]
    assert mixed.enumerate_units() == mixed.enumerate_units()


def test_adapter_needs_two_units():
    with pytest.raises(ConfigError):
        make(channels=1)


@pytest.mark.parametrize("kind,kernel", [("conv", 1), ("conv", 3), ("fc", 1)])
def test_unit_views_partition_adapter_parameters(kind, kernel):
    m = make(channels=4, adapter_kinds=[kind], adapter_kernel=kernel)
    for ad in m.adapters:
        for u in range(ad.units):
            wv, bv = ad.unit_views(u)
            assert np.shares_memory(wv, ad.weight.value) and np.shares_memory(bv, ad.bias.value)
            wv[...] = u + 1
            bv[...] = u + 1
        # each element was written by exactly the unit owning its output channel
        expect = np.broadcast_to(np.arange(1, ad.units + 1), ad.weight.shape)
        assert np.array_equal(ad.weight.value, expect)
        assert np.array_equal(ad.bias.value, np.arange(1, ad.units + 1))
        sizes = sum(ad.unit_views(u)[0].size + 1 for u in range(ad.units))
        assert sizes == ad.weight.value.size + ad.bias.value.size


def test_registry_covers_all_trainables_once():
    m = make()
    reg = m.registry
    trainable = m.main_parameters() + m.discriminator_parameters()
    total = sum(p.value.size for p in trainable)
    covered = sum(reg[k].size for k in reg.keys() if k.role != "frozen")
    assert covered == total
    assert len(reg.keys("adapter")) == 2 * len(m.enumerate_units())


def test_unit_vector_roundtrip():
    m = make()
    v = np.arange(m.unit_vector(1, 2).size, dtype=float)
    m.set_unit_vector(1, 2, v)
    assert np.array_equal(m.unit_vector(1, 2), v)
    with pytest.raises(ValidationError):
        m.set_unit_vector(1, 2, v[:-1])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = make(adapter_kinds=["conv", "fc"])
    rng = np.random.default_rng(2)
    for ad in m.adapters:
        ad.gld.weight.value[...] = rng.normal(size=ad.gld.weight.shape)
    path = tmp_path / "m.ckpt"
    h = "ab" * 32
    save_checkpoint(path, m.registry, h)
    digest, values = load_checkpoint(path)
    assert digest == h
    assert list(values) == m.registry.keys()
    for k, v in values.items():
        assert v.tobytes() == np.ascontiguousarray(m.registry[k]).tobytes()
    other = make(seed=99, adapter_kinds=["conv", "fc"])
    other.registry.load(values)
    x = rng.random((1, 8, 8, 1))
    assert np.array_equal(other(x), m(x))


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"nope" * 20)
    with pytest.raises(ValidationError):
        load_checkpoint(p)


def test_param_key_string_roundtrip():
    k = ParamKey("adapter", 3, 7, "weight")
    assert ParamKey.parse(str(k)) == k
