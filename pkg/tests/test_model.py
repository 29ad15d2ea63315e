import math

import numpy as np
import pytest

from latsup.errors import BadConfig, CorruptFile, ShapeMismatch, TooShortUtterance
from latsup.model import (ALL, LHUC_ONLY, SI, LrSchedule, ModelConfig, ParamSelector, backward,
                          forward, init_model, lhuc_name, load_model, lr_at, sat_lhuc_pass_selector,
                          save_model, sgd_step)


def toy(layers=2, width=6, seed=0, strides=None, input_dim=4, outputs=3):
    strides = strides or (1,) * layers
    cfg = ModelConfig(input_dim=input_dim, hidden_dims=(width,) * layers,
                      splice=((-1, 0, 1),) * layers, strides=strides,
                      subsample=math.prod(strides), num_outputs=outputs, seed=seed)
    m = init_model(cfg)
    rng = np.random.default_rng(seed + 100)
    for b in m.biases:
        b[:] = rng.normal(0.1, 0.1, size=b.shape)  # keep most rectifiers open
    return m


def feats(T, dim=4, seed=0):
    return np.random.default_rng(seed).normal(size=(T, dim))


# -- init ------------------------------------------------------------------------

def test_init_deterministic_and_shaped():
    a, b = init_model(ModelConfig()), init_model(ModelConfig())
    for (na, pa), (nb, pb) in zip(a.params().items(), b.params().items()):
        assert na == nb and np.array_equal(pa, pb)
    assert a.out_weight.shape == (64, 12)
    assert all((v == 1.0).all() for v in a.lhuc[SI])


@pytest.mark.parametrize("kw", [dict(strides=(1, 1, 2, 1, 1)), dict(subsample=0, strides=(1,) * 5),
                                dict(hidden_dims=(64,) * 4), dict(splice=((),) * 5)])
def test_bad_config(kw):
    with pytest.raises(BadConfig):
        init_model(ModelConfig(**kw))


def test_new_speaker_lhuc_distribution():
    m = init_model(ModelConfig())
    m.add_speaker("spk", np.random.default_rng(0))
    v = np.concatenate(m.lhuc["spk"])
    assert [len(x) for x in m.lhuc["spk"]] == list(m.cfg.hidden_dims)
    assert v.mean() == pytest.approx(1.0, abs=0.005)
    assert v.std() == pytest.approx(0.01, rel=0.15)
    m.add_speaker("copy", init="si")
    assert all(np.array_equal(a, b) for a, b in zip(m.lhuc["copy"], m.lhuc[SI]))
    with pytest.raises(ValueError):
        m.add_speaker(SI)


# -- forward ---------------------------------------------------------------------

def test_all_ones_speaker_bit_identical_to_si():
    m = init_model(ModelConfig())
    m.add_speaker("s", init="si")
    x = feats(40, 20)
    a, b = forward(m, x, SI), forward(m, x, "s")
    assert np.array_equal(a, b)
    assert np.array_equal(a.argmax(1), b.argmax(1))


def test_zero_lhuc_annihilates_layer():
    m = toy(3)
    m.add_speaker("s", init="si")
    m.lhuc["s"][1][:] = 0.0
    x = feats(20)
    out = forward(m, x, "s")
    # layer 2 sees only zeros, so it computes relu(bias) everywhere
    h = np.maximum(m.biases[2], 0.0) * m.lhuc["s"][2]
    want = h @ m.out_weight + m.out_bias
    np.testing.assert_allclose(out, np.broadcast_to(want, out.shape), atol=1e-12)


def test_lhuc_doubling_matches_first_order():
    m = toy(2)
    m.add_speaker("s", init="si")
    x = feats(15)
    out0 = forward(m, x, "s")
    g = np.zeros_like(out0)
    g[3, 1] = 1.0
    grad = backward(m, x, "s", g, ParamSelector(LHUC_ONLY))[lhuc_name("s", 0)]
    eps = 1e-3
    m.lhuc["s"][0][2] *= 1 + eps  # a small relative change of one entry
    delta = forward(m, x, "s")[3, 1] - out0[3, 1]
    assert delta == pytest.approx(grad[2] * eps, rel=1e-3, abs=1e-10)


def test_output_length_closed_form():
    m = init_model(ModelConfig())
    assert m.context == 18  # 3 layers at full rate, 2 more at a third
    for T in range(19, 90):
        assert m.output_length(T) == math.ceil((T - m.context) / 3)
        assert forward(m, feats(T, 20)).shape == (m.output_length(T), 12)
    with pytest.raises(TooShortUtterance):
        forward(m, feats(18, 20))
    with pytest.raises(ShapeMismatch):
        forward(m, feats(30, 19))


def test_receptive_field():
    m = init_model(ModelConfig())
    x = feats(60, 20)
    out = forward(m, x)
    pos = m.output_positions(60)
    f = 5
    lo, hi = pos[f] - m.left_context, pos[f] + (m.context - m.left_context)
    for t in (lo - 1, hi + 1):
        y = x.copy()
        y[t] += 10.0
        assert np.array_equal(forward(m, y)[f], out[f])
    y = x.copy()
    y[lo] += 10.0
    assert not np.array_equal(forward(m, y)[f], out[f])


# -- backward ----------------------------------------------------------------------

def _central_difference(m, x, spk, g, name, idx, h=1e-4):
    p = m.params()[name]
    orig = p[idx]
    p[idx] = orig + h
    fp = float((forward(m, x, spk) * g).sum())
    p[idx] = orig - h
    fm = float((forward(m, x, spk) * g).sum())
    p[idx] = orig
    return (fp - fm) / (2 * h)


@pytest.mark.parametrize("layers,strides", [(2, (1, 1)), (3, (1, 2, 1))])
def test_backward_matches_finite_differences(layers, strides):
    m = toy(layers, width=8, strides=strides)
    m.add_speaker("s", np.random.default_rng(1))
    x = feats(21)
    g = np.random.default_rng(2).normal(size=forward(m, x, "s").shape)
    grads = backward(m, x, "s", g)
    rng = np.random.default_rng(3)
    names = sorted(grads)
    worst = 0.0
    for _ in range(100):
        name = names[rng.integers(len(names))]
        idx = np.unravel_index(int(rng.integers(grads[name].size)), grads[name].shape)
        fd = _central_difference(m, x, "s", g, name, idx)
        an = grads[name][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    assert worst < 1e-4


def test_selector_masks_gradients():
    m = toy(2)
    m.add_speaker("s", init="si")
    x = feats(12)
    g = np.ones(forward(m, x).shape)
    assert set(backward(m, x, "s", g, ParamSelector(LHUC_ONLY))) == {lhuc_name("s", 0), lhuc_name("s", 1)}
    full = backward(m, x, "s", g, ParamSelector(ALL))
    assert "output.weight" in full and lhuc_name("s", 1) in full
    assert lhuc_name(SI, 0) not in backward(m, x, SI, g, ParamSelector(ALL))
    assert lhuc_name(SI, 0) in backward(m, x, SI, g, ParamSelector(ALL, include_si=True))
    sub = backward(m, x, "s", g, ParamSelector(ALL, layers=(1,)))
    assert "hidden.0.weight" not in sub and "hidden.1.weight" in sub
    with pytest.raises(ShapeMismatch):
        backward(m, x, "s", g[:-1])


def test_zero_grad_out():
    m = toy(2)
    x = feats(12)
    grads = backward(m, x, SI, np.zeros(forward(m, x).shape), ParamSelector(ALL, include_si=True))
    assert all(not v.any() for v in grads.values())


# -- SAT selector ----------------------------------------------------------------

def test_sat_selector_boundaries_and_frequency():
    rng = np.random.default_rng(0)
    assert {sat_lhuc_pass_selector(rng, 0.0) for _ in range(200)} == {"SD"}
    assert {sat_lhuc_pass_selector(rng, 1.0) for _ in range(200)} == {"SI"}
    si = sum(sat_lhuc_pass_selector(rng) == "SI" for _ in range(10_000))
    assert abs(si / 10_000 - 0.5) <= 0.02
    with pytest.raises(ValueError):
        sat_lhuc_pass_selector(rng, 1.5)


# -- SGD ------------------------------------------------------------------------------

def _zeros(m):
    return {n: np.zeros_like(p) for n, p in m.params().items()}


def test_sgd_fixed_point_and_weight_decay():
    m = toy(2)
    m.add_speaker("s", np.random.default_rng(0))
    before = {n: p.copy() for n, p in m.params().items()}
    sgd_step(m, _zeros(m), ParamSelector(ALL), lr=0.1)
    assert all(np.array_equal(before[n], p) for n, p in m.params().items())
    sgd_step(m, _zeros(m), ParamSelector(ALL), lr=0.1, l2=0.5)
    for n, p in m.params().items():
        if n.endswith(".weight"):
            np.testing.assert_allclose(p, before[n] * 0.95)
        else:
            assert np.array_equal(p, before[n])


def test_sgd_scalar_step_and_selector():
    m = toy(1, width=1, input_dim=1, outputs=1)
    m.add_speaker("s", init="si")
    w0, a0 = m.out_weight.copy(), m.lhuc["s"][0].copy()
    grads = {"output.weight": np.full((1, 1), 2.0), lhuc_name("s", 0): np.array([3.0])}
    sgd_step(m, grads, ParamSelector(LHUC_ONLY), lr=0.1)
    assert np.array_equal(m.out_weight, w0)
    assert m.lhuc["s"][0][0] == pytest.approx(a0[0] - 0.3)
    sgd_step(m, grads, ParamSelector(ALL), lr=0.1)
    assert m.out_weight[0, 0] == pytest.approx(w0[0, 0] - 0.2)
    with pytest.raises(ValueError):
        sgd_step(m, grads, None, lr=-1.0)


def test_sgd_max_change_caps_norm():
    m = toy(1)
    w0 = m.out_weight.copy()
    g = {"output.weight": np.full_like(w0, 100.0)}
    sgd_step(m, g, None, lr=1.0, max_change=0.5)
    assert np.linalg.norm(w0 - m.out_weight) == pytest.approx(0.5)


# -- learning rate ---------------------------------------------------------------------

def test_lr_schedule():
    s = LrSchedule(0.1, 0.01, epochs=3, iters_per_epoch=5)
    assert lr_at(s, 0) == pytest.approx(0.1)
    assert lr_at(s, s.num_iterations - 1) == pytest.approx(0.01)
    odd = LrSchedule(0.1, 0.01, epochs=1, iters_per_epoch=11)
    assert lr_at(odd, 5) == pytest.approx(math.sqrt(0.1 * 0.01))
    lrs = [lr_at(s, i) for i in range(s.num_iterations)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert lr_at(LrSchedule.fixed(0.3, 4, 2), 5) == 0.3


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = init_model(ModelConfig())
    m.add_speaker("spk-1", np.random.default_rng(0))
    m.metadata["last_lr"] = 0.05
    save_model(m, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert back.cfg == m.cfg and back.metadata == m.metadata
    assert list(back.params()) == list(m.params())
    assert all(np.array_equal(a, b) for a, b in zip(back.params().values(), m.params().values()))
    save_model(back, tmp_path / "again.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_corrupt_checkpoints(tmp_path):
    m = toy(1)
    save_model(m, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "magic").write_bytes(b"XX" + raw[2:])
    (tmp_path / "short").write_bytes(raw[:-16])
    for name in ("magic", "short"):
        with pytest.raises(CorruptFile):
            load_model(tmp_path / name)
