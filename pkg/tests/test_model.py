import numpy as np
import pytest

from otgraph import transport
from otgraph.autodiff import Tape, Tensor, grad_check
from otgraph.data import _synth_sample
from otgraph.errors import ConfigError
from otgraph.model import (ModelConfig, forward_sample, init_params,
                           lift_params, predict, sample_loss)

TINY = ModelConfig(d_h=8, n_p2=4, n_s=3, n_classes=2, h=8, n_steps=2,
                   m_heads=2, d_phi=8, mlp_hidden=8, sigma=0.5,
                   sinkhorn_iters=3)


def _tiny_sample(seed=11, label=1):
    rng = np.random.default_rng(seed)
    concepts = rng.standard_normal((8, TINY.d_h))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    return _synth_sample(rng, concepts, label, 2, 0.1, TINY.d_h,
                         TINY.n_p2, TINY.n_s, f"t{seed}")


def _grads(params, sample, cfg):
    tape = Tape()
    pn = lift_params(tape, params)
    tape.backward(sample_loss(tape, pn, sample, cfg))
    return {name: tape.grad(node).data for name, node in pn.items()}


# -- configuration ---------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError, match="gamma must be in"):
        ModelConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        ModelConfig(d_h=12, m_heads=5)  # heads must divide d_h
    with pytest.raises(ConfigError):
        ModelConfig(variant="mlp")
    with pytest.raises(ConfigError):
        ModelConfig(n_classes=1)
    with pytest.raises(ConfigError):
        ModelConfig(epsilon=0.0)


def test_param_sets_by_variant():
    p = init_params(TINY, 0)
    names = set(p)
    assert "img.step0.wq" in names and "txt.step1.ba" in names
    assert "reg.head1.wv" in names and "head.wc" in names
    assert "img.mlp.w1" in names  # fallback scorer exists even when unused
    assert p["head.wc"].shape == (2, 8)
    assert p["img.graph.win"].shape == (TINY.d_phi, TINY.h)

    c = init_params(TINY.with_overrides(variant="cot"), 0)
    assert set(c) == {"cot.w", "cot.b"}
    assert c["cot.w"].shape == (2, 16)


def test_init_is_seed_deterministic():
    a = init_params(TINY, 3)
    b = init_params(TINY, 3)
    other = init_params(TINY, 4)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, other[n].data) for n in a)


# -- forward ---------------------------------------------------------------

def test_forward_probabilities_and_edges():
    params = init_params(TINY, 0)
    tape = Tape()
    pn = lift_params(tape, params)
    probs, hist = forward_sample(tape, pn, _tiny_sample(), TINY)
    p = probs.value.data
    assert abs(p.sum() - 1.0) < 1e-12
    assert p.min() > 0.0
    assert set(hist) == {"image", "text"}
    for side, mats in hist.items():
        assert len(mats) == TINY.n_steps
        for E in mats:
            np.testing.assert_allclose(E.data.sum(axis=1),
                                       np.ones(E.data.shape[0]), atol=1e-9)


def test_forward_is_deterministic():
    params = init_params(TINY, 0)
    s = _tiny_sample()
    runs = []
    for _ in range(2):
        tape = Tape()
        probs, _ = forward_sample(tape, lift_params(tape, params), s, TINY)
        runs.append(probs.value.data)
    np.testing.assert_array_equal(runs[0], runs[1])


def test_predict_matches_forward_argmax():
    params = init_params(TINY, 1)
    s = _tiny_sample()
    tape = Tape()
    probs, _ = forward_sample(tape, lift_params(tape, params), s, TINY)
    label, dist = predict(params, s, TINY)
    assert label == int(np.argmax(probs.value.data))
    np.testing.assert_array_equal(dist, probs.value.data)


def test_loss_positive_finite():
    params = init_params(TINY, 2)
    tape = Tape()
    loss = sample_loss(tape, lift_params(tape, params), _tiny_sample(), TINY)
    v = float(loss.value.data)
    assert np.isfinite(v) and v > 0.0


# -- gradients -------------------------------------------------------------

def test_pipeline_gradients_spot_check():
    # acceptance sweeps every tensor; here a cross-section keeps it quick
    params = init_params(TINY, 5)
    sample = _tiny_sample()
    for name in ("img.step0.wq", "txt.graph.win", "reg.head0.wk",
                 "head.wc", "img.step1.ba"):
        def f(tape, node, name=name):
            pn = lift_params(tape, {k: v for k, v in params.items()
                                    if k != name})
            pn[name] = node
            return sample_loss(tape, pn, sample, TINY)
        assert grad_check(f, params[name].data, step=1e-4) < 1e-3


# -- ablations -------------------------------------------------------------

def test_no_dtor_freezes_graph_parameters():
    cfg = TINY.with_overrides(no_dtor=True)
    params = init_params(cfg, 0)
    transport.reset_sinkhorn_calls()
    grads = _grads(params, _tiny_sample(), cfg)
    assert transport.sinkhorn_calls() == 0  # no transport without graphs
    for name, g in grads.items():
        if name.split(".")[1] in ("graph", "step0", "step1", "read"):
            assert not g.any(), name
    assert grads["img.mlp.w1"].any() and grads["txt.mlp.w2"].any()
    assert grads["head.wc"].any()


def test_no_reg_freezes_attention_parameters():
    cfg = TINY.with_overrides(no_reg=True)
    params = init_params(cfg, 0)
    grads = _grads(params, _tiny_sample(), cfg)
    for name, g in grads.items():
        if name.startswith("reg."):
            assert not g.any(), name
    assert grads["img.step0.wq"].any()


def test_single_graph_ablation_freezes_other_side():
    cfg = TINY.with_overrides(no_ott=True)  # text graph off
    params = init_params(cfg, 0)
    grads = _grads(params, _tiny_sample(), cfg)
    for name, g in grads.items():
        if name.startswith("txt."):
            assert not g.any(), name
    assert grads["img.step0.wq"].any()


def test_both_graphs_off_never_call_sinkhorn():
    cfg = TINY.with_overrides(no_ott=True, no_oti=True)
    params = init_params(cfg, 0)
    transport.reset_sinkhorn_calls()
    for seed in (11, 12, 13):
        _grads(params, _tiny_sample(seed), cfg)
    assert transport.sinkhorn_calls() == 0


def test_graphs_on_do_call_sinkhorn():
    params = init_params(TINY, 0)
    transport.reset_sinkhorn_calls()
    _grads(params, _tiny_sample(), TINY)
    assert transport.sinkhorn_calls() == 2  # one per enabled graph


# -- gamma routing ---------------------------------------------------------

def _probs_with(params, cfg, sample):
    tape = Tape()
    probs, _ = forward_sample(tape, lift_params(tape, params), sample, cfg)
    return probs.value.data


def test_gamma_zero_makes_graphs_irrelevant():
    cfg = TINY.with_overrides(gamma=0.0)
    sample = _tiny_sample()
    params = init_params(cfg, 0)
    scrambled = dict(params)
    rng = np.random.default_rng(99)
    for name in params:
        if name.startswith(("img.", "txt.")):
            scrambled[name] = Tensor(rng.standard_normal(params[name].shape))
    np.testing.assert_array_equal(_probs_with(params, cfg, sample),
                                  _probs_with(scrambled, cfg, sample))


def test_gamma_one_makes_fusion_irrelevant():
    cfg = TINY.with_overrides(gamma=1.0)
    sample = _tiny_sample()
    params = init_params(cfg, 0)
    scrambled = dict(params)
    rng = np.random.default_rng(98)
    for name in params:
        if name.startswith("reg."):
            scrambled[name] = Tensor(rng.standard_normal(params[name].shape))
    np.testing.assert_array_equal(_probs_with(params, cfg, sample),
                                  _probs_with(scrambled, cfg, sample))


# -- concatenation baseline ------------------------------------------------

def test_cot_forward_ignores_transport():
    cfg = TINY.with_overrides(variant="cot")
    params = init_params(cfg, 0)
    transport.reset_sinkhorn_calls()
    label, dist = predict(params, _tiny_sample(), cfg)
    assert transport.sinkhorn_calls() == 0
    assert abs(dist.sum() - 1.0) < 1e-12
    assert label in (0, 1)
