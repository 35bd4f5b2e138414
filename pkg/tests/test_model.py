import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signformer import autodiff as ad
from signformer.model import (
    ConfigError,
    ModelConfig,
    RunMode,
    Signformer,
    encoder_forward,
    forward_macs,
    init_parameters,
    param_count,
    runtime_param_count,
)


def small_cfg(**kw):
    base = dict(hidden=16, heads=4, enc_layers=1, dec_layers=2, ff_dim=32, kernel=5, vocab=13, feature_dim=6,
                dropout=0.0, gloss_samples=4, gloss_radius=3.0, cope_p_max=8)
    base.update(kw)
    return ModelConfig(**base)


def frames(rng, b, t, f):
    return rng.standard_normal((b, t, f)).astype(np.float32)


@pytest.mark.parametrize("kw", [{}, {"use_cope": True}, {"conv_style": "conformer_original"}])
def test_decoder_is_causal(kw):
    cfg = small_cfg(**kw)
    model = Signformer(cfg, seed=1)
    rng = np.random.default_rng(0)
    x = frames(rng, 1, 7, cfg.feature_dim)
    mask = np.ones((1, 7), np.float32)
    with ad.no_grad():
        enc = model.encode(x, mask)
        a = model.logits(np.array([[2, 5, 6, 7, 8]]), enc, mask).data
        b = model.logits(np.array([[2, 5, 6, 11, 4]]), enc, mask).data
    np.testing.assert_array_equal(a[0, :3], b[0, :3])
    assert not np.array_equal(a[0, 3], b[0, 3])


@pytest.mark.parametrize("kw", [{}, {"use_cope": True}, {"conv_style": "conformer_original"}])
def test_padding_does_not_change_outputs(kw):
    cfg = small_cfg(**kw)
    model = Signformer(cfg, seed=2)
    rng = np.random.default_rng(1)
    x = frames(rng, 2, 9, cfg.feature_dim)
    mask = np.ones((2, 9), np.float32)
    mask[1, 6:] = 0
    tokens = np.array([[2, 5, 6, 7], [2, 9, 10, 4]])
    with ad.no_grad():
        a = model.logits(tokens, model.encode(x, mask), mask).data
        x2 = x.copy()
        x2[1, 6:] = rng.standard_normal((3, cfg.feature_dim)) * 100
        b = model.logits(tokens, model.encode(x2, mask), mask).data
        # and the short sequence alone, unpadded
        c = model.logits(tokens[1:], model.encode(x[1:, :6], mask[1:, :6]), mask[1:, :6]).data
    np.testing.assert_allclose(a, b, atol=1e-5)
    np.testing.assert_allclose(a[1], c[0], atol=1e-5)


def test_encoder_rejects_wrong_feature_dim():
    cfg = small_cfg()
    with pytest.raises(ad.ShapeError):
        encoder_forward(np.zeros((1, 3, 5)), init_parameters(cfg), cfg, np.ones((1, 3)))


def test_decoder_rejects_out_of_vocab_token():
    model = Signformer(small_cfg())
    with ad.no_grad():
        enc = model.encode(np.zeros((1, 3, 6), np.float32))
        with pytest.raises(IndexError):
            model.logits(np.array([[2, 99]]), enc, np.ones((1, 3)))


@pytest.mark.parametrize("bad", [dict(hidden=512), dict(hidden=16, heads=3), dict(kernel=4), dict(dropout=1.0),
                                 dict(vocab=3), dict(conv_style="x")])
def test_config_validation(bad):
    base = dict(hidden=16, heads=4)
    base.update(bad)
    with pytest.raises(ConfigError):
        ModelConfig(**base)


def test_init_is_deterministic_and_sorted():
    cfg = small_cfg(use_cope=True)
    a, b = init_parameters(cfg, 5), init_parameters(cfg, 5)
    assert list(a) == sorted(a)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
        assert a[k].dtype == np.float32


def test_batch_norm_buffers_are_not_trainable():
    params = init_parameters(small_cfg(conv_style="conformer_original"))
    buffers = [k for k, v in params.items() if not v.requires_grad]
    assert buffers and all("running_" in k for k in buffers)


# -- parameter accounting ---------------------------------------------------

config_strategy = st.fixed_dictionaries({
    "hidden": st.sampled_from([16, 32, 64]),
    "heads": st.sampled_from([1, 2, 4]),
    "enc_layers": st.integers(1, 3),
    "dec_layers": st.integers(1, 3),
    "ff_dim": st.integers(4, 80),
    "kernel": st.sampled_from([1, 3, 7, 31]),
    "conv_expansion": st.integers(1, 3),
    "use_cope": st.booleans(),
    "cope_gloss": st.booleans(),
    "cope_cross": st.booleans(),
    "cope_p_max": st.integers(1, 20),
    "gloss_samples": st.integers(1, 9),
    "vocab": st.integers(4, 60),
    "feature_dim": st.integers(1, 40),
    "conv_style": st.sampled_from(["signformer", "conformer_original"]),
    "tie_output_embedding": st.booleans(),
})


@settings(max_examples=20, deadline=None)
@given(config_strategy)
def test_analytic_count_equals_runtime(kw):
    cfg = ModelConfig(**kw)
    total, parts = param_count(cfg)
    assert total == sum(parts.values())
    assert total == runtime_param_count(init_parameters(cfg))


@pytest.mark.parametrize("tie", [False, True])
def test_vocab_growth_formula(tie):
    cfg = small_cfg(tie_output_embedding=tie)
    grown = cfg.replace(vocab=2 * cfg.vocab)
    delta = param_count(grown)[0] - param_count(cfg)[0]
    assert delta == cfg.vocab * cfg.hidden * (2 - int(tie))


def test_forward_macs_encoder_linear_in_length():
    cfg = ModelConfig()
    e = [forward_macs(cfg, t, 5)["encoder"] for t in (32, 64, 128)]
    assert e[1] - e[0] == (e[2] - e[1]) / 2
    assert e[1] == 2 * e[0]


# -- incremental decoding -----------------------------------------------------

@pytest.mark.parametrize("kw", [{}, {"use_cope": True}, {"use_ape": False}, {"use_cope": True,
                                                                           "cope_cross_mode": "suffix"}])
def test_cached_step_matches_full_recompute(kw):
    model = Signformer(small_cfg(**kw), seed=3)
    state = model.start(np.random.default_rng(4).standard_normal((8, 6)).astype(np.float32))
    prefixes = [[2]]
    for step in range(4):
        inc = model.next_log_probs(state, prefixes)
        full = model.full_log_probs(state, prefixes)
        np.testing.assert_allclose(inc, full, atol=1e-4)
        prefixes = [p + [4 + (step + j) % 9] for p in prefixes for j in range(2)][:3]


def test_training_mode_dropout_uses_rng():
    cfg = small_cfg(dropout=0.3)
    model = Signformer(cfg)
    x = frames(np.random.default_rng(0), 1, 5, cfg.feature_dim)
    a = model.encode(x, mode=RunMode(True, np.random.default_rng(9))).data
    b = model.encode(x, mode=RunMode(True, np.random.default_rng(9))).data
    c = model.encode(x).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
