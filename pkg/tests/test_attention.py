import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signformer import autodiff as ad
from signformer.attention import (
    ApeTable,
    CopeConfig,
    GlossAttentionConfig,
    ape_add,
    build_masks,
    cope_logit_bias,
    cope_positions,
    gloss_attention,
    gloss_positions,
    multi_head_attention,
    scaled_dot_attention,
)
from signformer.autodiff import Tensor


def attn_params(d, prefix, rng, heads=None, samples=None, radius=None, p_max=None):
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.{name}.weight"] = Tensor(rng.standard_normal((d, d)) / math.sqrt(d))
        p[f"{prefix}.{name}.bias"] = Tensor(rng.standard_normal(d) * 0.1)
    if samples is not None:
        p[f"{prefix}.offsets"] = Tensor(GlossAttentionConfig(heads, samples, radius).initial_offsets()
                                        + rng.uniform(-0.4, 0.4, (heads, samples)))
    if p_max is not None:
        p[f"{prefix}.cope_emb"] = Tensor(rng.standard_normal((heads, p_max + 1, d // heads)))
    return p


# -- APE ---------------------------------------------------------------------

def test_ape_table_formula():
    table = ApeTable.build(16, 64).table
    pos, i = 37, 3
    assert table[pos, 2 * i] == pytest.approx(math.sin(pos / 10000 ** (2 * i / 16)), abs=1e-6)
    assert table[pos, 2 * i + 1] == pytest.approx(math.cos(pos / 10000 ** (2 * i / 16)), abs=1e-6)


def test_ape_row_zero_alternates_zero_one():
    np.testing.assert_allclose(ApeTable.build(8).table[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-12)


def test_ape_add_scale_and_length_limit():
    table = ApeTable.build(4, 8)
    x = Tensor(np.ones((3, 4)))
    np.testing.assert_allclose(ape_add(x, table).data, 2.0 + table.table[:3])  # default sqrt(4)
    np.testing.assert_allclose(ape_add(x, table, 1.0).data, 1.0 + table.table[:3])
    with pytest.raises(ValueError):
        ape_add(Tensor(np.ones((9, 4))), table)


# -- masks -------------------------------------------------------------------

def test_build_masks_padding_and_causal():
    m = build_masks([3, 5], 4)
    np.testing.assert_array_equal(m.src_pad_mask, [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
    np.testing.assert_array_equal(m.tgt_causal_mask, np.tril(np.ones((4, 4))))
    with pytest.raises(ValueError):
        build_masks([0], 2)


def test_masked_attention_ignores_masked_values():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.standard_normal((1, 2, 3, 4))) for _ in range(3))
    mask = np.array([[1, 1, 0]], dtype=bool)
    out1 = scaled_dot_attention(q, k, v, mask).data
    v2 = v.data.copy()
    v2[..., 2, :] = 1e6
    out2 = scaled_dot_attention(q, k, Tensor(v2), mask).data
    np.testing.assert_array_equal(out1, out2)


# -- gloss attention -----------------------------------------------------------

def test_initial_offsets_span_window():
    off = GlossAttentionConfig(2, 5, 4.0).initial_offsets()
    np.testing.assert_array_equal(off[0], [-4, -2, 0, 2, 4])


def test_gloss_positions_clamp_offsets():
    off = Tensor(np.array([[-10.0, 0.5, 10.0]]))
    pos = gloss_positions(off, 4, 2.0).data
    np.testing.assert_array_equal(pos[0, 0], [-2.0, 0.5, 2.0])


@pytest.mark.parametrize("use_cope", [False, True])
def test_gloss_attention_is_local(use_cope):
    rng = np.random.default_rng(1)
    d, heads, samples, radius, t = 16, 4, 4, 3.0, 20
    params = attn_params(d, "g", rng, heads, samples, radius, p_max=8 if use_cope else None)
    cfg = GlossAttentionConfig(heads, samples, radius)
    cope = CopeConfig(8) if use_cope else None
    x = rng.standard_normal((1, t, d))
    base = gloss_attention(Tensor(x), params, "g", cfg, cope=cope).data
    j = 12
    x2 = x.copy()
    x2[0, j] += rng.standard_normal(d) * 10
    moved = gloss_attention(Tensor(x2), params, "g", cfg, cope=cope).data
    far = [i for i in range(t) if abs(i - j) > radius]
    np.testing.assert_array_equal(base[0, far], moved[0, far])
    assert np.abs(base[0, j] - moved[0, j]).max() > 0


def test_gloss_attention_never_reads_padding():
    rng = np.random.default_rng(2)
    d, heads = 8, 2
    params = attn_params(d, "g", rng, heads, 4, 3.0)
    cfg = GlossAttentionConfig(heads, 4, 3.0)
    x = rng.standard_normal((1, 7, d))
    base = gloss_attention(Tensor(x), params, "g", cfg, lengths=np.array([5])).data
    x[0, 5:] = 1e4
    moved = gloss_attention(Tensor(x), params, "g", cfg, lengths=np.array([5])).data
    np.testing.assert_array_equal(base[0, :5], moved[0, :5])


# -- CoPE --------------------------------------------------------------------

def saturated(qn, tn, d=4):
    q = np.full((qn, d), 10.0)
    k = np.full((tn, d), 10.0)  # q.k = 400, sigmoid == 1.0 in float64
    return Tensor(q), Tensor(k)


@pytest.mark.parametrize("mode,expected", [
    ("prefix", lambda i, j, t: j + 1),
    ("suffix", lambda i, j, t: t - j),
])
def test_cope_saturated_positions_are_counts(mode, expected):
    q, k = saturated(3, 6)
    pos = cope_positions(q, k, mode).data
    want = np.array([[expected(i, j, 6) for j in range(6)] for i in range(3)], dtype=np.float64)
    np.testing.assert_array_equal(pos, want)


def test_cope_causal_saturated_positions_are_distances():
    q, k = saturated(5, 5)
    pos = cope_positions(q, k, "causal").data
    want = np.array([[i - j + 1 if j <= i else 0 for j in range(5)] for i in range(5)], dtype=np.float64)
    np.testing.assert_array_equal(pos, want)


def test_cope_cap():
    q, k = saturated(2, 10)
    assert cope_positions(q, k, "suffix", p_max=4).data.max() == 4.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_cope_positions_within_range(qn, tn, p_max, seed):
    rng = np.random.default_rng(seed)
    q = Tensor(rng.standard_normal((qn, 4)) * 3)
    k = Tensor(rng.standard_normal((tn, 4)) * 3)
    for mode in ("prefix", "suffix"):
        pos = cope_positions(q, k, mode, p_max=p_max).data
        assert pos.min() >= 0 and pos.max() <= p_max


def test_cope_logit_bias_interpolates():
    q = Tensor(np.array([[1.0, 0.0]]))
    emb = Tensor(np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]]))
    pos = Tensor(np.array([[0.0, 0.5, 1.25, 2.0]]))
    np.testing.assert_allclose(cope_logit_bias(q, pos, emb).data, [[0.0, 1.0, 2.5, 4.0]])


def test_multi_head_attention_shape_and_head_check():
    rng = np.random.default_rng(3)
    params = attn_params(8, "a", rng)
    out = multi_head_attention(Tensor(rng.standard_normal((2, 3, 8))), Tensor(rng.standard_normal((2, 5, 8))),
                               params, "a", heads=2)
    assert out.shape == (2, 3, 8)
    with pytest.raises(ad.ShapeError):
        multi_head_attention(Tensor(np.ones((1, 2, 8))), Tensor(np.ones((1, 2, 8))), params, "a", heads=3)
