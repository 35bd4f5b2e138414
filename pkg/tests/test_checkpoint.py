import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signformer import autodiff as ad
from signformer.checkpoint import (
    CheckpointMismatch,
    config_from_text,
    config_to_text,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from signformer.data import FormatError
from signformer.model import ModelConfig, Signformer, init_parameters


def cfg(**kw):
    base = dict(hidden=16, heads=2, enc_layers=1, dec_layers=1, ff_dim=24, kernel=3, vocab=9, feature_dim=4,
                gloss_samples=2, gloss_radius=2.0, use_cope=True, cope_p_max=3, conv_style="conformer_original")
    base.update(kw)
    return ModelConfig(**base)


def optimizer_state(params):
    rng = np.random.default_rng(0)
    bufs = {k: {"m": rng.standard_normal(p.shape).astype(np.float32), "v": rng.random(p.shape).astype(np.float32)}
            for k, p in params.items() if p.requires_grad}
    return {"kind": "adamw", "hyper": {"lr": 0.001}, "step": 7, "buffer_names": ["m", "v"], "buffers": bufs}


@pytest.fixture(scope="module")
def blob():
    c = cfg()
    params = init_parameters(c, 3)
    return c, params, encode_checkpoint(c, params, optimizer_state(params), {"epoch": 2, "history": [{"a": 1.5}]})


def test_round_trip_is_bit_exact(tmp_path, blob):
    c, params, _ = blob
    opt = optimizer_state(params)
    save_checkpoint(tmp_path / "c.sgck", c, params, opt, {"epoch": 2})
    ck = load_checkpoint(tmp_path / "c.sgck", c)
    assert ck.config == c and ck.progress == {"epoch": 2}
    assert list(ck.params) == list(params)
    for k in params:
        assert ck.params[k].data.tobytes() == params[k].data.tobytes()
        assert ck.params[k].requires_grad == params[k].requires_grad
    for k in opt["buffers"]:
        for b in ("m", "v"):
            assert ck.optimizer["buffers"][k][b].tobytes() == opt["buffers"][k][b].tobytes()
    assert ck.optimizer["step"] == 7
    save_checkpoint(tmp_path / "d.sgck", ck.config, ck.params, ck.optimizer, ck.progress)
    assert (tmp_path / "c.sgck").read_bytes() == (tmp_path / "d.sgck").read_bytes()


def test_reloaded_model_gives_identical_logits(tmp_path):
    c = cfg(use_cope=False, conv_style="signformer")
    model = Signformer(c, seed=8)
    save_checkpoint(tmp_path / "m.sgck", c, model.params)
    again = Signformer(c, load_checkpoint(tmp_path / "m.sgck").params)
    x = np.random.default_rng(0).standard_normal((1, 5, 4)).astype(np.float32)
    with ad.no_grad():
        a = model.logits([[2, 4, 5]], model.encode(x), np.ones((1, 5))).data
        b = again.logits([[2, 4, 5]], again.encode(x), np.ones((1, 5))).data
    assert a.tobytes() == b.tobytes()


def test_magic_and_sorted_names(blob):
    _, params, raw = blob
    assert raw[:4] == b"SGCK"
    assert list(decode_checkpoint(raw).params) == sorted(params)


def test_mismatched_config_names_first_tensor(tmp_path, blob):
    c, params, _ = blob
    save_checkpoint(tmp_path / "c.sgck", c, params)
    with pytest.raises(CheckpointMismatch, match="dec.embed.weight"):
        load_checkpoint(tmp_path / "c.sgck", c.replace(hidden=32))
    with pytest.raises(CheckpointMismatch, match="missing"):
        load_checkpoint(tmp_path / "c.sgck", c.replace(enc_layers=2))


def test_config_text_round_trip():
    c = cfg(ff_dim=None, gloss_radius=2.5, tie_output_embedding=True)
    assert config_from_text(config_to_text(c)) == c


def test_every_truncation_is_a_located_format_error(blob):
    _, _, raw = blob
    cuts = list(range(0, 600)) + list(range(600, len(raw), 131)) + list(range(len(raw) - 600, len(raw)))
    for cut in cuts:
        with pytest.raises(FormatError) as exc:
            decode_checkpoint(raw[:cut])
        assert exc.value.offset is not None


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_corrupted_bytes_never_crash(blob, data):
    _, _, raw = blob
    buf = bytearray(raw)
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(buf) - 1))
        buf[i] = data.draw(st.integers(0, 255))
    try:
        decode_checkpoint(bytes(buf))
    except FormatError:
        pass
