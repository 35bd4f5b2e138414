import struct
from itertools import groupby

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signformer.data import (
    FeatureDataset,
    FormatError,
    Sample,
    SynthSpec,
    make_batches,
    read_features,
    read_vocab,
    synth_generate,
    write_features,
    write_vocab,
)
from signformer.model import RESERVED_TOKENS


def random_dataset(rng, n, f):
    seqs = []
    for i in range(n):
        t = int(rng.integers(1, 6))
        seqs.append(Sample(f"s{i}-é", rng.standard_normal((t, f)).astype(np.float32),
                           rng.integers(0, 50, int(rng.integers(0, 5))).tolist()))
    return FeatureDataset(seqs, feature_dim=f)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_feature_round_trip_is_bit_exact(tmp_path_factory, n, f, seed):
    path = tmp_path_factory.mktemp("sgnf") / "x.sgnf"
    ds = random_dataset(np.random.default_rng(seed), n, f)
    write_features(path, ds)
    back = read_features(path)
    assert len(back) == n and back.feature_dim == f
    for a, b in zip(ds, back):
        assert a.id == b.id and a.target == b.target
        assert a.frames.tobytes() == b.frames.tobytes()
    write_features(path.with_suffix(".2"), back)
    assert path.read_bytes() == path.with_suffix(".2").read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "x.sgnf"
    write_features(path, FeatureDataset([Sample("a", np.zeros((2, 3), np.float32), [7])]))
    raw = path.read_bytes()
    assert raw[:4] == b"SGNF"
    assert struct.unpack("<III", raw[4:16]) == (1, 3, 1)
    assert len(raw) == 16 + 2 + 1 + 4 + 2 * 3 * 4 + 4 + 4


def test_empty_dataset_is_valid(tmp_path):
    write_features(tmp_path / "e.sgnf", FeatureDataset([], feature_dim=8))
    assert len(read_features(tmp_path / "e.sgnf")) == 0


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "x.sgnf"
    write_features(path, random_dataset(np.random.default_rng(0), 3, 4))
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="byte offset") as exc:
        read_features(path)
    assert exc.value.offset is not None and exc.value.offset < len(raw)


@pytest.mark.parametrize("raw,where", [(b"XXXX" + b"\0" * 12, 0), (b"SGNF" + struct.pack("<III", 2, 1, 0), 4)])
def test_bad_magic_and_version(tmp_path, raw, where):
    path = tmp_path / "bad.sgnf"
    path.write_bytes(raw)
    with pytest.raises(FormatError) as exc:
        read_features(path)
    assert exc.value.offset == where


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "x.sgnf"
    write_features(path, FeatureDataset([], feature_dim=2))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_features(path)


# -- vocab ----------------------------------------------------------------------

def test_reserved_only_vocab(tmp_path):
    write_vocab(tmp_path / "v.txt", RESERVED_TOKENS)
    assert read_vocab(tmp_path / "v.txt") == list(RESERVED_TOKENS)


def test_phoenix_sized_vocab(tmp_path):
    write_vocab(tmp_path / "v.txt", list(RESERVED_TOKENS) + [f"w{i}" for i in range(2887)])
    assert len(read_vocab(tmp_path / "v.txt")) == 2891


def test_duplicate_and_missing_header(tmp_path):
    (tmp_path / "d.txt").write_text("\n".join(RESERVED_TOKENS + ("hello", "hello")) + "\n")
    with pytest.raises(FormatError, match="hello"):
        read_vocab(tmp_path / "d.txt")
    (tmp_path / "m.txt").write_text("a\nb\n")
    with pytest.raises(FormatError, match="reserved"):
        read_vocab(tmp_path / "m.txt")


# -- batching --------------------------------------------------------------------

def test_batch_padding_and_masks():
    ds = FeatureDataset([Sample("a", np.ones((3, 2), np.float32), [5, 6]),
                         Sample("b", np.ones((5, 2), np.float32), [7])])
    (b,) = make_batches(ds, 2)
    assert b.frames.shape == (2, 5, 2)
    np.testing.assert_array_equal(b.src_mask, [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
    np.testing.assert_array_equal(b.frames[0, 3:], 0.0)
    np.testing.assert_array_equal(b.tgt_in, [[2, 5, 6], [2, 7, 1]])
    np.testing.assert_array_equal(b.tgt_out, [[5, 6, 3], [7, 3, 1]])


def test_batch_sizes_and_order():
    ds = FeatureDataset([Sample(str(i), np.zeros((1, 1), np.float32), [4]) for i in range(100)])
    batches = make_batches(ds, 32)
    assert [len(b) for b in batches] == [32, 32, 32, 4]
    assert [i for b in batches for i in b.ids] == [str(i) for i in range(100)]
    shuffled = make_batches(ds, 32, seed=3, shuffle=True)
    assert [b.ids for b in shuffled] == [b.ids for b in make_batches(ds, 32, seed=3, shuffle=True)]
    with pytest.raises(ValueError):
        make_batches(ds, 0)


# -- synthetic tasks -----------------------------------------------------------------

def small(task, **kw):
    return SynthSpec(task=task, feature_dim=6, n_train=40, n_dev=10, n_test=10, **kw)


def test_synth_counts_and_vocab():
    splits = synth_generate(SynthSpec(task="copy", feature_dim=4))
    assert [len(splits[k]) for k in ("train", "dev", "test")] == [500, 100, 100]
    assert len(splits["train"].vocab) == 4 + 30


def test_synth_is_pure():
    a, b = synth_generate(small("segment"), 5), synth_generate(small("segment"), 5)
    for x, y in zip(a["train"], b["train"]):
        assert x.target == y.target and np.array_equal(x.frames, y.frames)
    c = synth_generate(small("segment"), 6)
    assert any(x.target != y.target for x, y in zip(a["train"], c["train"]))


def test_copy_noise_free_frames_depend_only_on_target():
    ds = synth_generate(small("copy", noise=0.0, vocab_size=5, min_len=1, max_len=1))["train"]
    by_target = {}
    for s in ds:
        by_target.setdefault(tuple(s.target), s.frames)
        np.testing.assert_array_equal(by_target[tuple(s.target)], s.frames)
    assert all(s.frames.shape[0] == len(s.target) for s in ds)


def test_order_pairs_are_permutations():
    ds = synth_generate(small("order"))["train"].sequences
    for a, b in zip(ds[0::2], ds[1::2]):
        assert sorted(a.target) == sorted(b.target)
        rows = lambda s: sorted(map(bytes, s.frames))  # noqa: E731
        assert rows(a) == rows(b)


def test_segment_frames_follow_token_runs():
    spec = small("segment", noise=0.0)
    for s in synth_generate(spec)["train"]:
        length = len(s.target)
        assert spec.frames_min * length <= s.frames.shape[0] <= spec.frames_max * length
        row_runs = [k for k, _ in groupby(map(bytes, s.frames))]
        tok_runs = [k for k, _ in groupby(s.target)]
        assert len(row_runs) == len(tok_runs)


def test_invalid_spec_rejected():
    with pytest.raises(ValueError, match="vocab_size"):
        synth_generate(SynthSpec(vocab_size=4))
    with pytest.raises(ValueError, match="task"):
        synth_generate(SynthSpec(task="nope"))
