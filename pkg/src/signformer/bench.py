"""CPU latency benchmark for end-to-end translation of one sequence."""

from __future__ import annotations

import time
from typing import Optional

import numpy as np

from .decoding import beam_search
from .model import Signformer, forward_macs, param_count


def decode_macs(cfg, src_len: int, out_len: int, beam: int) -> int:
    """Analytic MACs of encoding once and decoding ``out_len`` cached steps.

    Step ``s`` runs every live hypothesis through the decoder at one new
    position whose self-attention spans ``s`` cached positions; the
    cross-attention keys and values are projected once per sequence.
    """
    d, ff, v, t = cfg.hidden, cfg.ff_dim, cfg.vocab, src_len
    p_rows = cfg.cope_p_max + 1
    total = forward_macs(cfg, src_len, 1)["encoder"]
    total += cfg.dec_layers * 2 * t * d * d  # cross-attention keys/values
    for step in range(1, out_len + 1):
        per = 4 * d * d + 2 * step * d  # self attention, one query
        per += 2 * d * d + 2 * t * d  # cross attention query/output, one query
        if cfg.cross_cope is not None:
            per += p_rows * d
        per += 2 * d * ff
        total += beam * (cfg.dec_layers * per + d * v)
    return total


def bench_translate(
    model: Signformer,
    t: int = 64,
    repeats: int = 10,
    warmup: int = 3,
    beam: int = 5,
    alpha: float = 1.0,
    max_len: int = 60,
    seed: int = 0,
    frames: Optional[np.ndarray] = None,
) -> dict:
    """Time ``repeats`` full translations of one ``T``-frame sequence.

    At least three warmup runs are made and excluded. Frames are seeded Gaussian features unless
    given. Returns latency statistics in milliseconds plus analytic MACs.
    """
    if t < 1:
        raise ValueError(f"T must be >= 1, got {t}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    warmup = max(warmup, 3)
    cfg = model.cfg
    if frames is None:
        frames = np.random.default_rng(seed).standard_normal((t, cfg.feature_dim)).astype(np.float32)
    out = []
    for _ in range(warmup):
        out = beam_search(model, frames, beam, alpha, max_len)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        out = beam_search(model, frames, beam, alpha, max_len)
        times.append((time.perf_counter() - start) * 1e3)
    ms = np.asarray(times)
    out_len = len(out) + 1  # EOS (or the final forced step) is decoded too
    return {
        "T": t,
        "beam": beam,
        "repeats": repeats,
        "warmup": warmup,
        "median_ms": float(np.median(ms)),
        "p95_ms": float(np.percentile(ms, 95)),
        "mean_ms": float(ms.mean()),
        "output_len": len(out),
        "params": param_count(cfg)[0],
        "encoder_macs": forward_macs(cfg, t, 1)["encoder"],
        "macs": decode_macs(cfg, t, min(out_len, max_len), beam),
    }
