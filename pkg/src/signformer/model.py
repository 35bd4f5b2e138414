"""Signformer encoder-decoder: configuration, parameters, forward passes.

The encoder embeds frame features with one linear layer, adds sinusoidal
positions and runs ``enc_layers`` blocks of

    gloss attention (pre-LN residual) -> convolution module -> feed-forward

The decoder is a pre-LN transformer decoder whose cross attention can carry
a CoPE logit bias. All weights live in a flat ``{name: Tensor}`` mapping
ordered lexicographically by name.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import (
    ApeTable,
    CopeConfig,
    GlossAttentionConfig,
    ape_add,
    gloss_attention,
    linear,
    merge_heads,
    multi_head_attention,
    scaled_dot_attention,
    split_heads,
)
from .autodiff import Tensor

UNK_ID, PAD_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<unk>", "<pad>", "<bos>", "<eos>")

HIDDEN_SIZES = (16, 32, 64, 96, 128, 256)
CONV_STYLES = ("signformer", "conformer_original")


class ConfigError(ValueError):
    """Invalid model configuration; the message names the offending field."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``hidden`` above 256 is rejected. Hidden size 16 is allowed for the
    gradient-check configurations only.
    """

    hidden: int = 64
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    ff_dim: Optional[int] = None
    kernel: int = 31
    conv_expansion: int = 2
    use_cope: bool = False
    cope_gloss: bool = True
    cope_cross: bool = True
    cope_p_max: int = 128
    cope_cross_mode: str = "prefix"
    gloss_samples: int = 8
    gloss_radius: float = 16.0
    vocab: int = 2891
    feature_dim: int = 1024
    dropout: float = 0.1
    conv_style: str = "signformer"
    tie_output_embedding: bool = False
    use_ape: bool = True
    ape_scale: bool = True  # multiply decoder token embeddings by sqrt(hidden)
    max_positions: int = 512
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.ff_dim is None:
            self.ff_dim = 4 * self.hidden
        self.validate()

    def validate(self) -> None:
        def bad(name: str, why: str):
            raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        if self.hidden < 1 or self.hidden > 256:
            bad("hidden", "must be in [1, 256]")
        if self.hidden % 2:
            bad("hidden", "must be even")
        if self.heads < 1 or self.hidden % self.heads:
            bad("heads", f"must divide hidden={self.hidden}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            bad("kernel", "must be a positive odd number")
        for name in ("enc_layers", "dec_layers", "ff_dim", "conv_expansion", "gloss_samples", "cope_p_max"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.gloss_radius < 0:
            bad("gloss_radius", "must be >= 0")
        if self.vocab < len(RESERVED_TOKENS):
            bad("vocab", f"must be >= {len(RESERVED_TOKENS)}")
        if self.feature_dim < 1:
            bad("feature_dim", "must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            bad("dropout", "must be in [0, 1)")
        if self.conv_style not in CONV_STYLES:
            bad("conv_style", f"must be one of {CONV_STYLES}")
        if self.cope_cross_mode not in ("prefix", "suffix"):
            bad("cope_cross_mode", "must be prefix or suffix")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def gloss(self) -> GlossAttentionConfig:
        return GlossAttentionConfig(self.heads, self.gloss_samples, self.gloss_radius)

    @property
    def gloss_cope(self) -> Optional[CopeConfig]:
        return CopeConfig(self.cope_p_max, "prefix") if self.use_cope and self.cope_gloss else None

    @property
    def cross_cope(self) -> Optional[CopeConfig]:
        return CopeConfig(self.cope_p_max, self.cope_cross_mode) if self.use_cope and self.cope_cross else None

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@functools.lru_cache(maxsize=16)
def _ape(dim: int, t_max: int) -> ApeTable:
    return ApeTable.build(dim, t_max)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class _Spec:
    shape: tuple
    init: str  # xavier | normal | zeros | ones | offsets | uniform_k | buffer_zeros | buffer_ones
    fans: tuple = field(default=())


def parameter_specs(cfg: ModelConfig) -> dict:
    """Every tensor of the model in creation order (name -> _Spec)."""
    d, f, v = cfg.hidden, cfg.feature_dim, cfg.vocab
    specs: dict = {}

    def lin(name, n_in, n_out):
        specs[name + ".weight"] = _Spec((n_in, n_out), "xavier", (n_in, n_out))
        specs[name + ".bias"] = _Spec((n_out,), "zeros")

    def norm(name, n=d):
        specs[name + ".gain"] = _Spec((n,), "ones")
        specs[name + ".bias"] = _Spec((n,), "zeros")

    def attn(name, cope: bool):
        for proj in ("q", "k", "v", "o"):
            lin(f"{name}.{proj}", d, d)
        if cope:
            specs[name + ".cope_emb"] = _Spec((cfg.heads, cfg.cope_p_max + 1, cfg.head_dim), "normal")

    lin("enc.frame_proj", f, d)
    for i in range(cfg.enc_layers):
        p = f"enc.layers.{i}"
        norm(p + ".attn_norm")
        attn(p + ".gloss", cfg.gloss_cope is not None)
        specs[p + ".gloss.offsets"] = _Spec((cfg.heads, cfg.gloss_samples), "offsets")
        if cfg.conv_style == "signformer":
            e = cfg.conv_expansion * d
            norm(p + ".conv.norm_in")
            lin(p + ".conv.pw1", d, e)
            specs[p + ".conv.dw.weight"] = _Spec((e, cfg.kernel), "uniform_k")
            specs[p + ".conv.dw.bias"] = _Spec((e,), "zeros")
            lin(p + ".conv.pw2", e, d)
            norm(p + ".conv.norm_out")
        else:
            norm(p + ".conv.norm_in")
            lin(p + ".conv.pw1", d, 2 * d)
            specs[p + ".conv.dw.weight"] = _Spec((d, cfg.kernel), "uniform_k")
            specs[p + ".conv.dw.bias"] = _Spec((d,), "zeros")
            norm(p + ".conv.bn")
            specs[p + ".conv.bn.running_mean"] = _Spec((d,), "buffer_zeros")
            specs[p + ".conv.bn.running_var"] = _Spec((d,), "buffer_ones")
            lin(p + ".conv.pw2", d, d)
        norm(p + ".ff_norm")
        lin(p + ".ff.w1", d, cfg.ff_dim)
        lin(p + ".ff.w2", cfg.ff_dim, d)
    norm("enc.final_norm")

    specs["dec.embed.weight"] = _Spec((v, d), "normal")
    for i in range(cfg.dec_layers):
        p = f"dec.layers.{i}"
        norm(p + ".self_norm")
        attn(p + ".self_attn", False)
        norm(p + ".cross_norm")
        attn(p + ".cross_attn", cfg.cross_cope is not None)
        norm(p + ".ff_norm")
        lin(p + ".ff.w1", d, cfg.ff_dim)
        lin(p + ".ff.w2", cfg.ff_dim, d)
    norm("dec.final_norm")
    if not cfg.tie_output_embedding:
        specs["dec.out_proj.weight"] = _Spec((d, v), "xavier", (d, v))
    return specs


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dict:
    """Create all model tensors deterministically from ``seed``.

    Xavier-uniform projections, N(0, D^-1/2) embeddings, zero biases, unit
    gains, offsets evenly spanning the gloss window. The returned mapping is
    ordered by name; buffers (batch-norm statistics) have
    ``requires_grad=False``.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    out = {}
    for name, spec in parameter_specs(cfg).items():
        if spec.init == "xavier":
            bound = math.sqrt(6.0 / (spec.fans[0] + spec.fans[1]))
            arr = rng.uniform(-bound, bound, spec.shape)
        elif spec.init == "normal":
            arr = rng.normal(0.0, cfg.hidden ** -0.5, spec.shape)
        elif spec.init == "uniform_k":
            bound = 1.0 / math.sqrt(spec.shape[1])
            arr = rng.uniform(-bound, bound, spec.shape)
        elif spec.init == "offsets":
            arr = cfg.gloss.initial_offsets()
        elif spec.init in ("ones", "buffer_ones"):
            arr = np.ones(spec.shape)
        else:
            arr = np.zeros(spec.shape)
        trainable = not spec.init.startswith("buffer")
        out[name] = Tensor(arr.astype(np.float32), requires_grad=trainable, name=name)
    return {k: out[k] for k in sorted(out)}


def trainable(params: dict) -> dict:
    return {k: v for k, v in params.items() if v.requires_grad}


def runtime_param_count(params: dict) -> int:
    return sum(t.size for t in params.values() if t.requires_grad)


def cast_params(params: dict, dtype) -> dict:
    """Copies of ``params`` with a different float dtype (same grad flags)."""
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k) for k, v in params.items()}


def param_count(cfg: ModelConfig) -> tuple:
    """Closed-form trainable-parameter count.

    Returns:
        ``(total, breakdown)`` where ``breakdown`` maps component name to
        count.
    """
    d, f, v, ff, h = cfg.hidden, cfg.feature_dim, cfg.vocab, cfg.ff_dim, cfg.heads
    ln = 2 * d
    mha = 4 * (d * d + d)
    cope_table = h * (cfg.cope_p_max + 1) * cfg.head_dim
    ffn = (d * ff + ff) + (ff * d + d)
    if cfg.conv_style == "signformer":
        e = cfg.conv_expansion * d
        conv = 2 * ln + (d * e + e) + (e * cfg.kernel + e) + (e * d + d)
    else:
        conv = ln + (d * 2 * d + 2 * d) + (d * cfg.kernel + d) + ln + (d * d + d)
    gloss = mha + h * cfg.gloss_samples
    enc_cope = cope_table if cfg.gloss_cope is not None else 0
    dec_cope = cope_table if cfg.cross_cope is not None else 0
    breakdown = {
        "frame_embedding": f * d + d,
        "encoder_attention": cfg.enc_layers * (ln + gloss),
        "encoder_conv": cfg.enc_layers * conv,
        "encoder_ffn": cfg.enc_layers * (ln + ffn),
        "encoder_cope": cfg.enc_layers * enc_cope,
        "encoder_final_norm": ln,
        "token_embedding": v * d,
        "decoder_self_attention": cfg.dec_layers * (ln + mha),
        "decoder_cross_attention": cfg.dec_layers * (ln + mha),
        "decoder_ffn": cfg.dec_layers * (ln + ffn),
        "decoder_cope": cfg.dec_layers * dec_cope,
        "decoder_final_norm": ln,
        "output_projection": 0 if cfg.tie_output_embedding else d * v,
    }
    return sum(breakdown.values()), breakdown


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


@dataclass
class RunMode:
    """Dropout switch plus the generator that feeds it."""

    training: bool = False
    rng: Optional[np.random.Generator] = None


EVAL = RunMode()


def _norm(x: Tensor, params: dict, name: str, eps: float) -> Tensor:
    return ad.layer_norm(x, params[name + ".gain"], params[name + ".bias"], eps)


def _drop(x: Tensor, cfg: ModelConfig, mode: RunMode) -> Tensor:
    return ad.dropout(x, cfg.dropout, mode.rng, mode.training)


def feed_forward(x: Tensor, params: dict, prefix: str, cfg: ModelConfig, mode: RunMode = EVAL) -> Tensor:
    h = ad.relu6(linear(x, params, prefix + ".w1"))
    return linear(_drop(h, cfg, mode), params, prefix + ".w2")


def conv_module(x: Tensor, params: dict, prefix: str, cfg: ModelConfig, pad_mask=None, mode: RunMode = EVAL) -> Tensor:
    """Pointwise-depthwise-pointwise block wrapped in entry and exit LayerNorm.

    ``y = x + Dropout(LN_out(PW2(ReLU6(DW(ReLU6(PW1(LN_in(x))))))))``.
    """
    p = params
    h = _norm(x, p, prefix + ".norm_in", cfg.ln_eps)
    h = ad.relu6(ad.conv1d_pointwise(h, p[prefix + ".pw1.weight"], p[prefix + ".pw1.bias"]))
    h = ad.conv1d_depthwise(h, p[prefix + ".dw.weight"], p[prefix + ".dw.bias"], pad_mask)
    h = ad.relu6(h)
    h = ad.conv1d_pointwise(h, p[prefix + ".pw2.weight"], p[prefix + ".pw2.bias"])
    h = _norm(h, p, prefix + ".norm_out", cfg.ln_eps)
    return x + _drop(h, cfg, mode)


def conv_module_original(
    x: Tensor, params: dict, prefix: str, cfg: ModelConfig, pad_mask=None, mode: RunMode = EVAL
) -> Tensor:
    """Conformer convolution block, kept for the convolution ablation.

    ``y = x + PW2(Dropout(Swish(BN(DW(GLU(PW1(LN(x))))))))``. Batch norm uses
    batch statistics in training mode and running statistics otherwise.
    """
    p = params
    h = _norm(x, p, prefix + ".norm_in", cfg.ln_eps)
    h = ad.glu(ad.conv1d_pointwise(h, p[prefix + ".pw1.weight"], p[prefix + ".pw1.bias"]))
    h = ad.conv1d_depthwise(h, p[prefix + ".dw.weight"], p[prefix + ".dw.bias"], pad_mask)
    h = ad.batch_norm(
        h,
        p[prefix + ".bn.gain"],
        p[prefix + ".bn.bias"],
        p[prefix + ".bn.running_mean"].data,
        p[prefix + ".bn.running_var"].data,
        training=mode.training,
        mask=pad_mask,
    )
    h = _drop(ad.swish(h), cfg, mode)
    h = ad.conv1d_pointwise(h, p[prefix + ".pw2.weight"], p[prefix + ".pw2.bias"])
    return x + h


def encoder_layer(
    h: Tensor, params: dict, prefix: str, cfg: ModelConfig, pad_mask: np.ndarray, mode: RunMode = EVAL
) -> Tensor:
    lengths = pad_mask.sum(axis=-1).astype(np.int64)
    a = gloss_attention(_norm(h, params, prefix + ".attn_norm", cfg.ln_eps), params, prefix + ".gloss",
                        cfg.gloss, lengths, cfg.gloss_cope)
    h = h + _drop(a, cfg, mode)
    conv = conv_module if cfg.conv_style == "signformer" else conv_module_original
    h = conv(h, params, prefix + ".conv", cfg, pad_mask, mode)
    f = feed_forward(_norm(h, params, prefix + ".ff_norm", cfg.ln_eps), params, prefix + ".ff", cfg, mode)
    return h + _drop(f, cfg, mode)


def _embed_positions(x: Tensor, cfg: ModelConfig, scale: bool) -> Tensor:
    # token embeddings start near N(0, 1/D) and get the sqrt(D) boost; projected
    # frame features are already unit scale and would swamp the sinusoids
    if not cfg.use_ape:
        return x * math.sqrt(cfg.hidden) if scale else x
    return ape_add(x, _ape(cfg.hidden, cfg.max_positions), None if scale else 1.0)


def encoder_forward(frames, params: dict, cfg: ModelConfig, pad_mask: np.ndarray, mode: RunMode = EVAL) -> Tensor:
    """Encode ``frames[B, T, F]`` into ``[B, T, hidden]``.

    ``pad_mask[B, T]`` marks real frames with 1. Outputs at padded frames are
    unspecified and must be masked by consumers.
    """
    frames = ad.as_tensor(frames)
    if frames.ndim == 2:
        frames = frames.reshape(1, *frames.shape)
    if frames.shape[-1] != cfg.feature_dim:
        raise ad.ShapeError(f"encoder: feature dim {frames.shape[-1]} != configured feature_dim {cfg.feature_dim}")
    pad_mask = np.asarray(pad_mask, dtype=np.float32).reshape(frames.shape[0], frames.shape[1])
    h = linear(frames, params, "enc.frame_proj")
    h = _drop(_embed_positions(h, cfg, False), cfg, mode)
    for i in range(cfg.enc_layers):
        h = encoder_layer(h, params, f"enc.layers.{i}", cfg, pad_mask, mode)
    return _norm(h, params, "enc.final_norm", cfg.ln_eps)


def decoder_layer(
    e: Tensor,
    enc_out: Tensor,
    params: dict,
    prefix: str,
    cfg: ModelConfig,
    src_pad_mask: np.ndarray,
    mode: RunMode = EVAL,
) -> Tensor:
    length = e.shape[1]
    causal = np.tril(np.ones((length, length), dtype=bool))
    xn = _norm(e, params, prefix + ".self_norm", cfg.ln_eps)
    s = multi_head_attention(xn, xn, params, prefix + ".self_attn", cfg.heads, causal)
    e = e + _drop(s, cfg, mode)
    keep = np.asarray(src_pad_mask, dtype=bool)[:, None, None, :]
    xn = _norm(e, params, prefix + ".cross_norm", cfg.ln_eps)
    c = multi_head_attention(xn, enc_out, params, prefix + ".cross_attn", cfg.heads, keep, cfg.cross_cope, keep)
    e = e + _drop(c, cfg, mode)
    f = feed_forward(_norm(e, params, prefix + ".ff_norm", cfg.ln_eps), params, prefix + ".ff", cfg, mode)
    return e + _drop(f, cfg, mode)


def decoder_hidden(
    tokens, enc_out: Tensor, params: dict, cfg: ModelConfig, src_pad_mask: np.ndarray, mode: RunMode = EVAL
) -> Tensor:
    """Final-normalised decoder states ``[B, L, hidden]``."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.size and (ids.max() >= cfg.vocab or ids.min() < 0):
        bad = ids[(ids >= cfg.vocab) | (ids < 0)][0]
        raise IndexError(f"decoder: token id {bad} outside vocabulary of size {cfg.vocab}")
    e = ad.embedding_lookup(params["dec.embed.weight"], ids)
    e = _drop(_embed_positions(e, cfg, cfg.ape_scale), cfg, mode)
    for i in range(cfg.dec_layers):
        e = decoder_layer(e, enc_out, params, f"dec.layers.{i}", cfg, src_pad_mask, mode)
    return _norm(e, params, "dec.final_norm", cfg.ln_eps)


def output_logits(h: Tensor, params: dict, cfg: ModelConfig) -> Tensor:
    if cfg.tie_output_embedding:
        return h @ params["dec.embed.weight"].swapaxes(0, 1)
    return h @ params["dec.out_proj.weight"]


def decoder_forward(
    tokens, enc_out: Tensor, params: dict, cfg: ModelConfig, src_pad_mask: np.ndarray, mode: RunMode = EVAL
) -> Tensor:
    """Teacher-forced logits ``[B, L, vocab]``; ``tokens`` start with BOS."""
    return output_logits(decoder_hidden(tokens, enc_out, params, cfg, src_pad_mask, mode), params, cfg)


# ---------------------------------------------------------------------------
# convenience wrapper
# ---------------------------------------------------------------------------


class Signformer:
    """A configuration bound to its parameters, with decoding hooks."""

    bos_id = BOS_ID
    eos_id = EOS_ID

    def __init__(self, cfg: ModelConfig, params: Optional[dict] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab

    def encode(self, frames, pad_mask=None, mode: RunMode = EVAL) -> Tensor:
        frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames, dtype=np.float32)
        if frames.ndim == 2:
            frames = frames[None]
        if pad_mask is None:
            pad_mask = np.ones(frames.shape[:2], dtype=np.float32)
        return encoder_forward(frames, self.params, self.cfg, pad_mask, mode)

    def logits(self, tokens, enc_out: Tensor, pad_mask, mode: RunMode = EVAL) -> Tensor:
        return decoder_forward(tokens, enc_out, self.params, self.cfg, pad_mask, mode)

    # decoding protocol -------------------------------------------------
    def start(self, frames) -> "DecodeState":
        """Encode one ``[T, F]`` sequence for step-wise decoding."""
        with ad.no_grad():
            frames = np.asarray(frames, dtype=np.float32)
            mask = np.ones((1, frames.shape[0]), dtype=np.float32)
            enc = self.encode(frames[None], mask)
            cross = []
            for i in range(self.cfg.dec_layers):
                p = f"dec.layers.{i}.cross_attn"
                cross.append((split_heads(linear(enc, self.params, p + ".k"), self.cfg.heads),
                              split_heads(linear(enc, self.params, p + ".v"), self.cfg.heads)))
        return DecodeState(enc, mask, cross)

    def next_log_probs(self, state: "DecodeState", prefixes) -> np.ndarray:
        """Log-probabilities ``[n, V]`` of the token after each prefix.

        All prefixes must have the same length and each must extend a prefix
        seen in the previous call (or be ``[BOS]``). Self-attention keys and
        values of earlier positions come from ``state``'s cache, so one step
        costs time linear in the prefix length.
        """
        ids = np.asarray(prefixes, dtype=np.int64)
        n, length = ids.shape
        cfg, params = self.cfg, self.params
        if ids.max() >= cfg.vocab or ids.min() < 0:
            raise IndexError(f"decoder: token id outside vocabulary of size {cfg.vocab}")
        parents = [state.cache[tuple(row[:-1])] for row in ids.tolist()]
        with ad.no_grad():
            x = ad.embedding_lookup(params["dec.embed.weight"], ids[:, -1:])
            if cfg.use_ape:
                scale = math.sqrt(cfg.hidden) if cfg.ape_scale else 1.0
                x = x * scale + Tensor(_ape(cfg.hidden, cfg.max_positions).table[length - 1:length].astype(x.dtype))
            elif cfg.ape_scale:
                x = x * math.sqrt(cfg.hidden)
            new_kv = []
            for i in range(cfg.dec_layers):
                pre = f"dec.layers.{i}"
                xn = _norm(x, params, pre + ".self_norm", cfg.ln_eps)
                q = split_heads(linear(xn, params, pre + ".self_attn.q"), cfg.heads)
                k = split_heads(linear(xn, params, pre + ".self_attn.k"), cfg.heads)
                v = split_heads(linear(xn, params, pre + ".self_attn.v"), cfg.heads)
                if length > 1:
                    k = ad.concat([Tensor(np.stack([par[i][0] for par in parents])), k], axis=2)
                    v = ad.concat([Tensor(np.stack([par[i][1] for par in parents])), v], axis=2)
                new_kv.append((k.data, v.data))
                ctx = scaled_dot_attention(q, k, v)
                x = x + linear(merge_heads(ctx), params, pre + ".self_attn.o")
                xn = _norm(x, params, pre + ".cross_norm", cfg.ln_eps)
                q = split_heads(linear(xn, params, pre + ".cross_attn.q"), cfg.heads)
                ke, ve = state.cross[i]
                emb = params[pre + ".cross_attn.cope_emb"] if cfg.cross_cope is not None else None
                ctx = scaled_dot_attention(q, ke, ve, None, emb, cfg.cross_cope)
                x = x + linear(merge_heads(ctx), params, pre + ".cross_attn.o")
                x = x + feed_forward(_norm(x, params, pre + ".ff_norm", cfg.ln_eps), params, pre + ".ff", cfg)
            h = _norm(x, params, "dec.final_norm", cfg.ln_eps)
            logits = output_logits(h, params, cfg).data[:, 0, :].astype(np.float64)
        for j, row in enumerate(ids.tolist()):
            state.cache[tuple(row)] = [(kv[0][j], kv[1][j]) for kv in new_kv]
        m = logits.max(axis=-1, keepdims=True)
        return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))

    def full_log_probs(self, state: "DecodeState", prefixes) -> np.ndarray:
        """Reference for :meth:`next_log_probs` that re-runs the whole prefix."""
        ids = np.asarray(prefixes, dtype=np.int64)
        n = ids.shape[0]
        with ad.no_grad():
            enc_n = Tensor(np.broadcast_to(state.enc.data, (n,) + state.enc.shape[1:]))
            mask_n = np.broadcast_to(state.mask, (n, state.mask.shape[1]))
            h = decoder_hidden(ids, enc_n, self.params, self.cfg, mask_n)
            logits = output_logits(h[:, -1:, :], self.params, self.cfg).data[:, 0, :].astype(np.float64)
        m = logits.max(axis=-1, keepdims=True)
        return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


@dataclass
class DecodeState:
    """Encoder output of one sequence plus per-prefix self-attention caches."""

    enc: Tensor
    mask: np.ndarray
    cross: list  # per decoder layer: (keys, values) as [1, H, T, dh]
    cache: dict = field(default_factory=lambda: {(): []})


# ---------------------------------------------------------------------------
# analytic compute cost
# ---------------------------------------------------------------------------


def forward_macs(cfg: ModelConfig, src_len: int, tgt_len: int) -> dict:
    """Multiply-accumulate counts for one teacher-forced forward pass.

    Matmuls count ``m*n*k``; the depthwise convolution counts
    ``T * channels * K``. Gloss attention is linear in ``T`` (K samples per
    query). Normalisations and activations are ignored.
    """
    d, t, l, v, ff = cfg.hidden, src_len, tgt_len, cfg.vocab, cfg.ff_dim
    kn = cfg.gloss_samples
    p_rows = cfg.cope_p_max + 1
    enc = t * cfg.feature_dim * d
    per_layer = 4 * t * d * d + 2 * t * kn * d
    if cfg.gloss_cope is not None:
        per_layer += t * p_rows * d
    if cfg.conv_style == "signformer":
        e = cfg.conv_expansion * d
        per_layer += t * d * e + t * e * cfg.kernel + t * e * d
    else:
        per_layer += t * d * 2 * d + t * d * cfg.kernel + t * d * d
    per_layer += 2 * t * d * ff
    enc += cfg.enc_layers * per_layer
    dec_layer = 4 * l * d * d + 2 * l * l * d  # self attention
    dec_layer += 2 * l * d * d + 2 * t * d * d + 2 * l * t * d  # cross attention
    if cfg.cross_cope is not None:
        dec_layer += l * p_rows * d
    dec_layer += 2 * l * d * ff
    dec = cfg.dec_layers * dec_layer + l * d * v
    return {"encoder": enc, "decoder": dec, "total": enc + dec}
