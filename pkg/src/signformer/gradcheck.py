"""Finite-difference gradient suite over every op and composite layer.

Each case builds a function and float64 inputs at hidden size 16. Ops are
looked up on their modules at call time, so a patched backward rule is
picked up (and caught) without re-registering anything.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import attention as att
from . import autodiff as ad
from . import model as mdl
from . import training as trn
from .autodiff import Tensor

D = 16
HEADS = 4


ZERO_FLOOR = 1e-6  # denominator floor for inputs with identically zero gradient
KINK_MARGIN = 5e-3  # composite inputs must sit this far from every kink
MAX_TRIES = 200


@dataclass
class GradCase:
    name: str
    kind: str  # "op" or "layer"
    build: Callable[[np.random.Generator], tuple]  # -> (fn, inputs, names)
    max_coords: Optional[int] = None
    smooth: bool = False  # redraw inputs until they clear every kink


@dataclass
class CaseResult:
    name: str
    kind: str
    max_error: float
    worst_input: str
    passed: bool
    seconds: float


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from(rng, shape, kinks, lo, hi, gap=0.05):
    """Uniform samples in ``[lo, hi]`` kept ``gap`` away from each kink."""
    x = rng.uniform(lo, hi, shape)
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, gap, -gap) * 2
    return x


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------


def _unary(op_name: str, lo=-2.0, hi=2.0, kinks=()):
    def build(rng):
        x = _away_from(rng, (3, 5), kinks, lo, hi)
        return (lambda a: getattr(ad, op_name)(a)), [_t(x)], ["x"]

    return build


def _binary(op_name: str):
    def build(rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4,))
        if op_name == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        return (lambda x, y: getattr(ad, op_name)(x, y)), [_t(a), _t(b)], ["a", "b"]

    return build


def _matmul(rng):
    return (lambda a, b: ad.matmul(a, b)), [_t(rng.standard_normal((2, 3, 4))), _t(rng.standard_normal((4, 5)))], \
        ["a", "b"]


def _reductions(rng):
    def f(x):
        return ad.tsum(x, axis=1) * 0.5 + ad.mean(x, axis=0, keepdims=True).sum()

    return f, [_t(rng.standard_normal((3, 4)))], ["x"]


def _shape_ops(rng):
    def f(x):
        y = ad.reshape(x, (4, 6))
        return ad.transpose(y) @ ad.swapaxes(ad.reshape(x, (6, 4)), 0, 1)

    return f, [_t(rng.standard_normal((2, 3, 4)))], ["x"]


def _getitem(rng):
    idx = np.array([0, 2, 2, 1])

    def f(x):
        return ad.getitem(x, (slice(None), idx)) + ad.getitem(x, (slice(None), slice(1, 5)))

    return f, [_t(rng.standard_normal((3, 5)))], ["x"]


def _concat_where(rng):
    mask = rng.random((3, 4)) > 0.5

    def f(a, b):
        return ad.where(mask, ad.concat([a, b], axis=0)[:3], b[:3] * 2.0)

    return f, [_t(rng.standard_normal((2, 4))), _t(rng.standard_normal((4, 4)))], ["a", "b"]


def _clamp(rng):
    x = _away_from(rng, (4, 5), (-1.0, 1.0), -2, 2)
    return (lambda a: ad.clamp(a, -1.0, 1.0)), [_t(x)], ["x"]


def _cumsum(rng):
    def f(a):
        return ad.cumsum(a, axis=-1) * ad.cumsum(a, axis=-1, reverse=True)

    return f, [_t(rng.standard_normal((3, 5)))], ["x"]


def _glu(rng):
    return (lambda a: ad.glu(a, axis=-1)), [_t(rng.standard_normal((3, 8)))], ["x"]


def _softmax(rng):
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 3:] = False
    mask[2, :] = False  # fully masked row

    def f(a):
        return ad.softmax(a, axis=-1, mask=mask) * 3.0 + ad.log_softmax(a, axis=-1)

    return f, [_t(rng.standard_normal((3, 5)))], ["x"]


def _layer_norm(rng):
    def f(x, g, b):
        return ad.layer_norm(x, g, b)

    return f, [_t(rng.standard_normal((2, 3, D))), _t(1 + 0.1 * rng.standard_normal(D)),
               _t(0.1 * rng.standard_normal(D))], ["x", "gain", "bias"]


def _batch_norm(training: bool):
    def build(rng):
        mask = np.ones((3, 6))
        mask[1, 4:] = 0.0
        rm, rv = rng.standard_normal(D) * 0.1, 1.0 + rng.random(D)

        def f(x, g, b):
            return ad.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training, mask=mask)

        return f, [_t(rng.standard_normal((3, 6, D))), _t(1 + 0.1 * rng.standard_normal(D)),
                   _t(0.1 * rng.standard_normal(D))], ["x", "gain", "bias"]

    return build


def _dropout(rng):
    def f(x):
        return ad.dropout(x, 0.3, np.random.default_rng(7), True)

    return f, [_t(rng.standard_normal((4, 6)))], ["x"]


def _pointwise(rng):
    return (lambda x, w, b: ad.conv1d_pointwise(x, w, b)), [
        _t(rng.standard_normal((2, 5, 6))), _t(rng.standard_normal((6, D))), _t(rng.standard_normal(D))
    ], ["x", "w", "b"]


def _depthwise(rng):
    mask = np.ones((2, 7))
    mask[1, 5:] = 0.0

    def f(x, w, b):
        return ad.conv1d_depthwise(x, w, b, mask)

    return f, [_t(rng.standard_normal((2, 7, 6))), _t(rng.standard_normal((6, 5))), _t(rng.standard_normal(6))], \
        ["x", "w", "b"]


def _embedding(rng):
    ids = np.array([[1, 3, 3], [0, 2, 4]])
    return (lambda tab: ad.embedding_lookup(tab, ids)), [_t(rng.standard_normal((5, 4)))], ["table"]


def _interp(rng):
    pos = rng.uniform(0.1, 4.9, (2, 3, 4))
    pos = np.floor(pos) + np.clip(pos - np.floor(pos), 0.1, 0.9)  # keep off integer kinks
    upper = np.array([4.0, 3.0]).reshape(2, 1, 1)
    upper_pos = np.minimum(pos, upper - 0.2)

    def f(seq, p):
        return ad.interp_gather(seq, p, upper)

    return f, [_t(rng.standard_normal((2, 3, 6, 2))), _t(upper_pos)], ["seq", "pos"]


def _cross_entropy(rng):
    tgt = np.array([[4, 1, 2], [0, 3, 1]])

    def f(z):
        return trn.cross_entropy(z, tgt, pad_id=1, smoothing=0.1)

    return f, [_t(rng.standard_normal((2, 3, 5)))], ["logits"]


# ---------------------------------------------------------------------------
# attention pieces
# ---------------------------------------------------------------------------


def _sdpa(rng):
    keep = np.ones((2, 1, 3, 4), dtype=bool)
    keep[1, :, :, 3] = False

    def f(q, k, v):
        return att.scaled_dot_attention(q, k, v, keep)

    shp = (2, HEADS, 3, 4)
    return f, [_t(rng.standard_normal(shp)), _t(rng.standard_normal((2, HEADS, 4, 4))),
               _t(rng.standard_normal((2, HEADS, 4, 4)))], ["q", "k", "v"]


def _cope_positions(rng):
    def f(q, k):
        return att.cope_positions(q, k, "prefix", 4.0) + att.cope_positions(q, k, "suffix", 40.0)

    return f, [_t(rng.standard_normal((2, 3, 4))), _t(rng.standard_normal((2, 5, 4)))], ["q", "k"]


def _cope_bias(rng):
    pos = rng.uniform(0.1, 5.9, (2, 3, 4))
    pos = np.floor(pos) + np.clip(pos - np.floor(pos), 0.1, 0.9)

    def f(q, p, e):
        return att.cope_logit_bias(q, p, e)

    return f, [_t(rng.standard_normal((2, 3, 4))), _t(pos), _t(rng.standard_normal((7, 4)))], ["q", "pos", "emb"]


_RELU6_FEEDS = (".conv.pw1.bias", ".conv.dw.bias", ".ff.w1.bias")


def _smooth_params(params: dict, rng: np.random.Generator) -> None:
    """Move a fresh initialisation away from its non-smooth points.

    Offsets leave the integer grid, biases feeding ReLU6 move to the middle
    of its linear range and the remaining biases and gains get jitter.
    """
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if name.endswith(".offsets"):
            p.data += 0.37
        elif name.endswith(_RELU6_FEEDS):
            p.data += 3.0 + 0.1 * rng.standard_normal(p.shape)
        elif name.endswith((".bias", ".gain")):
            p.data += 0.1 * rng.standard_normal(p.shape)


def _param_case(cfg: mdl.ModelConfig, prefix_filter: Callable[[str], bool], body, seed: int = 0,
                max_coords: Optional[int] = None):
    """Check ``body(params, x)`` w.r.t. ``x`` and every parameter kept by the filter."""

    def build(rng):
        params = mdl.cast_params(mdl.init_parameters(cfg, seed), np.float64)
        _smooth_params(params, rng)
        names = [n for n in params if params[n].requires_grad and prefix_filter(n)]
        x = rng.standard_normal((2, 6, cfg.hidden))

        def f(xt, *ws):
            ps = dict(params)
            ps.update(zip(names, ws))
            return body(ps, xt)

        return f, [_t(x)] + [_t(params[n].data) for n in names], ["x"] + names

    return build


def _tiny_cfg(**kw) -> mdl.ModelConfig:
    base = dict(hidden=D, heads=HEADS, enc_layers=1, dec_layers=1, ff_dim=2 * D, kernel=5, vocab=11,
                feature_dim=8, dropout=0.0, gloss_samples=4, gloss_radius=3.0, cope_p_max=8)
    base.update(kw)
    return mdl.ModelConfig(**base)


_MASK = np.array([[1, 1, 1, 1, 1, 1], [1, 1, 1, 1, 0, 0]], dtype=np.float64)
_LENGTHS = _MASK.sum(axis=1).astype(np.int64)


def _conv_case(style: str):
    cfg = _tiny_cfg(conv_style=style)
    fn = mdl.conv_module if style == "signformer" else mdl.conv_module_original
    return _param_case(cfg, lambda n: n.startswith("enc.layers.0.conv."),
                       lambda ps, x: fn(x, ps, "enc.layers.0.conv", cfg, _MASK))


def _gloss_case(cope: bool):
    cfg = _tiny_cfg(use_cope=cope)
    return _param_case(cfg, lambda n: n.startswith("enc.layers.0.gloss."),
                       lambda ps, x: att.gloss_attention(x, ps, "enc.layers.0.gloss", cfg.gloss, _LENGTHS,
                                                         cfg.gloss_cope))


def _mha_case(cope: bool):
    cfg = _tiny_cfg(use_cope=cope)
    keep = _MASK.astype(bool)[:, None, None, :]
    copec = cfg.cross_cope

    def body(ps, x):
        return att.multi_head_attention(x[:, :4], x, ps, "dec.layers.0.cross_attn", HEADS, keep, copec, keep)

    return _param_case(cfg, lambda n: n.startswith("dec.layers.0.cross_attn."), body)


def _encoder_layer_case(cope: bool):
    cfg = _tiny_cfg(use_cope=cope)
    return _param_case(cfg, lambda n: n.startswith("enc.layers.0."),
                       lambda ps, x: mdl.encoder_layer(x, ps, "enc.layers.0", cfg, _MASK), max_coords=12)


def _decoder_layer_case(cope: bool):
    cfg = _tiny_cfg(use_cope=cope)

    def body(ps, x):
        return mdl.decoder_layer(x[:, :4], x, ps, "dec.layers.0", cfg, _MASK)

    return _param_case(cfg, lambda n: n.startswith("dec.layers.0."), body)


def _full_model_case(cope: bool):
    cfg = _tiny_cfg(use_cope=cope)

    def build(rng):
        params = mdl.cast_params(mdl.init_parameters(cfg, 1), np.float64)
        _smooth_params(params, rng)
        names = [n for n in params if params[n].requires_grad]
        frames = rng.standard_normal((2, 6, cfg.feature_dim))
        tgt_in = np.array([[2, 5, 6, 7], [2, 8, 9, 1]])
        tgt_out = np.array([[5, 6, 7, 3], [8, 9, 3, 1]])

        def f(*ws):
            ps = dict(params)
            ps.update(zip(names, ws))
            enc = mdl.encoder_forward(frames, ps, cfg, _MASK)
            logits = mdl.decoder_forward(tgt_in, enc, ps, cfg, _MASK)
            return trn.cross_entropy(logits, tgt_out, mdl.PAD_ID)

        return f, [_t(params[n].data) for n in names], names

    return build


CASES: List[GradCase] = [
    GradCase("add", "op", _binary("add")),
    GradCase("sub", "op", _binary("sub")),
    GradCase("mul", "op", _binary("mul")),
    GradCase("div", "op", _binary("div")),
    GradCase("neg", "op", _unary("neg")),
    GradCase("exp", "op", _unary("exp")),
    GradCase("log", "op", _unary("log", 0.3, 3.0)),
    GradCase("matmul", "op", _matmul),
    GradCase("sum_mean", "op", _reductions),
    GradCase("reshape_transpose", "op", _shape_ops),
    GradCase("getitem", "op", _getitem),
    GradCase("concat_where", "op", _concat_where),
    GradCase("clamp", "op", _clamp),
    GradCase("cumsum", "op", _cumsum),
    GradCase("sigmoid", "op", _unary("sigmoid", -4, 4)),
    GradCase("relu6", "op", _unary("relu6", -2, 8, kinks=(0.0, 6.0))),
    GradCase("swish", "op", _unary("swish", -4, 4)),
    GradCase("glu", "op", _glu),
    GradCase("softmax", "op", _softmax),
    GradCase("layer_norm", "op", _layer_norm),
    GradCase("batch_norm_frozen", "op", _batch_norm(False)),
    GradCase("batch_norm_batch_stats", "op", _batch_norm(True)),
    GradCase("dropout", "op", _dropout),
    GradCase("conv1d_pointwise", "op", _pointwise),
    GradCase("conv1d_depthwise", "op", _depthwise),
    GradCase("embedding_lookup", "op", _embedding),
    GradCase("interp_gather", "op", _interp),
    GradCase("cross_entropy", "op", _cross_entropy),
    GradCase("scaled_dot_attention", "op", _sdpa),
    GradCase("cope_positions", "op", _cope_positions),
    GradCase("cope_logit_bias", "op", _cope_bias),
    GradCase("conv_module", "layer", _conv_case("signformer"), smooth=True),
    GradCase("conv_module_original", "layer", _conv_case("conformer_original"), smooth=True),
    GradCase("gloss_attention", "layer", _gloss_case(False), smooth=True),
    GradCase("gloss_attention_cope", "layer", _gloss_case(True), smooth=True),
    GradCase("cross_attention", "layer", _mha_case(False), smooth=True),
    GradCase("cross_attention_cope", "layer", _mha_case(True), smooth=True),
    GradCase("encoder_layer", "layer", _encoder_layer_case(False), max_coords=12, smooth=True),
    GradCase("encoder_layer_cope", "layer", _encoder_layer_case(True), max_coords=12, smooth=True),
    GradCase("decoder_layer", "layer", _decoder_layer_case(False), max_coords=12, smooth=True),
    GradCase("decoder_layer_cope", "layer", _decoder_layer_case(True), max_coords=12, smooth=True),
    GradCase("tiny_model", "layer", _full_model_case(False), max_coords=6, smooth=True),
    GradCase("tiny_model_cope", "layer", _full_model_case(True), max_coords=6, smooth=True),
]


def kink_margin(fn, inputs) -> float:
    """Distance of the nearest non-smooth point hit by one forward pass.

    Looks at ReLU6 inputs (kinks at 0 and 6) and interpolation positions
    (kinks at integers). Exact zeros and exact integers are skipped: they
    come from masking and stay put under any perturbation.
    """
    margin = np.inf
    with ad.Tape() as tape:
        fn(*inputs)
        for node in tape.nodes:
            if node.op == "relu6":
                x = node.inputs[0].data
                d = np.minimum(np.abs(x), np.abs(x - 6.0))[x != 0.0]
            elif node.op == "interp_gather":
                p = node.inputs[1].data
                d = np.abs(p - np.round(p))[p != np.round(p)]
            else:
                continue
            if d.size:
                margin = min(margin, float(d.min()))
        tape.clear()
    return margin


def build_case(case: GradCase, seed: int = 0) -> tuple:
    """Inputs for ``case``; smooth cases take the first draw clearing all kinks."""
    if not case.smooth:
        return case.build(np.random.default_rng(seed))
    for attempt in range(MAX_TRIES):
        built = case.build(np.random.default_rng([seed, attempt]))
        if kink_margin(built[0], built[1]) >= KINK_MARGIN:
            return built
    raise RuntimeError(f"{case.name}: no input draw cleared the kink margin")


def run_case(case: GradCase, h: float = 1e-3, tol: float = 1e-3, seed: int = 0) -> CaseResult:
    start = time.perf_counter()
    fn, inputs, names = build_case(case, seed)
    try:
        report = ad.grad_check(fn, inputs, h=h, tol=tol, max_coords=case.max_coords, seed=seed, names=names,
                               floor=ZERO_FLOOR)
        worst = max(report.errors, key=report.errors.get)
        err = report.max_error
    except Exception as exc:  # a broken rule may raise instead of returning a wrong value
        worst, err = f"{type(exc).__name__}: {exc}", float("inf")
    return CaseResult(case.name, case.kind, err, worst, err <= tol, time.perf_counter() - start)


def run_suite(names: Optional[Sequence[str]] = None, h: float = 1e-3, tol: float = 1e-3,
              seed: int = 0) -> List[CaseResult]:
    """Run every registered case (or just ``names``)."""
    cases = CASES if names is None else [c for c in CASES if c.name in set(names)]
    return [run_case(c, h, tol, seed) for c in cases]


def format_report(results: Sequence[CaseResult]) -> str:
    lines = [f"{'case':<26}{'kind':<7}{'max_rel_err':>12}  status  worst_input"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<26}{r.kind:<7}{r.max_error:>12.3e}  {status:<6}  {r.worst_input}")
    failed = [r.name for r in results if not r.passed]
    lines.append(f"passed {len(results) - len(failed)}/{len(results)}" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
