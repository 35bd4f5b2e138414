"""Command-line entry point: ``signformer <command> ...``.

Exit codes: 0 success, 1 usage or input error, 2 training divergence.
Reports are line-oriented ``key=value`` text.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as rc
from .bench import bench_translate
from .checkpoint import CheckpointMismatch, load_checkpoint
from .data import (
    FeatureDataset,
    FormatError,
    SynthSpec,
    make_batches,
    read_features,
    read_vocab,
    synth_generate,
    write_features,
    write_vocab,
)
from .decoding import translate_batch
from .metrics import bleu4, information_density, netscore, rouge_l
from .model import ConfigError, Signformer, forward_macs, param_count, runtime_param_count
from .training import DivergenceError, Trainer, train_loop

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2


class InputError(Exception):
    """Reported on stderr with exit code 1."""


def _emit(stream, **fields) -> None:
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k}={v}", file=stream)


def _load_run_config(args) -> rc.RunConfig:
    return rc.load(getattr(args, "config", None), getattr(args, "preset", None), getattr(args, "set", None) or [])


def _load_model(path) -> Signformer:
    ck = load_checkpoint(path)
    return Signformer(ck.config, ck.params)


def _read_dataset(path, vocab=None) -> FeatureDataset:
    if not Path(path).exists():
        raise InputError(f"missing file: {path}")
    return read_features(path, vocab)


def _check_features(model: Signformer, ds: FeatureDataset) -> None:
    if len(ds) and ds.feature_dim != model.cfg.feature_dim:
        raise InputError(f"feature dimension {ds.feature_dim} does not match the model's {model.cfg.feature_dim}")


def _decode_all(model: Signformer, ds: FeatureDataset, beam: int, alpha: float, max_len: int) -> List[List[int]]:
    hyps: List[List[int]] = []
    for batch in make_batches(ds, 32):
        hyps.extend(translate_batch(model, batch.frames, batch.src_mask, beam, alpha, max_len))
    return hyps


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args, out) -> int:
    cfg = _load_run_config(args)
    data = Path(args.data)
    for name in ("train.sgnf", "dev.sgnf", "vocab.txt"):
        if not (data / name).exists():
            raise InputError(f"missing file: {data / name}")
    vocab = read_vocab(data / "vocab.txt")
    train_set = read_features(data / "train.sgnf", vocab)
    dev_set = read_features(data / "dev.sgnf", vocab)
    if len(train_set) == 0:
        raise InputError(f"{data / 'train.sgnf'} holds no sequences")
    # the data fixes the vocabulary and feature sizes
    model_cfg = cfg.model.replace(vocab=len(vocab), feature_dim=train_set.feature_dim)
    train_set.validate()
    run = rc.RunConfig(model_cfg, cfg.train)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(run.to_text(), encoding="utf-8")
    metrics = out_dir / "metrics.jsonl"
    if metrics.exists() and not args.resume:
        metrics.unlink()
    model = Signformer(model_cfg, seed=cfg.train.seed)
    trainer = Trainer(model, cfg.train, train_set)
    if args.resume:
        ck = load_checkpoint(args.resume, model_cfg)
        model.params = ck.params
        trainer.restore(ck.optimizer, ck.progress)
    print(run.to_text(), end="", file=out)
    print(f"optimizer={trainer.optimizer.kind}", file=out)

    def log(rec):
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()), file=out,
              flush=True)

    try:
        train_loop(trainer, dev_set, out_dir, log)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}; last good checkpoint kept in {out_dir}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_translate(args, out) -> int:
    model = _load_model(args.checkpoint)
    vocab = read_vocab(args.vocab) if args.vocab else None
    ds = _read_dataset(args.features)
    _check_features(model, ds)
    hyps = _decode_all(model, ds, args.beam, args.alpha, args.max_len)
    for sample, hyp in zip(ds.sequences, hyps):
        words = [vocab[i] for i in hyp] if vocab else [str(i) for i in hyp]
        print(f"{sample.id}\t{' '.join(words)}", file=out)
    return EXIT_OK


def _read_token_lines(path) -> List[List[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def cmd_evaluate(args, out) -> int:
    model = _load_model(args.checkpoint)
    vocab = read_vocab(args.vocab) if args.vocab else None
    ds = _read_dataset(args.features)
    _check_features(model, ds)

    def words(ids):  # scoring compares surface tokens; ids stand in when no vocab is given
        return [vocab[i] if vocab and 0 <= i < len(vocab) else str(i) for i in ids]

    refs = _read_token_lines(args.refs) if args.refs else [words(s.target) for s in ds.sequences]
    if args.hyps:
        hyps = _read_token_lines(args.hyps)
    else:
        hyps = [words(h) for h in _decode_all(model, ds, args.beam, args.alpha, args.max_len)]
    if len(hyps) != len(refs):
        raise InputError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not refs:
        raise InputError("nothing to evaluate")
    b = bleu4(hyps, refs)
    r = rouge_l(hyps, refs)
    params = param_count(model.cfg)[0]
    # cost of one teacher-forced pass at the corpus-average source and output lengths
    src = max(1, int(round(np.mean([s.frames.shape[0] for s in ds.sequences]))))
    tgt = max(1, int(round(np.mean([len(h) + 1 for h in hyps]))))
    macs = forward_macs(model.cfg, src, tgt)["total"]
    ns = netscore(b, params / 1e6, macs / 1e9) if b > 0 else float("-inf")
    _emit(out, bleu4=b, rouge_l=r, info_density=information_density(b, params / 1e6), netscore=ns,
          params=params, macs=macs)
    return EXIT_OK


def cmd_params(args, out) -> int:
    if args.lineup:
        print(f"{'model':<14}{'params_M':>10}{'reported_M':>12}", file=out)
        for preset, label, target in zip(rc.PRESETS, rc.LINEUP_LABELS, rc.LINEUP_TARGETS_M):
            total = param_count(rc.load_preset(preset).model)[0]
            print(f"{label:<14}{total / 1e6:>10.3f}{target:>12.2f}", file=out)
        return EXIT_OK
    cfg = _load_run_config(args).model
    total, parts = param_count(cfg)
    for name, n in parts.items():
        print(f"{name:<26}{n:>10}", file=out)
    print(f"{'total':<26}{total:>10}", file=out)
    if args.verify:
        runtime = runtime_param_count(Signformer(cfg).params)
        print(f"{'runtime_total':<26}{runtime:>10}", file=out)
        if runtime != total:
            raise InputError(f"analytic count {total} differs from runtime count {runtime}")
    return EXIT_OK


def cmd_bench(args, out) -> int:
    if args.checkpoint:
        model = _load_model(args.checkpoint)
    else:
        model = Signformer(_load_run_config(args).model, seed=0)
    report = bench_translate(model, args.T, args.repeats, args.warmup, args.beam, args.alpha, args.max_len)
    report["threads"] = args.threads
    _emit(out, **report)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args, out) -> int:
    from . import gradcheck  # imported lazily: it builds all cases on import

    names = args.only or None
    if names:
        known = {c.name for c in gradcheck.CASES}
        unknown = [n for n in names if n not in known]
        if unknown:
            raise InputError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    results = gradcheck.run_suite(names, h=args.h, tol=args.tol, seed=args.seed)
    print(gradcheck.format_report(results), file=out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_INPUT


def cmd_synth(args, out) -> int:
    fields = {f: t for f, t in rc.field_types(SynthSpec).items()}
    values = {}
    pairs = rc.parse_pairs(Path(args.spec).read_text(encoding="utf-8"), args.spec) if args.spec else []
    pairs += rc.parse_overrides(args.set or [])
    for key, val, num in pairs:
        if key not in fields:
            raise InputError(f"unknown synth spec key {key!r}")
        values[key] = rc.parse_value(val, fields[key], key)
    spec = SynthSpec(**values)
    splits = synth_generate(spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        write_features(out_dir / f"{name}.sgnf", ds)
    write_vocab(out_dir / "vocab.txt", spec.vocab())
    _emit(out, task=spec.task, train=len(splits["train"]), dev=len(splits["dev"]), test=len(splits["test"]),
          vocab=len(spec.vocab()), out=str(out_dir))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value run config file")
    p.add_argument("--preset", choices=rc.PRESETS, help="start from a shipped lineup preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")


def _decode_args(p: argparse.ArgumentParser, beam: int) -> None:
    p.add_argument("--beam", type=int, default=beam)
    p.add_argument("--alpha", type=float, default=1.0, help="length penalty exponent")
    p.add_argument("--max-len", type=int, default=60)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signformer", description="Gloss-free sign language translation toolkit")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on an SGNF data directory")
    _config_args(p)
    p.add_argument("--data", required=True, help="directory with train.sgnf, dev.sgnf, vocab.txt")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", help="vocab file for printing words instead of ids")
    _decode_args(p, beam=5)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score translations of a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--refs", help="reference file, one space-joined sentence per line (default: file targets)")
    p.add_argument("--hyps", help="score these hypotheses instead of decoding")
    p.add_argument("--vocab", help="vocab file used to map words to ids")
    _decode_args(p, beam=5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("params", help="parameter breakdown")
    _config_args(p)
    p.add_argument("--lineup", action="store_true", help="print all six presets next to the reported totals")
    p.add_argument("--verify", action="store_true", help="also instantiate the model and count tensors")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", help="single-sequence translate latency")
    _config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--T", type=int, default=64, help="frames in the benchmark sequence")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--report", help="also write the report as JSON here")
    _decode_args(p, beam=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--only", nargs="*", help="case names to run")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--spec", help="key=value synth spec file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return EXIT_INPUT if exc.code else EXIT_OK
    limit = threadpool_limits(args.threads) if args.threads > 0 else contextlib.nullcontext()
    try:
        with limit:
            return args.func(args, out)
    except (InputError, rc.RunConfigError, ConfigError, FormatError, CheckpointMismatch, OSError, ValueError,
            IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
