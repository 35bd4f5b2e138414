"""Loss, optimizers, learning-rate scheduling and the training loop.

Optimizer buffers are float32 like the parameters, and every update is a
pure function of (parameters, gradients, state), so a run restored from a
checkpoint continues bit-identically in single-threaded mode.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Batch, FeatureDataset, make_batches
from .decoding import greedy_decode_batch
from .metrics import bleu4, rouge_l
from .model import PAD_ID, RunMode, Signformer, decoder_forward, encoder_forward

OPTIMIZERS = ("auto", "adamw", "sophiag")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets, pad_id: int = PAD_ID, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed negative log-likelihood, averaged over non-pad targets.

    The smoothed target puts ``1 - smoothing`` on the gold token and spreads
    ``smoothing`` uniformly over the whole vocabulary.

    Args:
        logits: ``[..., V]`` scores.
        targets: integer ids shaped like ``logits.shape[:-1]``.
        pad_id: id whose positions are ignored.
        smoothing: label smoothing mass in ``[0, 1)``.

    Raises:
        ValueError: every target is padding, or shapes disagree.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {tgt.shape} does not match logits {logits.shape[:-1]}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    keep = tgt != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every target position is padding")
    v = logits.shape[-1]
    z = logits.data.astype(np.float64).reshape(-1, v)
    t = tgt.reshape(-1)
    k = keep.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    gold = logp[np.arange(t.size), np.clip(t, 0, v - 1)]
    nll = -(1.0 - smoothing) * gold - smoothing * logp.mean(axis=1)
    loss = float((nll * k).sum() / n)

    def bw(g):
        q = np.full_like(logp, smoothing / v)
        q[np.arange(t.size), np.clip(t, 0, v - 1)] += 1.0 - smoothing
        grad = (np.exp(logp) - q) * (k[:, None] / n) * float(g)
        return (grad.reshape(logits.shape).astype(logits.dtype),)

    return ad.record_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------


def global_grad_norm(params: Dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    return math.sqrt(total)


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float = 5.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns:
        The scale applied (1.0 when no clipping was needed).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params.values():
        if p.grad is not None:
            p.grad = (p.grad.astype(np.float64) * scale).astype(p.grad.dtype)
    return scale


def zero_grad(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _check_grads(params: Dict[str, Tensor]) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    ``p <- p (1 - lr wd)`` then the bias-corrected Adam step.
    """

    lr: float = 0.004
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step_count: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    kind = "adamw"
    buffer_names = ("m", "v")

    def hyper(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay}

    def _buf(self, name: str, p: Tensor) -> dict:
        if name not in self.buffers:
            self.buffers[name] = {b: np.zeros(p.shape, dtype=np.float32) for b in self.buffer_names}
        return self.buffers[name]

    def step(self, params: Dict[str, Tensor]) -> None:
        _check_grads(params)
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            st = self._buf(name, p)
            g = p.grad.astype(np.float64)
            m = b1 * st["m"].astype(np.float64) + (1.0 - b1) * g
            v = b2 * st["v"].astype(np.float64) + (1.0 - b2) * g * g
            w = p.data.astype(np.float64) * (1.0 - self.lr * self.weight_decay)
            w -= (self.lr / bc1) * m / (np.sqrt(v) / math.sqrt(bc2) + self.eps)
            st["m"][...] = m
            st["v"][...] = v
            p.data[...] = w


@dataclass
class SophiaG:
    """Clipped diagonal-Hessian preconditioned momentum.

    Per coordinate: ``p <- p - lr clip(m / max(rho h, eps), -1, 1) - lr wd p``.
    ``h`` is refreshed with :meth:`update_hessian` from a gradient computed on
    labels sampled from the model's own predictions.
    """

    lr: float = 0.004
    betas: tuple = (0.965, 0.99)
    rho: float = 0.04
    eps: float = 1e-12
    weight_decay: float = 1e-3
    hessian_interval: int = 10
    step_count: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    kind = "sophiag"
    buffer_names = ("m", "h")

    def hyper(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "rho": self.rho,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "hessian_interval": self.hessian_interval,
        }

    _buf = AdamW._buf

    def needs_hessian(self) -> bool:
        """True when the coming step should refresh the Hessian estimate."""
        return self.step_count % self.hessian_interval == 0

    def update_hessian(self, sampled_grads: Dict[str, np.ndarray], batch_size: int, params: Dict[str, Tensor]) -> None:
        """``h <- beta2 h + (1 - beta2) B g_hat^2`` for every given parameter."""
        b2 = self.betas[1]
        for name, g in sampled_grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite sampled gradient in parameter {name!r}")
            st = self._buf(name, params[name])
            g64 = g.astype(np.float64)
            st["h"][...] = b2 * st["h"].astype(np.float64) + (1.0 - b2) * batch_size * g64 * g64

    def step(self, params: Dict[str, Tensor]) -> None:
        _check_grads(params)
        self.step_count += 1
        b1 = self.betas[0]
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            st = self._buf(name, p)
            m = b1 * st["m"].astype(np.float64) + (1.0 - b1) * p.grad.astype(np.float64)
            ratio = np.clip(m / np.maximum(self.rho * st["h"].astype(np.float64), self.eps), -1.0, 1.0)
            w = p.data.astype(np.float64)
            w = w - self.lr * ratio - self.lr * self.weight_decay * w
            st["m"][...] = m
            p.data[...] = w


def make_optimizer(kind: str, lr: float, **kw):
    """Build ``"adamw"`` or ``"sophiag"`` with the shared keyword names."""
    if kind == "adamw":
        return AdamW(lr=lr, weight_decay=kw.get("weight_decay", 1e-3))
    if kind == "sophiag":
        return SophiaG(
            lr=lr,
            rho=kw.get("rho", 0.04),
            weight_decay=kw.get("weight_decay", 1e-3),
            hessian_interval=kw.get("hessian_interval", 10),
        )
    raise ValueError(f"optimizer must be adamw or sophiag, got {kind!r}")


def choose_optimizer(kind: str, hidden: int) -> str:
    """Resolve ``"auto"``: SophiaG from hidden size 128 up, AdamW below."""
    if kind == "auto":
        return "sophiag" if hidden >= 128 else "adamw"
    if kind not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {kind!r}")
    return kind


# ---------------------------------------------------------------------------
# scheduler
# ---------------------------------------------------------------------------


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stale validations.

    A validation is stale unless its metric is strictly above the best so far
    (higher is better). The stale counter resets after each decay.
    """

    lr: float = 0.004
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-7
    best: Optional[float] = None
    stale: int = 0

    def step(self, metric: float) -> float:
        if self.best is None or metric > self.best:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale = 0
        return self.lr

    def state(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimisation, validation and decoding settings."""

    lr: float = 0.004
    batch_size: int = 32
    epochs: int = 30
    optimizer: str = "auto"
    weight_decay: float = 1e-3
    max_grad_norm: float = 5.0
    label_smoothing: float = 0.0
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-7
    hessian_interval: int = 10
    rho: float = 0.04
    seed: int = 0
    beam: int = 5
    alpha: float = 1.0
    max_len: int = 60
    target_bleu: float = 0.0  # stop early once dev BLEU-4 reaches this (0 disables)
    time_budget: float = 0.0  # seconds; 0 disables

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr: must be positive (got {self.lr})")
        if self.batch_size < 1:
            raise ValueError(f"batch_size: must be >= 1 (got {self.batch_size})")
        if self.epochs < 0:
            raise ValueError(f"epochs: must be >= 0 (got {self.epochs})")
        choose_optimizer(self.optimizer, 128)
        if self.beam < 1 or self.max_len < 1:
            raise ValueError("beam and max_len must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Trainer:
    """Teacher-forced training of a :class:`Signformer` with resumable state.

    The position in the data stream is ``(epoch, batch_index)``; batches of
    an epoch are shuffled with seed ``seed + epoch`` so a restored trainer
    replays exactly the same stream.
    """

    def __init__(self, model: Signformer, train_cfg: TrainConfig, train_set: FeatureDataset):
        train_cfg.validate()
        if len(train_set) == 0:
            raise ValueError("training set is empty")
        self.model = model
        self.cfg = train_cfg
        self.train_set = train_set
        kind = choose_optimizer(train_cfg.optimizer, model.cfg.hidden)
        self.optimizer = make_optimizer(
            kind,
            train_cfg.lr,
            weight_decay=train_cfg.weight_decay,
            rho=train_cfg.rho,
            hessian_interval=train_cfg.hessian_interval,
        )
        self.scheduler = PlateauScheduler(train_cfg.lr, train_cfg.factor, train_cfg.patience, train_cfg.min_lr)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.epoch = 0
        self.batch_index = 0
        self.history: List[dict] = []
        self._batches: Optional[List[Batch]] = None
        self._batches_epoch = -1

    # -- data stream -----------------------------------------------------
    def epoch_batches(self, epoch: int) -> List[Batch]:
        if self._batches_epoch != epoch:
            self._batches = make_batches(self.train_set, self.cfg.batch_size, seed=self.cfg.seed + epoch, shuffle=True)
            self._batches_epoch = epoch
        return self._batches

    # -- one update ------------------------------------------------------
    def _loss(self, batch: Batch):
        mode = RunMode(training=True, rng=self.rng)
        params, cfg = self.model.params, self.model.cfg
        enc = encoder_forward(batch.frames, params, cfg, batch.src_mask, mode)
        logits = decoder_forward(batch.tgt_in, enc, params, cfg, batch.src_mask, mode)
        return logits, cross_entropy(logits, batch.tgt_out, PAD_ID, self.cfg.label_smoothing)

    def train_step(self, batch: Batch) -> float:
        """One optimizer update on ``batch``; returns the loss before the update.

        Raises:
            DivergenceError: non-finite loss, activations or gradients.
        """
        params = self.model.params
        opt = self.optimizer
        opt.lr = self.scheduler.lr
        zero_grad(params)
        try:
            with ad.Tape() as tape:
                logits, loss = self._loss(batch)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"loss is {value}")
                refresh = isinstance(opt, SophiaG) and opt.needs_hessian()
                ad.backward(loss, tape, retain=refresh)
                if refresh:
                    grads = {k: p.grad for k, p in params.items()}
                    zero_grad(params)
                    sampled = self._sample_labels(logits.data, batch.tgt_out)
                    n_tok = int((batch.tgt_out != PAD_ID).sum())
                    ad.backward(cross_entropy(logits, sampled, PAD_ID, 0.0), tape)
                    opt.update_hessian(
                        {k: p.grad for k, p in params.items() if p.requires_grad and p.grad is not None},
                        n_tok,
                        params,
                    )
                    for k, p in params.items():
                        p.grad = grads[k]
            clip_grad_norm(params, self.cfg.max_grad_norm)
            opt.step(params)
        except NonFiniteError as exc:
            raise DivergenceError(str(exc)) from exc
        finally:
            zero_grad(params)
        return value

    def _sample_labels(self, logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
        z = logits.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        cdf = np.cumsum(p, axis=-1)
        u = self.rng.random(z.shape[:-1] + (1,))
        labels = np.minimum((cdf < u).sum(axis=-1), z.shape[-1] - 1)
        return np.where(targets == PAD_ID, PAD_ID, labels)

    def run_epoch(self, deadline: Optional[float] = None) -> float:
        """Finish the current epoch from ``batch_index``; returns the mean loss."""
        batches = self.epoch_batches(self.epoch)
        losses = []
        while self.batch_index < len(batches):
            losses.append(self.train_step(batches[self.batch_index]))
            self.batch_index += 1
            if deadline is not None and time.monotonic() > deadline:
                break
        if self.batch_index >= len(batches):
            self.epoch += 1
            self.batch_index = 0
        return float(np.mean(losses)) if losses else float("nan")

    # -- state for checkpoints -------------------------------------------
    def progress(self) -> dict:
        return {
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "rng": self.rng.bit_generator.state,
            "scheduler": self.scheduler.state(),
            "train_config": self.cfg.to_dict(),
            "history": self.history,
        }

    def restore(self, optimizer_state: dict, progress: dict) -> None:
        """Inverse of :meth:`progress` plus the optimizer section of a checkpoint."""
        opt = self.optimizer
        if optimizer_state["kind"] != opt.kind:
            raise ValueError(f"checkpoint optimizer {optimizer_state['kind']!r} differs from {opt.kind!r}")
        for k, v in optimizer_state["hyper"].items():
            setattr(opt, k, tuple(v) if k == "betas" else v)
        opt.step_count = optimizer_state["step"]
        opt.buffers = {n: {b: a.copy() for b, a in bufs.items()} for n, bufs in optimizer_state["buffers"].items()}
        self.epoch = progress["epoch"]
        self.batch_index = progress["batch_index"]
        self.rng.bit_generator.state = progress["rng"]
        self.scheduler = PlateauScheduler(**progress["scheduler"])
        self.history = list(progress.get("history", []))

    def optimizer_state(self) -> dict:
        opt = self.optimizer
        return {
            "kind": opt.kind,
            "hyper": opt.hyper(),
            "step": opt.step_count,
            "buffer_names": list(opt.buffer_names),
            "buffers": opt.buffers,
        }


def evaluate_greedy(model: Signformer, dataset: FeatureDataset, batch_size: int = 32, max_len: int = 60) -> dict:
    """Greedy-decode ``dataset``; returns BLEU-4, ROUGE-L and the hypotheses."""
    hyps, refs = [], []
    for batch in make_batches(dataset, batch_size):
        hyps.extend(greedy_decode_batch(model, batch.frames, batch.src_mask, max_len))
        refs.extend(batch.targets)
    return {"bleu4": bleu4(hyps, refs), "rouge_l": rouge_l(hyps, refs), "hypotheses": hyps}


def train_loop(
    trainer: Trainer,
    dev_set: FeatureDataset,
    out_dir=None,
    log: Optional[Callable[[dict], None]] = None,
) -> List[dict]:
    """Train for ``epochs`` epochs with per-epoch greedy dev validation.

    Each epoch appends ``{epoch, train_loss, dev_bleu4, dev_rouge_l, lr}`` to
    the history (and to ``metrics.jsonl`` under ``out_dir``), steps the
    plateau scheduler on dev BLEU-4 and writes ``last.sgck`` plus, on a new
    best, ``best.sgck``. On divergence the checkpoints from the last good
    epoch are left untouched and :class:`DivergenceError` propagates.
    """
    from .checkpoint import save_checkpoint  # local import avoids a cycle

    cfg = trainer.cfg
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    deadline = start + cfg.time_budget if cfg.time_budget > 0 else None
    while trainer.epoch < cfg.epochs:
        epoch = trainer.epoch
        loss = trainer.run_epoch(deadline)
        ev = evaluate_greedy(trainer.model, dev_set, cfg.batch_size, cfg.max_len) if len(dev_set) else {
            "bleu4": 0.0, "rouge_l": 0.0}
        improved = trainer.scheduler.best is None or ev["bleu4"] > trainer.scheduler.best
        lr_used = trainer.scheduler.lr
        trainer.scheduler.step(ev["bleu4"])
        rec = {
            "epoch": epoch + 1,
            "train_loss": loss,
            "dev_bleu4": ev["bleu4"],
            "dev_rouge_l": ev["rouge_l"],
            "lr": lr_used,
            "elapsed": round(time.monotonic() - start, 3),
        }
        trainer.history.append(rec)
        if log is not None:
            log(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
            state = (trainer.model.cfg, trainer.model.params, trainer.optimizer_state(), trainer.progress())
            save_checkpoint(out / "last.sgck", *state)
            if improved:
                save_checkpoint(out / "best.sgck", *state)
        if cfg.target_bleu and ev["bleu4"] >= cfg.target_bleu:
            break
        if deadline is not None and time.monotonic() > deadline:
            break
    return trainer.history
