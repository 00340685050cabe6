"""Optimizer, schedule, pretraining loop and the text-only masked-token stage."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .data.corpus import Corpus
from .data.synth import Pair
from .data.tokenizer import TextReport
from .eval.protocols import PromptTable, zero_shot_classify
from .losses import mask_tokens, mlm_loss, multiscale_loss
from .model import MLMHead, ModelConfig, MultiScaleModel, collate_signals, collate_text
from .tensor import NumericError, Tensor, backward

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; carries the offending batch record ids."""

    def __init__(self, message: str, batch_ids: Sequence[str] = ()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.2
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    schedule: str = "cosine"  # "cosine" or "constant"
    eval_every: int = 0  # extra validation every n steps; 0 = epoch ends only
    warmup_steps: int = 0
    max_steps: int = 0  # 0 = no cap beyond max_epochs
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for contrastive losses")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def scheduled_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    return cosine_lr(min(step, total_steps), total_steps, cfg.lr)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               moments: dict[str, tuple[np.ndarray, np.ndarray]], step: int, lr_t: float, wd: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               decay: Callable[[str, np.ndarray], bool] | None = None) -> dict[str, np.ndarray]:
    """One AdamW update (1-based ``step``); returns new arrays and updates ``moments`` in place.

    Weight decay shrinks the weights directly and never enters the moments.
    ``decay(name, value)`` selects which parameters are decayed (all by default).
    """
    out = {}
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        moments[name] = (m, v)
        upd = (m / bc1) / (np.sqrt(v / bc2) + eps)
        shrink = 1.0 - lr_t * wd if (decay is None or decay(name, p)) else 1.0
        out[name] = (p * shrink - lr_t * upd).astype(p.dtype)
    return out


def decays(name: str, value: np.ndarray) -> bool:
    """Matrices decay; gains, biases and the log temperature do not."""
    return value.ndim >= 2


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for named Tensor parameters."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-4, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr_t: float | None = None) -> None:
        self.t += 1
        values = {k: p.data for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        new = adamw_step(values, grads, self.moments, self.t, self.lr if lr_t is None else lr_t,
                         self.weight_decay, self.betas[0], self.betas[1], self.eps, decay=decays)
        for k, arr in new.items():
            self.params[k].data = arr

    def state(self) -> tuple[dict, dict]:
        return ({k: m for k, (m, _) in self.moments.items()},
                {k: v for k, (_, v) in self.moments.items()})

    def load_state(self, m: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray], t: int) -> None:
        self.moments = {k: (m[k].copy(), v[k].copy()) for k in m}
        self.t = t


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


class MetricsLog:
    """Line-delimited JSON written as it goes and kept in memory."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _named(model) -> dict[str, Tensor]:
    keep = {id(p) for p in model.trainable_parameters()}
    return {k: p for k, p in model.named_parameters() if id(p) in keep}


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is folded into the previous one."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _round(x: float) -> float:
    return float(f"{x:.8g}")


def build_model(model_cfg: ModelConfig, text_init: ModelCheckpoint | None = None) -> MultiScaleModel:
    model = MultiScaleModel(model_cfg)
    if text_init is not None:
        text_state = {k[len("text."):]: v for k, v in text_init.params.items() if k.startswith("text.")}
        if not text_state:
            raise ValueError("text initialization checkpoint has no text-encoder weights")
        try:
            model.text.load_state_dict(text_state)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"text initialization checkpoint does not fit this model: {exc}") from exc
    return model


def model_from_checkpoint(ckpt: ModelCheckpoint) -> MultiScaleModel:
    cfg = ModelConfig.from_dict(ckpt.config)
    if cfg.config_hash() != ckpt.config_hash:
        raise ValueError(f"config hash mismatch: stored {ckpt.config_hash}, recomputed {cfg.config_hash()}")
    model = MultiScaleModel(cfg)
    model.load_state_dict(ckpt.params)
    model.eval()
    return model


def load_model(path: str | os.PathLike) -> MultiScaleModel:
    return model_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------------------
# multimodal pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: MultiScaleModel
    checkpoint: ModelCheckpoint
    metrics: list[dict]
    epochs_run: int
    steps: int


def pretrain(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig, *,
             out_dir: str | os.PathLike | None = None, text_init: ModelCheckpoint | None = None,
             prompt_table: PromptTable | None = None, train_pairs: Sequence[Pair] | None = None,
             val_pairs: Sequence[Pair] | None = None) -> PretrainResult:
    """Train on the corpus train split with early stopping on validation zero-shot AUROC.

    Writes ``metrics.jsonl`` and ``checkpoints/best.ckpt`` under ``out_dir`` when
    given.  The returned model carries the best weights.
    """
    train = list(corpus.split("train") if train_pairs is None else train_pairs)
    val = list(corpus.split("val") if val_pairs is None else val_pairs)
    if len(train) < 2:
        raise ValueError("pretraining needs at least 2 training pairs")
    table = prompt_table or PromptTable.default(corpus.classes)
    out = Path(out_dir) if out_dir is not None else None
    mlog = MetricsLog(out / "metrics.jsonl" if out else None)

    model = build_model(model_cfg, text_init)
    model.train()
    model.reseed_dropout(np.random.SeedSequence(train_cfg.seed, spawn_key=(21,)))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed, spawn_key=(22,)))
    params = _named(model)
    opt = AdamW(params, train_cfg.lr, train_cfg.weight_decay, (train_cfg.beta1, train_cfg.beta2),
                train_cfg.eps)
    steps_per_epoch = len(batches(len(train), train_cfg.batch_size, np.random.default_rng(0)))
    total = steps_per_epoch * train_cfg.max_epochs
    if train_cfg.max_steps:
        total = min(total, train_cfg.max_steps)

    def validate() -> float | None:
        if not val:
            return None
        value, _ = zero_shot_classify(model, [p.record for p in val], table, corpus.vocab)
        return value

    best_val, best_state, best_epoch, bad, step, epoch = -math.inf, None, 0, 0, 0, 0
    best_moments: tuple[dict, dict] = ({}, {})
    stop = False
    for epoch in range(1, train_cfg.max_epochs + 1):
        for idx in batches(len(train), train_cfg.batch_size, shuffle_rng):
            pairs = [train[i] for i in idx]
            ids = [p.record.record_id for p in pairs]
            signals = collate_signals([p.record for p in pairs])
            text = collate_text([p.report for p in pairs], model_cfg.max_text_len)
            lr_t = scheduled_lr(step, total, train_cfg)
            try:
                loss, br, _ = multiscale_loss(model, signals, text)
            except NumericError as exc:
                _dump_batch(out, ids)
                raise TrainingAborted(f"{exc} at step {step + 1}", ids) from exc
            if not np.isfinite(loss.data):
                _dump_batch(out, ids)
                raise TrainingAborted(f"non-finite loss at step {step + 1}", ids)
            opt.zero_grad()
            backward(loss, list(params.values()))
            try:
                opt.step(lr_t)
            except NumericError as exc:
                _dump_batch(out, ids)
                raise TrainingAborted(f"{exc} at step {step + 1}", ids) from exc
            model.clamp_tau()
            step += 1
            row = {"kind": "step", "step": step, "epoch": epoch, "lr": _round(lr_t)}
            row.update({k: _round(v) for k, v in br.as_dict().items()})
            mlog.write(row)
            if train_cfg.eval_every and step % train_cfg.eval_every == 0:
                mlog.write({"kind": "eval", "step": step, "epoch": epoch,
                            "val_zero_shot_auroc": _round_opt(validate())})
            if train_cfg.max_steps and step >= train_cfg.max_steps:
                stop = True
                break
        val_metric = validate()
        if val_metric is not None and not math.isfinite(val_metric):
            raise TrainingAborted(f"non-finite validation metric after epoch {epoch}")
        improved = val_metric is None or val_metric > best_val
        if improved:
            best_val = val_metric if val_metric is not None else best_val
            best_state, best_epoch, bad = model.state_dict(), epoch, 0
            best_moments = tuple(dict(d) for d in opt.state())
        else:
            bad += 1
        mlog.write({"kind": "epoch", "epoch": epoch, "step": step,
                    "val_zero_shot_auroc": _round_opt(val_metric), "best_epoch": best_epoch,
                    "tau_learnable": _round(model.tau)})
        if stop or bad >= train_cfg.patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    ckpt = ModelCheckpoint(
        params=model.state_dict(), config=model_cfg.to_dict(), config_hash=model_cfg.config_hash(),
        step=step, epoch=best_epoch, best_val_metric=None if best_val == -math.inf else float(best_val),
        moments_m=best_moments[0], moments_v=best_moments[1],
        rng_state={"shuffle": shuffle_rng.bit_generator.state, "train_seed": train_cfg.seed},
        extra={"train_config": train_cfg.to_dict(), "epochs_run": epoch},
    )
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoints" / "best.ckpt")
    return PretrainResult(model, ckpt, mlog.rows, epoch, step)


def _round_opt(x: float | None) -> float | None:
    return None if x is None else _round(x)


def _dump_batch(out: Path | None, ids: Sequence[str]) -> None:
    log.error("aborting: last batch ids %s", list(ids))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "aborted_batch.json").write_text(json.dumps({"batch_ids": list(ids)}) + "\n")


# ---------------------------------------------------------------------------
# text-only masked-token stage
# ---------------------------------------------------------------------------


def text_mlm_pretrain(reports: Sequence[TextReport], model_cfg: ModelConfig, train_cfg: TrainConfig,
                      steps: int | None = None, out_path: str | os.PathLike | None = None,
                      log_rows: list | None = None) -> ModelCheckpoint:
    """Train the text encoder plus a token head to recover masked words.

    Runs ``steps`` updates (default: ``max_epochs`` passes over the reports).
    The checkpoint holds ``text.*`` and ``mlm_head.*`` weights.
    """
    if len(reports) < 2:
        raise ValueError("need at least 2 reports")
    model = MultiScaleModel(model_cfg)
    text = model.text
    text.train()
    model.reseed_dropout(np.random.SeedSequence(train_cfg.seed, spawn_key=(24,)))
    head = MLMHead(model_cfg, train_cfg.seed)
    params = {f"text.{k}": p for k, p in text.named_parameters()}
    params.update({f"mlm_head.{k}": p for k, p in head.named_parameters()})
    opt = AdamW(params, train_cfg.lr, train_cfg.weight_decay, (train_cfg.beta1, train_cfg.beta2),
                train_cfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed, spawn_key=(25,)))
    per_epoch = len(batches(len(reports), train_cfg.batch_size, np.random.default_rng(0)))
    total = steps if steps is not None else per_epoch * train_cfg.max_epochs
    step = 0
    while step < total:
        for idx in batches(len(reports), train_cfg.batch_size, rng):
            ids = collate_text([reports[i] for i in idx], model_cfg.max_text_len).ids
            corrupted, chosen = mask_tokens(ids, rng, model_cfg.vocab_size)
            try:
                loss = mlm_loss(head(text(corrupted)), ids, chosen)
            except NumericError as exc:
                raise TrainingAborted(f"{exc} at step {step + 1}") from exc
            if not np.isfinite(loss.data):
                raise TrainingAborted(f"non-finite MLM loss at step {step + 1}")
            opt.zero_grad()
            backward(loss, list(params.values()))
            opt.step(scheduled_lr(step, total, train_cfg))
            step += 1
            if log_rows is not None:
                log_rows.append({"kind": "mlm_step", "step": step, "loss": _round(float(loss.data))})
            if step >= total:
                break
    state = {k: p.data.copy() for k, p in params.items()}
    ckpt = ModelCheckpoint(params=state, config=model_cfg.to_dict(), config_hash=model_cfg.config_hash(),
                           step=step, extra={"kind": "text_mlm", "train_config": train_cfg.to_dict()})
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt
