"""Continual pre-training: AdamW, linear warm-up + per-step cosine decay, val-loss selection."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .data import SceneRecord, compute_stats, model_input, scale_reflectance, select_bands
from .errors import DivergedLoss, InvalidConfig, NonFiniteGradient, StepOutOfRange
from .loss import ContrastiveBatch, info_nce, info_nce_backward
from .tokenizer import Vocabulary, encode_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 4e-5
    warmup_steps: int = 50
    total_steps: int = 1000
    batch_size: int = 32
    weight_decay: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    grad_clip: float | None = 1.0
    freeze_policy: M.FreezePolicy = field(default_factory=M.FreezePolicy)
    seed: int = 0
    val_every: int = 50
    max_epochs: int = 1000

    def validate(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise InvalidConfig("need 0 < warmup_steps < total_steps")
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise InvalidConfig("peak_lr and weight_decay must be >= 0")
        if self.val_every < 1 or self.max_epochs < 1:
            raise InvalidConfig("val_every and max_epochs must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidConfig("grad_clip must be positive or None")

    def to_json(self) -> dict:
        d = asdict(self)
        d["freeze_policy"] = self.freeze_policy.describe()
        d["freeze_patch_embed_always_trainable"] = self.freeze_policy.patch_embed_always_trainable
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        always = obj.pop("freeze_patch_embed_always_trainable", True)
        fp = obj.get("freeze_policy", "all")
        if isinstance(fp, str):
            fp = M.FreezePolicy.parse(fp)
        obj["freeze_policy"] = M.FreezePolicy(fp.kind, fp.patterns, bool(always))
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warm-up from peak/W to peak, then half-cosine decay towards zero."""
    if not 0 <= step < config.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {config.total_steps})")
    w = config.warmup_steps
    if step < w:
        return config.peak_lr * (step + 1) / w
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (config.total_steps - w)))


def decays(name: str) -> bool:
    return not (name.endswith(".bias") or ".ln" in name or name == "log_temperature")


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, config: TrainConfig, mask: dict[str, bool] | None = None):
    """In-place decoupled-weight-decay Adam update of every trainable tensor.

    Raises NonFiniteGradient before touching anything if a trainable gradient is
    not finite. Frozen tensors are neither read nor updated.
    """
    names = [n for n in params if mask is None or mask.get(n, False)]
    for n in names:
        if n not in grads:
            raise KeyError(f"missing gradient for trainable parameter {n!r}")
        if not np.all(np.isfinite(grads[n])):
            raise NonFiniteGradient(f"non-finite gradient for {n!r}")
    state.step += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for n in names:
        p = params[n]
        g = np.asarray(grads[n], dtype=np.float64)
        m = state.m.get(n)
        if m is None:
            m = np.zeros(p.shape)
            state.v[n] = np.zeros(p.shape)
        v = state.v[n]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[n], state.v[n] = m, v
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        new = p.astype(np.float64)
        if decays(n) and config.weight_decay:
            new = new * (1.0 - lr * config.weight_decay)
        params[n] = np.asarray(new - lr * upd, dtype=p.dtype)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], names: Sequence[str], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(grads[n], dtype=np.float64))) for n in names))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for n in names:
            grads[n] = grads[n] * scale
    return total


@dataclass
class TrainLogEntry:
    step: int
    epoch: int
    lr: float
    train_loss: float | None
    val_loss: float | None = None
    wall_ms: float = 0.0

    def to_json(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            del d["wall_ms"]
        return d


@dataclass
class TrainLog:
    entries: list[TrainLogEntry] = field(default_factory=list)
    best_step: int = -1
    best_val_loss: float = math.inf
    skipped_steps: int = 0

    def val_points(self) -> list[tuple[int, float]]:
        return [(e.step, e.val_loss) for e in self.entries if e.val_loss is not None]


@dataclass
class PreparedSplit:
    images: np.ndarray
    tokens: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


def ensure_stats(params: M.ModelParameters, records: Sequence[SceneRecord]) -> M.ModelParameters:
    """Attach per-band normalisation stats computed over ``records`` when missing."""
    if params.config.stats() is not None:
        return params
    bands = params.config.bands()
    stats = compute_stats(scale_reflectance(select_bands(r.load_image(), bands)) for r in records)
    return M.ModelParameters(params.config.with_stats(stats), params.tensors)


def prepare_split(params: M.ModelParameters, records: Sequence[SceneRecord],
                  vocab: Vocabulary) -> PreparedSplit:
    cfg = params.config
    stats = cfg.stats()
    if stats is None:
        raise InvalidConfig("model config has no normalisation stats; call ensure_stats first")
    images = model_input([r.load_image() for r in records], cfg.bands(), stats, cfg.image_size)
    tokens = encode_batch([r.caption for r in records], vocab, cfg.context_length)
    return PreparedSplit(images, tokens)


def _chunks(n: int, size: int) -> list[slice]:
    """Contiguous chunks of ``size``; a trailing chunk of one is merged into its predecessor."""
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def validation_loss(params: M.ModelParameters, split: PreparedSplit, batch_size: int) -> float:
    """Size-weighted mean InfoNCE over fixed, unshuffled chunks of the split."""
    total, count = 0.0, 0
    log_t = float(params["log_temperature"])
    for sl in _chunks(len(split), batch_size):
        xi = M.encode_image(params, split.images[sl])
        yt = M.encode_text(params, split.tokens[sl])
        loss, _ = info_nce(ContrastiveBatch(xi, yt, log_t), check=False)
        n = sl.stop - sl.start
        total += loss * n
        count += n
    return total / count


def train_step(params: M.ModelParameters, images: np.ndarray, tokens: np.ndarray):
    """Forward both towers, InfoNCE, backward. Returns ``(loss, grads)``."""
    xi, ci = M.image_forward(params, images)
    yt, ct = M.text_forward(params, tokens)
    loss, dx, dy, dlog_t = info_nce_backward(
        ContrastiveBatch(xi, yt, float(params["log_temperature"])), check=False)
    grads = M.image_backward(params, ci, dx)
    grads.update(M.text_backward(params, ct, dy))
    grads["log_temperature"] = np.asarray(dlog_t)
    return loss, grads


def frozen_checksum(params: M.ModelParameters, mask: dict[str, bool]) -> str:
    h = hashlib.sha256()
    for n, t in params.tensors.items():
        if not mask.get(n, False):
            h.update(n.encode())
            h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()


def train(params: M.ModelParameters, train_records: Sequence[SceneRecord] | PreparedSplit,
          val_records: Sequence[SceneRecord] | PreparedSplit, config: TrainConfig,
          vocab: Vocabulary | None = None, checkpoint_dir: str | Path | None = None,
          log_path: str | Path | None = None) -> tuple[M.ModelParameters, TrainLog]:
    """Run the training loop and return the lowest-validation-loss parameters.

    Validation runs on the parameters entering every ``val_every``-th step and
    once more on the final parameters (logged as a row without ``train_loss``).
    The input ``params`` object is not modified.
    """
    config.validate()
    params = params.copy()
    if not isinstance(train_records, PreparedSplit):
        if vocab is None:
            raise InvalidConfig("a vocabulary is required to tokenise captions")
        if not train_records or not val_records:
            raise InvalidConfig("train and val splits must be non-empty")
        params = ensure_stats(params, train_records)
        train_data = prepare_split(params, train_records, vocab)
        val_data = prepare_split(params, val_records, vocab)
    else:
        train_data, val_data = train_records, val_records
    n = len(train_data)
    if n < config.batch_size:
        raise InvalidConfig(f"train split has {n} samples, fewer than batch_size {config.batch_size}")
    if len(val_data) == 0:
        raise InvalidConfig("val split must be non-empty")

    mask = M.resolve_freeze(params, config.freeze_policy)
    trainable = [k for k, v in mask.items() if v]
    state = AdamWState()
    rng = np.random.default_rng(config.seed)
    tlog = TrainLog()
    best = params.copy()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None

    # timings stay in memory only so the log file is reproducible byte for byte
    def emit(obj: dict) -> None:
        if log_fh is not None:
            log_fh.write(json.dumps(obj, sort_keys=True) + "\n")
            log_fh.flush()

    def validate_now(step: int) -> float:
        nonlocal best
        vl = validation_loss(params, val_data, config.batch_size)
        if vl < tlog.best_val_loss:
            tlog.best_val_loss, tlog.best_step = vl, step
            best = params.copy()
        if ckpt_dir is not None:
            M.save_checkpoint(params, ckpt_dir / f"step_{step:06d}.msck")
        return vl

    emit({"event": "config", "train": config.to_json(), "model": params.config.to_json(),
          "frozen_checksum": frozen_checksum(params, mask)})
    step, epoch, bad_losses = 0, 0, 0
    validated_at = None
    try:
        while step < config.total_steps and epoch < config.max_epochs:
            perm = rng.permutation(n)
            for b in range(n // config.batch_size):
                if step >= config.total_steps:
                    break
                t0 = time.perf_counter()
                val = None
                if step % config.val_every == 0:
                    val = validate_now(step)
                    validated_at = step
                idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
                lr = lr_schedule(step, config)
                loss, grads = train_step(params, train_data.images[idx], train_data.tokens[idx])
                if not math.isfinite(loss):
                    bad_losses += 1
                    if bad_losses >= 2:
                        raise DivergedLoss(f"non-finite training loss at steps {step - 1} and {step}")
                    tlog.skipped_steps += 1
                else:
                    bad_losses = 0
                    if config.grad_clip is not None:
                        clip_global_norm(grads, trainable, config.grad_clip)
                    try:
                        adamw_step(params.tensors, grads, state, lr, config, mask)
                        M.clamp_log_temperature(params)
                    except NonFiniteGradient as e:
                        log.warning("step %d skipped: %s", step, e)
                        tlog.skipped_steps += 1
                entry = TrainLogEntry(step, epoch, lr, loss if math.isfinite(loss) else None, val,
                                      round((time.perf_counter() - t0) * 1000.0, 3))
                tlog.entries.append(entry)
                emit(entry.to_json(timing=False))
                step += 1
            epoch += 1
        if validated_at != step:
            t0 = time.perf_counter()
            val = validate_now(step)
            entry = TrainLogEntry(step, epoch, 0.0, None, val,
                                  round((time.perf_counter() - t0) * 1000.0, 3))
            tlog.entries.append(entry)
            emit(entry.to_json(timing=False))
        if ckpt_dir is not None:
            M.save_checkpoint(best, ckpt_dir / "best.msck")
        emit({"event": "summary", "best_step": tlog.best_step, "best_val_loss": tlog.best_val_loss,
              "skipped_steps": tlog.skipped_steps, "freeze_policy": config.freeze_policy.describe(),
              "frozen_checksum": frozen_checksum(params, mask)})
    finally:
        if log_fh is not None:
            log_fh.close()
    return best, tlog
