"""Losses, AdamW, cosine-with-warmup schedule, samplers, training loop and checkpoints."""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .augment import AugmentConfig, augment_example, stream_for
from .dataio import Dataset, Example, label_counts
from .errors import ConfigError, DataError, IngestionError, NonFiniteError
from .evalens import all_metrics


class LossKind(str, enum.Enum):
    WEIGHTED_CE = "WEIGHTED_CE"
    FOCAL = "FOCAL"


class SamplerKind(str, enum.Enum):
    SHUFFLE = "SHUFFLE"
    BALANCED = "BALANCED"


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 20
    warmup_steps: int = 500
    lr_max: float = 5e-5
    lr_min: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 1e-6
    clip_norm: float = 10.0
    loss: LossKind = LossKind.WEIGHTED_CE
    focal_gamma: float = 2.0
    sampler: SamplerKind = SamplerKind.SHUFFLE
    seed: int = 0

    def __post_init__(self) -> None:
        self.loss = LossKind(self.loss)
        self.sampler = SamplerKind(self.sampler)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        # lr_max = 0 is allowed so a null-training run can be configured
        if self.lr_min < 0 or self.lr_max < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min ({self.lr_min}) exceeds lr_max ({self.lr_max})")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must be in [0, 1)")
        for name in ("adam_eps", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.value
        d["sampler"] = self.sampler.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses


def compute_class_weights(counts: Sequence[int]) -> torch.Tensor:
    """``w_c = N / (K n_c)``; balanced counts give all ones."""
    counts = [int(c) for c in counts]
    for c, n in enumerate(counts):
        if n < 1:
            raise ConfigError(f"class {c} has no training examples")
    total, k = sum(counts), len(counts)
    return torch.tensor([total / (k * n) for n in counts], dtype=torch.float64)


def _check_targets(logits: torch.Tensor, target) -> tuple[torch.Tensor, torch.Tensor]:
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    if target.numel() != logits.shape[0]:
        raise DataError(f"{target.numel()} targets for {logits.shape[0]} logit rows")
    k = logits.shape[1]
    if ((target < 0) | (target >= k)).any():
        raise DataError(f"target label out of range [0, {k})")
    return logits, target


def _weighted_mean(terms: torch.Tensor, target: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    wt = w.to(terms.dtype)[target]
    return (wt * terms).sum() / wt.sum()


def weighted_ce(logits: torch.Tensor, target, w: torch.Tensor) -> torch.Tensor:
    """Weighted cross-entropy; a batch reduces to the weighted mean over its targets."""
    logits, target = _check_targets(logits, target)
    logp = torch.log_softmax(logits, dim=-1).gather(1, target[:, None])[:, 0]
    return _weighted_mean(-logp, target, w)


def focal_loss(logits: torch.Tensor, target, w: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    logits, target = _check_targets(logits, target)
    logp = torch.log_softmax(logits, dim=-1).gather(1, target[:, None])[:, 0]
    if gamma == 0:
        mod = torch.ones_like(logp)
    else:
        mod = (1.0 - logp.exp()).clamp_min(0.0) ** gamma
    return _weighted_mean(-mod * logp, target, w)


def loss_fn(cfg: TrainConfig, logits: torch.Tensor, target, w: torch.Tensor) -> torch.Tensor:
    if cfg.loss is LossKind.FOCAL:
        return focal_loss(logits, target, w, cfg.focal_gamma)
    return weighted_ce(logits, target, w)


# ---------------------------------------------------------------------------
# schedule, optimizer, clipping


def cosine_warmup_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr_max over the warmup, then half-cosine down to lr_min at ``total_steps``."""
    w = cfg.warmup_steps
    if total_steps <= w:
        raise ConfigError(f"total_steps ({total_steps}) must exceed warmup_steps ({w})")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step <= w:
        return cfg.lr_max * step / w if w else cfg.lr_max
    frac = (step - w) / (total_steps - w)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction.

    Every gradient is checked before anything is modified, so a non-finite
    gradient leaves params and state untouched.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if name in state.m and state.m[name].shape != g.shape:
            raise ConfigError(f"moment shape mismatch for {name!r}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        p.mul_(1.0 - lr * cfg.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(cfg.adam_eps)
        p.addcdiv_(m, denom, value=-lr / c1)


def clip_grad_norm(grads: dict[str, torch.Tensor], threshold: float) -> float:
    """Scale all grads in place so the global L2 norm is at most ``threshold``; returns the pre-clip norm."""
    if threshold <= 0:
        raise ConfigError(f"clip threshold must be > 0, got {threshold}")
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if norm > threshold:
        scale = threshold / norm
        for g in grads.values():
            g.mul_(scale)
    return norm


# ---------------------------------------------------------------------------
# sampling


def balanced_batches(labels: Sequence[int], batch_size: int, rng: np.random.Generator) -> Iterator[list[int]]:
    """One epoch of class round-robin batches.

    Each class draws from its own queue, reshuffled when exhausted. The epoch
    covers ``K * max class count`` draws, rounded up to whole batches.
    """
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    k = int(labels.max()) + 1 if labels.size else 0
    empty = [c for c in range(k) if c not in classes]
    if not labels.size or empty:
        raise ConfigError(f"classes {empty} have no examples" if empty else "no labels to sample")
    pools = [np.flatnonzero(labels == c) for c in range(k)]
    queues: list[list[int]] = [[] for _ in range(k)]

    def draw(c: int) -> int:
        if not queues[c]:
            queues[c] = pools[c][rng.permutation(len(pools[c]))].tolist()
        return queues[c].pop()

    n_batches = math.ceil(k * max(len(p) for p in pools) / batch_size)
    cursor = 0
    for _ in range(n_batches):
        batch = []
        for _ in range(batch_size):
            batch.append(draw(cursor % k))
            cursor += 1
        yield batch


def epoch_batches(
    labels: Sequence[int], cfg: TrainConfig, rng: np.random.Generator
) -> list[list[int]]:
    if cfg.sampler is SamplerKind.BALANCED:
        return list(balanced_batches(labels, cfg.batch_size, rng))
    order = rng.permutation(len(labels)).tolist()
    return [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]


def steps_per_epoch(labels: Sequence[int], cfg: TrainConfig) -> int:
    if cfg.sampler is SamplerKind.BALANCED:
        k = int(max(labels)) + 1
        return math.ceil(k * max(label_counts(labels, k)) / cfg.batch_size)
    return math.ceil(len(labels) / cfg.batch_size)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"FSCK1\n"
_LEN = struct.Struct("<Q")


def encode_checkpoint(state: dict[str, torch.Tensor], manifest_hash: str) -> bytes:
    """Deterministic blob: magic, header length, sorted-key JSON header, little-endian payload."""
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"manifest_hash": manifest_hash, "tensors": entries}, sort_keys=True).encode()
    return CKPT_MAGIC + _LEN.pack(len(header)) + header + b"".join(chunks)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, torch.Tensor], str]:
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise IngestionError(f"{source}: not a checkpoint (bad magic at byte 0)")
    pos = len(CKPT_MAGIC)
    if len(buf) < pos + _LEN.size:
        raise IngestionError(f"{source}: truncated header at byte {pos}")
    (hlen,) = _LEN.unpack_from(buf, pos)
    pos += _LEN.size
    try:
        header = json.loads(buf[pos : pos + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IngestionError(f"{source}: corrupt header at byte {pos}") from exc
    base = pos + hlen
    state = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        start = base + e["offset"]
        if start + n > len(buf):
            raise IngestionError(f"{source}: truncated payload for {e['name']} at byte {start}")
        arr = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=start)
        state[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="))).reshape(e["shape"])
    return state, header["manifest_hash"]


def save_checkpoint(path: str | os.PathLike, state: dict[str, torch.Tensor], manifest_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state, manifest_hash))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], str]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise IngestionError(f"checkpoint not found: {path}") from exc
    return decode_checkpoint(buf, str(path))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_state: dict[str, torch.Tensor]
    best_epoch: int
    best_macro_f1: float
    log: list[dict]
    total_steps: int


@torch.no_grad()
def predict_labels(model: nn.Module, examples: Sequence[Example], dtype=torch.float32) -> list[int]:
    was_training = model.training
    model.eval()
    out = [int(model(**model.prepare(ex, dtype)).argmax()) for ex in examples]
    model.train(was_training)
    return out


def _format_metrics(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def train(
    model: nn.Module,
    dataset: Dataset,
    cfg: TrainConfig,
    aug: AugmentConfig,
    out_dir: str | os.PathLike | None = None,
    manifest_hash: str = "",
    on_epoch=None,
) -> TrainResult:
    """Train on the ``train`` split, select the epoch with the best validation macro-F1.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one JSON line per epoch)
    and ``checkpoint.bin`` holding the best parameters.
    """
    cfg.validate()
    train_set = dataset.split("train")
    val_set = dataset.split("val")
    if not train_set:
        raise ConfigError("dataset has no 'train' split")
    if not val_set:
        raise ConfigError("dataset has no 'val' split")
    num_classes = model.cfg.num_classes
    labels = [ex.label for ex in train_set]
    if max(labels) >= num_classes or max(ex.label for ex in val_set) >= num_classes:
        raise ConfigError(f"dataset labels exceed the head's {num_classes} classes")
    weights = compute_class_weights(label_counts(labels, num_classes))
    per_epoch = steps_per_epoch(labels, cfg)
    total = cfg.epochs * per_epoch
    cosine_warmup_lr(0, total, cfg)  # validates total > warmup

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    params = dict(model.named_parameters())
    state = AdamState()
    val_refs = [ex.label for ex in val_set]

    log: list[dict] = []
    best_f1, best_epoch, best_state = -1.0, 0, copy.deepcopy(model.state_dict())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        for batch in epoch_batches(labels, cfg, rng):
            step += 1
            lr = cosine_warmup_lr(step, total, cfg)
            logits = []
            for i in batch:
                ex = augment_example(train_set[i], aug, stream_for(aug.seed, epoch, train_set[i].id))
                logits.append(model(**model.prepare(ex, dtype)))
            target = [train_set[i].label for i in batch]
            loss = loss_fn(cfg, torch.stack(logits), target, weights)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at step {step}")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            clip_grad_norm(grads, cfg.clip_norm)
            adamw_step(params, grads, state, lr, cfg)
            losses.append(float(loss.detach()))

        metrics = all_metrics(val_refs, predict_labels(model, val_set, dtype), num_classes)
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_macro_f1": metrics["macro_f1"],
            "val_micro_f1": metrics["micro_f1"],
            "val_precision": metrics["precision"],
            "val_recall": metrics["recall"],
            "lr": lr,
        }
        log.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(_format_metrics(rec) + "\n")
        if metrics["macro_f1"] > best_f1:
            best_f1, best_epoch = metrics["macro_f1"], epoch
            best_state = copy.deepcopy(model.state_dict())
        if on_epoch is not None:
            on_epoch(rec)

    if out is not None:
        save_checkpoint(out / "checkpoint.bin", best_state, manifest_hash)
    return TrainResult(best_state, best_epoch, best_f1, log, total)


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
