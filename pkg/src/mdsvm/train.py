"""Adam training loops for both stages, with step-decay schedules and loss traces."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .formats import Volume, write_checkpoint
from .losses import dice_loss, focal_loss
from .pipeline import BlockIndex, PipelineConfig, coarse_segment, downsample_volume, guidance_mask, plan_blocks
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 25
    lr: float = 1e-3
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "dice"

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.stage not in (1, 2):
            raise ContractError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch size must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ContractError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and (self.milestones[0] < 1 or self.milestones[-1] >= self.epochs):
            raise ContractError(f"milestones must lie in [1, epochs), got {self.milestones}")
        if self.loss not in ("dice", "focal"):
            raise ContractError(f"unknown loss {self.loss!r}")

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "TrainConfig":
        base = {1: dict(epochs=25, lr=1e-3), 2: dict(epochs=50, lr=1e-3, milestones=(30, 40))}[stage]
        base.update(overrides)
        return cls(stage=stage, **base)

    def lr_at(self, epoch: int) -> float:
        """Rate used during 0-based ``epoch``: lr * factor**(milestones already passed)."""
        return self.lr * self.factor ** sum(1 for m in self.milestones if m <= epoch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad ** 2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    dice: float  # hard Dice of the epoch's forward outputs before each update


@dataclass
class TrainResult:
    net: object
    trace: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def trace_text(self) -> str:
        return format_trace(self.trace)


def format_trace(trace) -> str:
    return "".join(f"{r.epoch}\t{r.loss:.10g}\t{r.lr:.10g}\n" for r in trace)


def first_bad_gradient(net) -> str | None:
    for name, p in net.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name
    return None


def train_stage(dataset, config: TrainConfig, net, checkpoint: str | Path | None = None,
                checkpoint_meta: dict | None = None,
                stop: Callable[[EpochRecord, object], bool] | None = None) -> TrainResult:
    """Train ``net`` in place on ``dataset``, a list of (image, label) arrays of equal shape.

    Checkpoints go to ``checkpoint`` at the end and to ``<stem>.e<m><suffix>``
    at each milestone.  ``stop(record, net)`` may end training early.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    shapes = {tuple(np.shape(x)) for x, _ in dataset}
    if len(shapes) != 1:
        raise ContractError(f"training samples must share one shape, got {sorted(shapes)}")
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), config.beta1, config.beta2, config.eps)
    loss_fn = dice_loss if config.loss == "dice" else focal_loss
    result = TrainResult(net)
    ckpt = Path(checkpoint) if checkpoint is not None else None
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(dataset))
        losses, inter, total = [], 0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = np.stack([np.asarray(dataset[i][0], dtype=np.float64) for i in idx])[:, None]
            y = np.stack([np.asarray(dataset[i][1], dtype=np.float64) for i in idx])[:, None]
            for p in opt.params:
                p.grad = None
            out = net(Tensor(x))
            loss = loss_fn(out, y)
            if not math.isfinite(float(loss.data)):
                raise NumericalAbort(f"epoch {epoch}: non-finite loss {float(loss.data)}")
            loss.backward()
            bad = first_bad_gradient(net)
            if bad is not None:
                raise NumericalAbort(f"epoch {epoch}: non-finite gradient in parameter {bad}")
            opt.step(lr)
            losses.append(float(loss.data))
            pred = out.data > 0.5
            inter += int((pred & (y > 0.5)).sum())
            total += int(pred.sum()) + int((y > 0.5).sum())
        rec = EpochRecord(epoch, float(np.mean(losses)), lr, 1.0 if total == 0 else 2.0 * inter / total)
        result.trace.append(rec)
        log.info("epoch %d loss %.6f lr %.3g dice %.4f", epoch, rec.loss, lr, rec.dice)
        if ckpt is not None and (epoch + 1) in config.milestones:
            path = ckpt.with_name(f"{ckpt.stem}.e{epoch + 1}{ckpt.suffix}")
            write_checkpoint(path, net.state(), _meta(net, config, checkpoint_meta, epoch + 1))
            result.checkpoints.append(str(path))
        if stop is not None and stop(rec, net):
            break
    if ckpt is not None:
        write_checkpoint(ckpt, net.state(), _meta(net, config, checkpoint_meta, len(result.trace)))
        result.checkpoints.append(str(ckpt))
    return result


def _meta(net, config: TrainConfig, extra: dict | None, epochs_done: int) -> dict:
    meta = {"network": net.config.to_dict(), "train": config.to_dict(), "epochs_done": epochs_done}
    meta.update(extra or {})
    return meta


# -- datasets ------------------------------------------------------------------

def stage1_dataset(cases, coarse_shape) -> list[tuple[np.ndarray, np.ndarray]]:
    """Whole volumes resampled to the coarse shape."""
    return [(downsample_volume(img, coarse_shape).data.astype(np.float64),
             downsample_volume(lbl, coarse_shape).data.astype(np.float64)) for img, lbl in cases]


def stage2_dataset(cases, config: PipelineConfig, net1=None, guidance: str = "coarse", ratio: int = 3,
                   seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Full-resolution blocks at ``ratio`` positives per negative.

    Candidate blocks come from the guidance mask (coarse prediction or ground
    truth).  A block is positive when its label has foreground.  All positives
    are kept; negatives are drawn from guided candidates first and topped up
    with random label-free blocks.
    """
    if guidance not in ("coarse", "gt"):
        raise ContractError(f"guidance must be 'coarse' or 'gt', got {guidance!r}")
    if guidance == "coarse" and net1 is None:
        raise ContractError("coarse guidance needs a stage-1 network")
    rng = np.random.default_rng(seed)
    pos, neg, spare = [], [], []
    for img, lbl in cases:
        image = img.data.astype(np.float64)
        label = lbl.data.astype(np.float64)
        if guidance == "coarse":
            mask = guidance_mask(coarse_segment(image, net1, config.coarse_shape), image.shape, config.threshold)
        else:
            mask = label > 0
        blocks = plan_blocks(mask, config.block_side, config.dilation)
        seen = set()
        for b in blocks:
            seen.add(b.origin)
            item = (image[b.slices], label[b.slices])
            (pos if item[1].any() else neg).append(item)
        # random label-free fallback candidates for this case
        for _ in range(4):
            origin = tuple(int(rng.integers(0, n - config.block_side + 1)) for n in image.shape)
            b = BlockIndex(origin, config.block_side, image.shape)
            if origin not in seen and not label[b.slices].any():
                seen.add(origin)
                spare.append((image[b.slices], label[b.slices]))
    want = math.ceil(len(pos) / ratio) if pos else 1
    chosen = []
    for pool in (neg, spare):
        k = min(len(pool), want - len(chosen))
        if k > 0:
            chosen += [pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False))]
    data = pos + chosen
    if not data:
        raise ContractError("no stage-2 training blocks could be formed")
    return data


def as_cases(pairs) -> list[tuple[Volume, Volume]]:
    return [(img if isinstance(img, Volume) else Volume.intensity(img),
             lbl if isinstance(lbl, Volume) else Volume.label(lbl)) for img, lbl in pairs]
