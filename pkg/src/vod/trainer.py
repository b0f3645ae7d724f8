"""Supervised training on difference volumes with a step learning-rate schedule."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Network, save_checkpoint, volumes_to_batch
from .errors import DivergedLoss, SingleClassData
from .metrics import compute_auc
from .store import SegmentSet

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_auc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    lr_step: int = 10
    lr_gamma: float = 0.1
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    balance_classes: bool = True
    eval_batch_size: int = 32
    # batches used to recompute BN population statistics after each epoch; 0 keeps running averages
    precise_bn_batches: int = 200

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (self.base_lr > 0 and self.lr_step >= 1 and self.batch_size >= 1 and self.weight_decay >= 0):
            raise ValueError("base_lr, lr_step and batch_size must be positive, weight_decay >= 0")
        if self.precise_bn_batches < 0:
            raise ValueError("precise_bn_batches must be >= 0")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must lie in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_auc: float
    seconds: float = 0.0


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def write_csv(self, path) -> Path:
        """Write the per-epoch metrics; wall time goes to a ``timing.csv`` sibling."""
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(HISTORY_FIELDS)
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.val_loss), repr(e.val_auc)])
        with open(path.with_name("timing.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("epoch", "seconds"))
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.seconds:.3f}"])
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return cls([EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                                float(r["val_loss"]), float(r["val_auc"])) for r in rows])


def step_lr(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // cfg.lr_step
    factor = 1.0 / cfg.lr_gamma
    if factor == round(factor):
        # dividing by an integral factor keeps decade schedules on the exact decimal values
        return cfg.base_lr / round(factor) ** k
    return cfg.base_lr * cfg.lr_gamma**k


def make_optimizer(net: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        # decoupled decay: shrinkage is applied to the weights, not folded into the moments
        return torch.optim.AdamW(net.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(net.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def epoch_order(labels: np.ndarray, epoch: int, cfg: TrainConfig) -> np.ndarray:
    """Shuffled sample order for one epoch, subsampling the majority class if balancing."""
    rng = np.random.default_rng([cfg.seed, epoch])
    idx = np.arange(len(labels))
    if cfg.balance_classes:
        pos, neg = idx[labels == 1], idx[labels == 0]
        n = min(len(pos), len(neg))
        if len(pos) != len(neg):
            pos = pos if len(pos) == n else np.sort(rng.choice(pos, n, replace=False))
            neg = neg if len(neg) == n else np.sort(rng.choice(neg, n, replace=False))
            idx = np.concatenate([neg, pos])
    return idx[rng.permutation(len(idx))]


def batches(order: np.ndarray, size: int):
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    # a singleton batch cannot provide batch statistics
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks = chunks[:-1]
    return chunks


@torch.no_grad()
def precise_bn(net: Network, data: SegmentSet, order: np.ndarray, batch_size: int, max_batches: int) -> None:
    """Replace BN running statistics by exact averages over up to ``max_batches`` training batches.

    Running averages lag behind fast-moving weights on short schedules; evaluation with
    them can collapse every prediction to one class.
    """
    bns = [m for m in net.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    chunks = batches(order, batch_size)[:max_batches]
    if not bns or not chunks:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative moving average
    net.train()
    dtype = _dtype(net)
    for idx in chunks:
        net(volumes_to_batch([data.data[i] for i in idx], dtype=dtype))
    for m, mom in zip(bns, saved):
        m.momentum = mom


def _dtype(net):
    return next(net.parameters()).dtype


@torch.no_grad()
def score_segments(net: Network, data: SegmentSet, batch_size: int = 32) -> tuple[np.ndarray, float]:
    """P(fake) per segment and the mean cross-entropy; leaves ``net`` in eval mode."""
    net.eval()
    scores, loss_sum = [], 0.0
    for i in range(0, len(data), batch_size):
        x = volumes_to_batch(data.data[i : i + batch_size], dtype=_dtype(net))
        y = torch.from_numpy(data.labels[i : i + batch_size])
        logits = net(x)
        loss_sum += float(F.cross_entropy(logits, y, reduction="sum"))
        z = logits.double()
        scores.append(torch.softmax(z - z.max(dim=1, keepdim=True).values, dim=1)[:, 1].numpy())
    if not scores:
        return np.zeros(0), float("nan")
    return np.concatenate(scores), loss_sum / len(data)


def evaluate_epoch(net: Network, val_set: SegmentSet, batch_size: int = 32) -> tuple[float, float]:
    """Validation loss and segment AUC (NaN when the set lacks a class)."""
    if len(val_set) == 0:
        return float("nan"), float("nan")
    scores, loss = score_segments(net, val_set, batch_size)
    if len(set(val_set.labels.tolist())) < 2:
        return loss, float("nan")
    return loss, compute_auc(scores, val_set.labels)


def train(net: Network, train_set: SegmentSet, val_set: SegmentSet | None, cfg: TrainConfig,
          out_dir=None, extra_state: dict | None = None) -> tuple[Network, TrainHistory]:
    """Optimise cross-entropy; writes ``history.csv``, ``best.ckpt`` and ``last.ckpt`` into ``out_dir``.

    ``extra_state`` is merged into every checkpoint's state record.
    """
    if len(train_set) == 0:
        raise SingleClassData("empty training set")
    if len(set(train_set.labels.tolist())) < 2:
        raise SingleClassData("training data must contain both real and fake segments")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    val_set = val_set if val_set is not None else SegmentSet([], np.zeros(0, dtype=np.int64), [], [])

    torch.manual_seed(cfg.seed)
    opt = make_optimizer(net, cfg)
    dtype = _dtype(net)
    history = TrainHistory()
    best_auc = -math.inf

    def state(epoch, **kw):
        return {**(extra_state or {}), "epoch": epoch, "seed": cfg.seed, "train_config": asdict(cfg), **kw}

    if out_dir is not None:
        # initial state doubles as the fallback if the first epoch diverges
        save_checkpoint(out_dir / "last.ckpt", net, state(-1))
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = step_lr(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        net.train()
        total, count = 0.0, 0
        for idx in batches(epoch_order(train_set.labels, epoch, cfg), cfg.batch_size):
            x = volumes_to_batch([train_set.data[i] for i in idx], dtype=dtype)
            y = torch.from_numpy(train_set.labels[idx])
            loss = F.cross_entropy(net(x), y)
            if not torch.isfinite(loss):
                if out_dir is not None:
                    log.error("non-finite loss at epoch %d; last good state is last.ckpt", epoch)
                raise DivergedLoss(f"loss became {float(loss)} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        if cfg.precise_bn_batches > 0:
            precise_bn(net, train_set, epoch_order(train_set.labels, epoch, cfg), cfg.batch_size,
                       cfg.precise_bn_batches)
        val_loss, val_auc = evaluate_epoch(net, val_set, cfg.eval_batch_size)
        rec = EpochRecord(epoch, lr, total / max(count, 1), val_loss, val_auc, time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info("epoch %d lr=%.2e train_loss=%.4f val_loss=%.4f val_auc=%.4f", epoch, lr, rec.train_loss,
                 val_loss, val_auc)
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", net, state(epoch, val_auc=val_auc), opt)
            score = -math.inf if math.isnan(val_auc) else val_auc
            if score > best_auc or not (out_dir / "best.ckpt").exists():
                best_auc = score
                save_checkpoint(out_dir / "best.ckpt", net, state(epoch, val_auc=val_auc), opt)
            history.write_csv(out_dir / "history.csv")
    if out_dir is not None and cfg.epochs == 0:
        save_checkpoint(out_dir / "best.ckpt", net, state(-1))
        history.write_csv(out_dir / "history.csv")
    net.eval()
    return net, history
