"""SGD training loop with momentum, weight decay, and a step learning-rate
schedule, plus run-directory persistence (metrics.csv, checkpoints, resume).

Per-epoch randomness (shuffle order, dropout masks) is derived from
(seed, epoch), so a run resumed from an epoch-boundary checkpoint continues
on exactly the stream an uninterrupted run would have used.
"""

import csv
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .arch import ArchConfig, Network, build_network
from .checkpoint import load_checkpoint, apply_to_network, save_checkpoint
from .data import Dataset, batches
from .ops import softmax_cross_entropy
from .tensor import Tensor, backward

DEFAULT_SCHEDULE = ((0, 0.1), (150, 0.01), (225, 0.001))

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_acc",
                  "test_loss", "test_acc", "wall_seconds"]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    keep_prob: float = 0.8
    epochs: int = 300
    lr_schedule: Tuple[Tuple[int, float], ...] = DEFAULT_SCHEDULE
    seed: int = 0
    nesterov: bool = False
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.keep_prob <= 1.0):
            raise ValueError("keep_prob must be in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.augment:
            raise ValueError("data augmentation is not supported; augment must stay off")
        sched = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        if not sched or sched[0][0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        starts = [e for e, _ in sched]
        if sorted(set(starts)) != starts:
            raise ValueError("lr_schedule epochs must be strictly increasing")
        if any(lr <= 0 for _, lr in sched):
            raise ValueError("lr_schedule rates must be positive")
        object.__setattr__(self, "lr_schedule", sched)


def lr_at(schedule: Sequence[Tuple[int, float]], epoch: int) -> float:
    """Rate of the latest schedule entry whose start epoch is <= epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    current = schedule[0][1]
    for start, lr in schedule:
        if start <= epoch:
            current = lr
    return current


@dataclass
class SGDState:
    velocity: List[np.ndarray]

    @classmethod
    def for_network(cls, network: Network) -> "SGDState":
        return cls([np.zeros_like(t.data) for _, t in network.parameters()])


def sgd_step(params: Sequence[Tuple[str, Tensor]], state: SGDState, lr: float,
             momentum: float, weight_decay: float, nesterov: bool = False) -> None:
    """g <- grad + wd*param;  v <- momentum*v + g;  param <- param - lr*v.

    Weight decay applies to every trainable tensor, batch-norm scale/shift
    and bias included.  The nesterov variant steps along g + momentum*v.
    """
    if len(params) != len(state.velocity):
        raise ValueError("sgd_step: parameter/velocity count mismatch")
    for (_, p), v in zip(params, state.velocity):
        if v.shape != p.data.shape:
            raise ValueError("sgd_step: velocity shape mismatch")
        g = (p.grad if p.grad is not None else 0.0) + weight_decay * p.data
        v *= momentum
        v += g
        if nesterov:
            p.data -= lr * (g + momentum * v)
        else:
            p.data -= lr * v


def train_epoch(network: Network, ds: Dataset, config: TrainConfig, state: SGDState,
                epoch: int) -> Tuple[float, float]:
    """One shuffled pass; returns (mean loss, accuracy) over the pass."""
    if len(ds) == 0:
        raise ValueError("train_epoch: empty dataset")
    network.train_mode()
    network.set_dropout_rng(np.random.default_rng([config.seed, epoch, 1]))
    lr = lr_at(config.lr_schedule, epoch)
    params = network.parameters()

    loss_sum = 0.0
    correct = 0
    for images, labels in batches(ds, config.batch_size, shuffle=True,
                                  seed=[config.seed, epoch, 0]):
        logits = network(Tensor(images))
        loss, probs = softmax_cross_entropy(logits, labels)
        network.zero_grads()
        backward(loss)
        sgd_step(params, state, lr, config.momentum, config.weight_decay,
                 nesterov=config.nesterov)
        loss_sum += loss.item() * len(labels)
        correct += int((probs.data.argmax(axis=1) == labels).sum())
    return loss_sum / len(ds), correct / len(ds)


def evaluate(network: Network, ds: Dataset, batch_size: int = 64) -> Tuple[float, float]:
    """Mean loss and top-1 accuracy in eval mode; mutates nothing."""
    if len(ds) == 0:
        raise ValueError("evaluate: empty dataset")
    network.eval_mode()
    loss_sum = 0.0
    correct = 0
    for images, labels in batches(ds, batch_size, shuffle=False):
        logits = network(Tensor(images))
        loss, probs = softmax_cross_entropy(logits, labels)
        loss_sum += loss.item() * len(labels)
        correct += int((probs.data.argmax(axis=1) == labels).sum())
    return loss_sum / len(ds), correct / len(ds)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    wall_seconds: float

    def as_csv(self) -> List[str]:
        return [str(self.epoch)] + [repr(v) for v in
                (self.lr, self.train_loss, self.train_acc,
                 self.test_loss, self.test_acc, self.wall_seconds)]


@dataclass
class RunRecord:
    rows: List[EpochRow] = field(default_factory=list)


def read_metrics(path: str) -> List[EpochRow]:
    rows: List[EpochRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        for rec in reader:
            rows.append(EpochRow(int(rec[0]), *map(float, rec[1:])))
    return rows


def _write_metrics(path: str, rows: List[EpochRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())


def _latest_checkpoint(out_dir: str) -> Optional[Tuple[int, str]]:
    best = None
    for name in os.listdir(out_dir):
        if name.startswith("ckpt_") and name.endswith(".bin"):
            try:
                epoch = int(name[5:-4])
            except ValueError:
                continue
            if best is None or epoch > best[0]:
                best = (epoch, os.path.join(out_dir, name))
    return best


def run_training(arch_config: ArchConfig, train_config: TrainConfig,
                 train_ds: Dataset, test_ds: Dataset, out_dir: str,
                 checkpoint_every: int = 0,
                 log: Optional[Callable[[str], None]] = None) -> RunRecord:
    """Train into a run directory: append-only metrics.csv plus checkpoints at
    learning-rate boundaries, every `checkpoint_every` epochs when set, and at
    the end.  If the directory already holds checkpoints, training resumes
    from the latest one.
    """
    os.makedirs(out_dir, exist_ok=True)
    network = build_network(arch_config, init_seed=train_config.seed,
                            keep_prob=train_config.keep_prob)
    state = SGDState.for_network(network)

    start_epoch = 0
    latest = _latest_checkpoint(out_dir)
    if latest is not None:
        data = load_checkpoint(latest[1])
        apply_to_network(data, network)
        if data.velocities is not None:
            state = SGDState([v.copy() for v in data.velocities])
        start_epoch = data.epoch
        if log:
            log(f"resuming from {latest[1]} at epoch {start_epoch}")

    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows: List[EpochRow] = []
    if os.path.exists(metrics_path):
        rows = [r for r in read_metrics(metrics_path) if r.epoch < start_epoch]
    _write_metrics(metrics_path, rows)

    boundaries = {e for e, _ in train_config.lr_schedule if e > 0}
    record = RunRecord(rows=rows)
    for epoch in range(start_epoch, train_config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(train_config.lr_schedule, epoch)
        train_loss, train_acc = train_epoch(network, train_ds, train_config, state, epoch)
        test_loss, test_acc = evaluate(network, test_ds, train_config.batch_size)
        row = EpochRow(epoch, lr, train_loss, train_acc, test_loss, test_acc,
                       time.perf_counter() - t0)
        record.rows.append(row)
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow(row.as_csv())
        if log:
            log(f"epoch {epoch}: lr {lr:g} train {train_loss:.4f}/{train_acc:.3f} "
                f"test {test_loss:.4f}/{test_acc:.3f}")
        done = epoch + 1
        if done in boundaries or (checkpoint_every and done % checkpoint_every == 0) \
                or done == train_config.epochs:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{done}.bin"), network,
                            epoch=done, velocities=state.velocity)
    if train_config.epochs == start_epoch and latest is None:
        save_checkpoint(os.path.join(out_dir, f"ckpt_{train_config.epochs}.bin"),
                        network, epoch=train_config.epochs, velocities=state.velocity)
    return record
