"""Cross-entropy training loop: Adam, validation-accuracy early stopping,
per-epoch metrics, and the multi-model comparison harness with CSV export."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .models import Model
from .tensor import Tape, Tensor, softmax_cross_entropy

CSV_HEADER = "model,epoch,train_loss,train_acc,val_loss,val_acc"


class TrainingError(Exception):
    pass


def cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    return softmax_cross_entropy(logits, labels, tape)


def accuracy(logits: Tensor, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    pred = np.argmax(logits.data, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


class Adam:
    """Bias-corrected Adam over a named parameter registry."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, grads: dict[int, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for n, p in self.params.items():
            g = grads.get(p.id)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise TrainingError(f"gradient shape {g.shape} != param {n} {p.data.shape}")
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            p.data -= self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)


@dataclass
class EarlyStopPolicy:
    patience: int = 5
    min_delta: float = 0.001

    def stop_epoch(self, val_accs) -> int | None:
        """First epoch (1-based) after which training stops, or None.

        Stops once `patience` consecutive epochs fail to improve the best
        accuracy seen so far by more than min_delta.
        """
        best = -np.inf
        stale = 0
        for i, acc in enumerate(val_accs):
            if acc > best + self.min_delta:
                best = acc
                stale = 0
            else:
                stale += 1
                if stale >= self.patience:
                    return i + 1
        return None

    def should_stop(self, val_accs) -> bool:
        se = self.stop_epoch(val_accs)
        return se is not None and se == len(val_accs)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_ms: float


@dataclass
class TrainReport:
    model_name: str
    records: list = field(default_factory=list)
    stopped_early: bool = False
    stop_epoch: int = 0
    best_val_acc: float = 0.0
    test_acc: float | None = None

    def summary(self) -> str:
        lines = [f"model: {self.model_name}",
                 f"epochs run: {len(self.records)}",
                 f"stopped early: {self.stopped_early} (stop epoch {self.stop_epoch})",
                 f"best val acc: {self.best_val_acc:.6f}"]
        if self.test_acc is not None:
            lines.append(f"test acc (best-val checkpoint): {self.test_acc:.6f}")
        for r in self.records:
            lines.append(f"epoch {r.epoch}: train_loss={r.train_loss:.6f} "
                         f"train_acc={r.train_acc:.6f} val_loss={r.val_loss:.6f} "
                         f"val_acc={r.val_acc:.6f} ({r.wall_ms:.0f} ms)")
        return "\n".join(lines) + "\n"


def evaluate(model: Model, ds: D.Dataset, batch_size: int = 256):
    """Mean loss and accuracy over a dataset, no gradient recording."""
    losses, correct, total = 0.0, 0, 0
    plan = D.BatchPlan(batch_size=batch_size)
    for images, labels in D.batches(ds, plan, shuffle=False):
        logits = model.forward(Tensor(images.astype(model.dtype)))
        loss = cross_entropy(logits, labels)
        losses += float(loss.data) * len(labels)
        correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        total += len(labels)
    return losses / total, correct / total


def fit(model: Model, train: D.Dataset, val: D.Dataset, test: D.Dataset | None = None,
        policy: EarlyStopPolicy | None = None, epochs_max: int = 60,
        batch_size: int = 128, lr: float = 1e-3, seed: int = 0,
        log=None, stop_when=None) -> TrainReport:
    """Train with Adam until epochs_max or validation-accuracy early stop.

    `stop_when(record)` may end training early (used by budgeted sanity runs);
    test accuracy is evaluated once, at the best-validation checkpoint.
    """
    if epochs_max < 1:
        raise ValueError(f"epochs_max must be >= 1, got {epochs_max}")
    policy = policy or EarlyStopPolicy()
    opt = Adam(model.params, lr=lr)
    plan = D.BatchPlan(batch_size=batch_size, seed=seed)
    report = TrainReport(model_name=model.config.dataset)
    val_accs: list[float] = []
    best_state = None
    for epoch in range(1, epochs_max + 1):
        t0 = time.perf_counter()
        loss_sum, correct, total = 0.0, 0, 0
        for bi, (images, labels) in enumerate(D.batches(train, plan, epoch=epoch)):
            tape = Tape()
            logits = model.forward(Tensor(images.astype(model.dtype)), tape)
            loss = cross_entropy(logits, labels, tape)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = tape.backward(loss)
            opt.step(grads)
            loss_sum += float(loss.data) * len(labels)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            total += len(labels)
        val_loss, val_acc = evaluate(model, val)
        rec = EpochRecord(epoch, loss_sum / total, correct / total, val_loss, val_acc,
                          (time.perf_counter() - t0) * 1000.0)
        report.records.append(rec)
        val_accs.append(val_acc)
        if val_acc > report.best_val_acc or best_state is None:
            report.best_val_acc = max(report.best_val_acc, val_acc)
            best_state = model.state_copy()
        if log:
            log(f"epoch {epoch}: train_loss={rec.train_loss:.4f} "
                f"train_acc={rec.train_acc:.4f} val_loss={val_loss:.4f} "
                f"val_acc={val_acc:.4f}")
        if policy.should_stop(val_accs):
            report.stopped_early = True
            break
        if stop_when is not None and stop_when(rec):
            break
    report.stop_epoch = report.records[-1].epoch
    if test is not None and best_state is not None:
        current = model.state_copy()
        model.load_state(best_state)
        _, report.test_acc = evaluate(model, test)
        model.load_state(current)
    return report


def history_csv(reports: dict[str, TrainReport]) -> str:
    """Fig-style comparison table: one row per model-epoch, 6-decimal floats."""
    lines = [CSV_HEADER]
    for name, rep in reports.items():
        for r in rep.records:
            lines.append(f"{name},{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},"
                         f"{r.val_loss:.6f},{r.val_acc:.6f}")
    return "\n".join(lines) + "\n"


def compare(models: dict[str, Model], train: D.Dataset, val: D.Dataset,
            test: D.Dataset | None = None, policy: EarlyStopPolicy | None = None,
            epochs_max: int = 60, batch_size: int = 128, lr: float = 1e-3,
            seed: int = 0, log=None):
    """Train several models on identical splits and batch order; returns
    (reports by name, CSV text)."""
    datasets = {m.config.dataset for m in models.values()}
    if len(datasets) > 1:
        raise TrainingError(f"compare: models target different datasets {datasets}")
    ids = [id(t) for m in models.values() for t in m.params.values()]
    if len(ids) != len(set(ids)):
        raise TrainingError("compare: models share parameter tensors")
    reports = {}
    for name, model in models.items():
        rep = fit(model, train, val, test, policy=policy, epochs_max=epochs_max,
                  batch_size=batch_size, lr=lr, seed=seed,
                  log=(lambda s, n=name: log(f"[{n}] {s}")) if log else None)
        rep.model_name = name
        reports[name] = rep
    return reports, history_csv(reports)
