"""SGD training loop, accuracy metrics, and per-epoch convergence records."""

import gc
import logging
import time
from dataclasses import dataclass

import numpy as np

from .errors import DivergedError
from .ops import cross_entropy
from .tensor import (Tensor, backward, no_grad, tape, tracker_current,
                     tracker_peak, tracker_reset)

log = logging.getLogger("eaanet")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"  # cosine | step
    seed: int = 0
    convergence_window: int = 5
    convergence_delta: float = 0.3
    augment: bool = True
    timing: bool = True  # off: write 0.0 seconds so metrics are byte-reproducible

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be >= 1")
        if self.lr_schedule not in ("cosine", "step"):
            raise ValueError("lr_schedule must be cosine or step")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    top1: float
    top5: float
    seconds: float
    peak_bytes: int


def schedule_lr(cfg, epoch):
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(cfg.epochs, 1)))
    drops = (epoch >= cfg.epochs * 0.5) + (epoch >= cfg.epochs * 0.75)
    return cfg.lr * (0.1 ** drops)


def sgd_step(params, state, lr, momentum=0.9, weight_decay=0.0):
    """Classical momentum: v <- m*v + g + wd*p; p <- p - lr*v.

    ``params`` is a list of (name, Tensor); ``state`` maps names to velocity
    buffers and is created lazily.
    """
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DivergedError("non-finite gradient in %s" % name)
        if weight_decay:
            g = g + weight_decay * p.data
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        p.data -= lr * v


def topk_accuracy(logits, labels, k):
    """Percent of rows whose label is among the k largest logits.

    Ties break toward the lower class index (stable sort on negated logits).
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if k > arr.shape[1]:
        raise ValueError("top-%d requested but only %d classes" % (k, arr.shape[1]))
    order = np.argsort(-arr, axis=1, kind="stable")[:, :k]
    hits = (order == labels[:, None]).any(axis=1)
    return 100.0 * float(hits.mean())


def evaluate(model, ds, batch=256):
    """(top1, top5) over the whole dataset in eval mode; batch-size invariant."""
    from .data import batch_iter
    if len(ds) == 0:
        raise ValueError("evaluate: empty dataset")
    hits1 = hits5 = 0
    with no_grad():
        for x, y in batch_iter(ds, batch):
            logits = model(x, training=False).data
            order = np.argsort(-logits, axis=1, kind="stable")
            hits1 += int((order[:, 0] == y).sum())
            k5 = min(5, logits.shape[1])
            hits5 += int((order[:, :k5] == y[:, None]).any(axis=1).sum())
    n = len(ds)
    return 100.0 * hits1 / n, 100.0 * hits5 / n


def train(model, train_ds, test_ds, cfg):
    """Per-epoch: shuffled SGD pass, then full test evaluation.

    Stops early once test top-1 has plateaued (max-min over the last
    ``convergence_window`` epochs below ``convergence_delta``). On NaN loss
    training aborts and the records so far are returned.
    """
    from .data import batch_iter
    cfg.validate()
    records = []
    state = {}
    params = model.parameters()
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg, epoch)
        gc.collect()  # unrelated garbage must not pollute the peak figure
        tracker_reset()
        floor = tracker_current()
        t0 = time.monotonic()
        losses = []
        try:
            for x, y in batch_iter(train_ds, cfg.batch_size,
                                   shuffle_seed=cfg.seed + epoch,
                                   augment=cfg.augment):
                loss = cross_entropy(model(x, training=True), y)
                lval = loss.item()
                if not np.isfinite(lval):
                    raise DivergedError("NaN loss at epoch %d" % epoch)
                model.zero_grad()
                backward(loss)
                sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay)
                losses.append(lval)
        except DivergedError as exc:
            log.error("training diverged: %s", exc)
            tape().clear()
            return records
        top1, top5 = evaluate(model, test_ds, cfg.batch_size)
        seconds = time.monotonic() - t0 if cfg.timing else 0.0
        # peak is the epoch's increment over its starting floor, so the
        # figure is reproducible regardless of what else is alive
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"),
                          top1, top5, seconds, tracker_peak() - floor)
        records.append(rec)
        log.info("epoch %d: loss %.4f top1 %.2f top5 %.2f lr %.4f",
                 epoch, rec.train_loss, top1, top5, lr)
        if len(records) >= cfg.convergence_window:
            tail = [r.top1 for r in records[-cfg.convergence_window:]]
            if max(tail) - min(tail) < cfg.convergence_delta:
                log.info("converged: top1 range %.3f over last %d epochs",
                         max(tail) - min(tail), cfg.convergence_window)
                break
    return records


METRICS_HEADER = "epoch,train_loss,top1,top5,seconds,peak_bytes"


def write_metrics_csv(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in records:
            fh.write("%d,%.6f,%.4f,%.4f,%.3f,%d\n"
                     % (r.epoch, r.train_loss, r.top1, r.top5, r.seconds,
                        r.peak_bytes))
