"""PGD adversarial training with SGD + momentum, a stepwise learning-rate
schedule, per-epoch standard/robust metrics and early-stopping accounting."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from curvlab.attacks import AttackConfig, pgd_linf
from curvlab.datasets import Dataset, Splits
from curvlab.errors import DataEmpty, NonFinite
from curvlab.models import ModelState, save_checkpoint

log = logging.getLogger(__name__)

# evaluation streams are fixed so every epoch faces the same random starts
_EVAL_STREAM = {"train": 1_000_001, "val": 1_000_002, "test": 1_000_003}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: tuple = (30, 45)
    lr_drop_factor: float = 10.0
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.08, 0.02, 10, 1, 0.0, 1.0))
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.08, 0.02, 20, 5, 0.0, 1.0))
    seed: int = 0
    eval_every: int = 1
    keep_all_checkpoints: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("lr_drop_epochs must be strictly increasing")
        if drops and drops[-1] > self.epochs:
            raise ValueError("lr_drop_epochs must not exceed epochs")
        if self.eval_every <= 0:
            raise ValueError("eval_every must be positive")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_std_loss: float
    train_std_err: float
    train_rob_loss: float
    train_rob_err: float
    val_rob_acc: float
    test_std_loss: float
    test_std_err: float
    test_rob_loss: float
    test_rob_err: float


METRIC_COLUMNS = [f.name for f in fields(MetricsRecord)]


@dataclass
class GapReport:
    robust_gap: float
    standard_gap: float
    best_val_rob_acc: float
    best_epoch: int
    overfit_gap: float
    final_train_rob_acc: float
    final_test_rob_acc: float
    final_train_std_acc: float
    final_test_std_acc: float
    # test accuracies of the checkpoint chosen on validation robust accuracy
    best_test_rob_acc: float
    best_test_std_acc: float


@dataclass
class TrainResult:
    state: ModelState
    history: list
    checkpoints: dict  # epoch -> ModelState (best-validation and final, or all)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``; each drop applies from its listed epoch on."""
    drops = sum(1 for e in cfg.lr_drop_epochs if epoch >= e)
    return cfg.lr0 / cfg.lr_drop_factor ** drops


def sgd_momentum_step(params, grads, buf, lr: float, momentum: float, weight_decay: float):
    """buf <- m buf + (g + wd w);  w <- w - lr buf.  Returns new (params, buf)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    buf = np.asarray(buf, dtype=np.float64)
    if params.shape != grads.shape or params.shape != buf.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, buf {buf.shape}")
    g_eff = grads + weight_decay * params
    new_buf = momentum * buf + g_eff
    new_params = params - lr * new_buf
    if not (np.all(np.isfinite(new_params)) and np.all(np.isfinite(new_buf))):
        raise NonFinite("non-finite parameters after SGD step")
    return new_params, new_buf


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def evaluate(model: ModelState, split: Dataset, eval_attack: AttackConfig, stream: int = 0, chunk: int = 1024):
    """(std_loss, std_err, rob_loss, rob_err) on a split.

    The clean input is always a robust candidate, so per-sample robust loss
    is at least the clean loss, and a sample counts as robustly correct only
    if both the clean and the adversarial inputs are classified correctly.
    """
    n = len(split)
    if n == 0:
        return float("nan"), float("nan"), float("nan"), float("nan")
    std_loss = np.empty(n)
    std_wrong = np.empty(n, dtype=bool)
    rob_loss = np.empty(n)
    rob_wrong = np.empty(n, dtype=bool)
    ids = np.arange(n)
    for s in _chunks(n, chunk):
        x, y = split.x[s], split.y[s]
        std_loss[s] = model.losses(x, y)
        std_wrong[s] = model.logits(x).argmax(axis=1) != y
        adv = pgd_linf(model, x, y, eval_attack, sample_ids=ids[s], stream=stream, include_clean=True)
        rob_loss[s] = adv.loss
        rob_wrong[s] = adv.success | std_wrong[s]
    return float(std_loss.mean()), float(std_wrong.mean()), float(rob_loss.mean()), float(rob_wrong.mean())


def _record(model: ModelState, data: Splits, cfg: TrainConfig, epoch: int, lr: float) -> MetricsRecord:
    tr = evaluate(model, data.train, cfg.eval_attack, _EVAL_STREAM["train"])
    va = evaluate(model, data.val, cfg.eval_attack, _EVAL_STREAM["val"])
    te = evaluate(model, data.test, cfg.eval_attack, _EVAL_STREAM["test"])
    return MetricsRecord(epoch, lr, tr[0], tr[1], tr[2], tr[3], 1.0 - va[3], te[0], te[1], te[2], te[3])


def train_adversarial(model: ModelState, data: Splits, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Vanilla PGD adversarial training: every update uses adversarial inputs only.

    Adversarial examples are generated against the current parameters.  The
    best-validation checkpoint (earliest on ties) and the final one are kept;
    with ``out_dir`` they are written as checkpoint files.
    """
    if len(data.train) == 0:
        raise DataEmpty("training split is empty")
    state = model.copy()
    buf = np.zeros_like(state.params)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    n = len(data.train)
    history: list[MetricsRecord] = []
    checkpoints: dict[int, ModelState] = {}
    best_epoch, best_val = None, -np.inf
    attack = cfg.attack
    clean_training = attack.epsilon == 0

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        perm = rng.permutation(n)
        for s in _chunks(n, cfg.batch_size):
            idx = perm[s]
            xb, yb = data.train.x[idx], data.train.y[idx]
            if not clean_training:
                xb = pgd_linf(state, xb, yb, attack, sample_ids=idx, stream=epoch).x_adv
            _, grads, _ = state.loss_and_param_grad(xb, yb)
            state.params, buf = sgd_momentum_step(state.params, grads, buf, lr, cfg.momentum, cfg.weight_decay)

        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rec = _record(state, data, cfg, epoch, lr)
            history.append(rec)
            log.info(
                "epoch %d lr %.4g train rob err %.4f test rob err %.4f val rob acc %.4f",
                epoch, lr, rec.train_rob_err, rec.test_rob_err, rec.val_rob_acc,
            )
            if cfg.keep_all_checkpoints:
                checkpoints[epoch] = state.copy()
            if rec.val_rob_acc > best_val:
                if best_epoch is not None and not cfg.keep_all_checkpoints:
                    checkpoints.pop(best_epoch, None)
                best_epoch, best_val = epoch, rec.val_rob_acc
                checkpoints[epoch] = state.copy()
    checkpoints[cfg.epochs] = state.copy()

    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(out / "best.ckpt", checkpoints[best_epoch])
        save_checkpoint(out / "final.ckpt", state)
        if cfg.keep_all_checkpoints:
            for e, st in sorted(checkpoints.items()):
                save_checkpoint(out / f"epoch_{e:04d}.ckpt", st)
    return TrainResult(state, history, checkpoints)


def best_record_index(history) -> int:
    """Index of the maximal val_rob_acc record, earliest on ties."""
    if not history:
        raise ValueError("empty history")
    vals = [r.val_rob_acc for r in history]
    return int(np.argmax(vals))


def gap_report(history) -> GapReport:
    last = history[-1]
    best = history[best_record_index(history)]
    train_rob, test_rob = 1.0 - last.train_rob_err, 1.0 - last.test_rob_err
    train_std, test_std = 1.0 - last.train_std_err, 1.0 - last.test_std_err
    best_rob, best_std = 1.0 - best.test_rob_err, 1.0 - best.test_std_err
    return GapReport(
        robust_gap=train_rob - test_rob,
        standard_gap=train_std - test_std,
        best_val_rob_acc=best.val_rob_acc,
        best_epoch=best.epoch,
        overfit_gap=best_rob - test_rob,
        final_train_rob_acc=train_rob,
        final_test_rob_acc=test_rob,
        final_train_std_acc=train_std,
        final_test_std_acc=test_std,
        best_test_rob_acc=best_rob,
        best_test_std_acc=best_std,
    )


def select_early_stop(history, checkpoints: dict):
    """Checkpoint with the best validation robust accuracy, plus the gap report."""
    report = gap_report(history)
    return checkpoints[report.best_epoch], report


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def write_metrics_csv(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in history:
            w.writerow([_fmt(getattr(rec, c)) for c in METRIC_COLUMNS])
    return path


def read_metrics_csv(path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricsRecord(**{c: (int(r[c]) if c == "epoch" else float(r[c])) for c in METRIC_COLUMNS})
        for r in rows
    ]
