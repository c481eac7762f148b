"""Surrogate-gradient training: Adam, clipping, LR schedules, best-weight tracking, k-fold CV."""
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint, make_checkpoint, restore_model, save_checkpoint
from .efficiency import epoch_timer
from .errors import InvalidConfig, MissingGradient, NonFiniteLoss
from .metrics import aggregate, evaluate_predictions
from .model import build_model
from .tensor import backward, no_grad
from .volume_io import stratified_split


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_max_norm: float = 1.0
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    max_epochs: int = 50
    seed: int = 0
    scheduler: str = "plateau"
    # stop once eval-mode accuracy on the training set reaches this value (None: never)
    stop_at_train_accuracy: float = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 0:
            raise InvalidConfig("batch_size must be >= 1 and max_epochs >= 0")
        if min(self.lr, self.eps, self.clip_max_norm) <= 0 or self.weight_decay < 0:
            raise InvalidConfig("lr, eps and clip_max_norm must be positive, weight_decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("Adam betas must lie in [0, 1)")
        if self.plateau_patience < 1 or not 0 < self.plateau_factor < 1:
            raise InvalidConfig("need plateau_patience >= 1 and 0 < plateau_factor < 1")
        if self.scheduler not in ("plateau", "cosine"):
            raise InvalidConfig(f"scheduler must be 'plateau' or 'cosine', got {self.scheduler!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    stale: int = 0
    best_accuracy: float = None
    best_epoch: int = None
    epoch: int = 0
    rng_state: dict = None

    @classmethod
    def fresh(cls, model, cfg):
        m = {n: np.zeros_like(p.data) for n, p in model.named_parameters()}
        v = {n: np.zeros_like(p.data) for n, p in model.named_parameters()}
        rng = np.random.default_rng(cfg.seed)
        return cls(m, v, lr=cfg.lr, rng_state=rng.bit_generator.state)

    def rng(self):
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g

    def to_dict(self):
        return {"step": self.step, "lr": self.lr, "stale": self.stale,
                "best_accuracy": self.best_accuracy, "best_epoch": self.best_epoch,
                "epoch": self.epoch, "rng_state": self.rng_state}

    @classmethod
    def from_checkpoint(cls, ckpt):
        s = ckpt.train_state
        if s is None:
            raise InvalidConfig("checkpoint carries no training state")
        return cls({k: v.copy() for k, v in ckpt.adam_m.items()},
                   {k: v.copy() for k, v in ckpt.adam_v.items()}, **s)


@dataclass
class Dataset:
    """Encoded samples ``x: (N, T, C, D, H, W)`` with integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        if self.x.ndim == 5:
            self.x = self.x[:, :, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])

    def batch(self, idx):
        """``(T, B, C, D, H, W)`` input and labels for sample indices ``idx``."""
        xb = np.ascontiguousarray(np.swapaxes(self.x[idx], 0, 1))
        return xb, self.y[idx]

    @classmethod
    def from_samples(cls, samples):
        return cls(np.stack([s.tensor for s in samples]), [s.label for s in samples])


# -- pieces --------------------------------------------------------------
def compute_loss(logits_per_step, labels):
    """Cross-entropy averaged over timesteps and batch."""
    return F.cross_entropy_steps(logits_per_step, labels)


def clip_gradients(grads, max_norm):
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before scaling.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = math.fsum(float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
                   for g in grads)
    norm = math.sqrt(sq)
    if norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= g.dtype.type(s)
    return norm


def adam_step(state, params, grads, cfg, names=None):
    """Adam with bias correction and decoupled weight decay, in place."""
    names = names or [str(i) for i in range(len(params))]
    if any(g is None for g in grads):
        missing = [n for n, g in zip(names, grads) if g is None]
        raise MissingGradient(f"no gradient for {missing[:5]}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr = state.lr
    for name, p, g in zip(names, params, grads):
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        if cfg.weight_decay:
            p.data *= dt(1.0 - lr * cfg.weight_decay)
        denom = np.sqrt(v / dt(c2)) + dt(cfg.eps)
        p.data -= dt(lr) * (m / dt(c1)) / denom
    return state


def lr_schedule_step(state, metric, cfg):
    """Advance the scheduler after an epoch; returns the new learning rate.

    ``plateau``: strict improvement of ``metric`` resets the stale counter; after
    ``plateau_patience`` stale epochs the rate is multiplied by ``plateau_factor``.
    ``cosine``: ``lr0 * 0.5 * (1 + cos(pi * e / E))`` for completed epoch ``e``.
    The best metric is tracked in both modes.
    """
    improved = state.best_accuracy is None or metric > state.best_accuracy
    if improved:
        state.best_accuracy = float(metric)
        state.stale = 0
    else:
        state.stale += 1
    if cfg.scheduler == "cosine":
        e = state.epoch
        total = max(cfg.max_epochs, 1)
        state.lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(e, total) / total))
    elif not improved and state.stale >= cfg.plateau_patience:
        state.lr *= cfg.plateau_factor
        state.stale = 0
    return state.lr


def _softmax(z):
    z = z.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _spike_totals(stats):
    active = sum(a for a, _ in stats.values())
    total = sum(n for _, n in stats.values())
    return active, total


# -- loops ---------------------------------------------------------------
@dataclass
class EpochResult:
    split: str
    loss: float
    accuracy: float
    wall_time_s: float
    spikes: int
    sparsity: float
    grad_norm: float = None
    n_steps: int = 0

    def record(self, epoch, lr):
        return {"epoch": epoch, "split": self.split, "loss": self.loss, "accuracy": self.accuracy,
                "lr": lr, "grad_norm": self.grad_norm, "wall_time_s": self.wall_time_s,
                "spikes": self.spikes, "sparsity": self.sparsity}


def train_epoch(model, state, dataset, cfg):
    """One pass over ``dataset`` in a seeded random order; updates ``state`` in place."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    model.train()
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    rng = state.rng()
    order = rng.permutation(len(dataset))
    state.rng_state = rng.bit_generator.state
    loss_sum, correct, active, total, norms, steps = 0.0, 0, 0, 0, [], 0
    with epoch_timer() as clock:
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = dataset.batch(idx)
            model.zero_grad()
            out = model.forward(xb)
            loss = compute_loss(out.logits_per_step, yb)
            if not math.isfinite(loss.item()):
                raise NonFiniteLoss(f"loss became {loss.item()} at step {state.step + 1}")
            backward(loss)
            grads = [p.grad for p in params]
            missing = [n for n, g in zip(names, grads) if g is None]
            if missing:
                raise MissingGradient(f"no gradient reached {missing[:5]}")
            norms.append(clip_gradients(grads, cfg.clip_max_norm))
            adam_step(state, params, grads, cfg, names)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(out.fused_logits.data, axis=1) == yb))
            a, n = _spike_totals(out.spike_stats)
            active, total = active + a, total + n
            steps += 1
    model.zero_grad()
    return EpochResult("train", loss_sum / len(dataset), correct / len(dataset), clock.seconds,
                       active, 1.0 - active / total if total else 0.0,
                       grad_norm=float(np.mean(norms)), n_steps=steps)


def predict(model, dataset, batch_size=16):
    """Eval-mode class probabilities (softmax of fused logits) and mean loss."""
    model.eval()
    probs, loss_sum, active, total = [], 0.0, 0, 0
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(dataset)))
            xb, yb = dataset.batch(idx)
            out = model.forward(xb)
            loss_sum += compute_loss(out.logits_per_step, yb).item() * len(idx)
            probs.append(_softmax(out.fused_logits.data))
            a, n = _spike_totals(out.spike_stats)
            active, total = active + a, total + n
    p = np.concatenate(probs) if probs else np.zeros((0, model.cfg.n_classes))
    return p, loss_sum / max(len(dataset), 1), active, total


def evaluate(model, dataset, batch_size=16, split="val"):
    with epoch_timer() as clock:
        probs, loss, active, total = predict(model, dataset, batch_size)
    acc = float(np.mean(np.argmax(probs, axis=1) == dataset.y)) if len(dataset) else 0.0
    res = EpochResult(split, loss, acc, clock.seconds, active,
                      1.0 - active / total if total else 0.0)
    return res, probs


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_accuracy: float = None
    best_epoch: int = None
    state: TrainState = None
    best_checkpoint: Checkpoint = None


def fit(model, train_ds, cfg, val_ds=None, state=None, out_dir=None, log=None,
        best_name="best.ckpt", header_extra=None):
    """Train up to ``cfg.max_epochs`` (resuming from ``state.epoch``).

    The validation set (the training set when none is given) drives the
    scheduler and best-weight selection; ties keep the earlier epoch. With
    ``out_dir`` the best and the latest checkpoints are written there, the
    latter carrying full optimizer state for ``--resume``. ``log`` is a
    callable receiving one dict per epoch and split.
    """
    state = state or TrainState.fresh(model, cfg)
    result = FitResult(state=state, best_accuracy=state.best_accuracy, best_epoch=state.best_epoch)
    best = None
    while state.epoch < cfg.max_epochs:
        tr = train_epoch(model, state, train_ds, cfg)
        state.epoch += 1
        lr_used = state.lr
        if val_ds is not None and len(val_ds):
            va, _ = evaluate(model, val_ds, cfg.batch_size)
            metric = va.accuracy
        else:
            va, metric = None, tr.accuracy
        improved = state.best_accuracy is None or metric > state.best_accuracy
        lr_schedule_step(state, metric, cfg)
        if improved:
            state.best_epoch = state.epoch
            best = make_checkpoint(model, cfg, state, header_extra)
            if out_dir:
                save_checkpoint(os.path.join(out_dir, best_name), best)
        recs = [tr.record(state.epoch, lr_used)] + ([va.record(state.epoch, lr_used)] if va else [])
        result.history.extend(recs)
        if log is not None:
            for r in recs:
                log(r)
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "last.ckpt"),
                            make_checkpoint(model, cfg, state, header_extra))
        if cfg.stop_at_train_accuracy is not None:
            # judged in eval mode so the stopping weights are the ones later evaluated
            te, _ = evaluate(model, train_ds, cfg.batch_size, split="train_eval")
            rec = te.record(state.epoch, lr_used)
            result.history.append(rec)
            if log is not None:
                log(rec)
            if te.accuracy >= cfg.stop_at_train_accuracy:
                break
    result.best_accuracy, result.best_epoch = state.best_accuracy, state.best_epoch
    result.best_checkpoint = best
    return result


class JsonlLog:
    """Append-only JSON-lines writer; the first line carries config and version."""

    def __init__(self, path, header=None, append=False):
        self.path = path
        if not append or not os.path.exists(path):
            with open(path, "w", encoding="utf-8") as fh:
                if header is not None:
                    fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")

    def __call__(self, rec):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class CrossValResult:
    folds: list
    reports: list
    summary: dict
    plan: object


def cross_validate(dataset, model_cfg, train_cfg, k=5, out_dir=None, log=None, header_extra=None):
    """Stratified k-fold: train on k-1 folds, keep the best-validation weights per fold,
    and report mean and std of each metric over folds."""
    plan = stratified_split(dataset.y, f"kfold({k})", seed=train_cfg.seed)
    folds, reports = [], []
    for f in range(k):
        tr_idx, va_idx = plan.fold(f)
        model = build_model(model_cfg)
        fold_log = (lambda r, f=f: log({**r, "fold": f})) if log else None
        res = fit(model, dataset.subset(tr_idx), train_cfg, val_ds=dataset.subset(va_idx),
                  out_dir=out_dir, log=fold_log, best_name=f"fold{f}.ckpt",
                  header_extra={**(header_extra or {}), "fold": f})
        if res.best_checkpoint is not None:
            restore_model(model, res.best_checkpoint)
        val = dataset.subset(va_idx)
        probs, *_ = predict(model, val, train_cfg.batch_size)
        reports.append(evaluate_predictions(val.y, probs, model_cfg.n_classes))
        folds.append(res)
    return CrossValResult(folds, reports, aggregate(reports), plan)
