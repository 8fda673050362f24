"""Adam training loop with per-epoch evaluation, condition tracing and AdaptiveLRF."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptlrf import V_CAP, ZERO_TRAIN_ERROR, AdaptiveLRF, Strategy
from .conditioning import condition_report
from .errors import DomainError, NonFiniteLoss, ShapeError
from .netcore import Network, PenaltyConfig, lrf_anchor, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc",
                   "test_loss", "test_acc", "v", "sncn", "triggered")


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def reset(self, index: int) -> None:
        """Zero the moments of one parameter tensor."""
        if self.m:
            self.m[index] = np.zeros_like(self.m[index])
            self.v[index] = np.zeros_like(self.v[index])


def adam_step(params, grads, state: OptimState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        p -= state.lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps)
    return params


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean of per-class F1 over classes seen in either array."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for c in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def predict(net: Network, x, chunk: int = 1024) -> np.ndarray:
    return np.concatenate([net.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)])


def evaluate(net: Network, x, y):
    """Return ``(loss, accuracy, macro F1)`` of the network in eval mode."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(net, x)
    value = net.loss(pred, y)
    labels = np.asarray(y)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    guess = pred.argmax(axis=1)
    return value, float(np.mean(guess == labels)), macro_f1(labels, guess)


def error_ratio(train_err: float, val_err: float) -> float:
    if train_err <= ZERO_TRAIN_ERROR:
        return V_CAP
    return min(val_err / train_err, V_CAP)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dropout: float | list = 0.0
    weight_decay: float = 0.0
    # AdaptiveLRF; tau=None disables the controller
    tau: float | None = None
    patience: int = 3
    strategy: str = "adaptive_random"
    strategy_count: int = 1
    reset_moments: bool = True
    # LRF-based penalty; None disables it
    penalty_gamma: float | None = None
    probe_size: int = 64
    record_conditions: bool = True
    early_stop_patience: int | None = None
    checkpoint_path: str | None = None


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    best_params: list | None = None
    best_epoch: int | None = None
    best_val_loss: float = float("inf")

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([_fmt(r[c]) for c in HISTORY_COLUMNS])

    def to_jsonl(self, path) -> None:
        with Path(path).open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    def trace_to_jsonl(self, path) -> None:
        """Condition reports and controller actions, one object per epoch."""
        by_epoch = {a["epoch"]: a for a in self.actions}
        with Path(path).open("w") as fh:
            for rep in self.reports:
                row = dict(rep)
                row["action"] = by_epoch.get(rep["epoch"])
                fh.write(json.dumps(row) + "\n")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def _seed_streams(seed: int):
    shuffle, dropout, probe, control = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(shuffle), np.random.default_rng(dropout),
            np.random.default_rng(probe), np.random.default_rng(control))


def fit(net: Network, train, val, test=None, config: TrainConfig | None = None) -> RunHistory:
    """Train ``net`` in place and return its per-epoch history.

    ``train``, ``val`` and ``test`` are ``(features, labels)`` pairs. Each
    epoch runs shuffled minibatch Adam, evaluates every split, measures
    condition numbers on a probe drawn from the validation split, lets the
    AdaptiveLRF controller act, and keeps the best-validation snapshot. With
    a penalty configured, the anchor is refreshed to the rank-1 version of
    that snapshot whenever it improves.
    """
    cfg = config or TrainConfig()
    x_tr, y_tr = (np.asarray(a) for a in train)
    x_va, y_va = (np.asarray(a) for a in val)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("train and validation splits must be non-empty")
    shuffle_rng, dropout_rng, probe_rng, control_rng = _seed_streams(cfg.seed)
    opt = OptimState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    controller = None
    if cfg.tau is not None:
        controller = AdaptiveLRF(tau=cfg.tau, patience=cfg.patience,
                                 strategy=Strategy(cfg.strategy, cfg.strategy_count),
                                 rng=control_rng, reset_moments=cfg.reset_moments)
    penalty = None
    hist = RunHistory()
    last_good = net.get_params()
    stale = 0
    n = len(x_tr)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            net.forward(x_tr[idx], mode="train", dropout=cfg.dropout, rng=dropout_rng)
            grads = net.backward(y_tr[idx], penalty=penalty, weight_decay=cfg.weight_decay)
            adam_step(net.params(), [g for pair in grads for g in pair], opt)

        finite = all(np.all(np.isfinite(p)) for p in net.params())
        if finite:
            try:
                tr = evaluate(net, x_tr, y_tr)
                va = evaluate(net, x_va, y_va)
                te = evaluate(net, *test) if test is not None and len(test[0]) else (None, None, None)
            except DomainError:
                finite = False
            else:
                finite = all(np.isfinite(v) for v in (tr[0], va[0], te[0]) if v is not None)
        if not finite:
            path = cfg.checkpoint_path
            if path:
                net.set_params(last_good)
                save_checkpoint(net, path)
            raise NonFiniteLoss(f"non-finite loss at epoch {epoch}", checkpoint_path=path)

        if va[0] < hist.best_val_loss:
            hist.best_val_loss = va[0]
            hist.best_epoch = epoch
            hist.best_params = net.get_params()
            stale = 0
            if cfg.penalty_gamma is not None:
                penalty = PenaltyConfig(cfg.penalty_gamma, lrf_anchor(hist.best_params))
        else:
            stale += 1

        report = None
        if cfg.record_conditions or controller is not None:
            m = min(cfg.probe_size, len(x_va))
            probe = x_va[np.sort(probe_rng.choice(len(x_va), size=m, replace=False))]
            report = condition_report(net, probe, epoch)
            hist.reports.append(report.to_dict())

        v = error_ratio(tr[0], va[0])
        triggered, mean_v = False, None
        if controller is not None:
            action = controller.step(net, tr[0], va[0], report, epoch, optimizer=opt,
                                     reporter=lambda: condition_report(net, probe, epoch))
            triggered, mean_v = action.triggered, action.mean_v
            hist.actions.append(action.to_dict())
            if triggered:
                log.info("epoch %d: AdaptiveLRF simplified layers %s", epoch, action.selected_layers)

        hist.records.append({
            "epoch": epoch,
            "train_loss": tr[0], "train_acc": tr[1], "train_f1": tr[2],
            "val_loss": va[0], "val_acc": va[1], "val_f1": va[2],
            "test_loss": te[0], "test_acc": te[1], "test_f1": te[2],
            "v": v, "mean_v": mean_v,
            "sncn": None if report is None else report.sncn,
            "triggered": triggered,
        })
        last_good = net.get_params()
        log.debug("epoch %d train %.4f val %.4f v %.3f", epoch, tr[0], va[0], v)
        if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
            break
    return hist
