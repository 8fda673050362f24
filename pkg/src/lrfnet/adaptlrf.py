"""AdaptiveLRF controller: detect overfitting, pick layers, simplify their weights.

Once per epoch the controller records ``v = val_error / train_error``. When
the mean of the last ``patience`` values exceeds ``tau`` it selects layers
(by default each layer l independently with probability Gamma_l, its
normalized condition number) and replaces their weights by the best rank-1
approximation. Biases are never touched.

Layer indices here are 0-based positions among the network's trainable
layers.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditionReport
from .linalg import lrf_simplify
from .netcore import Network

log = logging.getLogger(__name__)

ZERO_TRAIN_ERROR = 1e-12
V_CAP = 1e6
STRATEGIES = ("adaptive_random", "first_k", "last_d")


class OverfitSignal:
    """Sliding window over the last ``patience`` error ratios."""

    def __init__(self, patience: int = 3, tau: float = 1.4):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.tau = tau
        self.window = deque(maxlen=patience)

    def record_errors(self, train_err: float, val_err: float) -> float:
        # vanishing training error is treated as maximal overfitting risk
        if train_err <= ZERO_TRAIN_ERROR:
            v = V_CAP
        else:
            v = min(val_err / train_err, V_CAP)
        v = max(v, 1e-300)
        self.window.append(v)
        return v

    def mean(self) -> float:
        return sum(self.window) / len(self.window) if self.window else math.nan

    def overfit_detected(self) -> bool:
        return len(self.window) == self.patience and self.mean() > self.tau

    def clear(self) -> None:
        self.window.clear()


@dataclass(frozen=True)
class Strategy:
    tag: str = "adaptive_random"
    count: int = 1  # k for first_k, d for last_d

    def __post_init__(self):
        if self.tag not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.tag!r}")
        if self.count < 1:
            raise ValueError("layer count must be >= 1")


def select_layers(strategy: Strategy, report: ConditionReport | None, n_layers: int,
                  rng: np.random.Generator) -> list:
    """Indices of layers to simplify.

    ``adaptive_random`` includes layer l iff a uniform draw r in [0, 1)
    satisfies ``r <= gamma[l]``; one draw is consumed per layer.
    """
    if strategy.tag == "first_k":
        return list(range(min(strategy.count, n_layers)))
    if strategy.tag == "last_d":
        return list(range(max(n_layers - strategy.count, 0), n_layers))
    if report is None:
        raise ValueError("adaptive_random selection needs a condition report")
    gamma = report.gamma
    if len(gamma) != n_layers:
        raise ValueError(f"report covers {len(gamma)} layers, network has {n_layers}")
    draws = rng.random(n_layers)
    return [l for l in range(n_layers) if draws[l] <= gamma[l]]


def apply_regularization(net: Network, selected, optimizer=None) -> int:
    """Rank-1 simplify the weights of the selected trainable layers.

    If an optimizer with ``reset(param_index)`` is given, the moment state of
    each replaced weight tensor is cleared.
    """
    layers = net.trainable
    count = 0
    for l in sorted(set(selected)):
        layer = layers[l]
        layer.W = lrf_simplify(layer.W)
        if optimizer is not None:
            optimizer.reset(2 * l)
        count += 1
    return count


@dataclass
class ActionLog:
    epoch: int
    v: float
    mean_v: float
    triggered: bool
    selected_layers: list = field(default_factory=list)
    sncn_before: float | None = None
    sncn_after: float | None = None

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "v": self.v, "mean_v": self.mean_v,
                "triggered": self.triggered, "selected_layers": list(self.selected_layers),
                "sncn_before": self.sncn_before, "sncn_after": self.sncn_after}


class AdaptiveLRF:
    """Per-epoch controller.

    ``rng`` is owned by the controller and consumed only when a trigger
    fires, so a controller that never triggers leaves training untouched.
    """

    def __init__(self, tau: float = 1.4, patience: int = 3, strategy: Strategy | None = None,
                 rng: np.random.Generator | None = None, reset_moments: bool = True):
        self.signal = OverfitSignal(patience=patience, tau=tau)
        self.strategy = strategy or Strategy()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.reset_moments = reset_moments
        self.log = []

    def step(self, net: Network, train_err: float, val_err: float, report: ConditionReport | None,
             epoch: int, optimizer=None, reporter=None) -> ActionLog:
        """Record this epoch's errors and simplify layers if overfitting is detected.

        ``reporter`` (optional) is called with no arguments after a trigger
        and must return a fresh ConditionReport; its SNCN is logged as
        ``sncn_after``.
        """
        v = self.signal.record_errors(train_err, val_err)
        mean_v = self.signal.mean()
        entry = ActionLog(epoch=epoch, v=v, mean_v=mean_v, triggered=False,
                          sncn_before=None if report is None else report.sncn)
        if self.signal.overfit_detected():
            selected = select_layers(self.strategy, report, len(net.trainable), self.rng)
            apply_regularization(net, selected, optimizer if self.reset_moments else None)
            self.signal.clear()
            entry.triggered = True
            entry.selected_layers = selected
            if reporter is not None:
                entry.sncn_after = reporter().sncn
            log.debug("epoch %d: mean v %.3f > tau, simplified layers %s", epoch, mean_v, selected)
        self.log.append(entry)
        return entry
