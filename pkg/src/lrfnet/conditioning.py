"""Per-layer nonlinear condition numbers and their normalized sum (SNCN).

For a trainable layer with parameters theta = (W, b) and output f(theta) on a
probe batch, the condition number is ``||J||_F ||theta||_F / ||f||_F``, where
J is the Jacobian of the stacked post-activation output with respect to theta.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AllZero, DegenerateOutput
from .netcore import Conv2D, Dense, Layer, Network, activate

DEGENERATE_NORM = 1e-12
FD_MAX_PARAMS = 10_000


@dataclass
class ConditionReport:
    kappa: list
    gamma: list
    sncn: float
    epoch: int = 0
    degenerate: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "kappa": [float(k) for k in self.kappa],
                "gamma": [float(g) for g in self.gamma], "sncn": float(self.sncn)}


def _act_slope_sq(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Squared derivative of an elementwise activation; relu slope at 0 is 0."""
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return (1.0 - a * a) ** 2
    if kind == "sigmoid":
        return (a * (1.0 - a)) ** 2
    if kind == "none":
        return np.ones_like(z)
    raise ValueError(f"no elementwise slope for activation {kind!r}")


def _require_trainable(layer: Layer):
    if not isinstance(layer, (Dense, Conv2D)):
        raise TypeError(f"condition numbers are defined for trainable layers, got {layer.kind}")


def jacobian_fro_norm(layer: Layer, batch: np.ndarray) -> float:
    """Exact ``||J||_F`` of the layer's batch output with respect to (W, b).

    Each output unit depends on its own weight column through the unit's
    input vector (dense) or receptive-field patch (conv), plus one bias, so

        ||J||_F^2 = sum over units of act'(z)^2 * (||input||^2 + 1)

    For a softmax dense layer the per-sample activation Jacobian S is not
    diagonal and the unit sum becomes ``(||x_b||^2 + 1) * ||S_b||_F^2``.
    """
    _require_trainable(layer)
    batch = np.asarray(batch, dtype=np.float64)
    z = layer.preact(batch)
    a = activate(layer.activation, z)
    if isinstance(layer, Dense):
        inp_sq = np.sum(batch * batch, axis=1) + 1.0
        if layer.activation == "softmax":
            p2 = np.sum(a * a, axis=1)
            s_sq = p2 - 2.0 * np.sum(a ** 3, axis=1) + p2 * p2
            return float(np.sqrt(np.sum(inp_sq * s_sq)))
        slope = _act_slope_sq(layer.activation, z, a)
        return float(np.sqrt(np.sum(inp_sq[:, None] * slope)))
    p = layer.patches(batch)
    patch_sq = np.sum(p * p, axis=(3, 4, 5)) + 1.0  # (B, oh, ow)
    slope = _act_slope_sq(layer.activation, z, a)  # (B, oh, ow, cout)
    return float(np.sqrt(np.sum(patch_sq[..., None] * slope)))


def jacobian_fro_norm_fd(layer: Layer, batch: np.ndarray, h: float = 1e-5,
                         max_params: int = FD_MAX_PARAMS) -> float:
    """Central-difference estimate of ``||J||_F``, one parameter at a time.

    Reference implementation for checking :func:`jacobian_fro_norm`; cost is
    two forward passes per parameter. Relu units sitting exactly at z == 0
    get derivative 0, matching the subgradient convention.
    """
    _require_trainable(layer)
    n = layer.W.size + layer.b.size
    if n > max_params:
        raise ValueError(f"finite-difference oracle limited to {max_params} parameters, layer has {n}")
    batch = np.asarray(batch, dtype=np.float64)
    z0 = layer.preact(batch)
    mask = (z0 != 0) if layer.activation == "relu" else None

    def out(W, b):
        return activate(layer.activation, layer.preact(batch, W, b))

    total = 0.0
    for which in ("W", "b"):
        base = getattr(layer, which)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            if which == "W":
                col = (out(plus, layer.b) - out(minus, layer.b)) / (2 * h)
            else:
                col = (out(layer.W, plus) - out(layer.W, minus)) / (2 * h)
            if mask is not None:
                col = col * mask
            total += float(np.sum(col * col))
    return float(np.sqrt(total))


def layer_condition_number(layer: Layer, batch: np.ndarray, jacobian_norm=None) -> float:
    """``||J||_F * ||theta||_F / ||f||_F`` on ``batch`` (the layer's input).

    Raises DegenerateOutput when the output norm is below 1e-12.
    """
    _require_trainable(layer)
    batch = np.asarray(batch, dtype=np.float64)
    f = layer.forward(batch)
    f_norm = float(np.sqrt(np.sum(f * f)))
    if f_norm < DEGENERATE_NORM:
        raise DegenerateOutput(f"layer output norm {f_norm:.3g} is degenerate")
    theta_norm = float(np.sqrt(np.sum(layer.W ** 2) + np.sum(layer.b ** 2)))
    jn = jacobian_fro_norm(layer, batch) if jacobian_norm is None else jacobian_norm
    return jn * theta_norm / f_norm


def normalize_condition_numbers(kappa) -> list:
    """Divide by the largest entry; ties at the maximum all map to 1."""
    k = [float(v) for v in kappa]
    if not k:
        raise ValueError("empty condition-number list")
    if any(not np.isfinite(v) or v < 0 for v in k):
        raise ValueError("condition numbers must be finite and nonnegative")
    top = max(k)
    if top == 0.0:
        raise AllZero("every condition number is zero")
    return [v / top for v in k]


def sncn(gamma) -> float:
    return float(sum(gamma))


def condition_report(net: Network, probe: np.ndarray, epoch: int = 0) -> ConditionReport:
    """Condition numbers of every trainable layer on a probe batch.

    The probe is pushed through the network in eval mode; each trainable
    layer is measured on the input it actually receives. Layers with a
    degenerate output are assigned the largest condition number found among
    the others (1.0 when none is measurable).
    """
    x = np.asarray(probe, dtype=np.float64)
    kappa, degenerate = [], []
    for layer in net.layers:
        if layer.trainable:
            try:
                kappa.append(layer_condition_number(layer, x))
            except DegenerateOutput:
                kappa.append(None)
                degenerate.append(len(kappa) - 1)
        x = layer.forward(x)
    measured = [k for k in kappa if k is not None]
    fill = max(measured) if measured and max(measured) > 0 else 1.0
    kappa = [fill if k is None else k for k in kappa]
    try:
        gamma = normalize_condition_numbers(kappa)
    except AllZero:
        gamma = [0.0] * len(kappa)
    return ConditionReport(kappa=kappa, gamma=gamma, sncn=sncn(gamma), epoch=epoch,
                           degenerate=degenerate)


def append_report(path, report: ConditionReport) -> None:
    """Append one JSON line ``{epoch, kappa, gamma, sncn}``."""
    with Path(path).open("a") as fh:
        fh.write(json.dumps(report.to_dict()) + "\n")
