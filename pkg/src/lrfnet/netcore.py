"""A small numpy feedforward network with exact backpropagation.

Layers work on batches: dense layers take ``(B, fan_in)``, conv layers take
channels-last images ``(B, H, W, C)`` with valid padding. Trainable layers
carry their activation so that a layer's output is its post-activation value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ShapeError, StaleCache
from .linalg import lrf_simplify

ACTIVATIONS = ("relu", "tanh", "sigmoid", "softmax", "none")
LOSSES = ("cross_entropy", "mse")
PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "lrfnet-checkpoint"
CHECKPOINT_VERSION = 1


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if kind == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    if kind == "none":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull ``g = dL/da`` back to ``dL/dz``. Relu uses subgradient 0 at z == 0."""
    if kind == "relu":
        return g * (z > 0)
    if kind == "tanh":
        return g * (1.0 - a * a)
    if kind == "sigmoid":
        return g * a * (1.0 - a)
    if kind == "softmax":
        return a * (g - np.sum(g * a, axis=-1, keepdims=True))
    if kind == "none":
        return g
    raise ValueError(f"unknown activation {kind!r}")


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"
    trainable = False

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple) -> tuple:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


class Dense(Layer):
    """``a = act(x @ W + b)`` with ``W`` of shape (fan_in, fan_out)."""

    kind = "dense"
    trainable = True

    def __init__(self, fan_in: int, fan_out: int, activation: str = "none",
                 rng: np.random.Generator | None = None):
        if fan_in < 1 or fan_out < 1:
            raise ShapeError("dense dims must be positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.fan_in, self.fan_out, self.activation = fan_in, fan_out, activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = he_uniform(rng, (fan_in, fan_out), fan_in)
        self.b = np.zeros(fan_out)
        self.dW = self.db = None
        self._cache = None

    def preact(self, x: np.ndarray, W=None, b=None) -> np.ndarray:
        W = self.W if W is None else W
        b = self.b if b is None else b
        return x @ W + b

    def forward(self, x, cache=False):
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ShapeError(f"dense layer expects (B, {self.fan_in}), got {x.shape}")
        z = self.preact(x)
        a = activate(self.activation, z)
        if cache:
            self._cache = (x, z, a)
        return a

    def backward(self, grad):
        x, z, a = self._cache
        gz = activation_grad(self.activation, z, a, grad)
        self.dW = x.T @ gz
        self.db = gz.sum(axis=0)
        return gz @ self.W.T

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.fan_in,):
            raise ShapeError(f"dense layer expects input ({self.fan_in},), got {input_shape}")
        return (self.fan_out,)

    def spec(self):
        return {"kind": "dense", "fan_in": self.fan_in, "fan_out": self.fan_out,
                "activation": self.activation}


class Conv2D(Layer):
    """Valid 2-D convolution, kernel (kh, kw, cin, cout), channels-last input."""

    kind = "conv2d"
    trainable = True

    def __init__(self, kh: int, kw: int, cin: int, cout: int, stride: int = 1,
                 activation: str = "none", rng: np.random.Generator | None = None):
        if min(kh, kw, cin, cout, stride) < 1:
            raise ShapeError("conv dims must be positive")
        if activation not in ACTIVATIONS or activation == "softmax":
            raise ValueError(f"unsupported conv activation {activation!r}")
        self.kh, self.kw, self.cin, self.cout, self.stride = kh, kw, cin, cout, stride
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = he_uniform(rng, (kh, kw, cin, cout), kh * kw * cin)
        self.b = np.zeros(cout)
        self.dW = self.db = None
        self._cache = None

    def patches(self, x: np.ndarray) -> np.ndarray:
        """(B, oh, ow, kh, kw, cin) view of the receptive fields."""
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise ShapeError(f"conv layer expects (B, H, W, {self.cin}), got {x.shape}")
        if x.shape[1] < self.kh or x.shape[2] < self.kw:
            raise ShapeError(f"input {x.shape[1:3]} smaller than kernel {(self.kh, self.kw)}")
        win = np.lib.stride_tricks.sliding_window_view(x, (self.kh, self.kw), axis=(1, 2))
        win = win[:, ::self.stride, ::self.stride]
        return win.transpose(0, 1, 2, 4, 5, 3)

    def preact(self, x: np.ndarray, W=None, b=None) -> np.ndarray:
        W = self.W if W is None else W
        b = self.b if b is None else b
        p = self.patches(x)
        B, oh, ow = p.shape[:3]
        cols = p.reshape(B * oh * ow, -1)
        return (cols @ W.reshape(-1, self.cout)).reshape(B, oh, ow, self.cout) + b

    def forward(self, x, cache=False):
        z = self.preact(x)
        a = activate(self.activation, z)
        if cache:
            self._cache = (x, z, a)
        return a

    def backward(self, grad):
        x, z, a = self._cache
        gz = activation_grad(self.activation, z, a, grad)
        p = self.patches(x)
        B, oh, ow = p.shape[:3]
        cols = p.reshape(B * oh * ow, -1)
        g2 = gz.reshape(-1, self.cout)
        self.dW = (cols.T @ g2).reshape(self.W.shape)
        self.db = g2.sum(axis=0)
        dcols = (g2 @ self.W.reshape(-1, self.cout).T).reshape(B, oh, ow, self.kh, self.kw, self.cin)
        dx = np.zeros_like(x)
        s = self.stride
        for i in range(self.kh):
            for j in range(self.kw):
                dx[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
        return dx

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[2] != self.cin:
            raise ShapeError(f"conv layer expects (H, W, {self.cin}), got {input_shape}")
        h, w, _ = input_shape
        oh = (h - self.kh) // self.stride + 1
        ow = (w - self.kw) // self.stride + 1
        if h < self.kh or w < self.kw or oh < 1 or ow < 1:
            raise ShapeError(f"conv output for input {input_shape} is empty")
        return (oh, ow, self.cout)

    def spec(self):
        return {"kind": "conv2d", "kh": self.kh, "kw": self.kw, "cin": self.cin,
                "cout": self.cout, "stride": self.stride, "activation": self.activation}


class Activation(Layer):
    kind = "activation"

    def __init__(self, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self._cache = None

    def forward(self, x, cache=False):
        a = activate(self.activation, x)
        if cache:
            self._cache = (x, a)
        return a

    def backward(self, grad):
        z, a = self._cache
        return activation_grad(self.activation, z, a, grad)

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def spec(self):
        return {"kind": "activation", "activation": self.activation}


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x, cache=False):
        if cache:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def spec(self):
        return {"kind": "flatten"}


def layer_from_spec(spec: dict, rng: np.random.Generator | None = None) -> Layer:
    kind = spec.get("kind")
    if kind == "dense":
        return Dense(spec["fan_in"], spec["fan_out"], spec.get("activation", "none"), rng=rng)
    if kind == "conv2d":
        return Conv2D(spec["kh"], spec["kw"], spec["cin"], spec["cout"], spec.get("stride", 1),
                      spec.get("activation", "none"), rng=rng)
    if kind == "activation":
        return Activation(spec["activation"])
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def as_target(target, pred_shape) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == 1 and len(pred_shape) == 2 and np.issubdtype(t.dtype, np.integer):
        return one_hot(t, pred_shape[1])
    t = t.astype(np.float64)
    if t.shape != tuple(pred_shape):
        raise ShapeError(f"target shape {t.shape} does not match prediction {tuple(pred_shape)}")
    return t


def loss(pred, target, kind: str = "cross_entropy") -> float:
    """Mean per-sample loss: squared Frobenius residual (mse) or negative log-likelihood."""
    pred = np.asarray(pred, dtype=np.float64)
    t = as_target(target, pred.shape)
    B = pred.shape[0]
    if kind == "mse":
        d = pred - t
        return float(np.sum(d * d) / B)
    if kind == "cross_entropy":
        if not np.all(np.isfinite(pred)) or np.any(pred < 0):
            raise DomainError("cross-entropy needs finite, nonnegative probabilities")
        p = np.maximum(pred, PROB_FLOOR)
        return float(-np.sum(t * np.log(p)) / B)
    raise ValueError(f"unknown loss {kind!r}")


def loss_grad(pred: np.ndarray, t: np.ndarray, kind: str) -> np.ndarray:
    B = pred.shape[0]
    if kind == "mse":
        return 2.0 * (pred - t) / B
    p = np.maximum(pred, PROB_FLOOR)
    return -(t / p) * (pred > PROB_FLOOR) / B


@dataclass
class PenaltyConfig:
    """Pull toward a fixed anchor: adds ``gamma * sum ||theta - anchor||_F^2``.

    ``anchor`` is a flat list aligned with ``Network.params()``.
    """

    gamma: float
    anchor: list

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


def lrf_anchor(params) -> list:
    """LRF(theta*): weights replaced by their rank-1 approximation, biases copied."""
    return [lrf_simplify(p) if p.ndim in (2, 4) else p.copy() for p in params]


class Network:
    def __init__(self, layers, input_shape, loss: str = "cross_entropy"):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.loss_kind = loss
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        if not self.trainable:
            raise ShapeError("network needs at least one trainable layer")
        self._cached = False
        self._pred = None

    @property
    def trainable(self) -> list:
        return [layer for layer in self.layers if layer.trainable]

    def params(self) -> list:
        out = []
        for layer in self.trainable:
            out.extend((layer.W, layer.b))
        return out

    def get_params(self) -> list:
        return [p.copy() for p in self.params()]

    def set_params(self, values) -> None:
        values = list(values)
        if len(values) != 2 * len(self.trainable):
            raise ShapeError("parameter list length mismatch")
        for i, layer in enumerate(self.trainable):
            W, b = np.asarray(values[2 * i], float), np.asarray(values[2 * i + 1], float)
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ShapeError(f"parameter shape mismatch at trainable layer {i}")
            layer.W, layer.b = W.copy(), b.copy()

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def _dropout_rates(self, dropout) -> list:
        L = len(self.trainable)
        if dropout is None:
            return [0.0] * L
        if np.isscalar(dropout):
            # output layer excluded when a single rate is given
            return [float(dropout)] * (L - 1) + [0.0]
        rates = [float(p) for p in dropout]
        if len(rates) != L:
            raise ShapeError(f"need {L} dropout rates, got {len(rates)}")
        return rates

    def forward(self, x, mode: str = "eval", dropout=None, rng: np.random.Generator | None = None):
        """Run the network on a batch.

        In train mode each trainable layer's output units are zeroed with its
        dropout rate and the survivors scaled by ``1 / (1 - p)``; eval mode
        ignores dropout and never touches ``rng``.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        train = mode == "train"
        rates = self._dropout_rates(dropout) if train else None
        if rates and any(not 0.0 <= p < 1.0 for p in rates):
            raise ValueError("dropout rates must lie in [0, 1)")
        self._masks = []
        t = 0
        for layer in self.layers:
            x = layer.forward(x, cache=train)
            if layer.trainable:
                mask = None
                if train and rates[t] > 0.0:
                    if rng is None:
                        raise ValueError("dropout in train mode needs an rng")
                    keep = rng.random(x.shape) >= rates[t]
                    mask = keep / (1.0 - rates[t])
                    x = x * mask
                if train:
                    self._masks.append(mask)
                t += 1
        if train:
            self._cached = True
            self._pred = x
        return x

    def loss(self, pred, target) -> float:
        return loss(pred, target, self.loss_kind)

    def backward(self, target, penalty: PenaltyConfig | None = None, weight_decay: float = 0.0) -> list:
        """Gradients ``[(dW, db), ...]`` per trainable layer of the last train-mode forward.

        Weight decay adds ``weight_decay * W`` (weights only); the penalty adds
        ``2 * gamma * (theta - anchor)`` to weights and biases.
        """
        if not self._cached:
            raise StaleCache("backward() needs a preceding train-mode forward()")
        pred = self._pred
        t = as_target(target, pred.shape)
        last = self.trainable[-1]
        fused = (self.loss_kind == "cross_entropy" and getattr(last, "activation", None) == "softmax"
                 and self.layers[-1] is last and self._masks[-1] is None)
        if fused:
            g = (pred - t) / pred.shape[0]
        else:
            g = loss_grad(pred, t, self.loss_kind)
        ti = len(self.trainable)
        for layer in reversed(self.layers):
            if layer.trainable:
                ti -= 1
                mask = self._masks[ti]
                if mask is not None:
                    g = g * mask
                if fused and layer is last:
                    # softmax + cross-entropy: dL/dz = (p - y) / B
                    x, z, a = layer._cache
                    layer.dW = x.T @ g
                    layer.db = g.sum(axis=0)
                    g = g @ layer.W.T
                    continue
            g = layer.backward(g)
        grads = []
        for i, layer in enumerate(self.trainable):
            dW, db = layer.dW, layer.db
            if weight_decay:
                dW = dW + weight_decay * layer.W
            if penalty is not None and penalty.gamma:
                aW, ab = penalty.anchor[2 * i], penalty.anchor[2 * i + 1]
                dW = dW + 2.0 * penalty.gamma * (layer.W - aW)
                db = db + 2.0 * penalty.gamma * (layer.b - ab)
            grads.append((dW, db))
        self._cached = False
        self._pred = None
        return grads

    def objective(self, x, target, penalty: PenaltyConfig | None = None,
                  weight_decay: float = 0.0) -> float:
        """Scalar whose gradient ``backward`` returns (dropout off)."""
        value = self.loss(self.forward(x), target)
        if weight_decay:
            value += 0.5 * weight_decay * sum(float(np.sum(l.W * l.W)) for l in self.trainable)
        if penalty is not None:
            value = lrf_penalty_loss(self, value, penalty)
        return value

    def spec(self) -> dict:
        return {"input_shape": list(self.input_shape), "loss": self.loss_kind,
                "layers": [layer.spec() for layer in self.layers]}

    def save(self, path) -> None:
        save_checkpoint(self, path)


def lrf_penalty_loss(net: Network, base_loss: float, cfg: PenaltyConfig) -> float:
    params = net.params()
    if len(cfg.anchor) != len(params):
        raise ShapeError("anchor does not match network parameters")
    total = 0.0
    for p, a in zip(params, cfg.anchor):
        a = np.asarray(a)
        if a.shape != p.shape:
            raise ShapeError(f"anchor shape {a.shape} does not match parameter {p.shape}")
        d = p - a
        total += float(np.sum(d * d))
    return base_loss + cfg.gamma * total


def build_mlp(input_dim: int, hidden, n_out: int, activation: str = "relu",
              output_activation: str = "softmax", loss: str = "cross_entropy",
              rng: np.random.Generator | None = None) -> Network:
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = [input_dim, *hidden, n_out]
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = output_activation if i == len(dims) - 2 else activation
        layers.append(Dense(a, b, act, rng=rng))
    return Network(layers, (input_dim,), loss=loss)


def build_network(spec: dict, rng: np.random.Generator | None = None) -> Network:
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = [layer_from_spec(s, rng=rng) for s in spec["layers"]]
    return Network(layers, tuple(spec["input_shape"]), loss=spec.get("loss", "cross_entropy"))


def _encode(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _decode(d: dict) -> np.ndarray:
    a = np.asarray(d["data"], dtype=np.float64)
    shape = tuple(d["shape"])
    if a.size != int(np.prod(shape)):
        raise ShapeError(f"checkpoint entry has {a.size} values for shape {shape}")
    return a.reshape(shape)


def save_checkpoint(net: Network, path) -> None:
    """JSON checkpoint: layer specs plus row-major float64 values per trainable layer.

    Layout::

        {"format": "lrfnet-checkpoint", "version": 1,
         "input_shape": [...], "loss": "...",
         "layers": [{"index": i, "spec": {...},
                     "params": {"W": {"shape": [...], "data": [...]},
                                "b": {"shape": [...], "data": [...]}}}, ...]}

    Non-trainable layers have no ``params`` key. Floats are written with
    Python's shortest round-trip repr, so loading restores values exactly.
    """
    layers = []
    for i, layer in enumerate(net.layers):
        entry = {"index": i, "spec": layer.spec()}
        if layer.trainable:
            entry["params"] = {"W": _encode(layer.W), "b": _encode(layer.b)}
        layers.append(entry)
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "input_shape": list(net.input_shape), "loss": net.loss_kind, "layers": layers}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Network:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an lrfnet checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    entries = sorted(doc["layers"], key=lambda e: e["index"])
    layers = []
    for e in entries:
        layer = layer_from_spec(e["spec"])
        if layer.trainable:
            W, b = _decode(e["params"]["W"]), _decode(e["params"]["b"])
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ShapeError(f"checkpoint layer {e['index']} shape mismatch")
            layer.W, layer.b = W, b
        layers.append(layer)
    return Network(layers, tuple(doc["input_shape"]), loss=doc["loss"])
