"""A small feedforward network substrate with hand-written backprop.

Everything is float64 and batch-first: ``x`` has shape (batch, in_dim);
1-d inputs are treated as a batch of one and squeezed back on output.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "softplus")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}
NN_MAGIC = b"LISTNN1"


class ShapeError(ValueError):
    pass


class FormatError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # tanh form does not overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def inverse_softplus(y: float) -> float:
    """x with softplus(x) == y, for y > 0."""
    return float(y + np.log(-np.expm1(-y)))


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given softmax output ``p`` and dL/dp."""
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


def _activate(act: str, z):
    if act == "identity":
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    return softplus(z)


def _activate_grad(act: str, z):
    if act == "identity":
        return np.ones_like(z)
    if act == "relu":
        return (z > 0).astype(np.float64)
    return sigmoid(z)


@dataclass
class Dense:
    W: np.ndarray  # (in_dim, out_dim)
    b: np.ndarray  # (out_dim,)
    act: str = "identity"

    def __post_init__(self):
        if self.act not in _ACT_CODE:
            raise ValueError(f"unknown activation {self.act!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"bad layer shapes W{self.W.shape} b{self.b.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class DenseNet:
    layers: list[Dense] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @classmethod
    def create(cls, dims: Sequence[int], hidden_act: str = "relu", out_act: str = "identity",
               seed: int | np.random.Generator = 0) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            act = out_act if i == len(dims) - 2 else hidden_act
            layers.append(Dense(rng.uniform(-lim, lim, (fan_in, fan_out)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.W, layer.b)]

    def copy(self) -> "DenseNet":
        return DenseNet([Dense(l.W.copy(), l.b.copy(), l.act) for l in self.layers])

    def _check(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input dim {self.input_dim}, got shape {np.shape(x)}")
        return x, single

    def forward(self, x) -> np.ndarray:
        x, single = self._check(x)
        for layer in self.layers:
            x = _activate(layer.act, x @ layer.W + layer.b)
        return x[0] if single else x

    def forward_cached(self, x) -> tuple[np.ndarray, list]:
        """Forward pass that also returns what :meth:`backward` needs."""
        x, _ = self._check(x)
        cache = []
        for layer in self.layers:
            z = x @ layer.W + layer.b
            cache.append((x, z))
            x = _activate(layer.act, z)
        return x, cache

    def backward(self, cache: list, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Reverse pass.  Returns (grads aligned with :meth:`params`, dL/dx)."""
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        if len(cache) != len(self.layers) or g.shape != cache[-1][1].shape:
            raise ShapeError(f"upstream gradient shape {g.shape} does not match forward output")
        grads: list[np.ndarray] = []
        for layer, (x, z) in zip(reversed(self.layers), reversed(cache)):
            g = g * _activate_grad(layer.act, z)
            grads.append(g.sum(axis=0))
            grads.append(x.T @ g)
            g = g @ layer.W.T
        grads.reverse()
        return grads, g


class Optimizer:
    """SGD or Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], kind: str = "adam", learning_rate: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if not learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        self.params = params
        self.kind = kind
        self.lr = learning_rate
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                p -= self.lr * g
            return
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_param: int
    worst_index: tuple
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradcheck(params: list[np.ndarray], loss_and_grads: Callable[[], tuple[float, list]],
              tolerance: float = 1e-4, h: float = 1e-5, floor: float = 1e-6, atol: float = 1e-9,
              max_per_param: int | None = None, seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_and_grads`` is evaluated on the current (mutated in place) values of
    ``params`` and must return the loss and grads aligned with ``params``.
    Error per entry is ``|a - n| / max(|a|, |n|, floor)``, or 0 when both
    sides are below ``floor`` and differ by at most ``atol`` (finite-difference
    roundoff on a zero gradient).  With
    ``max_per_param`` only a random sample of entries of each array is probed.
    """
    _, analytic = loss_and_grads()
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    rng = np.random.default_rng(seed)
    worst = (0.0, -1, ())
    checked = 0
    for pi, p in enumerate(params):
        idxs = list(np.ndindex(p.shape))
        if max_per_param is not None and len(idxs) > max_per_param:
            idxs = [idxs[i] for i in rng.choice(len(idxs), max_per_param, replace=False)]
        for idx in idxs:
            orig = p[idx]
            p[idx] = orig + h
            lp, _ = loss_and_grads()
            p[idx] = orig - h
            lm, _ = loss_and_grads()
            p[idx] = orig
            num = (lp - lm) / (2 * h)
            a = analytic[pi][idx]
            diff = abs(a - num)
            scale = max(abs(a), abs(num))
            err = 0.0 if scale < floor and diff <= atol else diff / max(scale, floor)
            checked += 1
            if err > worst[0]:
                worst = (err, pi, idx)
    return GradcheckReport(worst[0], worst[1], worst[2], checked, tolerance)


def write_net(net: DenseNet, f: BinaryIO) -> None:
    f.write(NN_MAGIC)
    f.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        f.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_CODE[layer.act]))
        f.write(np.ascontiguousarray(layer.W, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    start = f.tell() if f.seekable() else -1
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated payload reading {what} at offset {start}")
    return buf


def read_net(f: BinaryIO) -> DenseNet:
    magic = f.read(len(NN_MAGIC))
    if magic != NN_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {NN_MAGIC!r}")
    (n_layers,) = struct.unpack("<I", _read_exact(f, 4, "layer count"))
    if not 0 < n_layers < 1024:
        raise FormatError(f"implausible layer count {n_layers}")
    layers = []
    for i in range(n_layers):
        fan_in, fan_out, code = struct.unpack("<IIB", _read_exact(f, 9, f"layer {i} header"))
        if code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {code} in layer {i}")
        W = np.frombuffer(_read_exact(f, 4 * fan_in * fan_out, f"layer {i} weights"), dtype="<f4")
        b = np.frombuffer(_read_exact(f, 4 * fan_out, f"layer {i} bias"), dtype="<f4")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise FormatError(f"non-finite parameters in layer {i}")
        layers.append(Dense(W.reshape(fan_in, fan_out).astype(np.float64),
                            b.astype(np.float64), ACTIVATIONS[code]))
    try:
        return DenseNet(layers)
    except ShapeError as e:
        raise FormatError(str(e)) from None
