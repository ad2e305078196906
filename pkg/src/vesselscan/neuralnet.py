"""A small convolutional network engine in numpy.

Tensors are float32 arrays in NHWC layout.  Convolutions are valid
(no padding); pooling drops trailing rows/columns that do not fill a window.
Layers keep no state between calls: ``forward`` returns a cache that
``backward`` consumes, so inference on a shared network is re-entrant.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DTYPE = np.float32

LAYER_KINDS = ("conv2d", "maxpool", "relu", "dense", "softmax", "flatten", "linear_output")
LOSS_KINDS = ("cross_entropy", "mse")


class ConfigurationError(ValueError):
    """Layer stack, input shape or loss do not fit together."""


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged in epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    size: int = 0
    stride: int = 1
    units: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")


def conv(filters: int, size: int = 3, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, size=size, stride=stride)


def maxpool(size: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", size=size, stride=size)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")
SOFTMAX = LayerSpec("softmax")
LINEAR_OUTPUT = LayerSpec("linear_output")


# ---------------------------------------------------------------------------
# layer kernels: forward(x, params) -> (y, cache); backward(dy, cache, params) -> (dx, grads)


def _conv_out(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


# Samples per conv chunk: keeps the chunk's input and output resident in cache.
_CHUNK_ELEMENTS = 1 << 19


def _chunks(x: np.ndarray):
    per = max(1, _CHUNK_ELEMENTS // max(1, int(np.prod(x.shape[1:]))))
    return range(0, x.shape[0], per), per


def _conv_forward_chunk(x, w, k, s, ho, wo, out):
    c = x.shape[3]
    if c * k * k <= 32:
        # thin input (e.g. grayscale): one im2col matmul beats k*k skinny ones
        np.matmul(_im2col(x, k, s, ho, wo), w.reshape(k * k * c, -1), out=out)
        return
    for i in range(k):
        for j in range(k):
            xs = x[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
            if i == 0 and j == 0:
                np.matmul(xs, w[i, j], out=out)
            else:
                out += xs @ w[i, j]


def _conv_forward(x, params, spec):
    w, b = params
    k, s = spec.size, spec.stride
    n, h, wd, _ = x.shape
    ho, wo = _conv_out(h, k, s), _conv_out(wd, k, s)
    y = np.empty((n, ho, wo, w.shape[3]), DTYPE)
    starts, per = _chunks(x)
    for a in starts:
        _conv_forward_chunk(x[a : a + per], w, k, s, ho, wo, y[a : a + per])
    y += b
    return y, x


def _im2col(x, k, s, ho, wo):
    return np.concatenate(
        [x[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] for i in range(k) for j in range(k)],
        axis=-1,
    )


def _conv_backward(dy, x, params, spec, need_dx=True):
    w, _ = params
    k, s = spec.size, spec.stride
    c = x.shape[3]
    _, ho, wo, f = dy.shape
    dw = np.zeros_like(w)
    dx = np.zeros_like(x) if need_dx else None
    starts, per = _chunks(x)
    for a in starts:
        xc, dyc = x[a : a + per], dy[a : a + per]
        dy2 = dyc.reshape(-1, f)
        if c * k * k <= 32:
            dw += (_im2col(xc, k, s, ho, wo).reshape(-1, k * k * c).T @ dy2).reshape(w.shape)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + s * (ho - 1) + 1, s)
                cols = slice(j, j + s * (wo - 1) + 1, s)
                if c * k * k > 32:
                    dw[i, j] += np.ascontiguousarray(xc[:, rows, cols, :]).reshape(-1, c).T @ dy2
                if need_dx:
                    dx[a : a + per, rows, cols, :] += dyc @ w[i, j].T
    db = dy.reshape(-1, f).sum(axis=0)
    return dx, [dw, db]


def _pool_views(x, k):
    hp, wp = x.shape[1] // k, x.shape[2] // k
    return [x[:, i : i + k * hp : k, j : j + k * wp : k, :] for i in range(k) for j in range(k)]


def _pool_forward(x, params, spec):
    views = _pool_views(x, spec.size)
    y = views[0].copy()
    for v in views[1:]:
        np.maximum(y, v, out=y)
    return y, (x, y)


def _pool_backward(dy, cache, params, spec):
    # gradient goes to the first maximal element of each window
    x, y = cache
    dx = np.zeros_like(x)
    free = np.ones(y.shape, bool)
    for v, dv in zip(_pool_views(x, spec.size), _pool_views(dx, spec.size)):
        hit = v == y
        hit &= free
        np.multiply(dy, hit, out=dv)
        free &= ~hit
    return dx, []


def _relu_forward(x, params, spec):
    y = np.maximum(x, 0)
    return y, y


def _relu_backward(dy, y, params, spec):
    return dy * (y > 0), []


def _flatten_forward(x, params, spec):
    return x.reshape(x.shape[0], -1), x.shape


def _flatten_backward(dy, shape, params, spec):
    return dy.reshape(shape), []


def _dense_forward(x, params, spec):
    w, b = params
    return x @ w + b, x


def _dense_backward(dy, x, params, spec):
    w, _ = params
    return dy @ w.T, [x.T @ dy, dy.sum(axis=0)]


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_forward(x, params, spec):
    p = _softmax(x)
    return p, p


def _softmax_backward(dy, p, params, spec):
    return p * (dy - (dy * p).sum(axis=-1, keepdims=True)), []


def _identity_forward(x, params, spec):
    return x, None


def _identity_backward(dy, cache, params, spec):
    return dy, []


_KERNELS: dict[str, tuple[Callable, Callable]] = {
    "conv2d": (_conv_forward, _conv_backward),
    "maxpool": (_pool_forward, _pool_backward),
    "relu": (_relu_forward, _relu_backward),
    "flatten": (_flatten_forward, _flatten_backward),
    "dense": (_dense_forward, _dense_backward),
    "softmax": (_softmax_forward, _softmax_backward),
    "linear_output": (_identity_forward, _identity_backward),
}


def _output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if spec.kind == "conv2d":
        if len(shape) != 3:
            raise ConfigurationError(f"conv2d needs (H, W, C) input, got {shape}")
        h, w, _ = shape
        ho, wo = _conv_out(h, spec.size, spec.stride), _conv_out(w, spec.size, spec.stride)
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"input {shape} too small for {spec.size}x{spec.size} convolution")
        return (ho, wo, spec.filters)
    if spec.kind == "maxpool":
        if len(shape) != 3:
            raise ConfigurationError(f"maxpool needs (H, W, C) input, got {shape}")
        h, w, c = shape
        if h < spec.size or w < spec.size:
            raise ConfigurationError(f"input {shape} too small for {spec.size}x{spec.size} pooling")
        return (h // spec.size, w // spec.size, c)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if len(shape) != 1:
            raise ConfigurationError(f"dense needs flat input, got {shape}; add a flatten layer")
        return (spec.units,)
    if spec.kind in ("softmax", "linear_output") and len(shape) != 1:
        raise ConfigurationError(f"{spec.kind} needs flat input, got {shape}")
    return shape


def _init_params(spec: LayerSpec, in_shape, rng: np.random.Generator) -> list[np.ndarray]:
    # He-uniform: U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)); zero biases
    if spec.kind == "conv2d":
        c = in_shape[2]
        fan_in = spec.size * spec.size * c
        lim = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-lim, lim, (spec.size, spec.size, c, spec.filters)).astype(DTYPE)
        return [w, np.zeros(spec.filters, DTYPE)]
    if spec.kind == "dense":
        fan_in = in_shape[0]
        lim = math.sqrt(6.0 / fan_in)
        return [rng.uniform(-lim, lim, (fan_in, spec.units)).astype(DTYPE), np.zeros(spec.units, DTYPE)]
    return []


# ---------------------------------------------------------------------------


@dataclass
class Network:
    input_shape: tuple[int, int, int]
    specs: list[LayerSpec]
    loss: str
    params: list[list[np.ndarray]] = field(default_factory=list)
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if not self.specs:
            raise ConfigurationError("empty layer stack")
        head = self.specs[-1].kind
        if self.loss == "cross_entropy" and head != "softmax":
            raise ConfigurationError("cross_entropy loss needs a softmax output layer")
        if self.loss == "mse" and head != "linear_output":
            raise ConfigurationError("mse loss needs a linear_output layer")
        shapes = [self.input_shape]
        for spec in self.specs:
            shapes.append(_output_shape(spec, shapes[-1]))
        self.shapes = shapes
        if self.params:
            for spec, p, shp in zip(self.specs, self.params, shapes):
                expected = [x.shape for x in _init_params(spec, shp, np.random.default_rng(0))]
                if [x.shape for x in p] != expected:
                    raise ConfigurationError(f"weight shapes {[x.shape for x in p]} do not match {spec}")

    @classmethod
    def build(cls, input_shape, specs: Sequence[LayerSpec], loss: str, seed: int = 0) -> "Network":
        net = cls(tuple(input_shape), list(specs), loss)
        rng = np.random.default_rng(seed)
        net.params = [_init_params(spec, shp, rng) for spec, shp in zip(net.specs, net.shapes)]
        return net

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def weights(self) -> list[np.ndarray]:
        return [w for p in self.params for w in p]

    def copy(self) -> "Network":
        return Network(self.input_shape, list(self.specs), self.loss, [[w.copy() for w in p] for p in self.params])

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = self._check_input(x)
        outs = [forward(self, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.empty((0,) + self.output_shape, DTYPE)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == len(self.input_shape) and self.input_shape[-1] == 1 and x.shape[1:] == self.input_shape[:-1]:
            x = x[..., None]
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        return x


def _run_forward(net: Network, x: np.ndarray, stop_before_softmax: bool = False):
    caches = []
    for spec, p in zip(net.specs, net.params):
        if stop_before_softmax and spec.kind == "softmax":
            break
        x, cache = _KERNELS[spec.kind][0](x, p, spec)
        caches.append(cache)
    return x, caches


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    x = net._check_input(x)
    return _run_forward(net, x)[0]


def loss_value(net: Network, output: np.ndarray, target: np.ndarray) -> float:
    target = np.asarray(target, DTYPE)
    if net.loss == "cross_entropy":
        return float(-np.mean(np.sum(target * np.log(np.clip(output, 1e-12, None)), axis=-1)))
    return float(np.mean((output - target) ** 2))


def backward(net: Network, x: np.ndarray, target: np.ndarray) -> tuple[float, list[list[np.ndarray]]]:
    """Loss and per-layer gradients (same nesting and shapes as ``net.params``).

    Gradients are of the batch-mean loss.  For softmax + cross-entropy the
    softmax Jacobian is folded into the loss gradient (p - t) / N.
    """
    x = net._check_input(x)
    target = np.asarray(target, DTYPE)
    n = x.shape[0]
    if target.shape != (n,) + net.output_shape:
        raise ConfigurationError(f"target shape {target.shape} does not match output {(n,) + net.output_shape}")
    fused = net.loss == "cross_entropy"
    out, caches = _run_forward(net, x, stop_before_softmax=fused)
    if fused:
        z = out - out.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        loss = float(-np.mean(np.sum(target * logp, axis=-1)))
        dy = (np.exp(logp) - target) / DTYPE(n)
        specs = net.specs[:-1]
    else:
        diff = out - target
        loss = float(np.mean(diff**2))
        dy = DTYPE(2.0 / diff.size) * diff
        specs = net.specs
    grads: list[list[np.ndarray]] = [[] for _ in net.specs]
    for i in range(len(specs) - 1, -1, -1):
        spec = specs[i]
        if i == 0 and spec.kind == "conv2d":
            # nothing consumes the gradient with respect to the network input
            dy, g = _conv_backward(dy, caches[i], net.params[i], spec, need_dx=False)
        else:
            dy, g = _KERNELS[spec.kind][1](dy, caches[i], net.params[i], spec)
        grads[i] = [gi.astype(DTYPE, copy=False) for gi in g]
    return loss, grads


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(DTYPE, copy=False)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    steps: int = 0


Augment = Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def train(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int = 64,
    seed: int = 0,
    lr: float = 1e-3,
    on_epoch: Callable[[int, float], None] | None = None,
    decay_epochs: int = 0,
    augment: Augment | None = None,
) -> TrainReport:
    """Mini-batch Adam on the batch-mean loss; ``losses`` holds the mean batch loss per epoch.

    The last ``decay_epochs`` epochs run at lr / 10.  ``augment(xb, yb, rng)``
    may return a transformed copy of each batch.
    """
    x = net._check_input(x)
    y = np.asarray(y, DTYPE)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in length")
    if not 0 <= decay_epochs <= max(epochs, 0):
        raise ValueError("decay_epochs must lie in [0, epochs]")
    report = TrainReport()
    if epochs <= 0:
        return report
    rng = np.random.default_rng(seed)
    opt = Adam(net.weights(), lr=lr)
    for epoch in range(epochs):
        opt.lr = lr if epoch < epochs - decay_epochs else lr / 10.0
        order = rng.permutation(len(x))
        total, count = 0.0, 0
        for start in range(0, len(x), batch_size):
            idx = np.sort(order[start : start + batch_size])
            xb, yb = x[idx], y[idx]
            if augment is not None:
                xb, yb = augment(xb, yb, rng)
            loss, grads = backward(net, xb, yb)
            if not math.isfinite(loss):
                raise TrainingError(epoch, loss)
            opt.step([g for layer in grads for g in layer])
            total += loss * len(idx)
            count += len(idx)
            report.steps += 1
        mean = total / count
        report.losses.append(mean)
        log.debug("epoch %d loss %.6g", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return report


# ---------------------------------------------------------------------------
# architectures


def build_classifier(input_shape=(70, 128, 1), seed: int = 0) -> Network:
    """Vessel-presence net: 2 blocks of [conv16 3x3 ReLU] x2 + maxpool, 2 x dense100, softmax(2)."""
    block = [conv(16), RELU, conv(16), RELU, maxpool(2)]
    specs = block * 2 + [FLATTEN, dense(100), RELU, dense(100), RELU, dense(2), SOFTMAX]
    return Network.build(input_shape, specs, "cross_entropy", seed)


def build_regressor(input_shape=(70, 128, 1), seed: int = 0) -> Network:
    """Vessel-centre net: blocks of 8, 12, 16 filters, 2 x dense100, linear (col, row) in [0, 1]."""
    specs: list[LayerSpec] = []
    for f in (8, 12, 16):
        specs += [conv(f), RELU, conv(f), RELU, maxpool(2)]
    specs += [FLATTEN, dense(100), RELU, dense(100), RELU, dense(2), LINEAR_OUTPUT]
    return Network.build(input_shape, specs, "mse", seed)


# ---------------------------------------------------------------------------
# weight files: little-endian, magic + version, shapes, specs and raw float32

MAGIC = b"VSNN"
VERSION = 1
_HEADER = struct.Struct("<4sHBB")  # magic, version, loss, input ndim
_LAYER = struct.Struct("<BIIIIB")  # kind, filters, size, stride, units, tensor count


def save_weights(net: Network, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, LOSS_KINDS.index(net.loss), len(net.input_shape)))
        fh.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
        fh.write(struct.pack("<H", len(net.specs)))
        for spec, params in zip(net.specs, net.params):
            fh.write(_LAYER.pack(LAYER_KINDS.index(spec.kind), spec.filters, spec.size, spec.stride, spec.units, len(params)))
            for w in params:
                fh.write(struct.pack("<B", w.ndim))
                fh.write(struct.pack(f"<{w.ndim}I", *w.shape))
                fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_weights(path: str | os.PathLike) -> Network:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(fmt: str):
        nonlocal pos
        st = struct.Struct(fmt)
        if pos + st.size > len(data):
            raise ConfigurationError(f"{path}: truncated weight file")
        vals = st.unpack_from(data, pos)
        pos += st.size
        return vals

    magic, version, loss, ndim = take(_HEADER.format)
    if magic != MAGIC:
        raise ConfigurationError(f"{path}: not a weight file (magic {magic!r})")
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported weight file version {version}")
    input_shape = take(f"<{ndim}I")
    (n_layers,) = take("<H")
    specs, params = [], []
    for _ in range(n_layers):
        kind, filters, size, stride, units, n_tensors = take(_LAYER.format)
        specs.append(LayerSpec(LAYER_KINDS[kind], filters, size, stride, units))
        tensors = []
        for _ in range(n_tensors):
            (nd,) = take("<B")
            shape = take(f"<{nd}I")
            count = int(np.prod(shape))
            if pos + 4 * count > len(data):
                raise ConfigurationError(f"{path}: truncated weight file")
            tensors.append(np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(DTYPE))
            pos += 4 * count
        params.append(tensors)
    return Network(tuple(input_shape), specs, LOSS_KINDS[loss], params)
