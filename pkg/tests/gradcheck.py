"""Central finite-difference oracle for network gradients.

The oracle has its own float64 forward pass (sliding-window convolution,
window max pooling), written independently of the engine's kernels, so the
difference quotient measures the function rather than float32 rounding.
The engine's float32 analytic gradients are compared against it.

A step of eps can push a ReLU input or a pooling competitor across its
switch point, and then the difference quotient no longer measures the
derivative.  Such coordinates are detected by comparing the activation
pattern at +eps and -eps with the unperturbed one, and replaced by others.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vesselscan import neuralnet as nn

EPS = 1e-3


def reference_forward(specs, params, x):
    """Float64 forward pass; returns (output, activation pattern bytes)."""
    x = np.asarray(x, np.float64)
    pattern = []
    for spec, p in zip(specs, params):
        if spec.kind == "conv2d":
            w, b = p
            k, s = spec.size, spec.stride
            win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]  # n, ho, wo, c, k, k
            x = np.einsum("nhwcij,ijcf->nhwf", win, w) + b
        elif spec.kind == "maxpool":
            k = spec.size
            n, h, wd, c = x.shape
            blocks = x[:, : h // k * k, : wd // k * k].reshape(n, h // k, k, wd // k, k, c)
            blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // k, wd // k, c, k * k)
            pattern.append(blocks.argmax(axis=-1).astype(np.uint8))
            x = blocks.max(axis=-1)
        elif spec.kind == "relu":
            pattern.append(np.packbits(x > 0))
            x = np.maximum(x, 0.0)
        elif spec.kind == "flatten":
            x = x.reshape(len(x), -1)
        elif spec.kind == "dense":
            w, b = p
            x = x @ w + b
        elif spec.kind == "softmax":
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            x = e / e.sum(axis=-1, keepdims=True)
    return x, b"".join(a.tobytes() for a in pattern)


def reference_loss(loss, out, target):
    if loss == "cross_entropy":
        return float(-np.mean(np.sum(target * np.log(out), axis=-1)))
    return float(np.mean((out - target) ** 2))


def relative_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_network(net, x, target, samples=12, seed=0, eps=EPS, attempts=4):
    """Relative error per weight tensor over up to ``samples`` kink-free coordinates.

    Returns {(layer, tensor): (relative error, coordinates used)}.
    """
    x = net._check_input(x)
    rng = np.random.default_rng(seed)
    _, grads = nn.backward(net, x, target)
    params = [[np.array(w, np.float64) for w in layer] for layer in net.params]
    target = np.asarray(target, np.float64)
    out, base = reference_forward(net.specs, params, x)

    def evaluate():
        o, pat = reference_forward(net.specs, params, x)
        return reference_loss(net.loss, o, target), pat

    result = {}
    for li, layer in enumerate(params):
        for ti, w in enumerate(layer):
            analytic, numeric = [], []
            for flat in rng.permutation(w.size)[: attempts * samples]:
                coord = np.unravel_index(flat, w.shape)
                old = w[coord]
                w[coord] = old + eps
                up, pat_up = evaluate()
                w[coord] = old - eps
                down, pat_down = evaluate()
                w[coord] = old
                if pat_up != base or pat_down != base:
                    continue
                analytic.append(grads[li][ti][coord])
                numeric.append((up - down) / (2 * eps))
                if len(numeric) == samples:
                    break
            result[(li, ti)] = (relative_error(analytic, numeric), len(numeric))
    return result


def worst(result, min_coords):
    """Largest error; fails loudly if a tensor had too few usable coordinates."""
    for key, (_, used) in result.items():
        assert used >= min_coords, f"only {used} kink-free coordinates for tensor {key}"
    return max(err for err, _ in result.values())
