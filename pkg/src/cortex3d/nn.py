"""Differentiable layers and the network forward/backward engine.

A Network is a strict chain of layers (conv3d / maxpool / flatten / dense /
softmax) that processes one sample at a time; batching lives in the training
loops. Shape chaining is validated once, at construction.

Gradient conventions:

* mini-batch gradients are the mean over batch items, accumulated in fixed
  batch-index order;
* frozen layers contribute zero entries to the gradient set and are never
  updated;
* the ReLU subgradient at exactly 0 is 0;
* ``nll_loss`` returns the gradient with respect to the *logits*
  (probs - onehot), so the Softmax layer's backward is a documented
  pass-through: softmax and NLL are fused, which is the only pairing this
  library uses.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .parallel import ordered_map
from .tensor import conv3d, conv3d_out_shape, flip3d, maxpool3d, maxpool3d_grad, maxpool3d_out_shape

ACTIVATIONS = ("relu", "sigmoid", "identity")

PROB_FLOOR = 1e-30


def activation_apply(kind: str, x: np.ndarray) -> np.ndarray:
    """Elementwise activation; shape preserved."""
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(kind: str, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """upstream * f'(x), elementwise."""
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs upstream {upstream.shape}")
    if kind == "relu":
        return np.where(x > 0, upstream, np.zeros((), dtype=upstream.dtype))
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x))
        return upstream * s * (1.0 - s)
    if kind == "identity":
        return upstream.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    """Seeded uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def _conv_param_grad(x: np.ndarray, dz: np.ndarray, n: int, mode: str) -> np.ndarray:
    """Gradient of a conv3d output w.r.t. its kernel bank.

    ``x`` is the (unpadded) forward input (J,...), ``dz`` the gradient at the
    conv output (K,...); returns (K, J, n, n, n).
    """
    if mode == "full" and n > 1:
        p = n - 1
        x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(x, dz.shape[1:], axis=(1, 2, 3))
    g = np.tensordot(dz, win, axes=([1, 2, 3], [4, 5, 6]))
    return np.ascontiguousarray(g)


def _conv_input_grad(dz: np.ndarray, kernels: np.ndarray, mode: str) -> np.ndarray:
    """Gradient of a conv3d output w.r.t. its input."""
    swapped = np.ascontiguousarray(flip3d(kernels).transpose(1, 0, 2, 3, 4))
    inverse = "full" if mode == "valid" else "valid"
    return conv3d(dz, swapped, inverse)


class ConvLayer:
    """3D convolution + per-map bias + activation.

    ``mode`` is "full" for layers transplanted from autoencoder encoders
    (their shape discipline) and "valid" otherwise.
    """

    kind = "conv3d"

    def __init__(self, kernels, bias, activation="relu", frozen=False, mode="full"):
        if kernels.ndim != 5:
            raise ValueError(f"conv kernels must be rank 5, got shape {kernels.shape}")
        if bias.shape != (kernels.shape[0],):
            raise ValueError(
                f"conv bias must have one entry per feature map: got {bias.shape}, "
                f"expected {(kernels.shape[0],)}"
            )
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if mode not in ("valid", "full"):
            raise ValueError(f"mode must be 'valid' or 'full', got {mode!r}")
        self.kernels = kernels
        self.bias = bias
        self.activation = activation
        self.frozen = frozen
        self.mode = mode

    def out_shape(self, in_shape):
        return conv3d_out_shape(in_shape, self.kernels.shape, self.mode)

    def params(self):
        return {"W": self.kernels, "b": self.bias}

    def forward(self, x):
        z = conv3d(x, self.kernels, self.mode) + self.bias[:, None, None, None]
        return activation_apply(self.activation, z), (x, z)

    def backward(self, upstream, cache, need_param_grads=True):
        x, z = cache
        dz = activation_grad(self.activation, z, upstream)
        grads = {}
        if need_param_grads:
            grads["W"] = _conv_param_grad(x, dz, self.kernels.shape[2], self.mode)
            grads["b"] = dz.sum(axis=(1, 2, 3))
        dx = _conv_input_grad(dz, self.kernels, self.mode)
        return dx, grads


class MaxPoolLayer:
    kind = "maxpool"

    def __init__(self, window=2, stride=2):
        if window < 1 or stride < 1:
            raise ValueError(f"window and stride must be >= 1, got {window}, {stride}")
        self.window = window
        self.stride = stride
        self.frozen = False

    def out_shape(self, in_shape):
        return maxpool3d_out_shape(in_shape, self.window, self.stride)

    def params(self):
        return {}

    def forward(self, x):
        out, idx = maxpool3d(x, self.window, self.stride)
        return out, idx

    def backward(self, upstream, cache, need_param_grads=True):
        return maxpool3d_grad(upstream, cache, cache.input_shape), {}


class FlattenLayer:
    kind = "flatten"

    def __init__(self):
        self.frozen = False

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def params(self):
        return {}

    def forward(self, x):
        return np.ascontiguousarray(x).reshape(-1), x.shape

    def backward(self, upstream, cache, need_param_grads=True):
        return upstream.reshape(cache), {}


class DenseLayer:
    """Fully connected layer: y = activation(W x + b) on flat vectors."""

    kind = "dense"

    def __init__(self, weights, bias, activation="relu", frozen=False):
        if weights.ndim != 2:
            raise ValueError(f"dense weights must be rank 2, got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ValueError(f"dense bias shape {bias.shape} does not match weights {weights.shape}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self.frozen = frozen

    @classmethod
    def init(cls, rng, in_width, out_width, activation="relu", frozen=False, dtype=np.float32):
        if out_width < 1 or in_width < 1:
            raise ValueError(f"dense layer widths must be >= 1, got {in_width} -> {out_width}")
        w = glorot_uniform(rng, (out_width, in_width), in_width, out_width, dtype)
        return cls(w, np.zeros(out_width, dtype=dtype), activation, frozen)

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weights.shape[1]:
            raise ValueError(
                f"dense layer expects flat input of length {self.weights.shape[1]}, "
                f"got shape {tuple(in_shape)}"
            )
        return (self.weights.shape[0],)

    def params(self):
        return {"W": self.weights, "b": self.bias}

    def forward(self, x):
        z = self.weights @ x + self.bias
        return activation_apply(self.activation, z), (x, z)

    def backward(self, upstream, cache, need_param_grads=True):
        x, z = cache
        dz = activation_grad(self.activation, z, upstream)
        grads = {}
        if need_param_grads:
            grads["W"] = np.outer(dz, x)
            grads["b"] = dz.copy()
        dx = self.weights.T @ dz
        return dx, grads


class SoftmaxLayer:
    """Terminal probability layer.

    Backward is the identity: this layer is always paired with ``nll_loss``,
    whose returned gradient is already taken with respect to the logits.
    """

    kind = "softmax"

    def __init__(self):
        self.frozen = False

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] < 2:
            raise ValueError(f"softmax expects a flat input of length >= 2, got shape {tuple(in_shape)}")
        return tuple(in_shape)

    def params(self):
        return {}

    def forward(self, x):
        return softmax(x), None

    def backward(self, upstream, cache, need_param_grads=True):
        return upstream, {}


def dense_forward(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, activation: str = "identity") -> np.ndarray:
    """One fully connected application: activation(W x + b)."""
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: weights {weights.shape} vs input {x.shape}")
    return activation_apply(activation, weights @ x + bias)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over a flat vector of length >= 2."""
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ValueError(f"softmax expects a flat vector of length >= 2, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax rejects non-finite logits")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def nll_loss(probs: np.ndarray, true_class: int) -> tuple[float, np.ndarray, bool]:
    """Negated log-likelihood of the true class.

    Returns (loss, gradient w.r.t. the logits = probs - onehot, clamped);
    ``clamped`` flags probabilities that underflowed the 1e-30 floor before
    the log, for training stats.
    """
    if not 0 <= true_class < probs.shape[0]:
        raise ValueError(f"true_class {true_class} out of range for {probs.shape[0]} classes")
    p = float(probs[true_class])
    clamped = p < PROB_FLOOR
    loss = -float(np.log(max(p, PROB_FLOOR)))
    grad = probs.astype(probs.dtype, copy=True)
    grad[true_class] -= 1.0
    return loss, grad, clamped


class Network:
    """An ordered layer chain with a fixed input shape.

    Consecutive layer shapes are validated here, at construction; forward and
    backward then only check that the sample matches ``input_shape``.
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}) breaks the shape chain: {exc}") from exc
        self.output_shape = tuple(shape)

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed 'layer{i}.{name}'."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"layer{i}.{name}"] = arr
        return out

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.frozen:
                continue
            for name, arr in layer.params().items():
                out[f"layer{i}.{name}"] = arr
        return out


@dataclass
class ForwardCache:
    """Per-layer activation records from one network_forward call."""

    net: Network
    layer_caches: list = field(default_factory=list)


def network_forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    if tuple(x.shape) != net.input_shape:
        raise ValueError(f"input shape {x.shape} does not match network input {net.input_shape}")
    cache = ForwardCache(net=net)
    out = x
    for layer in net.layers:
        out, lc = layer.forward(out)
        cache.layer_caches.append(lc)
    return out, cache


def network_backward(net: Network, cache: ForwardCache, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate ``loss_grad`` (gradient at the network output).

    Returns a gradient set: one entry per parameter, keyed like
    ``Network.parameters()``; frozen layers carry zeros. The walk stops below
    the deepest layer that still needs a parameter gradient.
    """
    if cache.net is not net or len(cache.layer_caches) != len(net.layers):
        raise ValueError("stale cache: it was not produced by a forward pass of this network")
    grads: dict[str, np.ndarray] = {}
    first_needed = len(net.layers)
    for i, layer in enumerate(net.layers):
        if layer.params():
            if layer.frozen:
                for name, arr in layer.params().items():
                    grads[f"layer{i}.{name}"] = np.zeros_like(arr)
            else:
                first_needed = min(first_needed, i)
    upstream = loss_grad
    for i in range(len(net.layers) - 1, first_needed - 1, -1):
        layer = net.layers[i]
        need = bool(layer.params()) and not layer.frozen
        upstream, g = layer.backward(upstream, cache.layer_caches[i], need_param_grads=need)
        if need:
            for name, arr in g.items():
                grads[f"layer{i}.{name}"] = arr
    return grads


def network_loss(net: Network, x: np.ndarray, true_class: int):
    """Forward + NLL in one call; returns (loss, probs, cache, clamped)."""
    probs, cache = network_forward(net, x)
    loss, dlogits, clamped = nll_loss(probs, true_class)
    return loss, dlogits, cache, clamped


def batch_loss_and_grads(net: Network, samples, workers=None):
    """Mean NLL, training accuracy, mean gradient set and clamp count.

    ``samples`` is a sequence of (input, true_class). Items may be evaluated
    by worker threads, but losses and gradients are reduced in batch-index
    order, so the result is independent of worker count.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty batch")

    def one_full(sample):
        x, true_class = sample
        probs, cache = network_forward(net, x)
        loss, dlogits, clamped = nll_loss(probs, true_class)
        grads = network_backward(net, cache, dlogits)
        correct = int(np.argmax(probs)) == true_class
        return loss, grads, correct, clamped

    results = ordered_map(one_full, samples, workers)
    inv = 1.0 / len(samples)
    mean_grads = None
    total_loss = 0.0
    n_correct = 0
    n_clamped = 0
    for loss, grads, correct, clamped in results:
        total_loss += loss
        n_correct += int(correct)
        n_clamped += int(clamped)
        if mean_grads is None:
            mean_grads = {k: v.copy() for k, v in grads.items()}
        else:
            for k, v in grads.items():
                mean_grads[k] += v
    for k in mean_grads:
        mean_grads[k] *= np.asarray(inv, dtype=mean_grads[k].dtype)
    return total_loss * inv, n_correct / len(samples), mean_grads, n_clamped


@dataclass
class FdReport:
    """Worst-case finite-difference vs analytic gradient comparison."""

    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float

    def __str__(self):
        return (
            f"max relative error {self.max_rel_error:.3e} at {self.worst_param}{list(self.worst_index)} "
            f"(analytic {self.analytic:.6e}, finite-difference {self.numeric:.6e})"
        )


def finite_diff_check(net: Network, x: np.ndarray, true_class: int, epsilon: float = 1e-5) -> FdReport:
    """Compare analytic gradients of the NLL to central finite differences.

    Perturbs every unfrozen parameter coordinate by +-epsilon and reports the
    worst relative error and its coordinates. Run this on double-precision
    networks; float32 roundoff swamps the comparison.
    """
    loss, dlogits, cache, _ = network_loss(net, x, true_class)
    analytic = network_backward(net, cache, dlogits)
    worst = FdReport(0.0, "", (), 0.0, 0.0)
    for name, arr in net.trainable_parameters().items():
        an = analytic[name]
        flat = arr.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = network_loss(net, x, true_class)[0]
            flat[i] = orig - epsilon
            lm = network_loss(net, x, true_class)[0]
            flat[i] = orig
            fd = (lp - lm) / (2.0 * epsilon)
            a = float(an.reshape(-1)[i])
            rel = abs(fd - a) / max(abs(fd), abs(a), 1e-6)
            if rel > worst.max_rel_error:
                idx = np.unravel_index(i, arr.shape)
                worst = FdReport(rel, name, tuple(int(v) for v in idx), a, fd)
    return worst
