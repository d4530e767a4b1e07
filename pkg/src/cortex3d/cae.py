"""Tied-weight 3D convolutional autoencoders and greedy stack training.

One layer encodes a (J, D, H, W) volume into K feature maps with a *full*
convolution (each spatial axis grows by n-1) and reconstructs the input with
a *valid* convolution, so decode(encode(x)) always restores the original
shape. Decoder kernels are never stored: they are the encoder bank flipped
over all three spatial dimensions, computed at use time, which couples the
two paths' gradients.

Stacked layers hand off max-pooled encodings: pooling feeds the next layer's
training input only, the reconstruction path always decodes the pre-pool
hidden maps.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .optim import NonFiniteGradientError, OptimizerState
from .parallel import ordered_map
from .seeding import derive_rng
from .tensor import conv3d, conv3d_out_shape, flip3d, maxpool3d, maxpool3d_out_shape


@dataclass
class CaeLayer:
    """One tied-weight 3D convolutional autoencoder.

    ``kernels`` is the encoder bank (K, J, n, n, n); ``bias`` holds one
    scalar per feature map and ``decode_bias`` one per reconstructed channel.
    """

    kernels: np.ndarray
    bias: np.ndarray
    decode_bias: np.ndarray
    encode_activation: str = "relu"
    decode_activation: str = "relu"

    def __post_init__(self):
        if self.kernels.ndim != 5:
            raise ValueError(f"encoder kernels must be rank 5, got shape {self.kernels.shape}")
        k, j = self.kernels.shape[:2]
        if self.bias.shape != (k,):
            raise ValueError(f"encoder bias must be shape ({k},), got {self.bias.shape}")
        if self.decode_bias.shape != (j,):
            raise ValueError(f"decoder bias must be shape ({j},), got {self.decode_bias.shape}")

    @classmethod
    def init(cls, rng, num_maps, in_channels, kernel_size, encode_activation="relu",
             decode_activation="relu", dtype=np.float32):
        n3 = kernel_size**3
        w = nn.glorot_uniform(
            rng,
            (num_maps, in_channels, kernel_size, kernel_size, kernel_size),
            fan_in=in_channels * n3,
            fan_out=num_maps * n3,
            dtype=dtype,
        )
        return cls(
            kernels=w,
            bias=np.zeros(num_maps, dtype=dtype),
            decode_bias=np.zeros(in_channels, dtype=dtype),
            encode_activation=encode_activation,
            decode_activation=decode_activation,
        )

    @property
    def num_maps(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.kernels, "b": self.bias, "b_inv": self.decode_bias}


def cae_encode(layer: CaeLayer, x: np.ndarray) -> np.ndarray:
    """Hidden maps h = f(W *_full x + b); spatial extents grow by n-1."""
    if x.ndim != 4 or x.shape[0] != layer.in_channels:
        raise ValueError(
            f"encode expects input with {layer.in_channels} channels, got shape {x.shape}"
        )
    z = conv3d(x, layer.kernels, "full") + layer.bias[:, None, None, None]
    return nn.activation_apply(layer.encode_activation, z)


def _decode_pre_activations(layer: CaeLayer, h: np.ndarray) -> np.ndarray:
    """Per-map decode pre-activations u[k] = flip(W_k) *_valid h_k + b_inv."""
    flipped = flip3d(layer.kernels)
    u = np.empty((layer.num_maps, layer.in_channels) + tuple(e - layer.kernel_size + 1 for e in h.shape[1:]),
                 dtype=h.dtype)
    for k in range(layer.num_maps):
        u[k] = conv3d(h[k][None], np.ascontiguousarray(flipped[k][:, None]), "valid")
    return u + layer.decode_bias[None, :, None, None, None]


def cae_decode(layer: CaeLayer, h: np.ndarray) -> np.ndarray:
    """Reconstruction x_hat = sum_k g(flip(W_k) *_valid h_k + b_inv).

    ``h`` must be the pre-pool output of cae_encode for this layer; each
    spatial axis shrinks back by n-1, restoring the encoder input shape.
    The activation g applies per map, before the sum over maps.
    """
    if h.ndim != 4 or h.shape[0] != layer.num_maps:
        raise ValueError(f"decode expects {layer.num_maps} feature maps, got shape {h.shape}")
    if any(e < layer.kernel_size for e in h.shape[1:]):
        raise ValueError(
            f"feature maps of shape {h.shape} cannot round-trip through a "
            f"kernel of extent {layer.kernel_size}"
        )
    u = _decode_pre_activations(layer, h)
    return nn.activation_apply(layer.decode_activation, u).sum(axis=0)


def cae_reconstruct(layer: CaeLayer, x: np.ndarray) -> np.ndarray:
    return cae_decode(layer, cae_encode(layer, x))


def _item_loss_and_grads(layer: CaeLayer, x: np.ndarray):
    """Squared reconstruction error of one volume and its analytic gradients.

    The kernel gradient combines the encode path and, via the flip, the tied
    decode path.
    """
    n = layer.kernel_size
    z = conv3d(x, layer.kernels, "full") + layer.bias[:, None, None, None]
    h = nn.activation_apply(layer.encode_activation, z)
    u = _decode_pre_activations(layer, h)
    a = nn.activation_apply(layer.decode_activation, u)
    x_hat = a.sum(axis=0)

    diff = x_hat - x
    loss = float((diff * diff).sum())
    dxhat = 2.0 * diff

    flipped = flip3d(layer.kernels)
    d_flipped = np.empty_like(layer.kernels)
    dh = np.empty_like(h)
    db_inv = np.zeros_like(layer.decode_bias)
    for k in range(layer.num_maps):
        du_k = nn.activation_grad(layer.decode_activation, u[k], dxhat)
        d_flipped[k] = nn._conv_param_grad(h[k][None], du_k, n, "valid")[:, 0]
        dh[k] = nn._conv_input_grad(du_k, np.ascontiguousarray(flipped[k][:, None]), "valid")[0]
        db_inv += du_k.sum(axis=(1, 2, 3))

    dz = nn.activation_grad(layer.encode_activation, z, dh)
    grads = {
        "W": nn._conv_param_grad(x, dz, n, "full") + flip3d(d_flipped),
        "b": dz.sum(axis=(1, 2, 3)),
        "b_inv": db_inv,
    }
    return loss, grads


def cae_loss(layer: CaeLayer, batch) -> float:
    """Mean squared reconstruction error over a batch of volumes.

    Per image: the sum of squared voxel differences; the batch value is the
    mean of those sums.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    shape = batch[0].shape
    for t, x in enumerate(batch):
        if x.shape != shape:
            raise ValueError(f"batch item {t} has shape {x.shape}, expected uniform {shape}")
    total = 0.0
    for x in batch:
        diff = cae_reconstruct(layer, x) - x
        total += float((diff * diff).sum())
    return total / len(batch)


def cae_batch_loss_and_grads(layer: CaeLayer, batch, workers=None):
    """Mean loss and mean gradients over a batch, reduced in item order."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    results = ordered_map(lambda x: _item_loss_and_grads(layer, x), batch, workers)
    inv = 1.0 / len(batch)
    total = 0.0
    mean_grads = None
    for loss, grads in results:
        total += loss
        if mean_grads is None:
            mean_grads = grads
        else:
            for k in mean_grads:
                mean_grads[k] += grads[k]
    for k in mean_grads:
        mean_grads[k] *= np.asarray(inv, dtype=mean_grads[k].dtype)
    return total * inv, mean_grads


@dataclass
class TrainHistory:
    """Per-epoch record of one training run."""

    epoch_losses: list = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0
    aborted: bool = False


def train_cae(layer: CaeLayer, inputs, optimizer: OptimizerState, epochs: int,
              batch_size: int, seed: int) -> TrainHistory:
    """Mini-batch training of one autoencoder layer, in place.

    Batch order reshuffles every epoch from the given seed. If the loss or a
    gradient goes non-finite the run aborts, restoring the parameters saved
    at the end of the last completed epoch.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("empty training set")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    params = layer.params()
    history = TrainHistory(initial_loss=cae_loss(layer, inputs))
    history.final_loss = history.initial_loss
    if epochs == 0:
        return history

    rng = derive_rng(seed, "cae-train")
    snapshot = {k: v.copy() for k, v in params.items()}
    for _ in range(epochs):
        order = rng.permutation(len(inputs))
        epoch_total = 0.0
        ok = True
        for start in range(0, len(inputs), batch_size):
            batch = [inputs[i] for i in order[start:start + batch_size]]
            try:
                loss, grads = cae_batch_loss_and_grads(layer, batch)
                if not np.isfinite(loss):
                    raise NonFiniteGradientError(f"non-finite loss {loss}")
                optimizer.step(params, grads)
            except NonFiniteGradientError:
                ok = False
                break
            epoch_total += loss * len(batch)
        if not ok:
            for k, v in snapshot.items():
                params[k][...] = v
            history.aborted = True
            break
        history.epoch_losses.append(epoch_total / len(inputs))
        snapshot = {k: v.copy() for k, v in params.items()}
    history.final_loss = cae_loss(layer, inputs)
    return history


@dataclass
class CaeStack:
    """Ordered autoencoder layers with per-layer pooling config.

    Channel chaining is enforced: layer l consumes the K_{l-1} pooled maps of
    layer l-1; layer 0 consumes the image channels.
    """

    layers: list
    pool_windows: list
    pool_strides: list

    def __post_init__(self):
        if not (len(self.layers) == len(self.pool_windows) == len(self.pool_strides)):
            raise ValueError("layers, pool_windows and pool_strides must have equal length")
        for l in range(1, len(self.layers)):
            need = self.layers[l - 1].num_maps
            got = self.layers[l].in_channels
            if got != need:
                raise ValueError(
                    f"stack layer {l} expects {got} input channels but layer {l - 1} "
                    f"produces {need} maps"
                )

    @classmethod
    def build(cls, seed, num_layers=3, num_maps=8, in_channels=1, kernel_size=3,
              pool_window=2, pool_stride=2, encode_activation="relu",
              decode_activation="relu", dtype=np.float32):
        """Fresh stack with seeded Glorot init, defaults 3 layers of 8 cubic 3-kernels."""
        layers = []
        j = in_channels
        for l in range(num_layers):
            rng = derive_rng(seed, "cae-init", l)
            layers.append(CaeLayer.init(rng, num_maps, j, kernel_size,
                                        encode_activation, decode_activation, dtype))
            j = num_maps
        return cls(layers=layers,
                   pool_windows=[pool_window] * num_layers,
                   pool_strides=[pool_stride] * num_layers)


def stack_forward(stack: CaeStack, x: np.ndarray) -> list[np.ndarray]:
    """Pooled feature maps of every layer, each feeding the next."""
    maps = []
    cur = x
    for layer, w, s in zip(stack.layers, stack.pool_windows, stack.pool_strides):
        h = cae_encode(layer, cur)
        cur, _ = maxpool3d(h, w, s)
        maps.append(cur)
    return maps


def stack_feature_shapes(stack: CaeStack, input_shape) -> list[tuple]:
    """Per-layer pooled map shapes for an input of ``input_shape``, without computing."""
    shapes = []
    shape = tuple(input_shape)
    for layer, w, s in zip(stack.layers, stack.pool_windows, stack.pool_strides):
        shape = conv3d_out_shape(shape, layer.kernels.shape, "full")
        shape = maxpool3d_out_shape(shape, w, s)
        shapes.append(shape)
    return shapes


def train_stack_greedy(stack: CaeStack, inputs, optimizer_factory, epochs: int,
                       batch_size: int, seed: int) -> list[TrainHistory]:
    """Greedy layerwise pretraining.

    Trains layer 0 on the raw inputs, materializes its pooled encodings,
    trains layer 1 on those, and so on; earlier layers are never revisited.
    ``optimizer_factory`` must return a fresh OptimizerState per layer.
    """
    histories = []
    cur = list(inputs)
    for l, (layer, w, s) in enumerate(zip(stack.layers, stack.pool_windows, stack.pool_strides)):
        histories.append(train_cae(layer, cur, optimizer_factory(), epochs, batch_size,
                                   seed=derive_rng(seed, "stack", l).integers(2**31)))
        cur = [maxpool3d(cae_encode(layer, x), w, s)[0] for x in cur]
    return histories


SLICE_AXES = {"axial": 1, "coronal": 2, "sagittal": 3}


def feature_slices(stack: CaeStack, x: np.ndarray, layer_index: int, axis: str,
                   position: int) -> list[np.ndarray]:
    """One 2D slice per feature map of the chosen layer, scaled to [0, 255].

    ``axis`` is an anatomical view name (axial slices index depth, sagittal
    index width). Each map is min-max normalized independently; a constant
    map comes out all black.
    """
    if axis not in SLICE_AXES:
        raise ValueError(f"axis must be one of {sorted(SLICE_AXES)}, got {axis!r}")
    if not 0 <= layer_index < len(stack.layers):
        raise ValueError(f"layer_index {layer_index} out of range for {len(stack.layers)} layers")
    maps = stack_forward(stack, x)[layer_index]
    ax = SLICE_AXES[axis]
    if not 0 <= position < maps.shape[ax]:
        raise ValueError(
            f"position {position} out of range for axis {axis!r} with extent {maps.shape[ax]}"
        )
    images = []
    for k in range(maps.shape[0]):
        img = np.take(maps[k], position, axis=ax - 1)
        lo, hi = float(img.min()), float(img.max())
        if hi > lo:
            scaled = (img - lo) * (255.0 / (hi - lo))
        else:
            scaled = np.zeros_like(img)
        images.append(np.round(scaled).astype(np.uint8))
    return images


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"PGM export expects a 2D uint8 image, got {image.dtype} {image.shape}")
    rows, cols = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def write_feature_slices(stack: CaeStack, x: np.ndarray, layer_index: int, axis: str,
                         position: int, out_dir) -> list:
    """Write one PGM per feature map; returns the created paths."""
    import os

    images = feature_slices(stack, x, layer_index, axis, position)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, img in enumerate(images):
        path = os.path.join(out_dir, f"layer{layer_index}_map{k}_{axis}{position}.pgm")
        write_pgm(path, img)
        paths.append(path)
    return paths
