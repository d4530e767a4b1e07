"""Dense volumetric tensors and the core spatial operations.

A tensor here is simply a C-contiguous numpy array of float32 or float64
with rank 1 to 5 and all extents >= 1; ``as_tensor`` enforces that contract.
The canonical volumetric layout is (channels, depth, height, width) and
kernel banks are (out_maps, in_channels, n, n, n) with cubic spatial extent.

Convolution is plain cross-correlation: no kernel flip happens inside
``conv3d``. Where a flipped kernel is wanted (tied-weight decoding), callers
apply ``flip3d`` explicitly. Every output voxel is reduced in a fixed serial
order over (input channel, kernel tap), so results do not depend on how many
worker threads the caller uses.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32

MAX_RANK = 5


def as_tensor(data, dtype=None) -> np.ndarray:
    """Validate and return ``data`` as a contiguous rank-1..5 float array.

    ``dtype`` may be float32 or float64; by default float inputs keep their
    precision and anything else is converted to float32.
    """
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in FLOAT_DTYPES else DEFAULT_DTYPE
    if np.dtype(dtype) not in [np.dtype(d) for d in FLOAT_DTYPES]:
        raise ValueError(f"dtype must be float32 or float64, got {np.dtype(dtype)}")
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise ValueError(f"tensor rank must be 1..{MAX_RANK}, got rank {arr.ndim}")
    if any(e < 1 for e in arr.shape):
        raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
    return arr


def _check_kernels(kernels: np.ndarray) -> tuple[int, int, int]:
    if kernels.ndim != 5:
        raise ValueError(f"kernel bank must have rank 5 (K,J,n,n,n), got shape {kernels.shape}")
    k, j, n0, n1, n2 = kernels.shape
    if not (n0 == n1 == n2):
        raise ValueError(f"kernels must be cubic, got spatial extents {(n0, n1, n2)}")
    return k, j, n0


def conv3d_out_shape(in_shape, kernel_shape, mode: str) -> tuple[int, ...]:
    """Output shape of ``conv3d`` without computing it."""
    j_in = in_shape[0]
    k, j, n = kernel_shape[0], kernel_shape[1], kernel_shape[2]
    if j != j_in:
        raise ValueError(
            f"channel mismatch: input shape {tuple(in_shape)} has {j_in} channels, "
            f"kernel bank shape {tuple(kernel_shape)} expects {j}"
        )
    if mode == "valid":
        spatial = tuple(e - n + 1 for e in in_shape[1:])
        if any(e < 1 for e in spatial):
            raise ValueError(
                f"valid convolution of input {tuple(in_shape)} with kernel extent {n} "
                f"yields empty output {(k,) + spatial}"
            )
    elif mode == "full":
        spatial = tuple(e + n - 1 for e in in_shape[1:])
    else:
        raise ValueError(f"mode must be 'valid' or 'full', got {mode!r}")
    return (k,) + spatial


def conv3d(x: np.ndarray, kernels: np.ndarray, mode: str = "valid") -> np.ndarray:
    """3D multi-channel cross-correlation.

    ``x`` is (J, D, H, W), ``kernels`` is (K, J, n, n, n). Valid mode shrinks
    each spatial axis by n-1; full mode grows it by n-1 (computed as valid
    correlation over a zero-padded input).
    """
    if x.ndim != 4:
        raise ValueError(f"input must have rank 4 (J,D,H,W), got shape {x.shape}")
    _check_kernels(kernels)
    if x.dtype != kernels.dtype:
        raise ValueError(f"dtype mismatch: input {x.dtype} vs kernels {kernels.dtype}")
    out_shape = conv3d_out_shape(x.shape, kernels.shape, mode)
    n = kernels.shape[2]
    if mode == "full" and n > 1:
        p = n - 1
        x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(x, (n, n, n), axis=(1, 2, 3))
    out = np.tensordot(kernels, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    assert out.shape == out_shape
    return np.ascontiguousarray(out)


def flip3d(kernels: np.ndarray) -> np.ndarray:
    """Reverse a rank-5 kernel bank along all three spatial axes.

    This is the weight tie used by the decoder: flip3d is an involution,
    flip3d(flip3d(k)) == k exactly.
    """
    if kernels.ndim != 5:
        raise ValueError(f"flip3d expects a rank-5 kernel bank, got shape {kernels.shape}")
    return np.ascontiguousarray(kernels[:, :, ::-1, ::-1, ::-1])


@dataclass(frozen=True)
class PoolIndex:
    """Argmax bookkeeping for one max-pool application.

    ``indices`` holds, per output cell, the flat (row-major) offset into the
    pooled input where the window maximum was found; ties are broken by the
    lowest offset. Needed to route gradients back through the pool.
    """

    shape: tuple
    indices: np.ndarray
    input_shape: tuple
    window: int
    stride: int


def maxpool3d_out_shape(in_shape, window: int, stride: int) -> tuple[int, ...]:
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be >= 1, got {window}, {stride}")
    return (in_shape[0],) + tuple(math.ceil(e / stride) for e in in_shape[1:])


def maxpool3d(x: np.ndarray, window: int = 2, stride: int = 2) -> tuple[np.ndarray, PoolIndex]:
    """Channel-wise 3D max pooling with ceil semantics.

    Output extent per spatial axis is ceil(extent / stride); windows that
    overhang the boundary are clipped. Input values must be finite.
    """
    if x.ndim != 4:
        raise ValueError(f"input must have rank 4 (K,D,H,W), got shape {x.shape}")
    k, d, h, w = x.shape
    od, oh, ow = maxpool3d_out_shape(x.shape, window, stride)[1:]

    pd = max(d, (od - 1) * stride + window)
    ph = max(h, (oh - 1) * stride + window)
    pw = max(w, (ow - 1) * stride + window)
    padded = np.full((k, pd, ph, pw), -np.inf, dtype=x.dtype)
    padded[:, :d, :h, :w] = x

    win = sliding_window_view(padded, (window, window, window), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride][:, :od, :oh, :ow]
    flat = win.reshape(k, od, oh, ow, window**3)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    a, b, c = np.unravel_index(am, (window, window, window))
    kk = np.arange(k).reshape(k, 1, 1, 1)
    dd = np.arange(od).reshape(1, od, 1, 1) * stride + a
    hh = np.arange(oh).reshape(1, 1, oh, 1) * stride + b
    ww = np.arange(ow).reshape(1, 1, 1, ow) * stride + c
    indices = ((kk * d + dd) * h + hh) * w + ww

    idx = PoolIndex(
        shape=out.shape,
        indices=indices.astype(np.int64),
        input_shape=x.shape,
        window=window,
        stride=stride,
    )
    return np.ascontiguousarray(out), idx


def maxpool3d_grad(grad_out: np.ndarray, idx: PoolIndex, in_shape) -> np.ndarray:
    """Route ``grad_out`` back to the argmax positions recorded in ``idx``.

    Every non-argmax position receives zero; overlapping windows accumulate,
    so the output sums to exactly sum(grad_out).
    """
    if tuple(grad_out.shape) != tuple(idx.shape):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match pool output shape {idx.shape}")
    if tuple(in_shape) != tuple(idx.input_shape):
        raise ValueError(
            f"in_shape {tuple(in_shape)} is inconsistent with the recorded pooled-input "
            f"shape {tuple(idx.input_shape)}"
        )
    out = np.zeros(tuple(in_shape), dtype=grad_out.dtype)
    np.add.at(out.ravel(), idx.indices.ravel(), grad_out.ravel())
    return out
