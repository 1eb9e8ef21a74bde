"""
Numeric building blocks for the segmentation network.

Every operation accepts a single image (C x H x W) or a batch (N x C x H x W)
and preserves the input dtype. Sums are accumulated in float64 and rounded
back once at the end.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedseg.errors import NonFiniteError, ShapeMismatchError


@dataclass(frozen=True)
class LayerGrad:
    """Gradients of one convolution w.r.t. its input, weights and bias."""

    input_grad: np.ndarray
    weight_grad: np.ndarray
    bias_grad: np.ndarray


def check_finite(array: np.ndarray, what: str = 'tensor') -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def _as_batch(tensor: np.ndarray) -> tuple[np.ndarray, bool]:
    tensor = np.asarray(tensor)
    if tensor.ndim == 3:
        return tensor[None], True
    if tensor.ndim == 4:
        return tensor, False
    raise ShapeMismatchError(f"expected C x H x W or N x C x H x W, got shape {tensor.shape}")


def _restore(tensor: np.ndarray, squeeze: bool) -> np.ndarray:
    return tensor[0] if squeeze else tensor


def _im2col(batch: np.ndarray, kernel: int) -> np.ndarray:
    """Same-padded K x K patches as an (N*H*W, C*K*K) float64 matrix."""
    pad = kernel // 2
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5), dtype=np.float64)
    return cols.reshape(n * h * w, c * kernel * kernel)


def _check_conv(batch: np.ndarray, weights: np.ndarray) -> int:
    if weights.ndim != 4:
        raise ShapeMismatchError(f"weights must be O x C x K x K, got {weights.shape}")
    out_ch, in_ch, kh, kw = weights.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeMismatchError(f"kernel must be square with odd size, got {kh}x{kw}")
    if batch.shape[1] != in_ch:
        raise ShapeMismatchError(
            f"input has {batch.shape[1]} channels but weights expect {in_ch}"
        )
    return kh


def conv2d(input: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 2-D convolution (cross-correlation).

    Args:
        input: C x H x W or N x C x H x W tensor.
        weights: O x C x K x K kernel with odd K.
        bias: length-O vector.

    Returns:
        O x H x W (or N x O x H x W) tensor in the input's dtype.

    Raises:
        ShapeMismatchError: Channel counts, kernel or bias shapes disagree.
    """
    batch, squeeze = _as_batch(input)
    kernel = _check_conv(batch, weights)
    out_ch = weights.shape[0]
    if np.shape(bias) != (out_ch,):
        raise ShapeMismatchError(f"bias must have shape ({out_ch},), got {np.shape(bias)}")
    n, _, h, w = batch.shape
    cols = _im2col(batch, kernel)
    w_mat = weights.reshape(out_ch, -1).astype(np.float64)
    out = cols @ w_mat.T + np.asarray(bias, dtype=np.float64)
    out = out.reshape(n, h, w, out_ch).transpose(0, 3, 1, 2)
    dtype = np.result_type(batch.dtype, weights.dtype)
    return _restore(np.ascontiguousarray(out, dtype=dtype), squeeze)


def conv2d_grad(input: np.ndarray, weights: np.ndarray, output_grad: np.ndarray) -> LayerGrad:
    """Backward pass of :func:`conv2d` given dL/d(output)."""
    batch, squeeze = _as_batch(input)
    grad, _ = _as_batch(output_grad)
    kernel = _check_conv(batch, weights)
    out_ch = weights.shape[0]
    n, c, h, w = batch.shape
    if grad.shape != (n, out_ch, h, w):
        raise ShapeMismatchError(
            f"output_grad shape {grad.shape} does not match conv output {(n, out_ch, h, w)}"
        )
    dtype = np.result_type(batch.dtype, weights.dtype)

    g_mat = grad.transpose(0, 2, 3, 1).reshape(n * h * w, out_ch).astype(np.float64)
    cols = _im2col(batch, kernel)
    weight_grad = (g_mat.T @ cols).reshape(weights.shape)
    bias_grad = g_mat.sum(axis=0)

    # full correlation of the upstream grad with the flipped kernel
    g_cols = _im2col(grad, kernel)
    flipped = weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1).astype(np.float64)
    input_grad = (g_cols @ flipped.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)

    return LayerGrad(
        input_grad=_restore(np.ascontiguousarray(input_grad, dtype=dtype), squeeze),
        weight_grad=weight_grad.astype(weights.dtype),
        bias_grad=bias_grad.astype(weights.dtype),
    )


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_grad(x: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    """Pass the gradient where the forward input was strictly positive."""
    if x.shape != output_grad.shape:
        raise ShapeMismatchError(f"relu_grad shapes differ: {x.shape} vs {output_grad.shape}")
    return np.where(x > 0, output_grad, 0).astype(output_grad.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


def sigmoid_grad(y: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    """Chain rule through a sigmoid whose forward output was ``y``."""
    return (output_grad * y * (1 - y)).astype(output_grad.dtype, copy=False)


def maxpool2(input: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling.

    Returns:
        Tuple of (pooled, indices). ``indices`` holds the winning position in
        each window in row-major order (0..3); ties go to the lowest index.

    Raises:
        ShapeMismatchError: H or W is odd.
    """
    batch, squeeze = _as_batch(input)
    n, c, h, w = batch.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = batch.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    indices = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, indices[..., None], axis=-1)[..., 0]
    return _restore(pooled, squeeze), _restore(indices, squeeze)


def maxpool2_grad(indices: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    """Route each pooled gradient back to the window element that won."""
    idx, squeeze = _as_batch(indices)
    grad, _ = _as_batch(output_grad)
    if idx.shape != grad.shape:
        raise ShapeMismatchError(f"indices {idx.shape} and grad {grad.shape} differ")
    n, c, h2, w2 = grad.shape
    blocks = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
    full = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return _restore(full.reshape(n, c, 2 * h2, 2 * w2), squeeze)


def upsample2(input: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    return np.repeat(np.repeat(input, 2, axis=-2), 2, axis=-1)


def upsample2_grad(output_grad: np.ndarray) -> np.ndarray:
    """Sum of each 2x2 block."""
    *lead, h, w = output_grad.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"upsample2_grad needs even spatial dims, got {h}x{w}")
    blocks = output_grad.reshape(*lead, h // 2, 2, w // 2, 2)
    # two pairwise reductions keep 4x exact in float32
    return blocks.sum(axis=-1).sum(axis=-2)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != b.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeMismatchError(f"cannot concatenate {a.shape} and {b.shape} on channels")
    return np.concatenate([a, b], axis=-3)


def split_grad(output_grad: np.ndarray, split_point: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`concat_channels` for gradients."""
    if not 0 <= split_point <= output_grad.shape[-3]:
        raise ShapeMismatchError(
            f"split point {split_point} outside 0..{output_grad.shape[-3]}"
        )
    return output_grad[..., :split_point, :, :], output_grad[..., split_point:, :, :]
