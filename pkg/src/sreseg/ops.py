"""Dense numeric primitives with explicit forward and backward passes.

Everything operates on [N, C, H, W] float arrays. Convolutions are
cross-correlations with stride 1 and "same" zero padding of width
floor(k/2), which keeps spatial dims unchanged and preserves D4
commutation on square inputs. Three convolution paths are provided:

* conv2d_ref   -- direct nested-loop reference, the oracle;
* conv2d_fast  -- patch-gather (im2col) plus one matrix multiply;
* sre_conv_band_pooled -- per-band input pooling (additions only)
  followed by a small channel-mixing multiply, cutting multiplies per
  channel pair from k^2 to b.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bands import BandPartition, SREConvParams, expand_kernel

__all__ = [
    "ConvSpec",
    "OpCounter",
    "count_ops",
    "conv2d_ref",
    "conv2d_fast",
    "conv2d_backward",
    "band_pool",
    "band_pool_backward",
    "sre_conv_band_pooled",
    "sre_conv_backward",
    "maxpool2",
    "maxpool2_backward",
    "upsample2_linear",
    "upsample2_linear_backward",
    "relu",
    "relu_backward",
    "softmax_ce_loss",
    "softmax_probs",
    "rot90_t",
    "flip_t",
    "d4_apply",
    "d4_inverse",
    "D4_ELEMENTS",
]


@dataclass(frozen=True)
class ConvSpec:
    """Fixed convolution contract: stride 1, "same" zero padding.

    Output spatial dims always equal input spatial dims; anything else
    would break layer-wise rotation commutation.
    """

    stride: int = 1

    def __post_init__(self):
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")

    @staticmethod
    def padding(k: int) -> int:
        return k // 2


SAME = ConvSpec()


# ---------------------------------------------------------------------------
# operation counting


@dataclass
class OpCounter:
    """Tally of floating multiplies/adds performed by instrumented ops."""

    multiplies: int = 0
    adds: int = 0


_ACTIVE_COUNTERS: list[OpCounter] = []


@contextmanager
def count_ops():
    """Context manager yielding an OpCounter fed by all ops run inside it."""
    counter = OpCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


def _record_ops(multiplies: int, adds: int) -> None:
    for counter in _ACTIVE_COUNTERS:
        counter.multiplies += multiplies
        counter.adds += adds


# ---------------------------------------------------------------------------
# shape checks and padding


def _check_tensor4(x: np.ndarray, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-dimensional [N, C, H, W], got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {x.shape}")
    return x


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, bias, spec: ConvSpec):
    x = _check_tensor4(x)
    w = np.asarray(w)
    if spec.stride != 1:
        raise ValueError("only stride 1 is supported")
    if w.ndim != 4:
        raise ValueError(f"kernel must be [C_out, C_in, k, k], got shape {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel spatial dims must be odd and square, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
    return x, w, bias


def _pad_same(x: np.ndarray, half: int) -> np.ndarray:
    if half == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (half, half), (half, half)))


# ---------------------------------------------------------------------------
# convolution: reference path


def conv2d_ref(x, w, bias=None, spec: ConvSpec = SAME):
    """Direct nested-loop same-padded cross-correlation; the ground-truth oracle.

    Loops over batch, output channel and both output coordinates; the inner
    contraction over (C_in, k, k) is a plain elementwise product-sum.
    """
    x, w, bias = _check_conv_shapes(x, w, bias, spec)
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    half = spec.padding(k)
    xp = _pad_same(x, half)
    y = np.empty((n, c_out, h, wd), dtype=x.dtype)
    for bi in range(n):
        for co in range(c_out):
            for i in range(h):
                for j in range(wd):
                    patch = xp[bi, :, i : i + k, j : j + k]
                    y[bi, co, i, j] = np.sum(patch * w[co])
    if bias is not None:
        y += bias[None, :, None, None]
    _record_ops(
        multiplies=n * c_out * h * wd * c_in * k * k,
        adds=n * c_out * h * wd * (c_in * k * k - 1) + (0 if bias is None else y.size),
    )
    return y


# ---------------------------------------------------------------------------
# convolution: im2col fast path


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Gather same-padded k x k patches into rows: [N*H*W, C_in*k*k]."""
    n, c, h, w = x.shape
    xp = _pad_same(x, k // 2)
    # windows: [N, C, H, W, k, k]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
    return np.ascontiguousarray(cols)


def conv2d_fast(x, w, bias=None, spec: ConvSpec = SAME):
    """Same contract as conv2d_ref, via patch gather and one matrix multiply."""
    x, w, bias = _check_conv_shapes(x, w, bias, spec)
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    cols = _im2col(x, k)
    wmat = w.reshape(c_out, c_in * k * k)
    y = cols @ wmat.T
    y = y.reshape(n, h, wd, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias[None, :, None, None]
    inner = c_in * k * k
    _record_ops(
        multiplies=n * h * wd * c_out * inner,
        adds=n * h * wd * c_out * (inner - 1) + (0 if bias is None else y.size),
    )
    return np.ascontiguousarray(y)


def conv2d_backward(x, w, grad_y, spec: ConvSpec = SAME):
    """Adjoints of the same-padded stride-1 cross-correlation.

    Returns (grad_x, grad_w, grad_bias); grad_bias is the batch/spatial sum
    and is always returned (ignore it for bias-free layers).
    """
    x, w, _ = _check_conv_shapes(x, w, None, spec)
    grad_y = _check_tensor4(grad_y, "grad_y")
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    if grad_y.shape != (n, c_out, h, wd):
        raise ValueError(f"grad_y must have shape {(n, c_out, h, wd)}, got {grad_y.shape}")

    grad_bias = grad_y.sum(axis=(0, 2, 3))

    # grad_w: accumulate input patches against the output gradient.
    cols = _im2col(x, k)
    gmat = grad_y.transpose(0, 2, 3, 1).reshape(n * h * wd, c_out)
    grad_w = (gmat.T @ cols).reshape(c_out, c_in, k, k)

    # grad_x: correlate grad_y with the spatially flipped, channel-swapped kernel.
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv2d_fast(grad_y, np.ascontiguousarray(w_flip), None, spec)
    return grad_x, grad_w, grad_bias


# ---------------------------------------------------------------------------
# convolution: band-pooled symmetric path


def band_pool(x: np.ndarray, part: BandPartition) -> np.ndarray:
    """Sum the same-padded input over each band's offsets: [N, C_in, b, H, W].

    Additions only; the pooled maps are shared by every output channel.
    """
    x = _check_tensor4(x)
    n, c, h, w = x.shape
    half = part.k // 2
    xp = _pad_same(x, half)
    pooled = np.zeros((n, c, part.b, h, w), dtype=x.dtype)
    for j in range(part.b):
        acc = pooled[:, :, j]
        for dy, dx in part.band_offsets(j):
            acc += xp[:, :, half + dy : half + dy + h, half + dx : half + dx + w]
    _record_ops(multiplies=0, adds=n * c * part.k * part.k * h * w)
    return pooled


def band_pool_backward(grad_pooled: np.ndarray, part: BandPartition) -> np.ndarray:
    """Adjoint of band_pool; band offset sets are symmetric so this scatters
    each band gradient back over the same offsets."""
    n, c, b, h, w = grad_pooled.shape
    half = part.k // 2
    gxp = np.zeros((n, c, h + 2 * half, w + 2 * half), dtype=grad_pooled.dtype)
    for j in range(b):
        g = grad_pooled[:, :, j]
        for dy, dx in part.band_offsets(j):
            gxp[:, :, half + dy : half + dy + h, half + dx : half + dx + w] += g
    return gxp[:, :, half : half + h, half : half + w]


def sre_conv_band_pooled(x, params: SREConvParams, part: BandPartition,
                         spec: ConvSpec = SAME, pooled: np.ndarray | None = None):
    """Symmetric convolution via band pooling and a channel-mixing multiply.

    Equals conv2d with the expanded kernel; multiplies are
    C_out*C_in*b*H*W instead of C_out*C_in*k^2*H*W.
    """
    x = _check_tensor4(x)
    if spec.stride != 1:
        raise ValueError("only stride 1 is supported")
    if params.b != part.b:
        raise ValueError(f"theta has {params.b} bands, partition has {part.b}")
    if x.shape[1] != params.c_in:
        raise ValueError(f"input has {x.shape[1]} channels, theta expects {params.c_in}")
    n, c_in, h, w = x.shape
    if pooled is None:
        pooled = band_pool(x, part)
    pmat = pooled.reshape(n, c_in * part.b, h * w)
    tmat = params.theta.reshape(params.c_out, c_in * part.b)
    y = np.matmul(tmat[None], pmat).reshape(n, params.c_out, h, w)
    if params.bias is not None:
        y += params.bias[None, :, None, None]
    inner = c_in * part.b
    _record_ops(
        multiplies=n * params.c_out * inner * h * w,
        adds=n * params.c_out * (inner - 1) * h * w
        + (0 if params.bias is None else y.size),
    )
    return y


def sre_conv_backward(x, params: SREConvParams, part: BandPartition, grad_y,
                      pooled: np.ndarray | None = None):
    """Adjoints of sre_conv_band_pooled.

    Returns (grad_x, grad_theta, grad_bias). Passing the forward pass's
    pooled tensor avoids recomputing it.
    """
    x = _check_tensor4(x)
    grad_y = _check_tensor4(grad_y, "grad_y")
    n, c_in, h, w = x.shape
    if grad_y.shape != (n, params.c_out, h, w):
        raise ValueError(
            f"grad_y must have shape {(n, params.c_out, h, w)}, got {grad_y.shape}"
        )
    if pooled is None:
        pooled = band_pool(x, part)

    gmat = grad_y.reshape(n, params.c_out, h * w)
    pmat = pooled.reshape(n, c_in * part.b, h * w)
    # grad_theta[o, f] = sum_n grad_y[n, o] . pooled[n, f]
    grad_theta = np.einsum("nop,nfp->of", gmat, pmat).reshape(params.theta.shape)
    grad_theta = grad_theta.astype(params.theta.dtype, copy=False)
    grad_bias = grad_y.sum(axis=(0, 2, 3))

    tmat = params.theta.reshape(params.c_out, c_in * part.b)
    grad_pooled = np.matmul(tmat.T[None], gmat).reshape(n, c_in, part.b, h, w)
    grad_x = band_pool_backward(grad_pooled, part)
    return grad_x, grad_theta, grad_bias


# ---------------------------------------------------------------------------
# pooling and upsampling


def maxpool2(x):
    """2x2 max pooling with stride 2.

    Returns (pooled, argmax_record); ties break to the first position in
    row-major window order. Raises on odd spatial dims.
    """
    x = _check_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(idx: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Route each window's gradient to its recorded argmax position."""
    grad_y = _check_tensor4(grad_y, "grad_y")
    n, c, h2, w2 = grad_y.shape
    if idx.shape != grad_y.shape:
        raise ValueError(f"argmax record shape {idx.shape} != grad shape {grad_y.shape}")
    scattered = np.zeros((n, c, h2, w2, 4), dtype=grad_y.dtype)
    np.put_along_axis(scattered, idx[..., None], grad_y[..., None], axis=-1)
    grad_x = scattered.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(grad_x.reshape(n, c, h2 * 2, w2 * 2))


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """1-D factor-2 linear interpolation matrix [2n, n].

    Output samples sit on a half-pixel-centered grid symmetric about the
    image center, so the operator commutes exactly with flips; edges
    replicate. Weights are dyadic (0.25/0.75), hence exactly representable.
    """
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    lo = np.floor(src).astype(np.int64)
    t = src - lo
    u = np.zeros((2 * n, n), dtype=dtype)
    rows = np.arange(2 * n)
    np.add.at(u, (rows, np.clip(lo, 0, n - 1)), (1.0 - t).astype(dtype))
    np.add.at(u, (rows, np.clip(lo + 1, 0, n - 1)), t.astype(dtype))
    return u


def upsample2_linear(x):
    """Double both spatial dims by symmetric linear interpolation.

    The half-pixel-centered sampling grid makes the operation commute with
    quarter-turn rotations and flips on square inputs.
    """
    x = _check_tensor4(x)
    n, c, h, w = x.shape
    uw = _upsample_matrix(w, x.dtype)
    uh = _upsample_matrix(h, x.dtype)
    y = x @ uw.T                                   # [N, C, H, 2W]
    y = (y.transpose(0, 1, 3, 2) @ uh.T).transpose(0, 1, 3, 2)
    _record_ops(multiplies=n * c * (h * 2 * w + 2 * h * 2 * w) * 2,
                adds=n * c * (h * 2 * w + 2 * h * 2 * w))
    return np.ascontiguousarray(y)


def upsample2_linear_backward(grad_y):
    """Exact transpose of upsample2_linear."""
    grad_y = _check_tensor4(grad_y, "grad_y")
    n, c, h2, w2 = grad_y.shape
    if h2 % 2 or w2 % 2:
        raise ValueError(f"upsampled grad must have even dims, got {h2}x{w2}")
    uw = _upsample_matrix(w2 // 2, grad_y.dtype)
    uh = _upsample_matrix(h2 // 2, grad_y.dtype)
    g = grad_y @ uw                                # [N, C, 2H, W]
    g = (g.transpose(0, 1, 3, 2) @ uh).transpose(0, 1, 3, 2)
    return np.ascontiguousarray(g)


# ---------------------------------------------------------------------------
# activation and loss


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_y):
    return grad_y * (x > 0)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Channel-wise softmax of [N, C, H, W] logits, max-stabilized."""
    logits = _check_tensor4(logits, "logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce_loss(logits, labels):
    """Pixel-wise 2-class softmax cross-entropy averaged over all pixels.

    logits: [N, 2, H, W]; labels: [N, H, W] with values in {0, 1}.
    Returns (scalar loss, grad wrt logits).
    """
    logits = _check_tensor4(logits, "logits")
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if c != 2:
        raise ValueError(f"expected 2 logit channels, got {c}")
    if labels.shape != (n, h, w):
        raise ValueError(f"labels must have shape {(n, h, w)}, got {labels.shape}")
    uniq = np.unique(labels)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"labels must be binary, found values {uniq[:8]}")
    labels = labels.astype(np.int64)

    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    count = n * h * w
    loss = -picked.sum() / count

    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    grad = (probs - onehot) / count
    return float(loss), grad.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# lossless spatial permutations (D4 group)


def rot90_t(x, quarter_turns: int = 1):
    """Rotate the spatial axes of an [..., H, W] array by 90-degree steps."""
    x = np.asarray(x)
    return np.ascontiguousarray(np.rot90(x, int(quarter_turns) % 4, axes=(-2, -1)))


def flip_t(x, axis: int = -1):
    """Flip one spatial axis (-1 = columns, -2 = rows) of an [..., H, W] array."""
    if axis not in (-2, -1):
        raise ValueError(f"axis must be -2 or -1, got {axis}")
    return np.ascontiguousarray(np.flip(np.asarray(x), axis=axis))


# Elements 0..3 are quarter-turn rotations; 4..7 first mirror columns, then
# rotate. Together these are the 8 symmetries of the square.
D4_ELEMENTS = tuple(range(8))


def d4_apply(x, g: int):
    """Apply D4 element g (0..7) to the last two axes of an array."""
    if g not in D4_ELEMENTS:
        raise ValueError(f"D4 element must be in 0..7, got {g}")
    x = np.asarray(x)
    if g >= 4:
        x = np.flip(x, axis=-1)
    return np.ascontiguousarray(np.rot90(x, g % 4, axes=(-2, -1)))


def d4_inverse(g: int) -> int:
    """Inverse group element: rotations invert, mirrored elements are involutions."""
    if g not in D4_ELEMENTS:
        raise ValueError(f"D4 element must be in 0..7, got {g}")
    return (4 - g) % 4 if g < 4 else g
