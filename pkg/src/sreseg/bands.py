"""Symmetric band parameterization of square convolution kernels.

A k x k kernel is split into b = floor(k/2) + 2 concentric bands; all
positions in a band share one trainable coefficient, which makes the
expanded kernel invariant under the 8 symmetries of the square (D4) and
cuts the per-channel-pair parameter count from k^2 to b.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BandPartition",
    "SREConvParams",
    "band_count",
    "build_band_partition",
    "expand_kernel",
    "expansion_backward",
]


def band_count(k: int) -> int:
    """Number of bands for an odd kernel size k: floor(k/2) + 2."""
    return k // 2 + 2


@dataclass(frozen=True)
class BandPartition:
    """Immutable D4-invariant partition of k x k kernel positions into bands.

    Attributes:
        k: odd kernel size.
        b: band count, always floor(k/2) + 2.
        band_of: [k, k] int array; band index of each kernel position.
        band_sizes: number of positions in each band.
    """

    k: int
    b: int
    band_of: np.ndarray
    band_sizes: tuple[int, ...]
    _offsets: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False, default=())

    def band_offsets(self, j: int) -> tuple[tuple[int, int], ...]:
        """Offsets (dy, dx) relative to the kernel center belonging to band j."""
        return self._offsets[j]

    def index_matrix(self, dtype=np.float64) -> np.ndarray:
        """Binary [b, k^2] matrix: row j marks flattened positions of band j.

        Materialized on demand; each column has exactly one 1.
        """
        flat = self.band_of.reshape(-1)
        eye = np.zeros((self.b, self.k * self.k), dtype=dtype)
        eye[flat, np.arange(flat.size)] = 1
        return eye


def _band_index(dy: int, dx: int, half: int) -> int:
    # Rounded Euclidean distance from center; positions beyond radius
    # floor(k/2) fall into the outer corner band. Halves round away from zero.
    r = math.hypot(dy, dx)
    if r <= half:
        return math.floor(r + 0.5)
    return half + 1


@functools.lru_cache(maxsize=None)
def build_band_partition(k: int) -> BandPartition:
    """Build the band partition for an odd kernel size k >= 3.

    Raises:
        ValueError: if k is even or smaller than 3.
    """
    if not isinstance(k, (int, np.integer)):
        raise ValueError(f"kernel size must be an integer, got {k!r}")
    k = int(k)
    if k < 3 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {k}")

    half = k // 2
    b = band_count(k)
    band_of = np.empty((k, k), dtype=np.int64)
    offsets: list[list[tuple[int, int]]] = [[] for _ in range(b)]
    for i in range(k):
        for j in range(k):
            dy, dx = i - half, j - half
            idx = _band_index(dy, dx, half)
            band_of[i, j] = idx
            offsets[idx].append((dy, dx))

    band_of.flags.writeable = False
    sizes = tuple(len(o) for o in offsets)
    part = BandPartition(
        k=k,
        b=b,
        band_of=band_of,
        band_sizes=sizes,
        _offsets=tuple(tuple(o) for o in offsets),
    )
    assert all(s >= 1 for s in sizes), "every band must be non-empty"
    return part


@dataclass
class SREConvParams:
    """Trainable coefficients of one symmetric convolution.

    theta has shape [C_out, C_in, b]; bias, when present, has length C_out.
    """

    theta: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta)
        if self.theta.ndim != 3:
            raise ValueError(f"theta must be [C_out, C_in, b], got shape {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite values")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.theta.shape[0],):
                raise ValueError(
                    f"bias must have length C_out={self.theta.shape[0]}, got shape {self.bias.shape}"
                )
            if not np.all(np.isfinite(self.bias)):
                raise ValueError("bias contains non-finite values")

    @property
    def c_out(self) -> int:
        return self.theta.shape[0]

    @property
    def c_in(self) -> int:
        return self.theta.shape[1]

    @property
    def b(self) -> int:
        return self.theta.shape[2]


def expand_kernel(params: SREConvParams, part: BandPartition) -> np.ndarray:
    """Expand band coefficients into a dense [C_out, C_in, k, k] kernel.

    Position p of the result carries theta[..., band_of(p)], which equals the
    reshaped matrix product of theta with the binary index matrix. The output
    is exactly invariant under all 8 D4 transforms of its spatial axes.
    """
    if params.b != part.b:
        raise ValueError(
            f"theta has {params.b} bands but partition of k={part.k} has {part.b}"
        )
    return params.theta[:, :, part.band_of]


def expansion_backward(grad_kernel: np.ndarray, part: BandPartition) -> np.ndarray:
    """Adjoint of expand_kernel: per-band sums of a dense kernel gradient.

    grad_kernel is [C_out, C_in, k, k]; returns [C_out, C_in, b].
    """
    grad_kernel = np.asarray(grad_kernel)
    if grad_kernel.ndim != 4 or grad_kernel.shape[-2:] != (part.k, part.k):
        raise ValueError(
            f"grad_kernel must be [C_out, C_in, {part.k}, {part.k}], got {grad_kernel.shape}"
        )
    c_out, c_in = grad_kernel.shape[:2]
    grad_theta = np.zeros((c_out, c_in, part.b), dtype=grad_kernel.dtype)
    flat = grad_kernel.reshape(c_out, c_in, -1)
    np.add.at(grad_theta, (slice(None), slice(None), part.band_of.reshape(-1)), flat)
    return grad_theta
