"""Dense feature-map types and the host-side layer kernels.

Everything here is a pure function of its inputs. Arrays are float32 and
C-contiguous; a :class:`Tensor3` is stored channel-major then row-major, a
:class:`Matrix` row-major.

Besides the kernels the runtime executes on the host (pooling, activation,
fully connected, normalization, softmax, im2col) this module carries the
direct-convolution and naive matrix-product oracles the tiled path is
checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "ACTIVATIONS",
    "ConvParams",
    "Matrix",
    "Tensor3",
    "activate",
    "conv_im2col",
    "conv_output_shape",
    "conv_reference",
    "fully_connected",
    "im2col",
    "matmul_reference",
    "maxpool",
    "normalize",
    "softmax",
]

DTYPE = np.float32

LEAKY_SLOPE = 0.1
ACTIVATIONS = ("linear", "relu", "leaky", "logistic")


@dataclass(frozen=True, eq=False)
class Tensor3:
    """A C x H x W feature map."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=DTYPE)
        if arr.ndim != 3:
            raise ConfigError(f"Tensor3 needs a 3-D array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ConfigError(f"Tensor3 dimensions must be >= 1, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, channels, height, width, values):
        flat = np.asarray(values, dtype=DTYPE).ravel()
        if flat.size != channels * height * width:
            raise ConfigError(
                f"{flat.size} values do not fill a {channels}x{height}x{width} tensor"
            )
        return cls(flat.reshape(channels, height, width))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def flatten(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __eq__(self, other):
        return isinstance(other, Tensor3) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Tensor3({self.channels}x{self.height}x{self.width})"


@dataclass(frozen=True, eq=False)
class Matrix:
    """A rows x cols row-major matrix.

    The backing array is shared, not copied, when it already has the right
    dtype and layout; jobs rely on this to write output tiles in place.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = self.data
        if not (isinstance(arr, np.ndarray) and arr.dtype == DTYPE and arr.flags.c_contiguous):
            arr = np.ascontiguousarray(arr, dtype=DTYPE)
        if arr.ndim != 2:
            raise ConfigError(f"Matrix needs a 2-D array, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, rows, cols):
        return cls(np.zeros((rows, cols), dtype=DTYPE))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        return isinstance(other, Matrix) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols})"


@dataclass(frozen=True)
class ConvParams:
    filters: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.filters < 1:
            raise ConfigError(f"conv filters must be >= 1, got {self.filters}")
        if self.kernel < 1:
            raise ConfigError(f"conv kernel must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ConfigError(f"conv pad must be >= 0, got {self.pad}")


def conv_output_shape(height, width, p: ConvParams):
    """Spatial output size of a convolution; trailing rows that do not fill
    a whole stride are dropped, as in Darknet."""
    out_h = (height + 2 * p.pad - p.kernel) // p.stride + 1
    out_w = (width + 2 * p.pad - p.kernel) // p.stride + 1
    if height + 2 * p.pad < p.kernel or width + 2 * p.pad < p.kernel:
        raise ConfigError(
            f"kernel {p.kernel} with pad {p.pad} does not fit a {height}x{width} input"
        )
    return out_h, out_w


def im2col(inp: Tensor3, p: ConvParams) -> Matrix:
    """Lower a convolution input to a (C*k*k) x (H_out*W_out) matrix.

    Row ``(c*k + ky)*k + kx`` and column ``oy*W_out + ox`` hold
    ``inp[c, oy*s - pad + ky, ox*s - pad + kx]``, zero outside the input.
    """
    out_h, out_w = conv_output_shape(inp.height, inp.width, p)
    k, s = p.kernel, p.stride
    padded = np.pad(inp.data, ((0, 0), (p.pad, p.pad), (p.pad, p.pad)))
    cols = np.empty((inp.channels, k, k, out_h, out_w), dtype=DTYPE)
    for ky in range(k):
        y_end = ky + s * (out_h - 1) + 1
        for kx in range(k):
            x_end = kx + s * (out_w - 1) + 1
            cols[:, ky, kx] = padded[:, ky:y_end:s, kx:x_end:s]
    return Matrix(cols.reshape(inp.channels * k * k, out_h * out_w))


def _check_conv_weights(inp: Tensor3, weights: Matrix, bias, p: ConvParams):
    expect = (p.filters, inp.channels * p.kernel * p.kernel)
    if weights.shape != expect:
        raise ConfigError(f"conv weights are {weights.shape}, expected {expect}")
    bias = np.asarray(bias, dtype=DTYPE).ravel()
    if bias.size != p.filters:
        raise ConfigError(f"conv bias has {bias.size} values, expected {p.filters}")
    return bias


def conv_reference(inp: Tensor3, weights: Matrix, bias, p: ConvParams) -> Tensor3:
    """Sliding-window convolution, one output element at a time.

    Test oracle only: it indexes the input directly and accumulates in
    float64, sharing no code with the im2col path.
    """
    bias = _check_conv_weights(inp, weights, bias, p)
    out_h, out_w = conv_output_shape(inp.height, inp.width, p)
    k, s = p.kernel, p.stride
    kernels = weights.data.astype(np.float64).reshape(p.filters, inp.channels, k, k)
    src = inp.data.astype(np.float64)
    out = np.empty((p.filters, out_h, out_w), dtype=np.float64)
    for f in range(p.filters):
        for oy in range(out_h):
            for ox in range(out_w):
                acc = float(bias[f])
                for c in range(inp.channels):
                    for ky in range(k):
                        y = oy * s - p.pad + ky
                        if not 0 <= y < inp.height:
                            continue
                        for kx in range(k):
                            x = ox * s - p.pad + kx
                            if 0 <= x < inp.width:
                                acc += src[c, y, x] * kernels[f, c, ky, kx]
                out[f, oy, ox] = acc
    return Tensor3(out)


def conv_im2col(inp: Tensor3, weights: Matrix, bias, p: ConvParams, matmul=None) -> Tensor3:
    """Convolution as ``weights @ im2col(inp) + bias`` on the host.

    ``matmul`` defaults to numpy's BLAS product; pass
    :func:`matmul_reference` for the naive order. Row ``f`` of the product
    becomes output channel ``f``.
    """
    bias = _check_conv_weights(inp, weights, bias, p)
    out_h, out_w = conv_output_shape(inp.height, inp.width, p)
    cols = im2col(inp, p)
    if matmul is None:
        prod = weights.data @ cols.data
    else:
        prod = matmul(weights, cols).data
    prod = prod + bias[:, None]
    return Tensor3(prod.reshape(p.filters, out_h, out_w))


def matmul_reference(a: Matrix, b: Matrix) -> Matrix:
    """Naive product: every ``C[i, j]`` is accumulated in float32 over ``k``
    in ascending order, exactly as the i/j/k triple loop would.

    The i and j loops are vectorized; the reduction loop is not.
    """
    if a.cols != b.rows:
        raise ConfigError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.rows, b.cols), dtype=DTYPE)
    for kk in range(a.cols):
        out += np.multiply.outer(a.data[:, kk], b.data[kk, :])
    return Matrix(out)


def maxpool(inp: Tensor3, size: int, stride: int) -> Tensor3:
    if size < 1 or stride < 1:
        raise ConfigError(f"maxpool size and stride must be >= 1, got {size}/{stride}")
    if size > inp.height or size > inp.width:
        raise ConfigError(f"maxpool window {size} is larger than the {inp.height}x{inp.width} input")
    out_h = (inp.height - size) // stride + 1
    out_w = (inp.width - size) // stride + 1
    out = None
    for dy in range(size):
        for dx in range(size):
            view = inp.data[:, dy:dy + stride * (out_h - 1) + 1:stride,
                            dx:dx + stride * (out_w - 1) + 1:stride]
            out = view.copy() if out is None else np.maximum(out, view)
    return Tensor3(out)


def activate(x, kind: str):
    """Elementwise activation. Accepts a Tensor3 or a 1-D array and returns
    the same kind of object."""
    if isinstance(x, Tensor3):
        return Tensor3(activate(x.data, kind))
    arr = np.asarray(x, dtype=DTYPE)
    if kind == "linear":
        return arr.copy()
    if kind == "relu":
        return np.maximum(arr, DTYPE(0))
    if kind == "leaky":
        return np.where(arr > 0, arr, arr * DTYPE(LEAKY_SLOPE)).astype(DTYPE)
    if kind == "logistic":
        return (1.0 / (1.0 + np.exp(-arr.astype(np.float64)))).astype(DTYPE)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {', '.join(ACTIVATIONS)}")


def fully_connected(inp, weights: Matrix, bias) -> np.ndarray:
    """``W @ x + b`` with a fixed per-row reduction order (no BLAS), so the
    result does not depend on threading."""
    x = np.asarray(inp, dtype=DTYPE).ravel()
    bias = np.asarray(bias, dtype=DTYPE).ravel()
    if weights.cols != x.size:
        raise ConfigError(f"fully connected weights take {weights.cols} inputs, got {x.size}")
    if bias.size != weights.rows:
        raise ConfigError(f"fully connected bias has {bias.size} values, expected {weights.rows}")
    return (weights.data * x).sum(axis=1, dtype=DTYPE) + bias


def normalize(raw) -> Tensor3:
    """Scale 8-bit pixel values to [0, 1]."""
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor3(arr.astype(np.float64) / 255.0)


def softmax(scores) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64).ravel()
    if z.size == 0:
        raise ConfigError("softmax of an empty vector")
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(DTYPE)
