"""Rank-4 tensor kernels with hand-written vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``. The
production dtype is float32; float64 inputs are accepted throughout and are
what the gradient checks use.

Every kernel computes each output element in exactly one task, summing its
terms in a fixed order. Work is split into fixed-size channel blocks, so the
worker count changes scheduling only and results are bit-identical for any
``num_threads`` setting.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32
LEAKY_SLOPE = 0.2

# channels per task; fixed so the partition never depends on the worker count
_BLOCK = 16

_lock = threading.Lock()
_executors: dict[int, ThreadPoolExecutor] = {}
_num_threads = max(1, int(os.environ.get("HRAN_THREADS", "1") or 1))


def num_threads() -> int:
    return _num_threads


def set_num_threads(n: int) -> None:
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be positive, got {n}")
    _num_threads = int(n)


@contextmanager
def threads(n: int):
    """Temporarily run kernels on ``n`` workers."""
    old = _num_threads
    set_num_threads(n)
    try:
        yield
    finally:
        set_num_threads(old)


def _executor(n: int) -> ThreadPoolExecutor:
    with _lock:
        if n not in _executors:
            _executors[n] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="hran")
        return _executors[n]


def _for_blocks(total: int, fn) -> None:
    blocks = [(lo, min(lo + _BLOCK, total)) for lo in range(0, total, _BLOCK)]
    n = _num_threads
    if n == 1 or len(blocks) == 1:
        for lo, hi in blocks:
            fn(lo, hi)
        return
    futures = [_executor(n).submit(fn, lo, hi) for lo, hi in blocks]
    for f in futures:
        f.result()


def check4(x: np.ndarray, name: str = "tensor") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ShapeError(f"{name}: expected a rank-4 (n, c, h, w) array, got shape {shape}")


def zeros(n: int, c: int, h: int, w: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros((n, c, h, w), dtype=dtype)


@dataclass(frozen=True)
class ConvSpec:
    """Shape metadata of a stride-1, same-padded convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    dilation: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"channel counts must be positive: {self}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd for same padding, got {self.kernel}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be positive, got {self.dilation}")

    @property
    def padding(self) -> tuple[int, int]:
        kh, kw = self.kernel
        return self.dilation * (kh - 1) // 2, self.dilation * (kw - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    @property
    def num_params(self) -> int:
        kh, kw = self.kernel
        return self.out_channels * self.in_channels * kh * kw + self.out_channels


def _conv_checks(x, weight, bias, dilation):
    check4(x, "conv2d input")
    check4(weight, "conv2d weight")
    o, i, kh, kw = weight.shape
    spec = ConvSpec(i, o, (kh, kw), dilation)
    if x.shape[1] != i:
        raise ShapeError(
            f"conv2d: channel axis mismatch, input has {x.shape[1]} channels "
            f"but weight expects {i}"
        )
    if bias is not None and np.shape(bias) != (o,):
        raise ShapeError(f"conv2d: bias shape {np.shape(bias)} does not match out_channels {o}")
    return spec


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, dilation: int = 1) -> np.ndarray:
    """Same-padded, stride-1 dilated convolution (cross-correlation).

    ``out[n, o, y, x] = bias[o] + sum_{i, ky, kx} w[o, i, ky, kx] *
    xpad[n, i, y + d*ky, x + d*kx]`` accumulated in (i, ky, kx) order.
    """
    spec = _conv_checks(x, weight, bias, dilation)
    n, c, h, w = x.shape
    o = spec.out_channels
    kh, kw = spec.kernel
    ph, pw = spec.padding
    d = dilation
    dtype = np.result_type(x, weight)
    xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wt = weight.astype(dtype, copy=False)
    b = np.zeros(o, dtype) if bias is None else np.asarray(bias, dtype)
    out = np.empty((n, o, h, w), dtype)

    def block(lo, hi):
        acc = np.empty((n, hi - lo, h, w), dtype)
        acc[...] = b[lo:hi].reshape(1, -1, 1, 1)
        for ci in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    tap = xp[:, ci : ci + 1, ky * d : ky * d + h, kx * d : kx * d + w]
                    acc += wt[lo:hi, ci, ky, kx].reshape(1, -1, 1, 1) * tap
        out[:, lo:hi] = acc

    _for_blocks(o, block)
    return out


def conv2d_vjp(x: np.ndarray, weight: np.ndarray, upstream: np.ndarray, dilation: int = 1):
    """Gradients of ``sum(upstream * conv2d(x, weight, bias))``.

    Returns ``(grad_input, grad_weight, grad_bias)``.
    """
    spec = _conv_checks(x, weight, None, dilation)
    check4(upstream, "conv2d upstream")
    n, c, h, w = x.shape
    o = spec.out_channels
    if upstream.shape != (n, o, h, w):
        raise ShapeError(f"conv2d_vjp: upstream shape {upstream.shape} != output shape {(n, o, h, w)}")
    kh, kw = spec.kernel
    ph, pw = spec.padding
    d = dilation
    dtype = np.result_type(x, weight, upstream)
    xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wt = weight.astype(dtype, copy=False)
    g = upstream.astype(dtype, copy=False)

    grad_bias = g.sum(axis=(0, 2, 3))

    grad_weight = np.empty(spec.weight_shape, dtype)

    def weight_block(lo, hi):
        for oc in range(lo, hi):
            go = g[:, oc : oc + 1]
            for ky in range(kh):
                for kx in range(kw):
                    tap = xp[:, :, ky * d : ky * d + h, kx * d : kx * d + w]
                    grad_weight[oc, :, ky, kx] = (go * tap).sum(axis=(0, 2, 3))

    _for_blocks(o, weight_block)

    gxp = np.zeros(xp.shape, dtype)

    def input_block(lo, hi):
        region = gxp[:, lo:hi]
        for oc in range(o):
            go = g[:, oc : oc + 1]
            for ky in range(kh):
                for kx in range(kw):
                    region[:, :, ky * d : ky * d + h, kx * d : kx * d + w] += (
                        wt[oc, lo:hi, ky, kx].reshape(1, -1, 1, 1) * go
                    )

    _for_blocks(c, input_block)
    grad_input = np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + w])
    return grad_input, grad_weight, grad_bias


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_vjp(x: np.ndarray, upstream: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, upstream, upstream * upstream.dtype.type(slope))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # e = exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    one = x.dtype.type(1)
    return np.where(x >= 0, one / (one + e), e / (one + e))


def sigmoid_vjp(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """VJP given the forward *output* ``y = sigmoid(x)``."""
    return upstream * y * (y.dtype.type(1) - y)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    check4(x, "global_avg_pool input")
    if x.shape[2] * x.shape[3] == 0:
        raise ShapeError("global_avg_pool: empty spatial extent")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_vjp(shape: tuple, upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = shape
    if upstream.shape != (n, c, 1, 1):
        raise ShapeError(f"global_avg_pool_vjp: upstream shape {upstream.shape} != {(n, c, 1, 1)}")
    return np.broadcast_to(upstream / upstream.dtype.type(h * w), shape).copy()


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """``out[n, o, y*r + dy, x*r + dx] = in[n, o*r*r + dy*r + dx, y, x]``."""
    check4(x, "pixel_shuffle input")
    if r < 1:
        raise ShapeError(f"pixel_shuffle: factor must be positive, got {r}")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: channel axis {c} not divisible by r^2 = {r * r}")
    oc = c // (r * r)
    y = x.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y).reshape(n, oc, h * r, w * r)


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    check4(x, "pixel_unshuffle input")
    n, c, H, W = x.shape
    if r < 1 or H % r or W % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {(H, W)} not divisible by {r}")
    h, w = H // r, W // r
    y = x.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y).reshape(n, c * r * r, h, w)


pixel_shuffle_vjp = pixel_unshuffle


def concat_channels(xs) -> np.ndarray:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: no inputs")
    for t in xs:
        check4(t, "concat_channels input")
    n, _, h, w = xs[0].shape
    for k, t in enumerate(xs):
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: input {k} has shape {t.shape}, expected batch/spatial {(n, h, w)}"
            )
    return np.concatenate(xs, axis=1)


def concat_channels_vjp(channel_counts, upstream: np.ndarray) -> list[np.ndarray]:
    edges = np.cumsum(channel_counts)[:-1]
    if sum(channel_counts) != upstream.shape[1]:
        raise ShapeError(f"concat_channels_vjp: counts {channel_counts} do not sum to {upstream.shape[1]}")
    return [np.ascontiguousarray(p) for p in np.split(upstream, edges, axis=1)]


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    return x + y


def mul_broadcast(x: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """Scale each channel of ``x`` by the matching entry of an ``(n, c, 1, 1)`` gate."""
    check4(x, "mul_broadcast input")
    check4(gate, "mul_broadcast gate")
    n, c = x.shape[:2]
    if gate.shape != (n, c, 1, 1):
        raise ShapeError(f"mul_broadcast: gate shape {gate.shape} != {(n, c, 1, 1)}")
    return x * gate


def mul_broadcast_vjp(x: np.ndarray, gate: np.ndarray, upstream: np.ndarray):
    """Returns ``(grad_x, grad_gate)``."""
    return upstream * gate, (upstream * x).sum(axis=(2, 3), keepdims=True)
