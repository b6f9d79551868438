"""Differentiable layer primitives with hand-written backward passes.

Every op is a pair ``op(...) -> (y, cache)`` / ``op_backward(grad_y, cache)``.
Activations, parameters and gradients are plain numpy arrays (NCHW for
images, ND for dense features); ops preserve the input dtype so the same code
runs in float64 for gradient checks and float32 for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""


class StaleCacheError(RuntimeError):
    """Raised when a cache is missing or has already been consumed."""


class NonDeterministicOpError(RuntimeError):
    pass


class LayerCache:
    """Forward-pass record for one layer; consumable by exactly one backward."""

    __slots__ = ("op", "_data", "_consumed")

    def __init__(self, op: str, **data: Any):
        self.op = op
        self._data = data
        self._consumed = False

    def take(self, op: str) -> dict:
        if self._consumed:
            raise StaleCacheError(f"{op} cache already consumed by a backward call")
        if op != self.op:
            raise StaleCacheError(f"cache from {self.op!r} passed to {op!r} backward")
        self._consumed = True
        data, self._data = self._data, {}
        return data

    @property
    def consumed(self) -> bool:
        return self._consumed


@dataclass
class ActivationConfig:
    leaky_slope: float = 0.01
    dropout_p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.9
    epsilon: float = 1e-5
    num_updates: int = 0

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, momentum: float = 0.9,
              epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"BatchNormState.{name} has shape {getattr(self, name).shape}, expected {c}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
                              self.running_var.copy(), self.momentum, self.epsilon, self.num_updates)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got ndim={x.ndim}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be [Cout,Cin,3,3], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d input channels (dim 1) = {x.shape[1]} but kernel expects Cin = {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias length {b.shape} does not match Cout = {w.shape[0]}")


def _flat_padded(x: Tensor) -> tuple[Tensor, int, int]:
    """NHWC copy of ``x`` zero-padded by one pixel, flattened to rows.

    Row ``r`` holds one padded pixel; the kernel tap (di, dj) of the output
    anchored at row ``r`` reads row ``r + di*Wp + dj``, so each tap of a block
    of rows is a contiguous slice. Outputs anchored on padding rows are
    computed and discarded.
    """
    n, c, h, w = x.shape
    hp, wp = h + 2, w + 2
    slack = 2 * wp + 2
    buf = np.zeros((n * hp * wp + slack, c), dtype=x.dtype)
    view = buf[:n * hp * wp].reshape(n, hp, wp, c)
    view[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    return buf, hp, wp


def _chunk_rows(cin: int, itemsize: int) -> int:
    # keep each im2col block around 2 MB so it stays cache resident
    return max(64, (2 << 20) // (9 * cin * itemsize))


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int = 1) -> tuple[Tensor, LayerCache]:
    """3x3 cross-correlation with zero padding, stride 1.

    y[n,o,i,j] = b[o] + sum_{c,di,dj} x[n,c,i+di-pad,j+dj-pad] * w[o,c,di,dj]
    """
    _check_conv_shapes(x, w, b)
    if pad != 1:
        raise ValueError("only same-padding (pad=1) is supported")
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    dtype = np.result_type(x, w)
    xb, hp, wp = _flat_padded(x.astype(dtype, copy=False))
    rows = n * hp * wp
    offs = [di * wp + dj for di in range(3) for dj in range(3)]
    wmat = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(9 * cin, cout), dtype=dtype)
    out = np.empty((rows, cout), dtype=dtype)
    step = _chunk_rows(cin, dtype.itemsize)
    cols = np.empty((min(step, rows), 9 * cin), dtype=dtype)
    for s in range(0, rows, step):
        e = min(rows, s + step)
        blk = cols[:e - s]
        for k, off in enumerate(offs):
            blk[:, k * cin:(k + 1) * cin] = xb[s + off:e + off]
        np.matmul(blk, wmat, out=out[s:e])
    out += b
    y = out.reshape(n, hp, wp, cout)[:, :h, :wd].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), LayerCache("conv2d", xb=xb, w=w, wmat=wmat, shape=x.shape)


def conv2d_backward(grad_y: Tensor, cache: LayerCache) -> tuple[Tensor, Tensor, Tensor]:
    c = cache.take("conv2d")
    xb, w, wmat, (n, cin, h, wd) = c["xb"], c["w"], c["wmat"], c["shape"]
    cout = w.shape[0]
    if grad_y.shape != (n, cout, h, wd):
        raise ShapeError(f"conv2d grad_y shape {grad_y.shape} != output shape {(n, cout, h, wd)}")
    hp, wp = h + 2, wd + 2
    rows = n * hp * wp
    offs = [di * wp + dj for di in range(3) for dj in range(3)]
    dtype = xb.dtype
    gy = np.zeros((rows, cout), dtype=dtype)
    gy.reshape(n, hp, wp, cout)[:, :h, :wd] = grad_y.transpose(0, 2, 3, 1)
    wt = np.ascontiguousarray(wmat.T)
    gxb = np.zeros_like(xb)
    gw = np.zeros((9 * cin, cout), dtype=dtype)
    step = _chunk_rows(cin, dtype.itemsize)
    cols = np.empty((min(step, rows), 9 * cin), dtype=dtype)
    gcols = np.empty_like(cols)
    for s in range(0, rows, step):
        e = min(rows, s + step)
        blk, gblk, g = cols[:e - s], gcols[:e - s], gy[s:e]
        for k, off in enumerate(offs):
            blk[:, k * cin:(k + 1) * cin] = xb[s + off:e + off]
        gw += blk.T @ g
        np.matmul(g, wt, out=gblk)
        for k, off in enumerate(offs):
            gxb[s + off:e + off] += gblk[:, k * cin:(k + 1) * cin]
    grad_x = gxb[:rows].reshape(n, hp, wp, cin)[:, 1:-1, 1:-1].transpose(0, 3, 1, 2)
    grad_w = gw.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    grad_b = grad_y.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_w), grad_b


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def _bn_axes(x: Tensor) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects [N,C,H,W] or [N,C], got ndim={x.ndim}")


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> tuple[Tensor, LayerCache | None]:
    """Per-channel batch normalization.

    In ``train`` mode uses batch statistics and updates ``state``'s running
    averages in place. ``infer`` mode reads the running averages only.
    """
    axes, bshape = _bn_axes(x)
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm channel dim 1 = {x.shape[1]}, state has {state.channels}")
    gamma = state.gamma.reshape(bshape)
    beta = state.beta.reshape(bshape)
    if mode == "infer":
        if state.num_updates == 0:
            raise RuntimeError("batchnorm infer mode requested but running statistics were never updated")
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        scale = (state.gamma * inv).reshape(bshape)
        shift = (state.beta - state.running_mean * state.gamma * inv).reshape(bshape)
        return (x * scale + shift).astype(x.dtype, copy=False), None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    m = x.size // x.shape[1]
    if m < 2:
        raise ValueError("batchnorm train mode needs at least 2 values per channel")
    mean = x.mean(axis=axes)
    xc = x - mean.reshape(bshape)
    var = np.mean(np.square(xc), axis=axes)
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = xc
    xhat *= inv.reshape(bshape).astype(x.dtype, copy=False)
    y = xhat * gamma + beta
    mom = state.momentum
    state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
    state.running_var[...] = mom * state.running_var + (1 - mom) * var
    state.num_updates += 1
    return y, LayerCache("batchnorm", xhat=xhat, inv=inv, gamma=state.gamma)


def batchnorm_backward(grad_y: Tensor, cache: LayerCache) -> tuple[Tensor, Tensor, Tensor]:
    c = cache.take("batchnorm")
    xhat, inv, gamma = c["xhat"], c["inv"], c["gamma"]
    if grad_y.shape != xhat.shape:
        raise ShapeError(f"batchnorm grad_y shape {grad_y.shape} != {xhat.shape}")
    axes, bshape = _bn_axes(xhat)
    m = xhat.size // xhat.shape[1]
    grad_beta = grad_y.sum(axis=axes)
    grad_gamma = (grad_y * xhat).sum(axis=axes)
    k = (gamma * inv / m).astype(xhat.dtype, copy=False)
    grad_x = xhat * (-grad_gamma.reshape(bshape))
    grad_x += m * grad_y
    grad_x -= grad_beta.reshape(bshape)
    grad_x *= k.reshape(bshape)
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def pool_out(n: int, k: int = 3, stride: int = 2) -> int:
    return (n - k) // stride + 1


def maxpool(x: Tensor, k: int = 3, stride: int = 2) -> tuple[Tensor, LayerCache]:
    """Unpadded max pooling; ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool input must be [N,C,H,W], got ndim={x.ndim}")
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"maxpool spatial dims {x.shape[2:]} smaller than window {k}")
    n, c, h, w = x.shape
    ho, wo = pool_out(h, k, stride), pool_out(w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, LayerCache("maxpool", arg=arg.astype(np.uint8), shape=x.shape, k=k, stride=stride)


def maxpool_backward(grad_y: Tensor, cache: LayerCache) -> Tensor:
    c = cache.take("maxpool")
    arg, shape, k, s = c["arg"], c["shape"], c["k"], c["stride"]
    if grad_y.shape != arg.shape:
        raise ShapeError(f"maxpool grad_y shape {grad_y.shape} != {arg.shape}")
    ho, wo = arg.shape[2:]
    grad_x = np.zeros(shape, dtype=grad_y.dtype)
    for idx in range(k * k):
        di, dj = divmod(idx, k)
        routed = np.where(arg == idx, grad_y, 0)
        grad_x[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += routed
    return grad_x


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def leaky_relu(x: Tensor, alpha: float = 0.01) -> tuple[Tensor, LayerCache]:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    pos = x > 0
    y = np.maximum(x, x * x.dtype.type(alpha))
    return y, LayerCache("leaky_relu", pos=pos, alpha=alpha)


def leaky_relu_backward(grad_y: Tensor, cache: LayerCache) -> Tensor:
    c = cache.take("leaky_relu")
    # derivative at exactly 0 is alpha
    return np.where(c["pos"], grad_y, grad_y * grad_y.dtype.type(c["alpha"]))


def dropout(x: Tensor, p: float, mode: str = "train", seed: int = 0) -> tuple[Tensor, LayerCache]:
    """Inverted dropout; identity in ``infer`` mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if mode == "infer" or p == 0.0:
        return x.copy(), LayerCache("dropout", mask=None, scale=1.0)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    keep = np.random.default_rng(seed).random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    y = np.where(keep, x * x.dtype.type(scale), x.dtype.type(0))
    return y, LayerCache("dropout", mask=keep, scale=scale)


def dropout_backward(grad_y: Tensor, cache: LayerCache) -> Tensor:
    c = cache.take("dropout")
    if c["mask"] is None:
        return grad_y.copy()
    return np.where(c["mask"], grad_y * grad_y.dtype.type(c["scale"]), grad_y.dtype.type(0))


# --------------------------------------------------------------------------
# dense + loss
# --------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, LayerCache]:
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense expects x [N,D] and W [D,M], got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense inner dimension mismatch: x has D={x.shape[1]}, W has D={w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias length {b.shape} does not match M={w.shape[1]}")
    return x @ w + b, LayerCache("dense", x=x, w=w)


def dense_backward(grad_y: Tensor, cache: LayerCache) -> tuple[Tensor, Tensor, Tensor]:
    c = cache.take("dense")
    x, w = c["x"], c["w"]
    return grad_y @ w.T, x.T @ grad_y, grad_y.sum(axis=0)


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> tuple[float, Tensor]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logz - z[rows, labels]))
    grad = np.exp(z - logz[:, None])
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad


# --------------------------------------------------------------------------
# finite-difference checker
# --------------------------------------------------------------------------

def grad_check(forward: Callable[..., tuple[Any, Any]],
               backward: Callable[[Any, Any], Any],
               inputs: Sequence[Tensor],
               eps: float = 1e-6,
               seed: int = 0,
               wrt: Sequence[int] | None = None) -> float:
    """Max relative error between ``backward`` and central differences.

    ``forward(*inputs)`` returns ``(y, cache)``; a scalar ``y`` is used
    directly as the loss, otherwise the loss is ``sum(y * r)`` for a fixed
    random ``r``. ``backward(grad_y, cache)`` must return one gradient per
    input (a bare array when there is only one input). ``wrt`` restricts the
    check to a subset of input positions.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-7, 1e-3], got {eps}")
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt

    y0, cache = forward(*inputs)
    y_again, _ = forward(*inputs)
    if not np.array_equal(np.asarray(y0), np.asarray(y_again)):
        raise NonDeterministicOpError("op produced different outputs for identical inputs")

    scalar = np.ndim(y0) == 0
    r = None if scalar else np.random.default_rng(seed).standard_normal(np.shape(y0))

    def loss() -> float:
        y, _ = forward(*inputs)
        return float(y) if scalar else float(np.sum(y * r))

    grads = backward(1.0 if scalar else r, cache)
    if isinstance(grads, np.ndarray):
        grads = (grads,)
    worst = 0.0
    for i in wrt:
        x, g = inputs[i], np.asarray(grads[i])
        if g.shape != x.shape:
            raise ShapeError(f"gradient for input {i} has shape {g.shape}, expected {x.shape}")
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss()
            flat[j] = orig - eps
            down = loss()
            flat[j] = orig
            num = (up - down) / (2 * eps)
            ana = g.reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
