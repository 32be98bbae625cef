"""Forward and reverse-mode kernels for every layer the classifier needs.

All kernels take and return :class:`~szdl.tensor.Tensor` and optionally
record themselves on a :class:`~szdl.tensor.Tape`.  Convolution is
computed per sample via an im2col buffer that is cached on the tape node,
so the backward pass reuses it for the weight gradient and reconstructs
the input gradient with 27 shifted slice-adds instead of a second
materialization.

Statistical reductions (means, variances, sums feeding scalars) run in
64-bit accumulators regardless of the engine dtype; BLAS contractions
stay in the native dtype for speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadLabel,
    BadProbability,
    DegenerateBatch,
    OddExtent,
    ShapeMismatch,
)
from .tensor import Tape, Tensor


def _reduce(a: np.ndarray, axis, dtype) -> np.ndarray:
    """Sum in float64, returned in the engine dtype."""
    return a.sum(axis=axis, dtype=np.float64).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# convolution


def _im2col(sample: np.ndarray, k: int, pad: int) -> np.ndarray:
    """[C,D,H,W] -> contiguous [C*k^3, Do*Ho*Wo] column matrix."""
    c = sample.shape[0]
    xp = np.pad(sample, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    # [C, Do, Ho, Wo, k, k, k] -> [C, k, k, k, Do, Ho, Wo]
    win = win.transpose(0, 4, 5, 6, 1, 2, 3)
    spatial = win.shape[4] * win.shape[5] * win.shape[6]
    return np.ascontiguousarray(win).reshape(c * k * k * k, spatial)


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1,
           tape: Tape | None = None) -> Tensor:
    """3D cross-correlation with cubic kernel, zero padding, stride 1.

    ``x`` is [N, Cin, D, H, W], ``w`` is [Cout, Cin, k, k, k], ``b`` is
    [Cout].  Spatial extents are preserved when ``pad = (k-1)/2``.
    """
    if stride != 1:
        raise ShapeMismatch("only stride 1 is supported")
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5-d input/kernel, got {x.shape}/{w.shape}")
    n, cin, d, h, wd = x.shape
    cout, cin_w, kd, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatch(f"input channels {cin} != kernel channels {cin_w}")
    if not (kd == kh == kw):
        raise ShapeMismatch("kernel must be cubic")
    if b.shape != (cout,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
    k = kd
    do, ho, wo = d + 2 * pad - k + 1, h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    if min(do, ho, wo) < 1:
        raise ShapeMismatch("kernel larger than padded input")

    w_mat = w.data.reshape(cout, cin * k * k * k)
    out = np.empty((n, cout, do, ho, wo), dtype=x.dtype)
    cols = []
    for i in range(n):
        col = _im2col(x.data[i], k, pad)
        out[i] = (w_mat @ col).reshape(cout, do, ho, wo) + b.data[:, None, None, None]
        if tape is not None:
            cols.append(col)

    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            need_x, need_w, need_b = needs
            dw = np.zeros_like(w.data) if need_w else None
            dx = np.zeros((n, cin, d + 2 * pad, h + 2 * pad, wd + 2 * pad),
                          dtype=x.dtype) if need_x else None
            dw_mat = dw.reshape(cout, cin * k * k * k) if need_w else None
            for i in range(n):
                g = grad[i].reshape(cout, do * ho * wo)
                if need_w:
                    dw_mat += g @ cols[i].T
                if need_x:
                    colgrad = (w_mat.T @ g).reshape(cin, k, k, k, do, ho, wo)
                    for a in range(k):
                        for bb in range(k):
                            for c in range(k):
                                dx[i, :, a:a + do, bb:bb + ho, c:c + wo] += colgrad[:, a, bb, c]
            if need_x:
                dx = np.ascontiguousarray(dx[:, :, pad:pad + d, pad:pad + h, pad:pad + wd])
            db = _reduce(grad, (0, 2, 3, 4), x.dtype) if need_b else None
            return dx, dw, db

        tape.record(result, (x, w, b), bwd)
    return result


# ---------------------------------------------------------------------------
# pooling


_POOL_FWD_PERM = (0, 1, 2, 4, 6, 3, 5, 7)
_POOL_INV_PERM = (0, 1, 2, 5, 3, 6, 4, 7)


def maxpool3d(x: Tensor, kernel: int = 2, stride: int = 2,
              tape: Tape | None = None) -> tuple[Tensor, np.ndarray]:
    """Disjoint 2x2x2 max pooling; returns the pooled tensor and the argmax.

    The argmax stores each block's winning local index (ties resolved to
    the lowest linear index), and the backward pass routes the gradient
    only there.
    """
    if kernel != 2 or stride != 2:
        raise ShapeMismatch("only kernel 2 / stride 2 pooling is supported")
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise OddExtent(f"spatial extents {(d, h, w)} must be even")
    d2, h2, w2 = d // 2, h // 2, w // 2
    blocks = x.data.reshape(n, c, d2, 2, h2, 2, w2, 2).transpose(_POOL_FWD_PERM)
    blocks = np.ascontiguousarray(blocks).reshape(n, c, d2, h2, w2, 8)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            scattered = np.zeros((n, c, d2, h2, w2, 8), dtype=x.dtype)
            np.put_along_axis(scattered, arg[..., None], grad[..., None], axis=-1)
            dx = scattered.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(_POOL_INV_PERM)
            return (np.ascontiguousarray(dx).reshape(n, c, d, h, w),)

        tape.record(result, (x,), bwd)
    return result, arg


def downsample2x(x: Tensor, mode: str = "mean", tape: Tape | None = None) -> Tensor:
    """Halve the last three extents by 2x2x2 block mean (or nearest corner)."""
    if x.data.ndim < 3:
        raise ShapeMismatch("downsample2x needs at least 3 trailing spatial axes")
    d, h, w = x.shape[-3:]
    if d % 2 or h % 2 or w % 2:
        raise OddExtent(f"spatial extents {(d, h, w)} must be even")
    lead = x.shape[:-3]
    if mode == "mean":
        blocks = x.data.reshape(*lead, d // 2, 2, h // 2, 2, w // 2, 2)
        out = blocks.mean(axis=(-5, -3, -1), dtype=np.float64).astype(x.dtype)
    elif mode == "nearest":
        out = np.ascontiguousarray(x.data[..., ::2, ::2, ::2])
    else:
        raise ValueError(f"unknown downsample mode {mode!r}")

    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            dx = np.zeros_like(x.data)
            view = dx.reshape(*lead, d // 2, 2, h // 2, 2, w // 2, 2)
            if mode == "mean":
                view += (grad / 8)[..., :, None, :, None, :, None]
            else:
                view[..., :, 0, :, 0, :, 0] = grad
            return (dx,)

        tape.record(result, (x,), bwd)
    return result


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Mean over all spatial positions: [N,C,D,H,W] -> [N,C]."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"expected 5-d input, got {x.shape}")
    volume = x.shape[2] * x.shape[3] * x.shape[4]
    out = x.data.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.dtype)

    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            g = (grad / volume).astype(x.dtype)[:, :, None, None, None]
            return (np.broadcast_to(g, x.shape).copy(),)

        tape.record(result, (x,), bwd)
    return result


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNState:
    """Running statistics for one batch-norm layer (eval-mode inputs)."""

    mean: np.ndarray
    var: np.ndarray

    def copy(self) -> "BNState":
        return BNState(self.mean.copy(), self.var.copy())


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str, state: BNState,
                momentum: float = 0.1, eps: float = 1e-5,
                tape: Tape | None = None) -> Tensor:
    """Per-channel normalization over (N, D, H, W) with learned scale/shift.

    Train mode normalizes with the mini-batch mean and biased variance and
    updates ``state`` by exponential moving average; eval mode normalizes
    with the stored running statistics.  Reductions use 64-bit accumulators.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    n, c, d, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must have shape ({c},)")

    if mode == "train":
        count = n * d * h * w
        if count < 2:
            raise DegenerateBatch("train-mode batchnorm needs >= 2 elements per channel")
        mean = x.data.mean(axis=(0, 2, 3, 4), dtype=np.float64)
        xc = x.data - mean[None, :, None, None, None].astype(x.dtype)
        var = np.square(xc, dtype=np.float64).mean(axis=(0, 2, 3, 4), dtype=np.float64)
        istd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = xc * istd[None, :, None, None, None]
        state.mean[...] = (1 - momentum) * state.mean + momentum * mean.astype(state.mean.dtype)
        state.var[...] = (1 - momentum) * state.var + momentum * var.astype(state.var.dtype)
    else:
        istd = (1.0 / np.sqrt(state.var.astype(np.float64) + eps)).astype(x.dtype)
        xhat = (x.data - state.mean.astype(x.dtype)[None, :, None, None, None]) \
            * istd[None, :, None, None, None]

    out = gamma.data[None, :, None, None, None] * xhat + beta.data[None, :, None, None, None]
    result = Tensor(out)

    if tape is not None:
        def bwd(grad, needs):
            need_x, need_gamma, need_beta = needs
            dgamma = _reduce(grad * xhat, (0, 2, 3, 4), x.dtype) if need_gamma else None
            dbeta = _reduce(grad, (0, 2, 3, 4), x.dtype) if need_beta else None
            dx = None
            if need_x:
                dxhat = grad * gamma.data[None, :, None, None, None]
                if mode == "train":
                    m1 = dxhat.mean(axis=(0, 2, 3, 4), dtype=np.float64).astype(x.dtype)
                    m2 = (dxhat * xhat).mean(axis=(0, 2, 3, 4), dtype=np.float64).astype(x.dtype)
                    dx = istd[None, :, None, None, None] * (
                        dxhat
                        - m1[None, :, None, None, None]
                        - xhat * m2[None, :, None, None, None]
                    )
                else:
                    dx = dxhat * istd[None, :, None, None, None]
            return dx, dgamma, dbeta

        tape.record(result, (x, gamma, beta), bwd)
    return result


# ---------------------------------------------------------------------------
# dense / activations / dropout


def dense(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map x @ W + b with x [N,F], W [F,O], b [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeMismatch(f"dense expects 2-d operands, got {x.shape}/{w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"inner extents differ: {x.shape[1]} vs {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeMismatch(f"bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data + b.data

    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            need_x, need_w, need_b = needs
            dx = grad @ w.data.T if need_x else None
            dw = x.data.T @ grad if need_w else None
            db = _reduce(grad, 0, x.dtype) if need_b else None
            return dx, dw, db

        tape.record(result, (x, w, b), bwd)
    return result


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = np.maximum(x.data, 0)
    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            return (grad * (x.data > 0),)

        tape.record(result, (x,), bwd)
    return result


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    z = x.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z)))).astype(x.dtype)
    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            return (grad * out * (1 - out),)

        tape.record(result, (x,), bwd)
    return result


def softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction stabilization."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)

    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            inner = (grad * out).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
            return (out * (grad - inner),)

        tape.record(result, (x,), bwd)
    return result


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax}


def activation(x: Tensor, kind: str, tape: Tape | None = None) -> Tensor:
    """Dispatch to relu / sigmoid / softmax-over-last-axis."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x, tape=tape)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None,
            tape: Tape | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0 <= p < 1:
        raise BadProbability(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "eval" or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    scale = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1 - p, dtype=x.dtype)
    out = x.data * scale

    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            return (grad * scale,)

        tape.record(result, (x,), bwd)
    return result


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    """Mean negative log-likelihood of the true class, fused with log-softmax.

    The gradient with respect to the logits is (softmax - onehot) / N.
    """
    y = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeMismatch(f"labels shape {y.shape} != ({n},)")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= k:
        raise BadLabel(f"labels must be integers in [0, {k})")

    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), y] - lse
    loss = Tensor(np.float64(-logp.mean()))

    if tape is not None:
        def bwd(grad, needs):
            p = np.exp(z - lse[:, None]).astype(logits.dtype)
            p[np.arange(n), y] -= 1
            return (p * np.asarray(float(grad) / n, dtype=logits.dtype),)

        tape.record(loss, (logits,), bwd)
    return loss


# ---------------------------------------------------------------------------
# small structural ops


def reshape(x: Tensor, shape, tape: Tape | None = None) -> Tensor:
    result = Tensor(x.data.reshape(shape))
    if tape is not None:
        def bwd(grad, needs):
            return (grad.reshape(x.shape),)

        tape.record(result, (x,), bwd)
    return result


def channel_scale(x: Tensor, gate: Tensor, tape: Tape | None = None) -> Tensor:
    """Multiply each channel of [N,C,D,H,W] by a per-(sample, channel) gate."""
    if gate.shape != x.shape[:2]:
        raise ShapeMismatch(f"gate shape {gate.shape} != {x.shape[:2]}")
    g5 = gate.data[:, :, None, None, None]
    out = x.data * g5

    result = Tensor(out)
    if tape is not None:
        def bwd(grad, needs):
            need_x, need_gate = needs
            dx = grad * g5 if need_x else None
            dgate = _reduce(grad * x.data, (2, 3, 4), x.dtype) if need_gate else None
            return dx, dgate

        tape.record(result, (x, gate), bwd)
    return result


def mul(x: Tensor, y: Tensor, tape: Tape | None = None) -> Tensor:
    if x.shape != y.shape:
        raise ShapeMismatch(f"elementwise shapes differ: {x.shape} vs {y.shape}")
    result = Tensor(x.data * y.data)
    if tape is not None:
        def bwd(grad, needs):
            dx = grad * y.data if needs[0] else None
            dy = grad * x.data if needs[1] else None
            return dx, dy

        tape.record(result, (x, y), bwd)
    return result


def scale(x: Tensor, factor: float, tape: Tape | None = None) -> Tensor:
    result = Tensor(x.data * np.asarray(factor, dtype=x.dtype))
    if tape is not None:
        def bwd(grad, needs):
            return (grad * np.asarray(factor, dtype=x.dtype),)

        tape.record(result, (x,), bwd)
    return result


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    result = Tensor(x.data.sum(dtype=np.float64))
    if tape is not None:
        def bwd(grad, needs):
            return (np.full(x.shape, float(grad), dtype=x.dtype),)

        tape.record(result, (x,), bwd)
    return result


def take(x: Tensor, index: tuple, tape: Tape | None = None) -> Tensor:
    """Select a single element as a 0-d tensor (e.g. one logit)."""
    result = Tensor(x.data[index])
    if tape is not None:
        def bwd(grad, needs):
            dx = np.zeros_like(x.data)
            dx[index] = grad
            return (dx,)

        tape.record(result, (x,), bwd)
    return result
