"""Differentiable layer primitives. Images are NHWC throughout."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor

IN_EPS = 1e-5


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows of k*k patches, columns ordered (ki, kj, c) to match ``w.reshape(k*k*c, -1)``."""
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : stride * ho : stride, : stride * wo : stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Same-padded 2-D convolution (cross-correlation).

    ``w`` has shape (k, k, c_in, filters); padding is ``k // 2`` on every side,
    so stride 1 preserves H and W and stride 2 halves even sizes.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    k, k2, c_in, filters = w.shape
    if k != k2 or x.shape[3] != c_in:
        raise ShapeError(f"conv2d input shape {x.shape} incompatible with kernel shape {w.shape}")
    n, h, wd, _ = x.shape
    pad = k // 2
    ho = conv_output_size(h, k, stride)
    wo = conv_output_size(wd, k, stride)
    xp = _pad_hw(x.data, pad)
    cols2 = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(k * k * c_in, filters)
    out = (cols2 @ wmat).reshape(n, ho, wo, filters) + b.data
    in_shape = xp.shape

    def backward(g: np.ndarray):
        g2 = g.reshape(n * ho * wo, filters)
        dw = (cols2.T @ g2).reshape(w.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, k * k, c_in)
            dxp = np.zeros(in_shape, dtype=g.dtype)
            for idx in range(k * k):
                i, j = divmod(idx, k)
                dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[
                    :, :, :, idx, :
                ]
            dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
        return dx, dw, db

    return Tensor.from_op(out, (x, w, b), backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution that multiplies H and W by ``stride``.

    ``w`` has shape (k, k, c_in, filters). The full scatter output of size
    ``(H-1)*stride + k`` is cropped by ``(k-1)//2`` at the top/left and to
    exactly ``H*stride`` rows/cols.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects NHWC input, got shape {x.shape}")
    k, k2, c_in, filters = w.shape
    if k != k2 or x.shape[3] != c_in:
        raise ShapeError(f"conv_transpose2d input shape {x.shape} incompatible with kernel shape {w.shape}")
    n, h, wd, _ = x.shape
    full_h = (h - 1) * stride + k
    full_w = (wd - 1) * stride + k
    crop = (k - 1) // 2
    ho, wo = h * stride, wd * stride
    if crop + ho > full_h:
        full_h = crop + ho
    if crop + wo > full_w:
        full_w = crop + wo
    x2 = x.data.reshape(n * h * wd, c_in)
    # wmat columns ordered (ki, kj, f)
    wmat = w.data.transpose(2, 0, 1, 3).reshape(c_in, k * k * filters)
    y = (x2 @ wmat).reshape(n, h, wd, k * k, filters)
    full = np.zeros((n, full_h, full_w, filters), dtype=y.dtype)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        full[:, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride, :] += y[:, :, :, idx, :]
    out = full[:, crop : crop + ho, crop : crop + wo, :] + b.data

    def backward(g: np.ndarray):
        gfull = np.zeros((n, full_h, full_w, filters), dtype=g.dtype)
        gfull[:, crop : crop + ho, crop : crop + wo, :] = g
        dy = _im2col(gfull, k, stride, h, wd)
        dwmat = x2.T @ dy
        dw = dwmat.reshape(c_in, k, k, filters).transpose(1, 2, 0, 3)
        db = g.sum(axis=(0, 1, 2))
        dx = (dy @ wmat.T).reshape(x.shape) if x.requires_grad else None
        return dx, np.ascontiguousarray(dw), db

    return Tensor.from_op(out, (x, w, b), backward)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped.

    Gradient goes to the first maximal element of each window in
    (top-left, top-right, bottom-left, bottom-right) order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2x2 expects NHWC input, got shape {x.shape}")
    n, h, wd, c = x.shape
    h2, w2 = h // 2, wd // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"max_pool2x2 cannot pool spatial size {h}x{wd}")
    xd = x.data
    quads = (
        xd[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2],
        xd[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2],
        xd[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2],
        xd[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2],
    )
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def backward(g: np.ndarray):
        dx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (di, dj) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            dx[:, di : 2 * h2 : 2, dj : 2 * w2 : 2] = g * hit
        return (dx,)

    return Tensor.from_op(out, (x,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over flattened non-batch dimensions."""
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    if flat.shape[1] != w.shape[0]:
        raise ShapeError(f"dense input shape {x.shape} (fan-in {flat.shape[1]}) incompatible with weight shape {w.shape}")
    out = flat @ w.data + b.data
    in_shape = x.shape

    def backward(g: np.ndarray):
        dx = (g @ w.data.T).reshape(in_shape) if x.requires_grad else None
        return dx, flat.T @ g, g.sum(axis=0)

    return Tensor.from_op(out, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1 - y * y),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return Tensor.from_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or rate is 0."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = IN_EPS) -> Tensor:
    """Normalize each (sample, channel) plane over H and W, then scale and shift."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects NHWC input, got shape {x.shape}")
    if gamma.shape != (x.shape[3],):
        raise ShapeError(f"instance_norm input shape {x.shape} incompatible with scale shape {gamma.shape}")
    m = x.shape[1] * x.shape[2]
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 1, 2))
        dbeta = g.sum(axis=(0, 1, 2))
        dxhat = g * gamma.data
        dx = (inv / m) * (
            m * dxhat - dxhat.sum(axis=(1, 2), keepdims=True) - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


# -- losses ---------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got shape {logits.shape}")
    n, k = logits.shape
    if n == 0 or labels.size == 0:
        raise ValueError("cross_entropy on an empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits shape {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"class index out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g: np.ndarray):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def mse(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mse")
    return (a - b).square().mean()


def l1(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "l1")
    return (a - b).abs().mean()
