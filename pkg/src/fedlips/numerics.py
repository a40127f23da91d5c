"""Dense float64 kernels: the forward/backward building blocks of every model.

All kernels are pure functions over numpy float64 arrays (row-major); they
never mutate their inputs. Each differentiable kernel has a matching
``*_backward`` companion, and :func:`finite_diff_grad` provides the
independent numerical oracle the test suite checks them against.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a kernel."""


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain 2-D matrix product c[i,j] = sum_t a[i,t] * b[t,j]."""
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# linear (fully connected)
# ---------------------------------------------------------------------------

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x @ w.T + b with weights of shape (out_features, in_features)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weights {w.shape}")
    return x @ w.T + b


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# conv2d (cross-correlation, zero padding)
# ---------------------------------------------------------------------------

def conv2d_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Flattened sliding windows, shape (N*H'*W', C*kh*kw), contiguous."""
    if pad < 0:
        raise ValueError(f"conv2d: negative padding {pad}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride, :, :]
    n, c, oh, ow = win.shape[:4]
    # (N, H', W', C, kh, kw) row layout matches the GEMM in both directions
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * kh * kw)


def _conv2d_gemm(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int):
    """Returns (y, cols); cols can be fed back into conv2d_backward."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias {b.shape} does not match {w.shape[0]} filters")
    if pad < 0:
        raise ValueError(f"conv2d: negative padding {pad}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
        raise ShapeError(f"conv2d kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    n = x.shape[0]
    f = w.shape[0]
    oh, ow = conv2d_out_hw(x.shape[2], x.shape[3], kh, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(f, -1).T + b
    return np.ascontiguousarray(y.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)), cols


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 1, pad: int = 0) -> np.ndarray:
    """Batched 2-D cross-correlation.

    x: (N, C, H, W), w: (F, C, kh, kw), b: (F,). Output spatial size is
    floor((H + 2*pad - kh) / stride) + 1 per axis.
    """
    return _conv2d_gemm(x, w, b, stride, pad)[0]


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int = 1, pad: int = 0, cols: np.ndarray | None = None,
                    need_dx: bool = True):
    """Gradients of conv2d_forward w.r.t. x, w, b given upstream dy.

    cols, when provided, must be the im2col matrix from the forward pass.
    need_dx=False skips the input gradient (first layer of a network).
    """
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = conv2d_out_hw(h, wd, kh, kw, stride, pad)
    if dy.shape != (n, f, oh, ow):
        raise ShapeError(f"conv2d backward: dy {dy.shape} does not match output {(n, f, oh, ow)}")
    if cols is None:
        cols = _im2col(x, kh, kw, stride, pad)

    dy_rows = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
    db = dy_rows.sum(axis=0)
    dw = (dy_rows.T @ cols).reshape(f, c, kh, kw)
    if not need_dx:
        return None, dw, db

    if stride == 1 and kh == kw and kh - 1 - pad >= 0:
        # dx is the full cross-correlation of dy with the flipped, transposed
        # kernel: one more im2col GEMM instead of a python scatter loop
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dy_cols = _im2col(dy, kh, kw, 1, kh - 1 - pad)
        dx = (dy_cols @ w_flip.reshape(c, -1).T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw, db

    # generic path: scatter the column gradients back over the padded input
    dcols = (dy_rows @ w.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# batch normalization (per channel, axis 1)
# ---------------------------------------------------------------------------

def _bn_axes(x: np.ndarray):
    return (0,) + tuple(range(2, x.ndim))


def _bcast(v: np.ndarray, x: np.ndarray):
    shape = [1] * x.ndim
    shape[1] = v.shape[0]
    return v.reshape(shape)


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      mode: str = "train", momentum: float = BN_MOMENTUM,
                      eps: float = BN_EPS):
    """Normalize per channel; returns (y, new_running_mean, new_running_var).

    Train mode normalizes by batch statistics (biased variance) and blends
    them into the running stats with the given momentum; eval mode normalizes
    by the running stats and returns them unchanged.
    """
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: channel mismatch x {x.shape} vs gamma {gamma.shape}")
    axes = _bn_axes(x)
    if mode == "train":
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise ValueError(f"batchnorm train mode needs >1 sample per channel, got {count}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_rm = (1.0 - momentum) * running_mean + momentum * mean
        new_rv = (1.0 - momentum) * running_var + momentum * var
    elif mode == "eval":
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    xhat = (x - _bcast(mean, x)) / np.sqrt(_bcast(var, x) + eps)
    y = _bcast(gamma, x) * xhat + _bcast(beta, x)
    return y, new_rm, new_rv


def batchnorm_backward(dy: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                       eps: float = BN_EPS):
    """Train-mode gradients w.r.t. x, gamma, beta (batch statistics path)."""
    axes = _bn_axes(dy)
    m = float(np.prod([x.shape[a] for a in axes]))
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bcast(mean, x)) * _bcast(inv_std, x)

    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * _bcast(gamma, x)
    dx = (_bcast(inv_std, x) / m) * (
        m * dxhat
        - _bcast(dxhat.sum(axis=axes), x)
        - xhat * _bcast((dxhat * xhat).sum(axis=axes), x)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# relu / pooling
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def _pool_windows(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    """(N, C, H', W', size*size) windows; contiguous fast path for the
    ubiquitous non-overlapping even-sized pooling."""
    n, c, h, w = x.shape
    if stride == size and h % size == 0 and w % size == 0:
        win = x.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
        return win.reshape(n, c, h // size, w // size, size * size)
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(*win.shape[:4], size * size)


def maxpool2d_forward(x: np.ndarray, size: int = 2, stride: int = 2) -> np.ndarray:
    return _pool_windows(x, size, stride).max(axis=4)


def maxpool2d_backward(dy: np.ndarray, x: np.ndarray, size: int = 2, stride: int = 2) -> np.ndarray:
    """Route gradients to each window's argmax (first index on ties)."""
    n, c, h, w = x.shape
    flat = _pool_windows(x, size, stride)
    oh, ow = flat.shape[2], flat.shape[3]
    arg = flat.argmax(axis=4)
    di, dj = np.unravel_index(arg, (size, size))
    ni, ci, oi, oj = np.indices((n, c, oh, ow), sparse=True)
    dx = np.zeros_like(x)
    np.add.at(dx, (ni, ci, oi * stride + di, oj * stride + dj), dy)
    return dx


def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avgpool_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return np.broadcast_to(dy[:, :, None, None], x.shape) / (h * w)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean batch cross-entropy and its gradient w.r.t. the logits.

    Stabilized by per-row max subtraction; grad = (softmax - onehot) / N.
    """
    logits = as_f64(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.min() < 0 or labels.max() >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - log_z[:, None])
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# numerical gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)  # private contiguous copy; caller's array is never touched
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
