"""3D convolution kernels, the hot inner loops of the network.

Two interchangeable backends:

* numba: @njit loop nests, parallelized so that each output element is
  produced by exactly one thread (bit-deterministic regardless of thread
  count).
* numpy: im2col views + BLAS matmul fallback.

Set NLDENOISE_NO_NUMBA=1 to force the numpy path (or it is used
automatically when numba is not importable). `benchmarks/bench_conv.py`
compares the two.

All convolutions are stride-1 cross-correlations with zero padding k//2,
so spatial shape is preserved. Kernels are dtype-agnostic (float32 in
training, float64 in gradient-check mode).
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_disable = os.environ.get("NLDENOISE_NO_NUMBA", "0") not in ("0", "", "false")
HAVE_NUMBA = False
if not _disable:
    try:
        from numba import njit, prange

        HAVE_NUMBA = True
    except ImportError:
        pass

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def _pad(x, r):
    if r == 0:
        return x
    return np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _im2col(x, k):
    """(Cin, D, H, W) -> (D*H*W, Cin*k^3) matrix of padded neighborhoods."""
    cin, d, h, w = x.shape
    xp = _pad(x, k // 2)
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))  # (Cin, D, H, W, k, k, k)
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(d * h * w, cin * k * k * k)
    return np.ascontiguousarray(cols)


def conv3d_forward_numpy(x, weight, bias):
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    d, h, w = x.shape[1:]
    if k == 1:
        y = np.tensordot(weight[:, :, 0, 0, 0], x, axes=(1, 0))
    else:
        cols = _im2col(x, k)
        y = (cols @ weight.reshape(cout, cin * k * k * k).T).T.reshape(cout, d, h, w)
    return y + bias[:, None, None, None]


def conv3d_backward_numpy(x, weight, grad_out):
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    d, h, w = x.shape[1:]
    # input gradient: correlate grad_out with the spatially flipped,
    # channel-transposed weights
    w_flip = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    grad_x = conv3d_forward_numpy(grad_out, w_flip, np.zeros(cin, dtype=x.dtype))
    if k == 1:
        gmat = grad_out.reshape(cout, -1)
        grad_w = (gmat @ x.reshape(cin, -1).T).reshape(cout, cin, 1, 1, 1)
    else:
        cols = _im2col(x, k)
        grad_w = (grad_out.reshape(cout, -1) @ cols).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(1, 2, 3))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(parallel=True, fastmath=False, cache=True)
    def _conv_fwd_jit(xp, weight, bias, out):
        cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
        d, h, w = out.shape[1], out.shape[2], out.shape[3]
        for co in prange(cout):
            for z in range(d):
                for y in range(h):
                    for x in range(w):
                        acc = bias[co]
                        for ci in range(cin):
                            for kz in range(k):
                                for ky in range(k):
                                    for kx in range(k):
                                        acc += weight[co, ci, kz, ky, kx] * xp[ci, z + kz, y + ky, x + kx]
                        out[co, z, y, x] = acc

    @njit(parallel=True, fastmath=False, cache=True)
    def _conv_dw_jit(xp, grad_out, grad_w):
        cout, cin, k = grad_w.shape[0], grad_w.shape[1], grad_w.shape[2]
        d, h, w = grad_out.shape[1], grad_out.shape[2], grad_out.shape[3]
        for co in prange(cout):
            for ci in range(cin):
                for kz in range(k):
                    for ky in range(k):
                        for kx in range(k):
                            acc = 0.0
                            for z in range(d):
                                for y in range(h):
                                    for x in range(w):
                                        acc += grad_out[co, z, y, x] * xp[ci, z + kz, y + ky, x + kx]
                            grad_w[co, ci, kz, ky, kx] = acc

    def conv3d_forward_numba(x, weight, bias):
        k = weight.shape[2]
        out = np.empty((weight.shape[0],) + x.shape[1:], dtype=x.dtype)
        _conv_fwd_jit(np.ascontiguousarray(_pad(x, k // 2)), weight, bias, out)
        return out

    def conv3d_backward_numba(x, weight, grad_out):
        cin, k = weight.shape[1], weight.shape[2]
        w_flip = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        grad_x = conv3d_forward_numba(grad_out, w_flip, np.zeros(cin, dtype=x.dtype))
        grad_w = np.empty(weight.shape, dtype=np.float64)
        _conv_dw_jit(np.ascontiguousarray(_pad(x, k // 2)), np.ascontiguousarray(grad_out), grad_w)
        grad_b = grad_out.sum(axis=(1, 2, 3))
        return grad_x, grad_w.astype(x.dtype), grad_b


def conv3d_forward(x, weight, bias):
    """Cross-correlation, zero padding k//2, stride 1. x: (Cin, D, H, W)."""
    if HAVE_NUMBA:
        return conv3d_forward_numba(x, weight, bias)
    return conv3d_forward_numpy(x, weight, bias)


def conv3d_backward(x, weight, grad_out):
    """Gradients (grad_x, grad_w, grad_b) of conv3d_forward."""
    if HAVE_NUMBA:
        return conv3d_backward_numba(x, weight, grad_out)
    return conv3d_backward_numpy(x, weight, grad_out)
