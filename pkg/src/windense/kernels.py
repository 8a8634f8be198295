"""Convolution compute kernels.

Two interchangeable backends provide the three hot loops of the package
(conv2d forward, input gradient, weight gradient):

* ``numba`` -- @njit direct loops, the default whenever numba imports.
* ``numpy`` -- im2col/col2im plus one BLAS matmul, always available.

Selection happens once at import time from the ``WINDENSE_JIT`` environment
variable ("0"/"false"/"no"/"off" forces the numpy path).  Both backends are
importable regardless of the flag so they can be benchmarked against each
other (see benchmarks/bench_kernels.py).  Results agree to ~1e-13; only the
floating-point summation order differs.

All arrays are float64, NCHW activations and OIHW filters.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _jit_requested() -> bool:
    flag = os.environ.get("WINDENSE_JIT", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


_HAVE_NUMBA = False
if _jit_requested():
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:
        pass


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"kernel {k} with stride {stride}, pad {pad} does not tile input size {size}"
        )
    return span // stride + 1


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# ---------------------------------------------------------------------------
# numpy backend: im2col + GEMM
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold x (N,C,H,W) into columns of shape (C*kh*kw, N*oh*ow)."""
    n, c, _, _ = x.shape
    xp = _pad2d(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    """Fold columns back, accumulating values from overlapping windows."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    planes = cols.reshape(c, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + oh * stride:stride, kx:kx + ow * stride:stride] += \
                planes[:, :, ky, kx]
    if pad == 0:
        return dxp
    return dxp[:, :, pad:pad + h, pad:pad + w]


def conv2d_forward_numpy(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n = x.shape[0]
    c_out, _, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = (w.reshape(c_out, -1) @ cols).reshape(c_out, n, oh, ow)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_input_grad_numpy(dout: np.ndarray, w: np.ndarray, x_shape,
                            stride: int, pad: int) -> np.ndarray:
    c_out, _, kh, kw = w.shape
    n, _, oh, ow = dout.shape
    dout_mat = dout.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dcols = w.reshape(c_out, -1).T @ dout_mat
    return _col2im(dcols, x_shape, kh, kw, stride, pad, oh, ow)


def conv2d_weight_grad_numpy(dout: np.ndarray, x: np.ndarray, w_shape,
                             stride: int, pad: int) -> np.ndarray:
    c_out, _, kh, kw = w_shape
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    dout_mat = dout.transpose(1, 0, 2, 3).reshape(c_out, -1)
    return (dout_mat @ cols.T).reshape(w_shape)


# ---------------------------------------------------------------------------
# numba backend: branch-free loops over pre-padded input
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_nb(xp, w, stride, oh, ow):
        n = xp.shape[0]
        c_out, c_in, kh, kw = w.shape
        out = np.zeros((n, c_out, oh, ow))
        for i in range(n):
            for co in range(c_out):
                for ci in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[co, ci, ky, kx]
                            for oy in range(oh):
                                iy = oy * stride + ky
                                for ox in range(ow):
                                    out[i, co, oy, ox] += wv * xp[i, ci, iy, ox * stride + kx]
        return out

    @njit(cache=True)
    def _conv2d_input_grad_nb(dout, w, stride, hp, wp):
        n, c_out, oh, ow = dout.shape
        c_in, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        dxp = np.zeros((n, c_in, hp, wp))
        for i in range(n):
            for co in range(c_out):
                for ci in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[co, ci, ky, kx]
                            for oy in range(oh):
                                iy = oy * stride + ky
                                for ox in range(ow):
                                    dxp[i, ci, iy, ox * stride + kx] += wv * dout[i, co, oy, ox]
        return dxp

    @njit(cache=True)
    def _conv2d_weight_grad_nb(dout, xp, c_in, kh, kw, stride):
        n, c_out, oh, ow = dout.shape
        dw = np.zeros((c_out, c_in, kh, kw))
        for i in range(n):
            for co in range(c_out):
                for ci in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc = 0.0
                            for oy in range(oh):
                                iy = oy * stride + ky
                                for ox in range(ow):
                                    acc += dout[i, co, oy, ox] * xp[i, ci, iy, ox * stride + kx]
                            dw[co, ci, ky, kx] += acc
        return dw

    def conv2d_forward_numba(x, w, stride, pad):
        oh = conv_out_size(x.shape[2], w.shape[2], stride, pad)
        ow = conv_out_size(x.shape[3], w.shape[3], stride, pad)
        return _conv2d_forward_nb(_pad2d(x, pad), w, stride, oh, ow)

    def conv2d_input_grad_numba(dout, w, x_shape, stride, pad):
        n, c, h, wd = x_shape
        dxp = _conv2d_input_grad_nb(dout, w, stride, h + 2 * pad, wd + 2 * pad)
        if pad == 0:
            return dxp
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])

    def conv2d_weight_grad_numba(dout, x, w_shape, stride, pad):
        _, c_in, kh, kw = w_shape
        return _conv2d_weight_grad_nb(dout, _pad2d(x, pad), c_in, kh, kw, stride)


BACKEND = "numba" if _HAVE_NUMBA else "numpy"

if _HAVE_NUMBA:
    conv2d_forward = conv2d_forward_numba
    conv2d_input_grad = conv2d_input_grad_numba
    conv2d_weight_grad = conv2d_weight_grad_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_input_grad = conv2d_input_grad_numpy
    conv2d_weight_grad = conv2d_weight_grad_numpy
