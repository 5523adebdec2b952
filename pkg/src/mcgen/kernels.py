"""Hot convolution kernels: im2col lowering and its col2im adjoint.

Two interchangeable implementations exist. The numba path loops explicitly;
the numpy path uses strided views and slice accumulation. Both accumulate
every output element in the same (ki, kj) order, so they agree bit for bit.
The active path comes from ``MCGEN_KERNELS`` and can be switched at runtime
with :func:`set_backend` (the benchmark and the parity tests do this).

Column layout: rows are (n, oh, ow) in row-major order, columns are
(c, ki, kj) in row-major order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import HAVE_NUMBA, backend_from_env, optional_njit

_backend = backend_from_env()


def get_backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def conv_out_size(size, k, stride, pad):
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ValueError(f"kernel {k} with stride {stride} and pad {pad} does not fit size {size}")
    return out


# numpy path ---------------------------------------------------------------

def _im2col_np(x, kh, kw, stride, pad, oh, ow):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _col2im_np(cols, shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = shape
    cols6 = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    hi = (oh - 1) * stride + 1
    wi = (ow - 1) * stride + 1
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + hi : stride, kj : kj + wi : stride] += cols6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


# numba path ---------------------------------------------------------------

@optional_njit
def _im2col_nb(x, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x.shape
    out = np.zeros((n * oh * ow, c * kh * kw), dtype=x.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                for ch in range(c):
                    for ki in range(kh):
                        y = i * stride + ki - pad
                        if y < 0 or y >= h:
                            continue
                        base = (ch * kh + ki) * kw
                        for kj in range(kw):
                            xx = j * stride + kj - pad
                            if 0 <= xx < w:
                                out[row, base + kj] = x[b, ch, y, xx]
    return out


@optional_njit
def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad, oh, ow):
    # per output element, contributions arrive in (ki, kj) order, as in the numpy path
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for ki in range(kh):
            for kj in range(kw):
                for i in range(oh):
                    y = i * stride + ki - pad
                    if y < 0 or y >= h:
                        continue
                    for j in range(ow):
                        xx = j * stride + kj - pad
                        if xx < 0 or xx >= w:
                            continue
                        row = (b * oh + i) * ow + j
                        for ch in range(c):
                            out[b, ch, y, xx] += cols[row, (ch * kh + ki) * kw + kj]
    return out


# dispatch -----------------------------------------------------------------

def im2col(x, kh, kw, stride, pad, backend=None):
    """Lower an N×C×H×W array to a (N·OH·OW)×(C·kh·kw) patch matrix."""
    oh = conv_out_size(x.shape[2], kh, stride, pad)
    ow = conv_out_size(x.shape[3], kw, stride, pad)
    if (backend or _backend) == "numba":
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, oh, ow)
    return _im2col_np(x, kh, kw, stride, pad, oh, ow)


def col2im(cols, shape, kh, kw, stride, pad, backend=None):
    """Scatter-add a patch matrix back to an array of ``shape``; adjoint of im2col."""
    n, c, h, w = shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if cols.shape != (n * oh * ow, c * kh * kw):
        raise ValueError(f"column matrix {cols.shape} does not match target {shape}")
    if (backend or _backend) == "numba":
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad, oh, ow)
    return _col2im_np(cols, shape, kh, kw, stride, pad, oh, ow)
