"""Compiled im2col / col2im kernels.

Both functions mirror ``blockcs._pykernels`` exactly, including the per-pixel
accumulation order of ``col2im`` (kernel row, then kernel column), so the two
backends produce bit-identical results.  Parallelism is over (batch, channel)
planes only; every output element is written by a single thread.
"""
import numpy as np
from cython.parallel import prange

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t offset, Py_ssize_t stride) nogil:
    # smallest o >= 0 with o * stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t offset, Py_ssize_t stride, Py_ssize_t extent,
                                  Py_ssize_t count) nogil:
    # one past the largest o < count with o * stride + offset < extent
    cdef Py_ssize_t last
    if extent - 1 - offset < 0:
        return 0
    last = (extent - 1 - offset) // stride + 1
    return last if last < count else count


def im2col(real[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ph, int pw,
           int out_h, int out_w, int num_threads=1):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t L = out_h * out_w
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((N, C * kh * kw, L), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t nc, n, c, i, j, oh, ow, row, iy, base, lo, hi, off
    with nogil:
        for nc in prange(N * C, num_threads=num_threads, schedule="static"):
            n = nc // C
            c = nc % C
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    off = j - pw
                    lo = _first_valid(off, sw)
                    hi = _end_valid(off, sw, W, out_w)
                    if hi < lo:
                        hi = lo
                    for oh in range(out_h):
                        iy = oh * sh + i - ph
                        base = oh * out_w
                        if iy < 0 or iy >= H:
                            for ow in range(out_w):
                                cols[n, row, base + ow] = 0
                            continue
                        for ow in range(lo):
                            cols[n, row, base + ow] = 0
                        for ow in range(lo, hi):
                            cols[n, row, base + ow] = x[n, c, iy, ow * sw + off]
                        for ow in range(hi, out_w):
                            cols[n, row, base + ow] = 0
    return cols_arr


def col2im(real[:, :, ::1] cols, int N, int C, int H, int W, int kh, int kw,
           int sh, int sw, int ph, int pw, int out_h, int out_w, int num_threads=1):
    dtype = np.float32 if real is float else np.float64
    img_arr = np.zeros((N, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] img = img_arr
    cdef Py_ssize_t nc, n, c, i, j, oh, ow, row, iy, base, lo, hi, off
    with nogil:
        for nc in prange(N * C, num_threads=num_threads, schedule="static"):
            n = nc // C
            c = nc % C
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    off = j - pw
                    lo = _first_valid(off, sw)
                    hi = _end_valid(off, sw, W, out_w)
                    for oh in range(out_h):
                        iy = oh * sh + i - ph
                        if iy < 0 or iy >= H:
                            continue
                        base = oh * out_w
                        for ow in range(lo, hi):
                            img[n, c, iy, ow * sw + off] += cols[n, row, base + ow]
    return img_arr
