# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled kernels. float32 only; every function releases the GIL."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef extern from "_csrc/kernels.h":
    void mt_conv_forward(const float *x, int hp, int wp, int cin, const float *w, int n,
                         int cout, const float *bias, float *out) nogil
    void mt_conv_wgrad(const float *x, int hp, int wp, int cin, const float *g, int n,
                       int cout, float *dw) nogil
    void mt_channel_stats(const float *x, long m, int c, double *sum, double *sumsq) nogil
    void mt_scale_shift(const float *x, long m, int c, const float *scale,
                        const float *shift, int relu, float *out) nogil
    void mt_bn_backward_reduce(const float *x, const float *y, const float *gy, long m,
                               int c, const float *mean, const float *invstd, int relu,
                               double *dbeta, double *dgamma) nogil
    void mt_bn_backward_apply(const float *x, const float *y, const float *gy, long m,
                              int c, const float *mean, const float *invstd,
                              const float *coef, const float *mbeta, const float *mgamma,
                              int relu, float *dx) nogil
    void mt_maxpool2_forward(const float *x, int rows, int width, int c, float *out,
                             unsigned char *idx) nogil
    void mt_maxpool2_backward(const float *g, const unsigned char *idx, int rows,
                              int width, int c, float *dx) nogil
    long mt_label8(const unsigned char *mask, int h, int w, int *labels) nogil

BACKEND = "compiled"
CHANNEL_MULTIPLE = 16


def conv_forward(const float[:, :, ::1] xp, const float[:, :, :, ::1] w,
                 const float[::1] bias):
    cdef int hp = xp.shape[0], wp = xp.shape[1], cin = xp.shape[2]
    cdef int n = w.shape[0], cout = w.shape[3]
    if w.shape[2] != cin or bias.shape[0] != cout:
        raise ValueError("kernel/bias shape does not match input channels")
    if cout % CHANNEL_MULTIPLE:
        raise ValueError("compiled conv needs out-channels divisible by 16")
    out = np.empty((hp - n + 1, wp - n + 1, cout), dtype=np.float32)
    cdef float[:, :, ::1] o = out
    with nogil:
        mt_conv_forward(&xp[0, 0, 0], hp, wp, cin, &w[0, 0, 0, 0], n, cout, &bias[0],
                        &o[0, 0, 0])
    return out


def conv_wgrad(const float[:, :, ::1] xp, const float[:, :, ::1] g,
               float[:, :, :, ::1] dw):
    """Accumulate the kernel gradient of one example into ``dw``."""
    cdef int hp = xp.shape[0], wp = xp.shape[1], cin = xp.shape[2]
    cdef int n = dw.shape[0], cout = g.shape[2]
    if dw.shape[2] != cin or dw.shape[3] != cout:
        raise ValueError("gradient buffer shape mismatch")
    if g.shape[0] != hp - n + 1 or g.shape[1] != wp - n + 1:
        raise ValueError("output gradient shape mismatch")
    if cout % CHANNEL_MULTIPLE:
        raise ValueError("compiled conv needs out-channels divisible by 16")
    with nogil:
        mt_conv_wgrad(&xp[0, 0, 0], hp, wp, cin, &g[0, 0, 0], n, cout, &dw[0, 0, 0, 0])


def channel_stats(const float[:, ::1] x):
    cdef long m = x.shape[0]
    cdef int c = x.shape[1]
    s = np.zeros(c, dtype=np.float64)
    q = np.zeros(c, dtype=np.float64)
    cdef double[::1] sv = s, qv = q
    with nogil:
        mt_channel_stats(&x[0, 0], m, c, &sv[0], &qv[0])
    return s, q


def scale_shift(const float[:, ::1] x, const float[::1] scale, const float[::1] shift,
                bint relu):
    cdef long m = x.shape[0]
    cdef int c = x.shape[1]
    out = np.empty((m, c), dtype=np.float32)
    cdef float[:, ::1] o = out
    with nogil:
        mt_scale_shift(&x[0, 0], m, c, &scale[0], &shift[0], relu, &o[0, 0])
    return out


def bn_backward_reduce(const float[:, ::1] x, const float[:, ::1] y, const float[:, ::1] gy,
                       const float[::1] mean, const float[::1] invstd, bint relu):
    cdef long m = x.shape[0]
    cdef int c = x.shape[1]
    db = np.zeros(c, dtype=np.float64)
    dg = np.zeros(c, dtype=np.float64)
    cdef double[::1] dbv = db, dgv = dg
    with nogil:
        mt_bn_backward_reduce(&x[0, 0], &y[0, 0], &gy[0, 0], m, c, &mean[0], &invstd[0],
                              relu, &dbv[0], &dgv[0])
    return db, dg


def bn_backward_apply(const float[:, ::1] x, const float[:, ::1] y, const float[:, ::1] gy,
                      const float[::1] mean, const float[::1] invstd, const float[::1] coef,
                      const float[::1] mbeta, const float[::1] mgamma, bint relu):
    cdef long m = x.shape[0]
    cdef int c = x.shape[1]
    dx = np.empty((m, c), dtype=np.float32)
    cdef float[:, ::1] d = dx
    with nogil:
        mt_bn_backward_apply(&x[0, 0], &y[0, 0], &gy[0, 0], m, c, &mean[0], &invstd[0],
                             &coef[0], &mbeta[0], &mgamma[0], relu, &d[0, 0])
    return dx


def maxpool2_forward(const float[:, :, ::1] x):
    cdef int rows = x.shape[0], width = x.shape[1], c = x.shape[2]
    if rows % 2 or width % 2:
        raise ValueError("max-pool needs even height and width")
    out = np.empty((rows // 2, width // 2, c), dtype=np.float32)
    idx = np.empty((rows // 2, width // 2, c), dtype=np.uint8)
    cdef float[:, :, ::1] o = out
    cdef unsigned char[:, :, ::1] ix = idx
    with nogil:
        mt_maxpool2_forward(&x[0, 0, 0], rows, width, c, &o[0, 0, 0], &ix[0, 0, 0])
    return out, idx


def maxpool2_backward(const float[:, :, ::1] g, const unsigned char[:, :, ::1] idx):
    cdef int rows = 2 * g.shape[0], width = 2 * g.shape[1], c = g.shape[2]
    dx = np.empty((rows, width, c), dtype=np.float32)
    cdef float[:, :, ::1] d = dx
    with nogil:
        mt_maxpool2_backward(&g[0, 0, 0], &idx[0, 0, 0], rows, width, c, &d[0, 0, 0])
    return dx


def label8(const unsigned char[:, ::1] mask):
    cdef int h = mask.shape[0], w = mask.shape[1]
    labels = np.empty((h, w), dtype=np.int32)
    cdef int[:, ::1] lv = labels
    cdef long count
    with nogil:
        count = mt_label8(&mask[0, 0], h, w, &lv[0, 0])
    return labels, int(count)
