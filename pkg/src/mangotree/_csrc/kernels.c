/*
 * Hot loops for the compiled backend. All tensors are float32, C-contiguous,
 * laid out (h, w, c) per example. Channel-vector loops use GCC vector
 * extensions so the same source lowers to AVX-512, AVX2 or SSE.
 */
#include <string.h>
#include <stdlib.h>
#include "kernels.h"

typedef float v16 __attribute__((vector_size(64)));
typedef float v16u __attribute__((vector_size(64), aligned(4)));

#ifdef __AVX512F__
#define PIX_BLOCK 15
#define CIN_BLOCK 14
#else
/* 16 ymm registers: keep accumulators to 2 * 6 */
#define PIX_BLOCK 6
#define CIN_BLOCK 6
#endif

#define LOADV(p) (*(const v16u *)(p))
#define STOREV(p, v) (*(v16u *)(p) = (v))

/* One row segment of <= PIX_BLOCK output pixels for 16 output channels.
   CIN is a literal in the specialized copies so broadcast offsets fold to
   constants; the generic copy passes the runtime value. */
#define DEFINE_CONV_BLOCK(NAME, CIN)                                                   \
    static inline void NAME(const float *x, int wp, int cin_rt, const float *w, int n, \
                            int cout, int oc0, int r, int c0, int pb,                  \
                            const float *bias, float *out, int width)                  \
    {                                                                                  \
        const int cin = (CIN) ? (CIN) : cin_rt;                                        \
        v16 acc[PIX_BLOCK];                                                            \
        v16 bv = LOADV(bias + oc0);                                                    \
        for (int p = 0; p < PIX_BLOCK; p++)                                            \
            acc[p] = bv;                                                               \
        for (int kh = 0; kh < n; kh++) {                                               \
            for (int kw = 0; kw < n; kw++) {                                           \
                const float *xr = x + ((size_t)(r + kh) * wp + c0 + kw) * cin;         \
                const float *wr = w + ((size_t)(kh * n + kw) * cin) * cout + oc0;      \
                if (pb == PIX_BLOCK) {                                                 \
                    for (int ci = 0; ci < cin; ci++) {                                 \
                        v16 wv = LOADV(wr + (size_t)ci * cout);                        \
                        const float *xc = xr + ci;                                     \
                        _Pragma("GCC unroll 16")                                       \
                        for (int p = 0; p < PIX_BLOCK; p++)                            \
                            acc[p] += xc[p * cin] * wv;                                \
                    }                                                                  \
                } else {                                                               \
                    for (int ci = 0; ci < cin; ci++) {                                 \
                        v16 wv = LOADV(wr + (size_t)ci * cout);                        \
                        for (int p = 0; p < pb; p++)                                   \
                            acc[p] += xr[p * cin + ci] * wv;                           \
                    }                                                                  \
                }                                                                      \
            }                                                                          \
        }                                                                              \
        for (int p = 0; p < pb; p++)                                                   \
            STOREV(out + ((size_t)r * width + c0 + p) * cout + oc0, acc[p]);           \
    }

DEFINE_CONV_BLOCK(conv_block_any, 0)
DEFINE_CONV_BLOCK(conv_block_3, 3)
DEFINE_CONV_BLOCK(conv_block_8, 8)
DEFINE_CONV_BLOCK(conv_block_16, 16)
DEFINE_CONV_BLOCK(conv_block_32, 32)
DEFINE_CONV_BLOCK(conv_block_64, 64)
DEFINE_CONV_BLOCK(conv_block_128, 128)

typedef void (*conv_block_fn)(const float *, int, int, const float *, int, int, int, int,
                              int, int, const float *, float *, int);

void mt_conv_forward(const float *x, int hp, int wp, int cin, const float *w, int n,
                     int cout, const float *bias, float *out)
{
    int h = hp - n + 1, width = wp - n + 1;
    conv_block_fn blk = conv_block_any;
    switch (cin) {
    case 3: blk = conv_block_3; break;
    case 8: blk = conv_block_8; break;
    case 16: blk = conv_block_16; break;
    case 32: blk = conv_block_32; break;
    case 64: blk = conv_block_64; break;
    case 128: blk = conv_block_128; break;
    }
    for (int r = 0; r < h; r++)
        for (int c0 = 0; c0 < width; c0 += PIX_BLOCK) {
            int pb = width - c0 < PIX_BLOCK ? width - c0 : PIX_BLOCK;
            for (int oc0 = 0; oc0 < cout; oc0 += 16)
                blk(x, wp, cin, w, n, cout, oc0, r, c0, pb, bias, out, width);
        }
}

void mt_conv_wgrad(const float *x, int hp, int wp, int cin, const float *g, int n,
                   int cout, float *dw)
{
    int h = hp - n + 1, width = wp - n + 1;
    v16 acc[CIN_BLOCK];
    for (int r = 0; r < h; r++) {
        const float *grow = g + (size_t)r * width * cout;
        for (int kh = 0; kh < n; kh++) {
            const float *xrow = x + (size_t)(r + kh) * wp * cin;
            for (int kw = 0; kw < n; kw++) {
                for (int ci0 = 0; ci0 < cin; ci0 += CIN_BLOCK) {
                    int cb = cin - ci0 < CIN_BLOCK ? cin - ci0 : CIN_BLOCK;
                    for (int oc0 = 0; oc0 < cout; oc0 += 16) {
                        float *dwp = dw + ((size_t)(kh * n + kw) * cin + ci0) * cout + oc0;
                        for (int j = 0; j < cb; j++)
                            acc[j] = LOADV(dwp + (size_t)j * cout);
                        const float *xp = xrow + (size_t)kw * cin + ci0;
                        if (cb == CIN_BLOCK) {
                            for (int c = 0; c < width; c++) {
                                v16 gv = LOADV(grow + (size_t)c * cout + oc0);
                                const float *xc = xp + (size_t)c * cin;
#pragma GCC unroll 16
                                for (int j = 0; j < CIN_BLOCK; j++)
                                    acc[j] += xc[j] * gv;
                            }
                        } else {
                            for (int c = 0; c < width; c++) {
                                v16 gv = LOADV(grow + (size_t)c * cout + oc0);
                                const float *xc = xp + (size_t)c * cin;
                                for (int j = 0; j < cb; j++)
                                    acc[j] += xc[j] * gv;
                            }
                        }
                        for (int j = 0; j < cb; j++)
                            STOREV(dwp + (size_t)j * cout, acc[j]);
                    }
                }
            }
        }
    }
}

void mt_channel_stats(const float *x, long m, int c, double *sum, double *sumsq)
{
    /* per-row float partials keep the inner loop vectorized; rows fold into doubles */
    float *ps = calloc((size_t)c, sizeof(float));
    float *pq = calloc((size_t)c, sizeof(float));
    const long chunk = 64;
    for (long i0 = 0; i0 < m; i0 += chunk) {
        long i1 = i0 + chunk < m ? i0 + chunk : m;
        memset(ps, 0, (size_t)c * sizeof(float));
        memset(pq, 0, (size_t)c * sizeof(float));
        for (long i = i0; i < i1; i++) {
            const float *row = x + (size_t)i * c;
            for (int k = 0; k < c; k++) {
                ps[k] += row[k];
                pq[k] += row[k] * row[k];
            }
        }
        for (int k = 0; k < c; k++) {
            sum[k] += ps[k];
            sumsq[k] += pq[k];
        }
    }
    free(ps);
    free(pq);
}

void mt_scale_shift(const float *x, long m, int c, const float *scale, const float *shift,
                    int relu, float *out)
{
    for (long i = 0; i < m; i++) {
        const float *row = x + (size_t)i * c;
        float *o = out + (size_t)i * c;
        if (relu) {
            for (int k = 0; k < c; k++) {
                float v = row[k] * scale[k] + shift[k];
                o[k] = v > 0.0f ? v : 0.0f;
            }
        } else {
            for (int k = 0; k < c; k++)
                o[k] = row[k] * scale[k] + shift[k];
        }
    }
}

void mt_bn_backward_reduce(const float *x, const float *y, const float *gy, long m, int c,
                           const float *mean, const float *invstd, int relu,
                           double *dbeta, double *dgamma)
{
    float *pb = calloc((size_t)c, sizeof(float));
    float *pg = calloc((size_t)c, sizeof(float));
    const long chunk = 64;
    for (long i0 = 0; i0 < m; i0 += chunk) {
        long i1 = i0 + chunk < m ? i0 + chunk : m;
        memset(pb, 0, (size_t)c * sizeof(float));
        memset(pg, 0, (size_t)c * sizeof(float));
        for (long i = i0; i < i1; i++) {
            const float *xr = x + (size_t)i * c;
            const float *yr = y + (size_t)i * c;
            const float *gr = gy + (size_t)i * c;
            for (int k = 0; k < c; k++) {
                float g = (relu && !(yr[k] > 0.0f)) ? 0.0f : gr[k];
                pb[k] += g;
                pg[k] += g * (xr[k] - mean[k]) * invstd[k];
            }
        }
        for (int k = 0; k < c; k++) {
            dbeta[k] += pb[k];
            dgamma[k] += pg[k];
        }
    }
    free(pb);
    free(pg);
}

void mt_bn_backward_apply(const float *x, const float *y, const float *gy, long m, int c,
                          const float *mean, const float *invstd, const float *coef,
                          const float *mbeta, const float *mgamma, int relu, float *dx)
{
    /* dx = coef * (g - mbeta - xhat * mgamma), coef = gamma * invstd */
    for (long i = 0; i < m; i++) {
        const float *xr = x + (size_t)i * c;
        const float *yr = y + (size_t)i * c;
        const float *gr = gy + (size_t)i * c;
        float *o = dx + (size_t)i * c;
        for (int k = 0; k < c; k++) {
            float g = (relu && !(yr[k] > 0.0f)) ? 0.0f : gr[k];
            float xhat = (xr[k] - mean[k]) * invstd[k];
            o[k] = coef[k] * (g - mbeta[k] - xhat * mgamma[k]);
        }
    }
}

void mt_maxpool2_forward(const float *x, int rows, int width, int c, float *out,
                         unsigned char *idx)
{
    int ow = width / 2;
    for (int r = 0; r < rows / 2; r++) {
        const float *top = x + (size_t)(2 * r) * width * c;
        const float *bot = top + (size_t)width * c;
        float *o = out + (size_t)r * ow * c;
        unsigned char *ix = idx + (size_t)r * ow * c;
        for (int q = 0; q < ow; q++) {
            const float *a = top + (size_t)(2 * q) * c;
            const float *b = a + c;
            const float *d = bot + (size_t)(2 * q) * c;
            const float *e = d + c;
            for (int k = 0; k < c; k++) {
                /* first maximum in row-major window order wins */
                float best = a[k];
                unsigned char bi = 0;
                if (b[k] > best) { best = b[k]; bi = 1; }
                if (d[k] > best) { best = d[k]; bi = 2; }
                if (e[k] > best) { best = e[k]; bi = 3; }
                o[(size_t)q * c + k] = best;
                ix[(size_t)q * c + k] = bi;
            }
        }
    }
}

void mt_maxpool2_backward(const float *g, const unsigned char *idx, int rows, int width,
                          int c, float *dx)
{
    int ow = width / 2;
    memset(dx, 0, (size_t)rows * width * c * sizeof(float));
    for (int r = 0; r < rows / 2; r++) {
        for (int q = 0; q < ow; q++) {
            size_t o = ((size_t)r * ow + q) * c;
            for (int k = 0; k < c; k++) {
                unsigned char bi = idx[o + k];
                int rr = 2 * r + (bi >> 1), cc = 2 * q + (bi & 1);
                dx[((size_t)rr * width + cc) * c + k] = g[o + k];
            }
        }
    }
}

static int uf_find(int *parent, int a)
{
    while (parent[a] != a) {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    return a;
}

static void uf_union(int *parent, int a, int b)
{
    a = uf_find(parent, a);
    b = uf_find(parent, b);
    if (a < b)
        parent[b] = a;
    else if (b < a)
        parent[a] = b;
}

long mt_label8(const unsigned char *mask, int h, int w, int *labels)
{
    /* provisional labels are created in row-major order; parent always points
       to a smaller label, so roots are the first-seen label of each component */
    long cap = (long)h * w / 2 + 2;
    int *parent = malloc((size_t)cap * sizeof(int));
    int next = 1;
    parent[0] = 0;
    for (int r = 0; r < h; r++) {
        for (int c = 0; c < w; c++) {
            size_t i = (size_t)r * w + c;
            if (!mask[i]) {
                labels[i] = 0;
                continue;
            }
            int best = 0;
            int nb[4];
            int k = 0;
            if (c > 0 && labels[i - 1]) nb[k++] = labels[i - 1];
            if (r > 0) {
                size_t up = i - w;
                if (c > 0 && labels[up - 1]) nb[k++] = labels[up - 1];
                if (labels[up]) nb[k++] = labels[up];
                if (c + 1 < w && labels[up + 1]) nb[k++] = labels[up + 1];
            }
            for (int j = 0; j < k; j++)
                if (best == 0 || nb[j] < best) best = nb[j];
            if (best == 0) {
                if (next >= cap) {
                    cap *= 2;
                    parent = realloc(parent, (size_t)cap * sizeof(int));
                }
                parent[next] = next;
                best = next++;
            } else {
                for (int j = 0; j < k; j++)
                    uf_union(parent, best, nb[j]);
            }
            labels[i] = best;
        }
    }
    int *final = calloc((size_t)next, sizeof(int));
    long count = 0;
    for (int a = 1; a < next; a++) {
        int root = uf_find(parent, a);
        if (root == a)
            final[a] = (int)++count;
    }
    for (int a = 1; a < next; a++)
        final[a] = final[uf_find(parent, a)];
    size_t total = (size_t)h * w;
    for (size_t i = 0; i < total; i++)
        labels[i] = final[labels[i]];
    free(final);
    free(parent);
    return count;
}
