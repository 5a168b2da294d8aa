#ifndef MANGOTREE_KERNELS_H
#define MANGOTREE_KERNELS_H

void mt_conv_forward(const float *x, int hp, int wp, int cin, const float *w, int n,
                     int cout, const float *bias, float *out);
void mt_conv_wgrad(const float *x, int hp, int wp, int cin, const float *g, int n,
                   int cout, float *dw);
void mt_channel_stats(const float *x, long m, int c, double *sum, double *sumsq);
void mt_scale_shift(const float *x, long m, int c, const float *scale, const float *shift,
                    int relu, float *out);
void mt_bn_backward_reduce(const float *x, const float *y, const float *gy, long m, int c,
                           const float *mean, const float *invstd, int relu,
                           double *dbeta, double *dgamma);
void mt_bn_backward_apply(const float *x, const float *y, const float *gy, long m, int c,
                          const float *mean, const float *invstd, const float *coef,
                          const float *mbeta, const float *mgamma, int relu, float *dx);
void mt_maxpool2_forward(const float *x, int rows, int width, int c, float *out,
                         unsigned char *idx);
void mt_maxpool2_backward(const float *g, const unsigned char *idx, int rows, int width,
                          int c, float *dx);
long mt_label8(const unsigned char *mask, int h, int w, int *labels);

#endif
