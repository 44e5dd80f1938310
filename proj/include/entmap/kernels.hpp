#pragma once

#include <cstddef>

// Dense compute kernels. kernels:: holds the OpenMP-parallel versions used by
// the tape engine; ref:: holds plain serial loops with identical semantics,
// kept as the comparison baseline for tests and the benchmark. Both variants
// perform the per-element arithmetic in the same order, so results are
// bit-identical.
//
// Layouts (row-major throughout):
//   images / latents     [H][W][C]
//   matrices             [rows][cols]
//   conv weights         [Cout][Cin][3][3]
//   attention queries    [npix][heads*d]
//   attention keys/vals  [ntok][heads*d]
//   attention scores     [heads*npix][ntok]

namespace entmap {

bool parallel_enabled();
void set_parallel(bool on);

namespace kernels {

void matmul(double* c, const double* a, const double* b, int m, int k, int n);
void matmul_grad_a(double* da, const double* dc, const double* b, int m, int k, int n);
void matmul_grad_b(double* db, const double* dc, const double* a, int m, int k, int n);

void conv2d3x3(double* out, const double* in, const double* w, const double* bias,
               int h, int wpix, int cin, int cout);
void conv2d3x3_grad_input(double* din, const double* dout, const double* w,
                          int h, int wpix, int cin, int cout);
void conv2d3x3_grad_weights(double* dw, double* dbias, const double* in, const double* dout,
                            int h, int wpix, int cin, int cout);

void softmax_rows(double* y, const double* x, int rows, int cols);
void softmax_rows_backward(double* dx, const double* y, const double* dy, int rows, int cols);

void attn_scores(double* s, const double* q, const double* k,
                 int npix, int ntok, int heads, int d);
void attn_scores_grad_q(double* dq, const double* ds, const double* k,
                        int npix, int ntok, int heads, int d);
void attn_scores_grad_k(double* dk, const double* ds, const double* q,
                        int npix, int ntok, int heads, int d);

void attn_apply(double* o, const double* a, const double* v,
                int npix, int ntok, int heads, int d);
void attn_apply_grad_a(double* da, const double* dout, const double* v,
                       int npix, int ntok, int heads, int d);
void attn_apply_grad_v(double* dv, const double* dout, const double* a,
                       int npix, int ntok, int heads, int d);

// Pixel-center-aligned bilinear interpolation, single channel.
// src coordinate = (dst + 0.5) * scale - 0.5, clamped to the valid range.
void bilinear_resize(double* dst, const double* src, int sw, int sh, int dw, int dh);
void bilinear_resize_backward(double* dsrc, const double* ddst, int sw, int sh, int dw, int dh);

void avgpool2(double* out, const double* in, int h, int w, int c);
void avgpool2_backward(double* din, const double* dout, int h, int w, int c);
void upsample_nearest2(double* out, const double* in, int h, int w, int c);
void upsample_nearest2_backward(double* din, const double* dout, int h, int w, int c);

}  // namespace kernels

namespace ref {

void matmul(double* c, const double* a, const double* b, int m, int k, int n);
void conv2d3x3(double* out, const double* in, const double* w, const double* bias,
               int h, int wpix, int cin, int cout);
void softmax_rows(double* y, const double* x, int rows, int cols);
void attn_scores(double* s, const double* q, const double* k,
                 int npix, int ntok, int heads, int d);
void attn_apply(double* o, const double* a, const double* v,
                int npix, int ntok, int heads, int d);
void bilinear_resize(double* dst, const double* src, int sw, int sh, int dw, int dh);
void avgpool2(double* out, const double* in, int h, int w, int c);
void upsample_nearest2(double* out, const double* in, int h, int w, int c);

}  // namespace ref

}  // namespace entmap
