#include "entmap/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace entmap {

namespace {
std::atomic<bool> g_parallel{true};

inline bool par() { return g_parallel.load(std::memory_order_relaxed) && !omp_in_parallel(); }

struct Lerp {
    int lo, hi;
    double whi;  // weight of hi sample; lo gets 1-whi
};

inline Lerp lerp_coord(int dst, int dsize, int ssize) {
    double scale = (double)ssize / (double)dsize;
    double s = ((double)dst + 0.5) * scale - 0.5;
    if (s < 0.0) s = 0.0;
    double smax = (double)(ssize - 1);
    if (s > smax) s = smax;
    int lo = (int)s;
    int hi = std::min(lo + 1, ssize - 1);
    return {lo, hi, s - (double)lo};
}
}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

// ============================================================================
// matmul
// ============================================================================

namespace kernels {

void matmul(double* c, const double* a, const double* b, int m, int k, int n) {
    #pragma omp parallel for if(par())
    for (int i = 0; i < m; i++) {
        for (int j = 0; j < n; j++) {
            double acc = 0.0;
            for (int p = 0; p < k; p++) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

// da[m x k] += dc[m x n] * b^T
void matmul_grad_a(double* da, const double* dc, const double* b, int m, int k, int n) {
    #pragma omp parallel for if(par())
    for (int i = 0; i < m; i++) {
        for (int p = 0; p < k; p++) {
            double acc = 0.0;
            for (int j = 0; j < n; j++) acc += dc[i * n + j] * b[p * n + j];
            da[i * k + p] += acc;
        }
    }
}

// db[k x n] += a^T * dc
void matmul_grad_b(double* db, const double* dc, const double* a, int m, int k, int n) {
    #pragma omp parallel for if(par())
    for (int p = 0; p < k; p++) {
        for (int j = 0; j < n; j++) {
            double acc = 0.0;
            for (int i = 0; i < m; i++) acc += a[i * k + p] * dc[i * n + j];
            db[p * n + j] += acc;
        }
    }
}

// ============================================================================
// 3x3 convolution, stride 1, zero padding 1
// ============================================================================

void conv2d3x3(double* out, const double* in, const double* w, const double* bias,
               int h, int wpix, int cin, int cout) {
    #pragma omp parallel for if(par())
    for (int y = 0; y < h; y++) {
        for (int x = 0; x < wpix; x++) {
            for (int oc = 0; oc < cout; oc++) {
                double acc = bias ? bias[oc] : 0.0;
                for (int ic = 0; ic < cin; ic++) {
                    for (int ky = 0; ky < 3; ky++) {
                        int sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (int kx = 0; kx < 3; kx++) {
                            int sx = x + kx - 1;
                            if (sx < 0 || sx >= wpix) continue;
                            acc += in[(sy * wpix + sx) * cin + ic] *
                                   w[((oc * cin + ic) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                out[(y * wpix + x) * cout + oc] = acc;
            }
        }
    }
}

void conv2d3x3_grad_input(double* din, const double* dout, const double* w,
                          int h, int wpix, int cin, int cout) {
    #pragma omp parallel for if(par())
    for (int y = 0; y < h; y++) {
        for (int x = 0; x < wpix; x++) {
            for (int ic = 0; ic < cin; ic++) {
                double acc = 0.0;
                for (int oc = 0; oc < cout; oc++) {
                    for (int ky = 0; ky < 3; ky++) {
                        int oy = y - (ky - 1);
                        if (oy < 0 || oy >= h) continue;
                        for (int kx = 0; kx < 3; kx++) {
                            int ox = x - (kx - 1);
                            if (ox < 0 || ox >= wpix) continue;
                            acc += dout[(oy * wpix + ox) * cout + oc] *
                                   w[((oc * cin + ic) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                din[(y * wpix + x) * cin + ic] += acc;
            }
        }
    }
}

void conv2d3x3_grad_weights(double* dw, double* dbias, const double* in, const double* dout,
                            int h, int wpix, int cin, int cout) {
    #pragma omp parallel for if(par())
    for (int oc = 0; oc < cout; oc++) {
        for (int ic = 0; ic < cin; ic++) {
            for (int ky = 0; ky < 3; ky++) {
                for (int kx = 0; kx < 3; kx++) {
                    double acc = 0.0;
                    for (int y = 0; y < h; y++) {
                        int sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (int x = 0; x < wpix; x++) {
                            int sx = x + kx - 1;
                            if (sx < 0 || sx >= wpix) continue;
                            acc += in[(sy * wpix + sx) * cin + ic] *
                                   dout[(y * wpix + x) * cout + oc];
                        }
                    }
                    dw[((oc * cin + ic) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
        if (dbias) {
            double acc = 0.0;
            for (int p = 0; p < h * wpix; p++) acc += dout[p * cout + oc];
            dbias[oc] += acc;
        }
    }
}

// ============================================================================
// softmax over rows
// ============================================================================

void softmax_rows(double* y, const double* x, int rows, int cols) {
    #pragma omp parallel for if(par())
    for (int r = 0; r < rows; r++) {
        const double* xr = x + (size_t)r * cols;
        double* yr = y + (size_t)r * cols;
        double mx = xr[0];
        for (int c = 1; c < cols; c++) mx = std::max(mx, xr[c]);
        double sum = 0.0;
        for (int c = 0; c < cols; c++) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        double inv = 1.0 / sum;
        for (int c = 0; c < cols; c++) yr[c] *= inv;
    }
}

void softmax_rows_backward(double* dx, const double* y, const double* dy, int rows, int cols) {
    #pragma omp parallel for if(par())
    for (int r = 0; r < rows; r++) {
        const double* yr = y + (size_t)r * cols;
        const double* dyr = dy + (size_t)r * cols;
        double* dxr = dx + (size_t)r * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; c++) dot += yr[c] * dyr[c];
        for (int c = 0; c < cols; c++) dxr[c] += yr[c] * (dyr[c] - dot);
    }
}

// ============================================================================
// cross-attention scores / apply
// ============================================================================

void attn_scores(double* s, const double* q, const double* k,
                 int npix, int ntok, int heads, int d) {
    const double inv_sqrt_d = 1.0 / std::sqrt((double)d);
    #pragma omp parallel for collapse(2) if(par())
    for (int hh = 0; hh < heads; hh++) {
        for (int p = 0; p < npix; p++) {
            const double* qp = q + ((size_t)p * heads + hh) * d;
            double* sp = s + ((size_t)hh * npix + p) * ntok;
            for (int w = 0; w < ntok; w++) {
                const double* kw = k + ((size_t)w * heads + hh) * d;
                double acc = 0.0;
                for (int j = 0; j < d; j++) acc += qp[j] * kw[j];
                sp[w] = acc * inv_sqrt_d;
            }
        }
    }
}

void attn_scores_grad_q(double* dq, const double* ds, const double* k,
                        int npix, int ntok, int heads, int d) {
    const double inv_sqrt_d = 1.0 / std::sqrt((double)d);
    #pragma omp parallel for collapse(2) if(par())
    for (int hh = 0; hh < heads; hh++) {
        for (int p = 0; p < npix; p++) {
            const double* dsp = ds + ((size_t)hh * npix + p) * ntok;
            double* dqp = dq + ((size_t)p * heads + hh) * d;
            for (int j = 0; j < d; j++) {
                double acc = 0.0;
                for (int w = 0; w < ntok; w++) acc += dsp[w] * k[((size_t)w * heads + hh) * d + j];
                dqp[j] += acc * inv_sqrt_d;
            }
        }
    }
}

void attn_scores_grad_k(double* dk, const double* ds, const double* q,
                        int npix, int ntok, int heads, int d) {
    const double inv_sqrt_d = 1.0 / std::sqrt((double)d);
    #pragma omp parallel for collapse(2) if(par())
    for (int hh = 0; hh < heads; hh++) {
        for (int w = 0; w < ntok; w++) {
            double* dkw = dk + ((size_t)w * heads + hh) * d;
            for (int j = 0; j < d; j++) {
                double acc = 0.0;
                for (int p = 0; p < npix; p++)
                    acc += ds[((size_t)hh * npix + p) * ntok + w] * q[((size_t)p * heads + hh) * d + j];
                dkw[j] += acc * inv_sqrt_d;
            }
        }
    }
}

void attn_apply(double* o, const double* a, const double* v,
                int npix, int ntok, int heads, int d) {
    #pragma omp parallel for collapse(2) if(par())
    for (int hh = 0; hh < heads; hh++) {
        for (int p = 0; p < npix; p++) {
            const double* ap = a + ((size_t)hh * npix + p) * ntok;
            double* op = o + ((size_t)p * heads + hh) * d;
            for (int j = 0; j < d; j++) {
                double acc = 0.0;
                for (int w = 0; w < ntok; w++) acc += ap[w] * v[((size_t)w * heads + hh) * d + j];
                op[j] = acc;
            }
        }
    }
}

void attn_apply_grad_a(double* da, const double* dout, const double* v,
                       int npix, int ntok, int heads, int d) {
    #pragma omp parallel for collapse(2) if(par())
    for (int hh = 0; hh < heads; hh++) {
        for (int p = 0; p < npix; p++) {
            double* dap = da + ((size_t)hh * npix + p) * ntok;
            const double* dop = dout + ((size_t)p * heads + hh) * d;
            for (int w = 0; w < ntok; w++) {
                const double* vw = v + ((size_t)w * heads + hh) * d;
                double acc = 0.0;
                for (int j = 0; j < d; j++) acc += dop[j] * vw[j];
                dap[w] += acc;
            }
        }
    }
}

void attn_apply_grad_v(double* dv, const double* dout, const double* a,
                       int npix, int ntok, int heads, int d) {
    #pragma omp parallel for collapse(2) if(par())
    for (int hh = 0; hh < heads; hh++) {
        for (int w = 0; w < ntok; w++) {
            double* dvw = dv + ((size_t)w * heads + hh) * d;
            for (int j = 0; j < d; j++) {
                double acc = 0.0;
                for (int p = 0; p < npix; p++)
                    acc += a[((size_t)hh * npix + p) * ntok + w] * dout[((size_t)p * heads + hh) * d + j];
                dvw[j] += acc;
            }
        }
    }
}

// ============================================================================
// bilinear resize (pixel-center alignment)
// ============================================================================

void bilinear_resize(double* dst, const double* src, int sw, int sh, int dw, int dh) {
    if (sw == dw && sh == dh) {
        std::memcpy(dst, src, sizeof(double) * (size_t)sw * sh);
        return;
    }
    #pragma omp parallel for if(par())
    for (int y = 0; y < dh; y++) {
        Lerp ly = lerp_coord(y, dh, sh);
        for (int x = 0; x < dw; x++) {
            Lerp lx = lerp_coord(x, dw, sw);
            double v00 = src[ly.lo * sw + lx.lo];
            double v01 = src[ly.lo * sw + lx.hi];
            double v10 = src[ly.hi * sw + lx.lo];
            double v11 = src[ly.hi * sw + lx.hi];
            double top = v00 + (v01 - v00) * lx.whi;
            double bot = v10 + (v11 - v10) * lx.whi;
            dst[y * dw + x] = top + (bot - top) * ly.whi;
        }
    }
}

// Scatter form; serial so the accumulation order is fixed.
void bilinear_resize_backward(double* dsrc, const double* ddst, int sw, int sh, int dw, int dh) {
    if (sw == dw && sh == dh) {
        for (int i = 0; i < sw * sh; i++) dsrc[i] += ddst[i];
        return;
    }
    for (int y = 0; y < dh; y++) {
        Lerp ly = lerp_coord(y, dh, sh);
        for (int x = 0; x < dw; x++) {
            Lerp lx = lerp_coord(x, dw, sw);
            double g = ddst[y * dw + x];
            dsrc[ly.lo * sw + lx.lo] += g * (1.0 - ly.whi) * (1.0 - lx.whi);
            dsrc[ly.lo * sw + lx.hi] += g * (1.0 - ly.whi) * lx.whi;
            dsrc[ly.hi * sw + lx.lo] += g * ly.whi * (1.0 - lx.whi);
            dsrc[ly.hi * sw + lx.hi] += g * ly.whi * lx.whi;
        }
    }
}

// ============================================================================
// 2x2 average pool / nearest upsample
// ============================================================================

void avgpool2(double* out, const double* in, int h, int w, int c) {
    int oh = h / 2, ow = w / 2;
    #pragma omp parallel for if(par())
    for (int y = 0; y < oh; y++) {
        for (int x = 0; x < ow; x++) {
            for (int ch = 0; ch < c; ch++) {
                double acc = in[((2 * y) * w + 2 * x) * c + ch] +
                             in[((2 * y) * w + 2 * x + 1) * c + ch] +
                             in[((2 * y + 1) * w + 2 * x) * c + ch] +
                             in[((2 * y + 1) * w + 2 * x + 1) * c + ch];
                out[(y * ow + x) * c + ch] = 0.25 * acc;
            }
        }
    }
}

void avgpool2_backward(double* din, const double* dout, int h, int w, int c) {
    int oh = h / 2, ow = w / 2;
    #pragma omp parallel for if(par())
    for (int y = 0; y < h; y++) {
        for (int x = 0; x < w; x++) {
            int oy = y / 2, ox = x / 2;
            if (oy >= oh || ox >= ow) continue;
            for (int ch = 0; ch < c; ch++)
                din[(y * w + x) * c + ch] += 0.25 * dout[(oy * ow + ox) * c + ch];
        }
    }
}

void upsample_nearest2(double* out, const double* in, int h, int w, int c) {
    int oh = h * 2, ow = w * 2;
    #pragma omp parallel for if(par())
    for (int y = 0; y < oh; y++) {
        for (int x = 0; x < ow; x++) {
            for (int ch = 0; ch < c; ch++)
                out[(y * ow + x) * c + ch] = in[((y / 2) * w + x / 2) * c + ch];
        }
    }
}

void upsample_nearest2_backward(double* din, const double* dout, int h, int w, int c) {
    int ow = w * 2;
    #pragma omp parallel for if(par())
    for (int y = 0; y < h; y++) {
        for (int x = 0; x < w; x++) {
            for (int ch = 0; ch < c; ch++) {
                double acc = dout[((2 * y) * ow + 2 * x) * c + ch] +
                             dout[((2 * y) * ow + 2 * x + 1) * c + ch] +
                             dout[((2 * y + 1) * ow + 2 * x) * c + ch] +
                             dout[((2 * y + 1) * ow + 2 * x + 1) * c + ch];
                din[(y * w + x) * c + ch] += acc;
            }
        }
    }
}

}  // namespace kernels

// ============================================================================
// serial reference versions
// ============================================================================

namespace ref {

void matmul(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; i++) {
        for (int j = 0; j < n; j++) {
            double acc = 0.0;
            for (int p = 0; p < k; p++) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

void conv2d3x3(double* out, const double* in, const double* w, const double* bias,
               int h, int wpix, int cin, int cout) {
    for (int y = 0; y < h; y++) {
        for (int x = 0; x < wpix; x++) {
            for (int oc = 0; oc < cout; oc++) {
                double acc = bias ? bias[oc] : 0.0;
                for (int ic = 0; ic < cin; ic++) {
                    for (int ky = 0; ky < 3; ky++) {
                        int sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        for (int kx = 0; kx < 3; kx++) {
                            int sx = x + kx - 1;
                            if (sx < 0 || sx >= wpix) continue;
                            acc += in[(sy * wpix + sx) * cin + ic] *
                                   w[((oc * cin + ic) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                out[(y * wpix + x) * cout + oc] = acc;
            }
        }
    }
}

void softmax_rows(double* y, const double* x, int rows, int cols) {
    for (int r = 0; r < rows; r++) {
        const double* xr = x + (size_t)r * cols;
        double* yr = y + (size_t)r * cols;
        double mx = xr[0];
        for (int c = 1; c < cols; c++) mx = std::max(mx, xr[c]);
        double sum = 0.0;
        for (int c = 0; c < cols; c++) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        double inv = 1.0 / sum;
        for (int c = 0; c < cols; c++) yr[c] *= inv;
    }
}

void attn_scores(double* s, const double* q, const double* k,
                 int npix, int ntok, int heads, int d) {
    const double inv_sqrt_d = 1.0 / std::sqrt((double)d);
    for (int hh = 0; hh < heads; hh++) {
        for (int p = 0; p < npix; p++) {
            for (int w = 0; w < ntok; w++) {
                double acc = 0.0;
                for (int j = 0; j < d; j++)
                    acc += q[((size_t)p * heads + hh) * d + j] * k[((size_t)w * heads + hh) * d + j];
                s[((size_t)hh * npix + p) * ntok + w] = acc * inv_sqrt_d;
            }
        }
    }
}

void attn_apply(double* o, const double* a, const double* v,
                int npix, int ntok, int heads, int d) {
    for (int hh = 0; hh < heads; hh++) {
        for (int p = 0; p < npix; p++) {
            for (int j = 0; j < d; j++) {
                double acc = 0.0;
                for (int w = 0; w < ntok; w++)
                    acc += a[((size_t)hh * npix + p) * ntok + w] * v[((size_t)w * heads + hh) * d + j];
                o[((size_t)p * heads + hh) * d + j] = acc;
            }
        }
    }
}

void bilinear_resize(double* dst, const double* src, int sw, int sh, int dw, int dh) {
    if (sw == dw && sh == dh) {
        std::memcpy(dst, src, sizeof(double) * (size_t)sw * sh);
        return;
    }
    for (int y = 0; y < dh; y++) {
        Lerp ly = lerp_coord(y, dh, sh);
        for (int x = 0; x < dw; x++) {
            Lerp lx = lerp_coord(x, dw, sw);
            double v00 = src[ly.lo * sw + lx.lo];
            double v01 = src[ly.lo * sw + lx.hi];
            double v10 = src[ly.hi * sw + lx.lo];
            double v11 = src[ly.hi * sw + lx.hi];
            double top = v00 + (v01 - v00) * lx.whi;
            double bot = v10 + (v11 - v10) * lx.whi;
            dst[y * dw + x] = top + (bot - top) * ly.whi;
        }
    }
}

void avgpool2(double* out, const double* in, int h, int w, int c) {
    int oh = h / 2, ow = w / 2;
    for (int y = 0; y < oh; y++)
        for (int x = 0; x < ow; x++)
            for (int ch = 0; ch < c; ch++) {
                double acc = in[((2 * y) * w + 2 * x) * c + ch] +
                             in[((2 * y) * w + 2 * x + 1) * c + ch] +
                             in[((2 * y + 1) * w + 2 * x) * c + ch] +
                             in[((2 * y + 1) * w + 2 * x + 1) * c + ch];
                out[(y * ow + x) * c + ch] = 0.25 * acc;
            }
}

void upsample_nearest2(double* out, const double* in, int h, int w, int c) {
    int oh = h * 2, ow = w * 2;
    for (int y = 0; y < oh; y++)
        for (int x = 0; x < ow; x++)
            for (int ch = 0; ch < c; ch++)
                out[(y * ow + x) * c + ch] = in[((y / 2) * w + x / 2) * c + ch];
}

}  // namespace ref

}  // namespace entmap
