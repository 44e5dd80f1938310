#include "entmap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "entmap/kernels.hpp"

namespace entmap {

void Tape::backward(int root) {
    if (!recording_) throw std::logic_error("backward() on a non-recording tape");
    if (nodes_[root]->val.size() != 1) throw std::logic_error("backward root must be scalar");
    for (int i = 0; i <= root; i++) {
        auto& n = *nodes_[i];
        n.grad.assign(n.val.size(), 0.0);
    }
    nodes_[root]->grad[0] = 1.0;
    for (int i = root; i >= 0; i--) {
        if (nodes_[i]->back) nodes_[i]->back();
    }
}

namespace ad {

namespace {
inline size_t len(Tape& t, int x) { return t.val(x).size(); }
}  // namespace

int add(Tape& t, int a, int b) {
    size_t n = len(t, a);
    int y = t.add_node(n);
    const double* pa = t.val(a).data();
    const double* pb = t.val(b).data();
    double* py = t.val(y).data();
    for (size_t i = 0; i < n; i++) py[i] = pa[i] + pb[i];
    t.set_backward(y, [&t, a, b, y, n] {
        for (size_t i = 0; i < n; i++) {
            t.grad(a)[i] += t.grad(y)[i];
            t.grad(b)[i] += t.grad(y)[i];
        }
    });
    return y;
}

int sub(Tape& t, int a, int b) {
    size_t n = len(t, a);
    int y = t.add_node(n);
    for (size_t i = 0; i < n; i++) t.val(y)[i] = t.val(a)[i] - t.val(b)[i];
    t.set_backward(y, [&t, a, b, y, n] {
        for (size_t i = 0; i < n; i++) {
            t.grad(a)[i] += t.grad(y)[i];
            t.grad(b)[i] -= t.grad(y)[i];
        }
    });
    return y;
}

int mul(Tape& t, int a, int b) {
    size_t n = len(t, a);
    int y = t.add_node(n);
    for (size_t i = 0; i < n; i++) t.val(y)[i] = t.val(a)[i] * t.val(b)[i];
    t.set_backward(y, [&t, a, b, y, n] {
        for (size_t i = 0; i < n; i++) {
            t.grad(a)[i] += t.grad(y)[i] * t.val(b)[i];
            t.grad(b)[i] += t.grad(y)[i] * t.val(a)[i];
        }
    });
    return y;
}

int scale_add(Tape& t, int x, double alpha, double beta) {
    size_t n = len(t, x);
    int y = t.add_node(n);
    for (size_t i = 0; i < n; i++) t.val(y)[i] = alpha * t.val(x)[i] + beta;
    t.set_backward(y, [&t, x, y, n, alpha] {
        for (size_t i = 0; i < n; i++) t.grad(x)[i] += alpha * t.grad(y)[i];
    });
    return y;
}

int exp_(Tape& t, int x) {
    size_t n = len(t, x);
    int y = t.add_node(n);
    for (size_t i = 0; i < n; i++) t.val(y)[i] = std::exp(t.val(x)[i]);
    t.set_backward(y, [&t, x, y, n] {
        for (size_t i = 0; i < n; i++) t.grad(x)[i] += t.grad(y)[i] * t.val(y)[i];
    });
    return y;
}

int silu(Tape& t, int x) {
    size_t n = len(t, x);
    int y = t.add_node(n);
    for (size_t i = 0; i < n; i++) {
        double v = t.val(x)[i];
        t.val(y)[i] = v / (1.0 + std::exp(-v));
    }
    t.set_backward(y, [&t, x, y, n] {
        for (size_t i = 0; i < n; i++) {
            double v = t.val(x)[i];
            double s = 1.0 / (1.0 + std::exp(-v));
            t.grad(x)[i] += t.grad(y)[i] * (s + v * s * (1.0 - s));
        }
    });
    return y;
}

int clamp01(Tape& t, int x) {
    size_t n = len(t, x);
    int y = t.add_node(n);
    for (size_t i = 0; i < n; i++) t.val(y)[i] = std::clamp(t.val(x)[i], 0.0, 1.0);
    t.set_backward(y, [&t, x, y, n] {
        for (size_t i = 0; i < n; i++) {
            double v = t.val(x)[i];
            if (v > 0.0 && v < 1.0) t.grad(x)[i] += t.grad(y)[i];
        }
    });
    return y;
}

int add_scalar(Tape& t, int x, int s) {
    size_t n = len(t, x);
    int y = t.add_node(n);
    double sv = t.val(s)[0];
    for (size_t i = 0; i < n; i++) t.val(y)[i] = t.val(x)[i] + sv;
    t.set_backward(y, [&t, x, s, y, n] {
        double acc = 0.0;
        for (size_t i = 0; i < n; i++) {
            t.grad(x)[i] += t.grad(y)[i];
            acc += t.grad(y)[i];
        }
        t.grad(s)[0] += acc;
    });
    return y;
}

int div_scalar(Tape& t, int x, int s) {
    size_t n = len(t, x);
    int y = t.add_node(n);
    double sv = t.val(s)[0];
    for (size_t i = 0; i < n; i++) t.val(y)[i] = t.val(x)[i] / sv;
    t.set_backward(y, [&t, x, s, y, n] {
        double sv2 = t.val(s)[0];
        double acc = 0.0;
        for (size_t i = 0; i < n; i++) {
            t.grad(x)[i] += t.grad(y)[i] / sv2;
            acc += t.grad(y)[i] * t.val(y)[i];
        }
        t.grad(s)[0] -= acc / sv2;
    });
    return y;
}

int logaddexp(Tape& t, int a, int b) {
    size_t n = len(t, a);
    int y = t.add_node(n);
    for (size_t i = 0; i < n; i++) {
        double va = t.val(a)[i], vb = t.val(b)[i];
        double m = std::max(va, vb);
        t.val(y)[i] = m + std::log(std::exp(va - m) + std::exp(vb - m));
    }
    t.set_backward(y, [&t, a, b, y, n] {
        for (size_t i = 0; i < n; i++) {
            double wa = std::exp(t.val(a)[i] - t.val(y)[i]);
            double wb = std::exp(t.val(b)[i] - t.val(y)[i]);
            t.grad(a)[i] += t.grad(y)[i] * wa;
            t.grad(b)[i] += t.grad(y)[i] * wb;
        }
    });
    return y;
}

int sum(Tape& t, int x) {
    size_t n = len(t, x);
    int y = t.add_node(1);
    double acc = 0.0;
    for (size_t i = 0; i < n; i++) acc += t.val(x)[i];
    t.val(y)[0] = acc;
    t.set_backward(y, [&t, x, y, n] {
        double g = t.grad(y)[0];
        for (size_t i = 0; i < n; i++) t.grad(x)[i] += g;
    });
    return y;
}

int logsumexp(Tape& t, int x) {
    size_t n = len(t, x);
    int y = t.add_node(1);
    double m = t.val(x)[0];
    for (size_t i = 1; i < n; i++) m = std::max(m, t.val(x)[i]);
    double acc = 0.0;
    for (size_t i = 0; i < n; i++) acc += std::exp(t.val(x)[i] - m);
    t.val(y)[0] = m + std::log(acc);
    t.set_backward(y, [&t, x, y, n] {
        double g = t.grad(y)[0];
        double lse = t.val(y)[0];
        for (size_t i = 0; i < n; i++) t.grad(x)[i] += g * std::exp(t.val(x)[i] - lse);
    });
    return y;
}

int min_all(Tape& t, int x) {
    size_t n = len(t, x);
    int y = t.add_node(1);
    size_t arg = 0;
    for (size_t i = 1; i < n; i++)
        if (t.val(x)[i] < t.val(x)[arg]) arg = i;
    t.val(y)[0] = t.val(x)[arg];
    t.set_backward(y, [&t, x, y, arg] { t.grad(x)[arg] += t.grad(y)[0]; });
    return y;
}

int max_all(Tape& t, int x) {
    size_t n = len(t, x);
    int y = t.add_node(1);
    size_t arg = 0;
    for (size_t i = 1; i < n; i++)
        if (t.val(x)[i] > t.val(x)[arg]) arg = i;
    t.val(y)[0] = t.val(x)[arg];
    t.set_backward(y, [&t, x, y, arg] { t.grad(x)[arg] += t.grad(y)[0]; });
    return y;
}

int mse_vs(Tape& t, int x, const double* target) {
    size_t n = len(t, x);
    int y = t.add_node(1);
    double acc = 0.0;
    for (size_t i = 0; i < n; i++) {
        double d = t.val(x)[i] - target[i];
        acc += d * d;
    }
    t.val(y)[0] = acc / (double)n;
    t.set_backward(y, [&t, x, y, target, n] {
        double g = t.grad(y)[0] * 2.0 / (double)n;
        for (size_t i = 0; i < n; i++) t.grad(x)[i] += g * (t.val(x)[i] - target[i]);
    });
    return y;
}

int div_ss(Tape& t, int a, int b) {
    int y = t.add_node(1);
    t.val(y)[0] = t.val(a)[0] / t.val(b)[0];
    t.set_backward(y, [&t, a, b, y] {
        double g = t.grad(y)[0];
        double bv = t.val(b)[0];
        t.grad(a)[0] += g / bv;
        t.grad(b)[0] -= g * t.val(y)[0] / bv;
    });
    return y;
}

int matmul(Tape& t, int a, int b, int m, int k, int n) {
    int y = t.add_node((size_t)m * n);
    kernels::matmul(t.val(y).data(), t.val(a).data(), t.val(b).data(), m, k, n);
    t.set_backward(y, [&t, a, b, y, m, k, n] {
        kernels::matmul_grad_a(t.grad(a).data(), t.grad(y).data(), t.val(b).data(), m, k, n);
        kernels::matmul_grad_b(t.grad(b).data(), t.grad(y).data(), t.val(a).data(), m, k, n);
    });
    return y;
}

int add_rowbcast(Tape& t, int x, int r, int rows, int cols) {
    int y = t.add_node((size_t)rows * cols);
    for (int i = 0; i < rows; i++)
        for (int j = 0; j < cols; j++)
            t.val(y)[(size_t)i * cols + j] = t.val(x)[(size_t)i * cols + j] + t.val(r)[j];
    t.set_backward(y, [&t, x, r, y, rows, cols] {
        for (int i = 0; i < rows; i++)
            for (int j = 0; j < cols; j++) {
                double g = t.grad(y)[(size_t)i * cols + j];
                t.grad(x)[(size_t)i * cols + j] += g;
                t.grad(r)[j] += g;
            }
    });
    return y;
}

int conv2d3x3(Tape& t, int x, int w, int b, int h, int wpix, int cin, int cout) {
    int y = t.add_node((size_t)h * wpix * cout);
    kernels::conv2d3x3(t.val(y).data(), t.val(x).data(), t.val(w).data(),
                       b >= 0 ? t.val(b).data() : nullptr, h, wpix, cin, cout);
    t.set_backward(y, [&t, x, w, b, y, h, wpix, cin, cout] {
        kernels::conv2d3x3_grad_input(t.grad(x).data(), t.grad(y).data(), t.val(w).data(),
                                      h, wpix, cin, cout);
        kernels::conv2d3x3_grad_weights(t.grad(w).data(), b >= 0 ? t.grad(b).data() : nullptr,
                                        t.val(x).data(), t.grad(y).data(), h, wpix, cin, cout);
    });
    return y;
}

int softmax_rows(Tape& t, int x, int rows, int cols) {
    int y = t.add_node((size_t)rows * cols);
    kernels::softmax_rows(t.val(y).data(), t.val(x).data(), rows, cols);
    t.set_backward(y, [&t, x, y, rows, cols] {
        kernels::softmax_rows_backward(t.grad(x).data(), t.val(y).data(), t.grad(y).data(),
                                       rows, cols);
    });
    return y;
}

int attn_scores_constk(Tape& t, int q, const double* k, int npix, int ntok, int heads, int d) {
    int y = t.add_node((size_t)heads * npix * ntok);
    kernels::attn_scores(t.val(y).data(), t.val(q).data(), k, npix, ntok, heads, d);
    t.set_backward(y, [&t, q, k, y, npix, ntok, heads, d] {
        kernels::attn_scores_grad_q(t.grad(q).data(), t.grad(y).data(), k, npix, ntok, heads, d);
    });
    return y;
}

int attn_scores(Tape& t, int q, int k, int npix, int ntok, int heads, int d) {
    int y = t.add_node((size_t)heads * npix * ntok);
    kernels::attn_scores(t.val(y).data(), t.val(q).data(), t.val(k).data(), npix, ntok, heads, d);
    t.set_backward(y, [&t, q, k, y, npix, ntok, heads, d] {
        kernels::attn_scores_grad_q(t.grad(q).data(), t.grad(y).data(), t.val(k).data(),
                                    npix, ntok, heads, d);
        kernels::attn_scores_grad_k(t.grad(k).data(), t.grad(y).data(), t.val(q).data(),
                                    npix, ntok, heads, d);
    });
    return y;
}

int attn_apply(Tape& t, int a, int v, int npix, int ntok, int heads, int d) {
    int y = t.add_node((size_t)npix * heads * d);
    kernels::attn_apply(t.val(y).data(), t.val(a).data(), t.val(v).data(), npix, ntok, heads, d);
    t.set_backward(y, [&t, a, v, y, npix, ntok, heads, d] {
        kernels::attn_apply_grad_a(t.grad(a).data(), t.grad(y).data(), t.val(v).data(),
                                   npix, ntok, heads, d);
        kernels::attn_apply_grad_v(t.grad(v).data(), t.grad(y).data(), t.val(a).data(),
                                   npix, ntok, heads, d);
    });
    return y;
}

int token_headsum(Tape& t, int attn, int npix, int ntok, int heads, int tok) {
    int y = t.add_node((size_t)npix);
    for (int p = 0; p < npix; p++) {
        double acc = 0.0;
        for (int h = 0; h < heads; h++) acc += t.val(attn)[((size_t)h * npix + p) * ntok + tok];
        t.val(y)[p] = acc;
    }
    t.set_backward(y, [&t, attn, y, npix, ntok, heads, tok] {
        for (int p = 0; p < npix; p++) {
            double g = t.grad(y)[p];
            for (int h = 0; h < heads; h++)
                t.grad(attn)[((size_t)h * npix + p) * ntok + tok] += g;
        }
    });
    return y;
}

int bilinear_resize(Tape& t, int x, int sw, int sh, int dw, int dh) {
    int y = t.add_node((size_t)dw * dh);
    kernels::bilinear_resize(t.val(y).data(), t.val(x).data(), sw, sh, dw, dh);
    t.set_backward(y, [&t, x, y, sw, sh, dw, dh] {
        kernels::bilinear_resize_backward(t.grad(x).data(), t.grad(y).data(), sw, sh, dw, dh);
    });
    return y;
}

int avgpool2(Tape& t, int x, int h, int w, int c) {
    int y = t.add_node((size_t)(h / 2) * (w / 2) * c);
    kernels::avgpool2(t.val(y).data(), t.val(x).data(), h, w, c);
    t.set_backward(y, [&t, x, y, h, w, c] {
        kernels::avgpool2_backward(t.grad(x).data(), t.grad(y).data(), h, w, c);
    });
    return y;
}

int upsample_nearest2(Tape& t, int x, int h, int w, int c) {
    int y = t.add_node((size_t)(h * 2) * (w * 2) * c);
    kernels::upsample_nearest2(t.val(y).data(), t.val(x).data(), h, w, c);
    t.set_backward(y, [&t, x, y, h, w, c] {
        kernels::upsample_nearest2_backward(t.grad(x).data(), t.grad(y).data(), h, w, c);
    });
    return y;
}

}  // namespace ad

}  // namespace entmap
