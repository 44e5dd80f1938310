// Timing comparison of the serial reference kernels against the
// OpenMP-parallel versions, plus the full denoiser forward with parallelism
// toggled.

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "entmap/denoiser.hpp"
#include "entmap/kernels.hpp"
#include "entmap/rng.hpp"

using namespace entmap;

namespace {

double time_ms(const std::function<void()>& fn, int iters) {
    fn();  // warmup
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; i++) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

std::vector<double> randvec(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

void row(const char* name, double serial_ms, double parallel_ms) {
    std::printf("%-28s %10.4f %10.4f %9.2fx\n", name, serial_ms, parallel_ms,
                serial_ms / parallel_ms);
}

}  // namespace

int main() {
    Rng rng(7);
    std::printf("%-28s %10s %10s %9s\n", "kernel", "ref ms", "omp ms", "speedup");

    {
        int m = 256, k = 64, n = 64;
        auto a = randvec((size_t)m * k, rng), b = randvec((size_t)k * n, rng);
        std::vector<double> c((size_t)m * n);
        double s = time_ms([&] { ref::matmul(c.data(), a.data(), b.data(), m, k, n); }, 200);
        double p = time_ms([&] { kernels::matmul(c.data(), a.data(), b.data(), m, k, n); }, 200);
        row("matmul 256x64x64", s, p);
    }
    {
        int h = 16, w = 16, cin = 16, cout = 16;
        auto in = randvec((size_t)h * w * cin, rng);
        auto wt = randvec((size_t)cout * cin * 9, rng);
        auto bias = randvec(cout, rng);
        std::vector<double> out((size_t)h * w * cout);
        double s = time_ms(
            [&] { ref::conv2d3x3(out.data(), in.data(), wt.data(), bias.data(), h, w, cin, cout); },
            200);
        double p = time_ms(
            [&] {
                kernels::conv2d3x3(out.data(), in.data(), wt.data(), bias.data(), h, w, cin, cout);
            },
            200);
        row("conv3x3 16x16x16->16", s, p);
    }
    {
        int npix = 256, ntok = 3, heads = 2, d = 8;
        auto q = randvec((size_t)npix * heads * d, rng);
        auto k = randvec((size_t)ntok * heads * d, rng);
        std::vector<double> sc((size_t)heads * npix * ntok);
        double s =
            time_ms([&] { ref::attn_scores(sc.data(), q.data(), k.data(), npix, ntok, heads, d); },
                    500);
        double p = time_ms(
            [&] { kernels::attn_scores(sc.data(), q.data(), k.data(), npix, ntok, heads, d); },
            500);
        row("attn_scores 256px 3tok", s, p);
    }
    {
        int rows = 512, cols = 3;
        auto x = randvec((size_t)rows * cols, rng);
        std::vector<double> y(x.size());
        double s = time_ms([&] { ref::softmax_rows(y.data(), x.data(), rows, cols); }, 500);
        double p = time_ms([&] { kernels::softmax_rows(y.data(), x.data(), rows, cols); }, 500);
        row("softmax 512x3", s, p);
    }
    {
        auto src = randvec(8 * 8, rng);
        std::vector<double> dst(16 * 16);
        double s = time_ms([&] { ref::bilinear_resize(dst.data(), src.data(), 8, 8, 16, 16); },
                           1000);
        double p =
            time_ms([&] { kernels::bilinear_resize(dst.data(), src.data(), 8, 8, 16, 16); }, 1000);
        row("resize 8x8 -> 16x16", s, p);
    }
    {
        ModelConfig mc;
        Denoiser model = Denoiser::init(mc, 5);
        Rng zr(11);
        LatentState z = make_noise_latent(16, 16, 3, 10, zr);
        PromptEmbedding p = model.text.encode({7, 1, 4});
        set_parallel(false);
        double s = time_ms([&] { model.forward_plain(z, p, 9); }, 20);
        set_parallel(true);
        double par = time_ms([&] { model.forward_plain(z, p, 9); }, 20);
        row("denoiser forward 16x16", s, par);
    }
    return 0;
}
