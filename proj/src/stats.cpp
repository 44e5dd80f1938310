#include "entmap/stats.hpp"

#include <cmath>
#include <stdexcept>

namespace entmap {

double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("mean_of: empty");
    double s = 0.0;
    for (double x : v) s += x;
    return s / (double)v.size();
}

double sample_stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (double)(v.size() - 1));
}

double paired_diff_se(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("paired_diff_se: size mismatch");
    std::vector<double> d(a.size());
    for (size_t i = 0; i < a.size(); i++) d[i] = a[i] - b[i];
    return sample_stddev(d) / std::sqrt((double)d.size());
}

double sign_test_p(int wins, int n) {
    if (n < 0 || wins < 0 || wins > n) throw std::invalid_argument("sign_test_p: bad counts");
    if (n == 0) return 1.0;
    // sum_{k=wins}^{n} C(n,k) / 2^n, accumulated in log space
    double p = 0.0;
    for (int k = wins; k <= n; k++) {
        double logc = std::lgamma((double)n + 1) - std::lgamma((double)k + 1) -
                      std::lgamma((double)(n - k) + 1);
        p += std::exp(logc - (double)n * std::log(2.0));
    }
    return p > 1.0 ? 1.0 : p;
}

}  // namespace entmap
