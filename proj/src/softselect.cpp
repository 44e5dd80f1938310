#include "entmap/softselect.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace entmap {

std::vector<double> normalize_map(const std::vector<double>& values, bool* degenerate_flag) {
    if (values.empty()) throw std::invalid_argument("normalize_map: empty input");
    double mn = values[0], mx = values[0];
    for (double v : values) {
        if (!std::isfinite(v)) throw std::invalid_argument("normalize_map: non-finite input");
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (degenerate_flag) *degenerate_flag = false;
    std::vector<double> out(values.size());
    if (mx - mn <= 0.0) {
        if (degenerate_flag) *degenerate_flag = true;
        std::fill(out.begin(), out.end(), 0.5);
        return out;
    }
    double inv = 1.0 / (mx - mn);
    for (size_t i = 0; i < values.size(); i++) out[i] = (values[i] - mn) * inv;
    return out;
}

int topk_count_for_quantile(int n, double q) {
    if (n < 2) throw std::invalid_argument("topk_count_for_quantile: need n >= 2");
    int k = n - (int)std::ceil(q * (double)n);
    return std::clamp(k, 1, n - 1);
}

// ============================================================================
// Sinkhorn on the tape
// ============================================================================

namespace {

// Row-marginal residual of the plan implied by (u, v); columns are exact
// right after a column update.
double row_residual(const std::vector<double>& a0, const std::vector<double>& a1,
                    const std::vector<double>& u, double v0, double v1, double tau, int n) {
    double worst = 0.0;
    double target = 1.0 / (double)n;
    for (int i = 0; i < n; i++) {
        double g0 = std::exp(a0[i] + (u[i] + v0) / tau);
        double g1 = std::exp(a1[i] + (u[i] + v1) / tau);
        worst = std::max(worst, std::abs(g0 + g1 - target));
    }
    return worst;
}

}  // namespace

SinkhornNodes sinkhorn_on_tape(Tape& tape, int m_node, int n, int k, double tau,
                               int fixed_iters, double tol) {
    if (!(tau > 0.0)) throw std::invalid_argument("sinkhorn: tau must be positive");
    if (k < 1 || k > n - 1) throw std::invalid_argument("sinkhorn: k must be in [1, n-1]");
    if ((int)tape.val(m_node).size() != n) throw std::invalid_argument("sinkhorn: size mismatch");

    const double nu0 = (double)(n - k) / (double)n;
    const double nu1 = (double)k / (double)n;
    const double log_nu0 = std::log(nu0), log_nu1 = std::log(nu1);
    const double log_mu = std::log(1.0 / (double)n);
    const double inv_tau = 1.0 / tau;

    // a_j = -C_j / tau; C0 = m^2, C1 = (m-1)^2
    int c0 = ad::mul(tape, m_node, m_node);
    int m_minus_1 = ad::scale_add(tape, m_node, 1.0, -1.0);
    int c1 = ad::mul(tape, m_minus_1, m_minus_1);
    int a0 = ad::scale_add(tape, c0, -inv_tau, 0.0);
    int a1 = ad::scale_add(tape, c1, -inv_tau, 0.0);

    int u = tape.add_node(n);  // starts at zero, no backward hook needed
    std::fill(tape.val(u).begin(), tape.val(u).end(), 0.0);
    int v0 = tape.scalar(0.0), v1 = tape.scalar(0.0);

    SinkhornNodes out;
    int it = 0;
    const int max_it = fixed_iters;
    while (it < max_it) {
        // row update: u_i = tau * (log mu - lse_j(a_j + v_j / tau))
        int w0 = ad::add_scalar(tape, a0, ad::scale_add(tape, v0, inv_tau, 0.0));
        int w1 = ad::add_scalar(tape, a1, ad::scale_add(tape, v1, inv_tau, 0.0));
        u = ad::scale_add(tape, ad::logaddexp(tape, w0, w1), -tau, tau * log_mu);
        // column update: v_j = tau * (log nu_j - lse_i(a_j + u_i / tau))
        int us = ad::scale_add(tape, u, inv_tau, 0.0);
        v0 = ad::scale_add(tape, ad::logsumexp(tape, ad::add(tape, a0, us)), -tau,
                           tau * log_nu0);
        v1 = ad::scale_add(tape, ad::logsumexp(tape, ad::add(tape, a1, us)), -tau,
                           tau * log_nu1);
        it++;
        if (!tape.recording() && tol > 0.0) {
            double res = row_residual(tape.val(a0), tape.val(a1), tape.val(u), tape.val(v0)[0],
                                      tape.val(v1)[0], tau, n);
            if (res <= tol) {
                out.converged = true;
                break;
            }
        }
    }

    // gamma1 = exp(a1 + (u + v1)/tau); mask = clamp(n * gamma1)
    int us = ad::scale_add(tape, u, inv_tau, 0.0);
    int g1 = ad::exp_(tape, ad::add_scalar(tape, ad::add(tape, a1, us),
                                           ad::scale_add(tape, v1, inv_tau, 0.0)));
    int mask = ad::clamp01(tape, ad::scale_add(tape, g1, (double)n, 0.0));

    out.mask_node = mask;
    out.gamma1_node = g1;
    out.u_node = u;
    out.v0_node = v0;
    out.v1_node = v1;
    out.iterations_used = it;
    out.marginal_residual = row_residual(tape.val(a0), tape.val(a1), tape.val(u), tape.val(v0)[0],
                                         tape.val(v1)[0], tau, n);
    if (tape.recording() || tol <= 0.0) out.converged = out.marginal_residual <= 1e-4;
    return out;
}

TransportPlan sinkhorn_solve(const TransportProblem& problem, int max_iters, double tol) {
    int n = (int)problem.values.size();
    for (double v : problem.values)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument("sinkhorn_solve: values must lie in [0,1]");

    Tape tape(false);
    int m = tape.leaf(problem.values);
    SinkhornNodes nodes = sinkhorn_on_tape(tape, m, n, problem.k, problem.tau, max_iters, tol);

    TransportPlan plan;
    plan.n = n;
    plan.k = problem.k;
    plan.tau = problem.tau;
    plan.u = tape.val(nodes.u_node);
    plan.v0 = tape.val(nodes.v0_node)[0];
    plan.v1 = tape.val(nodes.v1_node)[0];
    plan.iterations_used = nodes.iterations_used;
    plan.marginal_residual = nodes.marginal_residual;
    plan.converged = nodes.converged;
    plan.gamma.resize((size_t)n * 2);
    const auto& g1 = tape.val(nodes.gamma1_node);
    const double inv_tau = 1.0 / problem.tau;
    for (int i = 0; i < n; i++) {
        double mi = problem.values[i];
        double c0 = mi * mi;
        plan.gamma[(size_t)i * 2] = std::exp(-c0 * inv_tau + (plan.u[i] + plan.v0) * inv_tau);
        plan.gamma[(size_t)i * 2 + 1] = g1[i];
    }
    return plan;
}

SoftMask soft_mask(const TransportPlan& plan) {
    SoftMask m;
    m.k = plan.k;
    m.tau = plan.tau;
    m.values.resize(plan.n);
    for (int i = 0; i < plan.n; i++) {
        double v = (double)plan.n * plan.gamma[(size_t)i * 2 + 1];
        m.values[i] = std::clamp(v, 0.0, 1.0);
    }
    return m;
}

double soft_iou_values(const std::vector<double>& a, const std::vector<double>& b,
                       bool* zero_flag) {
    if (a.size() != b.size()) throw std::invalid_argument("soft_iou: length mismatch");
    if (zero_flag) *zero_flag = false;
    double inter = 0.0, sa = 0.0, sb = 0.0;
    for (size_t i = 0; i < a.size(); i++) {
        inter += a[i] * b[i];
        sa += a[i];
        sb += b[i];
    }
    double denom = sa + sb - inter;
    if (denom == 0.0) {
        if (zero_flag) *zero_flag = true;
        return 0.0;
    }
    return inter / denom;
}

double soft_iou(const SoftMask& a, const SoftMask& b, bool* zero_flag) {
    return soft_iou_values(a.values, b.values, zero_flag);
}

int normalize_on_tape(Tape& tape, int x, bool* degenerate) {
    const auto& v = tape.val(x);
    double mn = v[0], mx = v[0];
    for (double z : v) {
        mn = std::min(mn, z);
        mx = std::max(mx, z);
    }
    if (degenerate) *degenerate = false;
    if (mx - mn <= 0.0) {
        if (degenerate) *degenerate = true;
        int c = tape.add_node(v.size());
        std::fill(tape.val(c).begin(), tape.val(c).end(), 0.5);
        return c;
    }
    int mn_node = ad::min_all(tape, x);
    int mx_node = ad::max_all(tape, x);
    int range = ad::sub(tape, mx_node, mn_node);
    int shifted = ad::add_scalar(tape, x, ad::scale_add(tape, mn_node, -1.0, 0.0));
    return ad::div_scalar(tape, shifted, range);
}

int soft_iou_on_tape(Tape& tape, int mask_a, int mask_b) {
    int inter = ad::sum(tape, ad::mul(tape, mask_a, mask_b));
    int sa = ad::sum(tape, mask_a);
    int sb = ad::sum(tape, mask_b);
    int denom = ad::sub(tape, ad::add(tape, sa, sb), inter);
    return ad::div_ss(tape, inter, denom);
}

SoftIoUGradResult soft_iou_gradient(const std::vector<double>& values_a,
                                    const std::vector<double>& values_b, int k, double tau,
                                    int sinkhorn_iters) {
    if (values_a.size() != values_b.size())
        throw std::invalid_argument("soft_iou_gradient: length mismatch");
    int n = (int)values_a.size();

    Tape tape(true);
    int la = tape.leaf(values_a);
    int lb = tape.leaf(values_b);
    bool dega = false, degb = false;
    int na = normalize_on_tape(tape, la, &dega);
    int nb = normalize_on_tape(tape, lb, &degb);
    SinkhornNodes sa = sinkhorn_on_tape(tape, na, n, k, tau, sinkhorn_iters, 0.0);
    SinkhornNodes sb = sinkhorn_on_tape(tape, nb, n, k, tau, sinkhorn_iters, 0.0);
    int e = soft_iou_on_tape(tape, sa.mask_node, sb.mask_node);

    SoftIoUGradResult out;
    out.energy = tape.val(e)[0];
    out.degenerate_flag = dega || degb;
    tape.backward(e);
    out.grad_a = tape.grad(la);
    out.grad_b = tape.grad(lb);
    return out;
}

}  // namespace entmap
