#pragma once

#include <vector>

#include "entmap/autodiff.hpp"

namespace entmap {

// Differentiable top-k selection posed as an n x 2 entropy-regularized
// transport problem: cost C[i][0] = m_i^2 (unselected), C[i][1] = (m_i - 1)^2
// (selected); row marginals 1/n, column marginals [(n-k)/n, k/n]. The soft
// mask is n * Gamma[:,selected].

struct TransportProblem {
    std::vector<double> values;  // m in [0,1]^n
    int k = 1;
    double tau = 0.1;
};

struct TransportPlan {
    int n = 0;
    int k = 1;
    double tau = 0.1;
    std::vector<double> gamma;  // [n x 2], row-major
    std::vector<double> u;      // log-domain row potentials (length n)
    double v0 = 0.0, v1 = 0.0;  // log-domain column potentials
    int iterations_used = 0;
    double marginal_residual = 0.0;
    bool converged = false;
};

struct SoftMask {
    std::vector<double> values;  // in [0,1], sum ~= k
    int k = 1;
    double tau = 0.1;
    bool degenerate_flag = false;
};

// Min-max normalization to [0,1]. An all-equal map degenerates to a constant
// 0.5 vector with the flag set.
std::vector<double> normalize_map(const std::vector<double>& values, bool* degenerate_flag);

// k matching the selected fraction of a hard quantile mask at threshold q,
// clamped into [1, n-1].
int topk_count_for_quantile(int n, double q);

TransportPlan sinkhorn_solve(const TransportProblem& problem, int max_iters = 200,
                             double tol = 1e-6);

SoftMask soft_mask(const TransportPlan& plan);

// E = sum(a*b) / (sum(a) + sum(b) - sum(a*b)); equals hard IoU on binary
// masks. Both-all-zero inputs return 0 with the flag set.
double soft_iou(const SoftMask& a, const SoftMask& b, bool* zero_flag = nullptr);
double soft_iou_values(const std::vector<double>& a, const std::vector<double>& b,
                       bool* zero_flag = nullptr);

// --- tape variants, shared by the solver and every gradient path ---

// Unrolled Sinkhorn on the tape. With tape.recording(): runs exactly
// fixed_iters iterations (smooth, finite-difference friendly). Without
// recording: stops early once the row-marginal residual drops below tol.
struct SinkhornNodes {
    int mask_node = -1;    // clamped n * Gamma[:,1]
    int gamma1_node = -1;  // selected column of Gamma
    int u_node = -1;
    int v0_node = -1, v1_node = -1;
    int iterations_used = 0;
    double marginal_residual = 0.0;
    bool converged = false;
};

SinkhornNodes sinkhorn_on_tape(Tape& tape, int m_node, int n, int k, double tau,
                               int fixed_iters, double tol);

// Returns the normalized-node id; sets *degenerate when the input is all-equal
// (the node is then a constant 0.5 vector detached from the input).
int normalize_on_tape(Tape& tape, int x, bool* degenerate);

int soft_iou_on_tape(Tape& tape, int mask_a, int mask_b);

struct SoftIoUGradResult {
    double energy = 0.0;
    std::vector<double> grad_a, grad_b;
    bool degenerate_flag = false;
};

// Full pipeline (normalize -> Sinkhorn unroll -> soft mask -> SoftIoU) with
// gradients with respect to both raw input maps.
SoftIoUGradResult soft_iou_gradient(const std::vector<double>& values_a,
                                    const std::vector<double>& values_b, int k, double tau,
                                    int sinkhorn_iters = 60);

}  // namespace entmap
