#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "entmap/attribution.hpp"
#include "entmap/denoiser.hpp"

namespace entmap {

struct GuidanceConfig {
    double gamma = 7.5;         // classifier-free guidance scale
    double energy_scale = 100;  // lambda
    double quantile = 0.7;      // q
    double tau = 0.1;
    SamplerMode sampler = SamplerMode::DDIM;
    uint64_t seed = 0;
    int token_a = -1;  // demographics analog
    int token_b = -1;  // semantics analog
    std::vector<int> prompt;       // P
    std::vector<int> attr_prompt;  // P', must contain token_a and token_b
    int sinkhorn_iters = 60;       // fixed unroll length for the energy term

    void validate() const;
    int index_of_a() const;  // position of token_a in attr_prompt
    int index_of_b() const;
};

struct EnergyStep {
    int t = 0;
    double energy = 0.0;
    double grad_norm = 0.0;
    double ms = 0.0;
};

struct EnergyTrace {
    std::vector<EnergyStep> steps;
    double final_energy = 0.0;
};

// Current-step attribution maps for (token_a, token_b): one conditional
// forward on (z, P) provides the queries, keys come from P'. Maps are summed
// over blocks and heads at this timestep only and resized to the run
// resolution.
std::pair<AttributionMap, AttributionMap> per_step_maps(const Denoiser& model,
                                                        const LatentState& z,
                                                        const GuidanceConfig& config);

struct EnergyResult {
    double energy = 0.0;
    std::vector<double> grad;  // d E / d z, shaped like z
    bool flagged = false;      // degenerate maps or non-finite gradient
};

// E = SoftIoU(SoftTopK(M_a), SoftTopK(M_b)) with the gradient taken through
// the full chain: block queries -> attention -> normalize -> Sinkhorn unroll
// -> SoftIoU. Model weights and attribution keys are constants.
EnergyResult energy(const Denoiser& model, const LatentState& z, const GuidanceConfig& config);

std::vector<double> cfg_combine(const std::vector<double>& eps_un,
                                const std::vector<double>& eps_con, double gamma);

std::vector<double> energy_correct(const std::vector<double>& eps_cfg,
                                   const std::vector<double>& grad, double lambda,
                                   double alpha_bar_t);

struct GuidedRunResult {
    LatentState final_state;
    GenerationTrace trace;
    EnergyTrace energy_trace;
};

GuidedRunResult run_guided_sampling(const Denoiser& model, const NoiseSchedule& schedule,
                                    const GuidanceConfig& config);

struct CfgRunResult {
    LatentState final_state;
    GenerationTrace trace;
};

// Plain classifier-free-guided sampling, no energy term. A guided run with
// lambda = 0 is bit-identical to this.
CfgRunResult sample_cfg(const Denoiser& model, const NoiseSchedule& schedule,
                        const GuidanceConfig& config);

}  // namespace entmap
