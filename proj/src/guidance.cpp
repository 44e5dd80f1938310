#include "entmap/guidance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "entmap/softselect.hpp"

namespace entmap {

void GuidanceConfig::validate() const {
    if (!(gamma >= 0.0)) throw std::invalid_argument("config: gamma must be >= 0");
    if (!(energy_scale >= 0.0)) throw std::invalid_argument("config: lambda must be >= 0");
    if (!(quantile > 0.0 && quantile < 1.0))
        throw std::invalid_argument("config: q must lie in (0,1)");
    if (!(tau > 0.0)) throw std::invalid_argument("config: tau must be positive");
    if (prompt.empty()) throw std::invalid_argument("config: empty generation prompt");
    if (token_a == token_b) throw std::invalid_argument("config: concept tokens must differ");
    index_of_a();
    index_of_b();
}

namespace {
int find_token(const std::vector<int>& prompt, int token, const char* which) {
    for (size_t i = 0; i < prompt.size(); i++)
        if (prompt[i] == token) return (int)i;
    throw std::invalid_argument(std::string("config: token ") + which +
                                " not present in the attribution prompt");
}
}  // namespace

int GuidanceConfig::index_of_a() const { return find_token(attr_prompt, token_a, "a"); }
int GuidanceConfig::index_of_b() const { return find_token(attr_prompt, token_b, "b"); }

// ============================================================================
// per-step maps
// ============================================================================

namespace {

// Attribution-map node for one token: per block, head-summed token slice of
// softmax(Q K'^T / sqrt(d)) against constant P' keys, resized and summed.
// Both tokens share the per-block attention nodes.
struct StepMapNodes {
    int map_a = -1;
    int map_b = -1;
};

StepMapNodes build_step_maps(Tape& tape, const Denoiser& model, const ForwardNodes& fwd,
                             const PromptEmbedding& attr, int idx_a, int idx_b,
                             std::vector<std::vector<double>>& keys_store) {
    const ModelConfig& cfg = model.cfg;
    const int ntok = attr.ntok();
    keys_store.resize(kBlockCount);

    StepMapNodes out;
    for (int b = 0; b < kBlockCount; b++) {
        keys_store[b] = attribution_keys(model, attr, kBlockNames[b]);
        const ForwardNodes::Block& blk = fwd.blocks[b];
        int npix = blk.wpix * blk.hpix;
        int scores = ad::attn_scores_constk(tape, blk.query_node, keys_store[b].data(), npix,
                                            ntok, cfg.heads, cfg.d_attn);
        int attn = ad::softmax_rows(tape, scores, cfg.heads * npix, ntok);
        int slice_a = ad::token_headsum(tape, attn, npix, ntok, cfg.heads, idx_a);
        int slice_b = ad::token_headsum(tape, attn, npix, ntok, cfg.heads, idx_b);
        int ra = ad::bilinear_resize(tape, slice_a, blk.wpix, blk.hpix, cfg.width, cfg.height);
        int rb = ad::bilinear_resize(tape, slice_b, blk.wpix, blk.hpix, cfg.width, cfg.height);
        out.map_a = b == 0 ? ra : ad::add(tape, out.map_a, ra);
        out.map_b = b == 0 ? rb : ad::add(tape, out.map_b, rb);
    }
    return out;
}

struct EnergyGraph {
    int e_node = -1;
    bool degenerate = false;
};

EnergyGraph build_energy_graph(Tape& tape, const Denoiser& model, const ForwardNodes& fwd,
                               const GuidanceConfig& config,
                               std::vector<std::vector<double>>& keys_store) {
    PromptEmbedding attr = model.text.encode(config.attr_prompt);
    StepMapNodes maps = build_step_maps(tape, model, fwd, attr, config.index_of_a(),
                                        config.index_of_b(), keys_store);
    int n = model.cfg.width * model.cfg.height;
    int k = topk_count_for_quantile(n, config.quantile);

    EnergyGraph g;
    bool dega = false, degb = false;
    int na = normalize_on_tape(tape, maps.map_a, &dega);
    int nb = normalize_on_tape(tape, maps.map_b, &degb);
    SinkhornNodes sa = sinkhorn_on_tape(tape, na, n, k, config.tau, config.sinkhorn_iters, 0.0);
    SinkhornNodes sb = sinkhorn_on_tape(tape, nb, n, k, config.tau, config.sinkhorn_iters, 0.0);
    g.e_node = soft_iou_on_tape(tape, sa.mask_node, sb.mask_node);
    g.degenerate = dega || degb;
    return g;
}

}  // namespace

std::pair<AttributionMap, AttributionMap> per_step_maps(const Denoiser& model,
                                                        const LatentState& z,
                                                        const GuidanceConfig& config) {
    if (z.timestep < 1) throw std::invalid_argument("per_step_maps: state must have t >= 1");
    PromptEmbedding p = model.text.encode(config.prompt);
    PromptEmbedding attr = model.text.encode(config.attr_prompt);
    int idx_a = config.index_of_a();
    int idx_b = config.index_of_b();

    DenoiserOutput out = model.forward_plain(z, p, z.timestep - 1);

    auto make_map = [&](int token_index, int token_id) {
        AttributionMap m;
        m.width = model.cfg.width;
        m.height = model.cfg.height;
        m.values.assign((size_t)m.width * m.height, 0.0);
        m.concept_token = token_id;
        m.scope = "all";
        m.timestep_scope = z.timestep;
        std::vector<double> resized(m.values.size());
        for (int b = 0; b < kBlockCount; b++) {
            const AttentionBlockRecord& rec = out.attention_records[b];
            std::vector<double> keys = attribution_keys(model, attr, kBlockNames[b]);
            std::vector<double> map = token_map_from_queries(rec, keys, attr.ntok(), token_index);
            kernels::bilinear_resize(resized.data(), map.data(), rec.width, rec.height, m.width,
                                     m.height);
            for (size_t i = 0; i < m.values.size(); i++) m.values[i] += resized[i];
        }
        return m;
    };

    return {make_map(idx_a, config.token_a), make_map(idx_b, config.token_b)};
}

// ============================================================================
// energy
// ============================================================================

EnergyResult energy(const Denoiser& model, const LatentState& z, const GuidanceConfig& config) {
    config.validate();
    PromptEmbedding p = model.text.encode(config.prompt);
    int level = std::max(z.timestep - 1, 0);

    Tape tape(true);
    int zn = tape.leaf(z.data);
    ForwardNodes fwd = model.forward(tape, zn, p, level);
    std::vector<std::vector<double>> keys_store;
    EnergyGraph g = build_energy_graph(tape, model, fwd, config, keys_store);

    EnergyResult out;
    out.energy = tape.val(g.e_node)[0];
    out.flagged = g.degenerate;
    if (g.degenerate) {
        out.grad.assign(z.data.size(), 0.0);
        return out;
    }
    tape.backward(g.e_node);
    out.grad = tape.grad(zn);
    for (double v : out.grad) {
        if (!std::isfinite(v)) {
            out.grad.assign(z.data.size(), 0.0);
            out.flagged = true;
            break;
        }
    }
    return out;
}

// ============================================================================
// noise combination
// ============================================================================

std::vector<double> cfg_combine(const std::vector<double>& eps_un,
                                const std::vector<double>& eps_con, double gamma) {
    if (eps_un.size() != eps_con.size()) throw std::invalid_argument("cfg_combine: shape mismatch");
    std::vector<double> out(eps_un.size());
    for (size_t i = 0; i < out.size(); i++)
        out[i] = eps_un[i] + gamma * (eps_con[i] - eps_un[i]);
    return out;
}

std::vector<double> energy_correct(const std::vector<double>& eps_cfg,
                                   const std::vector<double>& grad, double lambda,
                                   double alpha_bar_t) {
    if (eps_cfg.size() != grad.size()) throw std::invalid_argument("energy_correct: shape mismatch");
    if (!(lambda >= 0.0)) throw std::invalid_argument("energy_correct: lambda must be >= 0");
    if (!(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0))
        throw std::invalid_argument("energy_correct: alpha_bar outside (0,1]");
    double scale = lambda * std::sqrt(1.0 - alpha_bar_t);
    std::vector<double> out(eps_cfg.size());
    for (size_t i = 0; i < out.size(); i++) out[i] = eps_cfg[i] + scale * grad[i];
    return out;
}

// ============================================================================
// sampling loops
// ============================================================================

namespace {

void record_trace_step(GenerationTrace& trace, const Tape& tape, const ForwardNodes& fwd,
                       const Denoiser& model, int t, int ntok) {
    for (int b = 0; b < kBlockCount; b++) {
        AttentionBlockRecord rec;
        rec.block_id = kBlockNames[b];
        rec.width = fwd.blocks[b].wpix;
        rec.height = fwd.blocks[b].hpix;
        rec.heads = model.cfg.heads;
        rec.d_attn = model.cfg.d_attn;
        rec.ntok = ntok;
        rec.timestep = t;
        rec.attention = tape.val(fwd.blocks[b].attn_node);
        rec.queries = tape.val(fwd.blocks[b].query_node);
        trace.records[(size_t)(t - 1) * kBlockCount + b] = std::move(rec);
    }
}

GenerationTrace make_trace_shell(const Denoiser& model, const NoiseSchedule& sched,
                                 const GuidanceConfig& config) {
    GenerationTrace trace;
    trace.width = model.cfg.width;
    trace.height = model.cfg.height;
    trace.total_steps = sched.total_steps;
    trace.prompt = config.prompt;
    trace.attr_prompt = config.attr_prompt;
    trace.seed = config.seed;
    trace.records.resize((size_t)sched.total_steps * kBlockCount);
    return trace;
}

}  // namespace

GuidedRunResult run_guided_sampling(const Denoiser& model, const NoiseSchedule& schedule,
                                    const GuidanceConfig& config) {
    config.validate();
    const bool guided = config.energy_scale > 0.0;
    PromptEmbedding p = model.text.encode(config.prompt);
    PromptEmbedding null_p = model.text.null_prompt();

    Rng rng(config.seed);
    LatentState z = make_noise_latent(model.cfg.width, model.cfg.height, model.cfg.channels_in,
                                      schedule.total_steps, rng);

    GuidedRunResult out;
    out.trace = make_trace_shell(model, schedule, config);
    out.energy_trace.steps.reserve(schedule.total_steps);

    for (int t = schedule.total_steps; t >= 1; t--) {
        auto t0 = std::chrono::steady_clock::now();
        int level = t - 1;

        Tape un_tape(false);
        ForwardNodes un = model.forward(un_tape, un_tape.leaf(z.data), null_p, level);
        const std::vector<double>& eps_un = un_tape.val(un.eps_node);

        Tape tape(guided);
        int zn = tape.leaf(z.data);
        ForwardNodes fwd = model.forward(tape, zn, p, level);
        record_trace_step(out.trace, tape, fwd, model, t, p.ntok());

        std::vector<std::vector<double>> keys_store;
        EnergyGraph g = build_energy_graph(tape, model, fwd, config, keys_store);
        double e_val = tape.val(g.e_node)[0];

        std::vector<double> eps_final = cfg_combine(eps_un, tape.val(fwd.eps_node), config.gamma);
        double grad_norm = 0.0;
        if (guided) {
            std::vector<double> grad;
            if (g.degenerate) {
                grad.assign(z.data.size(), 0.0);
            } else {
                tape.backward(g.e_node);
                grad = tape.grad(zn);
                for (double v : grad) {
                    if (!std::isfinite(v)) {
                        grad.assign(z.data.size(), 0.0);
                        break;
                    }
                }
            }
            for (double v : grad) grad_norm += v * v;
            grad_norm = std::sqrt(grad_norm);
            eps_final = energy_correct(eps_final, grad, config.energy_scale,
                                       schedule.alpha_bar_at(t));
        }

        z = sampler_step(z, eps_final, schedule, config.sampler, rng);

        double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                              t0)
                        .count();
        out.energy_trace.steps.push_back({t, e_val, grad_norm, ms});
    }
    out.energy_trace.final_energy = out.energy_trace.steps.back().energy;
    out.trace.final_state = z;
    out.final_state = std::move(z);
    return out;
}

CfgRunResult sample_cfg(const Denoiser& model, const NoiseSchedule& schedule,
                        const GuidanceConfig& config) {
    PromptEmbedding p = model.text.encode(config.prompt);
    PromptEmbedding null_p = model.text.null_prompt();

    Rng rng(config.seed);
    LatentState z = make_noise_latent(model.cfg.width, model.cfg.height, model.cfg.channels_in,
                                      schedule.total_steps, rng);

    CfgRunResult out;
    out.trace = make_trace_shell(model, schedule, config);

    for (int t = schedule.total_steps; t >= 1; t--) {
        int level = t - 1;
        Tape un_tape(false);
        ForwardNodes un = model.forward(un_tape, un_tape.leaf(z.data), null_p, level);

        Tape tape(false);
        ForwardNodes fwd = model.forward(tape, tape.leaf(z.data), p, level);
        record_trace_step(out.trace, tape, fwd, model, t, p.ntok());

        std::vector<double> eps_final =
            cfg_combine(un_tape.val(un.eps_node), tape.val(fwd.eps_node), config.gamma);
        z = sampler_step(z, eps_final, schedule, config.sampler, rng);
    }
    out.trace.final_state = z;
    out.final_state = std::move(z);
    return out;
}

}  // namespace entmap
