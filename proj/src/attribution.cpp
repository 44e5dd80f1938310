#include "entmap/attribution.hpp"

#include <cstring>
#include <stdexcept>

#include "entmap/kernels.hpp"

namespace entmap {

const AttentionBlockRecord& GenerationTrace::record(int t, int block) const {
    if (t < 1 || t > total_steps || block < 0 || block >= kBlockCount)
        throw std::runtime_error("trace: record (t, block) outside the recorded run");
    size_t idx = (size_t)(t - 1) * kBlockCount + block;
    if (idx >= records.size()) throw std::runtime_error("trace: incomplete, missing record");
    return records[idx];
}

int block_index(const std::string& block_id) {
    for (int b = 0; b < kBlockCount; b++)
        if (block_id == kBlockNames[b]) return b;
    throw std::out_of_range("unknown block id: " + block_id);
}

std::vector<double> attribution_keys(const Denoiser& model, const PromptEmbedding& attr_prompt,
                                     const std::string& block_id) {
    if (attr_prompt.ntok() == 0) throw std::invalid_argument("attribution_keys: empty prompt");
    int b = block_index(block_id);
    const Param& wk = model.param(std::string("blk") + std::to_string(b) + ".wk");
    int hd = model.cfg.heads * model.cfg.d_attn;
    std::vector<double> keys((size_t)attr_prompt.ntok() * hd);
    kernels::matmul(keys.data(), attr_prompt.embeddings.data(), wk.w.data(), attr_prompt.ntok(),
                    model.cfg.d_embed, hd);
    return keys;
}

// Head-summed token slice of softmax(Q K'^T / sqrt(d)) for one record.
// Shares the kernels used during generation so a P' = P recompute is
// bit-identical to the recorded attention.
std::vector<double> token_map_from_queries(const AttentionBlockRecord& rec,
                                           const std::vector<double>& keys, int ntok,
                                           int token_index) {
    int npix = rec.npix();
    int heads = rec.heads, d = rec.d_attn;
    std::vector<double> scores((size_t)heads * npix * ntok);
    kernels::attn_scores(scores.data(), rec.queries.data(), keys.data(), npix, ntok, heads, d);
    std::vector<double> attn(scores.size());
    kernels::softmax_rows(attn.data(), scores.data(), heads * npix, ntok);
    std::vector<double> map(npix, 0.0);
    for (int p = 0; p < npix; p++) {
        double acc = 0.0;
        for (int h = 0; h < heads; h++) acc += attn[((size_t)h * npix + p) * ntok + token_index];
        map[p] = acc;
    }
    return map;
}

namespace {

std::vector<double> token_map_from_recorded(const AttentionBlockRecord& rec, int token_index) {
    int npix = rec.npix();
    std::vector<double> map(npix, 0.0);
    for (int p = 0; p < npix; p++) {
        double acc = 0.0;
        for (int h = 0; h < rec.heads; h++)
            acc += rec.attention[((size_t)h * npix + p) * rec.ntok + token_index];
        map[p] = acc;
    }
    return map;
}

}  // namespace

std::vector<double> attention_for_token(const Denoiser& model, const GenerationTrace& trace,
                                        const PromptEmbedding& attr_prompt, int token_index,
                                        const std::string& block_id, int t) {
    if (token_index < 0 || token_index >= attr_prompt.ntok())
        throw std::invalid_argument("attention_for_token: token index outside prompt");
    int b = block_index(block_id);
    const AttentionBlockRecord& rec = trace.record(t, b);
    std::vector<double> keys = attribution_keys(model, attr_prompt, block_id);
    return token_map_from_queries(rec, keys, attr_prompt.ntok(), token_index);
}

AttributionMap blockwise_map(const Denoiser& model, const GenerationTrace& trace,
                             const PromptEmbedding& attr_prompt, int token_index,
                             const std::string& block_id) {
    if (!trace.complete()) throw std::runtime_error("blockwise_map: incomplete trace");
    int b = block_index(block_id);
    std::vector<double> keys = attribution_keys(model, attr_prompt, block_id);

    AttributionMap out;
    out.width = trace.width;
    out.height = trace.height;
    out.values.assign((size_t)trace.width * trace.height, 0.0);
    out.concept_token = attr_prompt.token_ids[token_index];
    out.scope = block_id;
    out.timestep_scope = -1;

    std::vector<double> resized(out.values.size());
    for (int t = 1; t <= trace.total_steps; t++) {
        const AttentionBlockRecord& rec = trace.record(t, b);
        std::vector<double> map =
            token_map_from_queries(rec, keys, attr_prompt.ntok(), token_index);
        kernels::bilinear_resize(resized.data(), map.data(), rec.width, rec.height, trace.width,
                                 trace.height);
        for (size_t i = 0; i < out.values.size(); i++) out.values[i] += resized[i];
    }
    return out;
}

AttributionMap aggregate_map(const Denoiser& model, const GenerationTrace& trace,
                             const PromptEmbedding& attr_prompt, int token_index) {
    if (!trace.complete()) throw std::runtime_error("aggregate_map: incomplete trace");
    AttributionMap out;
    out.width = trace.width;
    out.height = trace.height;
    out.values.assign((size_t)trace.width * trace.height, 0.0);
    out.concept_token = attr_prompt.token_ids[token_index];
    out.scope = "all";
    out.timestep_scope = -1;

    // Sum of the per-block maps, in block order, so the block decomposition
    // is exact in double precision.
    for (int b = 0; b < kBlockCount; b++) {
        AttributionMap bm = blockwise_map(model, trace, attr_prompt, token_index, kBlockNames[b]);
        for (size_t i = 0; i < out.values.size(); i++) out.values[i] += bm.values[i];
    }
    return out;
}

AttributionMap trace_recorded_aggregate(const GenerationTrace& trace, int token_index) {
    if (!trace.complete()) throw std::runtime_error("trace_recorded_aggregate: incomplete trace");
    AttributionMap out;
    out.width = trace.width;
    out.height = trace.height;
    out.values.assign((size_t)trace.width * trace.height, 0.0);
    out.concept_token =
        token_index < (int)trace.prompt.size() ? trace.prompt[token_index] : -1;
    out.scope = "all";
    out.timestep_scope = -1;

    std::vector<double> resized(out.values.size());
    for (int b = 0; b < kBlockCount; b++) {
        std::vector<double> block_acc(out.values.size(), 0.0);
        for (int t = 1; t <= trace.total_steps; t++) {
            const AttentionBlockRecord& rec = trace.record(t, b);
            if (token_index < 0 || token_index >= rec.ntok)
                throw std::invalid_argument("trace_recorded_aggregate: token index outside P");
            std::vector<double> map = token_map_from_recorded(rec, token_index);
            kernels::bilinear_resize(resized.data(), map.data(), rec.width, rec.height,
                                     trace.width, trace.height);
            for (size_t i = 0; i < block_acc.size(); i++) block_acc[i] += resized[i];
        }
        for (size_t i = 0; i < out.values.size(); i++) out.values[i] += block_acc[i];
    }
    return out;
}

std::vector<double> bilinear_resize_map(const std::vector<double>& src, int sw, int sh,
                                        int dw, int dh) {
    if (sw <= 0 || sh <= 0 || dw <= 0 || dh <= 0)
        throw std::invalid_argument("bilinear_resize_map: dimensions must be positive");
    if (src.size() != (size_t)sw * sh)
        throw std::invalid_argument("bilinear_resize_map: source size mismatch");
    std::vector<double> dst((size_t)dw * dh);
    kernels::bilinear_resize(dst.data(), src.data(), sw, sh, dw, dh);
    return dst;
}

}  // namespace entmap
