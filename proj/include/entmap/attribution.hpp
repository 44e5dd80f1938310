#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "entmap/denoiser.hpp"

namespace entmap {

// Spatial attention-mass map for one concept token, aggregated over the
// requested scope. Values are raw unnormalized sums.
struct AttributionMap {
    int width = 0, height = 0;
    std::vector<double> values;  // [H][W]
    int concept_token = -1;
    std::string scope = "all";     // "all" or a block id
    int timestep_scope = -1;       // -1 for all timesteps, else the single t
};

// Per-step, per-block attention records captured while sampling, plus enough
// context to recompute open-vocabulary maps for arbitrary attribution prompts.
struct GenerationTrace {
    int width = 0, height = 0;
    int total_steps = 0;
    std::vector<int> prompt;       // generation prompt P
    std::vector<int> attr_prompt;  // default attribution prompt P'
    uint64_t seed = 0;
    LatentState final_state;
    std::vector<AttentionBlockRecord> records;  // [(t-1)*kBlockCount + block], t = 1..T

    bool complete() const {
        return (int)records.size() == total_steps * kBlockCount && total_steps > 0;
    }
    const AttentionBlockRecord& record(int t, int block) const;
};

// K'_i: block i's key projection applied to the attribution embeddings,
// [ntok x heads*d_attn].
std::vector<double> attribution_keys(const Denoiser& model, const PromptEmbedding& attr_prompt,
                                     const std::string& block_id);

int block_index(const std::string& block_id);

// Head-summed attention slice for one token at one block and timestep,
// recomputed from the recorded queries against attribution-prompt keys.
// Returns a [block H x block W] map.
std::vector<double> attention_for_token(const Denoiser& model, const GenerationTrace& trace,
                                        const PromptEmbedding& attr_prompt, int token_index,
                                        const std::string& block_id, int t);

// Same recompute for a single record with precomputed keys [ntok x heads*d].
std::vector<double> token_map_from_queries(const AttentionBlockRecord& rec,
                                           const std::vector<double>& keys, int ntok,
                                           int token_index);

AttributionMap aggregate_map(const Denoiser& model, const GenerationTrace& trace,
                             const PromptEmbedding& attr_prompt, int token_index);

AttributionMap blockwise_map(const Denoiser& model, const GenerationTrace& trace,
                             const PromptEmbedding& attr_prompt, int token_index,
                             const std::string& block_id);

// Aggregation of the attention actually recorded during generation (keys from
// P). With P' = P this matches aggregate_map exactly.
AttributionMap trace_recorded_aggregate(const GenerationTrace& trace, int token_index);

// Pixel-center-aligned bilinear resize with argument checks.
std::vector<double> bilinear_resize_map(const std::vector<double>& src, int sw, int sh,
                                        int dw, int dh);

}  // namespace entmap
