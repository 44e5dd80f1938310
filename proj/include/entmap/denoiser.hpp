#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "entmap/autodiff.hpp"
#include "entmap/rng.hpp"

namespace entmap {

// ============================================================================
// noise schedule
// ============================================================================

struct NoiseSchedule {
    int total_steps = 0;             // T
    std::vector<double> betas;       // length T
    std::vector<double> alpha_bars;  // length T, cumulative product of (1 - beta)

    // Noise level of a sampling state at timestep t in [0, T]. States count
    // remaining steps: t = T is pure noise, t = 0 is the finished sample.
    // t = 0 maps to 1 (clean); t >= 1 maps to alpha_bars[t-1].
    double alpha_bar_at(int t) const;
};

NoiseSchedule build_schedule(int total_steps, double beta_start, double beta_end);

// ============================================================================
// prompts
// ============================================================================

constexpr int kNullToken = 0;

struct PromptEmbedding {
    std::vector<int> token_ids;
    std::vector<double> embeddings;  // [ntok x d_embed], one row per token
    int d_embed = 0;
    bool null_flag = false;

    int ntok() const { return (int)token_ids.size(); }
};

// Seeded embedding table standing in for a text encoder. Token 0 is the
// reserved null token used for the unconditional branch.
struct TextTable {
    int vocab = 0;
    int d_embed = 0;
    std::vector<double> table;  // [vocab x d_embed]

    static TextTable make(int vocab, int d_embed, uint64_t seed);
    PromptEmbedding encode(const std::vector<int>& ids) const;
    PromptEmbedding null_prompt() const;
};

// ============================================================================
// latents and denoiser outputs
// ============================================================================

struct LatentState {
    int width = 0, height = 0, channels = 0;
    int timestep = 0;  // 0..T
    std::vector<double> data;  // [H][W][C]

    size_t size() const { return data.size(); }
};

LatentState make_noise_latent(int width, int height, int channels, int timestep, Rng& rng);

struct AttentionBlockRecord {
    std::string block_id;
    int width = 0, height = 0;
    int heads = 0, d_attn = 0, ntok = 0;
    int timestep = 0;
    std::vector<double> attention;  // [heads*npix x ntok], rows softmax-normalized
    std::vector<double> queries;    // [npix x heads*d_attn]

    int npix() const { return width * height; }
};

struct DenoiserOutput {
    std::vector<double> epsilon_hat;  // [H][W][C]
    std::vector<AttentionBlockRecord> attention_records;  // one per block
};

// ============================================================================
// model
// ============================================================================

constexpr int kBlockCount = 5;
extern const std::array<const char*, kBlockCount> kBlockNames;  // down16 down8 mid4 up8 up16

struct ModelConfig {
    int width = 16, height = 16, channels_in = 3;
    std::array<int, 3> widths = {16, 32, 64};  // channels at full, /2, /4 resolution
    int heads = 2, d_attn = 8;
    int d_embed = 32, vocab = 16;
    int time_dim = 32;

    int block_channels(int b) const;   // per block, [c0 c1 c2 c1 c0]
    int block_width(int b) const;      // per block, [W W/2 W/4 W/2 W]
    int block_height(int b) const;
};

struct Param {
    std::string name;
    std::vector<double> w;
    std::vector<double> m, v;  // Adam moments
};

struct ParamBinding {
    int param_index;
    int node;
};

// Output of a taped forward pass. Attention/query node ids allow the energy
// term to differentiate through the block queries back to the latent.
struct ForwardNodes {
    int eps_node = -1;
    struct Block {
        int attn_node = -1;   // [heads*npix x ntok]
        int query_node = -1;  // [npix x heads*d_attn]
        int wpix = 0, hpix = 0;
    };
    std::array<Block, kBlockCount> blocks;
    std::vector<ParamBinding> bindings;
};

class Denoiser {
public:
    ModelConfig cfg;
    TextTable text;
    std::vector<Param> params;
    int64_t adam_step = 0;

    static Denoiser init(const ModelConfig& cfg, uint64_t seed);

    // Taped forward pass. level_index in [0, total_steps) selects the time
    // embedding; z_node must hold a [H][W][C] latent leaf on `tape`.
    ForwardNodes forward(Tape& tape, int z_node, const PromptEmbedding& prompt,
                         int level_index) const;

    // Convenience forward on plain buffers; fills attention records.
    DenoiserOutput forward_plain(const LatentState& z, const PromptEmbedding& prompt,
                                 int level_index) const;

    const Param& param(const std::string& name) const;
    Param& param(const std::string& name);
    int param_index(const std::string& name) const;

    std::vector<double> time_embedding(int level_index) const;
};

// ============================================================================
// diffusion ops
// ============================================================================

LatentState q_sample(const LatentState& clean, int t, const std::vector<double>& noise,
                     const NoiseSchedule& schedule);

enum class SamplerMode { DDIM, DDPM };

LatentState sampler_step(const LatentState& z, const std::vector<double>& epsilon_final,
                         const NoiseSchedule& schedule, SamplerMode mode, Rng& rng);

struct TrainItem {
    std::vector<double> image;       // clean latent [H][W][C] in [-1, 1]
    std::vector<int> prompt_tokens;
};

struct TrainOptions {
    double lr = 3e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double null_drop = 0.1;  // probability of training an item unconditionally
};

// One optimizer update on the batch; returns the pre-update mean MSE loss.
double train_step(Denoiser& model, const NoiseSchedule& schedule,
                  const std::vector<TrainItem>& batch, Rng& rng,
                  const TrainOptions& opt = {});

// Mean denoising MSE over a fixed set of items with seeded (t, noise) draws;
// does not touch the weights.
double eval_denoising_mse(const Denoiser& model, const NoiseSchedule& schedule,
                          const std::vector<TrainItem>& items, uint64_t seed);

// ============================================================================
// checkpoint container
// ============================================================================

void save_checkpoint(const std::string& path, const Denoiser& model, const NoiseSchedule& sched);
std::pair<Denoiser, NoiseSchedule> load_checkpoint(const std::string& path);

}  // namespace entmap
