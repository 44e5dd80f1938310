#include "entmap/denoiser.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "entmap/kernels.hpp"

namespace entmap {

const std::array<const char*, kBlockCount> kBlockNames = {"down16", "down8", "mid4", "up8",
                                                          "up16"};

// ============================================================================
// schedule
// ============================================================================

double NoiseSchedule::alpha_bar_at(int t) const {
    if (t < 0 || t > total_steps) throw std::out_of_range("timestep outside [0, T]");
    return t == 0 ? 1.0 : alpha_bars[t - 1];
}

NoiseSchedule build_schedule(int total_steps, double beta_start, double beta_end) {
    if (total_steps < 1) throw std::invalid_argument("build_schedule: total_steps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.total_steps = total_steps;
    s.betas.resize(total_steps);
    s.alpha_bars.resize(total_steps);
    double prod = 1.0;
    for (int i = 0; i < total_steps; i++) {
        double frac = total_steps == 1 ? 0.0 : (double)i / (double)(total_steps - 1);
        s.betas[i] = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - s.betas[i];
        s.alpha_bars[i] = prod;
    }
    return s;
}

// ============================================================================
// text table
// ============================================================================

TextTable TextTable::make(int vocab, int d_embed, uint64_t seed) {
    TextTable t;
    t.vocab = vocab;
    t.d_embed = d_embed;
    t.table.resize((size_t)vocab * d_embed);
    Rng rng(seed);
    double scale = 1.0 / std::sqrt((double)d_embed);
    for (auto& v : t.table) v = rng.uniform_range(-1.0, 1.0) * scale;
    return t;
}

PromptEmbedding TextTable::encode(const std::vector<int>& ids) const {
    if (ids.empty()) throw std::invalid_argument("encode: empty prompt");
    PromptEmbedding p;
    p.token_ids = ids;
    p.d_embed = d_embed;
    p.embeddings.resize(ids.size() * (size_t)d_embed);
    for (size_t i = 0; i < ids.size(); i++) {
        if (ids[i] < 0 || ids[i] >= vocab) throw std::out_of_range("encode: token id out of vocab");
        std::memcpy(p.embeddings.data() + i * d_embed, table.data() + (size_t)ids[i] * d_embed,
                    sizeof(double) * d_embed);
    }
    p.null_flag = ids.size() == 1 && ids[0] == kNullToken;
    return p;
}

PromptEmbedding TextTable::null_prompt() const { return encode({kNullToken}); }

// ============================================================================
// latents
// ============================================================================

LatentState make_noise_latent(int width, int height, int channels, int timestep, Rng& rng) {
    LatentState z;
    z.width = width;
    z.height = height;
    z.channels = channels;
    z.timestep = timestep;
    z.data.resize((size_t)width * height * channels);
    for (auto& v : z.data) v = rng.normal();
    return z;
}

// ============================================================================
// model
// ============================================================================

int ModelConfig::block_channels(int b) const {
    static_assert(kBlockCount == 5);
    const int map[5] = {0, 1, 2, 1, 0};
    return widths[map[b]];
}

int ModelConfig::block_width(int b) const {
    const int div[5] = {1, 2, 4, 2, 1};
    return width / div[b];
}

int ModelConfig::block_height(int b) const {
    const int div[5] = {1, 2, 4, 2, 1};
    return height / div[b];
}

namespace {

void init_param(Param& p, const std::string& name, size_t n, int fan_in, Rng& rng, bool zero) {
    p.name = name;
    p.w.resize(n);
    p.m.assign(n, 0.0);
    p.v.assign(n, 0.0);
    if (zero) {
        std::fill(p.w.begin(), p.w.end(), 0.0);
    } else {
        double scale = 1.0 / std::sqrt((double)fan_in);
        for (auto& x : p.w) x = rng.uniform_range(-scale, scale);
    }
}

}  // namespace

Denoiser Denoiser::init(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.width % 4 != 0 || cfg.height % 4 != 0)
        throw std::invalid_argument("model width/height must be divisible by 4");
    Denoiser d;
    d.cfg = cfg;
    d.text = TextTable::make(cfg.vocab, cfg.d_embed, seed ^ 0x9e3779b97f4a7c15ull);
    Rng rng(seed);

    auto push = [&](const std::string& name, size_t n, int fan_in, bool zero = false) {
        d.params.emplace_back();
        init_param(d.params.back(), name, n, fan_in, rng, zero);
    };

    const int c0 = cfg.widths[0], c1 = cfg.widths[1], c2 = cfg.widths[2];
    const int hd = cfg.heads * cfg.d_attn;

    push("stem.w", (size_t)c0 * cfg.channels_in * 9, cfg.channels_in * 9);
    push("stem.b", c0, 1, true);
    for (int b = 0; b < kBlockCount; b++) {
        const std::string pre = std::string("blk") + std::to_string(b) + ".";
        int ch = cfg.block_channels(b);
        push(pre + "conv.w", (size_t)ch * ch * 9, ch * 9);
        push(pre + "conv.b", ch, 1, true);
        push(pre + "time.w", (size_t)cfg.time_dim * ch, cfg.time_dim);
        push(pre + "wq", (size_t)ch * hd, ch);
        push(pre + "wk", (size_t)cfg.d_embed * hd, cfg.d_embed);
        push(pre + "wv", (size_t)cfg.d_embed * hd, cfg.d_embed);
        push(pre + "wo", (size_t)hd * ch, hd);
    }
    push("down1.w", (size_t)c1 * c0 * 9, c0 * 9);
    push("down1.b", c1, 1, true);
    push("down2.w", (size_t)c2 * c1 * 9, c1 * 9);
    push("down2.b", c2, 1, true);
    push("up1.w", (size_t)c1 * c2 * 9, c2 * 9);
    push("up1.b", c1, 1, true);
    push("up2.w", (size_t)c0 * c1 * 9, c1 * 9);
    push("up2.b", c0, 1, true);
    push("head.w", (size_t)cfg.channels_in * c0 * 9, c0 * 9);
    push("head.b", cfg.channels_in, 1, true);
    return d;
}

int Denoiser::param_index(const std::string& name) const {
    for (size_t i = 0; i < params.size(); i++)
        if (params[i].name == name) return (int)i;
    throw std::out_of_range("unknown parameter: " + name);
}

const Param& Denoiser::param(const std::string& name) const { return params[param_index(name)]; }
Param& Denoiser::param(const std::string& name) { return params[param_index(name)]; }

std::vector<double> Denoiser::time_embedding(int level_index) const {
    // cos/sin halves, geometric frequencies, matching the usual sinusoidal layout
    std::vector<double> e(cfg.time_dim);
    int half = cfg.time_dim / 2;
    double log_base = std::log(10000.0) / (double)half;
    for (int i = 0; i < half; i++) {
        double freq = std::exp(-(double)i * log_base);
        double ang = (double)level_index * freq;
        e[i] = std::cos(ang);
        e[i + half] = std::sin(ang);
    }
    return e;
}

ForwardNodes Denoiser::forward(Tape& tape, int z_node, const PromptEmbedding& prompt,
                               int level_index) const {
    const int W = cfg.width, H = cfg.height;
    if ((int)tape.val(z_node).size() != W * H * cfg.channels_in)
        throw std::invalid_argument("forward: latent shape does not match architecture");
    if (prompt.d_embed != cfg.d_embed)
        throw std::invalid_argument("forward: prompt embedding dim mismatch");
    const int ntok = prompt.ntok();
    const int hd = cfg.heads * cfg.d_attn;

    ForwardNodes out;
    auto bind = [&](const std::string& name) {
        int pi = param_index(name);
        int node = tape.leaf(params[pi].w);
        out.bindings.push_back({pi, node});
        return node;
    };

    int xp = tape.leaf(prompt.embeddings);  // [ntok x d_embed]
    std::vector<double> temb = time_embedding(level_index);
    int temb_node = tape.leaf(temb);  // [1 x time_dim]

    auto block = [&](int h_node, int b) {
        const std::string pre = std::string("blk") + std::to_string(b) + ".";
        int ch = cfg.block_channels(b);
        int bw = cfg.block_width(b), bh = cfg.block_height(b);
        int npix = bw * bh;

        int hc = ad::conv2d3x3(tape, h_node, bind(pre + "conv.w"), bind(pre + "conv.b"),
                               bh, bw, ch, ch);
        int tproj = ad::matmul(tape, temb_node, bind(pre + "time.w"), 1, cfg.time_dim, ch);
        hc = ad::silu(tape, ad::add_rowbcast(tape, hc, tproj, npix, ch));

        int q = ad::matmul(tape, hc, bind(pre + "wq"), npix, ch, hd);
        int k = ad::matmul(tape, xp, bind(pre + "wk"), ntok, cfg.d_embed, hd);
        int v = ad::matmul(tape, xp, bind(pre + "wv"), ntok, cfg.d_embed, hd);
        int s = ad::attn_scores(tape, q, k, npix, ntok, cfg.heads, cfg.d_attn);
        int a = ad::softmax_rows(tape, s, cfg.heads * npix, ntok);
        int ctx = ad::attn_apply(tape, a, v, npix, ntok, cfg.heads, cfg.d_attn);
        int res = ad::add(tape, hc, ad::matmul(tape, ctx, bind(pre + "wo"), npix, hd, ch));

        out.blocks[b] = {a, q, bw, bh};
        return res;
    };

    const int c0 = cfg.widths[0], c1 = cfg.widths[1], c2 = cfg.widths[2];

    int h = ad::conv2d3x3(tape, z_node, bind("stem.w"), bind("stem.b"), H, W, cfg.channels_in, c0);
    int b16 = block(h, 0);
    int h1 = ad::conv2d3x3(tape, ad::avgpool2(tape, b16, H, W, c0), bind("down1.w"),
                           bind("down1.b"), H / 2, W / 2, c0, c1);
    int b8 = block(h1, 1);
    int h2 = ad::conv2d3x3(tape, ad::avgpool2(tape, b8, H / 2, W / 2, c1), bind("down2.w"),
                           bind("down2.b"), H / 4, W / 4, c1, c2);
    int mid = block(h2, 2);
    int h3 = ad::conv2d3x3(tape, ad::upsample_nearest2(tape, mid, H / 4, W / 4, c2),
                           bind("up1.w"), bind("up1.b"), H / 2, W / 2, c2, c1);
    h3 = ad::add(tape, h3, b8);
    int u8 = block(h3, 3);
    int h4 = ad::conv2d3x3(tape, ad::upsample_nearest2(tape, u8, H / 2, W / 2, c1),
                           bind("up2.w"), bind("up2.b"), H, W, c1, c0);
    h4 = ad::add(tape, h4, b16);
    int u16 = block(h4, 4);
    out.eps_node = ad::conv2d3x3(tape, u16, bind("head.w"), bind("head.b"), H, W, c0,
                                 cfg.channels_in);
    return out;
}

DenoiserOutput Denoiser::forward_plain(const LatentState& z, const PromptEmbedding& prompt,
                                       int level_index) const {
    Tape tape(false);
    int zn = tape.leaf(z.data);
    ForwardNodes nodes = forward(tape, zn, prompt, level_index);
    DenoiserOutput out;
    out.epsilon_hat = tape.val(nodes.eps_node);
    out.attention_records.resize(kBlockCount);
    for (int b = 0; b < kBlockCount; b++) {
        AttentionBlockRecord& r = out.attention_records[b];
        r.block_id = kBlockNames[b];
        r.width = nodes.blocks[b].wpix;
        r.height = nodes.blocks[b].hpix;
        r.heads = cfg.heads;
        r.d_attn = cfg.d_attn;
        r.ntok = prompt.ntok();
        r.timestep = z.timestep;
        r.attention = tape.val(nodes.blocks[b].attn_node);
        r.queries = tape.val(nodes.blocks[b].query_node);
    }
    return out;
}

// ============================================================================
// q_sample / sampler steps
// ============================================================================

LatentState q_sample(const LatentState& clean, int t, const std::vector<double>& noise,
                     const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.total_steps) throw std::out_of_range("q_sample: t outside [0, T)");
    if (noise.size() != clean.data.size())
        throw std::invalid_argument("q_sample: noise shape mismatch");
    double ab = schedule.alpha_bars[t];
    double cs = std::sqrt(ab), ns = std::sqrt(1.0 - ab);
    LatentState z = clean;
    z.timestep = t;
    for (size_t i = 0; i < z.data.size(); i++) z.data[i] = cs * clean.data[i] + ns * noise[i];
    return z;
}

LatentState sampler_step(const LatentState& z, const std::vector<double>& epsilon_final,
                         const NoiseSchedule& schedule, SamplerMode mode, Rng& rng) {
    int t = z.timestep;
    if (t < 1 || t > schedule.total_steps)
        throw std::invalid_argument("sampler_step: timestep must be in [1, T]");
    if (epsilon_final.size() != z.data.size())
        throw std::invalid_argument("sampler_step: epsilon shape mismatch");

    double ab_t = schedule.alpha_bar_at(t);
    double ab_prev = schedule.alpha_bar_at(t - 1);

    LatentState next = z;
    next.timestep = t - 1;
    if (mode == SamplerMode::DDIM) {
        double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
        double sig_t = std::sqrt(1.0 - ab_t);
        double cs = std::sqrt(ab_prev);
        double ns = std::sqrt(1.0 - ab_prev);
        for (size_t i = 0; i < z.data.size(); i++) {
            double x0 = (z.data[i] - sig_t * epsilon_final[i]) * inv_sqrt_ab;
            next.data[i] = cs * x0 + ns * epsilon_final[i];
        }
    } else {
        double beta = schedule.betas[t - 1];
        double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
        double coef = beta / std::sqrt(1.0 - ab_t);
        double sigma = std::sqrt(beta);
        for (size_t i = 0; i < z.data.size(); i++)
            next.data[i] = inv_sqrt_alpha * (z.data[i] - coef * epsilon_final[i]);
        if (t > 1) {
            for (size_t i = 0; i < z.data.size(); i++) next.data[i] += sigma * rng.normal();
        }
    }
    return next;
}

// ============================================================================
// training
// ============================================================================

double train_step(Denoiser& model, const NoiseSchedule& schedule,
                  const std::vector<TrainItem>& batch, Rng& rng, const TrainOptions& opt) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const int B = (int)batch.size();
    const size_t latent_size = (size_t)model.cfg.width * model.cfg.height * model.cfg.channels_in;

    // All randomness drawn up front, in item order, so the parallel section is
    // deterministic.
    struct Draw {
        int t;
        bool drop;
        std::vector<double> noise;
    };
    std::vector<Draw> draws(B);
    for (int i = 0; i < B; i++) {
        draws[i].t = (int)rng.uniform_int(schedule.total_steps);
        draws[i].drop = rng.uniform() < opt.null_drop;
        draws[i].noise.resize(latent_size);
        for (auto& v : draws[i].noise) v = rng.normal();
    }

    for (const TrainItem& item : batch)
        if (item.image.size() != latent_size)
            throw std::invalid_argument("train_step: item image shape mismatch");

    std::vector<double> losses(B, 0.0);
    std::vector<std::vector<std::vector<double>>> item_grads(B);  // [item][param][...]

    #pragma omp parallel for schedule(dynamic) if(parallel_enabled())
    for (int i = 0; i < B; i++) {
        const TrainItem& item = batch[i];
        LatentState clean{model.cfg.width, model.cfg.height, model.cfg.channels_in, 0, item.image};
        LatentState zt = q_sample(clean, draws[i].t, draws[i].noise, schedule);

        PromptEmbedding prompt = draws[i].drop ? model.text.null_prompt()
                                               : model.text.encode(item.prompt_tokens);
        Tape tape(true);
        int zn = tape.leaf(zt.data);
        ForwardNodes fwd = model.forward(tape, zn, prompt, draws[i].t);
        int loss = ad::mse_vs(tape, fwd.eps_node, draws[i].noise.data());
        losses[i] = tape.val(loss)[0];
        tape.backward(loss);

        auto& grads = item_grads[i];
        grads.resize(model.params.size());
        for (const ParamBinding& pb : fwd.bindings) grads[pb.param_index] = tape.grad(pb.node);
    }

    // Serial reduction in item order keeps the update deterministic.
    std::vector<std::vector<double>> grad(model.params.size());
    for (size_t p = 0; p < model.params.size(); p++) grad[p].assign(model.params[p].w.size(), 0.0);
    for (int i = 0; i < B; i++)
        for (size_t p = 0; p < model.params.size(); p++)
            if (!item_grads[i][p].empty())
                for (size_t j = 0; j < grad[p].size(); j++)
                    grad[p][j] += item_grads[i][p][j] / (double)B;

    model.adam_step++;
    double bc1 = 1.0 - std::pow(opt.beta1, (double)model.adam_step);
    double bc2 = 1.0 - std::pow(opt.beta2, (double)model.adam_step);
    for (size_t p = 0; p < model.params.size(); p++) {
        Param& pp = model.params[p];
        for (size_t j = 0; j < pp.w.size(); j++) {
            double g = grad[p][j];
            pp.m[j] = opt.beta1 * pp.m[j] + (1.0 - opt.beta1) * g;
            pp.v[j] = opt.beta2 * pp.v[j] + (1.0 - opt.beta2) * g * g;
            pp.w[j] -= opt.lr * (pp.m[j] / bc1) / (std::sqrt(pp.v[j] / bc2) + opt.eps);
        }
    }

    double mean = 0.0;
    for (double l : losses) mean += l;
    return mean / (double)B;
}

double eval_denoising_mse(const Denoiser& model, const NoiseSchedule& schedule,
                          const std::vector<TrainItem>& items, uint64_t seed) {
    if (items.empty()) throw std::invalid_argument("eval_denoising_mse: empty item list");
    const size_t latent_size = (size_t)model.cfg.width * model.cfg.height * model.cfg.channels_in;
    Rng rng(seed);
    struct Draw {
        int t;
        std::vector<double> noise;
    };
    std::vector<Draw> draws(items.size());
    for (auto& d : draws) {
        d.t = (int)rng.uniform_int(schedule.total_steps);
        d.noise.resize(latent_size);
        for (auto& v : d.noise) v = rng.normal();
    }
    std::vector<double> losses(items.size(), 0.0);
    #pragma omp parallel for schedule(dynamic) if(parallel_enabled())
    for (int i = 0; i < (int)items.size(); i++) {
        LatentState clean{model.cfg.width, model.cfg.height, model.cfg.channels_in, 0,
                          items[i].image};
        LatentState zt = q_sample(clean, draws[i].t, draws[i].noise, schedule);
        PromptEmbedding prompt = model.text.encode(items[i].prompt_tokens);
        DenoiserOutput out = model.forward_plain(zt, prompt, draws[i].t);
        double acc = 0.0;
        for (size_t j = 0; j < latent_size; j++) {
            double d = out.epsilon_hat[j] - draws[i].noise[j];
            acc += d * d;
        }
        losses[i] = acc / (double)latent_size;
    }
    double mean = 0.0;
    for (double l : losses) mean += l;
    return mean / (double)items.size();
}

// ============================================================================
// checkpoint io
// ============================================================================

namespace {
constexpr char kMagic[4] = {'E', 'M', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

void put_doubles(std::ofstream& f, const std::vector<double>& v) {
    put<uint64_t>(f, v.size());
    f.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}

std::vector<double> get_doubles(std::ifstream& f) {
    uint64_t n = get<uint64_t>(f);
    std::vector<double> v(n);
    f.read(reinterpret_cast<char*>(v.data()), sizeof(double) * n);
    if (!f) throw std::runtime_error("checkpoint: truncated file");
    return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const Denoiser& model, const NoiseSchedule& sched) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    f.write(kMagic, 4);
    put<uint32_t>(f, kVersion);
    const ModelConfig& c = model.cfg;
    for (int v : {c.width, c.height, c.channels_in, c.widths[0], c.widths[1], c.widths[2],
                  c.heads, c.d_attn, c.d_embed, c.vocab, c.time_dim})
        put<int32_t>(f, v);
    put<int32_t>(f, sched.total_steps);
    put_doubles(f, sched.betas);
    put_doubles(f, model.text.table);
    put<uint32_t>(f, (uint32_t)model.params.size());
    for (const Param& p : model.params) {
        put<uint32_t>(f, (uint32_t)p.name.size());
        f.write(p.name.data(), p.name.size());
        put_doubles(f, p.w);
    }
    if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

std::pair<Denoiser, NoiseSchedule> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic: " + path);
    uint32_t ver = get<uint32_t>(f);
    if (ver != kVersion) throw std::runtime_error("checkpoint: unsupported version");

    ModelConfig c;
    c.width = get<int32_t>(f);
    c.height = get<int32_t>(f);
    c.channels_in = get<int32_t>(f);
    c.widths[0] = get<int32_t>(f);
    c.widths[1] = get<int32_t>(f);
    c.widths[2] = get<int32_t>(f);
    c.heads = get<int32_t>(f);
    c.d_attn = get<int32_t>(f);
    c.d_embed = get<int32_t>(f);
    c.vocab = get<int32_t>(f);
    c.time_dim = get<int32_t>(f);

    NoiseSchedule sched;
    sched.total_steps = get<int32_t>(f);
    sched.betas = get_doubles(f);
    sched.alpha_bars.resize(sched.betas.size());
    double prod = 1.0;
    for (size_t i = 0; i < sched.betas.size(); i++) {
        prod *= 1.0 - sched.betas[i];
        sched.alpha_bars[i] = prod;
    }

    Denoiser model = Denoiser::init(c, 0);
    model.text.table = get_doubles(f);
    uint32_t np = get<uint32_t>(f);
    if (np != model.params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    for (Param& p : model.params) {
        uint32_t nl = get<uint32_t>(f);
        std::string name(nl, '\0');
        f.read(name.data(), nl);
        if (name != p.name) throw std::runtime_error("checkpoint: parameter order mismatch");
        std::vector<double> w = get_doubles(f);
        if (w.size() != p.w.size()) throw std::runtime_error("checkpoint: parameter size mismatch");
        p.w = std::move(w);
    }
    return {std::move(model), std::move(sched)};
}

}  // namespace entmap
