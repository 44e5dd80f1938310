#include "entmap/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "entmap/image_io.hpp"
#include "entmap/kernels.hpp"
#include "entmap/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace entmap {

// ============================================================================
// vocabulary
// ============================================================================

namespace {
constexpr const char* kTokenNames[8] = {"null", "circle", "square", "bar",
                                        "red",  "green",  "blue",   "scene"};
}

const char* token_name(int id) {
    if (id < 0 || id >= 8) throw std::out_of_range("token_name: unnamed token id");
    return kTokenNames[id];
}

int token_id(const std::string& name) {
    for (int i = 0; i < 8; i++)
        if (name == kTokenNames[i]) return i;
    throw std::invalid_argument("unknown token name: " + name);
}

bool is_shape_token(int id) { return id >= tokens::kCircle && id <= tokens::kBar; }
bool is_color_token(int id) { return id >= tokens::kRed && id <= tokens::kBlue; }

// ============================================================================
// scene rendering
// ============================================================================

std::vector<uint8_t> ground_truth_mask(int shape_token, int width, int height) {
    std::vector<uint8_t> m((size_t)width * height, 0);
    auto at = [&](int x, int y) -> uint8_t& { return m[(size_t)y * width + x]; };
    if (shape_token == tokens::kCircle) {
        double cx = (width - 1) * 0.5, cy = (height - 1) * 0.5;
        double r = 0.28 * width;
        for (int y = 0; y < height; y++)
            for (int x = 0; x < width; x++)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) at(x, y) = 1;
    } else if (shape_token == tokens::kSquare) {
        int lo_x = (int)(0.25 * width), hi_x = (int)(0.70 * width);
        int lo_y = (int)(0.25 * height), hi_y = (int)(0.70 * height);
        for (int y = lo_y; y <= hi_y && y < height; y++)
            for (int x = lo_x; x <= hi_x && x < width; x++) at(x, y) = 1;
    } else if (shape_token == tokens::kBar) {
        int lo = (int)(0.375 * height), hi = (int)(0.625 * height);
        for (int y = lo; y < hi && y < height; y++)
            for (int x = 0; x < width; x++) at(x, y) = 1;
    } else {
        throw std::invalid_argument("ground_truth_mask: not a shape token");
    }
    return m;
}

RenderedScene render_scene(const SceneSpec& spec, int width, int height, uint64_t seed) {
    if (!is_shape_token(spec.shape_token) || !is_color_token(spec.color_token))
        throw std::invalid_argument("render_scene: bad scene spec");
    RenderedScene s;
    s.mask = ground_truth_mask(spec.shape_token, width, height);
    s.image.assign((size_t)width * height * 3, 0.0);

    double fg[3] = {-0.9, -0.9, -0.9};
    fg[spec.color_token - tokens::kRed] = 0.9;

    for (int p = 0; p < width * height; p++) {
        if (!s.mask[p]) continue;
        for (int c = 0; c < 3; c++) s.image[(size_t)p * 3 + c] = fg[c];
    }
    Rng rng(seed);
    for (auto& v : s.image) v = std::clamp(v + 0.05 * rng.normal(), -1.0, 1.0);
    return s;
}

// ============================================================================
// skew table and dataset
// ============================================================================

void SkewTable::validate() const {
    if (rows.empty()) throw std::invalid_argument("skew: empty table");
    for (const auto& [shape, probs] : rows) {
        if (!is_shape_token(shape)) throw std::invalid_argument("skew: row key not a shape");
        double sum = 0.0;
        for (double p : probs) {
            if (!(p >= 0.0)) throw std::invalid_argument("skew: negative probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument(std::string("skew: row for ") + token_name(shape) +
                                        " does not sum to 1");
    }
}

SkewTable SkewTable::default_table() {
    SkewTable t;
    t.rows[tokens::kCircle] = {0.9, 0.05, 0.05};
    t.rows[tokens::kSquare] = {0.05, 0.9, 0.05};
    t.rows[tokens::kBar] = {0.05, 0.05, 0.9};
    return t;
}

int SkewTable::dominant_color(int shape_token) const {
    auto it = rows.find(shape_token);
    if (it == rows.end()) throw std::out_of_range("skew: no row for shape");
    int best = 0;
    for (int c = 1; c < 3; c++)
        if (it->second[c] > it->second[best]) best = c;
    return tokens::kRed + best;
}

int SkewTable::sample_color(int shape_token, double u) const {
    auto it = rows.find(shape_token);
    if (it == rows.end()) throw std::out_of_range("skew: no row for shape");
    double acc = 0.0;
    for (int c = 0; c < 3; c++) {
        acc += it->second[c];
        if (u < acc) return tokens::kRed + c;
    }
    return tokens::kBlue;
}

Dataset generate_dataset(const SkewTable& skew, int count, int width, int height, uint64_t seed) {
    skew.validate();
    std::vector<int> shapes;
    for (const auto& [shape, _] : skew.rows) shapes.push_back(shape);

    Dataset d;
    d.width = width;
    d.height = height;
    d.seed = seed;
    d.items.resize(count);
    Rng rng(seed);
    for (int i = 0; i < count; i++) {
        DatasetItem& item = d.items[i];
        item.shape_token = shapes[rng.uniform_int(shapes.size())];
        item.color_token = skew.sample_color(item.shape_token, rng.uniform());
        item.prompt = {tokens::kScene, item.shape_token, item.color_token};
        RenderedScene s = render_scene({item.shape_token, item.color_token}, width, height,
                                       rng.next_u64());
        item.image = std::move(s.image);
        item.gt_mask = std::move(s.mask);
    }
    return d;
}

uint64_t Dataset::content_hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* data, size_t n) {
        const unsigned char* p = (const unsigned char*)data;
        for (size_t i = 0; i < n; i++) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    int dims[2] = {width, height};
    mix(dims, sizeof(dims));
    for (const auto& item : items) {
        int lab[2] = {item.shape_token, item.color_token};
        mix(lab, sizeof(lab));
        mix(item.image.data(), item.image.size() * sizeof(double));
        mix(item.gt_mask.data(), item.gt_mask.size());
    }
    return h;
}

void save_dataset(const std::string& dir, const Dataset& d) {
    fs::create_directories(dir);
    std::ofstream f(fs::path(dir) / "data.bin", std::ios::binary);
    if (!f) throw std::runtime_error("save_dataset: cannot open data.bin");
    const char magic[4] = {'E', 'M', 'D', 'S'};
    f.write(magic, 4);
    uint32_t ver = 1, count = (uint32_t)d.items.size();
    int32_t w = d.width, h = d.height;
    uint64_t seed = d.seed;
    f.write((const char*)&ver, 4);
    f.write((const char*)&count, 4);
    f.write((const char*)&w, 4);
    f.write((const char*)&h, 4);
    f.write((const char*)&seed, 8);
    for (const auto& item : d.items) {
        int32_t st = item.shape_token, ct = item.color_token;
        f.write((const char*)&st, 4);
        f.write((const char*)&ct, 4);
        f.write((const char*)item.image.data(), (std::streamsize)(item.image.size() * 8));
        f.write((const char*)item.gt_mask.data(), (std::streamsize)item.gt_mask.size());
    }
    if (!f) throw std::runtime_error("save_dataset: write failed");

    std::map<std::string, int> counts;
    for (const auto& item : d.items)
        counts[std::string(token_name(item.shape_token)) + "_" + token_name(item.color_token)]++;
    json manifest;
    manifest["version"] = 1;
    manifest["count"] = d.items.size();
    manifest["width"] = d.width;
    manifest["height"] = d.height;
    manifest["seed"] = d.seed;
    manifest["content_hash"] = d.content_hash();
    manifest["pair_counts"] = counts;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw std::runtime_error("save_dataset: manifest write failed");
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "data.bin", std::ios::binary);
    if (!f) throw std::runtime_error("load_dataset: cannot open data.bin in " + dir);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "EMDS", 4) != 0)
        throw std::runtime_error("load_dataset: bad magic");
    uint32_t ver, count;
    int32_t w, h;
    uint64_t seed;
    f.read((char*)&ver, 4);
    f.read((char*)&count, 4);
    f.read((char*)&w, 4);
    f.read((char*)&h, 4);
    f.read((char*)&seed, 8);
    if (!f || ver != 1) throw std::runtime_error("load_dataset: unsupported version");
    Dataset d;
    d.width = w;
    d.height = h;
    d.seed = seed;
    d.items.resize(count);
    for (auto& item : d.items) {
        int32_t st, ct;
        f.read((char*)&st, 4);
        f.read((char*)&ct, 4);
        item.shape_token = st;
        item.color_token = ct;
        item.prompt = {tokens::kScene, st, ct};
        item.image.resize((size_t)w * h * 3);
        item.gt_mask.resize((size_t)w * h);
        f.read((char*)item.image.data(), (std::streamsize)(item.image.size() * 8));
        f.read((char*)item.gt_mask.data(), (std::streamsize)item.gt_mask.size());
        if (!f) throw std::runtime_error("load_dataset: truncated data.bin");
    }
    return d;
}

std::vector<TrainItem> dataset_to_train_items(const Dataset& d) {
    std::vector<TrainItem> items(d.items.size());
    for (size_t i = 0; i < d.items.size(); i++) {
        items[i].image = d.items[i].image;
        items[i].prompt_tokens = d.items[i].prompt;
    }
    return items;
}

// ============================================================================
// group classifier
// ============================================================================

std::string toy_group_classifier(const std::vector<double>& image, int width, int height) {
    if ((int)image.size() != width * height * 3)
        throw std::invalid_argument("toy_group_classifier: size mismatch");
    double sums[3] = {0, 0, 0};
    int fg = 0;
    for (int p = 0; p < width * height; p++) {
        double dev = 0.0;
        for (int c = 0; c < 3; c++) dev = std::max(dev, std::abs(image[(size_t)p * 3 + c]));
        if (dev > 0.1) {
            fg++;
            for (int c = 0; c < 3; c++) sums[c] += image[(size_t)p * 3 + c];
        }
    }
    if (fg == 0) return "none";
    int best = 0;
    for (int c = 1; c < 3; c++)
        if (sums[c] > sums[best]) best = c;
    return token_name(tokens::kRed + best);
}

// ============================================================================
// experiment config
// ============================================================================

SamplerMode ExperimentConfig::sampler_mode() const {
    if (sampler == "ddim") return SamplerMode::DDIM;
    if (sampler == "ddpm") return SamplerMode::DDPM;
    throw std::invalid_argument("config: sampler must be ddim or ddpm");
}

namespace {

SkewTable skew_from_json(const json& j) {
    SkewTable t;
    for (auto it = j.begin(); it != j.end(); ++it) {
        int shape = token_id(it.key());
        std::array<double, 3> probs{};
        probs[0] = it.value().value("red", 0.0);
        probs[1] = it.value().value("green", 0.0);
        probs[2] = it.value().value("blue", 0.0);
        t.rows[shape] = probs;
    }
    t.validate();
    return t;
}

json skew_to_json(const SkewTable& t) {
    json j;
    for (const auto& [shape, probs] : t.rows) {
        j[token_name(shape)] = {{"red", probs[0]}, {"green", probs[1]}, {"blue", probs[2]}};
    }
    return j;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    ExperimentConfig c;
    if (!j.contains("version")) throw std::invalid_argument("config: missing version field");
    c.version = j["version"].get<int>();
    if (c.version != 1) throw std::invalid_argument("config: unsupported version");

    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        c.total_steps = s.value("total_steps", c.total_steps);
        c.beta_start = s.value("beta_start", c.beta_start);
        c.beta_end = s.value("beta_end", c.beta_end);
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        c.model.width = m.value("width", c.model.width);
        c.model.height = m.value("height", c.model.height);
        if (m.contains("widths")) {
            auto ws = m["widths"].get<std::vector<int>>();
            if (ws.size() != 3) throw std::invalid_argument("config: model.widths needs 3 entries");
            c.model.widths = {ws[0], ws[1], ws[2]};
        }
        c.model.heads = m.value("heads", c.model.heads);
        c.model.d_attn = m.value("d_attn", c.model.d_attn);
        c.model_seed = m.value("seed", c.model_seed);
    }
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        if (d.contains("skew")) c.skew = skew_from_json(d["skew"]);
        c.dataset_count = d.value("count", c.dataset_count);
        c.dataset_seed = d.value("seed", c.dataset_seed);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        c.train_steps = t.value("steps", c.train_steps);
        c.batch_size = t.value("batch_size", c.batch_size);
        c.lr = t.value("lr", c.lr);
        c.null_drop = t.value("null_drop", c.null_drop);
        c.train_seed = t.value("seed", c.train_seed);
    }
    if (j.contains("guidance")) {
        const auto& g = j["guidance"];
        c.gamma = g.value("gamma", c.gamma);
        c.lambda = g.value("lambda", c.lambda);
        c.q = g.value("q", c.q);
        c.tau = g.value("tau", c.tau);
        c.sampler = g.value("sampler", c.sampler);
        c.sinkhorn_iters = g.value("sinkhorn_iters", c.sinkhorn_iters);
    }
    if (j.contains("audit")) {
        const auto& a = j["audit"];
        if (a.contains("prompts")) c.audit_prompts = a["prompts"].get<std::vector<std::string>>();
        c.n_images = a.value("n_images", c.n_images);
        c.base_seed = a.value("base_seed", c.base_seed);
        c.heatmaps = a.value("heatmaps", c.heatmaps);
        c.concept_color = a.value("concept_color", c.concept_color);
    }
    c.sampler_mode();  // validates
    return c;
}

std::string ExperimentConfig::to_json_string() const {
    json j;
    j["version"] = version;
    j["schedule"] = {{"total_steps", total_steps},
                     {"beta_start", beta_start},
                     {"beta_end", beta_end}};
    j["model"] = {{"width", model.width},
                  {"height", model.height},
                  {"widths", model.widths},
                  {"heads", model.heads},
                  {"d_attn", model.d_attn},
                  {"seed", model_seed}};
    j["dataset"] = {{"skew", skew_to_json(skew)},
                    {"count", dataset_count},
                    {"seed", dataset_seed}};
    j["train"] = {{"steps", train_steps},
                  {"batch_size", batch_size},
                  {"lr", lr},
                  {"null_drop", null_drop},
                  {"seed", train_seed}};
    j["guidance"] = {{"gamma", gamma},     {"lambda", lambda},
                     {"q", q},             {"tau", tau},
                     {"sampler", sampler}, {"sinkhorn_iters", sinkhorn_iters}};
    j["audit"] = {{"prompts", audit_prompts},
                  {"n_images", n_images},
                  {"base_seed", base_seed},
                  {"heatmaps", heatmaps},
                  {"concept_color", concept_color}};
    return j.dump(2);
}

std::map<std::string, std::string> ExperimentConfig::echo() const {
    std::map<std::string, std::string> e;
    e["version"] = std::to_string(version);
    e["total_steps"] = std::to_string(total_steps);
    e["gamma"] = format_double(gamma);
    e["lambda"] = format_double(lambda);
    e["q"] = format_double(q);
    e["tau"] = format_double(tau);
    e["sampler"] = sampler;
    e["n_images"] = std::to_string(n_images);
    e["base_seed"] = std::to_string(base_seed);
    std::string ps;
    for (const auto& p : audit_prompts) ps += (ps.empty() ? "" : ",") + p;
    e["prompts"] = ps;
    e["concept_color"] = concept_color;
    return e;
}

GuidanceConfig make_guidance_config(const ExperimentConfig& cfg, int shape_token,
                                    int color_token, uint64_t seed, double lambda_override) {
    GuidanceConfig g;
    g.gamma = cfg.gamma;
    g.energy_scale = lambda_override >= 0 ? lambda_override : cfg.lambda;
    g.quantile = cfg.q;
    g.tau = cfg.tau;
    g.sampler = cfg.sampler_mode();
    g.seed = seed;
    g.token_a = color_token;
    g.token_b = shape_token;
    g.prompt = {tokens::kScene, shape_token};
    g.attr_prompt = {tokens::kScene, shape_token, color_token};
    g.sinkhorn_iters = cfg.sinkhorn_iters;
    return g;
}

// ============================================================================
// per-image metrics
// ============================================================================

ImageMetrics metrics_from_trace(const Denoiser& model, const GenerationTrace& trace, int run_id,
                                uint64_t seed, int shape_token, int color_token, double q) {
    PromptEmbedding attr = model.text.encode({tokens::kScene, shape_token, color_token});
    int idx_shape = 1, idx_color = 2;

    AttributionMap map_a = aggregate_map(model, trace, attr, idx_color);
    AttributionMap map_b = aggregate_map(model, trace, attr, idx_shape);
    BinaryMask mask_a = quantile_threshold(map_a, q);
    BinaryMask mask_b = quantile_threshold(map_b, q);

    ImageMetrics im;
    im.run_id = run_id;
    im.seed = seed;
    im.profession_token = shape_token;
    im.concept_a = color_token;
    im.concept_b = shape_token;
    im.iou = iou(mask_a, mask_b);

    std::vector<std::pair<BinaryMask, BinaryMask>> pairs;
    for (int b = 0; b < kBlockCount; b++) {
        AttributionMap bm_a = blockwise_map(model, trace, attr, idx_color, kBlockNames[b]);
        AttributionMap bm_b = blockwise_map(model, trace, attr, idx_shape, kBlockNames[b]);
        pairs.emplace_back(quantile_threshold(bm_a, q), quantile_threshold(bm_b, q));
    }
    BiouResult br = biou(pairs);
    im.biou_avg = br.average;
    for (int b = 0; b < kBlockCount; b++) im.biou_block[b] = br.per_block[b];

    im.group_label =
        toy_group_classifier(trace.final_state.data, trace.width, trace.height);
    return im;
}

// ============================================================================
// audit / mitigate
// ============================================================================

namespace {

struct RunSlot {
    ImageMetrics metrics;
    EnergyTrace energy;
    AttributionMap map_a, map_b;   // kept only when heatmaps are requested
    std::vector<double> image;
    uint64_t seed = 0;
    int shape_token = 0, color_token = 0;
};

MetricsReport assemble_report(std::vector<RunSlot>& slots, const ExperimentConfig& cfg,
                              double lambda_used) {
    MetricsReport rep;
    for (auto& s : slots) rep.images.push_back(s.metrics);
    auto [mi, mb] = batch_means(rep.images);
    rep.miou = mi;
    rep.mbiou = mb;
    for (int b = 0; b < kBlockCount; b++) {
        double acc = 0.0;
        for (const auto& im : rep.images) acc += im.biou_block[b];
        rep.mbiou_block[b] = acc / (double)rep.images.size();
    }
    std::vector<std::string> labels;
    for (const auto& im : rep.images)
        if (im.group_label != "none") labels.push_back(im.group_label);
    const char* groups[3] = {"red", "green", "blue"};
    for (int i = 0; i < 3; i++)
        for (int j = i + 1; j < 3; j++) {
            std::string key = std::string(groups[i]) + "_vs_" + groups[j];
            rep.rd[key] = labels.empty() ? 0.0 : risk_difference(labels, groups[i], groups[j]);
        }
    rep.config_echo = cfg.echo();
    rep.config_echo["lambda"] = format_double(lambda_used);
    return rep;
}

void write_heatmaps(const std::string& out_dir, const std::vector<RunSlot>& slots) {
    fs::path hm = fs::path(out_dir) / "heatmaps";
    fs::create_directories(hm);
    for (const auto& s : slots) {
        std::string stem = std::string(token_name(s.shape_token)) + "_seed" +
                           std::to_string(s.seed);
        int w = s.map_a.width, h = s.map_a.height;
        write_pgm((hm / (stem + "_" + token_name(s.color_token) + ".pgm")).string(),
                  s.map_a.values, w, h);
        write_pgm((hm / (stem + "_" + token_name(s.shape_token) + ".pgm")).string(),
                  s.map_b.values, w, h);
        write_ppm((hm / (stem + ".ppm")).string(), s.image, w, h);
        write_ppm_overlay((hm / (stem + "_" + token_name(s.color_token) + "_overlay.ppm")).string(),
                          s.map_a.values, s.image, w, h);
    }
}

int resolve_concept_color(const ExperimentConfig& cfg, int shape_token) {
    if (cfg.concept_color == "auto") return cfg.skew.dominant_color(shape_token);
    int id = token_id(cfg.concept_color);
    if (!is_color_token(id)) throw std::invalid_argument("config: concept_color is not a color");
    return id;
}

}  // namespace

MetricsReport audit(const Denoiser& model, const NoiseSchedule& sched,
                    const ExperimentConfig& cfg, const std::string& out_dir) {
    const int n = cfg.n_images;
    const int np = (int)cfg.audit_prompts.size();
    if (n < 1 || np < 1) throw std::invalid_argument("audit: need prompts and n_images >= 1");

    std::vector<RunSlot> slots((size_t)np * n);
    std::vector<int> shapes(np), colors(np);
    for (int pi = 0; pi < np; pi++) {
        shapes[pi] = token_id(cfg.audit_prompts[pi]);
        if (!is_shape_token(shapes[pi]))
            throw std::invalid_argument("audit: prompt is not a shape token");
        colors[pi] = resolve_concept_color(cfg, shapes[pi]);
    }

    std::string first_error;
    #pragma omp parallel for schedule(dynamic) if(parallel_enabled())
    for (int idx = 0; idx < np * n; idx++) {
        try {
            int pi = idx / n;
            uint64_t seed = cfg.base_seed + (uint64_t)idx;
            GuidanceConfig gc = make_guidance_config(cfg, shapes[pi], colors[pi], seed, 0.0);
            CfgRunResult run = sample_cfg(model, sched, gc);
            RunSlot& s = slots[idx];
            s.metrics =
                metrics_from_trace(model, run.trace, idx, seed, shapes[pi], colors[pi], cfg.q);
            s.seed = seed;
            s.shape_token = shapes[pi];
            s.color_token = colors[pi];
            if (cfg.heatmaps) {
                PromptEmbedding attr = model.text.encode({tokens::kScene, shapes[pi], colors[pi]});
                s.map_a = aggregate_map(model, run.trace, attr, 2);
                s.map_b = aggregate_map(model, run.trace, attr, 1);
                s.image = run.trace.final_state.data;
            }
        } catch (const std::exception& e) {
            #pragma omp critical
            if (first_error.empty()) first_error = e.what();
        }
    }
    if (!first_error.empty()) throw std::runtime_error("audit: run failed: " + first_error);

    MetricsReport rep = assemble_report(slots, cfg, 0.0);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), rep.images);
        write_summary_json((fs::path(out_dir) / "summary.json").string(), rep);
        if (cfg.heatmaps) write_heatmaps(out_dir, slots);
    }
    return rep;
}

RunOutputs mitigate(const Denoiser& model, const NoiseSchedule& sched,
                    const ExperimentConfig& cfg, const std::string& out_dir) {
    const int n = cfg.n_images;
    const int np = (int)cfg.audit_prompts.size();
    if (n < 1 || np < 1) throw std::invalid_argument("mitigate: need prompts and n_images >= 1");

    std::vector<RunSlot> slots((size_t)np * n);
    std::vector<int> shapes(np), colors(np);
    for (int pi = 0; pi < np; pi++) {
        shapes[pi] = token_id(cfg.audit_prompts[pi]);
        if (!is_shape_token(shapes[pi]))
            throw std::invalid_argument("mitigate: prompt is not a shape token");
        colors[pi] = resolve_concept_color(cfg, shapes[pi]);
    }

    std::string first_error;
    #pragma omp parallel for schedule(dynamic) if(parallel_enabled())
    for (int idx = 0; idx < np * n; idx++) {
        try {
            int pi = idx / n;
            uint64_t seed = cfg.base_seed + (uint64_t)idx;
            GuidanceConfig gc = make_guidance_config(cfg, shapes[pi], colors[pi], seed);
            GuidedRunResult run = run_guided_sampling(model, sched, gc);
            RunSlot& s = slots[idx];
            s.metrics =
                metrics_from_trace(model, run.trace, idx, seed, shapes[pi], colors[pi], cfg.q);
            s.energy = std::move(run.energy_trace);
            s.seed = seed;
            s.shape_token = shapes[pi];
            s.color_token = colors[pi];
            if (cfg.heatmaps) {
                PromptEmbedding attr = model.text.encode({tokens::kScene, shapes[pi], colors[pi]});
                s.map_a = aggregate_map(model, run.trace, attr, 2);
                s.map_b = aggregate_map(model, run.trace, attr, 1);
                s.image = run.trace.final_state.data;
            }
        } catch (const std::exception& e) {
            #pragma omp critical
            if (first_error.empty()) first_error = e.what();
        }
    }
    if (!first_error.empty()) throw std::runtime_error("mitigate: run failed: " + first_error);

    RunOutputs out;
    out.report = assemble_report(slots, cfg, cfg.lambda);
    for (auto& s : slots) out.energy_traces.push_back(std::move(s.energy));
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), out.report.images);
        write_summary_json((fs::path(out_dir) / "summary.json").string(), out.report);
        fs::path ed = fs::path(out_dir) / "energy";
        fs::create_directories(ed);
        for (size_t i = 0; i < slots.size(); i++) {
            write_energy_trace_csv(
                (ed / ("trace_seed" + std::to_string(slots[i].seed) + ".csv")).string(),
                out.energy_traces[i]);
        }
        if (cfg.heatmaps) write_heatmaps(out_dir, slots);
    }
    return out;
}

// ============================================================================
// writers
// ============================================================================

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_metrics_csv(const std::string& path, const std::vector<ImageMetrics>& images) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    f << "run_id,seed,profession_token,concept_a,concept_b,iou,biou_avg,"
         "biou_down16,biou_down8,biou_mid4,biou_up8,biou_up16\n";
    for (const auto& im : images) {
        f << im.run_id << "," << im.seed << "," << im.profession_token << "," << im.concept_a
          << "," << im.concept_b << "," << format_double(im.iou) << ","
          << format_double(im.biou_avg);
        for (int b = 0; b < kBlockCount; b++) f << "," << format_double(im.biou_block[b]);
        f << "\n";
    }
    if (!f) throw std::runtime_error("write_metrics_csv: write failed");
}

void write_summary_json(const std::string& path, const MetricsReport& report) {
    json j;
    j["miou"] = report.miou;
    j["mbiou"] = report.mbiou;
    json blocks;
    for (int b = 0; b < kBlockCount; b++) blocks[kBlockNames[b]] = report.mbiou_block[b];
    j["mbiou_blocks"] = blocks;
    j["rd"] = report.rd;
    j["n_images"] = report.images.size();
    j["config"] = report.config_echo;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_summary_json: cannot open " + path);
    f << j.dump(2) << "\n";
    if (!f) throw std::runtime_error("write_summary_json: write failed");
}

void write_energy_trace_csv(const std::string& path, const EnergyTrace& trace) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_energy_trace_csv: cannot open " + path);
    f << "t,energy,grad_norm,ms\n";
    for (const auto& s : trace.steps)
        f << s.t << "," << format_double(s.energy) << "," << format_double(s.grad_norm) << ","
          << format_double(s.ms) << "\n";
    if (!f) throw std::runtime_error("write_energy_trace_csv: write failed");
}

}  // namespace entmap
