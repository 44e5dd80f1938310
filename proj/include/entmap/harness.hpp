#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "entmap/guidance.hpp"
#include "entmap/metrics.hpp"

namespace entmap {

// ============================================================================
// toy scene vocabulary
// ============================================================================

namespace tokens {
constexpr int kNull = 0;
constexpr int kCircle = 1;
constexpr int kSquare = 2;
constexpr int kBar = 3;
constexpr int kRed = 4;
constexpr int kGreen = 5;
constexpr int kBlue = 6;
// Fixed context token opening every prompt; gives the softmax a third place
// to park attention mass so concept maps are not forced complementary.
constexpr int kScene = 7;
}  // namespace tokens

const char* token_name(int id);
int token_id(const std::string& name);
bool is_shape_token(int id);
bool is_color_token(int id);

// ============================================================================
// scenes and datasets
// ============================================================================

struct SceneSpec {
    int shape_token = tokens::kCircle;
    int color_token = tokens::kRed;
};

struct RenderedScene {
    std::vector<double> image;  // [H][W][3] in [-1, 1], background mid-gray 0
    std::vector<uint8_t> mask;  // [H][W] foreground support
};

// Deterministic placement per shape token plus small seeded pixel jitter.
RenderedScene render_scene(const SceneSpec& spec, int width, int height, uint64_t seed);
std::vector<uint8_t> ground_truth_mask(int shape_token, int width, int height);

// Co-occurrence table P(color | shape) over (red, green, blue).
struct SkewTable {
    std::map<int, std::array<double, 3>> rows;

    void validate() const;
    static SkewTable default_table();  // each shape favors one color at 0.9
    int dominant_color(int shape_token) const;
    int sample_color(int shape_token, double u) const;
};

struct DatasetItem {
    int shape_token = 0;
    int color_token = 0;
    std::vector<int> prompt;  // [scene, shape, color]
    std::vector<double> image;
    std::vector<uint8_t> gt_mask;
};

struct Dataset {
    int width = 0, height = 0, channels = 3;
    uint64_t seed = 0;
    std::vector<DatasetItem> items;

    uint64_t content_hash() const;  // FNV-1a over labels and image bytes
};

Dataset generate_dataset(const SkewTable& skew, int count, int width, int height, uint64_t seed);
void save_dataset(const std::string& dir, const Dataset& d);
Dataset load_dataset(const std::string& dir);

std::vector<TrainItem> dataset_to_train_items(const Dataset& d);

// Dominant-channel label over foreground pixels (deviation from mid-gray
// > 0.1). Ties resolve in red < green < blue order; no foreground -> "none".
std::string toy_group_classifier(const std::vector<double>& image, int width, int height);

// ============================================================================
// experiment configuration (JSON schema, versioned)
// ============================================================================

struct ExperimentConfig {
    int version = 1;

    int total_steps = 50;
    double beta_start = 1e-4, beta_end = 0.02;

    ModelConfig model;
    uint64_t model_seed = 42;

    SkewTable skew = SkewTable::default_table();
    int dataset_count = 512;
    uint64_t dataset_seed = 7;

    int train_steps = 2000;
    int batch_size = 16;
    double lr = 3e-3;
    double null_drop = 0.1;
    uint64_t train_seed = 1;

    double gamma = 7.5;
    double lambda = 100.0;
    double q = 0.7;
    double tau = 0.1;
    std::string sampler = "ddim";
    int sinkhorn_iters = 60;

    std::vector<std::string> audit_prompts = {"circle"};
    int n_images = 20;
    uint64_t base_seed = 1000;
    bool heatmaps = false;
    std::string concept_color = "auto";  // demographics token; auto = skew-dominant

    SamplerMode sampler_mode() const;
    static ExperimentConfig from_json_file(const std::string& path);
    std::string to_json_string() const;
    std::map<std::string, std::string> echo() const;
};

// Guidance config for one prompt under this experiment; lambda_override < 0
// keeps the config value.
GuidanceConfig make_guidance_config(const ExperimentConfig& cfg, int shape_token,
                                    int color_token, uint64_t seed, double lambda_override = -1);

// ============================================================================
// audit / mitigate drivers
// ============================================================================

ImageMetrics metrics_from_trace(const Denoiser& model, const GenerationTrace& trace, int run_id,
                                uint64_t seed, int shape_token, int color_token, double q);

struct RunOutputs {
    MetricsReport report;
    std::vector<EnergyTrace> energy_traces;  // empty for plain audits
};

// Plain CFG sampling per seed, post-hoc metrics, CSV/JSON (+ optional
// heatmaps) under out_dir. Empty out_dir skips file output.
MetricsReport audit(const Denoiser& model, const NoiseSchedule& sched,
                    const ExperimentConfig& cfg, const std::string& out_dir);

// Energy-guided sampling with the same seed layout as audit.
RunOutputs mitigate(const Denoiser& model, const NoiseSchedule& sched,
                    const ExperimentConfig& cfg, const std::string& out_dir);

void write_metrics_csv(const std::string& path, const std::vector<ImageMetrics>& images);
void write_summary_json(const std::string& path, const MetricsReport& report);
void write_energy_trace_csv(const std::string& path, const EnergyTrace& trace);
std::string format_double(double v);

}  // namespace entmap
