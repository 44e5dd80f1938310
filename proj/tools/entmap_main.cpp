// Command-line front end: train / generate-dataset / audit / mitigate /
// gradcheck / report.
//
// Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "entmap/guidance.hpp"
#include "entmap/harness.hpp"
#include "entmap/softselect.hpp"
#include "entmap/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace entmap;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out;
    std::string model_path;
    std::string dataset_path;
    double lambda = -1, gamma = -1, q = -1, tau = -1;
    long long seed = -1;
    int steps = -1;
    std::string sampler;
    std::string heatmaps;
};

ExperimentConfig load_config(const CommonFlags& f) {
    ExperimentConfig cfg;
    if (!f.config_path.empty()) cfg = ExperimentConfig::from_json_file(f.config_path);
    if (f.lambda >= 0) cfg.lambda = f.lambda;
    if (f.gamma >= 0) cfg.gamma = f.gamma;
    if (f.q >= 0) cfg.q = f.q;
    if (f.tau >= 0) cfg.tau = f.tau;
    if (f.steps > 0) cfg.total_steps = f.steps;
    if (f.seed >= 0) cfg.base_seed = (uint64_t)f.seed;
    if (!f.sampler.empty()) cfg.sampler = f.sampler;
    if (!f.heatmaps.empty()) cfg.heatmaps = f.heatmaps == "on";
    cfg.sampler_mode();  // validate
    return cfg;
}

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file");
    cmd->add_option("--seed", f.seed, "base seed override");
    cmd->add_option("--lambda", f.lambda, "energy guidance scale");
    cmd->add_option("--gamma", f.gamma, "classifier-free guidance scale");
    cmd->add_option("--q", f.q, "quantile threshold");
    cmd->add_option("--tau", f.tau, "Sinkhorn regularization");
    cmd->add_option("--steps", f.steps, "diffusion steps override");
    cmd->add_option("--sampler", f.sampler, "ddim or ddpm")
        ->check(CLI::IsMember({"ddim", "ddpm"}));
    cmd->add_option("--out", f.out, "output directory or file");
    cmd->add_option("--heatmaps", f.heatmaps, "on or off")->check(CLI::IsMember({"on", "off"}));
}

int cmd_generate_dataset(const CommonFlags& f) {
    ExperimentConfig cfg = load_config(f);
    if (f.out.empty()) {
        std::cerr << "generate-dataset: --out <dir> is required\n";
        return 1;
    }
    Dataset d = generate_dataset(cfg.skew, cfg.dataset_count, cfg.model.width, cfg.model.height,
                                 cfg.dataset_seed);
    save_dataset(f.out, d);
    std::cout << "wrote " << d.items.size() << " samples to " << f.out << " (hash "
              << d.content_hash() << ")\n";
    return 0;
}

int cmd_train(const CommonFlags& f) {
    ExperimentConfig cfg = load_config(f);
    if (f.out.empty()) {
        std::cerr << "train: --out <checkpoint> is required\n";
        return 1;
    }
    Dataset data = f.dataset_path.empty()
                       ? generate_dataset(cfg.skew, cfg.dataset_count, cfg.model.width,
                                          cfg.model.height, cfg.dataset_seed)
                       : load_dataset(f.dataset_path);
    std::vector<TrainItem> items = dataset_to_train_items(data);

    NoiseSchedule sched = build_schedule(cfg.total_steps, cfg.beta_start, cfg.beta_end);
    Denoiser model = Denoiser::init(cfg.model, cfg.model_seed);
    TrainOptions opt;
    opt.lr = cfg.lr;
    opt.null_drop = cfg.null_drop;

    Rng rng(cfg.train_seed);
    double first = 0, last = 0;
    for (int step = 0; step < cfg.train_steps; step++) {
        std::vector<TrainItem> batch(cfg.batch_size);
        for (int i = 0; i < cfg.batch_size; i++)
            batch[i] = items[rng.uniform_int(items.size())];
        double loss = train_step(model, sched, batch, rng, opt);
        if (step == 0) first = loss;
        last = loss;
        if (step % 100 == 0) std::printf("step %5d  loss %.6f\n", step, loss);
    }
    std::printf("trained %d steps: loss %.6f -> %.6f\n", cfg.train_steps, first, last);
    save_checkpoint(f.out, model, sched);
    std::cout << "checkpoint written to " << f.out << "\n";
    return 0;
}

int cmd_audit(const CommonFlags& f) {
    ExperimentConfig cfg = load_config(f);
    if (f.model_path.empty() || f.out.empty()) {
        std::cerr << "audit: --model <ckpt> and --out <dir> are required\n";
        return 1;
    }
    auto [model, sched] = load_checkpoint(f.model_path);
    if (f.steps > 0) sched = build_schedule(f.steps, cfg.beta_start, cfg.beta_end);
    MetricsReport rep = audit(model, sched, cfg, f.out);
    std::printf("audit: %zu images  mIoU %.4f  mBIoU %.4f\n", rep.images.size(), rep.miou,
                rep.mbiou);
    for (const auto& [k, v] : rep.rd) std::printf("  RD %-14s %.4f\n", k.c_str(), v);
    return 0;
}

int cmd_mitigate(const CommonFlags& f) {
    ExperimentConfig cfg = load_config(f);
    if (f.model_path.empty() || f.out.empty()) {
        std::cerr << "mitigate: --model <ckpt> and --out <dir> are required\n";
        return 1;
    }
    auto [model, sched] = load_checkpoint(f.model_path);
    if (f.steps > 0) sched = build_schedule(f.steps, cfg.beta_start, cfg.beta_end);
    RunOutputs out = mitigate(model, sched, cfg, f.out);
    double mean_final = 0;
    for (const auto& tr : out.energy_traces) mean_final += tr.final_energy;
    mean_final /= (double)out.energy_traces.size();
    std::printf("mitigate: %zu images  mIoU %.4f  mBIoU %.4f  mean final E %.4f (lambda %.1f)\n",
                out.report.images.size(), out.report.miou, out.report.mbiou, mean_final,
                cfg.lambda);
    return 0;
}

int cmd_gradcheck(const CommonFlags& f) {
    ExperimentConfig cfg = load_config(f);
    double tau = f.tau >= 0 ? f.tau : cfg.tau;
    uint64_t seed = f.seed >= 0 ? (uint64_t)f.seed : 99;

    // 8x8 map pair through the soft-selection pipeline vs central differences
    Rng rng(seed);
    int n = 64;
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = rng.uniform();
    for (auto& v : b) v = rng.uniform();
    int k = topk_count_for_quantile(n, cfg.q);

    SoftIoUGradResult g = soft_iou_gradient(a, b, k, tau);
    double h = 1e-4, worst = 0;
    for (int i = 0; i < n; i++) {
        std::vector<double> ap = a, am = a;
        ap[i] += h;
        am[i] -= h;
        double fd = (soft_iou_gradient(ap, b, k, tau).energy -
                     soft_iou_gradient(am, b, k, tau).energy) /
                    (2 * h);
        double scale = std::max({std::abs(fd), std::abs(g.grad_a[i]), 1e-8});
        worst = std::max(worst, std::abs(fd - g.grad_a[i]) / scale);
    }
    std::printf("gradcheck: soft-selection pipeline max rel err %.3e (tau %.3g, k %d)\n", worst,
                tau, k);

    // full energy chain on a reduced model
    ModelConfig mc;
    mc.width = mc.height = 8;
    mc.widths = {8, 12, 16};
    Denoiser model = Denoiser::init(mc, seed);
    NoiseSchedule sched = build_schedule(10, 1e-4, 0.02);
    GuidanceConfig gc = make_guidance_config(cfg, tokens::kCircle, tokens::kRed, seed);
    gc.tau = tau;
    Rng zrng(seed + 1);
    LatentState z = make_noise_latent(8, 8, 3, 5, zrng);

    EnergyResult er = energy(model, z, gc);
    double worst_e = 0;
    for (size_t i = 0; i < z.data.size(); i++) {
        LatentState zp = z, zm = z;
        zp.data[i] += h;
        zm.data[i] -= h;
        double fd = (energy(model, zp, gc).energy - energy(model, zm, gc).energy) / (2 * h);
        double scale = std::max({std::abs(fd), std::abs(er.grad[i]), 1e-8});
        worst_e = std::max(worst_e, std::abs(fd - er.grad[i]) / scale);
    }
    std::printf("gradcheck: energy chain max rel err %.3e (E %.4f)\n", worst_e, er.energy);

    if (worst > 1e-3 || worst_e > 1e-3) {
        std::cerr << "gradcheck FAILED (tolerance 1e-3)\n";
        return 3;
    }
    std::cout << "gradcheck passed\n";
    return 0;
}

int cmd_report(const CommonFlags& f) {
    if (f.out.empty()) {
        std::cerr << "report: --out <dir> with audit/ and/or mitigate/ results is required\n";
        return 1;
    }
    json combined;
    bool any = false;
    for (const char* part : {"audit", "mitigate"}) {
        fs::path p = fs::path(f.out) / part / "summary.json";
        if (fs::exists(p)) {
            std::ifstream in(p);
            json j;
            in >> j;
            combined[part] = j;
            any = true;
            std::printf("%-8s  mIoU %.4f  mBIoU %.4f\n", part, j["miou"].get<double>(),
                        j["mbiou"].get<double>());
        }
    }
    if (!any) {
        std::cerr << "report: no summary.json found under " << f.out << "\n";
        return 2;
    }
    if (combined.contains("audit") && combined.contains("mitigate")) {
        double a = combined["audit"]["miou"].get<double>();
        double m = combined["mitigate"]["miou"].get<double>();
        double red = a > 0 ? (a - m) / a * 100.0 : 0.0;
        combined["miou_reduction_percent"] = red;
        std::printf("mIoU reduction: %.1f%%\n", red);
    }
    std::ofstream out(fs::path(f.out) / "report.json");
    out << combined.dump(2) << "\n";
    std::cout << "wrote " << (fs::path(f.out) / "report.json").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"concept-entanglement auditing and energy-guided mitigation for a toy "
                 "text-conditioned diffusion model"};
    app.require_subcommand(1);

    CommonFlags f;
    auto* gen = app.add_subcommand("generate-dataset", "render the synthetic biased dataset");
    add_common(gen, f);
    auto* train = app.add_subcommand("train", "train the toy denoiser");
    add_common(train, f);
    train->add_option("--dataset", f.dataset_path, "pre-generated dataset directory");
    auto* auditc = app.add_subcommand("audit", "sample and measure entanglement");
    add_common(auditc, f);
    auditc->add_option("--model", f.model_path, "checkpoint path");
    auto* mit = app.add_subcommand("mitigate", "energy-guided sampling and metrics");
    add_common(mit, f);
    mit->add_option("--model", f.model_path, "checkpoint path");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    add_common(grad, f);
    auto* rep = app.add_subcommand("report", "combine audit/mitigate summaries");
    add_common(rep, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_generate_dataset(f);
        if (train->parsed()) return cmd_train(f);
        if (auditc->parsed()) return cmd_audit(f);
        if (mit->parsed()) return cmd_mitigate(f);
        if (grad->parsed()) return cmd_gradcheck(f);
        if (rep->parsed()) return cmd_report(f);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
