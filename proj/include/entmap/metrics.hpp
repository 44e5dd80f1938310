#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "entmap/attribution.hpp"

namespace entmap {

struct BinaryMask {
    int width = 0, height = 0;
    std::vector<uint8_t> values;  // 0/1
    double threshold_quantile = 0.0;
    int source_concept = -1;

    int count_ones() const;
};

// Nearest-rank quantile threshold: v = ceil(q*n)-th smallest value, mask = 1
// where value >= v.
BinaryMask quantile_threshold(const AttributionMap& map, double q);

double iou(const BinaryMask& a, const BinaryMask& b);

struct BiouResult {
    std::vector<double> per_block;
    double average = 0.0;
};

BiouResult biou(const std::vector<std::pair<BinaryMask, BinaryMask>>& per_block_pairs);

// |Pr(g1) - Pr(g2)| with empirical frequencies over the label sequence.
double risk_difference(const std::vector<std::string>& labels, const std::string& g1,
                       const std::string& g2);

struct ImageMetrics {
    int run_id = 0;
    uint64_t seed = 0;
    int profession_token = -1;  // semantics token (shape)
    int concept_a = -1;         // demographics token (color)
    int concept_b = -1;         // semantics token
    double iou = 0.0;
    double biou_avg = 0.0;
    std::array<double, kBlockCount> biou_block{};
    std::string group_label;
};

struct MetricsReport {
    std::vector<ImageMetrics> images;
    double miou = 0.0;
    double mbiou = 0.0;
    std::array<double, kBlockCount> mbiou_block{};  // per-block means across images
    std::map<std::string, double> rd;               // e.g. "red_vs_green" -> value
    std::map<std::string, std::string> config_echo;
};

// Arithmetic means of the stored per-image IoU and BIoU-average values.
std::pair<double, double> batch_means(const std::vector<ImageMetrics>& images);

}  // namespace entmap
