#include "entmap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace entmap {

int BinaryMask::count_ones() const {
    int c = 0;
    for (uint8_t v : values) c += v;
    return c;
}

BinaryMask quantile_threshold(const AttributionMap& map, double q) {
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("quantile_threshold: q outside (0,1)");
    size_t n = map.values.size();
    if (n == 0) throw std::invalid_argument("quantile_threshold: empty map");
    for (double v : map.values)
        if (!std::isfinite(v)) throw std::invalid_argument("quantile_threshold: non-finite map");

    size_t rank = (size_t)std::ceil(q * (double)n);  // 1-based nearest rank
    rank = std::min(std::max<size_t>(rank, 1), n);
    std::vector<double> sorted(map.values);
    std::nth_element(sorted.begin(), sorted.begin() + (rank - 1), sorted.end());
    double threshold = sorted[rank - 1];

    BinaryMask m;
    m.width = map.width;
    m.height = map.height;
    m.threshold_quantile = q;
    m.source_concept = map.concept_token;
    m.values.resize(n);
    for (size_t i = 0; i < n; i++) m.values[i] = map.values[i] >= threshold ? 1 : 0;
    return m;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.width != b.width || a.height != b.height || a.values.size() != b.values.size())
        throw std::invalid_argument("iou: mask shape mismatch");
    long inter = 0, uni = 0;
    for (size_t i = 0; i < a.values.size(); i++) {
        inter += a.values[i] & b.values[i];
        uni += a.values[i] | b.values[i];
    }
    if (uni == 0) return 0.0;  // both empty
    return (double)inter / (double)uni;
}

BiouResult biou(const std::vector<std::pair<BinaryMask, BinaryMask>>& per_block_pairs) {
    if (per_block_pairs.empty()) throw std::invalid_argument("biou: empty block list");
    BiouResult r;
    r.per_block.reserve(per_block_pairs.size());
    double acc = 0.0;
    for (const auto& [a, b] : per_block_pairs) {
        double v = iou(a, b);
        r.per_block.push_back(v);
        acc += v;
    }
    r.average = acc / (double)per_block_pairs.size();
    return r;
}

double risk_difference(const std::vector<std::string>& labels, const std::string& g1,
                       const std::string& g2) {
    if (labels.empty()) throw std::invalid_argument("risk_difference: empty label sequence");
    double n1 = 0, n2 = 0;
    for (const auto& l : labels) {
        if (l == g1) n1 += 1;
        if (l == g2) n2 += 1;
    }
    return std::abs(n1 - n2) / (double)labels.size();
}

std::pair<double, double> batch_means(const std::vector<ImageMetrics>& images) {
    if (images.empty()) throw std::invalid_argument("batch_means: empty report");
    double si = 0.0, sb = 0.0;
    for (const auto& im : images) {
        si += im.iou;
        sb += im.biou_avg;
    }
    double n = (double)images.size();
    return {si / n, sb / n};
}

}  // namespace entmap
