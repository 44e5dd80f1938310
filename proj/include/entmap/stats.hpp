#pragma once

#include <vector>

namespace entmap {

double mean_of(const std::vector<double>& v);
double sample_stddev(const std::vector<double>& v);

// Standard error of the mean paired difference a - b.
double paired_diff_se(const std::vector<double>& a, const std::vector<double>& b);

// One-sided exact sign test: probability of >= wins successes out of n fair
// coin flips. Ties must be excluded by the caller.
double sign_test_p(int wins, int n);

}  // namespace entmap
