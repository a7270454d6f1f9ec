#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfm/autodiff.hpp"

namespace sfm::cli {

// Entry point shared by the binary and in-process tests; args excludes the
// program name. Exit codes: 0 success, 2 config error, 1 runtime failure.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

// One randomized full-objective problem (both directions, K objects, every
// loss term active) checked against central finite differences.
ad::GradCheckResult gradcheck_trial(std::uint64_t seed, int h, int w, int K);

// trials independent problems, run across the worker budget; results are in
// trial order and independent of the thread count.
std::vector<ad::GradCheckResult> gradcheck_suite(int trials, int size, int K,
                                                 std::uint64_t seed);

// SFM_THREADS when set to a positive integer, else hardware concurrency.
int thread_budget();

}  // namespace sfm::cli
