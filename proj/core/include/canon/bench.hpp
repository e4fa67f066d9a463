#pragma once

#include <functional>
#include <string>
#include <vector>

#include "canon/config.hpp"

namespace canon {

struct BenchRow {
    std::string component;
    std::size_t group_order = 0;  // 0 when not applicable
    double median_ms = 0.0;       // per timed call (one batch)
    double iqr_ms = 0.0;
    std::size_t reps = 0;
};

/// Median and interquartile range of >= reps timed calls, after warmup.
BenchRow time_callable(const std::string& component, std::size_t group_order,
                       const std::function<void()>& fn, std::size_t reps);

/// Inference timing table: point-cloud predictor alone, canonicalizer alone
/// and the full pipeline on the shapes task, plus the image canonicalizer and
/// a full group-convolution predictor baseline across group orders.
std::vector<BenchRow> benchmark_inference(const ExperimentConfig& cfg);

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);

}  // namespace canon
