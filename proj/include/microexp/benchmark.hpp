#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "microexp/architecture.hpp"

namespace microexp {

struct BenchReport {
    ModelSpec spec;
    std::size_t parameters = 0;
    std::size_t iterations = 0;
    std::size_t warmup = 0;
    double mean_ms = 0.0;
    double median_ms = 0.0;
    double p99_ms = 0.0;
    double fps = 0.0;
    int threads = 1;
    bool pinned = false;
    std::string host;
};

/// Times `iterations` single-image forward passes on one pre-built 84×84×1
/// input after `warmup` untimed passes. Input preparation is excluded. The
/// calling thread is pinned to its current core for the duration when the
/// platform allows it.
BenchReport bench_inference(const Model& model, std::size_t iterations = 1000, std::size_t warmup = 50);

std::string host_description();

nlohmann::json to_json(const BenchReport& r);
/// Per-image runtime table: model, parameters, mean/median/p99 ms, fps.
std::string render_bench_table(const std::vector<BenchReport>& reports);

}  // namespace microexp
