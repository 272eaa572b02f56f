#include "microexp/benchmark.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#if defined(__linux__)
#include <sched.h>
#include <sys/utsname.h>
#endif

#include "microexp/errors.hpp"

namespace microexp {

namespace {

// Pins the calling thread to the core it is running on; restores the
// original affinity on destruction.
class CorePin {
public:
    CorePin() {
#if defined(__linux__)
        if (sched_getaffinity(0, sizeof original_, &original_) != 0) return;
        const int cpu = sched_getcpu();
        if (cpu < 0) return;
        cpu_set_t one;
        CPU_ZERO(&one);
        CPU_SET(cpu, &one);
        pinned_ = sched_setaffinity(0, sizeof one, &one) == 0;
#endif
    }
    ~CorePin() {
#if defined(__linux__)
        if (pinned_) sched_setaffinity(0, sizeof original_, &original_);
#endif
    }
    CorePin(const CorePin&) = delete;
    CorePin& operator=(const CorePin&) = delete;
    bool pinned() const { return pinned_; }

private:
#if defined(__linux__)
    cpu_set_t original_{};
#endif
    bool pinned_ = false;
};

double percentile(std::vector<double> sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double rank = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = static_cast<std::size_t>(std::ceil(rank));
    return sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - static_cast<double>(lo));
}

}  // namespace

std::string host_description() {
    std::string cpu;
    std::ifstream info("/proc/cpuinfo");
    for (std::string line; std::getline(info, line);)
        if (line.rfind("model name", 0) == 0) {
            cpu = line.substr(line.find(':') + 2);
            break;
        }
    if (cpu.empty()) cpu = "unknown cpu";
    std::ostringstream s;
    s << cpu << ", " << std::thread::hardware_concurrency() << " logical cores";
#if defined(__linux__)
    utsname u{};
    if (uname(&u) == 0) s << ", " << u.sysname << ' ' << u.release;
#endif
    return s.str();
}

BenchReport bench_inference(const Model& model, std::size_t iterations, std::size_t warmup) {
    if (iterations < 100) throw ValidationError("bench_inference: need at least 100 iterations");
    BenchReport r;
    r.spec = model.spec();
    r.parameters = model.parameter_count();
    r.iterations = iterations;
    r.warmup = warmup;
    r.host = host_description();

    Tensor input({kInputSize, kInputSize, 1});
    Rng rng(0x5eed);
    for (auto& v : input.data()) v = rng.uniform();
    Workspace ws;
    std::vector<double> samples(iterations);
    volatile float sink = 0.0f;

    CorePin pin;
    r.pinned = pin.pinned();
    for (std::size_t i = 0; i < warmup; ++i) sink = sink + model.infer(input, ws)[0];
    for (std::size_t i = 0; i < iterations; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto logits = model.infer(input, ws);
        const auto t1 = std::chrono::steady_clock::now();
        sink = sink + logits[0];
        samples[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }

    double total = 0.0;
    for (double s : samples) total += s;
    r.mean_ms = total / static_cast<double>(iterations);
    std::sort(samples.begin(), samples.end());
    r.median_ms = percentile(samples, 0.5);
    r.p99_ms = percentile(samples, 0.99);
    r.fps = 1000.0 / r.mean_ms;
    return r;
}

nlohmann::json to_json(const BenchReport& r) {
    return {{"spec", {{"size_class", to_string(r.spec.size_class)}, {"variant", to_string(r.spec.variant)}}},
            {"parameters", r.parameters},
            {"iterations", r.iterations},
            {"warmup", r.warmup},
            {"mean_ms", r.mean_ms},
            {"median_ms", r.median_ms},
            {"p99_ms", r.p99_ms},
            {"fps", r.fps},
            {"threads", r.threads},
            {"pinned", r.pinned},
            {"host", r.host},
            {"timing", "forward pass only; input preparation excluded"}};
}

std::string render_bench_table(const std::vector<BenchReport>& reports) {
    std::ostringstream out;
    char line[160];
    out << "Per-image inference runtime (single thread, forward pass only, preprocessing excluded)\n";
    if (!reports.empty()) out << "Host: " << reports.front().host << "\n";
    std::snprintf(line, sizeof line, "  %-10s %12s %10s %10s %10s %10s\n", "Model", "Parameters", "mean ms", "median ms",
                  "p99 ms", "fps");
    out << line;
    for (const auto& r : reports) {
        std::snprintf(line, sizeof line, "  %-10s %12zu %10.3f %10.3f %10.3f %10.0f\n", r.spec.name().c_str(),
                      r.parameters, r.mean_ms, r.median_ms, r.p99_ms, r.fps);
        out << line;
    }
    return out.str();
}

}  // namespace microexp
