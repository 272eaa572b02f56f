#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "microexp/architecture.hpp"
#include "microexp/data.hpp"
#include "microexp/experiment.hpp"

namespace microexp {

/// Fully resolved settings of one CLI run; persisted as `run.json` so the run
/// can be replayed with `--config`.
struct RunConfig {
    std::string subcommand;
    std::string manifest;
    ModelSpec spec;
    bool all_sizes = false;   // bench --size all
    FoldMode mode = FoldMode::random;
    bool both_modes = false;  // ablate --mode both
    std::uint64_t seed = 1;
    TrainConfig train;        // distillation resolved from the fields below
    std::optional<float> temperature;
    float lambda = 0.5f;
    GradScaleMode grad_scale_mode = GradScaleMode::none;
    std::string teacher_logits;
    std::vector<float> temperatures = kTemperatureGrid;
    std::string holdout = "cv";  // cv | none | fold index
    std::size_t jobs = 1;
    std::size_t iterations = 1000;
    std::size_t warmup = 50;
    std::string checkpoint;
    std::vector<std::string> results;
    std::string out = "microexp-out";
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Writes the teacher-logit file for every manifest sample (centre-crop
/// evaluation input). Format follows the output extension.
TeacherLogits export_logits(const std::string& checkpoint_path, const std::string& manifest_path,
                            const std::string& out_path);
TeacherLogits compute_logits(const Model& model, const Dataset& data);

/// Entry point behind the `microexp` binary. Returns 0 on success, 2 on
/// argument errors (usage printed), 1 on runtime errors (JSON error on `err`).
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace microexp
