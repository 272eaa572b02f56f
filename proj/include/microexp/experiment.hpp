#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "microexp/architecture.hpp"
#include "microexp/data.hpp"
#include "microexp/distillation.hpp"

namespace microexp {

/// Paper-scale runs use 3000 epochs; the default is sized for a desk run.
struct TrainConfig {
    std::size_t epochs = 60;
    std::size_t batch_size = 64;
    float learning_rate = 1e-4f;
    float dropout = 0.5f;
    std::uint64_t seed = 1;
    /// Train on the 8 corner/side crops of every image; off trains on the
    /// centre crop only.
    bool augment = true;
    std::optional<DistillationConfig> distillation;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// A manifest together with its decoded source images (96×96).
struct Dataset {
    DatasetManifest manifest;
    std::vector<Tensor> images;

    static Dataset load(DatasetManifest manifest);
    std::size_t size() const noexcept { return manifest.size(); }
};

struct TrainHistory {
    std::vector<double> epoch_loss;
    std::vector<std::string> trained_ids;
};

/// Seeds derived from a run seed; logged so any fold can be replayed alone.
std::uint64_t model_seed_for_fold(std::uint64_t run_seed, std::size_t fold);
std::uint64_t train_seed_for_fold(std::uint64_t run_seed, std::size_t fold);

/// Trains `model` in place on `train_indices`. Teacher logits must be given
/// exactly when `cfg.distillation` is set.
TrainHistory train(Model& model, const Dataset& data, std::span<const std::size_t> train_indices,
                   const TrainConfig& cfg, const TeacherLogits* teacher = nullptr);
/// Trains on every fold except `fold_index`.
TrainHistory train(Model& model, const Dataset& data, const FoldSplit& split, std::size_t fold_index,
                   const TrainConfig& cfg, const TeacherLogits* teacher = nullptr);

struct Evaluation {
    std::size_t correct = 0;
    std::size_t total = 0;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
    double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Argmax over the first `class_count` logits; ties go to the lower index.
std::size_t predict_class(std::span<const float> logits, std::size_t class_count);

/// Centre-crop evaluation of the given samples.
Evaluation evaluate(const Model& model, const Dataset& data, std::span<const std::size_t> indices);
Evaluation evaluate(const Model& model, const Dataset& data, const FoldSplit& split, std::size_t fold_index);

struct ExperimentResult {
    std::string experiment = "cv";  // cv | sweep | ablation
    ModelSpec spec;
    FoldMode mode = FoldMode::random;
    TrainConfig config;
    std::size_t parameters = 0;
    std::vector<double> fold_accuracies;
    std::vector<double> fold_train_loss;  // final-epoch training loss per fold
    double mean_accuracy = 0.0;
    std::vector<std::vector<std::size_t>> confusion;  // summed over folds
    std::vector<std::uint64_t> fold_model_seeds;
    bool best = false;
    /// Excluded from the serialized record so replays compare bit-identical.
    double wall_clock_seconds = 0.0;

    std::optional<float> temperature() const {
        return config.distillation ? std::optional<float>(config.distillation->temperature) : std::nullopt;
    }
};

double mean_of(const std::vector<double>& values);

struct RunOptions {
    std::size_t jobs = 1;
    std::function<void(const std::string&)> log;
};

/// Ten train/evaluate rounds, one per held-out fold.
ExperimentResult cross_validate(const ModelSpec& spec, const Dataset& data, FoldMode mode, const TrainConfig& cfg,
                                const TeacherLogits* teacher = nullptr, const RunOptions& options = {});

inline const std::vector<float> kTemperatureGrid = {2, 4, 8, 16, 20, 32, 64};

/// One cross-validation per temperature; the best mean is flagged (ties go to
/// the lowest temperature).
std::vector<ExperimentResult> temperature_sweep(const ModelSpec& spec, const Dataset& data, FoldMode mode,
                                                const TrainConfig& cfg, const TeacherLogits& teacher,
                                                const std::vector<float>& temperatures = kTemperatureGrid,
                                                const RunOptions& options = {});
std::size_t flag_best(std::vector<ExperimentResult>& results);

/// Cross-validates the v, p1, p2 and p12 candidates of one size class.
std::vector<ExperimentResult> pooling_ablation(SizeClass size_class, const Dataset& data, FoldMode mode,
                                               const TrainConfig& cfg, const RunOptions& options = {});

nlohmann::json to_json(const ExperimentResult& r);
ExperimentResult result_from_json(const nlohmann::json& j);

void write_results_jsonl(const std::string& path, const std::vector<ExperimentResult>& results, bool append = false);
std::vector<ExperimentResult> read_results_jsonl(const std::string& path);
/// Flat `spec,variant,mode,T,fold,accuracy` rows.
void write_results_csv(const std::string& path, const std::vector<ExperimentResult>& results);
std::string results_csv(const std::vector<ExperimentResult>& results);

/// Text tables: pooling ablation blocks per split mode, accuracy vs T for
/// sweeps, and a per-model accuracy table for plain runs.
std::string render_report(const std::vector<ExperimentResult>& results);

}  // namespace microexp
