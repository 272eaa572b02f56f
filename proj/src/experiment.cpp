#include "microexp/experiment.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "microexp/errors.hpp"

namespace microexp {

using nlohmann::json;

namespace {

constexpr std::size_t kCenterCrop = 8;  // pseudo crop index: evaluation crop

std::string format_double(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string format_float(float v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

CropOrigin origin_for(std::size_t crop_index, const Tensor& image) {
    if (crop_index == kCenterCrop) return {(image.dim(0) - kCropSize) / 2, (image.dim(1) - kCropSize) / 2};
    return crop_origin(static_cast<CropPosition>(crop_index), image.dim(0), image.dim(1), kCropSize);
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%6.2f%%", 100.0 * v);
    return buf;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(learning_rate > 0.0f)) throw ValidationError("learning rate must be positive");
    if (!(dropout >= 0.0f && dropout < 1.0f)) throw ValidationError("dropout must be in [0, 1)");
    if (distillation) distillation->validate();
}

json to_json(const TrainConfig& cfg) {
    json j = {{"epochs", cfg.epochs},           {"batch_size", cfg.batch_size}, {"learning_rate", cfg.learning_rate},
              {"dropout", cfg.dropout},         {"seed", cfg.seed},             {"augment", cfg.augment},
              {"distillation", nullptr}};
    if (cfg.distillation)
        j["distillation"] = {{"temperature", cfg.distillation->temperature},
                             {"lambda", cfg.distillation->lambda},
                             {"grad_scale_mode", to_string(cfg.distillation->grad_scale_mode)}};
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    try {
        TrainConfig cfg;
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        cfg.dropout = j.value("dropout", cfg.dropout);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.augment = j.value("augment", cfg.augment);
        if (j.contains("distillation") && !j.at("distillation").is_null()) {
            const auto& d = j.at("distillation");
            DistillationConfig dc;
            dc.temperature = d.at("temperature").get<float>();
            dc.lambda = d.value("lambda", dc.lambda);
            dc.grad_scale_mode = parse_grad_scale_mode(d.value("grad_scale_mode", std::string("none")));
            cfg.distillation = dc;
        }
        return cfg;
    } catch (const json::exception& e) {
        throw FormatError(std::string("train config JSON: ") + e.what());
    }
}

Dataset Dataset::load(DatasetManifest manifest) {
    Dataset d;
    d.images = load_images(manifest);
    d.manifest = std::move(manifest);
    return d;
}

std::uint64_t model_seed_for_fold(std::uint64_t run_seed, std::size_t fold) { return mix_seed(run_seed, 1000 + fold); }
std::uint64_t train_seed_for_fold(std::uint64_t run_seed, std::size_t fold) { return mix_seed(run_seed, 2000 + fold); }

TrainHistory train(Model& model, const Dataset& data, std::span<const std::size_t> train_indices,
                   const TrainConfig& cfg, const TeacherLogits* teacher) {
    cfg.validate();
    if (cfg.distillation && !teacher) throw ConfigError("distillation is enabled but no teacher logits were supplied");
    if (!cfg.distillation && teacher) throw ConfigError("teacher logits supplied without a distillation config");
    if (train_indices.empty()) throw ValidationError("train: empty training set");

    TrainHistory history;
    for (auto i : train_indices) history.trained_ids.push_back(data.manifest.samples.at(i).id);
    if (teacher) teacher->require_coverage(history.trained_ids);
    for (auto i : train_indices)
        if (static_cast<std::size_t>(data.manifest.samples[i].label) >= kNumClasses)
            throw ValidationError("train: label outside the 8-way output");

    model.set_dropout_rate(cfg.dropout);
    Rng rng(cfg.seed);

    struct Item {
        std::uint32_t sample;
        std::uint32_t crop;
    };
    std::vector<Item> items;
    for (auto i : train_indices) {
        if (cfg.augment)
            for (std::uint32_t c = 0; c < 8; ++c) items.push_back({static_cast<std::uint32_t>(i), c});
        else
            items.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(kCenterCrop)});
    }

    auto params = model.parameters();
    std::vector<AdamState> adam;
    for (Tensor* p : params) adam.push_back(AdamState::for_shape(p->shape(), cfg.learning_rate));
    Gradients grads = model.zero_gradients();
    Workspace ws;
    Tensor crop;
    Tensor student({1, kNumClasses}), teacher_row({1, kNumClasses}), onehot({1, kNumClasses});
    std::vector<float> d_logits(kNumClasses);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(std::span<Item>(items));
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < items.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(items.size(), start + cfg.batch_size);
            const float inv_batch = 1.0f / static_cast<float>(end - start);
            grads.zero();
            for (std::size_t b = start; b < end; ++b) {
                const Sample& s = data.manifest.samples[items[b].sample];
                const Tensor& image = data.images[items[b].sample];
                crop_into(image, origin_for(items[b].crop, image), kCropSize, crop);
                const auto logits = model.forward_train(crop, rng, ws);
                std::copy(logits.begin(), logits.end(), student.data().begin());
                onehot.fill(0.0f);
                onehot[static_cast<std::size_t>(s.label)] = 1.0f;

                double loss;
                if (cfg.distillation) {
                    const auto z = teacher->at(s.id);
                    std::copy(z.begin(), z.end(), teacher_row.data().begin());
                    const KdLoss kd = kd_loss(student, teacher_row, onehot, *cfg.distillation);
                    loss = kd.loss;
                    for (std::size_t c = 0; c < kNumClasses; ++c) d_logits[c] = kd.d_logits[c] * inv_batch;
                } else {
                    float p[kNumClasses];
                    softmax_into(logits, p);
                    loss = -std::log(std::max(p[s.label], kLogClamp));
                    for (std::size_t c = 0; c < kNumClasses; ++c) d_logits[c] = (p[c] - onehot[c]) * inv_batch;
                }
                if (!std::isfinite(loss)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
                epoch_loss += loss;
                model.backward(crop, d_logits, ws, grads);
            }
            for (std::size_t p = 0; p < params.size(); ++p) adam_step(adam[p], *params[p], grads.tensors[p]);
        }
        history.epoch_loss.push_back(epoch_loss / static_cast<double>(items.size()));
    }
    return history;
}

TrainHistory train(Model& model, const Dataset& data, const FoldSplit& split, std::size_t fold_index,
                   const TrainConfig& cfg, const TeacherLogits* teacher) {
    if (fold_index >= split.k)
        throw ValidationError("fold index " + std::to_string(fold_index) + " outside 0.." + std::to_string(split.k - 1));
    const auto idx = split.train_indices(fold_index);
    return train(model, data, idx, cfg, teacher);
}

std::size_t predict_class(std::span<const float> logits, std::size_t class_count) {
    const std::size_t n = std::min(class_count, logits.size());
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c)
        if (logits[c] > logits[best]) best = c;
    return best;
}

Evaluation evaluate(const Model& model, const Dataset& data, std::span<const std::size_t> indices) {
    const std::size_t classes = data.manifest.class_count();
    Evaluation e;
    e.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    Workspace ws;
    Tensor crop;
    for (auto i : indices) {
        const Tensor& image = data.images.at(i);
        crop_into(image, origin_for(kCenterCrop, image), kCropSize, crop);
        const std::size_t predicted = predict_class(model.infer(crop, ws), classes);
        const auto truth = static_cast<std::size_t>(data.manifest.samples[i].label);
        ++e.confusion[truth][predicted];
        e.correct += predicted == truth;
        ++e.total;
    }
    return e;
}

Evaluation evaluate(const Model& model, const Dataset& data, const FoldSplit& split, std::size_t fold_index) {
    const auto idx = split.test_indices(fold_index);
    return evaluate(model, data, idx);
}

double mean_of(const std::vector<double>& values) {
    if (values.empty()) return 0.0;
    double total = 0.0;
    for (double v : values) total += v;
    return total / static_cast<double>(values.size());
}

ExperimentResult cross_validate(const ModelSpec& spec, const Dataset& data, FoldMode mode, const TrainConfig& cfg,
                                const TeacherLogits* teacher, const RunOptions& options) {
    cfg.validate();
    if (cfg.distillation && !teacher) throw ConfigError("distillation is enabled but no teacher logits were supplied");
    const auto started = std::chrono::steady_clock::now();
    const FoldSplit split = make_folds(data.manifest, mode, cfg.seed);
    const std::size_t k = split.k;
    const std::size_t classes = data.manifest.class_count();

    struct FoldOutcome {
        Evaluation eval;
        double final_loss = 0.0;
        std::exception_ptr error;
    };
    std::vector<FoldOutcome> outcomes(k);
    std::mutex log_mutex;
    auto log = [&](const std::string& msg) {
        if (!options.log) return;
        std::lock_guard lock(log_mutex);
        options.log(msg);
    };

    auto run_fold = [&](std::size_t fold) {
        try {
            Model model(spec, model_seed_for_fold(cfg.seed, fold));
            TrainConfig fold_cfg = cfg;
            fold_cfg.seed = train_seed_for_fold(cfg.seed, fold);
            const auto train_idx = split.train_indices(fold);
            const auto test_idx = split.test_indices(fold);
            const TrainHistory h = train(model, data, train_idx, fold_cfg, teacher);
            std::set<std::string> trained(h.trained_ids.begin(), h.trained_ids.end());
            for (auto i : test_idx)
                if (trained.count(data.manifest.samples[i].id))
                    throw Error("leak", "sample '" + data.manifest.samples[i].id + "' is in both train and test of fold " +
                                            std::to_string(fold));
            outcomes[fold].eval = evaluate(model, data, test_idx);
            outcomes[fold].final_loss = h.epoch_loss.back();
            log(spec.name() + " " + std::string(to_string(mode)) +
                (cfg.distillation ? " T=" + format_float(cfg.distillation->temperature) : std::string()) + " fold " +
                std::to_string(fold) + ": accuracy " + pct(outcomes[fold].eval.accuracy()) + ", final loss " +
                format_double(h.epoch_loss.back()));
        } catch (...) {
            outcomes[fold].error = std::current_exception();
        }
    };

    const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, k));
    if (jobs == 1) {
        for (std::size_t f = 0; f < k; ++f) run_fold(f);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> workers;
        for (std::size_t w = 0; w < jobs; ++w)
            workers.emplace_back([&] {
                for (std::size_t f; (f = next.fetch_add(1)) < k;) run_fold(f);
            });
    }
    for (auto& o : outcomes)
        if (o.error) std::rethrow_exception(o.error);

    ExperimentResult r;
    r.spec = spec;
    r.mode = mode;
    r.config = cfg;
    r.parameters = count_parameters(spec);
    r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    for (std::size_t f = 0; f < k; ++f) {
        r.fold_accuracies.push_back(outcomes[f].eval.accuracy());
        r.fold_train_loss.push_back(outcomes[f].final_loss);
        r.fold_model_seeds.push_back(model_seed_for_fold(cfg.seed, f));
        for (std::size_t a = 0; a < classes; ++a)
            for (std::size_t b = 0; b < classes; ++b) r.confusion[a][b] += outcomes[f].eval.confusion[a][b];
    }
    r.mean_accuracy = mean_of(r.fold_accuracies);
    r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return r;
}

std::size_t flag_best(std::vector<ExperimentResult>& results) {
    if (results.empty()) return 0;
    std::size_t best = 0;
    for (std::size_t i = 1; i < results.size(); ++i) {
        const auto& a = results[i];
        const auto& b = results[best];
        if (a.mean_accuracy > b.mean_accuracy ||
            (a.mean_accuracy == b.mean_accuracy && a.temperature().value_or(0) < b.temperature().value_or(0)))
            best = i;
    }
    for (std::size_t i = 0; i < results.size(); ++i) results[i].best = i == best;
    return best;
}

std::vector<ExperimentResult> temperature_sweep(const ModelSpec& spec, const Dataset& data, FoldMode mode,
                                                const TrainConfig& cfg, const TeacherLogits& teacher,
                                                const std::vector<float>& temperatures, const RunOptions& options) {
    if (temperatures.empty()) throw ValidationError("temperature sweep needs at least one temperature");
    teacher.require_coverage(data.manifest.ids());
    std::vector<ExperimentResult> results;
    for (float t : temperatures) {
        TrainConfig run = cfg;
        DistillationConfig d = cfg.distillation.value_or(DistillationConfig{});
        d.temperature = t;
        run.distillation = d;
        results.push_back(cross_validate(spec, data, mode, run, &teacher, options));
        results.back().experiment = "sweep";
    }
    flag_best(results);
    return results;
}

std::vector<ExperimentResult> pooling_ablation(SizeClass size_class, const Dataset& data, FoldMode mode,
                                               const TrainConfig& cfg, const RunOptions& options) {
    std::vector<ExperimentResult> results;
    for (auto variant : kPoolingVariants) {
        results.push_back(cross_validate(ModelSpec{size_class, variant}, data, mode, cfg, nullptr, options));
        results.back().experiment = "ablation";
    }
    return results;
}

json to_json(const ExperimentResult& r) {
    json j = {{"experiment", r.experiment},
              {"spec", {{"size_class", to_string(r.spec.size_class)}, {"variant", to_string(r.spec.variant)}}},
              {"mode", to_string(r.mode)},
              {"temperature", nullptr},
              {"config", to_json(r.config)},
              {"parameters", r.parameters},
              {"fold_accuracies", r.fold_accuracies},
              {"fold_train_loss", r.fold_train_loss},
              {"mean_accuracy", r.mean_accuracy},
              {"confusion", r.confusion},
              {"fold_model_seeds", r.fold_model_seeds},
              {"best", r.best}};
    if (auto t = r.temperature()) j["temperature"] = *t;
    return j;
}

ExperimentResult result_from_json(const json& j) {
    try {
        ExperimentResult r;
        r.experiment = j.at("experiment").get<std::string>();
        r.spec = spec_from_json(j.at("spec"));
        r.mode = parse_fold_mode(j.at("mode").get<std::string>());
        r.config = train_config_from_json(j.at("config"));
        r.parameters = j.at("parameters").get<std::size_t>();
        r.fold_accuracies = j.at("fold_accuracies").get<std::vector<double>>();
        r.fold_train_loss = j.value("fold_train_loss", std::vector<double>{});
        r.mean_accuracy = j.at("mean_accuracy").get<double>();
        r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
        r.fold_model_seeds = j.value("fold_model_seeds", std::vector<std::uint64_t>{});
        r.best = j.value("best", false);
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("result record: ") + e.what());
    }
}

void write_results_jsonl(const std::string& path, const std::vector<ExperimentResult>& results, bool append) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& r : results) out << to_json(r).dump() << '\n';
    if (!out) throw IoError("write failed: " + path);
}

std::vector<ExperimentResult> read_results_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<ExperimentResult> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(result_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::string results_csv(const std::vector<ExperimentResult>& results) {
    std::ostringstream out;
    out << "spec,variant,mode,T,fold,accuracy\n";
    for (const auto& r : results) {
        const auto t = r.temperature();
        for (std::size_t f = 0; f < r.fold_accuracies.size(); ++f)
            out << to_string(r.spec.size_class) << ',' << to_string(r.spec.variant) << ',' << to_string(r.mode) << ','
                << (t ? format_float(*t) : std::string()) << ',' << f << ',' << format_double(r.fold_accuracies[f])
                << '\n';
    }
    return out.str();
}

void write_results_csv(const std::string& path, const std::vector<ExperimentResult>& results) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << results_csv(results);
}

std::string render_report(const std::vector<ExperimentResult>& results) {
    std::ostringstream out;
    char line[160];

    // Pooling ablation: one block per split mode, rows grouped by size class.
    for (auto mode : {FoldMode::random, FoldMode::subject_independent}) {
        std::vector<const ExperimentResult*> rows;
        for (const auto& r : results)
            if (r.experiment == "ablation" && r.mode == mode) rows.push_back(&r);
        if (rows.empty()) continue;
        out << "Pooling ablation (" << to_string(mode) << " split, 10-fold CV)\n";
        std::snprintf(line, sizeof line, "  %-22s %12s %10s\n", "Model", "Parameters", "Accuracy");
        out << line;
        for (auto size : kSizeClasses) {
            double best = -1.0;
            for (auto* r : rows)
                if (r->spec.size_class == size) best = std::max(best, r->mean_accuracy);
            for (auto* r : rows) {
                if (r->spec.size_class != size) continue;
                const std::string name =
                    "Candidate_" + std::string(to_string(r->spec.variant)) + "_" + std::string(to_string(size));
                std::snprintf(line, sizeof line, "  %-22s %12zu %10s%s\n", name.c_str(), r->parameters,
                              pct(r->mean_accuracy).c_str(), r->mean_accuracy == best ? " *" : "");
                out << line;
            }
        }
        out << '\n';
    }

    // Temperature sweeps, grouped by (spec, mode).
    std::map<std::string, std::vector<const ExperimentResult*>> sweeps;
    for (const auto& r : results)
        if (r.experiment == "sweep") sweeps[r.spec.name() + " " + std::string(to_string(r.mode))].push_back(&r);
    for (const auto& [key, rows] : sweeps) {
        out << "Temperature sweep " << key << "\n";
        std::snprintf(line, sizeof line, "  %8s %10s\n", "T", "Accuracy");
        out << line;
        for (auto* r : rows) {
            std::snprintf(line, sizeof line, "  %8s %10s%s\n", format_float(r->temperature().value_or(0)).c_str(),
                          pct(r->mean_accuracy).c_str(), r->best ? "  <- best" : "");
            out << line;
        }
        out << '\n';
    }

    std::vector<const ExperimentResult*> plain;
    for (const auto& r : results)
        if (r.experiment == "cv") plain.push_back(&r);
    if (!plain.empty()) {
        out << "Classification (10-fold CV, centre-crop evaluation)\n";
        std::snprintf(line, sizeof line, "  %-28s %-20s %12s %10s\n", "Model", "Split", "Parameters", "Accuracy");
        out << line;
        for (auto* r : plain) {
            const auto t = r->temperature();
            const std::string name = (t ? "StudentExpNet_" : "VanillaExpNet_") + std::string(to_string(r->spec.size_class)) +
                                     (r->spec.variant != PoolingVariant::p12 ? "/" + std::string(to_string(r->spec.variant)) : "") +
                                     (t ? " (T=" + format_float(*t) + ")" : "");
            std::snprintf(line, sizeof line, "  %-28s %-20s %12zu %10s\n", name.c_str(),
                          std::string(to_string(r->mode)).c_str(), r->parameters, pct(r->mean_accuracy).c_str());
            out << line;
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace microexp
