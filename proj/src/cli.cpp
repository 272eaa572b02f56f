#include "microexp/cli.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "microexp/benchmark.hpp"
#include "microexp/errors.hpp"

namespace microexp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fmt_float(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// Distillation settings follow from the teacher / temperature fields.
void resolve_distillation(RunConfig& cfg) {
    cfg.train.seed = cfg.seed;
    cfg.train.distillation.reset();
    if (cfg.subcommand != "train" || cfg.teacher_logits.empty()) return;
    if (!cfg.temperature) throw ConfigError("train with --teacher-logits requires --temperature");
    cfg.train.distillation = DistillationConfig{*cfg.temperature, cfg.lambda, cfg.grad_scale_mode};
}

Dataset load_dataset(const RunConfig& cfg, const std::function<void(const std::string&)>& log) {
    if (cfg.manifest.empty()) throw ConfigError(cfg.subcommand + " requires --manifest");
    DatasetManifest m = load_manifest(cfg.manifest);
    log("loaded manifest " + cfg.manifest + ": " + std::to_string(m.size()) + " samples, " +
        std::to_string(m.subject_count()) + " subjects, " + std::to_string(m.class_count()) + " classes");
    return Dataset::load(std::move(m));
}

void write_result_files(const fs::path& dir, const std::vector<ExperimentResult>& results) {
    write_results_jsonl((dir / "results.jsonl").string(), results);
    write_results_csv((dir / "results.csv").string(), results);
    json timing = json::array();
    for (const auto& r : results) timing.push_back({{"spec", r.spec.name()}, {"mode", to_string(r.mode)},
                                                    {"temperature", r.temperature() ? json(*r.temperature()) : json()},
                                                    {"wall_clock_seconds", r.wall_clock_seconds}});
    write_json(dir / "timing.json", timing);
    write_text(dir / "report.txt", render_report(results));
}

int run_train(const RunConfig& cfg, std::ostream& out, const std::function<void(const std::string&)>& log) {
    const fs::path dir(cfg.out);
    const Dataset data = load_dataset(cfg, log);
    std::optional<TeacherLogits> teacher;
    if (cfg.train.distillation) teacher = load_teacher_logits(cfg.teacher_logits, data.manifest.ids());
    const TeacherLogits* tp = teacher ? &*teacher : nullptr;

    if (cfg.holdout == "cv") {
        save_folds((dir / "folds.csv").string(), data.manifest, make_folds(data.manifest, cfg.mode, cfg.seed));
        std::vector<ExperimentResult> results{cross_validate(cfg.spec, data, cfg.mode, cfg.train, tp, {cfg.jobs, log})};
        write_result_files(dir, results);
        out << render_report(results);
        return 0;
    }

    std::vector<std::size_t> train_idx, test_idx;
    std::optional<std::size_t> fold;
    if (cfg.holdout == "none") {
        for (std::size_t i = 0; i < data.size(); ++i) train_idx.push_back(i);
    } else {
        std::size_t k = 0;
        auto res = std::from_chars(cfg.holdout.data(), cfg.holdout.data() + cfg.holdout.size(), k);
        if (res.ec != std::errc() || res.ptr != cfg.holdout.data() + cfg.holdout.size() || k >= 10)
            throw ConfigError("--holdout must be cv, none or a fold index 0..9, got '" + cfg.holdout + "'");
        fold = k;
        const FoldSplit split = make_folds(data.manifest, cfg.mode, cfg.seed);
        save_folds((dir / "folds.csv").string(), data.manifest, split);
        train_idx = split.train_indices(k);
        test_idx = split.test_indices(k);
    }
    const std::size_t stream = fold.value_or(10);
    Model model(cfg.spec, model_seed_for_fold(cfg.seed, stream));
    TrainConfig tc = cfg.train;
    tc.seed = train_seed_for_fold(cfg.seed, stream);
    const TrainHistory h = train(model, data, train_idx, tc, tp);
    save_checkpoint((dir / "model.mxck").string(), model, cfg.train.epochs);

    std::ostringstream hist;
    hist << "epoch,loss\n";
    for (std::size_t e = 0; e < h.epoch_loss.size(); ++e) hist << e + 1 << ',' << fmt_float(h.epoch_loss[e]) << '\n';
    write_text(dir / "history.csv", hist.str());

    const Evaluation train_eval = evaluate(model, data, train_idx);
    json eval = {{"spec", spec_to_json(cfg.spec, model.seed())},
                 {"train_accuracy", train_eval.accuracy()},
                 {"final_loss", h.epoch_loss.back()}};
    out << "trained " << cfg.spec.name() << " on " << train_idx.size() << " samples: train accuracy "
        << fmt_float(train_eval.accuracy());
    if (fold) {
        const Evaluation test_eval = evaluate(model, data, test_idx);
        eval["fold"] = *fold;
        eval["test_accuracy"] = test_eval.accuracy();
        eval["confusion"] = test_eval.confusion;
        out << ", fold " << *fold << " accuracy " << fmt_float(test_eval.accuracy());
    }
    out << "\ncheckpoint: " << (dir / "model.mxck").string() << '\n';
    write_json(dir / "eval.json", eval);
    return 0;
}

int run_sweep(const RunConfig& cfg, std::ostream& out, const std::function<void(const std::string&)>& log) {
    if (cfg.teacher_logits.empty()) throw ConfigError("sweep requires --teacher-logits");
    const fs::path dir(cfg.out);
    const Dataset data = load_dataset(cfg, log);
    const TeacherLogits teacher = load_teacher_logits(cfg.teacher_logits, data.manifest.ids());
    TrainConfig tc = cfg.train;
    tc.distillation = DistillationConfig{cfg.temperatures.empty() ? 1.0f : cfg.temperatures.front(), cfg.lambda,
                                         cfg.grad_scale_mode};
    auto results = temperature_sweep(cfg.spec, data, cfg.mode, tc, teacher, cfg.temperatures, {cfg.jobs, log});
    write_result_files(dir, results);
    std::ostringstream series;
    series << "T,mean_accuracy,best\n";
    for (const auto& r : results)
        series << fmt_float(*r.temperature()) << ',' << fmt_float(r.mean_accuracy) << ',' << (r.best ? 1 : 0) << '\n';
    write_text(dir / "sweep.csv", series.str());
    out << render_report(results);
    return 0;
}

int run_ablate(const RunConfig& cfg, std::ostream& out, const std::function<void(const std::string&)>& log) {
    const fs::path dir(cfg.out);
    const Dataset data = load_dataset(cfg, log);
    std::vector<ExperimentResult> results;
    std::vector<FoldMode> modes;
    if (cfg.both_modes)
        modes = {FoldMode::random, FoldMode::subject_independent};
    else
        modes = {cfg.mode};
    for (auto mode : modes) {
        auto block = pooling_ablation(cfg.spec.size_class, data, mode, cfg.train, {cfg.jobs, log});
        results.insert(results.end(), block.begin(), block.end());
    }
    write_result_files(dir, results);
    out << render_report(results);
    return 0;
}

int run_bench(const RunConfig& cfg, std::ostream& out, const std::function<void(const std::string&)>& log) {
    const fs::path dir(cfg.out);
    std::vector<BenchReport> reports;
    if (!cfg.checkpoint.empty()) {
        const Checkpoint ck = load_checkpoint(cfg.checkpoint);
        reports.push_back(bench_inference(ck.model, cfg.iterations, cfg.warmup));
    } else {
        std::vector<SizeClass> sizes;
        if (cfg.all_sizes)
            sizes.assign(kSizeClasses.begin(), kSizeClasses.end());
        else
            sizes = {cfg.spec.size_class};
        for (auto s : sizes) {
            log("benchmarking " + ModelSpec{s, cfg.spec.variant}.name());
            reports.push_back(bench_inference(Model(ModelSpec{s, cfg.spec.variant}, cfg.seed), cfg.iterations, cfg.warmup));
        }
    }
    json j = json::array();
    for (const auto& r : reports) j.push_back(to_json(r));
    write_json(dir / "bench.json", j);
    out << render_bench_table(reports);
    return 0;
}

int run_report(const RunConfig& cfg, std::ostream& out, bool write_files) {
    if (cfg.results.empty()) throw ConfigError("report requires at least one --results file");
    std::vector<ExperimentResult> all;
    for (const auto& path : cfg.results) {
        auto part = read_results_jsonl(path);
        all.insert(all.end(), part.begin(), part.end());
    }
    const std::string text = render_report(all);
    if (write_files) {
        write_text(fs::path(cfg.out) / "report.txt", text);
        write_results_csv((fs::path(cfg.out) / "results.csv").string(), all);
    }
    out << text;
    return 0;
}

}  // namespace

json to_json(const RunConfig& cfg) {
    return {{"subcommand", cfg.subcommand},
            {"manifest", cfg.manifest},
            {"size_class", cfg.all_sizes ? std::string("all") : std::string(to_string(cfg.spec.size_class))},
            {"variant", to_string(cfg.spec.variant)},
            {"mode", cfg.both_modes ? std::string("both") : std::string(to_string(cfg.mode))},
            {"seed", cfg.seed},
            {"train", to_json(cfg.train)},
            {"temperature", cfg.temperature ? json(*cfg.temperature) : json()},
            {"lambda", cfg.lambda},
            {"grad_scale_mode", to_string(cfg.grad_scale_mode)},
            {"teacher_logits", cfg.teacher_logits},
            {"temperatures", cfg.temperatures},
            {"holdout", cfg.holdout},
            {"jobs", cfg.jobs},
            {"iterations", cfg.iterations},
            {"warmup", cfg.warmup},
            {"checkpoint", cfg.checkpoint},
            {"results", cfg.results},
            {"out", cfg.out}};
}

RunConfig run_config_from_json(const json& j) {
    try {
        RunConfig cfg;
        cfg.subcommand = j.value("subcommand", std::string());
        cfg.manifest = j.value("manifest", std::string());
        const std::string size = j.value("size_class", std::string("XXS"));
        cfg.all_sizes = size == "all";
        if (!cfg.all_sizes) cfg.spec.size_class = parse_size_class(size);
        cfg.spec.variant = parse_pooling_variant(j.value("variant", std::string("p12")));
        const std::string mode = j.value("mode", std::string("random"));
        cfg.both_modes = mode == "both";
        if (!cfg.both_modes) cfg.mode = parse_fold_mode(mode);
        cfg.seed = j.value("seed", cfg.seed);
        if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
        if (j.contains("temperature") && !j.at("temperature").is_null()) cfg.temperature = j.at("temperature").get<float>();
        cfg.lambda = j.value("lambda", cfg.lambda);
        cfg.grad_scale_mode = parse_grad_scale_mode(j.value("grad_scale_mode", std::string("none")));
        cfg.teacher_logits = j.value("teacher_logits", std::string());
        cfg.temperatures = j.value("temperatures", cfg.temperatures);
        cfg.holdout = j.value("holdout", cfg.holdout);
        cfg.jobs = j.value("jobs", cfg.jobs);
        cfg.iterations = j.value("iterations", cfg.iterations);
        cfg.warmup = j.value("warmup", cfg.warmup);
        cfg.checkpoint = j.value("checkpoint", std::string());
        cfg.results = j.value("results", std::vector<std::string>{});
        cfg.out = j.value("out", cfg.out);
        return cfg;
    } catch (const json::exception& e) {
        throw FormatError(std::string("run config: ") + e.what());
    }
}

TeacherLogits compute_logits(const Model& model, const Dataset& data) {
    Tensor logits({data.size(), kNumClasses});
    Workspace ws;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto z = model.infer(center_crop(data.images[i]), ws);
        std::copy(z.begin(), z.end(), logits.data().begin() + static_cast<std::ptrdiff_t>(i * kNumClasses));
    }
    return TeacherLogits(data.manifest.ids(), std::move(logits));
}

TeacherLogits export_logits(const std::string& checkpoint_path, const std::string& manifest_path,
                            const std::string& out_path) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const Dataset data = Dataset::load(load_manifest(manifest_path));
    TeacherLogits t = compute_logits(ck.model, data);
    save_teacher_logits(out_path, t);
    return t;
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"microexp: micro-CNN training, distillation and latency benchmarking", "microexp"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for all subcommands");

    // Flag values; only flags actually given override the config file.
    struct Flags {
        std::string config, manifest, size = "xxs", variant = "p12", mode = "random", teacher, holdout, checkpoint,
                                      out, grad_scale;
        std::size_t epochs = 0, batch = 0, jobs = 0, iterations = 0, warmup = 0;
        float temperature = 0, lambda = 0, lr = 0, dropout = 0;
        std::uint64_t seed = 0;
        std::vector<float> temperatures;
        std::vector<std::string> results;
        bool no_augment = false;
    } f;
    std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> overlays;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "Load settings from a run.json (flags take precedence)");
        overlays.emplace_back(sub->add_option("--out", f.out, "Output directory"), [&](RunConfig& c) { c.out = f.out; });
        overlays.emplace_back(sub->add_option("--seed", f.seed, "Run seed"), [&](RunConfig& c) { c.seed = f.seed; });
    };
    auto add_model = [&](CLI::App* sub, bool allow_all) {
        auto* size = sub->add_option("--size", f.size, "Size class")
                         ->check(allow_all ? CLI::IsMember({"m", "s", "xs", "xxs", "all"}, CLI::ignore_case)
                                           : CLI::IsMember({"m", "s", "xs", "xxs"}, CLI::ignore_case));
        overlays.emplace_back(size, [&](RunConfig& c) {
            c.all_sizes = CLI::detail::to_lower(f.size) == "all";
            if (!c.all_sizes) c.spec.size_class = parse_size_class(f.size);
        });
        overlays.emplace_back(
            sub->add_option("--variant", f.variant, "Pooling variant")->check(CLI::IsMember({"v", "p1", "p2", "p12"})),
            [&](RunConfig& c) { c.spec.variant = parse_pooling_variant(f.variant); });
    };
    auto add_data = [&](CLI::App* sub, bool allow_both) {
        overlays.emplace_back(sub->add_option("--manifest", f.manifest, "Dataset manifest CSV"),
                              [&](RunConfig& c) { c.manifest = f.manifest; });
        auto* mode = sub->add_option("--mode", f.mode, "Fold mode")
                         ->check(allow_both ? CLI::IsMember({"random", "subject-independent", "both"})
                                            : CLI::IsMember({"random", "subject-independent"}));
        overlays.emplace_back(mode, [&](RunConfig& c) {
            c.both_modes = f.mode == "both";
            if (!c.both_modes) c.mode = parse_fold_mode(f.mode);
        });
        overlays.emplace_back(sub->add_option("--jobs", f.jobs, "Parallel fold jobs")->check(CLI::PositiveNumber),
                              [&](RunConfig& c) { c.jobs = f.jobs; });
    };
    auto add_training = [&](CLI::App* sub) {
        overlays.emplace_back(sub->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::PositiveNumber),
                              [&](RunConfig& c) { c.train.epochs = f.epochs; });
        overlays.emplace_back(sub->add_option("--batch-size", f.batch, "Mini-batch size")->check(CLI::PositiveNumber),
                              [&](RunConfig& c) { c.train.batch_size = f.batch; });
        overlays.emplace_back(sub->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::PositiveNumber),
                              [&](RunConfig& c) { c.train.learning_rate = f.lr; });
        overlays.emplace_back(sub->add_option("--dropout", f.dropout, "Dropout rate on fc1")->check(CLI::Range(0.0, 0.99)),
                              [&](RunConfig& c) { c.train.dropout = f.dropout; });
        overlays.emplace_back(sub->add_flag("--no-augment", f.no_augment, "Train on centre crops only"),
                              [&](RunConfig& c) { c.train.augment = !f.no_augment; });
        overlays.emplace_back(sub->add_option("--lambda", f.lambda, "Distillation weight")->check(CLI::Range(0.0, 1.0)),
                              [&](RunConfig& c) { c.lambda = f.lambda; });
        overlays.emplace_back(sub->add_option("--grad-scale", f.grad_scale, "Soft-term scaling: none or t_squared")
                                  ->check(CLI::IsMember({"none", "t_squared"})),
                              [&](RunConfig& c) { c.grad_scale_mode = parse_grad_scale_mode(f.grad_scale); });
        overlays.emplace_back(sub->add_option("--teacher-logits", f.teacher, "Teacher logit file (CSV or MXTN)"),
                              [&](RunConfig& c) { c.teacher_logits = f.teacher; });
    };

    auto* train_cmd = app.add_subcommand("train", "Cross-validate, or train one model and save a checkpoint");
    add_common(train_cmd);
    add_model(train_cmd, false);
    add_data(train_cmd, false);
    add_training(train_cmd);
    overlays.emplace_back(train_cmd->add_option("--temperature", f.temperature, "Distillation temperature")
                              ->check(CLI::PositiveNumber),
                          [&](RunConfig& c) { c.temperature = f.temperature; });
    overlays.emplace_back(train_cmd->add_option("--holdout", f.holdout, "cv (default), none, or a fold index"),
                          [&](RunConfig& c) { c.holdout = f.holdout; });

    auto* sweep_cmd = app.add_subcommand("sweep", "Temperature grid search with 10-fold CV");
    add_common(sweep_cmd);
    add_model(sweep_cmd, false);
    add_data(sweep_cmd, false);
    add_training(sweep_cmd);
    overlays.emplace_back(sweep_cmd->add_option("--temperatures", f.temperatures, "Temperature grid")
                              ->delimiter(',')
                              ->check(CLI::PositiveNumber),
                          [&](RunConfig& c) { c.temperatures = f.temperatures; });

    auto* ablate_cmd = app.add_subcommand("ablate", "Pooling ablation (v, p1, p2, p12) for one size class");
    add_common(ablate_cmd);
    add_model(ablate_cmd, false);
    add_data(ablate_cmd, true);
    add_training(ablate_cmd);

    auto* bench_cmd = app.add_subcommand("bench", "Single-image inference latency");
    add_common(bench_cmd);
    add_model(bench_cmd, true);
    overlays.emplace_back(bench_cmd->add_option("--iterations", f.iterations, "Timed iterations")
                              ->check(CLI::Range(std::size_t{100}, std::size_t{100000000})),
                          [&](RunConfig& c) { c.iterations = f.iterations; });
    overlays.emplace_back(bench_cmd->add_option("--warmup", f.warmup, "Untimed warmup iterations"),
                          [&](RunConfig& c) { c.warmup = f.warmup; });
    overlays.emplace_back(bench_cmd->add_option("--checkpoint", f.checkpoint, "Benchmark a saved model"),
                          [&](RunConfig& c) { c.checkpoint = f.checkpoint; });

    auto* export_cmd = app.add_subcommand("export-logits", "Write teacher logits for every manifest sample");
    export_cmd->add_option("--config", f.config, "Load settings from a run.json (flags take precedence)");
    overlays.emplace_back(export_cmd->add_option("--checkpoint", f.checkpoint, "Model checkpoint"),
                          [&](RunConfig& c) { c.checkpoint = f.checkpoint; });
    overlays.emplace_back(export_cmd->add_option("--manifest", f.manifest, "Dataset manifest CSV"),
                          [&](RunConfig& c) { c.manifest = f.manifest; });
    overlays.emplace_back(export_cmd->add_option("--out", f.out, "Output logit file (.csv or .mxtn)"),
                          [&](RunConfig& c) { c.out = f.out; });

    auto* report_cmd = app.add_subcommand("report", "Render stored results as tables and CSV");
    report_cmd->add_option("--config", f.config, "Load settings from a run.json (flags take precedence)");
    overlays.emplace_back(report_cmd->add_option("--results", f.results, "results.jsonl file(s)"),
                          [&](RunConfig& c) { c.results = f.results; });
    auto* report_out = report_cmd->add_option("--out", f.out, "Also write report.txt and results.csv here");
    overlays.emplace_back(report_out, [&](RunConfig& c) { c.out = f.out; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    auto log = [&err](const std::string& msg) { err << "[microexp] " << msg << std::endl; };
    try {
        RunConfig cfg;
        if (!f.config.empty()) {
            std::ifstream in(f.config);
            if (!in) throw IoError("cannot open config " + f.config);
            json j;
            try {
                j = json::parse(in);
            } catch (const json::exception& e) {
                throw FormatError(f.config + ": " + e.what());
            }
            cfg = run_config_from_json(j);
        }
        cfg.subcommand = sub->get_name();
        for (auto& [opt, apply] : overlays)
            if (opt->count() > 0) apply(cfg);
        if (const char* env = std::getenv("MICROEXP_THREADS")) {
            std::size_t n = 0;
            auto res = std::from_chars(env, env + std::strlen(env), n);
            if (res.ec != std::errc() || n == 0) throw ConfigError("MICROEXP_THREADS must be a positive integer");
            cfg.jobs = n;
        }
        resolve_distillation(cfg);
        cfg.train.validate();

        if (cfg.subcommand == "export-logits") {
            if (cfg.checkpoint.empty() || cfg.manifest.empty() || cfg.out.empty() || cfg.out == RunConfig{}.out)
                throw ConfigError("export-logits requires --checkpoint, --manifest and --out <file>");
            const auto parent = fs::path(cfg.out).parent_path();
            if (!parent.empty()) fs::create_directories(parent);
            write_json(cfg.out + ".run.json", to_json(cfg));
            const TeacherLogits t = export_logits(cfg.checkpoint, cfg.manifest, cfg.out);
            out << "wrote " << t.size() << " logit rows to " << cfg.out << '\n';
            return 0;
        }
        if (cfg.subcommand == "report") {
            const bool write_files = report_out->count() > 0 || !f.config.empty();
            if (write_files) {
                fs::create_directories(cfg.out);
                write_json(fs::path(cfg.out) / "run.json", to_json(cfg));
            }
            return run_report(cfg, out, write_files);
        }

        fs::create_directories(cfg.out);
        write_json(fs::path(cfg.out) / "run.json", to_json(cfg));
        if (cfg.subcommand == "train") return run_train(cfg, out, log);
        if (cfg.subcommand == "sweep") return run_sweep(cfg, out, log);
        if (cfg.subcommand == "ablate") return run_ablate(cfg, out, log);
        if (cfg.subcommand == "bench") return run_bench(cfg, out, log);
        throw ConfigError("unhandled subcommand " + cfg.subcommand);
    } catch (const Error& e) {
        err << json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << '\n';
        return 1;
    }
}

}  // namespace microexp
