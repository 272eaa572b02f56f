// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "grad_check.hpp"
#include "microexp/benchmark.hpp"
#include "microexp/cli.hpp"
#include "microexp/distillation.hpp"
#include "microexp/experiment.hpp"

using namespace microexp;
namespace fs = std::filesystem;

namespace testutil {
std::atomic<std::size_t> allocations{0};
}

namespace {

struct Verdict {
    bool pass = true;
    std::ostringstream detail;
    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

int failures = 0;

void criterion(const std::string& name, const std::function<void(Verdict&)>& body) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
        body(v);
    } catch (const std::exception& e) {
        v.pass = false;
        v.detail << " [exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!v.pass) ++failures;
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << ":" << v.detail.str() << " (" << std::fixed
              << std::setprecision(1) << secs << " s)" << std::endl;
}

Tensor random_one_hot(std::size_t n, Rng& rng) {
    Tensor y({n, 8});
    for (std::size_t r = 0; r < n; ++r) y.at(r, rng.below(8)) = 1.0f;
    return y;
}

double kd_oracle(const Tensor& v, const Tensor& z, const Tensor& y, double lambda, double T, bool t_squared) {
    const std::size_t n = v.dim(0);
    auto soft = [](const Tensor& x, std::size_t r, double t) {
        std::vector<double> p(8);
        double mx = -1e300, s = 0;
        for (std::size_t c = 0; c < 8; ++c) mx = std::max(mx, double(x.at(r, c)) / t);
        for (std::size_t c = 0; c < 8; ++c) s += p[c] = std::exp(double(x.at(r, c)) / t - mx);
        for (auto& e : p) e /= s;
        return p;
    };
    double soft_term = 0, hard_term = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto pt = soft(z, r, T), pss = soft(v, r, T), ps = soft(v, r, 1.0);
        for (std::size_t c = 0; c < 8; ++c) {
            soft_term -= pt[c] * std::log(pss[c]);
            hard_term -= y.at(r, c) * std::log(ps[c]);
        }
    }
    return (lambda * (t_squared ? T * T : 1.0) * soft_term + (1 - lambda) * hard_term) / double(n);
}

Tensor distinct_values(const Shape& shape, Rng& rng) {
    Tensor t(shape);
    std::vector<float> v(t.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1f * float(i);
    rng.shuffle(std::span<float>(v));
    std::copy(v.begin(), v.end(), t.data().begin());
    return t;
}

void parameter_counts(Verdict& v) {
    const std::pair<SizeClass, std::size_t> table[] = {
        {SizeClass::M, 900920}, {SizeClass::S, 232184}, {SizeClass::XS, 120728}, {SizeClass::XXS, 65000}};
    for (auto [size, expected] : table) {
        const ModelSpec spec{size, PoolingVariant::p12};
        const std::size_t out = spec.fc1_out();
        const std::size_t decomposed = 1040 + 8224 + (1152 * out + out) + (8 * out + 8);
        const Model m = build_model(spec, 1);
        std::size_t enumerated = 0;
        for (const Tensor* t : m.parameters()) enumerated += t->size();
        v.require(count_parameters(spec) == expected, spec.name() + " count");
        v.require(decomposed == expected, spec.name() + " decomposition");
        v.require(enumerated == expected, spec.name() + " built tensors");
        v.detail << " " << to_string(size) << "=" << count_parameters(spec);
    }
}

void spatial_chain(Verdict& v) {
    const Model m = build_model({SizeClass::XXS, PoolingVariant::p12}, 1);
    Workspace ws;
    m.infer(Tensor({84, 84, 1}, 0.5f), ws);
    v.require(ws.pool2.shape() == Shape{6, 6, 32}, "final feature map 6x6x32");
    v.require(ws.pool2.size() == 1152, "flattened size");
    v.require(m.fc1.in_features() == 1152, "fc1 input width");
    v.detail << " fc1_in=" << m.fc1.in_features() << " (" << shape_string(ws.pool2.shape()) << ")";
}

void gradient_suite(Verdict& v) {
    using testutil::gradient_mismatches;
    using testutil::random_tensor;
    using testutil::weighted_sum;
    Rng rng(2024);
    std::size_t instances = 0;
    auto tally = [&](const std::string& layer, std::size_t bad) {
        ++instances;
        v.require(bad == 0, layer);
    };
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t stride = 1 + rep % 3, k = 2 + rep % 3, size = 4 + rep % 4;
        const ConvLayer c{random_tensor({k, k, 2, 3}, rng), random_tensor({3}, rng), stride};
        const Tensor x = random_tensor({size, size, 2}, rng);
        const Tensor w = random_tensor(c.output_shape(x.shape()), rng);
        const ConvGrads g = conv_backward(c, x, w);
        tally("conv input", gradient_mismatches([&](const Tensor& a) { return weighted_sum(conv_forward(c, a), w); },
                                                x, g.d_input));
        tally("conv kernel", gradient_mismatches(
                                 [&](const Tensor& kk) {
                                     ConvLayer cc = c;
                                     cc.kernel = kk;
                                     return weighted_sum(conv_forward(cc, x), w);
                                 },
                                 c.kernel, g.d_kernel));
        tally("conv bias", gradient_mismatches(
                               [&](const Tensor& bb) {
                                   ConvLayer cc = c;
                                   cc.bias = bb;
                                   return weighted_sum(conv_forward(cc, x), w);
                               },
                               c.bias, g.d_bias));

        const MaxPoolLayer pool;
        const Tensor px = distinct_values({size, size, 2}, rng);
        const PoolResult pr = maxpool_forward(pool, px);
        const Tensor pw = random_tensor(pr.output.shape(), rng);
        tally("maxpool", gradient_mismatches(
                             [&](const Tensor& a) { return weighted_sum(maxpool_forward(pool, a).output, pw); }, px,
                             maxpool_backward(pr.indices, pw)));

        const DenseLayer d{random_tensor({6, 4}, rng), random_tensor({4}, rng)};
        const Tensor dx = random_tensor({2, 6}, rng), dw = random_tensor({2, 4}, rng);
        const DenseGrads dg = dense_backward(d, dx, dw);
        tally("dense input", gradient_mismatches(
                                 [&](const Tensor& a) { return weighted_sum(dense_forward(d, a), dw); }, dx,
                                 dg.d_input));
        tally("dense weights", gradient_mismatches(
                                   [&](const Tensor& ww) {
                                       DenseLayer dd = d;
                                       dd.weights = ww;
                                       return weighted_sum(dense_forward(dd, dx), dw);
                                   },
                                   d.weights, dg.d_weights));
        tally("dense bias", gradient_mismatches(
                                [&](const Tensor& bb) {
                                    DenseLayer dd = d;
                                    dd.bias = bb;
                                    return weighted_sum(dense_forward(dd, dx), dw);
                                },
                                d.bias, dg.d_bias));

        Tensor rx = random_tensor({10}, rng);
        for (auto& e : rx.data())
            if (std::abs(e) < 0.05f) e = 0.1f;
        const Tensor rw = random_tensor({10}, rng);
        tally("relu", gradient_mismatches([&](const Tensor& a) { return weighted_sum(relu(a), rw); }, rx,
                                          relu_backward(rx, rw)));

        const DropoutResult dr = dropout_forward(rw, 0.5f, true, rng);
        tally("dropout", gradient_mismatches(
                             [&](const Tensor& a) { return weighted_sum(mul(a, scale(dr.mask, 2.0f)), rx); }, rw,
                             dropout_backward(dr.mask, 0.5f, rx)));

        const Tensor sx = random_tensor({3, 8}, rng, -3, 3);
        const Tensor sy = random_one_hot(3, rng);
        tally("softmax cross-entropy",
              gradient_mismatches([&](const Tensor& a) { return kd_oracle(a, a, sy, 0.0, 1.0, false); }, sx,
                                  scale(sub(softmax(sx), sy), 1.0f / 3.0f), 1e-3));
    }
    std::size_t kd_instances = 0;
    for (GradScaleMode mode : {GradScaleMode::none, GradScaleMode::t_squared})
        for (float lambda : {0.0f, 0.5f, 1.0f})
            for (float t : {1.0f, 2.0f, 16.0f})
                for (int rep = 0; rep < 20; ++rep) {
                    const std::size_t n = 1 + std::size_t(rep % 4);
                    const Tensor s = random_tensor({n, 8}, rng, -3, 3), z = random_tensor({n, 8}, rng, -3, 3);
                    const Tensor y = random_one_hot(n, rng);
                    const DistillationConfig cfg{t, lambda, mode};
                    const KdLoss kd = kd_loss(s, z, y, cfg);
                    const bool tsq = mode == GradScaleMode::t_squared;
                    const std::size_t bad = gradient_mismatches(
                        [&](const Tensor& a) { return kd_oracle(a, z, y, lambda, t, tsq); }, s, kd.d_logits, 1e-3);
                    v.require(bad == 0, "kd_loss lambda=" + std::to_string(lambda) + " T=" + std::to_string(t));
                    v.require(std::abs(kd.loss - kd_oracle(s, z, y, lambda, t, tsq)) <=
                                  1e-5 * std::max(1.0, std::abs(double(kd.loss))),
                              "kd_loss value");
                    ++kd_instances;
                }
    v.detail << " " << instances << " layer instances (20 per gradient), " << kd_instances
             << " kd_loss instances over lambda {0,0.5,1} x T {1,2,16} x 2 scale modes";
}

void degeneracies(Verdict& v) {
    Rng rng(77);
    double soft_gap = 0, ce_gap = 0;
    bool monotone = true, argmax_stable = true;
    const float temps[] = {1, 2, 4, 8, 16, 20, 32, 64};
    for (int rep = 0; rep < 200; ++rep) {
        const Tensor x = testutil::random_tensor({4, 8}, rng, -6, 6), z = testutil::random_tensor({4, 8}, rng, -6, 6);
        const Tensor y = random_one_hot(4, rng);
        soft_gap = std::max(soft_gap, double(max_abs(sub(softened_softmax(x, 1.0f), softmax(x)))));
        for (float t : {1.0f, 2.0f, 16.0f, 64.0f}) {
            const KdLoss kd = kd_loss(x, z, y, {t, 0.0f, GradScaleMode::none});
            ce_gap = std::max(ce_gap, double(std::abs(kd.loss - cross_entropy(softmax(x), y))));
        }
        for (std::size_t r = 0; r < 4; ++r) {
            const Tensor row = x.row(r);
            double prev = -1;
            const auto arg = std::max_element(row.data().begin(), row.data().end()) - row.data().begin();
            for (float t : temps) {
                const Tensor p = softened_softmax(row, t);
                const double h = entropy(p.data());
                monotone = monotone && h >= prev;
                prev = h;
                argmax_stable = argmax_stable && (std::max_element(p.data().begin(), p.data().end()) -
                                                  p.data().begin()) == arg;
            }
        }
    }
    v.require(soft_gap <= 1e-7, "T=1 softened softmax equals softmax");
    v.require(ce_gap <= 1e-7, "lambda=0 equals hard cross-entropy");
    v.require(monotone, "entropy non-decreasing in T");
    v.require(argmax_stable, "argmax invariant in T");
    v.detail << " max|soft(T=1)-softmax|=" << soft_gap << ", max|L(lambda=0)-CE|=" << ce_gap
             << ", entropy monotone and argmax invariant over T in {1..64} on 800 vectors";
}

void pooling_identity(Verdict& v) {
    for (SizeClass s : kSizeClasses) {
        const std::size_t pv = count_parameters({s, PoolingVariant::v}), p1 = count_parameters({s, PoolingVariant::p1}),
                          p12 = count_parameters({s, PoolingVariant::p12});
        v.require(p1 == pv, std::string(to_string(s)) + " p1 == v");
        v.require(p12 < pv, std::string(to_string(s)) + " p12 < v");
        v.detail << " " << to_string(s) << ": v=" << pv << " p1=" << p1 << " p12=" << p12 << ";";
    }
}

void fold_invariants(Verdict& v) {
    // CK+-shaped: 1574 samples, 8 classes, 123 subjects of uneven size
    const std::size_t counts[8] = {135, 54, 177, 75, 207, 84, 249, 593};
    DatasetManifest m;
    m.class_names = default_class_names();
    std::size_t n = 0;
    for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t i = 0; i < counts[c]; ++i, ++n)
            m.samples.push_back({"S" + std::to_string(n), "", int(c), "subj" + std::to_string((n * 7 + n / 50) % 123)});
    std::size_t runs = 0;
    double seen_fraction = 0;
    for (FoldMode mode : {FoldMode::random, FoldMode::subject_independent})
        for (std::uint64_t seed = 1; seed <= 25; ++seed) {
            const FoldSplit split = make_folds(m, mode, seed);
            v.require(split.k == 10, "10 folds");
            std::vector<int> hits(m.size(), 0);
            for (std::size_t f = 0; f < 10; ++f) {
                const auto test = split.test_indices(f), train = split.train_indices(f);
                std::set<std::string> train_ids;
                for (auto i : train) train_ids.insert(m.samples[i].id);
                for (auto i : test) {
                    ++hits[i];
                    if (train_ids.count(m.samples[i].id)) v.require(false, "train/test id intersection");
                }
                if (test.size() + train.size() != m.size()) v.require(false, "fold covers the manifest");
            }
            v.require(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }), "exact partition");
            if (mode == FoldMode::subject_independent) {
                std::map<std::string, std::size_t> fold_of_subject;
                for (std::size_t i = 0; i < m.size(); ++i) {
                    auto [it, fresh] = fold_of_subject.emplace(m.samples[i].subject_id, split.fold_of[i]);
                    if (!fresh && it->second != split.fold_of[i]) v.require(false, "subject split across folds");
                }
            } else {
                seen_fraction += seen_subject_fraction(m, split) / 25.0;
            }
            ++runs;
        }
    v.detail << " " << runs << " splits of a 1574-sample/123-subject manifest; random-mode seen-subject fraction "
             << seen_fraction;
}

struct DeskData {
    testutil::TempDir dir{"acceptance"};
    Dataset learn;    // 200 images, 3 classes
    Dataset kd;       // 100 images for the distillation comparison
    Dataset teacher;  // disjoint set the teacher is trained on
};

Dataset synth(const DeskData& d, const std::string& name, std::size_t images, std::uint64_t seed) {
    SyntheticOptions opt;
    opt.images = images;
    opt.classes = 3;
    opt.subjects = 20;
    opt.seed = seed;
    return Dataset::load(load_manifest(write_synthetic_dataset(d.dir.file(name), opt)));
}

void desk_learning(Verdict& v, const DeskData& d) {
    // XXS, 60 epochs on the 200-image set; fold 0 of a random split held out
    const FoldSplit split = make_folds(d.learn.manifest, FoldMode::random, 1);
    TrainConfig cfg;
    cfg.epochs = 60;
    Model xxs({SizeClass::XXS, PoolingVariant::p12}, model_seed_for_fold(1, 0));
    cfg.seed = train_seed_for_fold(1, 0);
    train(xxs, d.learn, split, 0, cfg);
    const double train_acc = evaluate(xxs, d.learn, split.train_indices(0)).accuracy();
    const double held_acc = evaluate(xxs, d.learn, split, 0).accuracy();
    v.require(train_acc > 0.9, "training accuracy > 0.9");
    v.require(held_acc > 0.6, "held-out accuracy > 0.6");
    v.detail << " XXS 60 epochs: train " << train_acc << ", held-out " << held_acc << ";";

    // M teacher trained on a disjoint synthetic set, then vanilla vs distilled XXS
    TrainConfig tcfg;
    tcfg.epochs = 10;
    Model teacher({SizeClass::M, PoolingVariant::p12}, 5);
    std::vector<std::size_t> teacher_idx(d.teacher.size());
    for (std::size_t i = 0; i < teacher_idx.size(); ++i) teacher_idx[i] = i;
    train(teacher, d.teacher, teacher_idx, tcfg);
    const TeacherLogits logits = compute_logits(teacher, d.kd);
    std::vector<std::size_t> all(d.kd.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const double teacher_acc = evaluate(teacher, d.kd, all).accuracy();

    TrainConfig cv;
    cv.epochs = 30;
    cv.learning_rate = 1e-3f;
    cv.augment = false;
    const ModelSpec spec{SizeClass::XXS, PoolingVariant::p12};
    const ExperimentResult vanilla = cross_validate(spec, d.kd, FoldMode::random, cv);
    cv.distillation = DistillationConfig{4.0f, 0.5f, GradScaleMode::none};
    const ExperimentResult distilled = cross_validate(spec, d.kd, FoldMode::random, cv, &logits);
    v.require(distilled.mean_accuracy >= vanilla.mean_accuracy - 0.01, "distilled >= vanilla - 1 point");
    v.detail << " teacher M accuracy on CV set " << teacher_acc << "; 10-fold CV vanilla " << vanilla.mean_accuracy
             << ", distilled (T=4, lambda=0.5) " << distilled.mean_accuracy;
}

void latency(Verdict& v) {
    // several interleaved rounds; each model keeps its quietest round
    std::map<SizeClass, BenchReport> best;
    for (int round = 0; round < 20; ++round)
        for (SizeClass s : kSizeClasses) {
            const Model m({s, PoolingVariant::p12}, 1);
            const BenchReport r = bench_inference(m, 1000, 50);
            v.require(r.iterations >= 100 && r.threads == 1, "single-threaded, >= 100 iterations");
            v.require(std::abs(r.fps - 1000.0 / r.mean_ms) <= 1e-9 * r.fps, "fps == 1000 / mean");
            if (!best.count(s) || r.mean_ms < best[s].mean_ms) best[s] = r;
        }
    const double m = best[SizeClass::M].mean_ms, s = best[SizeClass::S].mean_ms, xs = best[SizeClass::XS].mean_ms,
                 xxs = best[SizeClass::XXS].mean_ms;
    v.require(xxs <= xs && xs <= s && s <= m, "XXS <= XS <= S <= M");
    v.require(xxs < 5.0, "XXS mean < 5 ms");
    v.detail << " mean ms M=" << m << " S=" << s << " XS=" << xs << " XXS=" << xxs << " (XXS fps "
             << best[SizeClass::XXS].fps << ", pinned=" << best[SizeClass::XXS].pinned << ")";
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "microexp");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    return cli_main(int(argv.size()), argv.data(), out, err);
}

void determinism(Verdict& v, const DeskData& d) {
    SyntheticOptions opt;
    opt.images = 30;
    opt.classes = 3;
    opt.subjects = 10;
    const std::string manifest = write_synthetic_dataset(d.dir.file("replay-data"), opt);
    const DatasetManifest m = load_manifest(manifest);
    Rng rng(3);
    save_teacher_logits(d.dir.file("replay-t.csv"),
                        TeacherLogits(m.ids(), testutil::random_tensor({m.size(), 8}, rng, -3, 3)));

    const std::vector<std::vector<std::string>> runs = {
        {"train", "--manifest", manifest, "--epochs", "2", "--seed", "7", "--jobs", "3"},
        {"train", "--manifest", manifest, "--epochs", "1", "--no-augment", "--teacher-logits",
         d.dir.file("replay-t.csv"), "--temperature", "8", "--mode", "subject-independent"},
        {"sweep", "--manifest", manifest, "--epochs", "1", "--no-augment", "--teacher-logits",
         d.dir.file("replay-t.csv"), "--temperatures", "2,16"},
        {"ablate", "--manifest", manifest, "--epochs", "1", "--no-augment", "--mode", "both"}};
    std::size_t compared = 0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const std::string first = d.dir.file("run" + std::to_string(i)), second = first + "-replay";
        auto args = runs[i];
        args.insert(args.end(), {"--out", first});
        v.require(cli(args) == 0, "run " + runs[i][0]);
        v.require(cli({runs[i][0], "--config", first + "/run.json", "--out", second}) == 0, "replay " + runs[i][0]);
        const std::string a = slurp(first + "/results.jsonl"), b = slurp(second + "/results.jsonl");
        v.require(!a.empty() && a == b, "bit-identical records for " + runs[i][0]);
        compared += read_results_jsonl(first + "/results.jsonl").size();
    }
    v.detail << " " << runs.size() << " runs (train cv, distilled train, sweep, ablate) replayed from run.json; "
             << compared << " result records byte-identical";
}

}  // namespace

int main() {
    std::cout << std::setprecision(6);
    criterion("parameter-count reproduction", parameter_counts);
    criterion("spatial-chain reproduction", spatial_chain);
    criterion("gradient suite", gradient_suite);
    criterion("loss degeneracies", degeneracies);
    criterion("pooling-ablation identity", pooling_identity);
    criterion("fold invariants", fold_invariants);

    DeskData data;
    data.learn = synth(data, "learn", 200, 1);
    data.kd = synth(data, "kd", 100, 2);
    data.teacher = synth(data, "teacher", 200, 11);
    criterion("desk-scale learning", [&](Verdict& v) { desk_learning(v, data); });
    criterion("latency ordering and envelope", latency);
    criterion("determinism", [&](Verdict& v) { determinism(v, data); });

    std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criterion(s) failed" : "acceptance: all passed")
              << std::endl;
    return failures ? 1 : 0;
}
