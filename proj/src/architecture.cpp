#include "microexp/architecture.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "microexp/errors.hpp"

namespace microexp {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'X', 'C', 'K'};

void reset(Tensor& t, const Shape& shape) {
    if (t.shape() != shape)
        t = Tensor(shape);
    else
        t.fill(0.0f);
}

void relu_inplace(Tensor& t) {
    for (auto& v : t.data()) v = v > 0.0f ? v : 0.0f;
}

// Gradient gate for a ReLU whose (post-activation) output is `activated`.
void relu_gate(const Tensor& activated, Tensor& grad) {
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(activated[i] > 0.0f)) grad[i] = 0.0f;
}

json header_json(const ModelSpec& spec, std::uint64_t seed, std::uint64_t epoch) {
    json layers = json::array();
    for (const auto& p : parameter_shapes(spec)) layers.push_back({{"name", p.name}, {"shape", p.shape}});
    return {{"format", "microexp-checkpoint"},
            {"version", 1},
            {"spec", spec_to_json(spec, seed)},
            {"epoch", epoch},
            {"layers", layers}};
}

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

std::string_view to_string(SizeClass s) {
    switch (s) {
        case SizeClass::M: return "M";
        case SizeClass::S: return "S";
        case SizeClass::XS: return "XS";
        case SizeClass::XXS: return "XXS";
    }
    return "?";
}

std::string_view to_string(PoolingVariant v) {
    switch (v) {
        case PoolingVariant::v: return "v";
        case PoolingVariant::p1: return "p1";
        case PoolingVariant::p2: return "p2";
        case PoolingVariant::p12: return "p12";
    }
    return "?";
}

SizeClass parse_size_class(std::string_view text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "m") return SizeClass::M;
    if (lower == "s") return SizeClass::S;
    if (lower == "xs") return SizeClass::XS;
    if (lower == "xxs") return SizeClass::XXS;
    throw ValidationError("unknown size class '" + std::string(text) + "' (expected m, s, xs, xxs)");
}

PoolingVariant parse_pooling_variant(std::string_view text) {
    if (text == "v") return PoolingVariant::v;
    if (text == "p1") return PoolingVariant::p1;
    if (text == "p2") return PoolingVariant::p2;
    if (text == "p12") return PoolingVariant::p12;
    throw ValidationError("unknown pooling variant '" + std::string(text) + "' (expected v, p1, p2, p12)");
}

std::size_t student_fc1_width(SizeClass s) {
    switch (s) {
        case SizeClass::M: return 768;
        case SizeClass::S: return 192;
        case SizeClass::XS: return 96;
        case SizeClass::XXS: return 48;
    }
    return 0;
}

std::size_t candidate_base_width(SizeClass s) { return student_fc1_width(s) / 3; }

std::vector<std::size_t> ModelSpec::spatial_chain() const {
    std::vector<std::size_t> chain{kInputSize};
    chain.push_back(same_ceil_extent(chain.back(), conv1_stride()));
    if (pool_after_conv1()) chain.push_back(same_ceil_extent(chain.back(), 2));
    chain.push_back(same_ceil_extent(chain.back(), kConv2Stride));
    if (pool_after_conv2()) chain.push_back(same_ceil_extent(chain.back(), 2));
    return chain;
}

std::string ModelSpec::name() const {
    return std::string(to_string(size_class)) + "/" + std::string(to_string(variant));
}

std::vector<NamedShape> parameter_shapes(const ModelSpec& spec) {
    return {
        {"conv1.kernel", {kConv1Kernel, kConv1Kernel, 1, kConv1Channels}},
        {"conv1.bias", {kConv1Channels}},
        {"conv2.kernel", {kConv2Kernel, kConv2Kernel, kConv1Channels, kConv2Channels}},
        {"conv2.bias", {kConv2Channels}},
        {"fc1.weights", {spec.fc1_in(), spec.fc1_out()}},
        {"fc1.bias", {spec.fc1_out()}},
        {"fc2.weights", {spec.fc1_out(), kNumClasses}},
        {"fc2.bias", {kNumClasses}},
    };
}

std::size_t count_parameters(const ModelSpec& spec) {
    std::size_t n = 0;
    for (const auto& p : parameter_shapes(spec)) n += shape_size(p.shape);
    return n;
}

std::size_t checkpoint_bytes(const std::vector<NamedShape>& tensors, const json& header) {
    std::size_t n = 4 + 4 + header.dump().size();
    for (const auto& t : tensors) n += serialized_tensor_bytes(t.shape);
    return n;
}

SizeReport model_size_bytes(const ModelSpec& spec) {
    SizeReport r;
    r.parameters = count_parameters(spec);
    r.raw_bytes = 4 * r.parameters;
    r.checkpoint_bytes = checkpoint_bytes(parameter_shapes(spec), header_json(spec, 0, 0));
    r.with_optimizer_bytes = 3 * r.raw_bytes;
    return r;
}

json spec_to_json(const ModelSpec& spec, std::uint64_t seed) {
    return {{"size_class", to_string(spec.size_class)}, {"variant", to_string(spec.variant)}, {"seed", seed}};
}

ModelSpec spec_from_json(const json& j, std::uint64_t* seed) {
    try {
        ModelSpec spec;
        spec.size_class = parse_size_class(j.at("size_class").get<std::string>());
        spec.variant = parse_pooling_variant(j.at("variant").get<std::string>());
        if (seed) *seed = j.value("seed", std::uint64_t{0});
        return spec;
    } catch (const json::exception& e) {
        throw FormatError(std::string("model spec JSON: ") + e.what());
    }
}

void Gradients::zero() {
    for (auto& t : tensors) t.fill(0.0f);
}

Model::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
    const auto shapes = parameter_shapes(spec);
    auto init = [&](std::size_t i) { return xavier_init(shapes[i].shape, mix_seed(seed, i)); };
    conv1 = ConvLayer{init(0), init(1), spec.conv1_stride()};
    conv2 = ConvLayer{init(2), init(3), kConv2Stride};
    fc1 = DenseLayer{init(4), init(5)};
    fc2 = DenseLayer{init(6), init(7)};
}

void Model::set_dropout_rate(float rate) {
    if (!(rate >= 0.0f && rate < 1.0f)) throw ValidationError("dropout rate must be in [0, 1)");
    dropout_rate_ = rate;
}

std::vector<Tensor*> Model::parameters() {
    return {&conv1.kernel, &conv1.bias, &conv2.kernel, &conv2.bias, &fc1.weights, &fc1.bias, &fc2.weights, &fc2.bias};
}

std::vector<const Tensor*> Model::parameters() const {
    return {&conv1.kernel, &conv1.bias, &conv2.kernel, &conv2.bias, &fc1.weights, &fc1.bias, &fc2.weights, &fc2.bias};
}

std::vector<std::string> Model::parameter_names() const {
    std::vector<std::string> names;
    for (const auto& p : parameter_shapes(spec_)) names.push_back(p.name);
    return names;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
}

Gradients Model::zero_gradients() const {
    Gradients g;
    for (const Tensor* t : parameters()) g.tensors.emplace_back(t->shape());
    return g;
}

void Model::forward(const Tensor& input, Workspace& ws, bool training, Rng* rng) const {
    if (input.rank() != 3 || input.dim(2) != 1)
        throw DimensionError("model input must be [h x w x 1], got " + shape_string(input.shape()));
    const MaxPoolLayer pool;

    conv_forward_into(conv1, input, ws.conv1);
    Tensor* stage1 = &ws.conv1;
    if (spec_.pool_after_conv1()) {
        maxpool_forward_into(pool, ws.conv1, ws.pool1, training ? &ws.pool1_indices : nullptr);
        stage1 = &ws.pool1;
    }
    relu_inplace(*stage1);

    conv_forward_into(conv2, *stage1, ws.conv2);
    Tensor* stage2 = &ws.conv2;
    if (spec_.pool_after_conv2()) {
        maxpool_forward_into(pool, ws.conv2, ws.pool2, training ? &ws.pool2_indices : nullptr);
        stage2 = &ws.pool2;
    }
    relu_inplace(*stage2);
    if (stage2->size() != fc1.in_features())
        throw DimensionError("flattened features " + shape_string(stage2->shape()) + " do not match fc1 input " +
                             std::to_string(fc1.in_features()));

    dense_forward_into(fc1, *stage2, ws.hidden);
    relu_inplace(ws.hidden);
    if (training) {
        dropout_forward_into(ws.hidden, dropout_rate_, true, *rng, ws.dropped, ws.mask);
        dense_forward_into(fc2, ws.dropped, ws.logits);
    } else {
        dense_forward_into(fc2, ws.hidden, ws.logits);
    }
}

std::span<const float> Model::infer(const Tensor& input, Workspace& ws) const {
    forward(input, ws, false, nullptr);
    return ws.logits.data();
}

Tensor Model::logits(const Tensor& input) const {
    Workspace ws;
    forward(input, ws, false, nullptr);
    return ws.logits;
}

std::span<const float> Model::forward_train(const Tensor& input, Rng& rng, Workspace& ws) const {
    forward(input, ws, true, &rng);
    return ws.logits.data();
}

void Model::backward(const Tensor& input, std::span<const float> d_logits, Workspace& ws, Gradients& grads) const {
    if (d_logits.size() != kNumClasses) throw DimensionError("backward: expected 8 logit gradients");
    if (grads.tensors.size() != 8) throw DimensionError("backward: gradient set does not match model");
    auto& g = grads.tensors;

    reset(ws.d_logits_scratch, {kNumClasses});
    std::copy(d_logits.begin(), d_logits.end(), ws.d_logits_scratch.data().begin());

    reset(ws.d_hidden, ws.hidden.shape());
    dense_backward_accumulate(fc2, ws.dropped, ws.d_logits_scratch, &ws.d_hidden, g[6], g[7]);
    const float keep_scale = 1.0f / (1.0f - dropout_rate_);
    for (std::size_t i = 0; i < ws.d_hidden.size(); ++i) ws.d_hidden[i] *= ws.mask[i] * keep_scale;
    relu_gate(ws.hidden, ws.d_hidden);

    const Tensor& stage1 = spec_.pool_after_conv1() ? ws.pool1 : ws.conv1;
    const Tensor& stage2 = spec_.pool_after_conv2() ? ws.pool2 : ws.conv2;

    reset(ws.d_stage2, stage2.shape());
    dense_backward_accumulate(fc1, stage2, ws.d_hidden, &ws.d_stage2, g[4], g[5]);
    relu_gate(stage2, ws.d_stage2);
    const Tensor* d_conv2 = &ws.d_stage2;
    if (spec_.pool_after_conv2()) {
        maxpool_backward_into(ws.pool2_indices, ws.d_stage2, ws.d_conv2);
        d_conv2 = &ws.d_conv2;
    }

    reset(ws.d_stage1, stage1.shape());
    conv_backward_accumulate(conv2, stage1, *d_conv2, &ws.d_stage1, g[2], g[3]);
    relu_gate(stage1, ws.d_stage1);
    const Tensor* d_conv1 = &ws.d_stage1;
    if (spec_.pool_after_conv1()) {
        maxpool_backward_into(ws.pool1_indices, ws.d_stage1, ws.d_conv1);
        d_conv1 = &ws.d_conv1;
    }
    conv_backward_accumulate(conv1, input, *d_conv1, nullptr, g[0], g[1]);
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) { return Model(spec, seed); }

void write_checkpoint(std::ostream& out, const Model& model, std::uint64_t epoch) {
    const std::string header = header_json(model.spec(), model.seed(), epoch).dump();
    out.write(kCheckpointMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const Tensor* t : model.parameters()) write_tensor(out, *t);
    if (!out) throw IoError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) try {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic");
    const std::uint32_t len = get_u32(in);
    std::string text(len, '\0');
    if (!in.read(text.data(), len)) throw FormatError("checkpoint: truncated header");
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    std::uint64_t seed = 0;
    const ModelSpec spec = spec_from_json(header.at("spec"), &seed);
    Checkpoint ck{Model(spec, seed), header.value("epoch", std::uint64_t{0})};
    const auto expected = parameter_shapes(spec);
    const auto& layers = header.at("layers");
    if (layers.size() != expected.size())
        throw FormatError("checkpoint/spec mismatch: " + std::to_string(layers.size()) + " tensors, spec " +
                          spec.name() + " needs " + std::to_string(expected.size()));
    auto params = ck.model.parameters();
    for (std::size_t i = 0; i < expected.size(); ++i) {
        Tensor t = read_tensor(in);
        if (layers[i].at("name") != expected[i].name || t.shape() != expected[i].shape)
            throw FormatError("checkpoint/spec mismatch at " + expected[i].name + ": stored " +
                              shape_string(t.shape()) + ", spec " + spec.name() + " needs " +
                              shape_string(expected[i].shape));
        *params[i] = std::move(t);
    }
    return ck;
} catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
}

void save_checkpoint(const std::string& path, const Model& model, std::uint64_t epoch) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_checkpoint(out, model, epoch);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return read_checkpoint(in);
}

}  // namespace microexp
