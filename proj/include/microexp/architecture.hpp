#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "microexp/layers.hpp"

namespace microexp {

enum class SizeClass { M, S, XS, XXS };
/// v: no pooling, p1: pool after conv1, p2: pool after conv2, p12: both.
enum class PoolingVariant { v, p1, p2, p12 };

inline constexpr std::array<SizeClass, 4> kSizeClasses = {SizeClass::M, SizeClass::S, SizeClass::XS, SizeClass::XXS};
inline constexpr std::array<PoolingVariant, 4> kPoolingVariants = {PoolingVariant::v, PoolingVariant::p1,
                                                                   PoolingVariant::p2, PoolingVariant::p12};

std::string_view to_string(SizeClass s);
std::string_view to_string(PoolingVariant v);
SizeClass parse_size_class(std::string_view text);
PoolingVariant parse_pooling_variant(std::string_view text);

/// Width of fc1 in the published students (p12): 768/192/96/48.
std::size_t student_fc1_width(SizeClass s);
/// Candidate base width H = student width / 3; the tripling rule for pooling
/// after conv2 lands back on the student width.
std::size_t candidate_base_width(SizeClass s);

inline constexpr std::size_t kInputSize = 84;
inline constexpr std::size_t kNumClasses = 8;
inline constexpr std::size_t kConv1Kernel = 8;
inline constexpr std::size_t kConv1Channels = 16;
inline constexpr std::size_t kConv2Kernel = 4;
inline constexpr std::size_t kConv2Channels = 32;
inline constexpr std::size_t kConv2Stride = 2;

struct ModelSpec {
    SizeClass size_class = SizeClass::XXS;
    PoolingVariant variant = PoolingVariant::p12;

    bool pool_after_conv1() const { return variant == PoolingVariant::p1 || variant == PoolingVariant::p12; }
    bool pool_after_conv2() const { return variant == PoolingVariant::p2 || variant == PoolingVariant::p12; }
    /// 2 when conv1 is followed by pooling, otherwise 4.
    std::size_t conv1_stride() const { return pool_after_conv1() ? 2 : 4; }
    /// Spatial extent after each stage, starting from the 84-pixel input:
    /// input, conv1, [pool1], conv2, [pool2].
    std::vector<std::size_t> spatial_chain() const;
    std::size_t final_extent() const { return spatial_chain().back(); }
    std::size_t fc1_in() const { return final_extent() * final_extent() * kConv2Channels; }
    std::size_t fc1_out() const {
        return pool_after_conv2() ? 3 * candidate_base_width(size_class) : candidate_base_width(size_class);
    }
    std::string name() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct NamedShape {
    std::string name;
    Shape shape;
};

/// Parameter tensors in checkpoint order.
std::vector<NamedShape> parameter_shapes(const ModelSpec& spec);
std::size_t count_parameters(const ModelSpec& spec);

struct SizeReport {
    std::size_t parameters = 0;
    std::size_t raw_bytes = 0;             // 4 bytes per parameter
    std::size_t checkpoint_bytes = 0;      // actual serialized checkpoint
    std::size_t with_optimizer_bytes = 0;  // parameters plus both Adam moments
};

SizeReport model_size_bytes(const ModelSpec& spec);
/// Checkpoint length for an arbitrary tensor list; an empty list is the header alone.
std::size_t checkpoint_bytes(const std::vector<NamedShape>& tensors, const nlohmann::json& header);

nlohmann::json spec_to_json(const ModelSpec& spec, std::uint64_t seed);
ModelSpec spec_from_json(const nlohmann::json& j, std::uint64_t* seed = nullptr);

/// Activation buffers for one forward pass. Reused across calls, so a warm
/// workspace makes inference allocation-free.
struct Workspace {
    Tensor conv1;
    Tensor pool1;
    Tensor conv2;
    Tensor pool2;
    Tensor hidden;   // fc1 after ReLU
    Tensor dropped;  // hidden after dropout
    Tensor mask;
    Tensor logits;
    PoolIndices pool1_indices;
    PoolIndices pool2_indices;
    // backward scratch
    Tensor d_logits_scratch;
    Tensor d_hidden;
    Tensor d_stage2;
    Tensor d_conv2;
    Tensor d_stage1;
    Tensor d_conv1;
};

struct Gradients {
    std::vector<Tensor> tensors;  // parameter order
    void zero();
};

class Model {
public:
    Model(const ModelSpec& spec, std::uint64_t seed);

    const ModelSpec& spec() const noexcept { return spec_; }
    std::uint64_t seed() const noexcept { return seed_; }
    float dropout_rate() const noexcept { return dropout_rate_; }
    void set_dropout_rate(float rate);

    ConvLayer conv1;
    ConvLayer conv2;
    DenseLayer fc1;
    DenseLayer fc2;

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    std::vector<std::string> parameter_names() const;
    std::size_t parameter_count() const;
    Gradients zero_gradients() const;

    /// Inference on one [84×84×1] image; returns a view into `ws.logits`.
    std::span<const float> infer(const Tensor& input, Workspace& ws) const;
    Tensor logits(const Tensor& input) const;

    /// Training-mode forward (dropout active); caches what backward needs.
    std::span<const float> forward_train(const Tensor& input, Rng& rng, Workspace& ws) const;
    /// Accumulates parameter gradients for the pass cached in `ws`.
    void backward(const Tensor& input, std::span<const float> d_logits, Workspace& ws, Gradients& grads) const;

private:
    void forward(const Tensor& input, Workspace& ws, bool training, Rng* rng) const;

    ModelSpec spec_;
    std::uint64_t seed_;
    float dropout_rate_ = 0.5f;
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

void save_checkpoint(const std::string& path, const Model& model, std::uint64_t epoch);
struct Checkpoint {
    Model model;
    std::uint64_t epoch;
};
Checkpoint load_checkpoint(const std::string& path);
void write_checkpoint(std::ostream& out, const Model& model, std::uint64_t epoch);
Checkpoint read_checkpoint(std::istream& in);

}  // namespace microexp
