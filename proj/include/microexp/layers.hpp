#pragma once

#include <cstdint>
#include <vector>

#include "microexp/random.hpp"
#include "microexp/tensor.hpp"

namespace microexp {

/// Output extent under same-ceil padding: ceil(in / stride).
constexpr std::size_t same_ceil_extent(std::size_t in, std::size_t stride) { return (in + stride - 1) / stride; }

/// Zero rows/cols added before the input so that `out` windows of size
/// `kernel` at `stride` fit; any odd pixel goes after (bottom/right).
constexpr std::size_t same_ceil_pad_before(std::size_t in, std::size_t kernel, std::size_t stride) {
    const std::size_t out = same_ceil_extent(in, stride);
    const std::size_t needed = (out - 1) * stride + kernel;
    return needed > in ? (needed - in) / 2 : 0;
}

// Feature maps are rank-3 tensors [h×w×c], channels innermost.

struct ConvLayer {
    Tensor kernel;  // [kh×kw×cin×cout]
    Tensor bias;    // [cout]
    std::size_t stride = 1;

    std::size_t kernel_h() const { return kernel.dim(0); }
    std::size_t kernel_w() const { return kernel.dim(1); }
    std::size_t in_channels() const { return kernel.dim(2); }
    std::size_t out_channels() const { return kernel.dim(3); }
    Shape output_shape(const Shape& input) const;
};

struct ConvGrads {
    Tensor d_input;
    Tensor d_kernel;
    Tensor d_bias;
};

Tensor conv_forward(const ConvLayer& layer, const Tensor& input);
/// `out` is reshaped only if its shape is wrong, so a warmed-up buffer is reused.
void conv_forward_into(const ConvLayer& layer, const Tensor& input, Tensor& out);
ConvGrads conv_backward(const ConvLayer& layer, const Tensor& input, const Tensor& upstream);
/// Adds kernel/bias gradients into the given accumulators; `d_input` may be
/// null when the input gradient is not needed (first layer).
void conv_backward_accumulate(const ConvLayer& layer, const Tensor& input, const Tensor& upstream, Tensor* d_input,
                              Tensor& d_kernel, Tensor& d_bias);

struct MaxPoolLayer {
    std::size_t kernel = 2;
    std::size_t stride = 2;
    Shape output_shape(const Shape& input) const;
};

/// Flat input offset of the winning element for each pooled output.
struct PoolIndices {
    Shape input_shape;
    std::vector<std::uint32_t> argmax;
};

struct PoolResult {
    Tensor output;
    PoolIndices indices;
};

/// Ceil-mode pooling: border windows are truncated, never padded. Ties go to
/// the first element in row-major window order.
PoolResult maxpool_forward(const MaxPoolLayer& layer, const Tensor& input);
void maxpool_forward_into(const MaxPoolLayer& layer, const Tensor& input, Tensor& out, PoolIndices* indices);
Tensor maxpool_backward(const PoolIndices& indices, const Tensor& upstream);
void maxpool_backward_into(const PoolIndices& indices, const Tensor& upstream, Tensor& d_input);

struct DenseLayer {
    Tensor weights;  // [in×out]
    Tensor bias;     // [out]

    std::size_t in_features() const { return weights.dim(0); }
    std::size_t out_features() const { return weights.dim(1); }
    std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

struct DenseGrads {
    Tensor d_input;
    Tensor d_weights;
    Tensor d_bias;
};

/// Accepts a single vector [in] (any shape with `in` elements) or a batch [N×in].
Tensor dense_forward(const DenseLayer& layer, const Tensor& input);
void dense_forward_into(const DenseLayer& layer, const Tensor& input, Tensor& out);
DenseGrads dense_backward(const DenseLayer& layer, const Tensor& input, const Tensor& upstream);
void dense_backward_accumulate(const DenseLayer& layer, const Tensor& input, const Tensor& upstream, Tensor* d_input,
                               Tensor& d_weights, Tensor& d_bias);

/// Row-wise softmax over the last axis of a rank-1 or rank-2 tensor.
Tensor softmax(const Tensor& logits);
void softmax_into(std::span<const float> logits, std::span<float> out);

inline constexpr float kLogClamp = 1e-12f;

/// -sum(target * log(max(p, 1e-12))), averaged over rows for rank-2 inputs.
/// Each target row must be a distribution (sums to 1 within 1e-4).
float cross_entropy(const Tensor& p, const Tensor& target);

/// Glorot-uniform on +-sqrt(6 / (fan_in + fan_out)). Rank-1 shapes (biases)
/// come back zero.
Tensor xavier_init(const Shape& shape, std::uint64_t seed);
float xavier_bound(const Shape& shape);

struct DropoutResult {
    Tensor output;
    Tensor mask;  // 1 where kept, 0 where dropped
};

/// Inverted dropout: survivors scaled by 1/(1-rate); inference is identity.
DropoutResult dropout_forward(const Tensor& input, float rate, bool training, Rng& rng);
void dropout_forward_into(const Tensor& input, float rate, bool training, Rng& rng, Tensor& out, Tensor& mask);
Tensor dropout_backward(const Tensor& mask, float rate, const Tensor& upstream);

struct AdamState {
    Tensor m;
    Tensor v;
    std::uint64_t t = 0;
    float learning_rate = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;

    static AdamState for_shape(const Shape& shape, float learning_rate = 1e-4f);
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, Tensor& params, const Tensor& grads);

}  // namespace microexp
