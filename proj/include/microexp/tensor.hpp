#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace microexp {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float32 array. Holds activations, weights, gradients and
/// logits alike.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor scalar(float value) { return Tensor({1}, {value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    float& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    float at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    void fill(float value);
    /// Same data, new shape; the element count must not change.
    Tensor reshaped(Shape shape) const;
    /// Row `i` of a rank-2 tensor as a rank-1 tensor.
    Tensor row(std::size_t i) const;

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

enum class ElementwiseOp { add, sub, mul, scale, relu, relu_backward };

/// Binary ops take `b` with the same shape as `a` or a single element (scalar
/// broadcast). For relu, `b` is ignored; for relu_backward, `a` is the forward
/// input and `b` the upstream gradient. `scale` multiplies by a scalar `b`.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor relu(const Tensor& a);
Tensor relu_backward(const Tensor& input, const Tensor& upstream);

/// [m×k]·[k×n]. Each output element accumulates over k left to right.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor identity(std::size_t n);

float sum(const Tensor& a);
float max_abs(const Tensor& a);

/// Central-difference gradient of a scalar function; the test oracle for every
/// hand-written backward pass.
Tensor numerical_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double epsilon);

// MXTN container: "MXTN", u32 rank, rank×u32 dims, little-endian f32 payload.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);
/// Byte length of the MXTN encoding of a tensor with this shape.
std::size_t serialized_tensor_bytes(const Shape& shape);

}  // namespace microexp
