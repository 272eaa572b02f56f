#include "microexp/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "microexp/errors.hpp"

namespace microexp {

namespace {

constexpr char kMagic[4] = {'M', 'X', 'T', 'N'};

void check_same_or_scalar(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape() || b.size() == 1) return;
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("MXTN: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream s;
    s << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) s << (i ? "x" : "") << shape[i];
    s << ']';
    return s.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (auto d : shape_)
        if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_)
        if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
    if (shape_size(shape_) != data_.size())
        throw DimensionError("shape " + shape_string(shape_) + " does not hold " +
                             std::to_string(data_.size()) + " values");
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
        throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::row(std::size_t i) const {
    if (rank() != 2 || i >= shape_[0]) throw DimensionError("row index out of range for " + shape_string(shape_));
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(i * shape_[1]);
    return Tensor({shape_[1]}, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(shape_[1])));
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
    Tensor out = a;
    auto o = out.data();
    auto bv = b.data();
    switch (op) {
        case ElementwiseOp::relu:
            for (auto& v : o) v = v > 0.0f ? v : 0.0f;
            return out;
        case ElementwiseOp::relu_backward:
            if (a.shape() != b.shape())
                throw DimensionError("relu_backward: shape mismatch " + shape_string(a.shape()) + " vs " +
                                     shape_string(b.shape()));
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] > 0.0f ? bv[i] : 0.0f;
            return out;
        case ElementwiseOp::scale:
            if (b.size() != 1)
                throw DimensionError("scale: factor must be a scalar, got " + shape_string(b.shape()));
            for (auto& v : o) v *= bv[0];
            return out;
        default:
            break;
    }
    check_same_or_scalar(a, b, op == ElementwiseOp::add ? "add" : op == ElementwiseOp::sub ? "sub" : "mul");
    const bool broadcast = b.size() == 1 && a.size() != 1;
    for (std::size_t i = 0; i < o.size(); ++i) {
        const float rhs = broadcast ? bv[0] : bv[i];
        switch (op) {
            case ElementwiseOp::add: o[i] += rhs; break;
            case ElementwiseOp::sub: o[i] -= rhs; break;
            case ElementwiseOp::mul: o[i] *= rhs; break;
            default: break;
        }
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }
Tensor scale(const Tensor& a, float factor) { return elementwise(ElementwiseOp::scale, a, Tensor::scalar(factor)); }
Tensor relu(const Tensor& a) { return elementwise(ElementwiseOp::relu, a, a); }
Tensor relu_backward(const Tensor& input, const Tensor& upstream) {
    return elementwise(ElementwiseOp::relu_backward, input, upstream);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    auto cv = c.data();
    auto av = a.data();
    auto bv = b.data();
    // i-k-j order: every c[i][j] still sums its k terms in increasing k.
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = cv.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float aip = av[i * k + p];
            const float* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return c;
}

Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
}

float sum(const Tensor& a) {
    float s = 0.0f;
    for (float v : a.data()) s += v;
    return s;
}

float max_abs(const Tensor& a) {
    float m = 0.0f;
    for (float v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

Tensor numerical_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double epsilon) {
    if (!(epsilon > 0.0)) throw ValidationError("numerical_gradient: epsilon must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float original = probe[i];
        probe[i] = static_cast<float>(original + epsilon);
        const double up = f(probe);
        const double step_up = static_cast<double>(probe[i]) - original;
        probe[i] = static_cast<float>(original - epsilon);
        const double down = f(probe);
        const double step_down = original - static_cast<double>(probe[i]);
        probe[i] = original;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericError("numerical_gradient: non-finite function value at coordinate " + std::to_string(i));
        // Divide by the step actually taken after float rounding.
        grad[i] = static_cast<float>((up - down) / (step_up + step_down));
    }
    return grad;
}

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write(kMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    if (!out) throw IoError("MXTN: write failed");
}

Tensor read_tensor(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) throw FormatError("MXTN: bad magic");
    const std::uint32_t rank = get_u32(in);
    if (rank == 0 || rank > 8) throw FormatError("MXTN: unsupported rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
        d = get_u32(in);
        if (d == 0) throw FormatError("MXTN: zero dimension");
    }
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = std::bit_cast<float>(get_u32(in));
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return read_tensor(in);
}

std::size_t serialized_tensor_bytes(const Shape& shape) { return 4 + 4 + 4 * shape.size() + 4 * shape_size(shape); }

}  // namespace microexp
