#include "microexp/layers.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <limits>

#include "microexp/errors.hpp"

namespace microexp {

namespace {

void ensure_shape(Tensor& t, const Shape& shape) {
    if (t.shape() != shape) t = Tensor(shape);
}

// Allocation-free check-and-resize for the forward hot path.
void ensure_shape3(Tensor& t, std::size_t a, std::size_t b, std::size_t c) {
    if (t.rank() == 3 && t.dim(0) == a && t.dim(1) == b && t.dim(2) == c) return;
    t = Tensor({a, b, c});
}

void check_conv_input(const ConvLayer& layer, const Tensor& input) {
    if (input.dim(2) != layer.in_channels())
        throw DimensionError("conv: input " + shape_string(input.shape()) + " has " + std::to_string(input.dim(2)) +
                             " channels, kernel " + shape_string(layer.kernel.shape()) + " expects " +
                             std::to_string(layer.in_channels()));
}

void require_rank3(const Tensor& t, const char* what) {
    if (t.rank() != 3) throw DimensionError(std::string(what) + ": expected [h x w x c], got " + shape_string(t.shape()));
}

}  // namespace

Shape ConvLayer::output_shape(const Shape& input) const {
    if (input.size() != 3) throw DimensionError("conv: expected [h x w x c], got " + shape_string(input));
    if (input[2] != in_channels())
        throw DimensionError("conv: input " + shape_string(input) + " has " + std::to_string(input[2]) +
                             " channels, kernel " + shape_string(kernel.shape()) + " expects " +
                             std::to_string(in_channels()));
    return {same_ceil_extent(input[0], stride), same_ceil_extent(input[1], stride), out_channels()};
}

Tensor conv_forward(const ConvLayer& layer, const Tensor& input) {
    Tensor out;
    conv_forward_into(layer, input, out);
    return out;
}

namespace {

struct ConvGeometry {
    std::size_t h, w, cin, oh, ow, cout, kh, kw, s;
    std::ptrdiff_t pad_t, pad_l;
};

#if defined(__GNUC__)
using Float4 = float __attribute__((vector_size(16)));

// Sixteen output channels held in four named vector registers (an array of
// vectors spills). Same summation order as the scalar path.
void conv_forward_16(const ConvGeometry& g, const float* in, const float* k, const float* b, float* o) {
    Float4 b0, b1, b2, b3;
    std::memcpy(&b0, b, 16);
    std::memcpy(&b1, b + 4, 16);
    std::memcpy(&b2, b + 8, 16);
    std::memcpy(&b3, b + 12, 16);
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
        const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * g.s) - g.pad_t;
        const std::size_t ky0 = iy0 < 0 ? static_cast<std::size_t>(-iy0) : 0;
        const std::size_t ky1 = std::min(g.kh, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(g.h) - iy0));
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * g.s) - g.pad_l;
            const std::size_t kx0 = ix0 < 0 ? static_cast<std::size_t>(-ix0) : 0;
            const std::size_t kx1 = std::min(g.kw, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(g.w) - ix0));
            Float4 a0 = b0, a1 = b1, a2 = b2, a3 = b3;
            for (std::size_t ky = ky0; ky < ky1; ++ky) {
                const std::size_t iy = static_cast<std::size_t>(iy0 + static_cast<std::ptrdiff_t>(ky));
                const std::size_t ix = static_cast<std::size_t>(ix0 + static_cast<std::ptrdiff_t>(kx0));
                const float* px = in + (iy * g.w + ix) * g.cin;
                const float* kp = k + (ky * g.kw + kx0) * g.cin * 16;
                const std::size_t run = (kx1 - kx0) * g.cin;
                for (std::size_t j = 0; j < run; ++j, kp += 16) {
                    const float x = px[j];
                    Float4 k0, k1, k2, k3;
                    std::memcpy(&k0, kp, 16);
                    std::memcpy(&k1, kp + 4, 16);
                    std::memcpy(&k2, kp + 8, 16);
                    std::memcpy(&k3, kp + 12, 16);
                    a0 += x * k0;
                    a1 += x * k1;
                    a2 += x * k2;
                    a3 += x * k3;
                }
            }
            float* dst = o + (oy * g.ow + ox) * 16;
            std::memcpy(dst, &a0, 16);
            std::memcpy(dst + 4, &a1, 16);
            std::memcpy(dst + 8, &a2, 16);
            std::memcpy(dst + 12, &a3, 16);
        }
    }
}
#endif

// Accumulates into a fixed-size local array; for wide layers the compiler
// keeps it in registers more effectively than explicit vectors.
template <std::size_t CO>
void conv_forward_local(const ConvGeometry& g, const float* in, const float* k, const float* b, float* o) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
        const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * g.s) - g.pad_t;
        const std::size_t ky0 = iy0 < 0 ? static_cast<std::size_t>(-iy0) : 0;
        const std::size_t ky1 = std::min(g.kh, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(g.h) - iy0));
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * g.s) - g.pad_l;
            const std::size_t kx0 = ix0 < 0 ? static_cast<std::size_t>(-ix0) : 0;
            const std::size_t kx1 = std::min(g.kw, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(g.w) - ix0));
            float acc[CO];
            for (std::size_t co = 0; co < CO; ++co) acc[co] = b[co];
            for (std::size_t ky = ky0; ky < ky1; ++ky) {
                const std::size_t iy = static_cast<std::size_t>(iy0 + static_cast<std::ptrdiff_t>(ky));
                const std::size_t ix = static_cast<std::size_t>(ix0 + static_cast<std::ptrdiff_t>(kx0));
                const float* __restrict px = in + (iy * g.w + ix) * g.cin;
                const float* __restrict kp = k + (ky * g.kw + kx0) * g.cin * CO;
                const std::size_t run = (kx1 - kx0) * g.cin;
                for (std::size_t j = 0; j < run; ++j) {
                    const float x = px[j];
                    const float* __restrict kc = kp + j * CO;
                    for (std::size_t co = 0; co < CO; ++co) acc[co] += x * kc[co];
                }
            }
            std::memcpy(o + (oy * g.ow + ox) * CO, acc, sizeof acc);
        }
    }
}

void conv_forward_scalar(const ConvGeometry& g, const float* in, const float* k, const float* b, float* o) {
    const std::size_t cout = g.cout;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
        const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * g.s) - g.pad_t;
        const std::size_t ky0 = iy0 < 0 ? static_cast<std::size_t>(-iy0) : 0;
        const std::size_t ky1 = std::min(g.kh, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(g.h) - iy0));
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * g.s) - g.pad_l;
            const std::size_t kx0 = ix0 < 0 ? static_cast<std::size_t>(-ix0) : 0;
            const std::size_t kx1 = std::min(g.kw, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(g.w) - ix0));
            float* __restrict acc = o + (oy * g.ow + ox) * cout;
            std::copy(b, b + cout, acc);
            for (std::size_t ky = ky0; ky < ky1; ++ky) {
                const std::size_t iy = static_cast<std::size_t>(iy0 + static_cast<std::ptrdiff_t>(ky));
                // kx0..kx1 is a contiguous run of input pixels, so the
                // (kx, ci) pairs form one flat run of the kernel as well.
                const std::size_t ix = static_cast<std::size_t>(ix0 + static_cast<std::ptrdiff_t>(kx0));
                const float* __restrict px = in + (iy * g.w + ix) * g.cin;
                const float* __restrict kp = k + (ky * g.kw + kx0) * g.cin * cout;
                const std::size_t run = (kx1 - kx0) * g.cin;
                for (std::size_t j = 0; j < run; ++j) {
                    const float x = px[j];
                    const float* __restrict kc = kp + j * cout;
                    for (std::size_t co = 0; co < cout; ++co) acc[co] += x * kc[co];
                }
            }
        }
    }
}

}  // namespace

void conv_forward_into(const ConvLayer& layer, const Tensor& input, Tensor& out) {
    require_rank3(input, "conv_forward");
    check_conv_input(layer, input);
    ConvGeometry g;
    g.h = input.dim(0);
    g.w = input.dim(1);
    g.cin = input.dim(2);
    g.s = layer.stride;
    g.oh = same_ceil_extent(g.h, g.s);
    g.ow = same_ceil_extent(g.w, g.s);
    g.cout = layer.out_channels();
    g.kh = layer.kernel_h();
    g.kw = layer.kernel_w();
    g.pad_t = static_cast<std::ptrdiff_t>(same_ceil_pad_before(g.h, g.kh, g.s));
    g.pad_l = static_cast<std::ptrdiff_t>(same_ceil_pad_before(g.w, g.kw, g.s));
    ensure_shape3(out, g.oh, g.ow, g.cout);

    const float* in = input.data().data();
    const float* k = layer.kernel.data().data();
    const float* b = layer.bias.data().data();
    float* o = out.data().data();
#if defined(__GNUC__)
    if (g.cout == 16) return conv_forward_16(g, in, k, b, o);
#endif
    if (g.cout == 32) return conv_forward_local<32>(g, in, k, b, o);
    conv_forward_scalar(g, in, k, b, o);
}

ConvGrads conv_backward(const ConvLayer& layer, const Tensor& input, const Tensor& upstream) {
    ConvGrads g{Tensor(input.shape()), Tensor(layer.kernel.shape()), Tensor(layer.bias.shape())};
    conv_backward_accumulate(layer, input, upstream, &g.d_input, g.d_kernel, g.d_bias);
    return g;
}

void conv_backward_accumulate(const ConvLayer& layer, const Tensor& input, const Tensor& upstream, Tensor* d_input,
                              Tensor& d_kernel, Tensor& d_bias) {
    require_rank3(input, "conv_backward");
    const Shape out_shape = layer.output_shape(input.shape());
    if (upstream.shape() != out_shape)
        throw DimensionError("conv_backward: upstream " + shape_string(upstream.shape()) + " vs output " +
                             shape_string(out_shape));
    if (d_kernel.shape() != layer.kernel.shape() || d_bias.shape() != layer.bias.shape())
        throw DimensionError("conv_backward: gradient accumulators do not match parameters");
    if (d_input && d_input->shape() != input.shape())
        throw DimensionError("conv_backward: d_input " + shape_string(d_input->shape()) + " vs input " +
                             shape_string(input.shape()));

    const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    const std::size_t oh = out_shape[0], ow = out_shape[1], cout = out_shape[2];
    const std::size_t kh = layer.kernel_h(), kw = layer.kernel_w(), s = layer.stride;
    const auto pad_t = static_cast<std::ptrdiff_t>(same_ceil_pad_before(h, kh, s));
    const auto pad_l = static_cast<std::ptrdiff_t>(same_ceil_pad_before(w, kw, s));

    const float* in = input.data().data();
    const float* up = upstream.data().data();
    float* dk = d_kernel.data().data();
    float* db = d_bias.data().data();
    float* di = d_input ? d_input->data().data() : nullptr;

    // Kernel re-laid out as [kh×kw×cout×cin] so the input-gradient update runs
    // contiguously over input channels.
    std::vector<float> kt;
    if (di) {
        kt.resize(layer.kernel.size());
        const float* k = layer.kernel.data().data();
        for (std::size_t tap = 0; tap < kh * kw; ++tap)
            for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t co = 0; co < cout; ++co)
                    kt[(tap * cout + co) * cin + ci] = k[(tap * cin + ci) * cout + co];
    }

    for (std::size_t oy = 0; oy < oh; ++oy) {
        const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * s) - pad_t;
        const std::size_t ky0 = iy0 < 0 ? static_cast<std::size_t>(-iy0) : 0;
        const std::size_t ky1 = std::min(kh, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(h) - iy0));
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * s) - pad_l;
            const std::size_t kx0 = ix0 < 0 ? static_cast<std::size_t>(-ix0) : 0;
            const std::size_t kx1 = std::min(kw, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(w) - ix0));
            const float* __restrict g = up + (oy * ow + ox) * cout;
            for (std::size_t co = 0; co < cout; ++co) db[co] += g[co];
            for (std::size_t ky = ky0; ky < ky1; ++ky) {
                const std::size_t iy = static_cast<std::size_t>(iy0 + static_cast<std::ptrdiff_t>(ky));
                const std::size_t ix = static_cast<std::size_t>(ix0 + static_cast<std::ptrdiff_t>(kx0));
                const std::size_t pix = (iy * w + ix) * cin;
                const std::size_t run = (kx1 - kx0) * cin;
                const float* __restrict px = in + pix;
                float* __restrict dkp = dk + (ky * kw + kx0) * cin * cout;
                for (std::size_t j = 0; j < run; ++j) {
                    const float x = px[j];
                    float* __restrict dkc = dkp + j * cout;
                    for (std::size_t co = 0; co < cout; ++co) dkc[co] += x * g[co];
                }
                if (di) {
                    for (std::size_t kx = kx0; kx < kx1; ++kx) {
                        float* __restrict dip = di + pix + (kx - kx0) * cin;
                        const float* __restrict ktap = kt.data() + (ky * kw + kx) * cout * cin;
                        for (std::size_t co = 0; co < cout; ++co) {
                            const float gc = g[co];
                            const float* __restrict kc = ktap + co * cin;
                            for (std::size_t ci = 0; ci < cin; ++ci) dip[ci] += kc[ci] * gc;
                        }
                    }
                }
            }
        }
    }
}

Shape MaxPoolLayer::output_shape(const Shape& input) const {
    if (input.size() != 3) throw DimensionError("maxpool: expected [h x w x c], got " + shape_string(input));
    return {same_ceil_extent(input[0], stride), same_ceil_extent(input[1], stride), input[2]};
}

PoolResult maxpool_forward(const MaxPoolLayer& layer, const Tensor& input) {
    PoolResult r;
    maxpool_forward_into(layer, input, r.output, &r.indices);
    return r;
}

void maxpool_forward_into(const MaxPoolLayer& layer, const Tensor& input, Tensor& out, PoolIndices* indices) {
    require_rank3(input, "maxpool_forward");
    const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
    const std::size_t oh = same_ceil_extent(h, layer.stride), ow = same_ceil_extent(w, layer.stride);
    ensure_shape3(out, oh, ow, c);
    if (indices) {
        if (indices->input_shape != input.shape()) indices->input_shape = input.shape();
        indices->argmax.resize(out.size());
    }
    const float* in = input.data().data();
    float* o = out.data().data();

    for (std::size_t oy = 0; oy < oh; ++oy) {
        const std::size_t y0 = oy * layer.stride, y1 = std::min(y0 + layer.kernel, h);
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::size_t x0 = ox * layer.stride, x1 = std::min(x0 + layer.kernel, w);
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::size_t best = (y0 * w + x0) * c + ch;
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t x = x0; x < x1; ++x) {
                        const std::size_t idx = (y * w + x) * c + ch;
                        if (in[idx] > in[best]) best = idx;
                    }
                const std::size_t oidx = (oy * ow + ox) * c + ch;
                o[oidx] = in[best];
                if (indices) indices->argmax[oidx] = static_cast<std::uint32_t>(best);
            }
        }
    }
}

Tensor maxpool_backward(const PoolIndices& indices, const Tensor& upstream) {
    Tensor d_input(indices.input_shape);
    maxpool_backward_into(indices, upstream, d_input);
    return d_input;
}

void maxpool_backward_into(const PoolIndices& indices, const Tensor& upstream, Tensor& d_input) {
    if (upstream.size() != indices.argmax.size())
        throw DimensionError("maxpool_backward: upstream " + shape_string(upstream.shape()) + " does not match " +
                             std::to_string(indices.argmax.size()) + " pooled outputs");
    ensure_shape(d_input, indices.input_shape);
    d_input.fill(0.0f);
    for (std::size_t i = 0; i < upstream.size(); ++i) d_input[indices.argmax[i]] += upstream[i];
}

Tensor dense_forward(const DenseLayer& layer, const Tensor& input) {
    Tensor out;
    dense_forward_into(layer, input, out);
    return out;
}

void dense_forward_into(const DenseLayer& layer, const Tensor& input, Tensor& out) {
    const std::size_t in_f = layer.in_features(), out_f = layer.out_features();
    const bool batched = input.rank() == 2 && input.dim(1) == in_f;
    std::size_t rows = 1;
    if (batched)
        rows = input.dim(0);
    else if (input.size() != in_f)
        throw DimensionError("dense_forward: input " + shape_string(input.shape()) + " vs weights " +
                             shape_string(layer.weights.shape()));
    const bool shaped = batched ? out.rank() == 2 && out.dim(0) == rows && out.dim(1) == out_f
                                : out.rank() == 1 && out.dim(0) == out_f;
    if (!shaped) out = batched ? Tensor({rows, out_f}) : Tensor({out_f});

    const float* x = input.data().data();
    const float* wt = layer.weights.data().data();
    const float* b = layer.bias.data().data();
    float* y = out.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        float* yr = y + r * out_f;
        std::copy(b, b + out_f, yr);
        const float* xr = x + r * in_f;
        for (std::size_t i = 0; i < in_f; ++i) {
            const float xi = xr[i];
            if (xi == 0.0f) continue;
            const float* wrow = wt + i * out_f;
            for (std::size_t o = 0; o < out_f; ++o) yr[o] += xi * wrow[o];
        }
    }
}

DenseGrads dense_backward(const DenseLayer& layer, const Tensor& input, const Tensor& upstream) {
    DenseGrads g{Tensor(input.shape()), Tensor(layer.weights.shape()), Tensor(layer.bias.shape())};
    dense_backward_accumulate(layer, input, upstream, &g.d_input, g.d_weights, g.d_bias);
    return g;
}

void dense_backward_accumulate(const DenseLayer& layer, const Tensor& input, const Tensor& upstream, Tensor* d_input,
                               Tensor& d_weights, Tensor& d_bias) {
    const std::size_t in_f = layer.in_features(), out_f = layer.out_features();
    if (input.size() % in_f != 0 || upstream.size() != (input.size() / in_f) * out_f)
        throw DimensionError("dense_backward: input " + shape_string(input.shape()) + ", upstream " +
                             shape_string(upstream.shape()) + ", weights " + shape_string(layer.weights.shape()));
    if (d_weights.shape() != layer.weights.shape() || d_bias.shape() != layer.bias.shape())
        throw DimensionError("dense_backward: gradient accumulators do not match parameters");
    if (d_input && d_input->size() != input.size())
        throw DimensionError("dense_backward: d_input does not match input");
    const std::size_t rows = input.size() / in_f;

    const float* x = input.data().data();
    const float* wt = layer.weights.data().data();
    const float* g = upstream.data().data();
    float* dw = d_weights.data().data();
    float* db = d_bias.data().data();
    float* dx = d_input ? d_input->data().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
        const float* gr = g + r * out_f;
        const float* xr = x + r * in_f;
        for (std::size_t o = 0; o < out_f; ++o) db[o] += gr[o];
        for (std::size_t i = 0; i < in_f; ++i) {
            const float xi = xr[i];
            float* dwrow = dw + i * out_f;
            const float* wrow = wt + i * out_f;
            for (std::size_t o = 0; o < out_f; ++o) dwrow[o] += xi * gr[o];
            if (dx) {
                float acc = 0.0f;
                for (std::size_t o = 0; o < out_f; ++o) acc += wrow[o] * gr[o];
                dx[r * in_f + i] += acc;
            }
        }
    }
}

void softmax_into(std::span<const float> logits, std::span<float> out) {
    const float m = *std::max_element(logits.begin(), logits.end());
    float total = 0.0f;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        total += out[i];
    }
    for (auto& v : out) v /= total;
}

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 1 && logits.rank() != 2)
        throw DimensionError("softmax: expected rank 1 or 2, got " + shape_string(logits.shape()));
    Tensor out(logits.shape());
    const std::size_t cols = logits.shape().back();
    for (std::size_t r = 0; r < logits.size() / cols; ++r)
        softmax_into(logits.data().subspan(r * cols, cols), out.data().subspan(r * cols, cols));
    return out;
}

float cross_entropy(const Tensor& p, const Tensor& target) {
    if (p.shape() != target.shape())
        throw DimensionError("cross_entropy: shape mismatch " + shape_string(p.shape()) + " vs " +
                             shape_string(target.shape()));
    const std::size_t cols = p.shape().back();
    const std::size_t rows = p.size() / cols;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double row_mass = 0.0, row_loss = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const float t = target[r * cols + c];
            row_mass += t;
            if (t != 0.0f) row_loss -= t * std::log(std::max(p[r * cols + c], kLogClamp));
        }
        if (std::abs(row_mass - 1.0) > 1e-4)
            throw ValidationError("cross_entropy: target row " + std::to_string(r) + " sums to " +
                                  std::to_string(row_mass) + ", expected 1");
        total += row_loss;
    }
    return static_cast<float>(total / static_cast<double>(rows));
}

float xavier_bound(const Shape& shape) {
    double fan_in = 0, fan_out = 0;
    if (shape.size() == 4) {
        const double receptive = static_cast<double>(shape[0] * shape[1]);
        fan_in = receptive * static_cast<double>(shape[2]);
        fan_out = receptive * static_cast<double>(shape[3]);
    } else if (shape.size() == 2) {
        fan_in = static_cast<double>(shape[0]);
        fan_out = static_cast<double>(shape[1]);
    } else {
        return 0.0f;
    }
    return static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
}

Tensor xavier_init(const Shape& shape, std::uint64_t seed) {
    Tensor t(shape);
    if (shape.size() != 2 && shape.size() != 4) return t;
    const float bound = xavier_bound(shape);
    Rng rng(seed);
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

DropoutResult dropout_forward(const Tensor& input, float rate, bool training, Rng& rng) {
    DropoutResult r;
    dropout_forward_into(input, rate, training, rng, r.output, r.mask);
    return r;
}

void dropout_forward_into(const Tensor& input, float rate, bool training, Rng& rng, Tensor& out, Tensor& mask) {
    if (!(rate >= 0.0f && rate < 1.0f)) throw ValidationError("dropout rate must be in [0, 1)");
    ensure_shape(out, input.shape());
    ensure_shape(mask, input.shape());
    if (!training || rate == 0.0f) {
        std::copy(input.data().begin(), input.data().end(), out.data().begin());
        mask.fill(1.0f);
        return;
    }
    const float keep_scale = 1.0f / (1.0f - rate);
    for (std::size_t i = 0; i < input.size(); ++i) {
        const bool keep = !rng.bernoulli(rate);
        mask[i] = keep ? 1.0f : 0.0f;
        out[i] = keep ? input[i] * keep_scale : 0.0f;
    }
}

Tensor dropout_backward(const Tensor& mask, float rate, const Tensor& upstream) {
    if (mask.shape() != upstream.shape())
        throw DimensionError("dropout_backward: mask " + shape_string(mask.shape()) + " vs upstream " +
                             shape_string(upstream.shape()));
    Tensor d = upstream;
    const float keep_scale = 1.0f / (1.0f - rate);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = mask[i] != 0.0f ? d[i] * keep_scale : 0.0f;
    return d;
}

AdamState AdamState::for_shape(const Shape& shape, float learning_rate) {
    AdamState s;
    s.m = Tensor(shape);
    s.v = Tensor(shape);
    s.learning_rate = learning_rate;
    return s;
}

void adam_step(AdamState& state, Tensor& params, const Tensor& grads) {
    if (params.shape() != grads.shape() || state.m.shape() != params.shape() || state.v.shape() != params.shape())
        throw DimensionError("adam_step: params " + shape_string(params.shape()) + ", grads " +
                             shape_string(grads.shape()) + ", moments " + shape_string(state.m.shape()));
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const float c1 = static_cast<float>(1.0 - std::pow(static_cast<double>(state.beta1), t));
    const float c2 = static_cast<float>(1.0 - std::pow(static_cast<double>(state.beta2), t));
    const float b1 = state.beta1, b2 = state.beta2;
    float* p = params.data().data();
    float* m = state.m.data().data();
    float* v = state.v.data().data();
    const float* g = grads.data().data();
    for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        const float m_hat = m[i] / c1;
        const float v_hat = v[i] / c2;
        p[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
}

}  // namespace microexp
