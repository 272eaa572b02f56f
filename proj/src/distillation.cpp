#include "microexp/distillation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "microexp/architecture.hpp"
#include "microexp/errors.hpp"
#include "microexp/layers.hpp"

namespace microexp {

namespace {

constexpr char kIdIndexMagic[4] = {'M', 'X', 'I', 'D'};

void check_temperature(float t) {
    if (!(t > 0.0f) || !std::isfinite(t))
        throw ValidationError("temperature must be positive, got " + std::to_string(t));
}

// -sum t log max(p, clamp), matching cross_entropy() for one row.
double row_cross_entropy(std::span<const float> target, std::span<const float> p) {
    double loss = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c)
        if (target[c] != 0.0f) loss -= target[c] * std::log(std::max(p[c], kLogClamp));
    return loss;
}

std::string format_float(float v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream s(line);
    while (std::getline(s, cell, ',')) {
        if (!cell.empty() && cell.back() == '\r') cell.pop_back();
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("teacher logits: truncated id index");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

TeacherLogits read_csv(std::istream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty teacher-logit file");
    const auto header = split_csv_line(line);
    if (header.size() != kNumClasses + 1 || header[0] != "sample_id")
        throw FormatError(path + ": expected header sample_id,z0..z7");
    for (std::size_t c = 0; c < kNumClasses; ++c)
        if (header[c + 1] != "z" + std::to_string(c)) throw FormatError(path + ": expected header sample_id,z0..z7");

    std::vector<std::string> ids;
    std::vector<float> values;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != kNumClasses + 1)
            throw FormatError(path + ":" + std::to_string(line_no) + ": logit vector for '" +
                              (cells.empty() ? std::string() : cells[0]) + "' has " +
                              std::to_string(cells.empty() ? 0 : cells.size() - 1) + " values, expected 8");
        ids.push_back(cells[0]);
        for (std::size_t c = 1; c < cells.size(); ++c) {
            float v = 0.0f;
            const auto& cell = cells[c];
            auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || !std::isfinite(v))
                throw FormatError(path + ":" + std::to_string(line_no) + ": bad logit value '" + cell + "'");
            values.push_back(v);
        }
    }
    if (ids.empty()) throw FormatError(path + ": no logit rows");
    const std::size_t rows = ids.size();
    return TeacherLogits(std::move(ids), Tensor({rows, kNumClasses}, std::move(values)));
}

TeacherLogits read_binary(std::istream& in, const std::string& path) {
    Tensor logits = read_tensor(in);
    if (logits.rank() != 2 || logits.dim(1) != kNumClasses)
        throw FormatError(path + ": logit tensor " + shape_string(logits.shape()) + " is not [N x 8]");
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kIdIndexMagic, 4) != 0) throw FormatError(path + ": missing id index");
    const std::uint32_t count = get_u32(in);
    if (count != logits.dim(0))
        throw FormatError(path + ": id index has " + std::to_string(count) + " ids for " +
                          std::to_string(logits.dim(0)) + " rows");
    std::vector<std::string> ids(count);
    for (auto& id : ids) {
        const std::uint32_t len = get_u32(in);
        id.resize(len);
        if (!in.read(id.data(), len)) throw FormatError(path + ": truncated id index");
    }
    return TeacherLogits(std::move(ids), std::move(logits));
}

}  // namespace

void DistillationConfig::validate() const {
    check_temperature(temperature);
    if (!(lambda >= 0.0f && lambda <= 1.0f))
        throw ValidationError("lambda must be in [0, 1], got " + std::to_string(lambda));
}

std::string_view to_string(GradScaleMode mode) { return mode == GradScaleMode::none ? "none" : "t_squared"; }

GradScaleMode parse_grad_scale_mode(std::string_view text) {
    if (text == "none") return GradScaleMode::none;
    if (text == "t_squared" || text == "t-squared") return GradScaleMode::t_squared;
    throw ValidationError("unknown grad scale mode '" + std::string(text) + "'");
}

Tensor softened_softmax(const Tensor& logits, float temperature) {
    check_temperature(temperature);
    if (temperature == 1.0f) return softmax(logits);
    return softmax(scale(logits, 1.0f / temperature));
}

double entropy(std::span<const float> p) {
    double h = 0.0;
    for (float v : p)
        if (v > 0.0f) h -= v * std::log(static_cast<double>(v));
    return h;
}

KdLoss kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, const Tensor& labels,
               const DistillationConfig& cfg) {
    cfg.validate();
    if (student_logits.rank() != 2)
        throw DimensionError("kd_loss: student logits must be [N x C], got " + shape_string(student_logits.shape()));
    if (teacher_logits.shape() != student_logits.shape() || labels.shape() != student_logits.shape())
        throw DimensionError("kd_loss: misaligned inputs student " + shape_string(student_logits.shape()) +
                             ", teacher " + shape_string(teacher_logits.shape()) + ", labels " +
                             shape_string(labels.shape()));
    const std::size_t n = student_logits.dim(0), c = student_logits.dim(1);
    const float t = cfg.temperature;
    const float soft_scale = cfg.grad_scale_mode == GradScaleMode::t_squared ? t * t : 1.0f;

    const Tensor p_teacher = softened_softmax(teacher_logits, t);
    const Tensor p_soft = softened_softmax(student_logits, t);
    const Tensor p_hard = softmax(student_logits);

    KdLoss out;
    out.d_logits = Tensor(student_logits.shape());
    double soft_total = 0.0, hard_total = 0.0;
    const float inv_n = 1.0f / static_cast<float>(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto y = labels.data().subspan(r * c, c);
        double mass = 0.0;
        for (float v : y) mass += v;
        if (std::abs(mass - 1.0) > 1e-4)
            throw ValidationError("kd_loss: label row " + std::to_string(r) + " sums to " + std::to_string(mass));
        const auto pt = p_teacher.data().subspan(r * c, c);
        const auto ps_soft = p_soft.data().subspan(r * c, c);
        const auto ps = p_hard.data().subspan(r * c, c);
        soft_total += row_cross_entropy(pt, ps_soft);
        hard_total += row_cross_entropy(y, ps);
        for (std::size_t k = 0; k < c; ++k) {
            const float soft_grad = soft_scale * (ps_soft[k] - pt[k]) / t;
            const float hard_grad = ps[k] - y[k];
            out.d_logits[r * c + k] = inv_n * (cfg.lambda * soft_grad + (1.0f - cfg.lambda) * hard_grad);
        }
    }
    out.soft_term = static_cast<float>(soft_total / static_cast<double>(n));
    out.hard_term = static_cast<float>(hard_total / static_cast<double>(n));
    // Skip a zero-weight term outright so lambda = 0 or 1 reproduces the other
    // term bit for bit.
    double loss = 0.0;
    if (cfg.lambda != 0.0f) loss += static_cast<double>(cfg.lambda) * soft_scale * out.soft_term;
    if (cfg.lambda != 1.0f) loss += (1.0 - static_cast<double>(cfg.lambda)) * out.hard_term;
    out.loss = static_cast<float>(loss);
    return out;
}

TeacherLogits::TeacherLogits(std::vector<std::string> ids, Tensor logits)
    : ids_(std::move(ids)), logits_(std::move(logits)) {
    if (logits_.rank() != 2 || logits_.dim(0) != ids_.size())
        throw FormatError("teacher logits: " + std::to_string(ids_.size()) + " ids for tensor " +
                          shape_string(logits_.shape()));
    if (logits_.dim(1) != kNumClasses)
        throw FormatError("teacher logits: vectors have length " + std::to_string(logits_.dim(1)) + ", expected 8");
    for (std::size_t i = 0; i < ids_.size(); ++i)
        if (!index_.emplace(ids_[i], i).second) throw FormatError("teacher logits: duplicate sample id '" + ids_[i] + "'");
}

std::span<const float> TeacherLogits::at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw CoverageError("teacher logits: no entry for sample id '" + id + "'");
    return logits_.data().subspan(it->second * kNumClasses, kNumClasses);
}

void TeacherLogits::require_coverage(std::span<const std::string> required) const {
    std::vector<std::string> missing;
    for (const auto& id : required)
        if (!contains(id)) missing.push_back(id);
    if (missing.empty()) return;
    std::string msg = "teacher logits missing " + std::to_string(missing.size()) + " sample id(s):";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ...";
    throw CoverageError(msg);
}

TeacherLogits load_teacher_logits(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open teacher logits " + path);
    char magic[4] = {};
    in.read(magic, 4);
    const bool binary = in.gcount() == 4 && std::memcmp(magic, "MXTN", 4) == 0;
    in.clear();
    in.seekg(0);
    return binary ? read_binary(in, path) : read_csv(in, path);
}

TeacherLogits load_teacher_logits(const std::string& path, std::span<const std::string> required_ids) {
    TeacherLogits t = load_teacher_logits(path);
    t.require_coverage(required_ids);
    return t;
}

void save_teacher_logits(const std::string& path, const TeacherLogits& logits) {
    const bool binary = path.ends_with(".mxtn") || path.ends_with(".bin");
    save_teacher_logits(path, logits, binary ? LogitFileFormat::binary : LogitFileFormat::csv);
}

void save_teacher_logits(const std::string& path, const TeacherLogits& logits, LogitFileFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    if (format == LogitFileFormat::binary) {
        write_tensor(out, logits.logits());
        out.write(kIdIndexMagic, 4);
        put_u32(out, static_cast<std::uint32_t>(logits.size()));
        for (const auto& id : logits.ids()) {
            put_u32(out, static_cast<std::uint32_t>(id.size()));
            out.write(id.data(), static_cast<std::streamsize>(id.size()));
        }
    } else {
        out << "sample_id";
        for (std::size_t c = 0; c < kNumClasses; ++c) out << ",z" << c;
        out << '\n';
        for (std::size_t r = 0; r < logits.size(); ++r) {
            out << logits.ids()[r];
            for (std::size_t c = 0; c < kNumClasses; ++c) out << ',' << format_float(logits.logits().at(r, c));
            out << '\n';
        }
    }
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace microexp
