#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "microexp/tensor.hpp"

namespace microexp {

/// none: the blended objective exactly as written, so the soft-term gradient
/// carries its natural 1/T. t_squared: soft term (loss and gradient) scaled by
/// T^2, the Hinton-style magnitude correction.
enum class GradScaleMode { none, t_squared };

struct DistillationConfig {
    float temperature = 1.0f;
    float lambda = 0.5f;
    GradScaleMode grad_scale_mode = GradScaleMode::none;

    void validate() const;
};

std::string_view to_string(GradScaleMode mode);
GradScaleMode parse_grad_scale_mode(std::string_view text);

/// softmax(logits / T), row-wise for rank-2 input.
Tensor softened_softmax(const Tensor& logits, float temperature);

/// Shannon entropy (nats) of a probability vector.
double entropy(std::span<const float> p);

struct KdLoss {
    float loss = 0.0f;
    float soft_term = 0.0f;  // mean H(p_t, p'_s), before lambda
    float hard_term = 0.0f;  // mean H(y, p_s), before (1 - lambda)
    Tensor d_logits;         // dL/d(student logits), [N×C]
};

/// L = lambda * mean_n H(p_t, p'_s) + (1 - lambda) * mean_n H(y, p_s), where
/// p_t and p'_s are the teacher and student distributions softened at T and
/// p_s is the student's plain softmax.
KdLoss kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, const Tensor& labels,
               const DistillationConfig& cfg);

/// Teacher logit vectors keyed by sample id.
class TeacherLogits {
public:
    TeacherLogits() = default;
    TeacherLogits(std::vector<std::string> ids, Tensor logits);

    std::size_t size() const noexcept { return ids_.size(); }
    std::size_t width() const { return logits_.empty() ? 0 : logits_.dim(1); }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    const Tensor& logits() const noexcept { return logits_; }
    bool contains(const std::string& id) const { return index_.count(id) != 0; }
    /// Throws CoverageError for an unknown id.
    std::span<const float> at(const std::string& id) const;

    /// Throws CoverageError listing every id in `required` that has no row.
    void require_coverage(std::span<const std::string> required) const;

    friend bool operator==(const TeacherLogits& a, const TeacherLogits& b) {
        return a.ids_ == b.ids_ && a.logits_ == b.logits_;
    }

private:
    std::vector<std::string> ids_;
    Tensor logits_;  // [N×8]
    std::unordered_map<std::string, std::size_t> index_;
};

enum class LogitFileFormat { csv, binary };

/// CSV (`sample_id,z0,...,z7`) or MXTN binary followed by an id index; the
/// format is detected from the file's leading bytes.
TeacherLogits load_teacher_logits(const std::string& path);
TeacherLogits load_teacher_logits(const std::string& path, std::span<const std::string> required_ids);
/// Format chosen by extension: `.mxtn`/`.bin` binary, anything else CSV.
void save_teacher_logits(const std::string& path, const TeacherLogits& logits);
void save_teacher_logits(const std::string& path, const TeacherLogits& logits, LogitFileFormat format);

}  // namespace microexp
