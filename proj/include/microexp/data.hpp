#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "microexp/tensor.hpp"

namespace microexp {

struct Sample {
    std::string id;
    std::string image_path;  // resolved against the manifest's directory
    int label = 0;
    std::string subject_id;
};

struct DatasetManifest {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;

    std::size_t size() const noexcept { return samples.size(); }
    std::size_t class_count() const noexcept { return class_names.size(); }
    std::vector<std::size_t> class_counts() const;
    std::size_t subject_count() const;
    std::vector<std::string> ids() const;
    /// Throws ValidationError listing every problem (duplicate ids, labels out
    /// of range, empty subject ids).
    void validate() const;
};

/// Anger, contempt, disgust, fear, happy, sad, surprise, neutral.
std::vector<std::string> default_class_names();

struct ManifestOptions {
    bool check_files = true;
};

/// CSV with header `id,image_path,label,subject_id`. An optional leading
/// `# classes: a,b,...` line declares the class set (default: 8 classes).
DatasetManifest load_manifest(const std::string& path, const ManifestOptions& options = {});
void save_manifest(const std::string& path, const DatasetManifest& manifest);

inline constexpr std::size_t kSourceSize = 96;
inline constexpr std::size_t kCropSize = 84;

/// PGM (P2/P5) or PNG, converted to luma 0.299R + 0.587G + 0.114B, bilinearly
/// resized to target×target and scaled to [0, 1].
Tensor decode_grayscale(const std::string& path, std::size_t target = kSourceSize);
/// Bilinear resize with half-pixel centres, edges clamped. [h×w×1] in and out.
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);
void write_pgm(const std::string& path, const Tensor& image);

enum class CropPosition {
    top_left,
    top_right,
    bottom_left,
    bottom_right,
    top_center,
    bottom_center,
    left_center,
    right_center
};

struct CropOrigin {
    std::size_t row;
    std::size_t col;
};

CropOrigin crop_origin(CropPosition pos, std::size_t height, std::size_t width, std::size_t crop);
/// Copies one crop into `out` (reshaped once if needed).
void crop_into(const Tensor& image, CropOrigin origin, std::size_t crop, Tensor& out);
/// The four corners followed by the four side centres, in CropPosition order.
std::vector<Tensor> eight_crops(const Tensor& image, std::size_t crop = kCropSize);
/// Evaluation input: the central crop.
Tensor center_crop(const Tensor& image, std::size_t crop = kCropSize);

enum class FoldMode { random, subject_independent };

std::string_view to_string(FoldMode mode);
FoldMode parse_fold_mode(std::string_view text);

struct FoldSplit {
    FoldMode mode = FoldMode::random;
    std::size_t k = 10;
    std::uint64_t seed = 0;
    std::vector<std::size_t> fold_of;  // per manifest sample

    std::vector<std::size_t> test_indices(std::size_t fold) const;
    std::vector<std::size_t> train_indices(std::size_t fold) const;
    std::vector<std::size_t> fold_sizes() const;
};

/// random: shuffle samples and deal round-robin. subject_independent: shuffle
/// distinct subjects and deal them round-robin, so a subject never straddles
/// folds. Deterministic per seed.
FoldSplit make_folds(const DatasetManifest& manifest, FoldMode mode, std::uint64_t seed, std::size_t k = 10);
void save_folds(const std::string& path, const DatasetManifest& manifest, const FoldSplit& split);

/// Mean over folds of the share of test-fold subjects that also appear in
/// that fold's training set.
double seen_subject_fraction(const DatasetManifest& manifest, const FoldSplit& split);

/// Decodes every image of the manifest at the source resolution.
std::vector<Tensor> load_images(const DatasetManifest& manifest);

struct SyntheticOptions {
    std::size_t images = 200;
    std::size_t classes = 3;
    std::size_t subjects = 20;
    std::uint64_t seed = 1;
    float noise = 0.08f;
};

/// Writes a shape-recognition dataset (one glyph per class, drawn with
/// per-subject style and per-image jitter) as PGM files plus `manifest.csv`
/// under `dir`. Returns the manifest path.
std::string write_synthetic_dataset(const std::string& dir, const SyntheticOptions& options);

}  // namespace microexp
