#include "microexp/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "microexp/errors.hpp"
#include "microexp/random.hpp"

namespace microexp {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string s) {
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream s(line);
    while (std::getline(s, cell, sep)) out.push_back(trim(cell));
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

// Reads the next whitespace-separated PGM header token, skipping comments.
std::string pgm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

Tensor read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path);
    const std::string magic = pgm_token(in);
    if (magic != "P5" && magic != "P2") throw IoError(path + ": not a PGM file");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(pgm_token(in));
        h = std::stoul(pgm_token(in));
        maxval = std::stoul(pgm_token(in));
    } catch (const std::exception&) {
        throw IoError(path + ": malformed PGM header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw IoError(path + ": malformed PGM header");
    Tensor img({h, w, 1});
    const float inv = 1.0f / static_cast<float>(maxval);
    if (magic == "P5") {
        const std::size_t bytes = maxval < 256 ? 1 : 2;
        std::vector<unsigned char> raw(w * h * bytes);
        if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
            throw IoError(path + ": truncated PGM payload");
        for (std::size_t i = 0; i < w * h; ++i) {
            const unsigned v = bytes == 1 ? raw[i] : (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
            img[i] = static_cast<float>(v) * inv;
        }
    } else {
        for (std::size_t i = 0; i < w * h; ++i) {
            const std::string tok = pgm_token(in);
            if (tok.empty()) throw IoError(path + ": truncated PGM payload");
            img[i] = static_cast<float>(std::stoul(tok)) * inv;
        }
    }
    return img;
}

Tensor read_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError(path + ": cannot decode PNG (" + image.message + ")");
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw IoError(path + ": cannot decode PNG (" + msg + ")");
    }
    const std::size_t w = image.width, h = image.height;
    Tensor img({h, w, 1});
    for (std::size_t i = 0; i < w * h; ++i) {
        const float r = buffer[3 * i], g = buffer[3 * i + 1], b = buffer[3 * i + 2];
        img[i] = (0.299f * r + 0.587f * g + 0.114f * b) / 255.0f;
    }
    return img;
}

bool has_png_signature(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    unsigned char sig[8] = {};
    in.read(reinterpret_cast<char*>(sig), 8);
    return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

}  // namespace

std::vector<std::string> default_class_names() {
    return {"anger", "contempt", "disgust", "fear", "happy", "sad", "surprise", "neutral"};
}

std::vector<std::size_t> DatasetManifest::class_counts() const {
    std::vector<std::size_t> counts(class_count(), 0);
    for (const auto& s : samples)
        if (s.label >= 0 && static_cast<std::size_t>(s.label) < counts.size()) ++counts[static_cast<std::size_t>(s.label)];
    return counts;
}

std::size_t DatasetManifest::subject_count() const {
    std::set<std::string> subjects;
    for (const auto& s : samples) subjects.insert(s.subject_id);
    return subjects.size();
}

std::vector<std::string> DatasetManifest::ids() const {
    std::vector<std::string> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.id);
    return out;
}

void DatasetManifest::validate() const {
    std::vector<std::string> problems;
    if (class_names.empty() || class_names.size() > 8)
        problems.push_back("class count must be 1..8, got " + std::to_string(class_names.size()));
    std::unordered_set<std::string> seen;
    for (const auto& s : samples) {
        if (s.id.empty()) problems.push_back("empty sample id");
        if (!seen.insert(s.id).second) problems.push_back("duplicate id '" + s.id + "'");
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= class_names.size())
            problems.push_back("sample '" + s.id + "': label " + std::to_string(s.label) + " outside 0.." +
                               std::to_string(static_cast<int>(class_names.size()) - 1));
        if (s.subject_id.empty()) problems.push_back("sample '" + s.id + "': empty subject_id");
    }
    if (problems.empty()) return;
    std::string msg = "invalid manifest:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
}

DatasetManifest load_manifest(const std::string& path, const ManifestOptions& options) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path);
    const fs::path base = fs::path(path).parent_path();

    DatasetManifest m;
    m.class_names = default_class_names();
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    std::vector<std::string> problems;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        if (line[0] == '#') {
            const std::string body = trim(line.substr(1));
            if (body.rfind("classes:", 0) == 0) m.class_names = split(trim(body.substr(8)), ',');
            continue;
        }
        const auto cells = split(line, ',');
        if (!have_header) {
            if (cells != std::vector<std::string>{"id", "image_path", "label", "subject_id"})
                throw ValidationError(path + ": expected header id,image_path,label,subject_id");
            have_header = true;
            continue;
        }
        const std::string where = path + ":" + std::to_string(line_no);
        if (cells.size() != 4) {
            problems.push_back(where + ": expected 4 fields, got " + std::to_string(cells.size()));
            continue;
        }
        Sample s;
        s.id = cells[0];
        s.subject_id = cells[3];
        fs::path img(cells[1]);
        s.image_path = (img.is_absolute() ? img : base / img).lexically_normal().string();
        try {
            std::size_t used = 0;
            s.label = std::stoi(cells[2], &used);
            if (used != cells[2].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            problems.push_back(where + ": bad label '" + cells[2] + "'");
            continue;
        }
        if (options.check_files && !fs::exists(s.image_path))
            problems.push_back(where + ": missing image file " + s.image_path);
        m.samples.push_back(std::move(s));
    }
    if (!have_header) throw ValidationError(path + ": missing header");
    try {
        m.validate();
    } catch (const ValidationError& e) {
        std::string detail = e.what();
        problems.push_back(detail.substr(detail.find(':') + 1));
    }
    if (!problems.empty()) {
        std::string msg = path + ": invalid manifest:";
        for (const auto& p : problems) msg += "\n  " + trim(p);
        throw ValidationError(msg);
    }
    return m;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    if (manifest.class_names != default_class_names()) {
        out << "# classes: ";
        for (std::size_t i = 0; i < manifest.class_names.size(); ++i) out << (i ? "," : "") << manifest.class_names[i];
        out << '\n';
    }
    const fs::path base = fs::path(path).parent_path();
    out << "id,image_path,label,subject_id\n";
    for (const auto& s : manifest.samples) {
        std::string img = s.image_path;
        if (!base.empty()) img = fs::path(img).lexically_relative(base).string();
        out << s.id << ',' << img << ',' << s.label << ',' << s.subject_id << '\n';
    }
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    if (image.rank() != 3 || image.dim(2) != 1)
        throw DimensionError("resize_bilinear: expected [h x w x 1], got " + shape_string(image.shape()));
    const std::size_t in_h = image.dim(0), in_w = image.dim(1);
    if (in_h == out_h && in_w == out_w) return image;
    Tensor out({out_h, out_w, 1});
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, in_h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx =
                std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, in_w - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = image[y0 * in_w + x0] * (1 - wx) + image[y0 * in_w + x1] * wx;
            const double bottom = image[y1 * in_w + x0] * (1 - wx) + image[y1 * in_w + x1] * wx;
            out[y * out_w + x] = static_cast<float>(top * (1 - wy) + bottom * wy);
        }
    }
    return out;
}

Tensor decode_grayscale(const std::string& path, std::size_t target) {
    if (!fs::exists(path)) throw IoError("image not found: " + path);
    Tensor img = has_png_signature(path) ? read_png(path) : read_pgm(path);
    return resize_bilinear(img, target, target);
}

void write_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 1)
        throw DimensionError("write_pgm: expected [h x w x 1], got " + shape_string(image.shape()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "P5\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
    for (float v : image.data()) {
        const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        out.put(static_cast<char>(b));
    }
    if (!out) throw IoError("write failed: " + path);
}

CropOrigin crop_origin(CropPosition pos, std::size_t height, std::size_t width, std::size_t crop) {
    if (crop > height || crop > width)
        throw ValidationError("crop " + std::to_string(crop) + " larger than image " + std::to_string(height) + "x" +
                              std::to_string(width));
    const std::size_t bottom = height - crop, right = width - crop;
    const std::size_t mid_row = bottom / 2, mid_col = right / 2;
    switch (pos) {
        case CropPosition::top_left: return {0, 0};
        case CropPosition::top_right: return {0, right};
        case CropPosition::bottom_left: return {bottom, 0};
        case CropPosition::bottom_right: return {bottom, right};
        case CropPosition::top_center: return {0, mid_col};
        case CropPosition::bottom_center: return {bottom, mid_col};
        case CropPosition::left_center: return {mid_row, 0};
        case CropPosition::right_center: return {mid_row, right};
    }
    return {0, 0};
}

void crop_into(const Tensor& image, CropOrigin origin, std::size_t crop, Tensor& out) {
    if (image.rank() != 3) throw DimensionError("crop: expected [h x w x c], got " + shape_string(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (origin.row + crop > h || origin.col + crop > w)
        throw ValidationError("crop " + std::to_string(crop) + " at (" + std::to_string(origin.row) + "," +
                              std::to_string(origin.col) + ") exceeds image " + shape_string(image.shape()));
    const Shape shape{crop, crop, c};
    if (out.shape() != shape) out = Tensor(shape);
    const float* src = image.data().data();
    float* dst = out.data().data();
    for (std::size_t r = 0; r < crop; ++r) {
        const float* row = src + ((origin.row + r) * w + origin.col) * c;
        std::copy(row, row + crop * c, dst + r * crop * c);
    }
}

std::vector<Tensor> eight_crops(const Tensor& image, std::size_t crop) {
    if (image.rank() != 3) throw DimensionError("eight_crops: expected [h x w x c], got " + shape_string(image.shape()));
    std::vector<Tensor> crops(8);
    for (std::size_t i = 0; i < 8; ++i)
        crop_into(image, crop_origin(static_cast<CropPosition>(i), image.dim(0), image.dim(1), crop), crop, crops[i]);
    return crops;
}

Tensor center_crop(const Tensor& image, std::size_t crop) {
    if (image.rank() != 3) throw DimensionError("center_crop: expected [h x w x c], got " + shape_string(image.shape()));
    if (crop > image.dim(0) || crop > image.dim(1))
        throw ValidationError("crop " + std::to_string(crop) + " larger than image " + shape_string(image.shape()));
    Tensor out;
    crop_into(image, {(image.dim(0) - crop) / 2, (image.dim(1) - crop) / 2}, crop, out);
    return out;
}

std::string_view to_string(FoldMode mode) {
    return mode == FoldMode::random ? "random" : "subject-independent";
}

FoldMode parse_fold_mode(std::string_view text) {
    if (text == "random") return FoldMode::random;
    if (text == "subject-independent" || text == "subject_independent") return FoldMode::subject_independent;
    throw ValidationError("unknown fold mode '" + std::string(text) + "' (expected random, subject-independent)");
}

std::vector<std::size_t> FoldSplit::test_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
        if (fold_of[i] == fold) out.push_back(i);
    return out;
}

std::vector<std::size_t> FoldSplit::train_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
        if (fold_of[i] != fold) out.push_back(i);
    return out;
}

std::vector<std::size_t> FoldSplit::fold_sizes() const {
    std::vector<std::size_t> sizes(k, 0);
    for (auto f : fold_of) ++sizes[f];
    return sizes;
}

FoldSplit make_folds(const DatasetManifest& manifest, FoldMode mode, std::uint64_t seed, std::size_t k) {
    if (k < 2) throw ValidationError("need at least 2 folds");
    FoldSplit split{mode, k, seed, std::vector<std::size_t>(manifest.size(), 0)};
    Rng rng(seed);
    if (mode == FoldMode::random) {
        if (manifest.size() < k)
            throw ValidationError("random folds need at least " + std::to_string(k) + " samples, manifest has " +
                                  std::to_string(manifest.size()));
        std::vector<std::size_t> order(manifest.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t i = 0; i < order.size(); ++i) split.fold_of[order[i]] = i % k;
        return split;
    }
    // Subjects in first-appearance order so the shuffle input is stable.
    std::vector<std::string> subjects;
    std::map<std::string, std::size_t> subject_index;
    for (const auto& s : manifest.samples)
        if (subject_index.emplace(s.subject_id, subjects.size()).second) subjects.push_back(s.subject_id);
    if (subjects.size() < k)
        throw ValidationError("subject-independent folds need at least " + std::to_string(k) + " subjects, manifest has " +
                              std::to_string(subjects.size()));
    std::vector<std::size_t> order(subjects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::size_t> fold_of_subject(subjects.size());
    for (std::size_t i = 0; i < order.size(); ++i) fold_of_subject[order[i]] = i % k;
    for (std::size_t i = 0; i < manifest.size(); ++i)
        split.fold_of[i] = fold_of_subject[subject_index.at(manifest.samples[i].subject_id)];
    return split;
}

void save_folds(const std::string& path, const DatasetManifest& manifest, const FoldSplit& split) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "id,fold\n";
    for (std::size_t i = 0; i < manifest.size(); ++i) out << manifest.samples[i].id << ',' << split.fold_of[i] << '\n';
}

double seen_subject_fraction(const DatasetManifest& manifest, const FoldSplit& split) {
    double total = 0.0;
    std::size_t folds = 0;
    for (std::size_t f = 0; f < split.k; ++f) {
        std::set<std::string> train, test;
        for (std::size_t i = 0; i < manifest.size(); ++i)
            (split.fold_of[i] == f ? test : train).insert(manifest.samples[i].subject_id);
        if (test.empty()) continue;
        std::size_t seen = 0;
        for (const auto& s : test) seen += train.count(s);
        total += static_cast<double>(seen) / static_cast<double>(test.size());
        ++folds;
    }
    return folds ? total / static_cast<double>(folds) : 0.0;
}

std::vector<Tensor> load_images(const DatasetManifest& manifest) {
    std::vector<Tensor> images;
    images.reserve(manifest.size());
    for (const auto& s : manifest.samples) images.push_back(decode_grayscale(s.image_path));
    return images;
}

std::string write_synthetic_dataset(const std::string& dir, const SyntheticOptions& options) {
    if (options.classes == 0 || options.classes > 8) throw ValidationError("synthetic dataset: classes must be 1..8");
    if (options.subjects == 0) throw ValidationError("synthetic dataset: need at least one subject");
    fs::create_directories(fs::path(dir) / "images");
    Rng rng(options.seed);

    struct Style {
        float background, foreground, scale;
    };
    std::vector<Style> styles(options.subjects);
    for (auto& s : styles) s = {rng.uniform(0.05f, 0.35f), rng.uniform(0.65f, 0.95f), rng.uniform(0.85f, 1.15f)};

    DatasetManifest m;
    m.class_names = default_class_names();
    m.class_names.resize(options.classes);
    const float n = static_cast<float>(kSourceSize);
    for (std::size_t i = 0; i < options.images; ++i) {
        const int label = static_cast<int>(i % options.classes);
        const std::size_t subject = (i / options.classes) % options.subjects;
        const Style& st = styles[subject];
        const float cy = n / 2 + rng.uniform(-6.0f, 6.0f), cx = n / 2 + rng.uniform(-6.0f, 6.0f);
        const float r = 20.0f * st.scale * rng.uniform(0.9f, 1.1f);
        Tensor img({kSourceSize, kSourceSize, 1});
        for (std::size_t y = 0; y < kSourceSize; ++y)
            for (std::size_t x = 0; x < kSourceSize; ++x) {
                const float dy = static_cast<float>(y) - cy, dx = static_cast<float>(x) - cx;
                const float ay = std::abs(dy), ax = std::abs(dx), dist = std::sqrt(dx * dx + dy * dy);
                bool on = false;
                switch (label) {
                    case 0: on = dist <= r; break;                                                 // disk
                    case 1: on = std::max(ax, ay) <= r && std::max(ax, ay) >= r - 5; break;        // square outline
                    case 2: on = ax <= r && (std::abs(dy - r / 2) <= 3 || std::abs(dy + r / 2) <= 3); break;
                    case 3: on = ay <= r && (std::abs(dx - r / 2) <= 3 || std::abs(dx + r / 2) <= 3); break;
                    case 4: on = ax <= r && std::abs(ax - ay) <= 3; break;                         // X
                    case 5: on = ay <= r && ax <= (dy + r) / 2; break;                             // triangle
                    case 6: on = std::abs(dist - r) <= 3; break;                                   // ring
                    default: on = std::max(ax, ay) <= r && std::min(ax, ay) <= 3; break;           // plus
                }
                const float v = (on ? st.foreground : st.background) + rng.uniform(-options.noise, options.noise);
                img[y * kSourceSize + x] = std::clamp(v, 0.0f, 1.0f);
            }
        char name[32];
        std::snprintf(name, sizeof name, "img%05zu", i);
        const fs::path rel = fs::path("images") / (std::string(name) + ".pgm");
        write_pgm((fs::path(dir) / rel).string(), img);
        m.samples.push_back({name, (fs::path(dir) / rel).string(), label, "s" + std::to_string(subject)});
    }
    const std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
    save_manifest(manifest_path, m);
    return manifest_path;
}

}  // namespace microexp
