#include <png.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "microexp/data.hpp"
#include "microexp/errors.hpp"
#include "test_util.hpp"

using namespace microexp;

namespace {

void write_lines(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    f << text;
}

// 1574 rows, CK+ class histogram, 123 subjects with uneven sample counts.
std::string write_ckplus_manifest(const testutil::TempDir& dir) {
    const std::size_t counts[8] = {135, 54, 177, 75, 207, 84, 249, 593};
    std::ofstream f(dir.file("ckplus.csv"));
    f << "id,image_path,label,subject_id\n";
    std::size_t n = 0;
    for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t i = 0; i < counts[c]; ++i, ++n)
            f << "S" << n << ",img/" << n << ".png," << c << ",subj" << (n * 7 + n / 50) % 123 << '\n';
    return dir.file("ckplus.csv");
}

double bilinear_oracle(const Tensor& img, double y, double x) {
    const double h = double(img.dim(0)), w = double(img.dim(1));
    y = std::min(std::max(y, 0.0), h - 1);
    x = std::min(std::max(x, 0.0), w - 1);
    const double y0 = std::floor(y), x0 = std::floor(x);
    const double y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    auto px = [&](double r, double c) { return double(img[std::size_t(r) * img.dim(1) + std::size_t(c)]); };
    const double dy = y - y0, dx = x - x0;
    return px(y0, x0) * (1 - dy) * (1 - dx) + px(y0, x1) * (1 - dy) * dx + px(y1, x0) * dy * (1 - dx) +
           px(y1, x1) * dy * dx;
}

void check_partition(const DatasetManifest& m, const FoldSplit& split) {
    std::vector<int> seen(m.size(), 0);
    std::size_t total = 0;
    for (std::size_t f = 0; f < split.k; ++f) {
        const auto test = split.test_indices(f), train = split.train_indices(f);
        CHECK(test.size() + train.size() == m.size());
        std::set<std::size_t> test_set(test.begin(), test.end());
        for (std::size_t i : train) REQUIRE(test_set.count(i) == 0);
        for (std::size_t i : test) ++seen[i];
        total += test.size();
    }
    CHECK(total == m.size());
    for (int s : seen) REQUIRE(s == 1);
}

}  // namespace

TEST_SUITE("data") {
    TEST_CASE("manifest loading") {
        testutil::TempDir dir("manifest");
        write_lines(dir.file("m.csv"),
                    "id,image_path,label,subject_id\na,a.pgm,0,s1\nb,b.pgm,3,s1\nc,c.pgm,7,s2\nd,d.pgm,1,s3\n");
        const DatasetManifest m = load_manifest(dir.file("m.csv"), {false});
        CHECK(m.size() == 4);
        CHECK(m.class_count() == 8);
        CHECK(m.subject_count() == 3);
        CHECK(m.samples[2].label == 7);
        CHECK(m.samples[0].image_path == (dir.path() / "a.pgm").string());

        write_lines(dir.file("dup.csv"), "id,image_path,label,subject_id\na,a.pgm,0,s1\na,b.pgm,1,s2\n");
        try {
            load_manifest(dir.file("dup.csv"), {false});
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("'a'") != std::string::npos);
        }

        // every problem is listed, not just the first
        write_lines(dir.file("bad.csv"), "id,image_path,label,subject_id\na,a.pgm,9,s1\nb,b.pgm,x,s1\nc,c.pgm,1,\n");
        try {
            load_manifest(dir.file("bad.csv"), {false});
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("'x'") != std::string::npos);
            CHECK(msg.find("label 9") != std::string::npos);
            CHECK(msg.find("subject") != std::string::npos);
        }

        write_lines(dir.file("missing.csv"), "id,image_path,label,subject_id\na,nothere.pgm,0,s1\n");
        CHECK_THROWS_WITH_AS(load_manifest(dir.file("missing.csv")), doctest::Contains("nothere.pgm"),
                             ValidationError);
        CHECK_THROWS_AS(load_manifest(dir.file("absent.csv")), IoError);

        write_lines(dir.file("classes.csv"), "# classes: cat,dog\nid,image_path,label,subject_id\na,a.pgm,1,s\n");
        const DatasetManifest two = load_manifest(dir.file("classes.csv"), {false});
        CHECK(two.class_names == std::vector<std::string>{"cat", "dog"});
        save_manifest(dir.file("again.csv"), two);
        const DatasetManifest again = load_manifest(dir.file("again.csv"), {false});
        CHECK(again.class_names == two.class_names);
        CHECK(again.samples[0].image_path == two.samples[0].image_path);
    }

    TEST_CASE("CK+-shaped manifest") {
        testutil::TempDir dir("ckplus");
        const DatasetManifest m = load_manifest(write_ckplus_manifest(dir), {false});
        CHECK(m.size() == 1574);
        CHECK(m.subject_count() == 123);
        CHECK(m.class_counts() == std::vector<std::size_t>{135, 54, 177, 75, 207, 84, 249, 593});

        for (FoldMode mode : {FoldMode::random, FoldMode::subject_independent}) {
            const FoldSplit split = make_folds(m, mode, 1);
            check_partition(m, split);
            if (mode == FoldMode::random) {
                const auto sizes = split.fold_sizes();
                const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
                CHECK(*hi - *lo <= 1);
                MESSAGE("random mode: seen-subject fraction " << seen_subject_fraction(m, split));
                CHECK(seen_subject_fraction(m, split) > 0.5);
            } else {
                CHECK(seen_subject_fraction(m, split) == 0.0);
            }
        }
    }

    TEST_CASE("fold examples and invariants") {
        DatasetManifest m;
        m.class_names = default_class_names();
        for (int i = 0; i < 20; ++i) m.samples.push_back({"id" + std::to_string(i), "", i % 8, "s" + std::to_string(i)});
        for (FoldMode mode : {FoldMode::random, FoldMode::subject_independent}) {
            const FoldSplit split = make_folds(m, mode, 3);
            CHECK(split.fold_sizes() == std::vector<std::size_t>(10, 2));
            check_partition(m, split);
        }

        // one subject with 5 samples stays together
        for (int i = 0; i < 5; ++i) m.samples[std::size_t(i)].subject_id = "big";
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const FoldSplit split = make_folds(m, FoldMode::subject_independent, seed);
            std::set<std::size_t> folds;
            for (int i = 0; i < 5; ++i) folds.insert(split.fold_of[std::size_t(i)]);
            CHECK(folds.size() == 1);
            check_partition(m, split);
        }

        CHECK(make_folds(m, FoldMode::random, 7).fold_of == make_folds(m, FoldMode::random, 7).fold_of);
        CHECK(make_folds(m, FoldMode::random, 7).fold_of != make_folds(m, FoldMode::random, 8).fold_of);

        DatasetManifest few;
        few.class_names = default_class_names();
        for (int i = 0; i < 30; ++i) few.samples.push_back({"x" + std::to_string(i), "", 0, "s" + std::to_string(i % 9)});
        CHECK_THROWS_AS(make_folds(few, FoldMode::subject_independent, 1), ValidationError);
        CHECK_NOTHROW(make_folds(few, FoldMode::random, 1));

        CHECK(parse_fold_mode("subject-independent") == FoldMode::subject_independent);
        CHECK(parse_fold_mode("subject_independent") == FoldMode::subject_independent);
        CHECK_THROWS_AS(parse_fold_mode("loso"), ValidationError);
    }

    TEST_CASE("PGM decoding") {
        testutil::TempDir dir("pgm");
        {
            std::ofstream f(dir.file("c.pgm"), std::ios::binary);
            f << "P5\n# comment\n96 96\n255\n" << std::string(96 * 96, char(128));
        }
        const Tensor img = decode_grayscale(dir.file("c.pgm"));
        CHECK(img.shape() == Shape{96, 96, 1});
        for (float v : img.data()) REQUIRE(v == doctest::Approx(128.0 / 255.0));

        write_lines(dir.file("a.pgm"), "P2\n2 2\n4\n0 1\n2 4\n");
        const Tensor ascii = decode_grayscale(dir.file("a.pgm"), 2);
        CHECK(ascii.values() == std::vector<float>{0.0f, 0.25f, 0.5f, 1.0f});

        write_lines(dir.file("junk.pgm"), "hello");
        CHECK_THROWS_AS(decode_grayscale(dir.file("junk.pgm")), IoError);
        CHECK_THROWS_AS(decode_grayscale(dir.file("none.pgm")), IoError);

        Rng rng(1);
        const Tensor t = testutil::random_tensor({16, 16, 1}, rng, 0, 1);
        write_pgm(dir.file("rt.pgm"), t);
        const Tensor back = decode_grayscale(dir.file("rt.pgm"), 16);
        for (std::size_t i = 0; i < t.size(); ++i) REQUIRE(std::abs(back[i] - t[i]) <= 0.5f / 255.0f + 1e-6f);
    }

    TEST_CASE("RGB PNG uses luma weights") {
        testutil::TempDir dir("png");
        const std::size_t w = 96, h = 96;
        std::vector<png_byte> rgb(w * h * 3);
        for (std::size_t i = 0; i < w * h; ++i) {
            rgb[3 * i] = png_byte((i * 7) % 256);
            rgb[3 * i + 1] = png_byte((i * 13) % 256);
            rgb[3 * i + 2] = png_byte((i * 29) % 256);
        }
        png_image image;
        std::memset(&image, 0, sizeof image);
        image.version = PNG_IMAGE_VERSION;
        image.width = w;
        image.height = h;
        image.format = PNG_FORMAT_RGB;
        REQUIRE(png_image_write_to_file(&image, dir.file("x.png").c_str(), 0, rgb.data(), 0, nullptr));

        const Tensor img = decode_grayscale(dir.file("x.png"));
        for (std::size_t i = 0; i < w * h; ++i) {
            const double luma = (0.299 * rgb[3 * i] + 0.587 * rgb[3 * i + 1] + 0.114 * rgb[3 * i + 2]) / 255.0;
            REQUIRE(img[i] == doctest::Approx(luma).epsilon(1e-5));
        }
    }

    TEST_CASE("bilinear resize matches oracle") {
        Rng rng(2);
        const Tensor src = testutil::random_tensor({256, 256, 1}, rng, 0, 1);
        const Tensor out = resize_bilinear(src, 96, 96);
        CHECK(out.shape() == Shape{96, 96, 1});
        const double s = 256.0 / 96.0;
        for (std::size_t y : {0, 1, 47, 94, 95})
            for (std::size_t x : {0, 1, 50, 94, 95}) {
                const double ref = bilinear_oracle(src, (y + 0.5) * s - 0.5, (x + 0.5) * s - 0.5);
                CHECK(std::abs(out[y * 96 + x] - ref) <= 1e-3);
            }
        const Tensor up = resize_bilinear(Tensor({2, 2, 1}, {0, 1, 2, 3}), 4, 4);
        CHECK(up[0] == 0.0f);
        CHECK(up[15] == 3.0f);
        CHECK(resize_bilinear(src, 256, 256) == src);
    }

    TEST_CASE("crops") {
        Tensor img({96, 96, 1});
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = float(i);
        const auto crops = eight_crops(img);
        REQUIRE(crops.size() == 8);
        for (const auto& c : crops) CHECK(c.shape() == Shape{84, 84, 1});
        CHECK(crops[0].at(0, 0, 0) == img.at(0, 0, 0));
        CHECK(crops[0].at(83, 83, 0) == img.at(83, 83, 0));
        CHECK(crops[1].at(0, 0, 0) == img.at(0, 12, 0));
        CHECK(crops[3].at(83, 83, 0) == img.at(95, 95, 0));
        CHECK(crops[4].at(0, 0, 0) == img.at(0, 6, 0));
        CHECK(crops[4].at(83, 83, 0) == img.at(83, 89, 0));
        CHECK(crops[5].at(0, 0, 0) == img.at(12, 6, 0));
        CHECK(crops[6].at(0, 0, 0) == img.at(6, 0, 0));
        CHECK(crops[7].at(0, 0, 0) == img.at(6, 12, 0));
        CHECK(center_crop(img).at(0, 0, 0) == img.at(6, 6, 0));

        const auto flat = eight_crops(Tensor({96, 96, 1}, 0.3f));
        for (const auto& c : flat) CHECK(c == flat[0]);
        CHECK_THROWS_AS(eight_crops(Tensor({80, 80, 1})), ValidationError);
    }

    TEST_CASE("synthetic dataset") {
        testutil::TempDir dir("synth");
        SyntheticOptions opt;
        opt.images = 30;
        opt.classes = 3;
        opt.subjects = 10;
        const std::string path = write_synthetic_dataset(dir.path().string(), opt);
        const DatasetManifest m = load_manifest(path);
        CHECK(m.size() == 30);
        CHECK(m.class_counts()[0] == 10);
        CHECK(m.class_counts()[2] == 10);
        CHECK(m.subject_count() == 10);
        const auto images = load_images(m);
        CHECK(images[0].shape() == Shape{96, 96, 1});
        CHECK(images[0] != images[1]);

        testutil::TempDir dir2("synth2");
        const DatasetManifest m2 = load_manifest(write_synthetic_dataset(dir2.path().string(), opt));
        CHECK(load_images(m2) == images);
    }
}
