#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dgseg/data.hpp"
#include "helpers.hpp"

using dgseg::LabelMap;
using dgseg::LabelMapping;
using dgseg::SegSample;
using dgseg::Shape;
using dgseg::Tensor;
using testutil::max_abs_diff;
using testutil::random_tensor;
namespace fs = std::filesystem;

#ifndef DGSEG_DATA_DIR
#define DGSEG_DATA_DIR "data"
#endif

namespace {

SegSample<float> make_sample(int h, int w, dgseg::Rng& rng, int k = 4) {
    SegSample<float> s;
    s.image = random_tensor<float>({3, h, w}, rng, 0.0, 1.0);
    s.label.resize(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) s.label(y, x) = static_cast<int>(rng.index(k));
    s.domain = "test";
    s.source_path = "mem";
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// tiling
// ---------------------------------------------------------------------------

TEST_CASE("tile counts follow the sliding formula") {
    dgseg::Rng rng(1);
    auto big = make_sample(1024, 1024, rng);
    CHECK(dgseg::tile(big, 512, 512).size() == 4);

    auto exact = make_sample(64, 64, rng);
    auto one = dgseg::tile(exact, 64, 64);
    REQUIRE(one.size() == 1);
    CHECK(max_abs_diff(one[0].image, exact.image) == 0.0);
    CHECK(one[0].label == exact.label);

    auto overlap = dgseg::tile(exact, 32, 16);  // ceil(64/16)^2
    CHECK(overlap.size() == 16);

    CHECK_THROWS_AS(dgseg::tile(exact, 0, 16), dgseg::ConfigError);
}

TEST_CASE("remainder tiles are reflect-padded, verified against a pad oracle") {
    dgseg::Rng rng(2);
    const int h = 25, w = 25, tile_size = 16, stride = 16;
    auto src = make_sample(h, w, rng);
    auto tiles = dgseg::tile(src, tile_size, stride);
    REQUIRE(tiles.size() == 4);

    // Oracle: build the padded image explicitly with the mirror rule
    // pad[i] = src[2(n-1) - i] for i >= n, then slice.
    const int hp = stride + tile_size;  // covers (count-1)*stride + tile
    auto mirror = [](int i, int n) { return i < n ? i : 2 * (n - 1) - i; };
    for (int ty = 0; ty < 2; ++ty)
        for (int tx = 0; tx < 2; ++tx) {
            const auto& t = tiles[static_cast<std::size_t>(ty * 2 + tx)];
            for (int y = 0; y < tile_size; ++y)
                for (int x = 0; x < tile_size; ++x) {
                    const int sy = mirror(ty * stride + y, h);
                    const int sx = mirror(tx * stride + x, w);
                    REQUIRE(sy >= 0);
                    REQUIRE(sx >= 0);
                    for (int c = 0; c < 3; ++c)
                        CHECK(t.image.data()[(static_cast<std::size_t>(c) * tile_size + y) * tile_size + x] ==
                              src.image.data()[(static_cast<std::size_t>(c) * h + sy) * w + sx]);
                    CHECK(t.label(y, x) == src.label(sy, sx));
                }
        }
    (void)hp;
}

TEST_CASE("1000x1000 tiling pads the remainder by reflection") {
    dgseg::Rng rng(21);
    auto src = make_sample(1000, 1000, rng);
    auto tiles = dgseg::tile(src, 512, 512);
    REQUIRE(tiles.size() == 4);  // ceil(1000/512)^2
    // Spot-check padded pixels of the bottom-right tile against the mirror rule.
    const auto& t = tiles[3];
    auto mirror = [](int i, int n) { return i < n ? i : 2 * (n - 1) - i; };
    dgseg::Rng pick(22);
    for (int probe = 0; probe < 200; ++probe) {
        const int y = static_cast<int>(pick.index(512)), x = static_cast<int>(pick.index(512));
        const int sy = mirror(512 + y, 1000), sx = mirror(512 + x, 1000);
        CHECK(t.label(y, x) == src.label(sy, sx));
        CHECK(t.image.data()[(0 * 512 + static_cast<std::size_t>(y)) * 512 + x] ==
              src.image.data()[(0 * 1000 + static_cast<std::size_t>(sy)) * 1000 + sx]);
    }
}

TEST_CASE("tile then stitch reproduces the original exactly") {
    dgseg::Rng rng(3);
    auto src = make_sample(50, 37, rng);
    auto tiles = dgseg::tile(src, 16, 16);
    auto back = dgseg::stitch_tiles(tiles, 50, 37, 16, 16);
    CHECK(max_abs_diff(back, src.image) == 0.0);
}

// ---------------------------------------------------------------------------
// label remapping
// ---------------------------------------------------------------------------

TEST_CASE("identity mapping leaves labels unchanged and is idempotent") {
    dgseg::Rng rng(4);
    auto s = make_sample(8, 8, rng, 4);
    auto ident = LabelMapping::identity(4);
    auto once = dgseg::remap_labels(s.label, ident);
    CHECK(once == s.label);
    CHECK(dgseg::remap_labels(once, ident) == once);
}

TEST_CASE("rescuenet building-damage classes collapse to Building") {
    auto mapping = LabelMapping::load(std::string(DGSEG_DATA_DIR) + "/mappings/rescuenet_to_potsdam.json");
    LabelMap m(2, 2);
    m << 2, 3, 4, 5;  // the four building-damage classes
    auto out = dgseg::remap_labels(m, mapping);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) CHECK(out(y, x) == 1);  // Building
}

TEST_CASE("rescuenet mapping reproduces the rule table exhaustively") {
    auto mapping = LabelMapping::load(std::string(DGSEG_DATA_DIR) + "/mappings/rescuenet_to_potsdam.json");
    // source id -> expected target id over {Surface,Building,Tree,Car,Clutter}
    const std::vector<int> expect{4, 4, 1, 1, 1, 1, 3, 0, 0, 2, 4};
    for (int src = 0; src < 11; ++src) {
        LabelMap m = LabelMap::Constant(3, 3, src);
        auto out = dgseg::remap_labels(m, mapping);
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 3; ++x) CHECK(out(y, x) == expect[static_cast<std::size_t>(src)]);
    }
}

TEST_CASE("potsdam mapping drops vegetation to the ignore index") {
    auto mapping = LabelMapping::load(std::string(DGSEG_DATA_DIR) + "/mappings/potsdam_to_common5.json");
    const std::vector<int> expect{0, 1, 255, 2, 3, 4};
    for (int src = 0; src < 6; ++src) {
        LabelMap m = LabelMap::Constant(2, 2, src);
        auto out = dgseg::remap_labels(m, mapping);
        CHECK(out(0, 0) == expect[static_cast<std::size_t>(src)]);
    }
}

TEST_CASE("oem mapping matches a hand-written lookup oracle on random maps") {
    auto mapping = LabelMapping::load(std::string(DGSEG_DATA_DIR) + "/mappings/oem_to_loveda.json");
    // Independent lookup straight from the supplementary table:
    // bareland->Barren, rangeland/developed->Background, road->Road,
    // tree->Forest, water->Water, agriculture->Agriculture, building->Building.
    auto oracle = [](int v) {
        switch (v) {
            case 0: return 255;
            case 1: return 4;
            case 2: return 0;
            case 3: return 0;
            case 4: return 2;
            case 5: return 5;
            case 6: return 3;
            case 7: return 6;
            case 8: return 1;
            default: return -2;
        }
    };
    dgseg::Rng rng(5);
    LabelMap m(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) m(y, x) = static_cast<int>(rng.index(9));
    auto out = dgseg::remap_labels(m, mapping);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) CHECK(out(y, x) == oracle(m(y, x)));
}

TEST_CASE("unmapped label values raise a data error naming value and count") {
    auto mapping = LabelMapping::identity(3);
    LabelMap m(2, 2);
    m << 0, 7, 7, 1;
    CHECK_THROWS_WITH_AS(static_cast<void>(dgseg::remap_labels(m, mapping)),
                         doctest::Contains("7 (2 px)"), dgseg::DataError);
}

TEST_CASE("ignore index passes through untouched") {
    auto mapping = LabelMapping::identity(3);
    LabelMap m(1, 2);
    m << 255, 1;
    auto out = dgseg::remap_labels(m, mapping);
    CHECK(out(0, 0) == 255);
    CHECK(out(0, 1) == 1);
}

// ---------------------------------------------------------------------------
// split construction
// ---------------------------------------------------------------------------

namespace {

void touch(const fs::path& p) {
    fs::create_directories(p.parent_path());
    std::ofstream f(p);
    f << "x";
}

}  // namespace

TEST_CASE("build_split resolves benchmark ids and orders entries") {
    const fs::path root = "tmp_split_fixture";
    fs::remove_all(root);
    const fs::path bench = root / "P(i)2V";
    for (const char* stem : {"c", "a", "b", "f", "e", "d"}) {
        touch(bench / "P(i)" / "images" / (std::string(stem) + ".ppm"));
        touch(bench / "P(i)" / "labels" / (std::string(stem) + ".pgm"));
    }
    for (const char* stem : {"t1", "t0"}) {
        touch(bench / "V" / "images" / (std::string(stem) + ".ppm"));
        touch(bench / "V" / "labels" / (std::string(stem) + ".pgm"));
    }

    auto split = dgseg::build_split(root.string(), "P(i)2V");
    REQUIRE(split.train.size() == 6);
    REQUIRE(split.test.size() == 2);
    for (std::size_t i = 1; i < split.train.size(); ++i)
        CHECK(split.train[i - 1].image_path < split.train[i].image_path);
    CHECK(split.test[0].image_path < split.test[1].image_path);
    CHECK(split.warnings.empty());

    // Pure function of directory contents: two scans agree.
    auto split2 = dgseg::build_split(root.string(), "P(i)2V");
    CHECK(split2.train.size() == split.train.size());
    for (std::size_t i = 0; i < split.train.size(); ++i)
        CHECK(split2.train[i].image_path == split.train[i].image_path);

    fs::remove_all(root);
}

TEST_CASE("build_split reports empty domains and orphaned images") {
    const fs::path root = "tmp_split_fixture2";
    fs::remove_all(root);
    fs::create_directories(root / "A2B" / "A" / "images");
    fs::create_directories(root / "A2B" / "B" / "images");
    auto split = dgseg::build_split(root.string(), "A2B");
    CHECK(split.train.empty());
    CHECK(split.test.empty());
    CHECK(split.warnings.size() == 2);

    touch(root / "A2B" / "A" / "images" / "x.ppm");  // no matching label
    CHECK_THROWS_AS(dgseg::build_split(root.string(), "A2B"), dgseg::DataError);

    CHECK_THROWS_AS(dgseg::build_split(root.string(), "no2such"), dgseg::DataError);
    fs::remove_all(root);
}

// ---------------------------------------------------------------------------
// synthetic two-domain data
// ---------------------------------------------------------------------------

TEST_CASE("synthetic dataset is seed-deterministic") {
    auto d1 = dgseg::synth_two_domain<float>(7, 4, 32, 3);
    auto d2 = dgseg::synth_two_domain<float>(7, 4, 32, 3);
    auto d3 = dgseg::synth_two_domain<float>(8, 4, 32, 3);
    for (int i = 0; i < 4; ++i) {
        CHECK(d1.domain_a[static_cast<std::size_t>(i)].image.data() ==
              d2.domain_a[static_cast<std::size_t>(i)].image.data());
        CHECK(d1.domain_b[static_cast<std::size_t>(i)].label == d2.domain_b[static_cast<std::size_t>(i)].label);
    }
    CHECK(d1.domain_a[0].image.data() != d3.domain_a[0].image.data());
}

TEST_CASE("domains share label histograms but differ in channel statistics") {
    auto ds = dgseg::synth_two_domain<float>(11, 16, 32, 3);
    std::vector<std::int64_t> hist_a(3, 0), hist_b(3, 0);
    double mean_a[3] = {0, 0, 0}, mean_b[3] = {0, 0, 0};
    for (int i = 0; i < 16; ++i) {
        const auto& a = ds.domain_a[static_cast<std::size_t>(i)];
        const auto& b = ds.domain_b[static_cast<std::size_t>(i)];
        CHECK(a.label == b.label);  // geometry shared per index
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                ++hist_a[static_cast<std::size_t>(a.label(y, x))];
                ++hist_b[static_cast<std::size_t>(b.label(y, x))];
            }
        for (int c = 0; c < 3; ++c)
            for (int p = 0; p < 32 * 32; ++p) {
                mean_a[c] += a.image.data()[static_cast<std::size_t>(c) * 1024 + p];
                mean_b[c] += b.image.data()[static_cast<std::size_t>(c) * 1024 + p];
            }
    }
    CHECK(hist_a == hist_b);
    for (int c = 0; c < 3; ++c) {
        mean_a[c] /= 16.0 * 1024;
        mean_b[c] /= 16.0 * 1024;
        CHECK(std::abs(mean_a[c] - mean_b[c]) > 0.2);  // style-type domain gap
    }
    for (const auto& s : ds.domain_a)
        for (float v : s.image.data()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }

    CHECK_THROWS_AS(dgseg::synth_two_domain<float>(1, 1, 16, 1), dgseg::ConfigError);
}

TEST_CASE("style corpus spans a broad range of channel statistics") {
    auto corpus = dgseg::synth_style_corpus<float>(13, 32, 32, 3);
    REQUIRE(corpus.size() == 32);
    double lo = 1e9, hi = -1e9;
    for (const auto& img : corpus) {
        double m = 0;
        for (float v : img.data()) m += v;
        m /= static_cast<double>(img.numel());
        lo = std::min(lo, m);
        hi = std::max(hi, m);
    }
    CHECK(hi - lo > 0.3);  // corpora cover diverse global styles
}

// ---------------------------------------------------------------------------
// image/dataset round trips
// ---------------------------------------------------------------------------

TEST_CASE("pnm image and label round-trip") {
    const fs::path dir = "tmp_pnm";
    fs::remove_all(dir);
    fs::create_directories(dir);

    // Values on the 8-bit grid survive exactly.
    Tensor<float> img(Shape{3, 4, 5});
    dgseg::Rng rng(17);
    for (auto& v : img.data()) v = static_cast<float>(rng.index(256)) / 255.0f;
    dgseg::save_image(img, (dir / "x.ppm").string());
    auto back = dgseg::load_image<float>((dir / "x.ppm").string());
    CHECK(max_abs_diff(back, img) < 1e-6);

    LabelMap lbl(4, 5);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) lbl(y, x) = static_cast<int>(rng.index(5));
    lbl(0, 0) = 255;
    dgseg::save_label(lbl, (dir / "y.pgm").string());
    CHECK(dgseg::load_label((dir / "y.pgm").string()) == lbl);

    CHECK_THROWS_AS(dgseg::load_image<float>((dir / "missing.ppm").string()), dgseg::IoError);
    fs::remove_all(dir);
}

TEST_CASE("dataset directory round-trip with metadata") {
    const fs::path dir = "tmp_ds";
    fs::remove_all(dir);
    auto ds = dgseg::synth_two_domain<float>(19, 3, 16, 3);
    dgseg::save_dataset_dir(ds.domain_a, 3, dir.string());
    auto loaded = dgseg::load_dataset_dir<float>(dir.string());
    REQUIRE(loaded.size() == 3);
    CHECK(loaded[0].label == ds.domain_a[0].label);
    CHECK(max_abs_diff(loaded[1].image, ds.domain_a[1].image) < 2.0 / 255.0);
    auto k = dgseg::dataset_num_classes(dir.string());
    REQUIRE(k.has_value());
    CHECK(*k == 3);
    fs::remove_all(dir);
}

TEST_CASE("fnv checksum is stable and content-sensitive") {
    const fs::path dir = "tmp_fnv";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream f(dir / "a.bin", std::ios::binary);
        f << "hello";
    }
    const auto h1 = dgseg::fnv1a64_file((dir / "a.bin").string());
    const auto h2 = dgseg::fnv1a64_file((dir / "a.bin").string());
    CHECK(h1 == h2);
    {
        std::ofstream f(dir / "b.bin", std::ios::binary);
        f << "hellp";
    }
    CHECK(dgseg::fnv1a64_file((dir / "b.bin").string()) != h1);
    fs::remove_all(dir);
}
