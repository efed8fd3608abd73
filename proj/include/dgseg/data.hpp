#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dgseg/labels.hpp"
#include "dgseg/rng.hpp"
#include "dgseg/tensor.hpp"

namespace dgseg {

namespace fs = std::filesystem;

// One training/eval unit: image scaled to [0,1] plus its integer label map.
template <typename Scalar>
struct SegSample {
    Tensor<Scalar> image;  // (C, H, W)
    LabelMap label;        // H x W
    std::string domain;
    std::string source_path;
};

// ---------------------------------------------------------------------------
// PNM image IO (P6 for rgb images, P5 for 8-bit label maps)
// ---------------------------------------------------------------------------

namespace pnm {

inline void skip_ws_and_comments(std::istream& in) {
    while (true) {
        const int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

inline void read_header(std::istream& in, const std::string& magic, const std::string& path, int& w,
                        int& h) {
    std::string tag;
    in >> tag;
    if (tag != magic) throw IoError(path + ": expected " + magic + " header, got '" + tag + "'");
    skip_ws_and_comments(in);
    int maxval = 0;
    in >> w;
    skip_ws_and_comments(in);
    in >> h;
    skip_ws_and_comments(in);
    in >> maxval;
    if (!in || w < 1 || h < 1 || maxval != 255) throw IoError(path + ": bad pnm header");
    in.get();  // single whitespace before raster
}

}  // namespace pnm

template <typename Scalar>
Tensor<Scalar> load_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image " + path);
    int w = 0, h = 0;
    pnm::read_header(f, "P6", path, w, h);
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError(path + ": truncated raster");
    Tensor<Scalar> t(Shape{3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                t.data()[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    static_cast<Scalar>(raw[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / Scalar(255);
    return t;
}

template <typename Scalar>
void save_image(const Tensor<Scalar>& t, const std::string& path) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw DimensionError("save_image: want (3,H,W), got " + shape_str(t.shape()));
    const int h = t.dim(1), w = t.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write image " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = static_cast<double>(t.data()[(static_cast<std::size_t>(c) * h + y) * w + x]);
                v = std::clamp(v, 0.0, 1.0);
                raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline LabelMap load_label(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open label map " + path);
    int w = 0, h = 0;
    pnm::read_header(f, "P5", path, w, h);
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError(path + ": truncated raster");
    LabelMap m(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m(y, x) = raw[static_cast<std::size_t>(y) * w + x];
    return m;
}

inline void save_label(const LabelMap& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write label map " + path);
    const int h = static_cast<int>(m.rows()), w = static_cast<int>(m.cols());
    f << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int v = m(y, x);
            if (v < 0 || v > 255) throw DataError("label value " + std::to_string(v) + " not storable as 8-bit");
            raw[static_cast<std::size_t>(y) * w + x] = static_cast<unsigned char>(v);
        }
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// ---------------------------------------------------------------------------
// tiling
// ---------------------------------------------------------------------------

// Mirror-bounce index for reflect padding, period 2(n-1).
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

// Raster-order tiles; the right/bottom remainder is covered by reflect-padding
// the source to (count-1)*stride + tile. Count per side = ceil(side/stride).
template <typename Scalar>
std::vector<SegSample<Scalar>> tile(const SegSample<Scalar>& src, int tile_size, int stride) {
    if (tile_size <= 0 || stride <= 0) throw ConfigError("tile: tile_size and stride must be positive");
    const int c = src.image.dim(0), h = src.image.dim(1), w = src.image.dim(2);
    if (src.label.rows() != h || src.label.cols() != w)
        throw DimensionError("tile: image/label spatial mismatch");
    const int ny = (h + stride - 1) / stride;
    const int nx = (w + stride - 1) / stride;

    std::vector<SegSample<Scalar>> out;
    out.reserve(static_cast<std::size_t>(ny) * nx);
    for (int ty = 0; ty < ny; ++ty)
        for (int tx = 0; tx < nx; ++tx) {
            SegSample<Scalar> s;
            s.domain = src.domain;
            s.source_path = src.source_path + "#" + std::to_string(ty) + "_" + std::to_string(tx);
            s.image = Tensor<Scalar>(Shape{c, tile_size, tile_size});
            s.label.resize(tile_size, tile_size);
            for (int y = 0; y < tile_size; ++y) {
                const int sy = reflect_index(ty * stride + y, h);
                for (int x = 0; x < tile_size; ++x) {
                    const int sx = reflect_index(tx * stride + x, w);
                    for (int ch = 0; ch < c; ++ch)
                        s.image.data()[(static_cast<std::size_t>(ch) * tile_size + y) * tile_size + x] =
                            src.image.data()[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
                    s.label(y, x) = src.label(sy, sx);
                }
            }
            out.push_back(std::move(s));
        }
    return out;
}

// Inverse of tile for the unpadded region.
template <typename Scalar>
Tensor<Scalar> stitch_tiles(const std::vector<SegSample<Scalar>>& tiles, int h, int w, int tile_size,
                            int stride) {
    if (tiles.empty()) throw DataError("stitch_tiles: nothing to stitch");
    const int c = tiles[0].image.dim(0);
    const int nx = (w + stride - 1) / stride;
    Tensor<Scalar> out(Shape{c, h, w});
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const int ty = static_cast<int>(i) / nx, tx = static_cast<int>(i) % nx;
        for (int y = 0; y < tile_size; ++y) {
            const int oy = ty * stride + y;
            if (oy >= h) break;
            for (int x = 0; x < tile_size; ++x) {
                const int ox = tx * stride + x;
                if (ox >= w) break;
                for (int ch = 0; ch < c; ++ch)
                    out.data()[(static_cast<std::size_t>(ch) * h + oy) * w + ox] =
                        tiles[i].image.data()[(static_cast<std::size_t>(ch) * tile_size + y) * tile_size + x];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// label remapping
// ---------------------------------------------------------------------------

inline constexpr int kDropClass = -1;

// Ordered source-class -> target-class rules for one labeling scheme.
// DROP sends a class to the ignore index.
struct LabelMapping {
    std::string name;
    std::vector<std::string> source_classes;  // by source id
    std::vector<std::string> target_classes;  // by target id
    std::map<int, int> rules;                 // source id -> target id or kDropClass
    int ignore_index = kIgnoreIndex;

    static LabelMapping identity(int k) {
        LabelMapping m;
        m.name = "identity";
        for (int i = 0; i < k; ++i) {
            m.source_classes.push_back("class" + std::to_string(i));
            m.target_classes.push_back("class" + std::to_string(i));
            m.rules[i] = i;
        }
        return m;
    }

    static LabelMapping load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open label mapping " + path);
        nlohmann::json j;
        f >> j;
        if (j.value("format", "") != "dgseg-label-mapping" || j.value("version", -1) != 1)
            throw IoError("unrecognized label mapping file " + path);
        LabelMapping m;
        m.name = j.at("name").get<std::string>();
        m.ignore_index = j.value("ignore_index", kIgnoreIndex);

        std::unordered_map<std::string, int> src_ids, tgt_ids;
        for (const auto& e : j.at("source_classes")) {
            const int id = e.at("id").get<int>();
            const std::string nm = e.at("name").get<std::string>();
            if (static_cast<int>(m.source_classes.size()) <= id) m.source_classes.resize(id + 1);
            m.source_classes[static_cast<std::size_t>(id)] = nm;
            src_ids[nm] = id;
        }
        for (const auto& e : j.at("target_classes")) {
            const int id = e.at("id").get<int>();
            const std::string nm = e.at("name").get<std::string>();
            if (static_cast<int>(m.target_classes.size()) <= id) m.target_classes.resize(id + 1);
            m.target_classes[static_cast<std::size_t>(id)] = nm;
            tgt_ids[nm] = id;
        }
        for (const auto& r : j.at("rules")) {
            const std::string s = r.at("source").get<std::string>();
            const std::string t = r.at("target").get<std::string>();
            if (!src_ids.count(s)) throw DataError(path + ": rule names unknown source class '" + s + "'");
            const int sid = src_ids[s];
            if (m.rules.count(sid)) throw DataError(path + ": source class '" + s + "' mapped twice");
            if (t == "DROP") {
                m.rules[sid] = kDropClass;
            } else {
                if (!tgt_ids.count(t)) throw DataError(path + ": rule names unknown target class '" + t + "'");
                m.rules[sid] = tgt_ids[t];
            }
        }
        for (std::size_t i = 0; i < m.source_classes.size(); ++i)
            if (!m.rules.count(static_cast<int>(i)))
                throw DataError(path + ": source class '" + m.source_classes[i] + "' has no rule");
        return m;
    }
};

// Pixelwise lookup; the ignore index passes through; an unmapped value is a
// data error naming the value and how many pixels carry it.
inline LabelMap remap_labels(const LabelMap& label, const LabelMapping& mapping) {
    LabelMap out(label.rows(), label.cols());
    std::map<int, std::int64_t> unmapped;
    for (int y = 0; y < label.rows(); ++y)
        for (int x = 0; x < label.cols(); ++x) {
            const int v = label(y, x);
            if (v == mapping.ignore_index) {
                out(y, x) = mapping.ignore_index;
                continue;
            }
            auto it = mapping.rules.find(v);
            if (it == mapping.rules.end()) {
                ++unmapped[v];
                continue;
            }
            out(y, x) = it->second == kDropClass ? mapping.ignore_index : it->second;
        }
    if (!unmapped.empty()) {
        std::string msg = "remap_labels(" + mapping.name + "): unmapped source values:";
        for (const auto& [v, n] : unmapped)
            msg += " " + std::to_string(v) + " (" + std::to_string(n) + " px)";
        throw DataError(msg);
    }
    return out;
}

// ---------------------------------------------------------------------------
// split construction
// ---------------------------------------------------------------------------

struct SplitEntry {
    std::string image_path;
    std::string label_path;
};

struct Split {
    std::vector<SplitEntry> train;
    std::vector<SplitEntry> test;
    std::vector<std::string> warnings;
};

// Lexicographic image/label pairing by stem under dir/{images,labels}.
inline std::vector<SplitEntry> pair_domain_dir(const fs::path& dir, std::vector<std::string>& warnings) {
    const fs::path imgdir = dir / "images";
    const fs::path lbldir = dir / "labels";
    std::vector<SplitEntry> entries;
    if (!fs::exists(imgdir)) {
        warnings.push_back("no images directory under " + dir.string());
        return entries;
    }
    std::map<std::string, std::string> images, labels;
    for (const auto& e : fs::directory_iterator(imgdir))
        if (e.is_regular_file()) images[e.path().stem().string()] = e.path().string();
    if (fs::exists(lbldir))
        for (const auto& e : fs::directory_iterator(lbldir))
            if (e.is_regular_file()) labels[e.path().stem().string()] = e.path().string();

    std::vector<std::string> orphans;
    for (const auto& [stem, img] : images) {
        auto it = labels.find(stem);
        if (it == labels.end())
            orphans.push_back(img);
        else
            entries.push_back({img, it->second});
    }
    if (!orphans.empty()) {
        std::string msg = "images without labels under " + dir.string() + ":";
        for (const auto& o : orphans) msg += " " + o;
        throw DataError(msg);
    }
    if (entries.empty()) warnings.push_back("no samples under " + dir.string());
    return entries;  // std::map iteration is already lexicographic by stem
}

// Benchmark ids name the two domain directories as "<source>2<target>".
inline std::pair<std::string, std::string> parse_benchmark_id(const std::string& id, const fs::path& root) {
    std::vector<std::string> tried;
    for (std::size_t pos = id.find('2'); pos != std::string::npos; pos = id.find('2', pos + 1)) {
        if (pos == 0 || pos + 1 >= id.size()) continue;
        const std::string src = id.substr(0, pos), dst = id.substr(pos + 1);
        if (fs::exists(root / src) && fs::exists(root / dst)) return {src, dst};
        tried.push_back(src + " / " + dst);
    }
    std::string msg = "benchmark id '" + id + "' does not resolve to domain directories under " + root.string();
    for (const auto& t : tried) msg += "; tried " + t;
    throw DataError(msg);
}

// Deterministic split: train = source domain pairs, test = target domain
// pairs, both in lexicographic order.
inline Split build_split(const std::string& root, const std::string& benchmark_id) {
    const fs::path base = fs::path(root) / benchmark_id;
    const fs::path layout = fs::exists(base) ? base : fs::path(root);
    auto [src, dst] = parse_benchmark_id(benchmark_id, layout);
    Split s;
    s.train = pair_domain_dir(layout / src, s.warnings);
    s.test = pair_domain_dir(layout / dst, s.warnings);
    return s;
}

// ---------------------------------------------------------------------------
// synthetic two-domain dataset
// ---------------------------------------------------------------------------

// Fixed per-channel affine and a texture swap between the domains; geometry
// (and therefore the label histogram) is shared per index.
struct DomainShift {
    double scale[3] = {0.45, 0.50, 0.40};
    double offset[3] = {0.50, 0.42, 0.55};
    double stripe_amp = 0.03;
};

template <typename Scalar>
struct SynthDataset {
    std::vector<SegSample<Scalar>> domain_a;
    std::vector<SegSample<Scalar>> domain_b;
    int num_classes = 0;
};

namespace synth_detail {

// Luminance ladder with a small per-class chroma tilt keeps classes separable
// under monotone per-channel restyling.
inline void class_color(int cls, int k, double rgb[3]) {
    const double lum = (cls + 0.5) / static_cast<double>(k) * 0.7 + 0.12;
    const double tilt[3][3] = {{0.06, 0.0, -0.06}, {-0.06, 0.06, 0.0}, {0.0, -0.06, 0.06}};
    for (int c = 0; c < 3; ++c) rgb[c] = std::clamp(lum + tilt[cls % 3][c], 0.02, 0.98);
}

struct Scene {
    LabelMap label;
};

// Rectangles and ellipses of classes 1..K-1 over a class-0 background.
inline Scene make_scene(int size, int k, Rng& rng) {
    Scene s;
    s.label = LabelMap::Zero(size, size);
    const int shapes = 2 + static_cast<int>(rng.index(3));
    for (int i = 0; i < shapes; ++i) {
        const int cls = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(k - 1)));
        const bool ellipse = rng.bernoulli(0.5);
        const int sh = size / 4 + static_cast<int>(rng.index(size / 4 + 1));
        const int sw = size / 4 + static_cast<int>(rng.index(size / 4 + 1));
        const int cy = static_cast<int>(rng.index(size));
        const int cx = static_cast<int>(rng.index(size));
        for (int y = std::max(0, cy - sh / 2); y < std::min(size, cy + sh / 2 + 1); ++y)
            for (int x = std::max(0, cx - sw / 2); x < std::min(size, cx + sw / 2 + 1); ++x) {
                if (ellipse) {
                    const double dy = (y - cy) / (sh / 2.0 + 0.5), dx = (x - cx) / (sw / 2.0 + 0.5);
                    if (dy * dy + dx * dx > 1.0) continue;
                }
                s.label(y, x) = cls;
            }
    }
    return s;
}

template <typename Scalar>
Tensor<Scalar> render(const Scene& scene, int k, Rng& rng, const double* palette /* k*3 or null */) {
    const int size = static_cast<int>(scene.label.rows());
    Tensor<Scalar> img(Shape{3, size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double rgb[3];
            const int cls = scene.label(y, x);
            if (palette) {
                for (int c = 0; c < 3; ++c) rgb[c] = palette[cls * 3 + c];
            } else {
                class_color(cls, k, rgb);
            }
            const double noise = rng.uniform(-0.04, 0.04);
            for (int c = 0; c < 3; ++c)
                img.data()[(static_cast<std::size_t>(c) * size + y) * size + x] =
                    static_cast<Scalar>(std::clamp(rgb[c] + noise, 0.0, 1.0));
        }
    return img;
}

}  // namespace synth_detail

// Domain A renders the shared palette directly; domain B is a per-channel
// affine re-colorization of the same pixels plus a stripe texture, a pure
// style-type gap.
template <typename Scalar>
SynthDataset<Scalar> synth_two_domain(std::uint64_t seed, int n_per_domain, int size, int k,
                                      const DomainShift& shift = DomainShift{}) {
    if (k < 2) throw ConfigError("synth_two_domain: need at least 2 classes");
    SynthDataset<Scalar> ds;
    ds.num_classes = k;
    for (int i = 0; i < n_per_domain; ++i) {
        Rng geo = Rng::derive(seed, 0x100 + static_cast<std::uint64_t>(i));
        auto scene = synth_detail::make_scene(size, k, geo);
        Rng tex = Rng::derive(seed, 0x9000 + static_cast<std::uint64_t>(i));
        auto img_a = synth_detail::render<Scalar>(scene, k, tex, nullptr);

        SegSample<Scalar> a;
        a.image = img_a;
        a.label = scene.label;
        a.domain = "A";
        a.source_path = "synth://A/" + std::to_string(i);

        SegSample<Scalar> b;
        b.image = Tensor<Scalar>(img_a.shape());
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const std::size_t idx = (static_cast<std::size_t>(c) * size + y) * size + x;
                    double v = shift.scale[c] * static_cast<double>(img_a.data()[idx]) + shift.offset[c];
                    v += ((y / 2) % 2 == 0 ? 1.0 : -1.0) * shift.stripe_amp;
                    b.image.data()[idx] = static_cast<Scalar>(std::clamp(v, 0.0, 1.0));
                }
        b.label = scene.label;
        b.domain = "B";
        b.source_path = "synth://B/" + std::to_string(i);

        ds.domain_a.push_back(std::move(a));
        ds.domain_b.push_back(std::move(b));
    }
    return ds;
}

// Broad-style corpus: the same scene generator under fully randomized
// palettes and a random global per-channel affine.
template <typename Scalar>
std::vector<Tensor<Scalar>> synth_style_corpus(std::uint64_t seed, int n, int size, int k) {
    std::vector<Tensor<Scalar>> corpus;
    corpus.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::derive(seed, 0xC0 + static_cast<std::uint64_t>(i));
        auto scene = synth_detail::make_scene(size, k, rng);
        std::vector<double> palette(static_cast<std::size_t>(k) * 3);
        for (auto& v : palette) v = rng.uniform(0.05, 0.95);
        auto img = synth_detail::render<Scalar>(scene, k, rng, palette.data());
        const double sc = rng.uniform(0.3, 1.0);
        const double off = rng.uniform(0.0, 0.7);
        for (auto& v : img.data()) v = static_cast<Scalar>(std::clamp(sc * static_cast<double>(v) + off, 0.0, 1.0));
        corpus.push_back(std::move(img));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// dataset directories and manifests
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot checksum " + path);
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (f.read(buf, sizeof buf) || f.gcount() > 0) {
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!f) break;
    }
    return h;
}

// Palette entry for the dataset sidecar; colors are 8-bit rgb for report
// rendering.
struct ClassInfo {
    int id = 0;
    std::string name;
    int color[3] = {0, 0, 0};
};

inline std::vector<ClassInfo> default_palette(int num_classes) {
    std::vector<ClassInfo> palette;
    for (int c = 0; c < num_classes; ++c) {
        ClassInfo info;
        info.id = c;
        info.name = "class" + std::to_string(c);
        // Same luminance ladder the synthetic renderer uses.
        const double lum = (c + 0.5) / static_cast<double>(num_classes) * 0.7 + 0.12;
        const double tilt[3][3] = {{0.06, 0.0, -0.06}, {-0.06, 0.06, 0.0}, {0.0, -0.06, 0.06}};
        for (int i = 0; i < 3; ++i)
            info.color[i] = static_cast<int>(std::lround(std::clamp(lum + tilt[c % 3][i], 0.02, 0.98) * 255));
        palette.push_back(std::move(info));
    }
    return palette;
}

template <typename Scalar>
void save_dataset_dir(const std::vector<SegSample<Scalar>>& samples, int num_classes,
                      const std::string& dir, std::vector<ClassInfo> palette = {}) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "labels");
    int idx = 0;
    for (const auto& s : samples) {
        char name[32];
        std::snprintf(name, sizeof name, "%05d", idx++);
        save_image(s.image, (fs::path(dir) / "images" / (std::string(name) + ".ppm")).string());
        save_label(s.label, (fs::path(dir) / "labels" / (std::string(name) + ".pgm")).string());
    }
    if (palette.empty()) palette = default_palette(num_classes);
    nlohmann::json meta;
    meta["format"] = "dgseg-dataset";
    meta["version"] = 1;
    meta["num_classes"] = num_classes;
    meta["ignore_index"] = kIgnoreIndex;
    meta["count"] = samples.size();
    auto jpal = nlohmann::json::array();
    for (const auto& ci : palette)
        jpal.push_back({{"id", ci.id}, {"name", ci.name}, {"color", {ci.color[0], ci.color[1], ci.color[2]}}});
    meta["palette"] = jpal;
    std::ofstream f(fs::path(dir) / "dataset.json");
    f << meta.dump(2) << "\n";
}

template <typename Scalar>
std::vector<SegSample<Scalar>> load_dataset_dir(const std::string& dir) {
    std::vector<std::string> warnings;
    auto entries = pair_domain_dir(dir, warnings);
    std::vector<SegSample<Scalar>> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        SegSample<Scalar> s;
        s.image = load_image<Scalar>(e.image_path);
        s.label = load_label(e.label_path);
        s.source_path = e.image_path;
        s.domain = fs::path(dir).filename().string();
        if (s.label.rows() != s.image.dim(1) || s.label.cols() != s.image.dim(2))
            throw DataError("image/label size mismatch for " + e.image_path);
        out.push_back(std::move(s));
    }
    return out;
}

inline std::optional<int> dataset_num_classes(const std::string& dir) {
    const fs::path meta = fs::path(dir) / "dataset.json";
    if (!fs::exists(meta)) return std::nullopt;
    std::ifstream f(meta);
    nlohmann::json j;
    f >> j;
    return j.value("num_classes", 0);
}

inline std::vector<std::string> dataset_class_names(const std::string& dir) {
    const fs::path meta = fs::path(dir) / "dataset.json";
    std::vector<std::string> names;
    if (!fs::exists(meta)) return names;
    std::ifstream f(meta);
    nlohmann::json j;
    f >> j;
    for (const auto& e : j.value("palette", nlohmann::json::array())) {
        const int id = e.value("id", -1);
        if (id < 0) continue;
        if (static_cast<int>(names.size()) <= id) names.resize(id + 1);
        names[static_cast<std::size_t>(id)] = e.value("name", "");
    }
    return names;
}

}  // namespace dgseg
