#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgseg/rng.hpp"
#include "dgseg/tensor.hpp"

namespace dgseg {

using MaskGrid = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vec = Eigen::Vector<Scalar, Eigen::Dynamic>;

// Channel-wise first and second spatial moments of one image. The flattened
// layout is [mean_0..mean_{C-1}, std_0..std_{C-1}], dimension D = 2C.
template <typename Scalar>
struct StyleEmbedding {
    Vec<Scalar> mean;
    Vec<Scalar> stddev;

    int channels() const { return static_cast<int>(mean.size()); }

    Vec<Scalar> flatten() const {
        Vec<Scalar> v(mean.size() * 2);
        v.head(mean.size()) = mean;
        v.tail(stddev.size()) = stddev;
        return v;
    }
};

// Gaussian description of a style corpus: empirical mean of the flattened
// embeddings plus a per-dimension std taken from the singular values of the
// empirical covariance (sqrt, in the order the SVD returns them).
template <typename Scalar>
struct StyleStats {
    Vec<Scalar> mean;
    Vec<Scalar> stddev;
    std::int64_t source_count = 0;

    int dim() const { return static_cast<int>(mean.size()); }
};

// Binary block mask on a ceil(H/B) x ceil(W/B) grid, upscaled to H x W by
// nearest neighbor so the values stay exactly 0/1.
struct BlockMask {
    MaskGrid grid;
    MaskGrid full;
    double tau_m = 0.0;
    int block = 1;

    double grid_ones_fraction() const {
        return static_cast<double>(grid.template cast<std::int64_t>().sum()) /
               static_cast<double>(grid.size());
    }
};

template <typename Scalar>
struct VisualPrompt {
    Tensor<Scalar> v;
    bool trainable = true;
};

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

// Channel-wise spatial mean/std, population form (divisor H*W).
template <typename Scalar>
StyleEmbedding<Scalar> extract_style(const Tensor<Scalar>& x) {
    if (x.ndim() != 3 || x.dim(1) < 1 || x.dim(2) < 1)
        throw DimensionError("extract_style: want non-empty (C,H,W), got " + shape_str(x.shape()));
    const int c = x.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    StyleEmbedding<Scalar> e;
    e.mean.resize(c);
    e.stddev.resize(c);
    for (int ch = 0; ch < c; ++ch) {
        const Scalar* p = x.data().data() + static_cast<std::size_t>(ch) * hw;
        Scalar mu = Scalar(0);
        for (std::int64_t i = 0; i < hw; ++i) mu += p[i];
        mu /= Scalar(hw);
        Scalar var = Scalar(0);
        for (std::int64_t i = 0; i < hw; ++i) {
            const Scalar d = p[i] - mu;
            var += d * d;
        }
        var /= Scalar(hw);
        e.mean[ch] = mu;
        e.stddev[ch] = std::sqrt(var);
    }
    return e;
}

// Offline corpus fit: empirical mean, covariance with divisor n-1, then
// per-dimension std = sqrt of the covariance's singular values, assigned to
// dimensions in the order the diagonal of the SVD comes back.
template <typename Scalar>
StyleStats<Scalar> fit_style_stats(const std::vector<StyleEmbedding<Scalar>>& corpus) {
    if (corpus.size() < 2)
        throw DataError("fit_style_stats: need at least 2 embeddings, got " + std::to_string(corpus.size()));
    const int d = corpus[0].channels() * 2;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> rows(corpus.size(), d);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (corpus[i].channels() * 2 != d)
            throw DimensionError("fit_style_stats: inconsistent embedding dimension");
        rows.row(static_cast<Eigen::Index>(i)) = corpus[i].flatten().transpose();
    }
    StyleStats<Scalar> stats;
    stats.source_count = static_cast<std::int64_t>(corpus.size());
    stats.mean = rows.colwise().mean();
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> centered =
        rows.rowwise() - stats.mean.transpose();
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> cov =
        (centered.transpose() * centered) / Scalar(corpus.size() - 1);
    Eigen::JacobiSVD<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> svd(cov);
    stats.stddev = svd.singularValues().array().sqrt();
    return stats;
}

// Independent per-dimension Gaussian draw; the std half of the embedding is
// clamped at zero since a channel std cannot be negative. Always consumes
// dim() normal draws so the stream layout does not depend on the values.
template <typename Scalar>
StyleEmbedding<Scalar> sample_embedding(const StyleStats<Scalar>& stats, Rng& rng) {
    const int d = stats.dim();
    const int c = d / 2;
    Vec<Scalar> s(d);
    for (int i = 0; i < d; ++i)
        s[i] = stats.mean[i] + stats.stddev[i] * static_cast<Scalar>(rng.normal());
    StyleEmbedding<Scalar> e;
    e.mean = s.head(c);
    e.stddev = s.tail(c).cwiseMax(Scalar(0));
    return e;
}

// Nearest-neighbor upscale by index scaling; exact B-pixel blocks whenever the
// image side is a multiple of B.
inline MaskGrid nearest_upscale(const MaskGrid& grid, int h, int w) {
    MaskGrid full(h, w);
    const int gh = static_cast<int>(grid.rows()), gw = static_cast<int>(grid.cols());
    for (int y = 0; y < h; ++y) {
        const int gy = static_cast<int>((static_cast<std::int64_t>(y) * gh) / h);
        for (int x = 0; x < w; ++x) {
            const int gx = static_cast<int>((static_cast<std::int64_t>(x) * gw) / w);
            full(y, x) = grid(gy, gx);
        }
    }
    return full;
}

// Grid cell = 1 iff its uniform draw strictly exceeds tau_m; cells are drawn
// in row-major order.
inline BlockMask generate_mask(int h, int w, int block, double tau_m, Rng& rng) {
    if (block <= 0) throw ConfigError("generate_mask: block size must be positive");
    if (h < 1 || w < 1) throw ConfigError("generate_mask: empty image");
    if (tau_m < 0.0 || tau_m > 1.0) throw ConfigError("generate_mask: tau_m outside [0,1]");
    BlockMask m;
    m.tau_m = tau_m;
    m.block = block;
    const int gh = (h + block - 1) / block;
    const int gw = (w + block - 1) / block;
    m.grid.resize(gh, gw);
    for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) m.grid(y, x) = rng.uniform() > tau_m ? 1 : 0;
    m.full = nearest_upscale(m.grid, h, w);
    return m;
}

// Adaptive instance renormalization: per channel,
// y = target.std * (x - source.mean) / max(source.std, delta) + target.mean.
template <typename Scalar>
Tensor<Scalar> style_transfer(const StyleEmbedding<Scalar>& target, const StyleEmbedding<Scalar>& source,
                              const Tensor<Scalar>& x, Scalar delta = Scalar(1e-5)) {
    if (x.ndim() != 3 || target.channels() != x.dim(0) || source.channels() != x.dim(0))
        throw DimensionError("style_transfer: embeddings for " + std::to_string(x.dim(0)) +
                             " channels required, got " + std::to_string(target.channels()) + "/" +
                             std::to_string(source.channels()));
    const int c = x.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    Tensor<Scalar> y(x.shape());
    for (int ch = 0; ch < c; ++ch) {
        const Scalar s = target.stddev[ch] / std::max(source.stddev[ch], delta);
        const Scalar off = target.mean[ch];
        const Scalar mu = source.mean[ch];
        const Scalar* in = x.data().data() + static_cast<std::size_t>(ch) * hw;
        Scalar* out = y.data().data() + static_cast<std::size_t>(ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) out[i] = s * (in[i] - mu) + off;
    }
    return y;
}

// X_S = styled (.) M + x (.) (1 - M), full-resolution mask broadcast over
// channels. Pure data composition, no tape.
template <typename Scalar>
Tensor<Scalar> compose_styled(const Tensor<Scalar>& x, const Tensor<Scalar>& styled, const BlockMask& m) {
    if (x.shape() != styled.shape())
        throw DimensionError("compose_styled: " + shape_str(x.shape()) + " vs " + shape_str(styled.shape()));
    if (x.ndim() != 3 || m.full.rows() != x.dim(1) || m.full.cols() != x.dim(2))
        throw DimensionError("compose_styled: mask " + std::to_string(m.full.rows()) + "x" +
                             std::to_string(m.full.cols()) + " for image " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<Scalar> out(x.shape());
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const std::size_t i = (static_cast<std::size_t>(ch) * h + y) * w + xx;
                out.data()[i] = m.full(y, xx) ? styled.data()[i] : x.data()[i];
            }
    return out;
}

// X_M = X (.) M (.) v. Participates in the gradient graph through v, so the
// visual prompt can be trained by the reconstruction loss.
template <typename Scalar>
Tensor<Scalar> make_masked_image(const Tensor<Scalar>& x, const BlockMask& m, const VisualPrompt<Scalar>& v) {
    if (x.shape() != v.v.shape())
        throw DimensionError("make_masked_image: prompt " + shape_str(v.v.shape()) + " for image " +
                             shape_str(x.shape()));
    if (m.full.rows() != x.dim(1) || m.full.cols() != x.dim(2))
        throw DimensionError("make_masked_image: mask does not match image");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<Scalar> xm(x.shape());
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const std::size_t i = (static_cast<std::size_t>(ch) * h + y) * w + xx;
                xm.data()[i] = m.full(y, xx) ? x.data()[i] : Scalar(0);
            }
    return mul(xm, v.v);
}

// ---------------------------------------------------------------------------
// stats file (versioned text record)
// ---------------------------------------------------------------------------

inline constexpr int kStyleStatsVersion = 1;

template <typename Scalar>
void save_style_stats(const StyleStats<Scalar>& s, const std::string& path) {
    nlohmann::json j;
    j["format"] = "dgseg-style-stats";
    j["version"] = kStyleStatsVersion;
    j["dim"] = s.dim();
    j["count"] = s.source_count;
    j["mean"] = std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size());
    j["std"] = std::vector<double>(s.stddev.data(), s.stddev.data() + s.stddev.size());
    std::ofstream f(path);
    if (!f) throw IoError("cannot write style stats to " + path);
    f << j.dump(2) << "\n";
}

template <typename Scalar>
StyleStats<Scalar> load_style_stats(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read style stats from " + path);
    nlohmann::json j;
    f >> j;
    if (j.value("format", "") != "dgseg-style-stats" || j.value("version", -1) != kStyleStatsVersion)
        throw IoError("unrecognized style stats file " + path);
    StyleStats<Scalar> s;
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto sd = j.at("std").get<std::vector<double>>();
    if (mean.size() != sd.size() || static_cast<int>(mean.size()) != j.at("dim").get<int>())
        throw IoError("style stats dimension mismatch in " + path);
    s.mean.resize(static_cast<Eigen::Index>(mean.size()));
    s.stddev.resize(static_cast<Eigen::Index>(sd.size()));
    for (std::size_t i = 0; i < mean.size(); ++i) {
        s.mean[static_cast<Eigen::Index>(i)] = static_cast<Scalar>(mean[i]);
        s.stddev[static_cast<Eigen::Index>(i)] = static_cast<Scalar>(sd[i]);
    }
    s.source_count = j.at("count").get<std::int64_t>();
    return s;
}

}  // namespace dgseg
