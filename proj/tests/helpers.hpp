#pragma once

#include <cmath>
#include <vector>

#include "dgseg/ops.hpp"
#include "dgseg/rng.hpp"
#include "dgseg/tensor.hpp"

namespace testutil {

template <typename S>
dgseg::Tensor<S> random_tensor(dgseg::Shape shape, dgseg::Rng& rng, double lo = -1.0, double hi = 1.0,
                               bool requires_grad = false) {
    std::vector<S> v(static_cast<std::size_t>(dgseg::shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
    return dgseg::Tensor<S>(std::move(shape), std::move(v), requires_grad);
}

template <typename S>
double max_abs_diff(const dgseg::Tensor<S>& a, const dgseg::Tensor<S>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    return m;
}

template <typename S>
double max_abs_diff(const std::vector<S>& a, const std::vector<S>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

// Independent triple-loop product, the oracle for matmul.
template <typename S>
dgseg::Tensor<S> naive_matmul(const dgseg::Tensor<S>& a, const dgseg::Tensor<S>& b) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    dgseg::Tensor<S> c(dgseg::Shape{m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            S acc = S(0);
            for (int t = 0; t < k; ++t)
                acc += a.data()[static_cast<std::size_t>(i) * k + t] * b.data()[static_cast<std::size_t>(t) * n + j];
            c.data()[static_cast<std::size_t>(i) * n + j] = acc;
        }
    return c;
}

// Direct-summation convolution, the oracle for conv2d.
template <typename S>
dgseg::Tensor<S> naive_conv2d(const dgseg::Tensor<S>& x, const dgseg::Tensor<S>& w,
                              const dgseg::Tensor<S>& b, int stride, int dilation, int padding) {
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    const int wo = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    dgseg::Tensor<S> out(dgseg::Shape{co, ho, wo});
    for (int oc = 0; oc < co; ++oc)
        for (int y = 0; y < ho; ++y)
            for (int xo = 0; xo < wo; ++xo) {
                S acc = b.data()[static_cast<std::size_t>(oc)];
                for (int ic = 0; ic < ci; ++ic)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j) {
                            const int sy = y * stride - padding + i * dilation;
                            const int sx = xo * stride - padding + j * dilation;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                            acc += x.data()[(static_cast<std::size_t>(ic) * h + sy) * wd + sx] *
                                   w.data()[((static_cast<std::size_t>(oc) * ci + ic) * kh + i) * kw + j];
                        }
                out.data()[(static_cast<std::size_t>(oc) * ho + y) * wo + xo] = acc;
            }
    return out;
}

// Loop-everything multi-head attention, the oracle for multi_head_attention.
template <typename S>
dgseg::Tensor<S> naive_mha(const dgseg::Tensor<S>& q, const dgseg::Tensor<S>& k,
                           const dgseg::Tensor<S>& v, const dgseg::AttentionParams<S>& p, int heads) {
    const int lq = q.dim(0), lk = k.dim(0), d = q.dim(1);
    const int dh = d / heads;
    auto project = [d](const dgseg::Tensor<S>& x, const dgseg::Tensor<S>& w, const dgseg::Tensor<S>& b) {
        const int rows = x.dim(0);
        std::vector<S> out(static_cast<std::size_t>(rows) * d);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < d; ++c) {
                S acc = b.data()[static_cast<std::size_t>(c)];
                for (int t = 0; t < d; ++t)
                    acc += x.data()[static_cast<std::size_t>(r) * d + t] * w.data()[static_cast<std::size_t>(t) * d + c];
                out[static_cast<std::size_t>(r) * d + c] = acc;
            }
        return out;
    };
    auto Q = project(q, p.wq, p.bq);
    auto K = project(k, p.wk, p.bk);
    auto V = project(v, p.wv, p.bv);
    std::vector<S> heads_out(static_cast<std::size_t>(lq) * d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int hI = 0; hI < heads; ++hI)
        for (int r = 0; r < lq; ++r) {
            std::vector<double> scores(static_cast<std::size_t>(lk));
            double mx = -1e300;
            for (int c = 0; c < lk; ++c) {
                double s = 0;
                for (int t = 0; t < dh; ++t)
                    s += static_cast<double>(Q[static_cast<std::size_t>(r) * d + hI * dh + t]) *
                         static_cast<double>(K[static_cast<std::size_t>(c) * d + hI * dh + t]);
                scores[static_cast<std::size_t>(c)] = s * scale;
                mx = std::max(mx, scores[static_cast<std::size_t>(c)]);
            }
            double denom = 0;
            for (auto& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            for (int t = 0; t < dh; ++t) {
                double acc = 0;
                for (int c = 0; c < lk; ++c)
                    acc += scores[static_cast<std::size_t>(c)] / denom *
                           static_cast<double>(V[static_cast<std::size_t>(c) * d + hI * dh + t]);
                heads_out[static_cast<std::size_t>(r) * d + hI * dh + t] = static_cast<S>(acc);
            }
        }
    dgseg::Tensor<S> concat(dgseg::Shape{lq, d}, std::move(heads_out));
    auto out = project(concat, p.wo, p.bo);
    return dgseg::Tensor<S>(dgseg::Shape{lq, d}, std::move(out));
}

template <typename S>
dgseg::AttentionParams<S> random_attention_params(int d, dgseg::Rng& rng) {
    dgseg::AttentionParams<S> p;
    p.wq = random_tensor<S>({d, d}, rng);
    p.bq = random_tensor<S>({d}, rng);
    p.wk = random_tensor<S>({d, d}, rng);
    p.bk = random_tensor<S>({d}, rng);
    p.wv = random_tensor<S>({d, d}, rng);
    p.bv = random_tensor<S>({d}, rng);
    p.wo = random_tensor<S>({d, d}, rng);
    p.bo = random_tensor<S>({d}, rng);
    return p;
}

}  // namespace testutil
