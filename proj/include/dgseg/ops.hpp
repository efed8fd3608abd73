#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <vector>

#include "dgseg/tensor.hpp"

namespace dgseg {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// matmul / transpose / linear
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<Scalar> out(static_cast<std::size_t>(m) * n);
    {
        Eigen::Map<const RowMat<Scalar>> A(a.data().data(), m, k);
        Eigen::Map<const RowMat<Scalar>> B(b.data().data(), k, n);
        Eigen::Map<RowMat<Scalar>> C(out.data(), m, n);
        C.noalias() = A * B;
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op<Scalar>(Shape{m, n}, std::move(out), {an, bn},
        [an, bn, m, k, n](detail::TensorNode<Scalar>& o) {
            Eigen::Map<const RowMat<Scalar>> G(o.grad.data(), m, n);
            if (an->requires_grad) {
                an->ensure_grad();
                Eigen::Map<const RowMat<Scalar>> B(bn->values.data(), k, n);
                Eigen::Map<RowMat<Scalar>> dA(an->grad.data(), m, k);
                dA.noalias() += G * B.transpose();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                Eigen::Map<const RowMat<Scalar>> A(an->values.data(), m, k);
                Eigen::Map<RowMat<Scalar>> dB(bn->grad.data(), k, n);
                dB.noalias() += A.transpose() * G;
            }
        });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
    if (a.ndim() != 2) throw DimensionError("transpose: want 2-d, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<Scalar> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
    auto an = a.node();
    return detail::make_op<Scalar>(Shape{n, m}, std::move(out), {an},
        [an, m, n](detail::TensorNode<Scalar>& o) {
            an->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    an->grad[static_cast<std::size_t>(i) * n + j] +=
                        o.grad[static_cast<std::size_t>(j) * m + i];
        });
}

// Adds a length-n row vector to every row of an (m, n) tensor.
template <typename Scalar>
Tensor<Scalar> add_rowvec(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.ndim() != 2 || b.numel() != a.dim(1))
        throw DimensionError("add_rowvec: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<Scalar> out(a.data());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += b.data()[static_cast<std::size_t>(j)];
    auto an = a.node(), bn = b.node();
    return detail::make_op<Scalar>(a.shape(), std::move(out), {an, bn},
        [an, bn, m, n](detail::TensorNode<Scalar>& o) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        bn->grad[static_cast<std::size_t>(j)] += o.grad[static_cast<std::size_t>(i) * n + j];
            }
        });
}

// x (m, n) * w (n, p) + b (p)
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
    return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// conv2d via im2col + gemm
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int dilation, int padding) {
    return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

// x: (Ci, H, W), w: (Co, Ci, kh, kw), b: (Co)
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b,
                      int stride = 1, int dilation = 1, int padding = 0) {
    if (x.ndim() != 3 || w.ndim() != 4 || x.dim(0) != w.dim(1))
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()));
    if (stride < 1 || dilation < 1 || padding < 0)
        throw ConfigError("conv2d: stride/dilation must be >= 1, padding >= 0");
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (b.numel() != co) throw DimensionError("conv2d: bias " + shape_str(b.shape()) + " for Co=" + std::to_string(co));
    const int ho = conv_out_dim(h, kh, stride, dilation, padding);
    const int wo = conv_out_dim(wd, kw, stride, dilation, padding);
    if (ho < 1 || wo < 1)
        throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " (dilation " + std::to_string(dilation) + ") exceeds padded input " +
                             shape_str(x.shape()));

    const int krows = ci * kh * kw;
    const std::int64_t ncols = static_cast<std::int64_t>(ho) * wo;
    auto cols = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(krows) * ncols, Scalar(0));
    for (int c = 0; c < ci; ++c)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                const std::size_t r = static_cast<std::size_t>((c * kh + i) * kw + j) * ncols;
                for (int y = 0; y < ho; ++y) {
                    const int sy = y * stride - padding + i * dilation;
                    if (sy < 0 || sy >= h) continue;
                    const std::size_t xrow = (static_cast<std::size_t>(c) * h + sy) * wd;
                    for (int xo = 0; xo < wo; ++xo) {
                        const int sx = xo * stride - padding + j * dilation;
                        if (sx < 0 || sx >= wd) continue;
                        (*cols)[r + static_cast<std::size_t>(y) * wo + xo] = x.data()[xrow + sx];
                    }
                }
            }

    std::vector<Scalar> out(static_cast<std::size_t>(co) * ncols);
    {
        Eigen::Map<const RowMat<Scalar>> W(w.data().data(), co, krows);
        Eigen::Map<const RowMat<Scalar>> Cls(cols->data(), krows, ncols);
        Eigen::Map<RowMat<Scalar>> Y(out.data(), co, ncols);
        Y.noalias() = W * Cls;
        for (int c = 0; c < co; ++c) Y.row(c).array() += b.data()[static_cast<std::size_t>(c)];
    }

    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::make_op<Scalar>(Shape{co, ho, wo}, std::move(out), {xn, wn, bn},
        [xn, wn, bn, cols, ci, h, wd, co, kh, kw, ho, wo, stride, dilation, padding, krows,
         ncols](detail::TensorNode<Scalar>& o) {
            Eigen::Map<const RowMat<Scalar>> G(o.grad.data(), co, ncols);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int c = 0; c < co; ++c) bn->grad[static_cast<std::size_t>(c)] += G.row(c).sum();
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                Eigen::Map<const RowMat<Scalar>> Cls(cols->data(), krows, ncols);
                Eigen::Map<RowMat<Scalar>> dW(wn->grad.data(), co, krows);
                dW.noalias() += G * Cls.transpose();
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                RowMat<Scalar> dcols(krows, ncols);
                Eigen::Map<const RowMat<Scalar>> W(wn->values.data(), co, krows);
                dcols.noalias() = W.transpose() * G;
                for (int c = 0; c < ci; ++c)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j) {
                            const int r = (c * kh + i) * kw + j;
                            for (int y = 0; y < ho; ++y) {
                                const int sy = y * stride - padding + i * dilation;
                                if (sy < 0 || sy >= h) continue;
                                const std::size_t xrow = (static_cast<std::size_t>(c) * h + sy) * wd;
                                for (int xo = 0; xo < wo; ++xo) {
                                    const int sx = xo * stride - padding + j * dilation;
                                    if (sx < 0 || sx >= wd) continue;
                                    xn->grad[xrow + sx] += dcols(r, static_cast<std::size_t>(y) * wo + xo);
                                }
                            }
                        }
            }
        });
}

// ---------------------------------------------------------------------------
// softmax / layer_norm
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim())
        throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    std::int64_t outer = 1, inner = 1;
    const int n = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);

    std::vector<Scalar> out(x.data().size());
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::size_t base = static_cast<std::size_t>(o * n * inner + i);
            Scalar mx = x.data()[base];
            for (int j = 1; j < n; ++j)
                mx = std::max(mx, x.data()[base + static_cast<std::size_t>(j) * inner]);
            Scalar denom = Scalar(0);
            for (int j = 0; j < n; ++j) {
                const Scalar e = std::exp(x.data()[base + static_cast<std::size_t>(j) * inner] - mx);
                out[base + static_cast<std::size_t>(j) * inner] = e;
                denom += e;
            }
            for (int j = 0; j < n; ++j) out[base + static_cast<std::size_t>(j) * inner] /= denom;
        }

    auto xn = x.node();
    return detail::make_op<Scalar>(x.shape(), std::move(out), {xn},
        [xn, outer, inner, n](detail::TensorNode<Scalar>& o) {
            xn->ensure_grad();
            for (std::int64_t ot = 0; ot < outer; ++ot)
                for (std::int64_t i = 0; i < inner; ++i) {
                    const std::size_t base = static_cast<std::size_t>(ot * n * inner + i);
                    Scalar dot = Scalar(0);
                    for (int j = 0; j < n; ++j) {
                        const std::size_t idx = base + static_cast<std::size_t>(j) * inner;
                        dot += o.grad[idx] * o.values[idx];
                    }
                    for (int j = 0; j < n; ++j) {
                        const std::size_t idx = base + static_cast<std::size_t>(j) * inner;
                        xn->grad[idx] += o.values[idx] * (o.grad[idx] - dot);
                    }
                }
        });
}

// Normalizes the last axis; gamma/beta have that axis's length.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
    const int n = x.dim(x.ndim() - 1);
    if (gamma.numel() != n || beta.numel() != n)
        throw DimensionError("layer_norm: scale/shift " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " for width " + std::to_string(n));
    const std::int64_t rows = x.numel() / n;
    std::vector<Scalar> out(x.data().size());
    auto xhat = std::make_shared<std::vector<Scalar>>(x.data().size());
    auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * n;
        Scalar mu = Scalar(0);
        for (int j = 0; j < n; ++j) mu += x.data()[base + j];
        mu /= Scalar(n);
        Scalar var = Scalar(0);
        for (int j = 0; j < n; ++j) {
            const Scalar d = x.data()[base + j] - mu;
            var += d * d;
        }
        var /= Scalar(n);
        const Scalar is = Scalar(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = is;
        for (int j = 0; j < n; ++j) {
            const Scalar xh = (x.data()[base + j] - mu) * is;
            (*xhat)[base + j] = xh;
            out[base + j] = xh * gamma.data()[static_cast<std::size_t>(j)] + beta.data()[static_cast<std::size_t>(j)];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_op<Scalar>(x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat, inv_std, rows, n](detail::TensorNode<Scalar>& o) {
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::size_t base = static_cast<std::size_t>(r) * n;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int j = 0; j < n; ++j)
                        gn->grad[static_cast<std::size_t>(j)] += o.grad[base + j] * (*xhat)[base + j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int j = 0; j < n; ++j) bn->grad[static_cast<std::size_t>(j)] += o.grad[base + j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    Scalar mean_gy = Scalar(0), mean_gyxh = Scalar(0);
                    for (int j = 0; j < n; ++j) {
                        const Scalar gy = o.grad[base + j] * gn->values[static_cast<std::size_t>(j)];
                        mean_gy += gy;
                        mean_gyxh += gy * (*xhat)[base + j];
                    }
                    mean_gy /= Scalar(n);
                    mean_gyxh /= Scalar(n);
                    const Scalar is = (*inv_std)[static_cast<std::size_t>(r)];
                    for (int j = 0; j < n; ++j) {
                        const Scalar gy = o.grad[base + j] * gn->values[static_cast<std::size_t>(j)];
                        xn->grad[base + j] += is * (gy - mean_gy - (*xhat)[base + j] * mean_gyxh);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// bilinear_resize (align-corners-false)
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& x, int ho, int wo) {
    if (x.ndim() != 3) throw DimensionError("bilinear_resize: want (C,H,W), got " + shape_str(x.shape()));
    if (ho < 1 || wo < 1) throw ConfigError("bilinear_resize: target size must be >= 1");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);

    struct Tap {
        int i0, i1;
        Scalar f;
    };
    auto make_taps = [](int in, int out) {
        std::vector<Tap> taps(static_cast<std::size_t>(out));
        const double scale = static_cast<double>(in) / out;
        for (int d = 0; d < out; ++d) {
            double src = (d + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            int i0 = static_cast<int>(src);
            if (i0 > in - 1) i0 = in - 1;
            const int i1 = (i0 < in - 1) ? i0 + 1 : i0;
            taps[static_cast<std::size_t>(d)] = {i0, i1, static_cast<Scalar>(src - i0)};
        }
        return taps;
    };
    auto ytaps = std::make_shared<std::vector<Tap>>(make_taps(h, ho));
    auto xtaps = std::make_shared<std::vector<Tap>>(make_taps(w, wo));

    std::vector<Scalar> out(static_cast<std::size_t>(c) * ho * wo);
    for (int ch = 0; ch < c; ++ch) {
        const std::size_t ib = static_cast<std::size_t>(ch) * h * w;
        const std::size_t ob = static_cast<std::size_t>(ch) * ho * wo;
        for (int y = 0; y < ho; ++y) {
            const Tap& ty = (*ytaps)[static_cast<std::size_t>(y)];
            for (int xo = 0; xo < wo; ++xo) {
                const Tap& tx = (*xtaps)[static_cast<std::size_t>(xo)];
                const Scalar v00 = x.data()[ib + static_cast<std::size_t>(ty.i0) * w + tx.i0];
                const Scalar v01 = x.data()[ib + static_cast<std::size_t>(ty.i0) * w + tx.i1];
                const Scalar v10 = x.data()[ib + static_cast<std::size_t>(ty.i1) * w + tx.i0];
                const Scalar v11 = x.data()[ib + static_cast<std::size_t>(ty.i1) * w + tx.i1];
                out[ob + static_cast<std::size_t>(y) * wo + xo] =
                    (Scalar(1) - ty.f) * ((Scalar(1) - tx.f) * v00 + tx.f * v01) +
                    ty.f * ((Scalar(1) - tx.f) * v10 + tx.f * v11);
            }
        }
    }
    auto xn = x.node();
    return detail::make_op<Scalar>(Shape{c, ho, wo}, std::move(out), {xn},
        [xn, ytaps, xtaps, c, h, w, ho, wo](detail::TensorNode<Scalar>& o) {
            xn->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t ib = static_cast<std::size_t>(ch) * h * w;
                const std::size_t ob = static_cast<std::size_t>(ch) * ho * wo;
                for (int y = 0; y < ho; ++y) {
                    const Tap& ty = (*ytaps)[static_cast<std::size_t>(y)];
                    for (int xo = 0; xo < wo; ++xo) {
                        const Tap& tx = (*xtaps)[static_cast<std::size_t>(xo)];
                        const Scalar g = o.grad[ob + static_cast<std::size_t>(y) * wo + xo];
                        xn->grad[ib + static_cast<std::size_t>(ty.i0) * w + tx.i0] +=
                            g * (Scalar(1) - ty.f) * (Scalar(1) - tx.f);
                        xn->grad[ib + static_cast<std::size_t>(ty.i0) * w + tx.i1] += g * (Scalar(1) - ty.f) * tx.f;
                        xn->grad[ib + static_cast<std::size_t>(ty.i1) * w + tx.i0] += g * ty.f * (Scalar(1) - tx.f);
                        xn->grad[ib + static_cast<std::size_t>(ty.i1) * w + tx.i1] += g * ty.f * tx.f;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// multi-head attention
// ---------------------------------------------------------------------------

template <typename Scalar>
struct AttentionParams {
    Tensor<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product attention with q from one stream and k = v from another,
// per-head scale 1/sqrt(d/heads), concatenated heads, output projection.
// Built from taped primitives, so gradients come from composition.
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                    const Tensor<Scalar>& v, const AttentionParams<Scalar>& p,
                                    int heads) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw DimensionError("attention: want 2-d token sequences");
    const int d = q.dim(1);
    if (k.dim(1) != d || v.dim(1) != d)
        throw DimensionError("attention: width mismatch q" + shape_str(q.shape()) + " k" +
                             shape_str(k.shape()) + " v" + shape_str(v.shape()));
    if (k.dim(0) != v.dim(0)) throw DimensionError("attention: key/value row counts differ");
    if (heads < 1 || d % heads != 0)
        throw ConfigError("attention: width " + std::to_string(d) + " not divisible by heads " +
                          std::to_string(heads));
    const int dh = d / heads;
    const Scalar scl = Scalar(1) / Scalar(std::sqrt(static_cast<double>(dh)));

    Tensor<Scalar> Q = linear(q, p.wq, p.bq);
    Tensor<Scalar> K = linear(k, p.wk, p.bk);
    Tensor<Scalar> V = linear(v, p.wv, p.bv);

    std::vector<Tensor<Scalar>> head_out;
    head_out.reserve(static_cast<std::size_t>(heads));
    for (int hI = 0; hI < heads; ++hI) {
        Tensor<Scalar> qh = slice_cols(Q, hI * dh, (hI + 1) * dh);
        Tensor<Scalar> kh = slice_cols(K, hI * dh, (hI + 1) * dh);
        Tensor<Scalar> vh = slice_cols(V, hI * dh, (hI + 1) * dh);
        Tensor<Scalar> scores = scale(matmul(qh, transpose(kh)), scl);
        Tensor<Scalar> attn = softmax(scores, 1);
        head_out.push_back(matmul(attn, vh));
    }
    return linear(concat_cols(head_out), p.wo, p.bo);
}

}  // namespace dgseg
