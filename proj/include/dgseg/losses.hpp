#pragma once

#include <memory>
#include <optional>
#include <string>

#include "dgseg/labels.hpp"
#include "dgseg/ops.hpp"
#include "dgseg/style.hpp"
#include "dgseg/tensor.hpp"

namespace dgseg {

enum class Norm { L1, L2 };

inline Norm parse_norm(const std::string& s) {
    if (s == "l1") return Norm::L1;
    if (s == "l2") return Norm::L2;
    throw ConfigError("unknown norm '" + s + "', want l1 or l2");
}

inline const char* norm_name(Norm n) { return n == Norm::L1 ? "l1" : "l2"; }

// Per-step loss record. total is rebuilt from the stored components, so the
// arithmetic invariants hold by construction; u = 0 forces l_delta = 0.
struct LossReport {
    double l_seg = 0.0;
    double l_mim = 0.0;
    double l_delta = 0.0;
    double total = 0.0;
    int u = 0;
};

inline LossReport compose_total(int u, double l_seg, double l_mim, double l_delta) {
    if (u != 0 && u != 1) throw ContractError("compose_total: gate must be 0 or 1");
    LossReport r;
    r.u = u;
    r.l_seg = l_seg;
    r.l_mim = l_mim;
    r.l_delta = (u == 1) ? l_delta : 0.0;
    r.total = r.l_seg + r.l_mim + r.l_delta;
    return r;
}

// ---------------------------------------------------------------------------
// cross entropy (fused op on class-major logits)
// ---------------------------------------------------------------------------

// Mean pixel cross entropy of softmax(logits) over non-ignored pixels.
// logits: (K, H, W); labels: H x W with values in [0, K) or ignore_index.
template <typename Scalar>
Tensor<Scalar> cross_entropy_map(const Tensor<Scalar>& logits, const LabelMap& labels,
                                 int ignore_index = kIgnoreIndex) {
    if (logits.ndim() != 3)
        throw DimensionError("cross_entropy_map: want (K,H,W) logits, got " + shape_str(logits.shape()));
    const int k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    if (labels.rows() != h || labels.cols() != w)
        throw DimensionError("cross_entropy_map: labels " + std::to_string(labels.rows()) + "x" +
                             std::to_string(labels.cols()) + " for logits " + shape_str(logits.shape()));
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;

    auto probs = std::make_shared<std::vector<Scalar>>(logits.data().size());
    std::int64_t valid = 0;
    double loss = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int lbl = labels(y, x);
            const std::int64_t p = static_cast<std::int64_t>(y) * w + x;
            if (lbl == ignore_index) continue;
            if (lbl < 0 || lbl >= k)
                throw DataError("label value " + std::to_string(lbl) + " outside [0," + std::to_string(k) +
                                ") at pixel (" + std::to_string(y) + "," + std::to_string(x) + ")");
            ++valid;
            Scalar mx = logits.data()[static_cast<std::size_t>(p)];
            for (int c = 1; c < k; ++c)
                mx = std::max(mx, logits.data()[static_cast<std::size_t>(c * hw + p)]);
            double denom = 0.0;
            for (int c = 0; c < k; ++c)
                denom += std::exp(static_cast<double>(logits.data()[static_cast<std::size_t>(c * hw + p)] - mx));
            const double lse = std::log(denom) + static_cast<double>(mx);
            for (int c = 0; c < k; ++c)
                (*probs)[static_cast<std::size_t>(c * hw + p)] = static_cast<Scalar>(
                    std::exp(static_cast<double>(logits.data()[static_cast<std::size_t>(c * hw + p)]) - lse));
            loss += lse - static_cast<double>(logits.data()[static_cast<std::size_t>(lbl * hw + p)]);
        }
    if (valid > 0) loss /= static_cast<double>(valid);

    auto ln = logits.node();
    auto lbl_copy = std::make_shared<LabelMap>(labels);
    return detail::make_op<Scalar>(Shape{1}, std::vector<Scalar>{static_cast<Scalar>(loss)}, {ln},
        [ln, probs, lbl_copy, k, h, w, hw, valid, ignore_index](detail::TensorNode<Scalar>& o) {
            if (valid == 0) return;
            ln->ensure_grad();
            const Scalar g = o.grad[0] / static_cast<Scalar>(valid);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const int lbl = (*lbl_copy)(y, x);
                    if (lbl == ignore_index) continue;
                    const std::int64_t p = static_cast<std::int64_t>(y) * w + x;
                    for (int c = 0; c < k; ++c) {
                        const std::size_t idx = static_cast<std::size_t>(c * hw + p);
                        ln->grad[idx] += g * ((*probs)[idx] - (c == lbl ? Scalar(1) : Scalar(0)));
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// soft dice
// ---------------------------------------------------------------------------

// Macro-averaged soft Dice loss on softmax probabilities, smoothing 1.0.
// A class enters the average when it appears in the labels or in the argmax
// prediction at a non-ignored pixel; classes absent from both are skipped.
template <typename Scalar>
Tensor<Scalar> dice_loss_map(const Tensor<Scalar>& logits, const LabelMap& labels,
                             int ignore_index = kIgnoreIndex, Scalar smooth = Scalar(1)) {
    const int k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    if (labels.rows() != h || labels.cols() != w)
        throw DimensionError("dice_loss_map: label/logit spatial mismatch");
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;

    std::vector<bool> present(static_cast<std::size_t>(k), false);
    Tensor<Scalar> valid(Shape{h, w}, Scalar(0));
    std::int64_t nvalid = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int lbl = labels(y, x);
            if (lbl == ignore_index) continue;
            if (lbl < 0 || lbl >= k)
                throw DataError("label value " + std::to_string(lbl) + " outside [0," + std::to_string(k) + ")");
            valid.data()[static_cast<std::size_t>(y) * w + x] = Scalar(1);
            present[static_cast<std::size_t>(lbl)] = true;
            ++nvalid;
            int arg = 0;
            Scalar best = logits.data()[static_cast<std::size_t>(y) * w + x];
            for (int c = 1; c < k; ++c) {
                const Scalar v = logits.data()[static_cast<std::size_t>(c * hw + y * w + x)];
                if (v > best) {
                    best = v;
                    arg = c;
                }
            }
            present[static_cast<std::size_t>(arg)] = true;
        }
    if (nvalid == 0) return Tensor<Scalar>::scalar(Scalar(0));

    Tensor<Scalar> probs = softmax(logits, 0);
    Tensor<Scalar> acc = Tensor<Scalar>::scalar(Scalar(0));
    int included = 0;
    for (int c = 0; c < k; ++c) {
        if (!present[static_cast<std::size_t>(c)]) continue;
        ++included;
        Tensor<Scalar> yk(Shape{h, w}, Scalar(0));
        Scalar ysum = Scalar(0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (labels(y, x) == c) {
                    yk.data()[static_cast<std::size_t>(y) * w + x] = Scalar(1);
                    ysum += Scalar(1);
                }
        Tensor<Scalar> pk = mul(slice_channel(probs, c), valid);
        Tensor<Scalar> inter = sum(mul(pk, yk));
        Tensor<Scalar> denom = add_scalar(sum(pk), ysum);
        Tensor<Scalar> dice = div(add_scalar(scale(inter, Scalar(2)), smooth), add_scalar(denom, smooth));
        acc = add(acc, sub(Tensor<Scalar>::scalar(Scalar(1)), dice));
    }
    return scale(acc, Scalar(1) / Scalar(included));
}

// Cross entropy + soft Dice, weight 1.0 each.
template <typename Scalar>
Tensor<Scalar> seg_loss(const Tensor<Scalar>& logits, const LabelMap& labels,
                        int ignore_index = kIgnoreIndex) {
    return add(cross_entropy_map(logits, labels, ignore_index), dice_loss_map(logits, labels, ignore_index));
}

// ---------------------------------------------------------------------------
// reconstruction / metric losses
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> pixel_norm_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, Norm norm) {
    if (pred.shape() != target.shape())
        throw DimensionError("pixel loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    Tensor<Scalar> d = sub(pred, target);
    return norm == Norm::L1 ? mean(abs(d)) : mean(square(d));
}

// Reconstruction loss: masked branch always against the original image, plus
// the styled branch when the gate selected it.
template <typename Scalar>
Tensor<Scalar> mim_loss(const Tensor<Scalar>& pred_m, const Tensor<Scalar>& target_x,
                        const std::optional<Tensor<Scalar>>& pred_s,
                        const std::optional<Tensor<Scalar>>& target_s, Norm norm) {
    if (pred_s.has_value() != target_s.has_value())
        throw ContractError("mim_loss: pred_s and target_s must both be present or both absent");
    Tensor<Scalar> loss = pixel_norm_loss(pred_m, target_x, norm);
    if (pred_s) loss = add(loss, pixel_norm_loss(*pred_s, *target_s, norm));
    return loss;
}

// Mean norm restricted to pixels whose full-resolution mask value is 0 (the
// blanked-out region); 0 when no pixel qualifies.
template <typename Scalar>
Tensor<Scalar> masked_region_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target,
                                  const MaskGrid& full, Norm norm) {
    if (pred.shape() != target.shape())
        throw DimensionError("masked loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    const int c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
    if (full.rows() != h || full.cols() != w) throw DimensionError("masked loss: mask/image mismatch");
    Tensor<Scalar> weights(pred.shape(), Scalar(0));
    std::int64_t n = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (full(y, x) == 0) {
                for (int ch = 0; ch < c; ++ch)
                    weights.data()[(static_cast<std::size_t>(ch) * h + y) * w + x] = Scalar(1);
                n += c;
            }
    if (n == 0) return Tensor<Scalar>::scalar(Scalar(0));
    Tensor<Scalar> d = sub(pred, target);
    Tensor<Scalar> e = norm == Norm::L1 ? abs(d) : square(d);
    return scale(sum(mul(e, weights)), Scalar(1) / Scalar(n));
}

// Metric loss between the two reconstructions.
template <typename Scalar>
Tensor<Scalar> delta_loss(const Tensor<Scalar>& pred_m, const Tensor<Scalar>& pred_s, Norm norm) {
    return pixel_norm_loss(pred_m, pred_s, norm);
}

}  // namespace dgseg
