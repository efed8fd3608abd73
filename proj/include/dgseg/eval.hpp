#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgseg/data.hpp"
#include "dgseg/labels.hpp"
#include "dgseg/model.hpp"

namespace dgseg {

// Rows are ground truth, columns prediction; pixels whose label equals the
// ignore index are counted separately. Partial matrices from parallel workers
// merge associatively and commutatively.
struct ConfusionMatrix {
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;
    std::int64_t ignored = 0;

    explicit ConfusionMatrix(int k) { counts = decltype(counts)::Zero(k, k); }

    int num_classes() const { return static_cast<int>(counts.rows()); }

    std::int64_t total_counted() const { return counts.sum(); }

    void merge(const ConfusionMatrix& other) {
        if (other.num_classes() != num_classes())
            throw EvalError("confusion matrix merge: class counts differ");
        counts += other.counts;
        ignored += other.ignored;
    }
};

inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& label,
                       int ignore_index = kIgnoreIndex) {
    if (pred.rows() != label.rows() || pred.cols() != label.cols())
        throw DimensionError("accumulate: prediction/label shapes differ");
    const int k = cm.num_classes();
    for (int y = 0; y < label.rows(); ++y)
        for (int x = 0; x < label.cols(); ++x) {
            const int t = label(y, x);
            if (t == ignore_index) {
                ++cm.ignored;
                continue;
            }
            const int p = pred(y, x);
            if (t < 0 || t >= k)
                throw DataError("accumulate: label class " + std::to_string(t) + " outside [0," +
                                std::to_string(k) + ")");
            if (p < 0 || p >= k)
                throw DataError("accumulate: predicted class " + std::to_string(p) + " outside [0," +
                                std::to_string(k) + ")");
            ++cm.counts(t, p);
        }
}

struct IouReport {
    std::vector<double> per_class;  // NaN for excluded classes
    std::vector<bool> included;
    double miou = 0.0;
};

// IoU_k = diag_k / (row_k + col_k - diag_k); zero-denominator classes are
// excluded from the unweighted mean.
inline IouReport miou(const ConfusionMatrix& cm) {
    const int k = cm.num_classes();
    IouReport r;
    r.per_class.assign(static_cast<std::size_t>(k), std::numeric_limits<double>::quiet_NaN());
    r.included.assign(static_cast<std::size_t>(k), false);
    double acc = 0.0;
    int n = 0;
    for (int c = 0; c < k; ++c) {
        const std::int64_t diag = cm.counts(c, c);
        const std::int64_t denom = cm.counts.row(c).sum() + cm.counts.col(c).sum() - diag;
        if (denom == 0) continue;
        const double iou = static_cast<double>(diag) / static_cast<double>(denom);
        r.per_class[static_cast<std::size_t>(c)] = iou;
        r.included[static_cast<std::size_t>(c)] = true;
        acc += iou;
        ++n;
    }
    if (n == 0) throw EvalError("miou: every class has an empty union");
    r.miou = acc / n;
    return r;
}

// ---------------------------------------------------------------------------
// whole-tile inference evaluation
// ---------------------------------------------------------------------------

template <typename Scalar>
LabelMap predict_labels(const Tensor<Scalar>& image, const ModelBundle<Scalar>& m) {
    Tensor<Scalar> logits = seg_forward<Scalar>(image, m, 0);
    const int k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    LabelMap pred(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::int64_t p = static_cast<std::int64_t>(y) * w + x;
            int arg = 0;
            Scalar best = logits.data()[static_cast<std::size_t>(p)];
            for (int c = 1; c < k; ++c) {
                const Scalar v = logits.data()[static_cast<std::size_t>(c * hw + p)];
                if (v > best) {
                    best = v;
                    arg = c;
                }
            }
            pred(y, x) = arg;
        }
    return pred;
}

struct EvalResult {
    ConfusionMatrix cm{1};
    IouReport iou;
    std::int64_t samples = 0;
};

template <typename Scalar>
EvalResult evaluate(const ModelBundle<Scalar>& m, const std::vector<SegSample<Scalar>>& dataset,
                    int ignore_index = kIgnoreIndex) {
    if (dataset.empty()) throw EvalError("evaluate: empty dataset");
    EvalResult r;
    r.cm = ConfusionMatrix(m.cfg.num_classes);
    for (const auto& s : dataset) {
        accumulate(r.cm, predict_labels(s.image, m), s.label, ignore_index);
        ++r.samples;
    }
    r.iou = miou(r.cm);
    return r;
}

inline std::string render_iou_table(const IouReport& r, const std::vector<std::string>& class_names = {}) {
    std::ostringstream os;
    os << std::left << std::setw(20) << "class" << std::right << std::setw(10) << "IoU" << "\n";
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        std::string name = c < class_names.size() ? class_names[c] : ("class" + std::to_string(c));
        os << std::left << std::setw(20) << name << std::right << std::setw(10);
        if (r.included[c])
            os << std::fixed << std::setprecision(4) << r.per_class[c];
        else
            os << "n/a";
        os << "\n";
    }
    os << std::left << std::setw(20) << "mIoU" << std::right << std::setw(10) << std::fixed
       << std::setprecision(4) << r.miou << "\n";
    return os.str();
}

inline nlohmann::json iou_record(const IouReport& r) {
    nlohmann::json j;
    j["miou"] = r.miou;
    auto arr = nlohmann::json::array();
    for (std::size_t c = 0; c < r.per_class.size(); ++c)
        arr.push_back(r.included[c] ? nlohmann::json(r.per_class[c]) : nlohmann::json(nullptr));
    j["per_class"] = arr;
    return j;
}

// ---------------------------------------------------------------------------
// ablation report
// ---------------------------------------------------------------------------

struct RunLog {
    std::string name;
    std::map<std::string, double> miou_by_domain;  // mIoU in percent points
};

struct AblationRow {
    std::string name;
    std::vector<double> per_domain;
    double average = 0.0;
    double delta_vs_baseline = 0.0;
};

struct AblationTable {
    std::vector<std::string> domains;
    std::vector<AblationRow> rows;
    std::size_t baseline_row = 0;
};

// Rows = configurations, columns = domains + average, deltas against the
// designated baseline row.
inline AblationTable ablation_report(const std::vector<RunLog>& runs, const std::string& baseline = "") {
    if (runs.size() < 2) throw EvalError("ablation_report: need at least 2 completed runs");
    AblationTable t;
    for (const auto& [dom, v] : runs.front().miou_by_domain) t.domains.push_back(dom);
    if (t.domains.empty()) throw EvalError("ablation_report: first run has no domain metrics");
    for (const auto& run : runs) {
        if (run.miou_by_domain.size() != t.domains.size())
            throw EvalError("ablation_report: run '" + run.name + "' covers a different domain set");
        for (const auto& dom : t.domains)
            if (!run.miou_by_domain.count(dom))
                throw EvalError("ablation_report: run '" + run.name + "' is missing domain '" + dom + "'");
    }

    t.baseline_row = 0;
    if (!baseline.empty()) {
        bool found = false;
        for (std::size_t i = 0; i < runs.size(); ++i)
            if (runs[i].name == baseline) {
                t.baseline_row = i;
                found = true;
            }
        if (!found) throw EvalError("ablation_report: no run named '" + baseline + "'");
    }

    for (const auto& run : runs) {
        AblationRow row;
        row.name = run.name;
        double acc = 0.0;
        for (const auto& dom : t.domains) {
            const double v = run.miou_by_domain.at(dom);
            row.per_domain.push_back(v);
            acc += v;
        }
        row.average = acc / static_cast<double>(t.domains.size());
        t.rows.push_back(std::move(row));
    }
    const double base_avg = t.rows[t.baseline_row].average;
    for (auto& row : t.rows) row.delta_vs_baseline = row.average - base_avg;
    return t;
}

inline std::string render_ablation_table(const AblationTable& t) {
    std::ostringstream os;
    os << std::left << std::setw(28) << "setting";
    for (const auto& d : t.domains) os << std::right << std::setw(10) << d;
    os << std::right << std::setw(10) << "avg" << std::setw(10) << "delta" << "\n";
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& r = t.rows[i];
        os << std::left << std::setw(28) << (i == t.baseline_row ? r.name + " *" : r.name);
        os << std::fixed << std::setprecision(2);
        for (double v : r.per_domain) os << std::right << std::setw(10) << v;
        os << std::right << std::setw(10) << r.average;
        std::ostringstream d;
        d << std::showpos << std::fixed << std::setprecision(2) << r.delta_vs_baseline;
        os << std::setw(10) << d.str() << "\n";
    }
    return os.str();
}

inline nlohmann::json ablation_record(const AblationTable& t) {
    nlohmann::json j;
    j["domains"] = t.domains;
    j["baseline"] = t.rows[t.baseline_row].name;
    auto rows = nlohmann::json::array();
    for (const auto& r : t.rows)
        rows.push_back({{"name", r.name},
                        {"per_domain", r.per_domain},
                        {"average", r.average},
                        {"delta", r.delta_vs_baseline}});
    j["rows"] = rows;
    return j;
}

}  // namespace dgseg
