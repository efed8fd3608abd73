#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dgseg/eval.hpp"
#include "helpers.hpp"

using dgseg::ConfusionMatrix;
using dgseg::LabelMap;

namespace {

LabelMap random_map(int h, int w, int k, dgseg::Rng& rng, double ignore_frac = 0.0) {
    LabelMap m(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            m(y, x) = rng.bernoulli(ignore_frac) ? 255 : static_cast<int>(rng.index(k));
    return m;
}

}  // namespace

TEST_CASE("accumulate: perfect prediction hits only the diagonal") {
    dgseg::Rng rng(1);
    auto label = random_map(8, 8, 3, rng);
    ConfusionMatrix cm(3);
    dgseg::accumulate(cm, label, label);
    CHECK(cm.counts.sum() == 64);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (i != j) CHECK(cm.counts(i, j) == 0);
}

TEST_CASE("accumulate: fully ignored input leaves counts untouched") {
    LabelMap label = LabelMap::Constant(4, 4, 255);
    LabelMap pred = LabelMap::Zero(4, 4);
    ConfusionMatrix cm(3);
    dgseg::accumulate(cm, pred, label);
    CHECK(cm.counts.sum() == 0);
    CHECK(cm.ignored == 16);
}

TEST_CASE("accumulate matches a per-pixel loop oracle and checks ranges") {
    dgseg::Rng rng(2);
    auto label = random_map(8, 8, 4, rng, 0.2);
    auto pred = random_map(8, 8, 4, rng);
    ConfusionMatrix cm(4);
    dgseg::accumulate(cm, pred, label);

    Eigen::Matrix<std::int64_t, 4, 4> want = Eigen::Matrix<std::int64_t, 4, 4>::Zero();
    std::int64_t ignored = 0;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            if (label(y, x) == 255) {
                ++ignored;
                continue;
            }
            ++want(label(y, x), pred(y, x));
        }
    CHECK(cm.counts == want);
    CHECK(cm.ignored == ignored);
    CHECK(cm.total_counted() + cm.ignored == 64);

    LabelMap bad = label;
    bad(0, 0) = 9;
    ConfusionMatrix cm2(4);
    CHECK_THROWS_AS(dgseg::accumulate(cm2, pred, bad), dgseg::DataError);
}

TEST_CASE("accumulate is order-independent and merge is associative") {
    dgseg::Rng rng(3);
    std::vector<std::pair<LabelMap, LabelMap>> batches;
    for (int i = 0; i < 6; ++i) batches.push_back({random_map(5, 5, 3, rng), random_map(5, 5, 3, rng, 0.1)});

    ConfusionMatrix fwd(3), rev(3);
    for (const auto& [p, l] : batches) dgseg::accumulate(fwd, p, l);
    for (auto it = batches.rbegin(); it != batches.rend(); ++it) dgseg::accumulate(rev, it->first, it->second);
    CHECK(fwd.counts == rev.counts);

    ConfusionMatrix a(3), b(3), c(3);
    dgseg::accumulate(a, batches[0].first, batches[0].second);
    dgseg::accumulate(b, batches[1].first, batches[1].second);
    dgseg::accumulate(c, batches[2].first, batches[2].second);
    ConfusionMatrix ab = a;
    ab.merge(b);
    ab.merge(c);
    ConfusionMatrix bc = b;
    bc.merge(c);
    ConfusionMatrix a_bc = a;
    a_bc.merge(bc);
    CHECK(ab.counts == a_bc.counts);
    CHECK(ab.ignored == a_bc.ignored);
}

TEST_CASE("miou: perfect, complementary, and constructed 3-class cases") {
    dgseg::Rng rng(4);
    auto label = random_map(6, 6, 3, rng);
    ConfusionMatrix perfect(3);
    dgseg::accumulate(perfect, label, label);
    auto r = dgseg::miou(perfect);
    CHECK(r.miou == doctest::Approx(1.0));
    for (double v : r.per_class)
        if (!std::isnan(v)) CHECK(v == doctest::Approx(1.0));

    // Complementary constants: prediction always 1, truth always 0.
    ConfusionMatrix comp(2);
    LabelMap zeros = LabelMap::Zero(4, 4), ones = LabelMap::Constant(4, 4, 1);
    dgseg::accumulate(comp, ones, zeros);
    auto rc = dgseg::miou(comp);
    CHECK(rc.per_class[0] == doctest::Approx(0.0));
    CHECK(rc.per_class[1] == doctest::Approx(0.0));
    CHECK(rc.miou == doctest::Approx(0.0));

    // Constructed 3-class 4x4 case against set-arithmetic IoU.
    LabelMap truth(4, 4), pred(4, 4);
    truth << 0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 0, 1, 2, 0;
    pred << 0, 1, 1, 1, 0, 0, 2, 1, 2, 2, 1, 2, 0, 1, 2, 1;
    ConfusionMatrix cm(3);
    dgseg::accumulate(cm, pred, truth);
    auto rr = dgseg::miou(cm);
    for (int c = 0; c < 3; ++c) {
        std::int64_t inter = 0, uni = 0;
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                const bool in_t = truth(y, x) == c, in_p = pred(y, x) == c;
                inter += in_t && in_p;
                uni += in_t || in_p;
            }
        CHECK(rr.per_class[static_cast<std::size_t>(c)] ==
              doctest::Approx(static_cast<double>(inter) / static_cast<double>(uni)));
    }
    CHECK(rr.miou >= *std::min_element(rr.per_class.begin(), rr.per_class.end()));
    CHECK(rr.miou <= *std::max_element(rr.per_class.begin(), rr.per_class.end()));
}

TEST_CASE("miou excludes empty-union classes and rejects all-empty") {
    ConfusionMatrix cm(3);
    LabelMap truth = LabelMap::Zero(3, 3);
    LabelMap pred = LabelMap::Zero(3, 3);
    dgseg::accumulate(cm, pred, truth);
    auto r = dgseg::miou(cm);
    CHECK(r.included[0]);
    CHECK_FALSE(r.included[1]);
    CHECK_FALSE(r.included[2]);
    CHECK(r.miou == doctest::Approx(1.0));

    ConfusionMatrix empty(3);
    CHECK_THROWS_AS(dgseg::miou(empty), dgseg::EvalError);
}

TEST_CASE("miou is invariant under a consistent class relabeling") {
    dgseg::Rng rng(5);
    auto truth = random_map(8, 8, 3, rng);
    auto pred = random_map(8, 8, 3, rng);
    ConfusionMatrix cm(3);
    dgseg::accumulate(cm, pred, truth);
    auto base = dgseg::miou(cm);

    const int perm[3] = {2, 0, 1};
    LabelMap truth_p(8, 8), pred_p(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            truth_p(y, x) = perm[truth(y, x)];
            pred_p(y, x) = perm[pred(y, x)];
        }
    ConfusionMatrix cmp(3);
    dgseg::accumulate(cmp, pred_p, truth_p);
    auto permuted = dgseg::miou(cmp);
    CHECK(permuted.miou == doctest::Approx(base.miou).epsilon(1e-12));
    for (int c = 0; c < 3; ++c)
        CHECK(permuted.per_class[static_cast<std::size_t>(perm[c])] ==
              doctest::Approx(base.per_class[static_cast<std::size_t>(c)]).epsilon(1e-12));
}

TEST_CASE("constant-prediction miou equals the histogram oracle") {
    // Predicting class 0 everywhere: IoU_0 = n_0 / total, IoU_k>0 = 0.
    dgseg::Rng rng(6);
    auto truth = random_map(10, 10, 3, rng);
    LabelMap pred = LabelMap::Zero(10, 10);
    ConfusionMatrix cm(3);
    dgseg::accumulate(cm, pred, truth);
    auto r = dgseg::miou(cm);

    std::int64_t n0 = 0;
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) n0 += truth(y, x) == 0;
    const double want0 = static_cast<double>(n0) / 100.0;
    CHECK(r.per_class[0] == doctest::Approx(want0));
    double mean = want0;
    int n = 1;
    for (int c = 1; c < 3; ++c)
        if (r.included[static_cast<std::size_t>(c)]) {
            CHECK(r.per_class[static_cast<std::size_t>(c)] == doctest::Approx(0.0));
            ++n;
        }
    CHECK(r.miou == doctest::Approx(mean / n));
}

TEST_CASE("evaluate requires a non-empty dataset") {
    auto cfg = dgseg::ModelConfig{};
    cfg.num_classes = 3;
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.patch = 8;
    auto m = dgseg::build_model<float>(cfg, 1);
    std::vector<dgseg::SegSample<float>> empty;
    CHECK_THROWS_AS(dgseg::evaluate(m, empty), dgseg::EvalError);
}

TEST_CASE("ablation report: identical runs give zero deltas") {
    dgseg::RunLog a{"full", {{"B", 61.2}, {"A", 70.0}}};
    auto t = dgseg::ablation_report({a, a});
    CHECK(t.rows[0].delta_vs_baseline == doctest::Approx(0.0));
    CHECK(t.rows[1].delta_vs_baseline == doctest::Approx(0.0));
    CHECK(t.rows[0].average == doctest::Approx((61.2 + 70.0) / 2));
}

TEST_CASE("ablation report deltas equal hand-computed differences") {
    dgseg::RunLog base{"baseline", {{"A", 60.0}, {"B", 40.0}}};
    dgseg::RunLog full{"full", {{"A", 64.0}, {"B", 45.0}}};
    auto t = dgseg::ablation_report({base, full}, "baseline");
    CHECK(t.rows[1].delta_vs_baseline == doctest::Approx((64.0 + 45.0) / 2 - 50.0));
    CHECK(t.domains == std::vector<std::string>{"A", "B"});
    auto text = dgseg::render_ablation_table(t);
    CHECK(text.find("baseline *") != std::string::npos);
}

TEST_CASE("ablation report rejects mismatched domain sets and unknown baselines") {
    dgseg::RunLog a{"a", {{"A", 1.0}, {"B", 2.0}}};
    dgseg::RunLog b{"b", {{"A", 1.0}, {"C", 2.0}}};
    CHECK_THROWS_WITH_AS(dgseg::ablation_report({a, b}), doctest::Contains("missing domain 'B'"),
                         dgseg::EvalError);
    CHECK_THROWS_AS(dgseg::ablation_report({a}), dgseg::EvalError);
    dgseg::RunLog c{"c", {{"A", 1.0}, {"B", 3.0}}};
    CHECK_THROWS_AS(dgseg::ablation_report({a, c}, "nope"), dgseg::EvalError);
}
