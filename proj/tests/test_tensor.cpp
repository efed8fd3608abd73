#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dgseg/grad_check.hpp"
#include "dgseg/ops.hpp"
#include "dgseg/tensor.hpp"
#include "helpers.hpp"

using dgseg::Shape;
using dgseg::Tensor;
using testutil::max_abs_diff;
using testutil::naive_matmul;
using testutil::random_tensor;

TEST_CASE("tensor shape/value invariants") {
    Tensor<double> t(Shape{2, 3}, 1.5);
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), dgseg::DimensionError);
    CHECK_THROWS_AS(t.item(), dgseg::ContractError);
}

TEST_CASE("matmul identity, zero and oracle") {
    Tensor<double> eye(Shape{2, 2}, {1, 0, 0, 1});
    Tensor<double> b(Shape{2, 2}, {3, 4, 5, 6});
    auto c = dgseg::matmul(eye, b);
    CHECK(max_abs_diff(c, b) == 0.0);

    Tensor<double> z(Shape{2, 2}, 0.0);
    auto cz = dgseg::matmul(z, b);
    for (double v : cz.data()) CHECK(v == 0.0);

    dgseg::Rng rng(7);
    auto a = random_tensor<double>({4, 5}, rng);
    auto d = random_tensor<double>({5, 3}, rng);
    CHECK(max_abs_diff(dgseg::matmul(a, d), naive_matmul(a, d)) < 1e-12);

    CHECK_THROWS_AS(dgseg::matmul(a, a), dgseg::DimensionError);
}

TEST_CASE("backward populates every reachable leaf") {
    Tensor<double> a(Shape{3}, {1, 2, 3}, true);
    Tensor<double> b(Shape{3}, {4, 5, 6}, true);
    auto loss = dgseg::sum(dgseg::mul(a, b));
    loss.backward();
    REQUIRE(a.has_grad());
    REQUIRE(b.has_grad());
    CHECK(a.grad() == std::vector<double>{4, 5, 6});
    CHECK(b.grad() == std::vector<double>{1, 2, 3});
    CHECK(a.grad().size() == a.data().size());
}

TEST_CASE("gradient accumulates across fan-out") {
    Tensor<double> a(Shape{2}, {1.0, -2.0}, true);
    auto y = dgseg::add(dgseg::scale(a, 2.0), a);  // y = 3a
    dgseg::sum(y).backward();
    CHECK(a.grad() == std::vector<double>{3, 3});
}

TEST_CASE("backward requires scalar root") {
    Tensor<double> a(Shape{2}, {1, 2}, true);
    auto y = dgseg::scale(a, 2.0);
    CHECK_THROWS_AS(y.backward(), dgseg::ContractError);
}

TEST_CASE("grad_check on sum of squares") {
    Tensor<double> x(Shape{3}, {1, 2, 3});
    auto f = [](const Tensor<double>& t) { return dgseg::sum(dgseg::square(t)); };
    // Analytic gradient is [2, 4, 6].
    Tensor<double> probe = x.detach(true);
    auto y = f(probe);
    y.backward();
    CHECK(probe.grad() == std::vector<double>{2, 4, 6});
    CHECK(dgseg::grad_check<double>(f, x, 1e-5) < 1e-7);
}

TEST_CASE("grad_check rejects non-scalar objective") {
    Tensor<double> x(Shape{3}, {1, 2, 3});
    auto f = [](const Tensor<double>& t) { return dgseg::scale(t, 2.0); };
    CHECK_THROWS_AS(dgseg::grad_check<double>(f, x, 1e-5), dgseg::ContractError);
}

TEST_CASE("elementwise and reduction gradients pass finite differences") {
    dgseg::Rng rng(11);
    auto x = random_tensor<double>({4, 3}, rng, 0.3, 2.0);
    CHECK(dgseg::grad_check<double>(
              [](const Tensor<double>& t) { return dgseg::mean(dgseg::log(t)); }, x, 1e-5) < 1e-7);
    CHECK(dgseg::grad_check<double>(
              [](const Tensor<double>& t) { return dgseg::sum(dgseg::exp(t)); }, x, 1e-5) < 1e-7);
    auto y = random_tensor<double>({4, 3}, rng, -2.0, 2.0);
    CHECK(dgseg::grad_check<double>(
              [&](const Tensor<double>& t) { return dgseg::mean(dgseg::mul(t, y)); }, x, 1e-5) < 1e-7);
}

TEST_CASE("layout ops round-trip and pass gradients through") {
    dgseg::Rng rng(3);
    auto tokens = random_tensor<double>({6, 4}, rng);
    auto map = dgseg::tokens_to_map(tokens, 2, 3);
    CHECK(map.shape() == Shape{4, 2, 3});
    auto back = dgseg::map_to_tokens(map);
    CHECK(max_abs_diff(back, tokens) == 0.0);

    CHECK(dgseg::grad_check<double>(
              [](const Tensor<double>& t) {
                  return dgseg::sum(dgseg::square(dgseg::map_to_tokens(dgseg::tokens_to_map(t, 2, 3))));
              },
              tokens, 1e-5) < 1e-7);

    auto sliced = dgseg::slice_cols(tokens, 1, 3);
    CHECK(sliced.shape() == Shape{6, 2});
    auto gathered = dgseg::concat_cols<double>({dgseg::slice_cols(tokens, 0, 1), sliced,
                                                dgseg::slice_cols(tokens, 3, 4)});
    CHECK(max_abs_diff(gathered, tokens) == 0.0);

    auto planes = dgseg::slice_channel(map, 2);
    CHECK(planes.shape() == Shape{2, 3});
    CHECK(dgseg::grad_check<double>(
              [](const Tensor<double>& t) {
                  auto m = dgseg::tokens_to_map(t, 2, 3);
                  return dgseg::sum(dgseg::square(dgseg::slice_channel(m, 1)));
              },
              tokens, 1e-5) < 1e-7);
}

TEST_CASE("constant subgraphs carry no tape") {
    Tensor<double> a(Shape{2}, {1, 2}, false);
    auto y = dgseg::scale(a, 3.0);
    CHECK_FALSE(y.requires_grad());
}
