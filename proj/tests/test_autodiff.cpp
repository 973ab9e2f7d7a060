#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "tsformer/autodiff.hpp"
#include "tsformer/error.hpp"

using namespace tsf;
using ad::Tensor;
using T64 = Tensor<double>;

namespace {

T64 param(ad::Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  return T64::parameter(shape, test::random_vector(ad::numel(shape), seed, lo, hi));
}

}  // namespace

TEST_CASE("matmul forward and shape") {
  const auto a = T64::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto b = T64::constant({3, 2}, {7, 8, 9, 10, 11, 12});
  const auto c = ad::matmul(a, b);
  CHECK(c.shape() == ad::Shape{2, 2});
  CHECK(std::vector<double>(c.values().begin(), c.values().end()) == std::vector<double>{58, 64, 139, 154});
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
}

TEST_CASE("elementwise ops require identical shapes") {
  const auto a = T64::constant({2, 3}, 1.0);
  const auto b = T64::constant({3, 2}, 1.0);
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::mul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::reshape(a, {4}), ShapeError);
  CHECK_THROWS_AS(ad::diag(a), ShapeError);
}

TEST_CASE("reverse-mode gradients match central differences for each primitive") {
  const auto a = param({3, 4}, 1), b = param({4, 2}, 2), c = param({3, 4}, 3);
  const auto pos = param({3, 4}, 4, 0.5, 2.0);
  const auto bias = param({4}, 5);
  const auto sq = param({4, 4}, 6);
  const auto gain = param({4}, 7, 0.5, 1.5);
  const auto k = param({2, 2, 3}, 8);
  const auto u = param({5}, 9), v = param({5}, 10);

  SUBCASE("matmul") { CHECK(test::gradcheck({a, b}, [&] { return ad::sum(ad::gelu(ad::matmul(a, b))); }) <= 1e-6); }
  SUBCASE("add sub mul div") {
    CHECK(test::gradcheck({a, c, pos}, [&] {
            return ad::sum(ad::div(ad::mul(ad::add(a, c), ad::sub(a, c)), pos));
          }) <= 1e-6);
  }
  SUBCASE("scalar ops and mask") {
    const std::vector<double> mask{1, 0, 2, 0, 1, 1, 0, 3, 1, 0, 0, 1};
    CHECK(test::gradcheck({a}, [&] {
            return ad::mean(ad::mask_mul(ad::add_scalar(ad::mul_scalar(ad::mul(a, a), 1.5), 0.2),
                                         std::span<const double>(mask)));
          }) <= 1e-6);
  }
  SUBCASE("exp log") { CHECK(test::gradcheck({pos}, [&] { return ad::sum(ad::log(ad::exp(ad::mul(pos, pos)))); }) <= 1e-6); }
  SUBCASE("row bias, row sum, diag, transpose") {
    CHECK(test::gradcheck({sq, bias}, [&] {
            const auto x = ad::add_rowwise(sq, bias);
            return ad::sum(ad::mul(ad::row_sum(ad::mul(x, ad::transpose(x))), ad::exp(ad::diag(x))));
          }) <= 1e-6);
  }
  SUBCASE("slicing and concatenation") {
    CHECK(test::gradcheck({a, c}, [&] {
            const std::vector<T64> cols{ad::slice_cols(a, 1, 3), c};
            const std::vector<T64> rows{ad::slice_rows(a, 0, 2), ad::slice_rows(c, 1, 3)};
            const auto x = ad::concat_last_dim<double>(cols);
            const auto y = ad::concat_rows<double>(rows);
            return ad::add(ad::sum(ad::mul(x, x)), ad::sum(ad::gelu(ad::reshape(y, {2, 8}))));
          }) <= 1e-6);
  }
  SUBCASE("softmax and log-softmax") {
    const std::vector<double> w{0.3, -1.0, 2.0, 0.5, 1, 1, -2, 0.1, 0.7, 0.2, -0.4, 1.1};
    CHECK(test::gradcheck({a}, [&] {
            return ad::add(ad::sum(ad::mask_mul(ad::softmax_rows(a), std::span<const double>(w))),
                           ad::sum(ad::mask_mul(ad::log_softmax_rows(a), std::span<const double>(w))));
          }) <= 1e-6);
  }
  SUBCASE("layernorm") {
    const std::vector<double> w = test::random_vector(12, 99);
    CHECK(test::gradcheck({a, gain, bias}, [&] {
            return ad::sum(ad::mask_mul(ad::layernorm(a, gain, bias, 1e-5), std::span<const double>(w)));
          }) <= 1e-6);
  }
  SUBCASE("strided valid convolution") {
    CHECK(test::gradcheck({a, k}, [&] { return ad::sum(ad::gelu(ad::conv2d_valid(a, k, 1, 1))); }) <= 1e-6);
    CHECK(test::gradcheck({a, k}, [&] { return ad::sum(ad::gelu(ad::conv2d_valid(a, k, 1, 2))); }) <= 1e-6);
  }
  SUBCASE("cosine similarity and row normalization") {
    CHECK(test::gradcheck({u, v}, [&] { return ad::cosine_similarity(u, v); }) <= 1e-6);
    const std::vector<double> w = test::random_vector(12, 77);
    CHECK(test::gradcheck({a}, [&] {
            return ad::sum(ad::mask_mul(ad::normalize_rows(a), std::span<const double>(w)));
          }) <= 1e-6);
  }
}

TEST_CASE("softmax rows sum to one and survive large inputs") {
  const auto x = T64::constant({2, 3}, {1000, 1001, 1002, -5, 0, 5});
  const auto s = ad::softmax_rows(x);
  for (std::size_t r = 0; r < 2; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 3; ++c) total += s.at({r, c});
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto ls = ad::log_softmax_rows(x);
  CHECK(ls.at({0, 2}) == doctest::Approx(-std::log(1 + std::exp(-1.0) + std::exp(-2.0))));
}

TEST_CASE("layernorm output has zero mean and unit variance per row") {
  const auto x = T64::constant({3, 6}, test::random_vector(18, 2, -4, 4));
  const auto y = ad::layernorm(x, T64::constant({6}, 1.0), T64::constant({6}, 0.0), 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 6; ++c) m += y.at({r, c});
    m /= 6;
    for (std::size_t c = 0; c < 6; ++c) v += std::pow(y.at({r, c}) - m, 2);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 6 == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("conv output geometry") {
  const auto x = T64::constant({16, 8}, 1.0);
  const auto k = T64::constant({3, 4, 8}, 1.0);
  const auto y = ad::conv2d_valid(x, k, 1, 8);
  CHECK(y.shape() == ad::Shape{3, 13, 1});
  CHECK(y.at({2, 5, 0}) == 32.0);
  CHECK_THROWS_AS(ad::conv2d_valid(x, T64::constant({1, 17, 1}, 1.0), 1, 1), ShapeError);
}

TEST_CASE("zero-norm vectors are rejected") {
  const auto z = T64::constant({3}, 0.0);
  CHECK_THROWS_AS(ad::cosine_similarity(z, T64::constant({3}, 1.0)), NumericalError);
  CHECK_THROWS_AS(ad::normalize_rows(T64::constant({2, 3}, {1, 0, 0, 0, 0, 0})), NumericalError);
}

TEST_CASE("gradients accumulate across uses of a leaf") {
  const auto x = T64::parameter({2}, {3.0, -1.0});
  ad::backward(ad::sum(ad::add(ad::mul(x, x), x)));
  CHECK(x.grad() == std::vector<double>{7.0, -1.0});
}

TEST_CASE("backward twice on one graph throws") {
  const auto x = T64::parameter({2}, {1.0, 2.0});
  const auto loss = ad::sum(ad::mul(x, x));
  ad::backward(loss);
  CHECK_THROWS_AS(ad::backward(loss), Error);
  // a fresh graph over the same leaf is fine
  x.node()->grad.clear();
  ad::backward(ad::sum(ad::mul(x, x)));
  CHECK(x.grad() == std::vector<double>{2.0, 4.0});
}

TEST_CASE("reusing a released intermediate throws") {
  const auto x = T64::parameter({2}, {1.0, 2.0});
  const auto h = ad::exp(x);
  ad::backward(ad::sum(h));
  CHECK_THROWS_AS(ad::backward(ad::sum(ad::mul(h, h))), Error);
}

TEST_CASE("backward needs a scalar that depends on a parameter") {
  const auto x = T64::parameter({2}, {1.0, 2.0});
  CHECK_THROWS_AS(ad::backward(ad::mul(x, x)), ShapeError);
  CHECK_THROWS_AS(ad::backward(ad::sum(T64::constant({2}, 1.0))), Error);
}

TEST_CASE("constants never receive gradients") {
  const auto x = T64::parameter({2}, {1.0, 2.0});
  const auto c = T64::constant({2}, {5.0, 6.0});
  ad::backward(ad::sum(ad::mul(x, c)));
  CHECK(!c.has_grad());
  CHECK(x.grad() == std::vector<double>{5.0, 6.0});
  CHECK_THROWS_AS(ad::mul(x, c).leaf_values(), Error);
}

TEST_CASE("seeded backward over several outputs") {
  const auto x = T64::parameter({2}, {1.0, 2.0});
  const auto y1 = ad::mul(x, x);
  const auto y2 = ad::mul_scalar(x, 3.0);
  const std::vector<std::pair<T64, std::vector<double>>> seeds{{y1, {1.0, 0.0}}, {y2, {0.0, 2.0}}};
  ad::backward<double>(seeds);
  CHECK(x.grad() == std::vector<double>{2.0, 6.0});
}

TEST_CASE("single and double precision agree on a small network") {
  const auto w = test::random_vector(12, 5);
  const auto xin = test::random_vector(6, 6);
  auto run = [&]<typename T>(T) {
    const auto W = Tensor<T>::parameter({3, 4}, std::vector<T>(w.begin(), w.end()));
    const auto X = Tensor<T>::constant({2, 3}, std::vector<T>(xin.begin(), xin.end()));
    ad::backward(ad::sum(ad::softmax_rows(ad::matmul(X, W))));
    auto g = W.grad();
    return std::vector<double>(g.begin(), g.end());
  };
  const auto g64 = run(0.0);
  const auto g32 = run(0.0f);
  CHECK(test::max_abs_diff(g64, g32) <= 1e-5);
}
