#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "evonas/checkpoint.hpp"
#include "evonas/ops.hpp"
#include "evonas/optim.hpp"
#include "support/gradcheck.hpp"

using namespace evonas;
using evonas::testing::grad_check;
using evonas::testing::lattice_param;
using evonas::testing::random_param;
using evonas::testing::random_values;

namespace {

// Direct six-nested-loop cross-correlation.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                               std::size_t pad) {
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(co * ho * wo);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t z = 0; z < wo; ++z) {
        double acc = b[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(z * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
              acc += w[((o * ci + c) * k + ky) * k + kx] * x[(c * h + iy) * wd + ix];
            }
        out[(o * ho + y) * wo + z] = acc;
      }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d examples") {
  SUBCASE("1x1 scaling") {
    Tensor x({1, 2, 2}, 1.0);
    Tensor w({1, 1, 1, 1}, std::vector<double>{2.0});
    Tensor b({1}, 0.0);
    Tensor y = conv2d(x, w, b);
    CHECK(y.shape() == Shape{1, 2, 2});
    for (double v : y.data()) CHECK(v == 2.0);
  }
  SUBCASE("centred delta kernel is identity") {
    std::mt19937_64 rng(1);
    Tensor x({1, 5, 6}, random_values(30, rng));
    std::vector<double> k(9, 0.0);
    k[4] = 1.0;
    Tensor y = conv2d(x, Tensor({1, 1, 3, 3}, k), Tensor({1}, 0.0), 1, 1);
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
  }
  SUBCASE("matches naive summation") {
    std::mt19937_64 rng(2);
    for (std::size_t stride : {1u, 2u})
      for (std::size_t pad : {0u, 1u}) {
        // The 2x3x5x5 batch is checked one sample at a time.
        Tensor w({4, 3, 3, 3}, random_values(108, rng));
        Tensor b({4}, random_values(4, rng));
        for (int n = 0; n < 2; ++n) {
          Tensor x({3, 5, 5}, random_values(75, rng));
          CHECK(max_abs_diff(conv2d(x, w, b, stride, pad).data(), naive_conv(x, w, b, stride, pad)) < 1e-12);
        }
      }
  }
  SUBCASE("shape errors") {
    Tensor x({3, 5, 5}, 0.0);
    CHECK_THROWS_AS(conv2d(x, Tensor({4, 2, 3, 3}, 0.0), Tensor({4}, 0.0)), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor({4, 3, 2, 2}, 0.0), Tensor({4}, 0.0)), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor({4, 3, 7, 7}, 0.0), Tensor({4}, 0.0)), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor({4, 3, 3, 3}, 0.0), Tensor({3}, 0.0)), ShapeError);
    CHECK_THROWS_WITH_AS(conv2d(x, Tensor({4, 2, 3, 3}, 0.0), Tensor({4}, 0.0)),
                         doctest::Contains("C_in"), ShapeError);
  }
}

TEST_CASE("max_pool2d examples") {
  Tensor c({2, 4, 4}, 3.5);
  Tensor pooled = max_pool2d(c, 3, 1, 1);
  for (double v : pooled.data()) CHECK(v == 3.5);

  Tensor x({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor y = max_pool2d(x, 2, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y.item() == 4.0);

  std::mt19937_64 rng(3);
  Tensor r({3, 8, 8}, random_values(192, rng));
  Tensor p = max_pool2d(r, 3, 1, 1);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        double best = -1e300;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = static_cast<int>(i) + dy, xx = static_cast<int>(j) + dx;
            if (yy >= 0 && xx >= 0 && yy < 8 && xx < 8) best = std::max(best, r[(ch * 8 + yy) * 8 + xx]);
          }
        CHECK(p[(ch * 8 + i) * 8 + j] == best);
      }
  CHECK_THROWS_AS(max_pool2d(r, 9, 1, 0), ShapeError);
}

TEST_CASE("max_pool2d routes ties to the first maximum") {
  Tensor x = Tensor::parameter({1, 2, 2}, {5, 5, 5, 5});
  backward(sum(max_pool2d(x, 2, 1, 0)));
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("adaptive_avg_pool2d examples") {
  std::mt19937_64 rng(4);
  Tensor x({2, 3, 5}, random_values(30, rng));
  CHECK(max_abs_diff(adaptive_avg_pool2d(x, 3, 5).data(), x.data()) < 1e-15);
  CHECK(adaptive_avg_pool2d(Tensor({1, 2, 2}, std::vector<double>{1, 3, 5, 7}), 1, 1).item() == 4.0);

  Tensor r({1, 6, 6}, random_values(36, rng));
  Tensor y = adaptive_avg_pool2d(r, 4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const std::size_t y0 = static_cast<std::size_t>(std::floor(i * 6.0 / 4)), y1 = static_cast<std::size_t>(std::ceil((i + 1) * 6.0 / 4));
      const std::size_t x0 = static_cast<std::size_t>(std::floor(j * 6.0 / 4)), x1 = static_cast<std::size_t>(std::ceil((j + 1) * 6.0 / 4));
      double acc = 0.0;
      for (std::size_t a = y0; a < y1; ++a)
        for (std::size_t b = x0; b < x1; ++b) acc += r[a * 6 + b];
      CHECK(std::abs(y[i * 4 + j] - acc / static_cast<double>((y1 - y0) * (x1 - x0))) < 1e-12);
    }
  CHECK_THROWS_AS(adaptive_avg_pool2d(r, 7, 1), ShapeError);
  CHECK_THROWS_AS(adaptive_avg_pool2d(r, 0, 1), ShapeError);
}

TEST_CASE("dense examples") {
  std::mt19937_64 rng(5);
  Tensor x({3}, random_values(3, rng));
  Tensor eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(max_abs_diff(dense(x, eye, Tensor({3}, 0.0)).data(), x.data()) == 0.0);
  Tensor b({2}, std::vector<double>{0.5, -2});
  CHECK(max_abs_diff(dense(x, Tensor({2, 3}, 0.0), b).data(), b.data()) == 0.0);

  Tensor w({3, 4}, random_values(12, rng));
  Tensor bb({3}, random_values(3, rng));
  Tensor v({4}, random_values(4, rng));
  Tensor y = dense(v, w, bb);
  for (std::size_t i = 0; i < 3; ++i) {
    double acc = bb[i];
    for (std::size_t j = 0; j < 4; ++j) acc += w[i * 4 + j] * v[j];
    CHECK(std::abs(y[i] - acc) < 1e-12);
  }
  CHECK_THROWS_AS(dense(Tensor({5}, 0.0), w, bb), ShapeError);
}

TEST_CASE("relu and sigmoid") {
  Tensor y = relu(Tensor::vector({-2.0, 3.0}));
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 3.0);
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(1.0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));
  CHECK(sigmoid(1.0) == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(std::isfinite(sigmoid(-700.0)));
  CHECK(sigmoid(700.0) == 1.0);
  CHECK(sigmoid(-700.0) >= 0.0);
}

TEST_CASE("stats_pool examples") {
  Tensor c({2, 4}, 1.5);
  Tensor s = stats_pool(c);
  CHECK(s.shape() == Shape{4});
  CHECK(s[0] == 1.5);
  CHECK(s[2] <= 1e-5);

  Tensor two({1, 2}, std::vector<double>{1, 3});
  Tensor t = stats_pool(two);
  CHECK(t[0] == 2.0);
  CHECK(t[1] == doctest::Approx(1.0).epsilon(1e-9));

  std::mt19937_64 rng(6);
  Tensor r({5, 7}, random_values(35, rng));
  Tensor p = stats_pool(r);
  for (std::size_t d = 0; d < 5; ++d) {
    double mu = 0.0;
    for (std::size_t j = 0; j < 7; ++j) mu += r[d * 7 + j];
    mu /= 7;
    double var = 0.0;
    for (std::size_t j = 0; j < 7; ++j) var += (r[d * 7 + j] - mu) * (r[d * 7 + j] - mu);
    var /= 7;
    CHECK(std::abs(p[d] - mu) < 1e-10);
    CHECK(std::abs(p[5 + d] - std::sqrt(var + 1e-10)) < 1e-10);
  }
}

TEST_CASE("cosine examples") {
  Tensor a = Tensor::vector({1.0, 2.0, -3.0});
  CHECK(cosine(a, a).item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine(a, affine(a, -1.0)).item() == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(cosine(Tensor::vector({1, 0}), Tensor::vector({0, 4})).item() == 0.0);
  CHECK_THROWS_AS(cosine(a, Tensor({3}, 0.0)), DegenerateVectorError);
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    Tensor u = Tensor::vector(random_values(6, rng));
    const double c = cosine(u, affine(u, 3.7)).item();
    CHECK(c <= 1.0);
    CHECK(c >= -1.0);
  }
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::parameter({2, 3}, std::vector<double>(6, 0.3));
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor w = Tensor::parameter({1}, {0.0});
  Tensor one({1}, 1.0);
  backward(sigmoid(mul(w, one)));
  CHECK(w.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));

  CHECK_THROWS_AS(backward(Tensor::parameter({2}, {1, 2})), ContractError);
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("graph is topological and visits each node once") {
  Tensor x = Tensor::parameter({3}, {1, 2, 3});
  Tensor y = relu(x);
  Tensor loss = sum(add(mul(y, y), y));  // y is used three times
  Graph g = backward(loss);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(g.entries()[i].visits == 1);
    for (std::size_t in : g.entries()[i].inputs) CHECK(in < i);
  }
  CHECK(g.entries().back().kind == "sum");
  CHECK(x.grad()[1] == doctest::Approx(2 * 2 + 1));
}

TEST_CASE("gradients accumulate across uses and backward passes") {
  std::mt19937_64 rng(8);
  Tensor x = random_param({4}, rng);
  Tensor w = random_param({4}, rng);
  auto loss_a = [&] { return sum(mul(x, w)); };
  auto loss_b = [&] { return sum(sigmoid(x)); };

  backward(add(loss_a(), loss_b()));
  std::vector<double> together(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(loss_a());
  backward(loss_b());
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(together[i]).epsilon(1e-14));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::parameter({2}, {1, 2});
  NoGradGuard guard;
  Tensor y = relu(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("forward evaluation is deterministic") {
  std::mt19937_64 rng(9);
  Tensor x({2, 9, 9}, random_values(162, rng));
  Tensor w({3, 2, 5, 5}, random_values(150, rng));
  Tensor b({3}, random_values(3, rng));
  auto run = [&] { return adaptive_avg_pool2d(relu(conv2d(x, w, b, 1, 2)), 2, 3); };
  Tensor a = run(), c = run();
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == c[i]);
}

TEST_CASE("finite-difference checks for each op") {
  std::mt19937_64 rng(10);
  auto check = [&](const evonas::testing::TensorFn& f, std::vector<Tensor> in) {
    auto r = grad_check(f, std::move(in), rng);
    CHECK(r.max_rel_error < 1e-4);
  };
  check([](const auto& v) { return conv2d(v[0], v[1], v[2], 2, 1); },
        {random_param({2, 5, 6}, rng), random_param({3, 2, 3, 3}, rng), random_param({3}, rng)});
  check([](const auto& v) { return max_pool2d(v[0], 3, 1, 1); }, {lattice_param({2, 4, 5}, rng)});
  check([](const auto& v) { return adaptive_avg_pool2d(v[0], 2, 3); }, {random_param({2, 5, 7}, rng)});
  check([](const auto& v) { return dense(v[0], v[1], v[2]); },
        {random_param({4}, rng), random_param({3, 4}, rng), random_param({3}, rng)});
  check([](const auto& v) { return frame_affine(v[0], v[1], v[2]); },
        {random_param({4, 6}, rng), random_param({3, 4}, rng), random_param({3}, rng)});
  check([](const auto& v) { return splice(v[0], {-2, 0, 2}); }, {random_param({3, 7}, rng)});
  check([](const auto& v) { return relu(v[0]); }, {lattice_param({9}, rng)});
  check([](const auto& v) { return sigmoid(v[0]); }, {random_param({9}, rng, -4, 4)});
  check([](const auto& v) { return stats_pool(v[0]); }, {random_param({3, 6}, rng)});
  check([](const auto& v) { return cosine(v[0], v[1]); }, {random_param({5}, rng), random_param({5}, rng)});
  check([](const auto& v) { return max_of({v[0], v[1], v[2]}); },
        {Tensor::parameter({1}, {0.3}), Tensor::parameter({1}, {0.9}), Tensor::parameter({1}, {-0.4})});
  check([](const auto& v) { return mean_of({v[0], v[1]}); }, {random_param({4}, rng), random_param({4}, rng)});
}

TEST_CASE("splice picks the requested offsets") {
  Tensor x({1, 6}, std::vector<double>{0, 1, 2, 3, 4, 5});
  Tensor y = splice(x, {-2, 0, 2});
  CHECK(y.shape() == Shape{3, 2});
  CHECK(y[0] == 0);  // t-2 for centre 2
  CHECK(y[2] == 2);  // t
  CHECK(y[4] == 4);  // t+2
  CHECK(y[5] == 5);
  CHECK_THROWS_AS(splice(x, {-3, 3}), ShapeError);
}

TEST_CASE("adam examples") {
  SUBCASE("zero gradient leaves parameters") {
    Tensor p = Tensor::parameter({3}, {1, 2, 3});
    p.mutable_grad();
    Adam adam;
    adam.step({{"p", p}}, 0.1);
    CHECK(p[0] == 1.0);
    CHECK(p[2] == 3.0);
  }
  SUBCASE("first step with unit gradient moves by lr") {
    Tensor p = Tensor::parameter({1}, {0.0});
    p.mutable_grad()[0] = 1.0;
    Adam adam;
    adam.step({{"p", p}}, 0.1);
    CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-7));
  }
  SUBCASE("missing gradient is a contract error") {
    Tensor p = Tensor::parameter({1}, {0.0});
    Adam adam;
    CHECK_THROWS_AS(adam.step({{"p", p}}, 0.1), ContractError);
  }
  SUBCASE("ten-step trajectory matches a reference implementation") {
    std::mt19937_64 rng(11);
    std::vector<std::vector<double>> grads;
    for (int s = 0; s < 10; ++s) grads.push_back(random_values(4, rng));
    std::vector<double> start = random_values(4, rng);

    // Reference: textbook formulation with explicit bias-corrected moments.
    std::vector<double> ref = start, m(4, 0.0), v(4, 0.0);
    for (int s = 1; s <= 10; ++s)
      for (int i = 0; i < 4; ++i) {
        const double g = grads[s - 1][i];
        m[i] = 0.9 * m[i] + 0.1 * g;
        v[i] = 0.999 * v[i] + 0.001 * g * g;
        const double mhat = m[i] / (1 - std::pow(0.9, s)), vhat = v[i] / (1 - std::pow(0.999, s));
        ref[i] -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
      }

    Tensor p = Tensor::parameter({4}, start);
    Adam adam;
    for (int s = 0; s < 10; ++s) {
      p.zero_grad();
      std::copy(grads[s].begin(), grads[s].end(), p.mutable_grad().begin());
      adam.step({{"p", p}}, 0.05);
    }
    CHECK(max_abs_diff(p.data(), ref) < 1e-12);
    CHECK(adam.steps_taken("p") == 10);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(12);
  ParameterStore store;
  store.add("stem.weight", Tensor({2, 1, 3, 3}, random_values(18, rng)));
  store.add("tail.dense1.bias", Tensor({5}, std::vector<double>{-0.0, 1e-310, 3.14, -1e300, 42}));
  const std::string bytes = serialize_checkpoint(store);
  CHECK(bytes.substr(0, 7) == "EVONAS1");
  ParameterStore back = deserialize_checkpoint(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back.items()[0].first == "stem.weight");
  CHECK(back.at("stem.weight").shape() == Shape{2, 1, 3, 3});
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(std::signbit(back.at("tail.dense1.bias")[0]));

  CHECK_THROWS_AS(deserialize_checkpoint("NOTACKPT"), ParseError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), ParseError);
}

TEST_CASE("checkpoint layout is little-endian") {
  ParameterStore store;
  store.add("a", Tensor::scalar(1.0));
  const std::string bytes = serialize_checkpoint(store);
  // magic(7) + len(8) + "a" + rank(8) + extent(8) + payload(8)
  REQUIRE(bytes.size() == 7 + 8 + 1 + 8 + 8 + 8);
  CHECK(bytes[7] == 1);
  CHECK(bytes[8] == 0);
  CHECK(bytes[15] == 'a');
  // 1.0 = 0x3FF0000000000000, most significant byte last.
  CHECK(static_cast<unsigned char>(bytes.back()) == 0x3F);
  CHECK(static_cast<unsigned char>(bytes[bytes.size() - 2]) == 0xF0);
}
