#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "dot/gradcheck.hpp"
#include "dot/optim.hpp"
#include "dot/serialize.hpp"
#include "dot/tensor.hpp"

#include "oracles.hpp"

using dot::Tensor;

TEST_CASE("matmul identity and selector rows") {
  Tensor i2({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {1, 2, 3, 4});
  CHECK(dot::matmul(i2, a).data() == std::vector<double>{1, 2, 3, 4});

  Tensor sel({2, 2}, {1, 0, 0, 0});
  Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(dot::matmul(sel, b).data() == std::vector<double>{5, 6, 0, 0});
}

TEST_CASE("matmul rejects mismatched shapes, naming both") {
  Tensor a({2, 3}, std::vector<double>(6, 0.0));
  Tensor b({2, 2}, std::vector<double>(4, 0.0));
  CHECK_THROWS_WITH(dot::matmul(a, b),
                    Catch::Matchers::ContainsSubstring("[2x3]") &&
                        Catch::Matchers::ContainsSubstring("[2x2]"));
}

TEST_CASE("matmul gradient matches central finite differences") {
  dot::Rng rng(7);
  Tensor a = dot::detail::checked_input({3, 4}, rng);
  Tensor b = dot::detail::checked_input({4, 2}, rng);
  Tensor w = dot::detail::frozen({3, 2}, rng);
  auto fa = [&](const Tensor& t) {
    return dot::detail::scalarize(dot::matmul(t, b), w);
  };
  auto fb = [&](const Tensor& t) {
    return dot::detail::scalarize(dot::matmul(a, t), w);
  };
  CHECK(dot::grad_check(fa, a, 1e-5) < 1e-6);
  CHECK(dot::grad_check(fb, b, 1e-5) < 1e-6);
}

TEST_CASE("softmax trivial rows") {
  Tensor x({3}, {0, 0, 0});
  auto y = dot::softmax(x).data();
  for (double v : y) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-15));

  Tensor hot({2}, {1000, 0});
  auto z = dot::softmax(hot).data();
  CHECK(std::abs(z[0] - 1.0) < 1e-12);
  CHECK(std::abs(z[1]) < 1e-12);
}

TEST_CASE("softmax matches scalar oracle") {
  Tensor x({3}, {1, 2, 3});
  auto got = dot::softmax(x).data();
  auto want = oracle::softmax_row({1, 2, 3});
  for (int i = 0; i < 3; ++i)
    CHECK(got[i] == Catch::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one for random finite inputs") {
  dot::Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor x({4, 7}, [&] {
      std::vector<double> d(28);
      for (auto& v : d) v = rng.uniform(-40.0, 40.0);
      return d;
    }());
    auto y = dot::softmax(x).data();
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) s += y[r * 7 + c];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax rejects non-finite input") {
  Tensor x({2}, {1.0, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(dot::softmax(x), std::invalid_argument);
}

TEST_CASE("layer_norm collapses constant rows to bias") {
  Tensor x({1, 4}, {5, 5, 5, 5});
  Tensor gain({4}, {1, 1, 1, 1});
  Tensor bias({4}, {0, 0, 0, 0});
  Tensor out0 = dot::layer_norm(x, gain, bias);
  for (double v : out0.data()) CHECK(std::abs(v) < 1e-9);

  Tensor zero_gain({4}, {0, 0, 0, 0});
  Tensor b({4}, {2.5, -1, 0, 7});
  Tensor r({2, 4}, {1, 2, 3, 4, -3, 0, 5, 9});
  auto out = dot::layer_norm(r, zero_gain, b).data();
  for (int row = 0; row < 2; ++row)
    for (int j = 0; j < 4; ++j)
      CHECK(out[row * 4 + j] == Catch::Approx(b.data()[j]));
}

TEST_CASE("layer_norm standardizes rows before the affine map") {
  dot::Rng rng(3);
  Tensor x = dot::detail::frozen({5, 8}, rng);
  Tensor gain({8}, std::vector<double>(8, 1.0));
  Tensor bias({8}, std::vector<double>(8, 0.0));
  auto y = dot::layer_norm(x, gain, bias).data();
  for (int r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (int j = 0; j < 8; ++j) mu += y[r * 8 + j];
    mu /= 8;
    for (int j = 0; j < 8; ++j) var += (y[r * 8 + j] - mu) * (y[r * 8 + j] - mu);
    var /= 8;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == Catch::Approx(1.0).epsilon(1e-4));  // eps shifts it slightly
  }
}

TEST_CASE("layer_norm rejects zero-length rows") {
  Tensor x({2, 0}, {});
  Tensor gain({0}, {});
  CHECK_THROWS_AS(dot::layer_norm(x, gain, gain), std::invalid_argument);
}

TEST_CASE("layer_norm gradient vs finite differences") {
  dot::Rng rng(5);
  Tensor x = dot::detail::checked_input({2, 6}, rng);
  Tensor gain = dot::detail::frozen({6}, rng, 0.5, 1.5);
  Tensor bias = dot::detail::frozen({6}, rng);
  Tensor w = dot::detail::frozen({2, 6}, rng);
  auto f = [&](const Tensor& t) {
    return dot::detail::scalarize(dot::layer_norm(t, gain, bias), w);
  };
  CHECK(dot::grad_check(f, x, 1e-5) < 1e-5);
}

TEST_CASE("cross entropy closed forms") {
  Tensor uniform({1, 4}, {0, 0, 0, 0});
  CHECK(dot::cross_entropy_with_logits(uniform, {2}).item() ==
        Catch::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor confident({1, 2}, {10, -10});
  CHECK(dot::cross_entropy_with_logits(confident, {0}).item() < 1e-4);
}

TEST_CASE("cross entropy value and gradient match the scalar oracle") {
  dot::Rng rng(13);
  std::vector<std::vector<double>> rows(5, std::vector<double>(3));
  std::vector<double> flat;
  for (auto& r : rows)
    for (auto& v : r) {
      v = rng.uniform(-2.0, 2.0);
      flat.push_back(v);
    }
  std::vector<int> labels = {0, 2, 1, 1, 0};
  Tensor logits({5, 3}, flat, true);
  Tensor loss = dot::cross_entropy_with_logits(logits, labels);
  CHECK(loss.item() == Catch::Approx(oracle::cross_entropy(rows, labels))
                           .epsilon(1e-12));
  logits.zero_grad();
  loss.backward();
  // gradient = (softmax - onehot) / B
  for (int i = 0; i < 5; ++i) {
    auto sm = oracle::softmax_row(rows[static_cast<std::size_t>(i)]);
    for (int j = 0; j < 3; ++j) {
      const double want = (sm[j] - (labels[i] == j ? 1.0 : 0.0)) / 5.0;
      CHECK(logits.grad()[i * 3 + j] == Catch::Approx(want).margin(1e-12));
    }
  }
}

TEST_CASE("cross entropy rejects out-of-range labels") {
  Tensor logits({2, 3}, std::vector<double>(6, 0.0));
  CHECK_THROWS_AS(dot::cross_entropy_with_logits(logits, {0, 3}),
                  std::out_of_range);
  CHECK_THROWS_AS(dot::cross_entropy_with_logits(logits, {-1, 0}),
                  std::out_of_range);
}

TEST_CASE("l2_normalize basics") {
  Tensor x({1, 2}, {3, 4});
  auto y = dot::l2_normalize(x).data();
  CHECK(y[0] == Catch::Approx(0.6));
  CHECK(y[1] == Catch::Approx(0.8));

  // idempotence on an already-unit row
  Tensor u({1, 2}, {0.6, 0.8});
  auto z = dot::l2_normalize(u).data();
  CHECK(std::abs(z[0] - 0.6) < 1e-12);
  CHECK(std::abs(z[1] - 0.8) < 1e-12);
}

TEST_CASE("l2_normalize rejects near-zero rows") {
  Tensor x({1, 3}, {1e-13, 0, 0});
  CHECK_THROWS_WITH(dot::l2_normalize(x),
                    Catch::Matchers::ContainsSubstring("degenerate"));
}

TEST_CASE("l2_normalize rows have unit norm") {
  dot::Rng rng(17);
  for (int rep = 0; rep < 30; ++rep) {
    Tensor x = dot::detail::frozen({6, 5}, rng);
    for (auto& v : x.data()) v += (v >= 0 ? 0.3 : -0.3);
    auto y = dot::l2_normalize(x).data();
    for (int r = 0; r < 6; ++r) {
      double s = 0;
      for (int c = 0; c < 5; ++c) s += y[r * 5 + c] * y[r * 5 + c];
      CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("forward ops are deterministic") {
  dot::Rng rng(23);
  Tensor x = dot::detail::frozen({4, 6}, rng);
  Tensor g = dot::detail::frozen({6}, rng, 0.5, 1.5);
  Tensor b = dot::detail::frozen({6}, rng);
  auto once = [&] {
    Tensor t = dot::layer_norm(dot::softmax(x), g, b);
    return dot::gelu(t).data();
  };
  CHECK(once() == once());
}

TEST_CASE("sgd step without momentum") {
  dot::Parameter p("theta", Tensor({1}, {1.0}));
  p.tensor.zero_grad();
  p.tensor.grad()[0] = 0.5;
  dot::SgdOptimizer opt(0.1, 0.0, 0.0);
  opt.step({&p});
  CHECK(p.tensor.data()[0] == Catch::Approx(0.95));
}

TEST_CASE("sgd momentum keeps moving with zero gradient") {
  dot::Parameter p("theta", Tensor({1}, {1.0}));
  dot::SgdOptimizer opt(0.1, 0.9, 0.0);
  p.tensor.zero_grad();
  p.tensor.grad()[0] = 1.0;  // warms velocity to v=1
  opt.step({&p});
  const double before = p.tensor.data()[0];
  p.tensor.zero_grad();
  opt.step({&p});
  CHECK(before - p.tensor.data()[0] == Catch::Approx(0.09));
}

TEST_CASE("sgd with momentum and weight decay matches the scalar walk") {
  dot::Parameter p("theta", Tensor({1}, {0.7}));
  dot::SgdOptimizer opt(0.05, 0.9, 1e-3);
  std::vector<double> grads = {0.3, -0.2};
  for (double g : grads) {
    p.tensor.zero_grad();
    p.tensor.grad()[0] = g;
    opt.step({&p});
  }
  CHECK(p.tensor.data()[0] ==
        Catch::Approx(oracle::sgd_sim(0.7, grads, 0.05, 0.9, 1e-3, 1.0))
            .epsilon(1e-14));
}

TEST_CASE("sgd honours learning_rate_scale") {
  dot::Parameter p("head", Tensor({1}, {0.7}), 10.0);
  dot::SgdOptimizer opt(0.05, 0.9, 1e-3);
  std::vector<double> grads = {0.3, -0.2};
  for (double g : grads) {
    p.tensor.zero_grad();
    p.tensor.grad()[0] = g;
    opt.step({&p});
  }
  CHECK(p.tensor.data()[0] ==
        Catch::Approx(oracle::sgd_sim(0.7, grads, 0.05, 0.9, 1e-3, 10.0))
            .epsilon(1e-14));
}

TEST_CASE("sgd reports the parameter missing a gradient") {
  dot::Parameter p("blocks.0.mlp.w1", Tensor({2}, {1.0, 2.0}));
  dot::SgdOptimizer opt(0.1, 0.9, 0.0);
  CHECK_THROWS_WITH(opt.step({&p}),
                    Catch::Matchers::ContainsSubstring("blocks.0.mlp.w1"));
}

TEST_CASE("gradient accumulation is additive until zeroed") {
  Tensor x({2}, {1.0, 2.0}, true);
  x.zero_grad();
  for (int i = 0; i < 3; ++i) {
    Tensor loss = dot::sum(dot::mul(x, x));
    loss.backward();
  }
  CHECK(x.grad()[0] == Catch::Approx(6.0));   // 3 * 2x at x=1
  CHECK(x.grad()[1] == Catch::Approx(12.0));  // 3 * 2x at x=2
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("grad_check on sum of squares is exact to roundoff") {
  Tensor x({3}, {1, 2, 3}, true);
  auto f = [](const Tensor& t) { return dot::sum(dot::mul(t, t)); };
  CHECK(dot::grad_check(f, x, 1e-5) < 1e-8);
}

TEST_CASE("grad_check on a softmax-then-dot composite") {
  dot::Rng rng(29);
  Tensor x = dot::detail::checked_input({2, 5}, rng, -2.0, 2.0);
  Tensor w = dot::detail::frozen({2, 5}, rng);
  auto f = [&](const Tensor& t) {
    return dot::detail::scalarize(dot::softmax(t), w);
  };
  CHECK(dot::grad_check(f, x, 1e-5) < 1e-5);
}

TEST_CASE("every registered op passes the gradient suite") {
  auto rows = dot::run_gradcheck_suite(1234, 20);
  for (const auto& r : rows) {
    INFO(r.name << " max_rel_err=" << r.max_rel_err);
    CHECK(r.pass());
  }
}

TEST_CASE("corrupted gradient hook is caught by the suite") {
  auto rows = dot::run_gradcheck_suite(1234, 2, /*corrupt=*/true);
  bool any_fail = false;
  for (const auto& r : rows) any_fail = any_fail || !r.pass();
  CHECK(any_fail);
}

TEST_CASE("tensor blob round trip is bit exact") {
  dot::Rng rng(31);
  Tensor t = dot::detail::frozen({3, 4, 2}, rng);
  std::stringstream ss;
  dot::write_tensor_blob(ss, t);
  Tensor back = dot::read_tensor_blob(ss);
  CHECK(back.shape() == t.shape());
  CHECK(back.data() == t.data());
}

TEST_CASE("tensor blob rejects bad magic and truncation") {
  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(dot::read_tensor_blob(bad), dot::FormatError);

  Tensor t({2, 2}, {1, 2, 3, 4});
  std::stringstream ss;
  dot::write_tensor_blob(ss, t);
  std::string full = ss.str();
  std::stringstream truncated(full.substr(0, full.size() - 9));
  CHECK_THROWS_AS(dot::read_tensor_blob(truncated), dot::FormatError);
}

TEST_CASE("named container round trip") {
  dot::Rng rng(37);
  dot::NamedBlobs c;
  c.manifest = "{\"purpose\":\"test\"}";
  c.blobs.emplace_back("alpha", dot::detail::frozen({2, 3}, rng));
  c.blobs.emplace_back("beta", dot::detail::frozen({5}, rng));
  std::stringstream ss;
  dot::write_container(ss, c);
  dot::NamedBlobs back = dot::read_container(ss);
  CHECK(back.manifest == c.manifest);
  REQUIRE(back.blobs.size() == 2);
  CHECK(back.find("alpha").data() == c.blobs[0].second.data());
  CHECK(back.find("beta").data() == c.blobs[1].second.data());
  CHECK_THROWS_AS(back.find("gamma"), dot::FormatError);
}
