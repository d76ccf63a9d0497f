#include <pit/tensor.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"

using namespace pit;
using pit::testing::check_gradient;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true, double lo = -1.0,
                     double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(static_cast<std::size_t>(numel_of(shape)));
  for (auto& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("matmul basic cases") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  auto r = matmul(eye, m);
  REQUIRE(r.values() == std::vector<double>{3, 4, 5, 6});

  auto a = Tensor::from_data({1, 2}, {1, 2});
  auto b = Tensor::from_data({2, 1}, {3, 4});
  auto dot = matmul(a, b);
  REQUIRE(dot.shape() == Shape{1, 1});
  REQUIRE(dot.item() == 11.0);
}

TEST_CASE("matmul rejects mismatched inner dims") {
  auto a = Tensor::zeros({3, 4});
  auto b = Tensor::zeros({5, 2});
  REQUIRE_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("[3,4]") &&
                                        Catch::Matchers::ContainsSubstring("[5,2]"));
}

TEST_CASE("matmul gradient matches finite differences") {
  auto a = random_tensor({3, 4}, 11);
  auto b = random_tensor({4, 2}, 12);
  auto make_loss = [&] { return sum_all(matmul(a, b)); };
  auto ra = check_gradient("a", a, make_loss, 1e-6);
  INFO(ra.worst_where);
  REQUIRE(ra.ok);
  auto rb = check_gradient("b", b, make_loss, 1e-6);
  INFO(rb.worst_where);
  REQUIRE(rb.ok);
}

TEST_CASE("matmul broadcasts batch dimensions") {
  // [2,3,4] x [4,2] -> [2,3,2]
  auto a = random_tensor({2, 3, 4}, 21);
  auto b = random_tensor({4, 2}, 22);
  auto out = matmul(a, b);
  REQUIRE(out.shape() == Shape{2, 3, 2});
  // each batch slice equals the 2-D product
  for (int t = 0; t < 2; ++t) {
    auto a2 = Tensor::from_data({3, 4}, std::vector<double>(a.data() + t * 12, a.data() + (t + 1) * 12));
    auto ref = matmul(a2, b);
    for (int i = 0; i < 6; ++i) REQUIRE(out.data()[t * 6 + i] == ref.data()[i]);
  }
  auto r = check_gradient("b", b, [&] { return sum_all(matmul(a, b)); }, 1e-6);
  INFO(r.worst_where);
  REQUIRE(r.ok);
}

TEST_CASE("softmax values") {
  auto s0 = softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
  for (double v : s0.values()) REQUIRE(v == Catch::Approx(1.0 / 3.0).epsilon(1e-14));

  auto s1 = softmax(Tensor::from_data({2}, {1000, 0}), 0);
  REQUIRE(std::fabs(s1.data()[0] - 1.0) < 1e-12);
  REQUIRE(std::fabs(s1.data()[1] - 0.0) < 1e-12);

  // exp/sum evaluated in extended precision independently
  auto s2 = softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
  REQUIRE(s2.data()[0] == Catch::Approx(0.09003057317038046).epsilon(1e-12));
  REQUIRE(s2.data()[1] == Catch::Approx(0.24472847105479767).epsilon(1e-12));
  REQUIRE(s2.data()[2] == Catch::Approx(0.66524095577482190).epsilon(1e-12));
}

TEST_CASE("softmax sums to one along axis") {
  auto x = random_tensor({4, 5, 3}, 31, false, -3.0, 3.0);
  for (std::size_t axis : {0u, 1u, 2u}) {
    auto y = softmax(x, axis);
    auto s = sum(y, axis);
    for (double v : s.values()) REQUIRE(std::fabs(v - 1.0) <= 1e-12);
  }
}

TEST_CASE("layer_norm values") {
  auto gain = Tensor::full({4}, 1.0);
  auto bias = Tensor::zeros({4});
  auto y = layer_norm(Tensor::full({1, 4}, 5.0), gain, bias, 1e-6);
  for (double v : y.values()) REQUIRE(std::fabs(v) < 1e-9);

  auto g2 = Tensor::full({2}, 1.0);
  auto b2 = Tensor::zeros({2});
  auto y2 = layer_norm(Tensor::from_data({1, 2}, {1, -1}), g2, b2, 0.0);
  REQUIRE(y2.data()[0] == Catch::Approx(1.0).epsilon(1e-14));
  REQUIRE(y2.data()[1] == Catch::Approx(-1.0).epsilon(1e-14));
}

TEST_CASE("layer_norm gradient matches finite differences") {
  auto x = random_tensor({2, 3, 4}, 41);
  auto gain = random_tensor({4}, 42, true, 0.5, 1.5);
  auto bias = random_tensor({4}, 43);
  auto make_loss = [&] {
    // weight the outputs so the gradient is not uniform
    auto w = Tensor::from_data({2, 3, 4}, [] {
      std::vector<double> v(24);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i) - 1.0;
      return v;
    }());
    return sum_all(mul(layer_norm(x, gain, bias, 1e-6), w));
  };
  for (auto* t : {&x, &gain, &bias}) {
    auto r = check_gradient("t", *t, make_loss, 1e-5);
    INFO(r.worst_where);
    REQUIRE(r.ok);
  }
}

TEST_CASE("backward seeds and accumulates") {
  auto x = Tensor::from_data({3}, {1, 2, 3}, true);
  backward(sum_all(x));
  REQUIRE(x.grad() == std::vector<double>{1, 1, 1});

  auto y = Tensor::scalar(3.0, true);
  backward(mul(y, y));
  REQUIRE(y.grad()[0] == 6.0);

  // reuse: z = x + x doubles the gradient
  auto z = Tensor::from_data({2}, {1, 1}, true);
  backward(sum_all(add(z, z)));
  REQUIRE(z.grad() == std::vector<double>{2, 2});
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  REQUIRE_THROWS_AS(backward(add(x, x)), std::invalid_argument);
}

TEST_CASE("tape is topologically ordered with unique ids") {
  auto x = random_tensor({3, 3}, 51);
  auto y = random_tensor({3, 3}, 52);
  auto loss = sum_all(matmul(add(x, y), mul(x, y)));
  auto tape = Tape::trace(loss);
  REQUIRE(tape.nodes.size() >= 4);
  std::unordered_set<std::int64_t> ids;
  std::unordered_set<const detail::Node*> seen;
  for (const auto& n : tape.nodes) {
    REQUIRE(ids.insert(n->id).second);
    for (const auto& in : n->inputs)
      if (in->requires_grad) REQUIRE(seen.count(in.get()) == 1);
    seen.insert(n.get());
  }
}

TEST_CASE("reshape and transpose round-trip bit-exactly") {
  auto x = random_tensor({3, 4, 5}, 61, false);
  auto rt = reshape(reshape(x, {12, 5}), {3, 4, 5});
  REQUIRE(rt.values() == x.values());

  auto tt = transpose(transpose(x, {2, 0, 1}), {1, 2, 0});
  REQUIRE(tt.values() == x.values());
}

TEST_CASE("broadcasting add matches explicit expansion") {
  auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from_data({3}, {10, 20, 30});
  auto r = add(a, b);
  REQUIRE(r.values() == std::vector<double>{11, 22, 33, 14, 25, 36});

  auto col = Tensor::from_data({2, 1}, {100, 200});
  auto r2 = add(a, col);
  REQUIRE(r2.values() == std::vector<double>{101, 102, 103, 204, 205, 206});

  auto bad = Tensor::zeros({4});
  REQUIRE_THROWS_AS(add(a, bad), std::invalid_argument);
}

TEST_CASE("elementwise and structural op gradients match finite differences") {
  struct Case {
    const char* name;
    std::function<Tensor(Tensor&, Tensor&)> build;
  };
  const std::vector<Case> cases = {
      {"add", [](Tensor& a, Tensor& b) { return sum_all(add(a, b)); }},
      {"sub", [](Tensor& a, Tensor& b) { return sum_all(mul(sub(a, b), b)); }},
      {"mul", [](Tensor& a, Tensor& b) { return sum_all(mul(a, b)); }},
      {"div", [](Tensor& a, Tensor& b) { return sum_all(div(a, add_scalar(square(b), 1.0))); }},
      {"neg", [](Tensor& a, Tensor& b) { return sum_all(mul(neg(a), b)); }},
      {"square", [](Tensor& a, Tensor& b) { return sum_all(mul(square(a), b)); }},
      {"sqrt", [](Tensor& a, Tensor& b) {
         return sum_all(mul(sqrt_t(add_scalar(square(a), 0.5)), b));
       }},
      {"exp", [](Tensor& a, Tensor& b) { return sum_all(mul(exp_t(a), b)); }},
      {"gelu", [](Tensor& a, Tensor& b) { return sum_all(mul(gelu(a), b)); }},
      {"softplus", [](Tensor& a, Tensor& b) { return sum_all(mul(softplus(a), b)); }},
      {"scale", [](Tensor& a, Tensor& b) { return sum_all(mul(scale(a, 2.5), b)); }},
      {"softmax", [](Tensor& a, Tensor& b) { return sum_all(mul(softmax(a, 1), b)); }},
      {"log_softmax",
       [](Tensor& a, Tensor& b) { return sum_all(mul(log_softmax(a, 1), b)); }},
      {"mean_axis", [](Tensor& a, Tensor& b) {
         return sum_all(mul(mean(a, 0, true), slice(b, 0, 0, 1)));
       }},
      {"sum_axis", [](Tensor& a, Tensor& b) {
         return sum_all(mul(sum(a, 1, true), slice(b, 1, 0, 1)));
       }},
      {"mean_all", [](Tensor& a, Tensor& b) { return mul(mean_all(a), mean_all(b)); }},
      {"concat_slice",
       [](Tensor& a, Tensor& b) {
         auto c = concat({a, b}, 0);
         return sum_all(square(slice(c, 0, 1, 4)));
       }},
      {"transpose",
       [](Tensor& a, Tensor& b) { return sum_all(mul(transpose(a, {1, 0}), transpose(b, {1, 0}))); }},
      {"reshape", [](Tensor& a, Tensor& b) {
         return sum_all(mul(reshape(a, {12}), reshape(b, {12})));
       }},
      {"gather_rows", [](Tensor& a, Tensor& b) {
         return sum_all(mul(gather_rows(a, {2, 0, 2}), gather_rows(b, {1, 1, 3})));
       }},
      {"take_flat", [](Tensor& a, Tensor& b) {
         return sum_all(mul(take_flat(a, {0, 5, 7, 5}), take_flat(b, {1, 2, 3, 4})));
       }},
  };
  std::uint64_t seed = 1000;
  for (const auto& c : cases) {
    DYNAMIC_SECTION(c.name) {
      auto a = random_tensor({3, 4}, seed++);
      auto b = random_tensor({3, 4}, seed++);
      auto make_loss = [&] { return c.build(a, b); };
      for (auto* t : {&a, &b}) {
        auto r = check_gradient(c.name, *t, make_loss);
        INFO(c.name << ": " << r.worst_where);
        REQUIRE(r.ok);
      }
    }
  }
}

TEST_CASE("broadcast gradients reduce correctly") {
  auto a = random_tensor({4, 3}, 71);
  auto b = random_tensor({3}, 72);
  auto w = random_tensor({4, 3}, 73, false);
  auto make_loss = [&] { return sum_all(mul(mul(a, b), w)); };
  for (auto* t : {&a, &b}) {
    auto r = check_gradient("bcast", *t, make_loss);
    INFO(r.worst_where);
    REQUIRE(r.ok);
  }
}

TEST_CASE("no-grad mode records nothing") {
  auto a = random_tensor({2, 2}, 81);
  Tensor out;
  {
    NoGradGuard ng;
    out = sum_all(matmul(a, a));
  }
  REQUIRE(!out.requires_grad());
  REQUIRE(Tape::trace(out).nodes.empty());
}

TEST_CASE("tensor invariants") {
  REQUIRE_THROWS_AS(Tensor::from_data({2, 3}, {1, 2, 3}), std::invalid_argument);
  REQUIRE_THROWS_AS(Tensor::from_data({0}, {}), std::invalid_argument);
  auto a = Tensor::zeros({2});
  auto b = Tensor::zeros({2});
  REQUIRE(a.node_id() != b.node_id());
}
