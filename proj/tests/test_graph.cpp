#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "qml/graph.hpp"
#include "qml/rng.hpp"

using namespace qml;

namespace {

Array random_array(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  Array a((std::vector<std::size_t>(shape)));
  for (double& v : a.data) v = scale * rng.gaussian();
  return a;
}

// Scalar probe: weight the output entries with fixed random coefficients so
// the gradient check exercises a generic adjoint, not all-ones.
NodeId weighted_sum(Graph& g, NodeId out, Rng& rng) {
  Array w(g.shape(out));
  for (double& v : w.data) v = rng.gaussian();
  return g.reduce_sum(g.mul(out, g.constant(std::move(w))));
}

}  // namespace

TEST_CASE("construction validates shapes") {
  Graph g;
  NodeId a = g.leaf("a", {2, 3});
  NodeId b = g.leaf("b", {3, 2});
  REQUIRE_THROWS_AS(g.add(a, b), std::invalid_argument);
  REQUIRE_THROWS_AS(g.mul(a, b), std::invalid_argument);
  REQUIRE_THROWS_AS(g.matmul(a, a), std::invalid_argument);
  REQUIRE_NOTHROW(g.matmul(a, b));
  NodeId v = g.leaf("v", {4});
  REQUIRE_THROWS_AS(g.slice(v, 2, 3), std::invalid_argument);
  REQUIRE_THROWS_AS(g.slice(v, 0, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(g.gather_rows(a, {2}), std::invalid_argument);
  REQUIRE_THROWS_AS(g.gather_entries(a, {{0, 3}}), std::invalid_argument);
  REQUIRE_THROWS_AS(g.pairwise_sq_dist(v), std::invalid_argument);
  REQUIRE_THROWS_AS(g.softmax_cross_entropy(a, {0, 1, 0}), std::invalid_argument);
  REQUIRE_THROWS_AS(g.softmax_cross_entropy(a, {0, 3}), std::invalid_argument);
  REQUIRE_THROWS_AS(g.leaf("a", {1}), std::invalid_argument);
  REQUIRE_THROWS_AS(g.concat({a}), std::invalid_argument);
}

TEST_CASE("evaluate validates bindings") {
  Graph g;
  NodeId x = g.leaf("x", {2});
  NodeId y = g.reduce_sum(x);
  Bindings b;
  REQUIRE_THROWS_AS(evaluate(g, y, b), std::runtime_error);
  b["x"] = Array::vec({1.0, 2.0, 3.0});
  REQUIRE_THROWS_AS(evaluate(g, y, b), std::runtime_error);
  b["x"] = Array::vec({1.0, std::nan("")});
  REQUIRE_THROWS_AS(evaluate(g, y, b), std::runtime_error);
  b["x"] = Array::vec({1.0, 2.0});
  REQUIRE(evaluate(g, y, b).data[0] == 3.0);
}

TEST_CASE("forward oracles") {
  Graph g;
  Bindings b;

  SECTION("relu clamps negatives") {
    NodeId x = g.leaf("x", {3});
    NodeId y = g.relu(x);
    b["x"] = Array::vec({-1.0, 0.0, 2.0});
    Array out = evaluate(g, y, b);
    REQUIRE(out.data == std::vector<double>{0.0, 0.0, 2.0});
  }

  SECTION("softmax of equal logits is uniform") {
    NodeId x = g.leaf("x", {2});
    NodeId y = g.softmax(x);
    b["x"] = Array::vec({0.0, 0.0});
    Array out = evaluate(g, y, b);
    REQUIRE(out.data[0] == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(out.data[1] == Catch::Approx(0.5).margin(1e-15));
  }

  SECTION("softmax survives large logits") {
    NodeId x = g.leaf("x", {2});
    NodeId y = g.softmax(x);
    b["x"] = Array::vec({1000.0, 1000.0});
    Array out = evaluate(g, y, b);
    REQUIRE(out.data[0] == Catch::Approx(0.5).margin(1e-15));
  }

  SECTION("l2 normalize on a 3-4-5 vector") {
    NodeId x = g.leaf("x", {2});
    NodeId y = g.l2_normalize(x);
    b["x"] = Array::vec({3.0, 4.0});
    Array out = evaluate(g, y, b);
    REQUIRE(out.data[0] == Catch::Approx(0.6).margin(1e-15));
    REQUIRE(out.data[1] == Catch::Approx(0.8).margin(1e-15));
  }

  SECTION("l2 normalize guards the zero vector instead of dividing by it") {
    NodeId x = g.leaf("x", {3});
    NodeId y = g.l2_normalize(x);
    b["x"] = Array::vec({0.0, 0.0, 0.0});
    Array out = evaluate(g, y, b);
    REQUIRE(out.finite());
    REQUIRE(out.data == std::vector<double>{0.0, 0.0, 0.0});
  }

  SECTION("pairwise squared distances") {
    NodeId x = g.leaf("x", {2, 2});
    NodeId d = g.pairwise_sq_dist(x);
    b["x"] = Array::matrix(2, 2, {0.0, 0.0, 3.0, 4.0});
    Array out = evaluate(g, d, b);
    REQUIRE(out.data == std::vector<double>{0.0, 25.0, 25.0, 0.0});
  }

  SECTION("matmul 2x2") {
    NodeId x = g.leaf("x", {2, 2});
    NodeId y = g.leaf("y", {2, 2});
    NodeId z = g.matmul(x, y);
    b["x"] = Array::matrix(2, 2, {1.0, 2.0, 3.0, 4.0});
    b["y"] = Array::matrix(2, 2, {5.0, 6.0, 7.0, 8.0});
    Array out = evaluate(g, z, b);
    REQUIRE(out.data == std::vector<double>{19.0, 22.0, 43.0, 50.0});
  }

  SECTION("reduce max takes the first of tied entries") {
    NodeId x = g.leaf("x", {4});
    NodeId y = g.reduce_max(x);
    b["x"] = Array::vec({1.0, 5.0, 5.0, 3.0});
    Session s(g, b);
    REQUIRE(s.eval(y).data[0] == 5.0);
    REQUIRE(s.argindex(y) == 1);
  }

  SECTION("reduce min takes the first of tied entries") {
    NodeId x = g.leaf("x", {4});
    NodeId y = g.reduce_min(x);
    b["x"] = Array::vec({2.0, -1.0, -1.0, 3.0});
    Session s(g, b);
    REQUIRE(s.eval(y).data[0] == -1.0);
    REQUIRE(s.argindex(y) == 1);
  }

  SECTION("concat and slice round trip") {
    NodeId x = g.leaf("x", {2});
    NodeId y = g.leaf("y", {3});
    NodeId c = g.concat({x, y});
    NodeId piece = g.slice(c, 2, 3);
    b["x"] = Array::vec({1.0, 2.0});
    b["y"] = Array::vec({3.0, 4.0, 5.0});
    Array out = evaluate(g, piece, b);
    REQUIRE(out.data == std::vector<double>{3.0, 4.0, 5.0});
  }

  SECTION("gather rows and entries") {
    NodeId x = g.leaf("x", {3, 2});
    NodeId r = g.gather_rows(x, {2, 0});
    NodeId e = g.gather_entries(x, {{1, 1}, {0, 0}});
    b["x"] = Array::matrix(3, 2, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    REQUIRE(evaluate(g, r, b).data == std::vector<double>{5.0, 6.0, 1.0, 2.0});
    REQUIRE(evaluate(g, e, b).data == std::vector<double>{4.0, 1.0});
  }

  SECTION("cross entropy against the direct formula") {
    NodeId x = g.leaf("x", {1, 2});
    NodeId l = g.softmax_cross_entropy(x, {1});
    b["x"] = Array::matrix(1, 2, {1.0, 2.0});
    double expect = std::log1p(std::exp(-1.0));
    REQUIRE(evaluate(g, l, b).data[0] == Catch::Approx(expect).margin(1e-15));
  }
}

TEST_CASE("backward oracles") {
  SECTION("d/dx sum(x^2) = 2x") {
    Graph g;
    NodeId x = g.leaf("x", {2});
    NodeId y = g.reduce_sum(g.mul(x, x));
    Bindings b;
    b["x"] = Array::vec({1.0, 2.0});
    auto grads = backward(g, y, b);
    REQUIRE(grads.at("x").data == std::vector<double>{2.0, 4.0});
  }

  SECTION("reduce max routes gradient to the winner") {
    Graph g;
    NodeId x = g.leaf("x", {3});
    NodeId y = g.reduce_max(x);
    Bindings b;
    b["x"] = Array::vec({1.0, 5.0, 3.0});
    auto grads = backward(g, y, b);
    REQUIRE(grads.at("x").data == std::vector<double>{0.0, 1.0, 0.0});
  }

  SECTION("cross entropy gradient is softmax minus one-hot, averaged") {
    Graph g;
    NodeId x = g.leaf("x", {2, 2});
    NodeId l = g.softmax_cross_entropy(x, {0, 1});
    Bindings b;
    b["x"] = Array::matrix(2, 2, {0.0, 0.0, 1.0, -1.0});
    auto grads = backward(g, l, b);
    const Array& gx = grads.at("x");
    double p = 1.0 / (1.0 + std::exp(-2.0));  // softmax of (1,-1), first entry
    REQUIRE(gx.at(0, 0) == Catch::Approx((0.5 - 1.0) / 2.0).margin(1e-15));
    REQUIRE(gx.at(0, 1) == Catch::Approx(0.5 / 2.0).margin(1e-15));
    REQUIRE(gx.at(1, 0) == Catch::Approx(p / 2.0).margin(1e-15));
    REQUIRE(gx.at(1, 1) == Catch::Approx((1.0 - p - 1.0) / 2.0).margin(1e-15));
  }

  SECTION("unreached leaves get zero gradient") {
    Graph g;
    NodeId x = g.leaf("x", {2});
    NodeId y = g.leaf("y", {2});
    NodeId r = g.reduce_sum(x);
    Bindings b;
    b["x"] = Array::vec({1.0, 1.0});
    b["y"] = Array::vec({9.0, 9.0});
    auto grads = backward(g, r, b);
    REQUIRE(grads.at("y").data == std::vector<double>{0.0, 0.0});
  }
}

TEST_CASE("triplet gradients match the closed form") {
  // loss = max(0, |a-p|^2 + m - |a-n|^2); when active:
  //   d/da = 2(n - p), d/dp = 2(p - a), d/dn = 2(a - n)
  Graph g;
  std::size_t d = 4;
  NodeId a = g.leaf("a", {d});
  NodeId p = g.leaf("p", {d});
  NodeId n = g.leaf("n", {d});
  NodeId dap = g.reduce_sum(g.mul(g.sub(a, p), g.sub(a, p)));
  NodeId dan = g.reduce_sum(g.mul(g.sub(a, n), g.sub(a, n)));
  NodeId m = g.constant(Array::scalar(10.0));  // wide margin keeps the hinge active
  NodeId loss = g.hinge(g.sub(g.add(dap, m), dan));

  Rng rng(42);
  int active = 0;
  for (int trial = 0; trial < 25; ++trial) {
    Bindings b;
    b["a"] = random_array(rng, {d});
    b["p"] = random_array(rng, {d});
    b["n"] = random_array(rng, {d});
    if (evaluate(g, loss, b).data[0] <= 0.0) continue;  // hinge off, gradient is zero
    ++active;
    auto grads = backward(g, loss, b);
    for (std::size_t k = 0; k < d; ++k) {
      double av = b["a"].data[k], pv = b["p"].data[k], nv = b["n"].data[k];
      REQUIRE(grads.at("a").data[k] == Catch::Approx(2.0 * (nv - pv)).margin(1e-12));
      REQUIRE(grads.at("p").data[k] == Catch::Approx(2.0 * (pv - av)).margin(1e-12));
      REQUIRE(grads.at("n").data[k] == Catch::Approx(2.0 * (av - nv)).margin(1e-12));
    }
  }
  REQUIRE(active >= 20);
}

TEST_CASE("grad check on a smooth composite") {
  Graph g;
  NodeId x = g.leaf("x", {3, 2});
  NodeId w = g.leaf("w", {2, 2});
  NodeId bias = g.leaf("bias", {2});
  NodeId h = g.tanh_(g.add(g.matmul(x, w), bias));
  NodeId y = g.reduce_sum(g.mul(g.sigmoid(h), h));
  Rng rng(7);
  Bindings b;
  b["x"] = random_array(rng, {3, 2});
  b["w"] = random_array(rng, {2, 2});
  b["bias"] = random_array(rng, {2});
  auto report = grad_check(g, y, b, 1e-5, 1e-6);
  INFO("max rel err " << report.max_rel_err);
  REQUIRE(report.pass);
  REQUIRE(report.checked == 12);
  REQUIRE(report.skipped.empty());
  REQUIRE(report.max_rel_err < 1e-6);
}

TEST_CASE("grad check skips entries whose probes straddle a kink") {
  Graph g;
  NodeId x = g.leaf("x", {2});
  NodeId y = g.reduce_sum(g.relu(x));
  Bindings b;
  b["x"] = Array::vec({0.0, 1.0});  // probes at +-eps disagree on the mask
  auto report = grad_check(g, y, b);
  REQUIRE(report.pass);
  REQUIRE(report.checked == 1);
  REQUIRE(report.skipped.size() == 1);
  REQUIRE(report.skipped[0].leaf == "x");
  REQUIRE(report.skipped[0].index == 0);
}

TEST_CASE("grad check skips argmax flips near a tie") {
  Graph g;
  NodeId x = g.leaf("x", {2});
  NodeId y = g.reduce_max(x);
  Bindings b;
  b["x"] = Array::vec({1.0, 1.0});
  auto report = grad_check(g, y, b);
  REQUIRE(report.pass);
  REQUIRE(report.skipped.size() == 2);
}

TEST_CASE("every op passes a randomized grad check") {
  Rng rng(1234);
  auto run = [&](const char* what, auto&& build, Bindings b) {
    Graph g;
    NodeId root = build(g);
    auto report = grad_check(g, root, b, 1e-5, 1e-4);
    INFO(what << ": max rel err " << report.max_rel_err << ", checked " << report.checked);
    REQUIRE(report.pass);
    REQUIRE(report.checked > 0);
  };

  {
    Bindings b;
    b["x"] = random_array(rng, {3, 4});
    b["y"] = random_array(rng, {3, 4});
    run("add",
        [&](Graph& g) {
          return weighted_sum(g, g.add(g.leaf("x", {3, 4}), g.leaf("y", {3, 4})), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {3, 4});
    b["y"] = random_array(rng, {4});
    run("add row broadcast",
        [&](Graph& g) {
          return weighted_sum(g, g.add(g.leaf("x", {3, 4}), g.leaf("y", {4})), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {5});
    b["y"] = random_array(rng, {5});
    run("sub and mul",
        [&](Graph& g) {
          NodeId x = g.leaf("x", {5});
          NodeId y = g.leaf("y", {5});
          return weighted_sum(g, g.mul(g.sub(x, y), y), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {6});
    run("scalar mul",
        [&](Graph& g) { return weighted_sum(g, g.scalar_mul(g.leaf("x", {6}), -1.7), rng); }, b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {3, 4});
    b["y"] = random_array(rng, {4, 2});
    run("matmul",
        [&](Graph& g) {
          return weighted_sum(g, g.matmul(g.leaf("x", {3, 4}), g.leaf("y", {4, 2})), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {3, 4});
    b["y"] = random_array(rng, {4});
    run("matmul matrix-vector",
        [&](Graph& g) {
          return weighted_sum(g, g.matmul(g.leaf("x", {3, 4}), g.leaf("y", {4})), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {4});
    b["y"] = random_array(rng, {4, 3});
    run("matmul vector-matrix",
        [&](Graph& g) {
          return weighted_sum(g, g.matmul(g.leaf("x", {4}), g.leaf("y", {4, 3})), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {3});
    b["y"] = random_array(rng, {2});
    run("concat and slice",
        [&](Graph& g) {
          NodeId c = g.concat({g.leaf("x", {3}), g.leaf("y", {2})});
          return weighted_sum(g, g.slice(c, 1, 3), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {4, 3});
    run("gather rows (with repeats)",
        [&](Graph& g) {
          return weighted_sum(g, g.gather_rows(g.leaf("x", {4, 3}), {2, 0, 2}), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {4, 3});
    run("gather entries (with repeats)",
        [&](Graph& g) {
          return weighted_sum(
              g, g.gather_entries(g.leaf("x", {4, 3}), {{0, 1}, {3, 2}, {0, 1}}), rng);
        },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {8});
    run("relu", [&](Graph& g) { return weighted_sum(g, g.relu(g.leaf("x", {8})), rng); }, b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {8});
    run("hinge", [&](Graph& g) { return weighted_sum(g, g.hinge(g.leaf("x", {8})), rng); }, b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {6});
    run("sigmoid", [&](Graph& g) { return weighted_sum(g, g.sigmoid(g.leaf("x", {6})), rng); },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {6});
    run("tanh", [&](Graph& g) { return weighted_sum(g, g.tanh_(g.leaf("x", {6})), rng); }, b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {3, 5});
    run("softmax", [&](Graph& g) { return weighted_sum(g, g.softmax(g.leaf("x", {3, 5})), rng); },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {3, 4});
    run("l2 normalize",
        [&](Graph& g) { return weighted_sum(g, g.l2_normalize(g.leaf("x", {3, 4})), rng); }, b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {5, 3});
    run("pairwise sq dist",
        [&](Graph& g) { return weighted_sum(g, g.pairwise_sq_dist(g.leaf("x", {5, 3})), rng); },
        b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {7});
    run("reduce sum", [&](Graph& g) { return g.reduce_sum(g.leaf("x", {7})); }, b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {7});
    run("reduce max", [&](Graph& g) { return g.reduce_max(g.leaf("x", {7})); }, b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {7});
    run("reduce min", [&](Graph& g) { return g.reduce_min(g.leaf("x", {7})); }, b);
  }
  {
    Bindings b;
    b["x"] = random_array(rng, {4, 5});
    run("softmax cross entropy",
        [&](Graph& g) { return g.softmax_cross_entropy(g.leaf("x", {4, 5}), {1, 0, 4, 2}); }, b);
  }
}

TEST_CASE("a planted backward bug is caught by the checker") {
  Graph g;
  NodeId x = g.leaf("x", {4});
  NodeId y = g.reduce_sum(g.relu(x));
  Bindings b;
  b["x"] = Array::vec({0.5, 1.5, -0.75, 2.0});
  g_grad_fault = {"relu", 0.25};
  auto report = grad_check(g, y, b);
  g_grad_fault = {};
  REQUIRE_FALSE(report.pass);
  REQUIRE_FALSE(report.failures.empty());
}

TEST_CASE("evaluation is pure and bit-identical across repeats") {
  Rng rng(99);
  Graph g;
  NodeId x = g.leaf("x", {4, 3});
  NodeId w = g.leaf("w", {3, 3});
  NodeId h = g.softmax(g.matmul(g.l2_normalize(x), w));
  NodeId root = g.reduce_sum(g.mul(h, h));
  Bindings b;
  b["x"] = random_array(rng, {4, 3});
  b["w"] = random_array(rng, {3, 3});
  Bindings before = b;

  Array v1 = evaluate(g, root, b);
  auto g1 = backward(g, root, b);
  Array v2 = evaluate(g, root, b);
  auto g2 = backward(g, root, b);

  REQUIRE(std::memcmp(v1.data.data(), v2.data.data(), sizeof(double) * v1.numel()) == 0);
  for (const auto& [name, arr] : g1) {
    REQUIRE(std::memcmp(arr.data.data(), g2.at(name).data.data(),
                        sizeof(double) * arr.numel()) == 0);
  }
  for (const auto& [name, arr] : before) {
    REQUIRE(std::memcmp(arr.data.data(), b.at(name).data.data(),
                        sizeof(double) * arr.numel()) == 0);
  }
}

TEST_CASE("a session tolerates the graph growing between evaluations") {
  Graph g;
  NodeId x = g.leaf("x", {3});
  NodeId s1 = g.reduce_sum(x);
  Bindings b;
  b["x"] = Array::vec({1.0, 2.0, 3.0});
  Session s(g, b);
  REQUIRE(s.eval(s1).data[0] == 6.0);
  NodeId s2 = g.reduce_sum(g.mul(x, x));
  REQUIRE(s.eval(s2).data[0] == 14.0);
  auto grads = s.backward(s2);
  REQUIRE(grads.at("x").data == std::vector<double>{2.0, 4.0, 6.0});
}
