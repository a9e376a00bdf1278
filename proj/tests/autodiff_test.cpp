#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "mllmreid/error.hpp"
#include "mllmreid/gradcheck.hpp"
#include "mllmreid/ops.hpp"
#include "mllmreid/optim.hpp"
#include "test_util.hpp"

using namespace mllmreid;
using namespace mllmreid::ad;
using testutil::rand_param;

TEST_CASE("matmul: hand-computed products and shape errors") {
  const Tensor a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  const Tensor eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
  const Tensor ae = matmul(a, eye);
  CHECK(std::vector<double>(ae.data().begin(), ae.data().end()) == std::vector<double>{1, 2, 3, 4});
  const Tensor b = Tensor::constant({2, 2}, {5, 6, 7, 8});
  const Tensor c = matmul(a, b);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{19, 22, 43, 50});

  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[2,3] x [2,3]") != std::string::npos);
  }
}

TEST_CASE("matmul: d sum(AB)/dA = ones * B^T, checked against central differences") {
  Tensor a = rand_param({3, 3}, 7, "A");
  const Tensor b = Tensor::constant({3, 3}, testutil::randn(9, 8));
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 3; ++p) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < 3; ++j) row_sum += b.at(p, j);
      CHECK(a.grad()[i * 3 + p] == doctest::Approx(row_sum).epsilon(1e-12));
    }
  std::vector<Tensor> in{a};
  CHECK(grad_check([&] { return sum(matmul(a, b)); }, in, 1e-5) <= 1e-6);
}

TEST_CASE("softmax_cross_entropy: closed forms and errors") {
  const std::vector<std::size_t> t0{0};
  CHECK(softmax_cross_entropy(Tensor::zeros({1, 4}), t0).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const double sat = softmax_cross_entropy(Tensor::constant({1, 2}, {10, -10}), t0).item();
  CHECK(sat == doctest::Approx(2.06e-9).epsilon(0.01));

  // Analytic gradient = (softmax - onehot) / (#unmasked rows)
  Tensor logits = rand_param({3, 5}, 3, "logits");
  const std::vector<std::size_t> t{1, 4, 2};
  const std::vector<double> w{1, 0, 1};
  backward(softmax_cross_entropy(logits, t, w));
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits.at(r, c));
    for (std::size_t c = 0; c < 5; ++c) {
      const double expect = w[r] * (std::exp(logits.at(r, c)) / z - (c == t[r] ? 1.0 : 0.0)) / 2.0;
      CHECK(logits.grad()[r * 5 + c] == doctest::Approx(expect).epsilon(1e-12));
    }
  }

  const std::vector<std::size_t> bad{5};
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor::zeros({1, 5}), bad), ValueError);
  const std::vector<double> none{0.0};
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor::zeros({1, 5}), t0, none), ValueError);
}

TEST_CASE("layer_norm: degenerate rows and gradient") {
  const Tensor g = Tensor::constant({2}, {1, 1});
  const Tensor be = Tensor::constant({2}, {0, 0});
  const Tensor flat = layer_norm(Tensor::constant({1, 2}, {3, 3}), g, be);
  CHECK(flat.at(0) == 0.0);
  CHECK(flat.at(1) == 0.0);
  const Tensor unit = layer_norm(Tensor::constant({1, 2}, {1, -1}), g, be, 1e-12);
  CHECK(unit.at(0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(unit.at(1) == doctest::Approx(-1.0).epsilon(1e-9));

  Tensor x = rand_param({2, 8}, 21, "x");
  Tensor gamma = rand_param({8}, 22, "gamma");
  Tensor beta = rand_param({8}, 23, "beta");
  const Tensor wts = Tensor::constant({2, 8}, testutil::randn(16, 24));
  std::vector<Tensor> in{x, gamma, beta};
  CHECK(grad_check([&] { return sum(mul(layer_norm(x, gamma, beta), wts)); }, in, 1e-5) <= 1e-6);
}

TEST_CASE("backward: basic calculus, error paths and single use") {
  Tensor x = Tensor::parameter({1}, {3.0}, "x");
  backward(mul(x, x));
  CHECK(x.grad()[0] == 6.0);

  Tensor y = Tensor::parameter({2, 3}, std::vector<double>(6, 0.5), "y");
  backward(sum(y));
  for (double g : y.grad()) CHECK(g == 1.0);

  CHECK_THROWS_AS(backward(scale(y, 2.0)), ShapeError);
  CHECK_THROWS_AS(backward(sum(Tensor::zeros({3}))), ValueError);

  const Tensor loss = sum(mul(y, y));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), ValueError);

  const Tape tape = Tape::record(sum(matmul(y, transpose(y))));
  CHECK(tape.size() == 3);
}

TEST_CASE("grad_check: exact functions, argument checks and a broken gradient") {
  Tensor x = rand_param({4, 3}, 5, "x");
  std::vector<Tensor> in{x};
  CHECK(grad_check([&] { return sum(mul(x, x)); }, in, 1e-5) <= 1e-8);

  Tensor logits = rand_param({4, 6}, 6, "logits");
  std::vector<Tensor> lin{logits};
  const std::vector<std::size_t> t{0, 5, 2, 3};
  CHECK(grad_check([&] { return softmax_cross_entropy(logits, t); }, lin, 1e-5) <= 1e-6);

  // sin with a deliberately wrong derivative (cos + 0.5)
  auto wrong_sin = [&] {
    std::vector<double> o(x.numel());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::sin(x.data()[i]);
    return sum(make_op("wrong_sin", {x}, x.shape(), std::move(o), [](const TensorImpl& out) {
      TensorImpl& tx = *out.node->inputs[0];
      for (std::size_t i = 0; i < out.grad.size(); ++i) tx.grad[i] += out.grad[i] * (std::cos(tx.data[i]) + 0.5);
    }));
  };
  CHECK(grad_check(wrong_sin, in, 1e-5) >= 1e-2);

  CHECK_THROWS_AS(grad_check([&] { return sum(x); }, in, 1e-2), ValueError);
  int calls = 0;
  CHECK_THROWS_AS(grad_check([&] { return add_scalar(sum(x), ++calls); }, in, 1e-5), ValueError);
}

namespace {

struct OpCase {
  const char* name;
  std::function<Tensor(std::vector<Tensor>&)> loss;
  std::vector<Shape> shapes;
};

// Random fixed weights turn a tensor-valued op into a scalar with
// non-degenerate upstream gradients.
Tensor weighted(const Tensor& t, std::uint64_t seed) {
  return sum(mul(t, Tensor::constant(t.shape(), testutil::randn(t.numel(), seed))));
}

std::vector<OpCase> op_cases() {
  const std::vector<std::size_t> ids{2, 0, 2, 4};
  const std::vector<std::size_t> rows{1, 3};
  const std::vector<std::vector<std::size_t>> groups{{0, 1}, {2}, {1, 3, 4}};
  const std::vector<std::size_t> targets{1, 0, 3, 2, 2, 1};
  const std::vector<double> mask{1, 0, 1, 1, 0, 1};
  const std::vector<std::size_t> flat{0, 5, 7, 7, 11};
  return {
      {"matmul", [](auto& v) { return weighted(matmul(v[0], v[1]), 1); }, {Shape{3, 4}, Shape{4, 5}}},
      {"linear", [](auto& v) { return weighted(linear(v[0], v[1], v[2]), 2); }, {Shape{3, 4}, Shape{4, 5}, Shape{5}}},
      {"transpose", [](auto& v) { return weighted(transpose(v[0]), 3); }, {Shape{3, 4}}},
      {"add", [](auto& v) { return weighted(add(v[0], v[1]), 4); }, {Shape{3, 4}, Shape{3, 4}}},
      {"sub", [](auto& v) { return weighted(sub(v[0], v[1]), 5); }, {Shape{3, 4}, Shape{3, 4}}},
      {"mul", [](auto& v) { return weighted(mul(v[0], v[1]), 6); }, {Shape{3, 4}, Shape{3, 4}}},
      {"scale", [](auto& v) { return weighted(scale(v[0], -1.7), 7); }, {Shape{3, 4}}},
      {"add_scalar", [](auto& v) { return weighted(add_scalar(v[0], 0.4), 8); }, {Shape{3, 4}}},
      {"add_tiled", [](auto& v) { return weighted(add_tiled(v[0], v[1]), 9); }, {Shape{6, 4}, Shape{2, 4}}},
      {"mean", [](auto& v) { return mean(mul(v[0], v[0])); }, {Shape{3, 4}}},
      {"relu", [](auto& v) { return weighted(relu(v[0]), 10); }, {Shape{4, 5}}},
      {"gelu", [](auto& v) { return weighted(gelu(v[0]), 11); }, {Shape{4, 5}}},
      {"layer_norm", [](auto& v) { return weighted(layer_norm(v[0], v[1], v[2]), 12); }, {Shape{3, 8}, Shape{8}, Shape{8}}},
      {"attention_causal", [](auto& v) { return weighted(attention(v[0], 5, 2, true), 13); }, {Shape{10, 12}}},
      {"attention_full", [](auto& v) { return weighted(attention(v[0], 4, 2, false), 14); }, {Shape{8, 12}}},
      {"softmax_cross_entropy", [=](auto& v) { return softmax_cross_entropy(v[0], targets, mask); }, {Shape{6, 4}}},
      {"embedding", [=](auto& v) { return weighted(embedding(v[0], ids), 15); }, {Shape{5, 3}}},
      {"gather_rows", [=](auto& v) { return weighted(gather_rows(v[0], rows), 16); }, {Shape{4, 3}}},
      {"slice_rows", [](auto& v) { return weighted(slice_rows(v[0], 1, 2), 17); }, {Shape{4, 3}}},
      {"replace_rows", [=](auto& v) { return weighted(replace_rows(v[0], rows, v[1]), 18); }, {Shape{4, 3}, Shape{2, 3}}},
      {"mean_rows_grouped", [=](auto& v) { return weighted(mean_rows_grouped(v[0], groups), 19); }, {Shape{5, 3}}},
      {"pairwise_distance", [](auto& v) { return weighted(pairwise_distance(v[0], v[1]), 20); }, {Shape{4, 3}, Shape{5, 3}}},
      {"l2_normalize_rows", [](auto& v) { return weighted(l2_normalize_rows(v[0]), 21); }, {Shape{4, 3}}},
      {"gather_elements", [=](auto& v) { return weighted(gather_elements(v[0], flat), 22); }, {Shape{3, 4}}},
  };
}

}  // namespace

TEST_CASE("every differentiable op passes a central-difference check on 10 seeds") {
  for (const OpCase& c : op_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::vector<Tensor> inputs;
      for (std::size_t i = 0; i < c.shapes.size(); ++i)
        inputs.push_back(rand_param(c.shapes[i], 1000 * seed + 17 * i + 1, c.name + std::to_string(i)));
      worst = std::max(worst, grad_check([&] { return c.loss(inputs); }, inputs, 1e-5));
    }
    INFO(c.name);
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("backward is linear in the loss") {
  Tensor w = rand_param({4, 6}, 31, "w");
  const Tensor x = Tensor::constant({3, 4}, testutil::randn(12, 32));
  auto l1 = [&] { return mean(gelu(matmul(x, w))); };
  auto l2 = [&] { return sum(mul(w, w)); };
  const double a = 0.7, b = -2.3;
  backward(l1());
  const std::vector<double> g1(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(l2());
  const std::vector<double> g2(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(add(scale(l1(), a), scale(l2(), b)));
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(w.grad()[i] - (a * g1[i] + b * g2[i])) <= 1e-10);
}

TEST_CASE("identical inputs give bit-identical values and gradients") {
  auto run = [] {
    Tensor qkv = rand_param({8, 12}, 99, "qkv");
    Tensor g = rand_param({4}, 98, "g");
    Tensor be = rand_param({4}, 97, "b");
    const Tensor loss = weighted(layer_norm(attention(qkv, 4, 2, true), g, be), 96);
    backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), qkv.grad().begin(), qkv.grad().end());
    return out;
  };
  const auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite results are rejected") {
  const std::vector<double> big{1e308, 1e308};
  CHECK_THROWS_AS(scale(Tensor::constant({2}, big), 10.0), NumericError);
}

TEST_CASE("adam_step: first step size, zero gradients, convergence, missing grads") {
  {
    Tensor p = Tensor::parameter({3}, {1.0, -2.0, 0.5}, "p");
    OptimizerState st(AdamConfig{.lr = 0.01});
    backward(sum(scale(p, 4.0)));  // constant gradient 4
    std::vector<Tensor> ps{p};
    adam_step(ps, st);
    CHECK(p.at(0) == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(p.at(1) == doctest::Approx(-2.0 - 0.01).epsilon(1e-6));
    CHECK_FALSE(p.has_grad());
    CHECK(st.step == 1);
  }
  {
    Tensor p = Tensor::parameter({2}, {0.3, -0.4}, "p");
    OptimizerState st;
    backward(scale(sum(p), 0.0));
    std::vector<Tensor> ps{p};
    adam_step(ps, st);
    CHECK(p.at(0) == 0.3);
    CHECK(p.at(1) == -0.4);
  }
  {
    const std::vector<double> c{1.5, -0.5, 2.0, 0.25};
    Tensor x = Tensor::parameter({4}, std::vector<double>(4, 0.0), "x");
    const Tensor target = Tensor::constant({4}, c);
    OptimizerState st(AdamConfig{.lr = 0.05});
    std::vector<Tensor> ps{x};
    for (int i = 0; i < 200; ++i) {
      const Tensor d = sub(x, target);
      backward(sum(mul(d, d)));
      adam_step(ps, st);
    }
    double n2 = 0.0;
    for (std::size_t i = 0; i < 4; ++i) n2 += (x.at(i) - c[i]) * (x.at(i) - c[i]);
    CHECK(std::sqrt(n2) < 1e-2);
  }
  {
    Tensor p = Tensor::parameter({2}, {0.0, 0.0}, "lonely");
    OptimizerState st;
    std::vector<Tensor> ps{p};
    try {
      adam_step(ps, st);
      FAIL("expected missing-gradient error");
    } catch (const ValueError& e) {
      CHECK(std::string(e.what()).find("lonely") != std::string::npos);
    }
  }
}
