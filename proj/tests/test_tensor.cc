#include <cmath>
#include <sstream>

#include "doctest.h"
#include "mtner/tensor.h"
#include "test_util.h"

using namespace mtner;
using mtner::testing::max_abs_diff;
using mtner::testing::probe;
using mtner::testing::random_tensor;

TEST_CASE("matmul small products") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  Tensor c = matmul(eye, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{3, 4, 5, 6});

  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11.0);

  Rng rng(3);
  Tensor z = matmul(Tensor::zeros({2, 3}), random_tensor(rng, {3, 2}));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions and names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  Tensor a = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (double v : a.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  Tensor b = softmax(Tensor::from({2}, {1000, 1000}), 0);
  CHECK(b.at(0) == 0.5);
  CHECK(b.at(1) == 0.5);
  Tensor c = softmax(Tensor::from({2}, {0, std::log(3.0)}), 0);
  CHECK(std::abs(c.at(0) - 0.25) < 1e-15);
  CHECK(std::abs(c.at(1) - 0.75) < 1e-15);
}

TEST_CASE("softmax rows sum to one for arbitrary finite input") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng.below(5), cols = 1 + rng.below(9);
    const double range = std::pow(10.0, rng.uniform(-2.0, 3.0));
    Tensor x = random_tensor(rng, {rows, cols}, -range, range, false);
    for (std::size_t axis = 0; axis < 2; ++axis) {
      Tensor y = softmax(x, axis);
      const std::size_t outer = axis == 0 ? cols : rows, inner = axis == 0 ? rows : cols;
      for (std::size_t o = 0; o < outer; ++o) {
        double total = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          const double v = axis == 0 ? y.at(i, o) : y.at(o, i);
          CHECK(v >= 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("softmax rejects a bad axis") {
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), DimensionError);
}

TEST_CASE("layer_norm_stats uses population statistics") {
  auto s1 = layer_norm_stats(Tensor::from({3}, {1, 1, 1}));
  CHECK(s1.mean == 1.0);
  CHECK(s1.stddev == 0.0);
  auto s2 = layer_norm_stats(Tensor::from({2}, {1, -1}));
  CHECK(s2.mean == 0.0);
  CHECK(s2.stddev == 1.0);
  auto s3 = layer_norm_stats(Tensor::from({3}, {0, 2, 4}));
  CHECK(s3.mean == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(s3.stddev == doctest::Approx(std::sqrt(8.0 / 3.0)).epsilon(1e-15));
}

TEST_CASE("concat shapes and values") {
  Rng rng(5);
  Tensor a = random_tensor(rng, {2, 3});
  Tensor single = concat({a}, 0);
  CHECK(max_abs_diff(single, a) == 0.0);

  Tensor rows = concat({Tensor::from({1, 1}, {1}), Tensor::from({1, 1}, {2})}, 0);
  CHECK(rows.shape() == Shape{2, 1});
  CHECK(rows.at(0, 0) == 1.0);
  CHECK(rows.at(1, 0) == 2.0);

  const std::size_t n = 4, t = 3, d = 5;
  Tensor kr = random_tensor(rng, {n, d}), kt = random_tensor(rng, {t, d}),
         k = random_tensor(rng, {n, d});
  Tensor all = concat({kr, kt, k}, 0);
  CHECK(all.shape() == Shape{2 * n + t, d});
  CHECK(all.at(n, 2) == kt.at(0, 2));
  CHECK(all.at(n + t, 4) == k.at(0, 4));

  Tensor cols = concat({random_tensor(rng, {2, 2}), random_tensor(rng, {2, 3})}, 1);
  CHECK(cols.shape() == Shape{2, 5});

  CHECK_THROWS_AS(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0), DimensionError);
}

TEST_CASE("conv2d examples") {
  Rng rng(8);
  Tensor x = random_tensor(rng, {4, 4, 1});
  Tensor ones = Tensor::full({1, 1, 1, 1}, 1.0);
  CHECK(max_abs_diff(conv2d(x, ones, Tensor()), x) == 0.0);

  Tensor zero_in = Tensor::zeros({5, 5, 2});
  Tensor kernel = random_tensor(rng, {3, 3, 2, 3});
  Tensor zero_out = conv2d(zero_in, kernel, Tensor());
  for (double v : zero_out.data()) CHECK(v == 0.0);

  std::vector<double> delta(9, 0.0);
  delta[4] = 1.0;  // centre tap
  Tensor delta_kernel = Tensor::from({3, 3, 1, 1}, delta);
  CHECK(max_abs_diff(conv2d(x, delta_kernel, Tensor()), x) == 0.0);

  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({2, 2, 1, 1}), Tensor()), DimensionError);
}

TEST_CASE("conv2d matches a direct sum with zero padding") {
  Rng rng(21);
  const std::size_t n = 5, cin = 2, cout = 3, k = 3;
  Tensor x = random_tensor(rng, {n, n, cin});
  Tensor w = random_tensor(rng, {k, k, cin, cout});
  Tensor b = random_tensor(rng, {cout});
  Tensor y = conv2d(x, w, b);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = b.at(o);
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = static_cast<int>(i) + di, jj = static_cast<int>(j) + dj;
            if (ii < 0 || jj < 0 || ii >= static_cast<int>(n) || jj >= static_cast<int>(n)) {
              continue;
            }
            for (std::size_t c = 0; c < cin; ++c) {
              acc += x.data()[(ii * n + jj) * cin + c] *
                     w.data()[(((di + 1) * k + (dj + 1)) * cin + c) * cout + o];
            }
          }
        CHECK(std::abs(y.at(i, j, o) - acc) < 1e-12);
      }
}

TEST_CASE("backward examples") {
  Tensor x = Tensor::from({3}, {0.5, -2.0, 7.0}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = Tensor::from({1}, {2.0}, true);
  backward(sum(mul(y, y)));
  CHECK(y.grad()[0] == 4.0);

  Tensor z = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor d = z.detach();
  backward(sum(mul(d, Tensor::from({2}, {3.0, 4.0}, true))));
  CHECK_FALSE(d.has_grad());
  CHECK_FALSE(d.requires_grad());

  CHECK_THROWS_AS(backward(mul(x, x)), DimensionError);
}

TEST_CASE("repeated backward accumulates leaf gradients") {
  Tensor x = Tensor::from({2}, {1.0, 3.0}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == 12.0);
  Graph::current().clear();
}

TEST_CASE("backward visits nodes in reverse append order") {
  Graph& g = Graph::current();
  g.clear();
  std::vector<int> visits;
  Tensor x = Tensor::from({1}, {1.0}, true);
  Tensor a = scale(x, 2.0);
  Tensor b = scale(a, 3.0);
  Tensor loss = sum(b);
  const std::size_t base = g.size();
  CHECK(base == 3);
  // Two probes appended after the real ops, both hanging off the loss; they
  // must run first and in reverse order.
  g.record(loss, [&visits]() { visits.push_back(1); });
  g.record(loss, [&visits]() { visits.push_back(2); });
  g.backward(loss);
  CHECK(visits == std::vector<int>{2, 1});
  CHECK(x.grad()[0] == 6.0);
  g.clear();
}

TEST_CASE("gradient of a sum of losses is the sum of separate gradients") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {3, 4});
    Tensor w = random_tensor(rng, {4, 2});
    auto l1 = [&]() { return sum(tanh(matmul(x, w))); };
    auto l2 = [&]() { return mean(exp(scale(x, 0.5))); };

    backward(add(l1(), l2()));
    std::vector<double> together(x.grad().begin(), x.grad().end());
    x.zero_grad();
    w.zero_grad();
    backward(l1());
    backward(l2());
    for (std::size_t i = 0; i < together.size(); ++i) {
      CHECK(std::abs(together[i] - x.grad()[i]) < 1e-12);
    }
    Graph::current().clear();
  }
}

TEST_CASE("matmul is associative on random 4x4 triples") {
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = random_tensor(rng, {4, 4}, -1, 1, false), b = random_tensor(rng, {4, 4}, -1, 1, false),
           c = random_tensor(rng, {4, 4}, -1, 1, false);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-9);
  }
}

TEST_CASE("finite_diff_check contract examples") {
  Rng rng(51);
  Tensor x = random_tensor(rng, {6});
  CHECK(finite_diff_check([](const Tensor& v) { return sum(v); }, x, 1e-5) <= 1e-9);

  Tensor y = random_tensor(rng, {5});
  auto pick = [](const Tensor& v) { return sum(slice_cols(reshape(softmax(v, 0), {1, 5}), 2, 1)); };
  CHECK(finite_diff_check(pick, y, 1e-5) <= 1e-5);

  Tensor c = Tensor::scalar(3.0);
  CHECK(finite_diff_check([c](const Tensor&) { return c; }, x, 1e-5) == 0.0);

  CHECK_THROWS(finite_diff_check([](const Tensor& v) { return sum(v); }, x, 1e-2));
}

TEST_CASE("non-finite results raise NumericError") {
  CHECK_THROWS_AS(log(Tensor::from({1}, {-1.0})), NumericError);
  CHECK_THROWS_AS(exp(Tensor::from({1}, {1e6})), NumericError);
  CHECK_THROWS_AS(div_scalar(Tensor::from({1}, {1.0}), 0.0), NumericError);
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), NumericError);
}

// Every differentiable op at 20 seeded random points.
TEST_CASE("finite differences agree with backprop for every op") {
  using Fn = std::function<Tensor(const Tensor&)>;
  struct Case {
    const char* name;
    Shape shape;
    double lo, hi;
    Fn f;
  };
  Rng aux(7);
  const Tensor other = random_tensor(aux, {3, 4}, -1, 1, false);
  const Tensor row = random_tensor(aux, {4}, -1, 1, false);
  const Tensor right = random_tensor(aux, {4, 2}, -1, 1, false);
  const Tensor kernel = random_tensor(aux, {3, 3, 2, 2}, -1, 1, false);
  const Tensor bias2 = random_tensor(aux, {2}, -1, 1, false);
  const std::vector<int> ids = {4, 0, 4, 2};
  const RowMixture mixture = {{{0, 0.25}, {3, 0.75}}, {{1, 1.0}}, {{3, 0.5}, {3, 0.5}}};

  std::vector<Case> cases = {
      {"add", {3, 4}, -1, 1, [&](const Tensor& x) { return add(x, other); }},
      {"add_self", {3, 4}, -1, 1, [&](const Tensor& x) { return add(x, x); }},
      {"add_row_broadcast", {3, 4}, -1, 1, [&](const Tensor& x) { return add(other, slice_rows(x, 0, 1)); }},
      {"add_broadcast_lhs", {3, 4}, -1, 1, [&](const Tensor& x) { return add(x, row); }},
      {"sub", {3, 4}, -1, 1, [&](const Tensor& x) { return sub(other, x); }},
      {"mul", {3, 4}, -1, 1, [&](const Tensor& x) { return mul(x, other); }},
      {"mul_self", {3, 4}, -1, 1, [&](const Tensor& x) { return mul(x, x); }},
      {"mul_broadcast", {3, 4}, -1, 1, [&](const Tensor& x) { return mul(other, reshape(slice_rows(x, 1, 1), {4})); }},
      {"scale", {3, 4}, -1, 1, [](const Tensor& x) { return scale(x, -2.5); }},
      {"div_scalar", {3, 4}, -1, 1, [](const Tensor& x) { return div_scalar(x, 3.0); }},
      {"add_scalar", {3, 4}, -1, 1, [](const Tensor& x) { return add_scalar(x, 0.7); }},
      {"pow_scalar", {3, 4}, 0.2, 2, [](const Tensor& x) { return pow_scalar(x, 1.7); }},
      {"log", {3, 4}, 0.2, 2, [](const Tensor& x) { return log(x); }},
      {"exp", {3, 4}, -1, 1, [](const Tensor& x) { return exp(x); }},
      {"tanh", {3, 4}, -2, 2, [](const Tensor& x) { return tanh(x); }},
      {"relu", {3, 4}, -1, 1, [](const Tensor& x) { return relu(x); }},
      {"sum", {3, 4}, -1, 1, [](const Tensor& x) { return sum(mul(x, x)); }},
      {"mean", {3, 4}, -1, 1, [](const Tensor& x) { return mean(mul(x, x)); }},
      {"matmul_left", {3, 4}, -1, 1, [&](const Tensor& x) { return matmul(x, right); }},
      {"matmul_right", {3, 4}, -1, 1, [&](const Tensor& x) { return matmul(transpose(other), x); }},
      {"transpose", {3, 4}, -1, 1, [](const Tensor& x) { return transpose(x); }},
      {"reshape", {3, 4}, -1, 1, [](const Tensor& x) { return reshape(x, {2, 6}); }},
      {"concat_rows", {3, 4}, -1, 1, [&](const Tensor& x) { return concat({other, x, x}, 0); }},
      {"concat_cols", {3, 4}, -1, 1, [&](const Tensor& x) { return concat({x, other}, 1); }},
      {"slice_rows", {3, 4}, -1, 1, [](const Tensor& x) { return slice_rows(x, 1, 2); }},
      {"slice_cols", {3, 4}, -1, 1, [](const Tensor& x) { return slice_cols(x, 1, 2); }},
      {"gather_rows", {5, 4}, -1, 1, [&](const Tensor& x) { return gather_rows(x, ids); }},
      {"softmax_rows", {3, 4}, -2, 2, [](const Tensor& x) { return softmax(x, 1); }},
      {"softmax_cols", {3, 4}, -2, 2, [](const Tensor& x) { return softmax(x, 0); }},
      {"normalize_rows", {3, 4}, -2, 2, [](const Tensor& x) { return normalize_rows(x, 1e-5); }},
      {"conditional_grid", {3, 4}, -1, 1, [&](const Tensor& x) {
         return conditional_grid(x, other, normalize_rows(x, 1e-5));
       }},
      {"conv2d_input", {4, 4, 2}, -1, 1, [&](const Tensor& x) { return conv2d(x, kernel, bias2); }},
      {"conv2d_kernel", {3, 3, 2, 2}, -1, 1, [&](const Tensor& k) {
         Rng r(3);
         return conv2d(random_tensor(r, {4, 4, 2}, -1, 1, false), k, Tensor());
       }},
      {"max_over_first_axis", {3, 2, 4}, -1, 1, [](const Tensor& x) { return max_over_first_axis(x); }},
      {"mix_rows", {5, 4}, -1, 1, [&](const Tensor& x) { return mix_rows(x, mixture); }},
      {"linear", {3, 4}, -1, 1, [&](const Tensor& x) { return linear(x, right, bias2); }},
      {"linear_weight", {4, 2}, -1, 1, [&](const Tensor& w) { return linear(other, w, Tensor()); }},
  };

  for (const auto& c : cases) {
    CAPTURE(c.name);
    Rng rng(derive_seed(1234, c.name));
    double worst = 0.0;
    for (int point = 0; point < 20; ++point) {
      Tensor x = random_tensor(rng, c.shape, c.lo, c.hi);
      worst = std::max(worst, finite_diff_check([&](const Tensor& v) { return probe(c.f(v)); },
                                                x, 1e-6));
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("no_grad disables recording") {
  Graph::current().clear();
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(Graph::current().size() == 0);
  }
  CHECK(grad_enabled());
  Tensor y = mul(x, x);
  CHECK(y.requires_grad());
  CHECK(Graph::current().size() == 1);
  Graph::current().clear();
}

TEST_CASE("tensor dump round trip is exact") {
  Rng rng(61);
  Tensor t = random_tensor(rng, {2, 3, 2}, -1e3, 1e3, false);
  std::stringstream ss;
  dump_tensor(ss, t);
  CHECK(ss.str().rfind("shape: 2 3 2\ndata: ", 0) == 0);
  Tensor back = parse_tensor(ss);
  CHECK(back.shape() == t.shape());
  CHECK(max_abs_diff(back, t) == 0.0);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({0, 2}, {}), DimensionError);
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = a;
  CHECK(b.same_storage(a));
  Tensor c = a.clone();
  CHECK_FALSE(c.same_storage(a));
}
