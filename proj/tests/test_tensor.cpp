#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "dwdn/gradcheck.hpp"
#include "dwdn/ops.hpp"
#include "test_util.hpp"

using namespace dwdn;
using namespace dwdn::ops;
using dwdn::testing::random_tensor;

TEST_CASE("softmax of equal logits is uniform") {
  const Tensor x = Tensor::full({1, 4}, 3.7);
  const Tensor y = softmax(x, 1);
  for (auto v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("matmul with identity returns the operand") {
  std::mt19937_64 rng(1);
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = random_tensor({2, 3}, rng);
  const Tensor c = matmul(eye, b);
  CHECK(c.shape() == Shape{2, 3});
  for (std::size_t i = 0; i < 6; ++i) CHECK(c.data()[i] == b.data()[i]);
}

TEST_CASE("l1 uses the mean over all elements") {
  const Tensor a = Tensor::from({2, 2}, {1, -2, 3, 0});
  const Tensor z = Tensor::zeros({2, 2});
  // Scalar loop oracle.
  double total = 0.0;
  for (auto v : a.data()) total += std::abs(v);
  const double expected = total / 4.0;
  CHECK(total == 6.0);
  CHECK(l1(a, z).item() == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("shape errors name the op and both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  CHECK_THROWS_AS(concat({Tensor::zeros({2, 2}), Tensor::zeros({3, 3})}, 0), ShapeError);
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 0}), 1), ShapeError);
  CHECK_THROWS_AS(slice(Tensor::zeros({4}), 0, 3, 5), ShapeError);
  CHECK_THROWS_AS(add_bias(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("backward of sum gives ones") {
  Tensor x = Tensor::from({3}, {0.5, -1, 2}, true);
  Tensor loss = sum(x);
  loss.backward();
  for (auto g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum of squares gives 2x") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor loss = sum(mul(x, x));
  loss.backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("backward errors") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(mul(x, x).backward(), ShapeError);
  Tensor loss = sum(x);
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), Error);
  CHECK_THROWS_AS(sum(Tensor::zeros({2})).backward(), Error);
}

TEST_CASE("composite softmax + matmul loss matches finite differences") {
  std::mt19937_64 rng(7);
  const Tensor a = random_tensor({3, 3}, rng);
  const Tensor x = random_tensor({3, 3}, rng);
  const double err = grad_check([&](const Tensor& v) { return sum(mul(softmax(matmul(a, v), 1), a)); }, x);
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({4}, rng);
  CHECK(grad_check([](const Tensor& v) { return sum(mul(v, v)); }, x) < 1e-6);
  CHECK(grad_check([](const Tensor&) { return Tensor::scalar(2.5); }, x) == 0.0);
  CHECK_THROWS_AS(grad_check([](const Tensor& v) { return scale(sum(v), std::nan("")); }, x), Error);
}

namespace {

// Reduces any op output to a scalar with fixed random weights so every output
// element reaches the loss with a distinct coefficient.
Tensor weighted(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

}  // namespace

TEST_CASE("every op matches finite differences over 100 seeds") {
  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&, std::mt19937_64&)>>> cases = {
      {"matmul_left", [](const Tensor& x, std::mt19937_64& r) { return matmul(x, random_tensor({3, 2}, r)); }},
      {"matmul_right", [](const Tensor& x, std::mt19937_64& r) { return matmul(random_tensor({2, 4}, r), x); }},
      {"add_bias", [](const Tensor& x, std::mt19937_64& r) { return add_bias(x, random_tensor({3}, r)); }},
      {"bias_grad", [](const Tensor& x, std::mt19937_64& r) { return add_bias(random_tensor({5, 4, 3}, r), slice(x, 0, 0, 1)); }},
      {"add", [](const Tensor& x, std::mt19937_64& r) { return add(x, random_tensor(x.shape(), r)); }},
      {"sub", [](const Tensor& x, std::mt19937_64& r) { return sub(random_tensor(x.shape(), r), x); }},
      {"mul", [](const Tensor& x, std::mt19937_64& r) { return mul(x, random_tensor(x.shape(), r)); }},
      {"mul_self", [](const Tensor& x, std::mt19937_64&) { return mul(x, x); }},
      {"scale", [](const Tensor& x, std::mt19937_64&) { return scale(x, -1.7); }},
      {"tanh", [](const Tensor& x, std::mt19937_64&) { return tanh(x); }},
      {"sigmoid", [](const Tensor& x, std::mt19937_64&) { return sigmoid(x); }},
      {"softmax0", [](const Tensor& x, std::mt19937_64&) { return softmax(x, 0); }},
      {"softmax1", [](const Tensor& x, std::mt19937_64&) { return softmax(x, 1); }},
      {"mean0", [](const Tensor& x, std::mt19937_64&) { return mean(x, 0); }},
      {"mean1", [](const Tensor& x, std::mt19937_64&) { return mean(x, 1); }},
      {"concat0", [](const Tensor& x, std::mt19937_64& r) { return concat({x, random_tensor({2, 3}, r), x}, 0); }},
      {"concat1", [](const Tensor& x, std::mt19937_64& r) { return concat({random_tensor({4, 1}, r), x}, 1); }},
      {"slice0", [](const Tensor& x, std::mt19937_64&) { return slice(x, 0, 1, 3); }},
      {"slice1", [](const Tensor& x, std::mt19937_64&) { return slice(x, 1, 1, 2); }},
      {"reshape", [](const Tensor& x, std::mt19937_64&) { return reshape(x, {2, 6}); }},
      {"tile", [](const Tensor& x, std::mt19937_64&) { return tile(x, 3, 2); }},
      {"permute_rows", [](const Tensor& x, std::mt19937_64&) {
         const std::vector<std::size_t> idx{2, 0, 3, 1};
         return permute_rows(x, idx);
       }},
      {"l1", [](const Tensor& x, std::mt19937_64& r) { return l1(x, random_tensor(x.shape(), r)); }},
  };
  for (const auto& [name, op] : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      const Tensor x = random_tensor({4, 3}, rng);
      const std::uint64_t op_seed = seed * 7919 + 1;
      const double err = grad_check(
          [&](const Tensor& v) {
            std::mt19937_64 r(op_seed);
            return weighted(op(v, r), op_seed + 1);
          },
          x, 1e-5);  // small step: the l1 kink must stay outside the stencil
      worst = std::max(worst, err);
    }
    INFO("op: " << std::string(name));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("softmax outputs are positive and sum to one") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor x = random_tensor({3, 5, 4}, rng, false, 10.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor y = softmax(x, axis);
      const Tensor totals = mean(y, axis);
      for (auto v : y.data()) CHECK(v > 0.0);
      for (auto v : totals.data()) CHECK(std::abs(v * static_cast<double>(x.dim(axis)) - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("concat then slice at the same boundaries is the identity") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor a = random_tensor({2, 3, 4}, rng);
    const Tensor b = random_tensor({2, 5, 4}, rng);
    const Tensor c = concat({a, b}, 1);
    const Tensor a2 = slice(c, 1, 0, 3);
    const Tensor b2 = slice(c, 1, 3, 8);
    CHECK(a2.shape() == a.shape());
    CHECK(b2.shape() == b.shape());
    CHECK(std::equal(a.data().begin(), a.data().end(), a2.data().begin()));
    CHECK(std::equal(b.data().begin(), b.data().end(), b2.data().begin()));
  }
}

TEST_CASE("backward is linear in the loss") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = random_tensor({3, 4}, rng, true);
    const Tensor w = random_tensor({4, 2}, rng);
    auto loss1 = [&] { return sum(tanh(matmul(x, w))); };
    auto loss2 = [&] { return sum(mul(softmax(x, 1), x)); };

    add(loss1(), loss2()).backward();
    const std::vector<Scalar> joint(x.grad().begin(), x.grad().end());
    x.zero_grad();
    loss1().backward();
    loss2().backward();  // leaf gradients accumulate across separate losses
    for (std::size_t i = 0; i < joint.size(); ++i) CHECK(std::abs(joint[i] - x.grad()[i]) < 1e-10);
  }
}

TEST_CASE("results detach from the graph when no input requires grad") {
  const Tensor a = Tensor::from({2}, {1, 2});
  const Tensor y = add(a, a);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("grad has the data shape after backward") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({2, 3}, rng, true);
  Tensor y = random_tensor({3, 4}, rng, true);
  sum(matmul(x, y)).backward();
  CHECK(x.grad().size() == x.numel());
  CHECK(y.grad().size() == y.numel());
}
