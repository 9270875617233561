#include <catch2/catch_amalgamated.hpp>

#include "asr/gradcheck.hpp"
#include "asr/ops.hpp"
#include "test_util.hpp"

using namespace asr;
using asr::testing::random_tensor;

namespace {

// Fixed random weights turn any tensor into a scalar probe so the check
// exercises every output element with distinct sensitivities.
template <typename T>
Tensor<T> weighted_probe(const Tensor<T>& y, std::mt19937_64& rng) {
  auto w = random_tensor<T>(y.shape(), rng, 0.1, 1.0);
  return sum_all(mul(y, w));
}

}  // namespace

TEST_CASE("gradcheck: elementwise and activation ops") {
  std::mt19937_64 rng(11);
  for (int inst = 0; inst < 10; ++inst) {
    auto x = random_tensor<double>({3, 4}, rng, -2.0, 2.0, true);
    auto b = random_tensor<double>({3, 4}, rng, -2.0, 2.0, true);
    std::mt19937_64 wrng(100 + inst);

    SECTION("instance " + std::to_string(inst)) {}

    auto check = [&](auto fn, std::vector<Tensor<double>> params) {
      std::mt19937_64 probe_rng(wrng());
      auto loss = [&]() {
        std::mt19937_64 r2(42);  // same probe weights on every call
        return weighted_probe<double>(fn(), r2);
      };
      auto res = grad_check<double>(loss, params, 1e-5);
      REQUIRE(res.max_rel_err < 1e-4);
    };

    check([&] { return add(x, b); }, {x, b});
    check([&] { return sub(x, b); }, {x, b});
    check([&] { return mul(x, b); }, {x, b});
    check([&] { return scalar_mul(x, 1.7); }, {x});
    check([&] { return scalar_add(x, -0.3); }, {x});
    check([&] { return relu(x); }, {x});
    check([&] { return elu(x); }, {x});
    check([&] { return sigmoid(x); }, {x});
    check([&] { return mean_all(x); }, {x});
  }
}

TEST_CASE("gradcheck: pow on positive inputs") {
  std::mt19937_64 rng(13);
  for (int inst = 0; inst < 10; ++inst) {
    auto x = random_tensor<double>({4, 4}, rng, 0.05, 0.95, true);
    auto loss = [&]() { return sum_all(pow_scalar(x, 0.75)); };
    auto res = grad_check<double>(loss, {x}, 1e-6);
    REQUIRE(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("gradcheck: conv2d weights, bias and input") {
  std::mt19937_64 rng(17);
  auto x = random_tensor<double>({2, 3, 8, 8}, rng, -1.0, 1.0, true);
  auto w = random_tensor<double>({4, 3, 3, 3}, rng, -0.5, 0.5, true);
  auto b = random_tensor<double>({4}, rng, -0.5, 0.5, true);
  auto loss = [&]() { return sum_all(conv2d(x, w, b, 1, 0)); };
  std::mt19937_64 pick(1);
  auto res = grad_check<double>(loss, {w, b}, 1e-5);
  REQUIRE(res.checked == 112);
  REQUIRE(res.max_rel_err < 1e-4);
  auto res_in = grad_check<double>(loss, {x}, 1e-5, 40, &pick);
  REQUIRE(res_in.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: conv2d with stride and padding") {
  std::mt19937_64 rng(19);
  auto x = random_tensor<double>({2, 2, 7, 7}, rng, -1.0, 1.0, true);
  auto w = random_tensor<double>({3, 2, 3, 3}, rng, -0.5, 0.5, true);
  auto b = random_tensor<double>({3}, rng, -0.5, 0.5, true);
  auto probe = random_tensor<double>({2, 3, 4, 4}, rng, 0.1, 1.0);
  auto loss = [&]() { return sum_all(mul(conv2d(x, w, b, 2, 1), probe)); };
  std::mt19937_64 pick(2);
  auto res = grad_check<double>(loss, {x, w, b}, 1e-5, 30, &pick);
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: dense") {
  std::mt19937_64 rng(23);
  auto x = random_tensor<double>({3, 5}, rng, -1.0, 1.0, true);
  auto w = random_tensor<double>({5, 4}, rng, -0.5, 0.5, true);
  auto b = random_tensor<double>({4}, rng, -0.5, 0.5, true);
  auto probe = random_tensor<double>({3, 4}, rng, 0.1, 1.0);
  auto loss = [&]() { return sum_all(mul(dense(x, w, b), probe)); };
  auto res = grad_check<double>(loss, {x, w, b}, 1e-5);
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: batchnorm2d train and eval") {
  std::mt19937_64 rng(29);
  auto x = random_tensor<double>({3, 2, 4, 4}, rng, -1.0, 1.0, true);
  auto gamma = random_tensor<double>({2}, rng, 0.5, 1.5, true);
  auto beta = random_tensor<double>({2}, rng, -0.5, 0.5, true);
  auto probe = random_tensor<double>({3, 2, 4, 4}, rng, 0.1, 1.0);

  for (bool train : {true, false}) {
    auto rm = Tensor<double>::zeros({2});
    auto rv = Tensor<double>::full({2}, 1.0);
    auto loss = [&]() {
      return sum_all(mul(batchnorm2d(x, gamma, beta, rm, rv, train), probe));
    };
    std::mt19937_64 pick(3);
    auto res = grad_check<double>(loss, {x, gamma, beta}, 1e-5, 40, &pick);
    INFO("train=" << train);
    REQUIRE(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("gradcheck: maxpool and upsample") {
  std::mt19937_64 rng(31);
  auto x = random_tensor<double>({2, 2, 6, 6}, rng, -1.0, 1.0, true);
  auto probe_p = random_tensor<double>({2, 2, 3, 3}, rng, 0.1, 1.0);
  auto loss_pool = [&]() { return sum_all(mul(maxpool2d(x, 2, 2), probe_p)); };
  auto res = grad_check<double>(loss_pool, {x}, 1e-6);
  REQUIRE(res.max_rel_err < 1e-4);

  auto probe_u = random_tensor<double>({2, 2, 12, 12}, rng, 0.1, 1.0);
  auto loss_up = [&]() { return sum_all(mul(upsample_nearest_2x(x), probe_u)); };
  auto res_up = grad_check<double>(loss_up, {x}, 1e-5);
  REQUIRE(res_up.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: grid_sample input and grid") {
  std::mt19937_64 rng(37);
  for (int inst = 0; inst < 5; ++inst) {
    auto input = random_tensor<double>({1, 6, 6}, rng, 0.0, 1.0, true);
    auto grid = random_tensor<double>({4, 4, 2}, rng, -0.9, 0.9, true);
    auto probe = random_tensor<double>({1, 4, 4}, rng, 0.1, 1.0);
    auto loss = [&]() { return sum_all(mul(grid_sample_bilinear(input, grid), probe)); };
    auto res = grad_check<double>(loss, {input, grid}, 1e-6);
    REQUIRE(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("gradcheck: reductions, reshape, slicing") {
  std::mt19937_64 rng(41);
  auto x = random_tensor<double>({2, 6, 3, 3}, rng, -1.0, 1.0, true);
  auto probe = random_tensor<double>({2, 3, 3, 3}, rng, 0.1, 1.0);
  auto loss_slice = [&]() { return sum_all(mul(slice_channels(x, 3, 3), probe)); };
  REQUIRE(grad_check<double>(loss_slice, {x}, 1e-5).max_rel_err < 1e-4);

  auto s = random_tensor<double>({2, 3}, rng, -1.0, 1.0, true);
  auto probe_e = random_tensor<double>({2, 3, 4, 4}, rng, 0.1, 1.0);
  auto loss_exp = [&]() { return sum_all(mul(expand_nc(s, 4, 4), probe_e)); };
  REQUIRE(grad_check<double>(loss_exp, {s}, 1e-5).max_rel_err < 1e-4);

  auto loss_reshape = [&]() {
    return mean_all(reshape_copy(x, {2, 54}));
  };
  REQUIRE(grad_check<double>(loss_reshape, {x}, 1e-5).max_rel_err < 1e-4);
}
