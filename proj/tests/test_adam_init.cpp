#include <catch2/catch_amalgamated.hpp>

#include "asr/adam.hpp"
#include "asr/init.hpp"
#include "asr/ops.hpp"
#include "asr/tape.hpp"

using namespace asr;

TEST_CASE("adam: zero gradient leaves parameter unchanged") {
  auto p = Tensor<float>::full({3}, 1.5f, true);
  Adam<float> opt({p});
  opt.zero_grad();
  opt.step();
  for (int i = 0; i < 3; ++i) REQUIRE(p.data()[i] == 1.5f);
}

TEST_CASE("adam: first bias-corrected step equals roughly the learning rate") {
  // m_hat = v_hat = 1 after one unit-gradient step, so the update is
  // lr / (1 + eps) ~= lr.
  auto p = Tensor<double>::scalar(1.0, true);
  Adam<double> opt({p});
  opt.zero_grad();
  p.grad()[0] = 1.0;
  opt.step();
  REQUIRE(p.item() == Catch::Approx(0.999).epsilon(1e-6));
}

TEST_CASE("adam: missing gradient is a contract error") {
  auto p = Tensor<float>::full({2}, 1.0f, true);
  Adam<float> opt({p});
  REQUIRE_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("adam: descends x^2 from x=1") {
  auto x = Tensor<double>::scalar(1.0, true);
  Adam<double> opt({x}, {.lr = 0.01});
  double prev = 1.0;
  for (int step = 0; step < 100; ++step) {
    opt.zero_grad();
    Tape<double> tape;
    Tensor<double> f;
    {
      TapeScope<double> scope(tape);
      f = mul(x, x);
      tape.backward(f);
    }
    opt.step();
  }
  const double fx = x.item() * x.item();
  REQUIRE(fx < prev);
  REQUIRE(fx < 0.75);  // strictly decreased and made real progress
}

TEST_CASE("adam: f(x)=x^2 strictly decreases along the trajectory") {
  auto x = Tensor<double>::scalar(1.0, true);
  Adam<double> opt({x}, {.lr = 0.001});
  double prev = 1.0;
  for (int step = 0; step < 100; ++step) {
    opt.zero_grad();
    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      auto f = mul(x, x);
      tape.backward(f);
    }
    opt.step();
    const double fx = x.item() * x.item();
    REQUIRE(fx < prev);
    prev = fx;
  }
}

TEST_CASE("xavier uniform respects the fan bound") {
  auto rng = make_rng(5);
  auto w = Tensor<float>::zeros({9, 9});
  xavier_uniform(w, 9, 9, rng);
  const double bound = xavier_bound(9, 9);
  REQUIRE(bound == Catch::Approx(std::sqrt(6.0 / 18.0)));
  for (int64_t i = 0; i < w.numel(); ++i) {
    REQUIRE(std::fabs(w.data()[i]) <= bound);
  }
}

TEST_CASE("same seed gives bit-identical draws") {
  auto rng1 = make_rng(99);
  auto rng2 = make_rng(99);
  auto a = Tensor<float>::zeros({64});
  auto b = Tensor<float>::zeros({64});
  xavier_uniform(a, 10, 10, rng1);
  xavier_uniform(b, 10, 10, rng2);
  for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == b.data()[i]);

  auto c = Tensor<float>::zeros({32});
  auto d = Tensor<float>::zeros({32});
  normal_init(c, 0.0, 1.0, rng1);
  normal_init(d, 0.0, 1.0, rng2);
  for (int64_t i = 0; i < c.numel(); ++i) REQUIRE(c.data()[i] == d.data()[i]);
}

TEST_CASE("float and double models see identical init sequences") {
  auto rng1 = make_rng(123);
  auto rng2 = make_rng(123);
  auto f = Tensor<float>::zeros({16});
  auto d = Tensor<double>::zeros({16});
  xavier_uniform(f, 4, 4, rng1);
  xavier_uniform(d, 4, 4, rng2);
  for (int64_t i = 0; i < 16; ++i) {
    REQUIRE(f.data()[i] == Catch::Approx(d.data()[i]).margin(1e-7));
  }
}
