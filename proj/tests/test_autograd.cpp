#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "scdiff/autograd.hpp"
#include "scdiff/errors.hpp"
#include "scdiff/nn.hpp"
#include "support.hpp"

using namespace scdiff;
using support::central_difference;
using support::random_tensor;
using support::rel_err;

namespace {

// Checks every input gradient of sum(w * op(inputs)) against central differences.
void check_op(const std::function<ag::Var(const std::vector<ag::Var>&)>& op, std::vector<Tensor> inputs,
              double h = 1e-5, double tol = 1e-6) {
  std::mt19937_64 rng(11);
  std::vector<ag::Var> leaves;
  for (auto& t : inputs) leaves.push_back(ag::leaf(t));
  const ag::Var out = op(leaves);
  const Tensor w = random_tensor(out.shape(), rng);
  ag::backward(ag::sum(ag::mul(out, ag::constant(w))));
  auto value = [&] {
    ag::NoGradGuard g;
    const ag::Var o = op(leaves);
    double s = 0;
    for (std::size_t i = 0; i < o.value().size(); ++i) s += o.value()[i] * w[i];
    return s;
  };
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    ag::Var& x = leaves[k];
    const Tensor analytic = x.grad();
    for (std::size_t i = 0; i < x.value().size(); i += std::max<std::size_t>(1, x.value().size() / 25)) {
      const double numeric = central_difference(value, x.mutable_value()[i], h);
      INFO("input " << k << " index " << i);
      CHECK(rel_err(analytic[i], numeric, 1e-4) < tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  check_op([](auto& v) { return ag::add(v[0], v[1]); }, {a, b});
  check_op([](auto& v) { return ag::sub(v[0], v[1]); }, {a, b});
  check_op([](auto& v) { return ag::mul(v[0], v[1]); }, {a, b});
  check_op([](auto& v) { return ag::scale(v[0], -2.5); }, {a});
  check_op([](auto& v) { return ag::abs(v[0]); }, {a});
  check_op([](auto& v) { return ag::square(v[0]); }, {a});
  check_op([](auto& v) { return ag::silu(v[0]); }, {a});
  check_op([](auto& v) { return ag::tanh(v[0]); }, {a});
  check_op([](auto& v) { return ag::log_sigmoid(v[0]); }, {a});
  check_op([](auto& v) { return ag::mean(v[0]); }, {a});
}

TEST_CASE("shape ops and dense layers match finite differences") {
  std::mt19937_64 rng(2);
  check_op([](auto& v) { return ag::transpose(v[0]); }, {random_tensor({3, 5}, rng)});
  check_op([](auto& v) { return ag::matmul(v[0], v[1]); }, {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  check_op([](auto& v) { return ag::linear(v[0], v[1], v[2]); },
           {random_tensor({5, 4}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)});
  check_op([](auto& v) { return ag::softmax_rows(v[0]); }, {random_tensor({4, 6}, rng)});
  check_op([](auto& v) { return ag::concat_rows(v[0], v[1]); }, {random_tensor({2, 3}, rng), random_tensor({1, 3}, rng)});
  check_op([](auto& v) { return ag::concat_channels(v[0], v[1]); },
           {random_tensor({2, 2, 2, 2}, rng), random_tensor({1, 2, 2, 2}, rng)});
  check_op([](auto& v) { return ag::slice_channels(v[0], 1, 3); }, {random_tensor({4, 2, 2, 2}, rng)});
  check_op([](auto& v) { return ag::gather_rows(v[0], {2, 0, 2}); }, {random_tensor({3, 4}, rng)});
  check_op([](auto& v) { return ag::add_channel_bias(v[0], v[1]); },
           {random_tensor({3, 2, 2, 2}, rng), random_tensor({3}, rng)});
  check_op([](auto& v) { return nn::attention(v[0], v[1], v[2]); },
           {random_tensor({5, 4}, rng), random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
}

TEST_CASE("volumetric ops match finite differences") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 5, 4, 6}, rng);
  check_op([](auto& v) { return ag::conv3d(v[0], v[1], v[2], {{1, 1, 1}, {1, 1, 1}}); },
           {x, random_tensor({3, 2, 3, 3, 3}, rng, 0.3), random_tensor({3}, rng)});
  check_op([](auto& v) { return ag::conv3d(v[0], v[1], v[2], {{2, 2, 2}, {1, 1, 1}}); },
           {x, random_tensor({3, 2, 3, 3, 3}, rng, 0.3), random_tensor({3}, rng)});
  check_op([](auto& v) { return ag::conv3d(v[0], v[1], ag::Var{}, {{1, 2, 1}, {0, 1, 0}}); },
           {x, random_tensor({2, 2, 1, 4, 4}, rng, 0.3)});
  check_op([](auto& v) { return ag::upsample_nearest(v[0], {2, 2, 2}); }, {x});
  check_op([](auto& v) { return ag::group_norm(v[0], v[1], v[2], 2); },
           {random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng)});
  check_op([](auto& v) { return ag::adaptive_avg_pool2d(v[0], 3, 2); }, {random_tensor({2, 1, 7, 5}, rng)});
}

TEST_CASE("gradients accumulate in leaves and the seed scales them") {
  ag::Var x = ag::leaf(Tensor({2}, {1.0, -2.0}));
  ag::backward(ag::sum(ag::square(x)));
  ag::backward(ag::sum(ag::square(x)), 0.5);
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(-6.0));
}

TEST_CASE("no-grad guard records nothing and detach blocks gradients") {
  ag::Var x = ag::leaf(Tensor({1}, {3.0}));
  {
    ag::NoGradGuard g;
    CHECK_FALSE(ag::grad_enabled());
    CHECK_FALSE(ag::square(x).requires_grad());
  }
  CHECK(ag::grad_enabled());
  ag::backward(ag::sum(ag::add(ag::square(x), ag::detach(ag::square(x)))));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("shape mismatches are validation errors") {
  ag::Var a = ag::leaf(Tensor({2, 3}, std::vector<double>(6, 1.0)));
  ag::Var b = ag::leaf(Tensor({3, 2}, std::vector<double>(6, 1.0)));
  CHECK_THROWS_AS(ag::add(a, b), ValidationError);
  CHECK_THROWS_AS(ag::matmul(a, a), ValidationError);
}

TEST_CASE("adam moves parameters against the gradient") {
  nn::ParamSet ps;
  ag::Var w = ps.add("w", Tensor({2}, {1.0, -1.0}));
  nn::Adam opt(ps, {0.1, 0.9, 0.999, 1e-8});
  ag::backward(ag::sum(ag::square(w)));
  opt.step(ps);
  // First Adam step moves each coordinate by lr against the gradient sign.
  CHECK(w.value()[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(w.value()[1] == doctest::Approx(-0.9).epsilon(1e-6));
  CHECK(opt.steps() == 1);
}

TEST_CASE("copy_matching maps prefixes") {
  nn::ParamSet a, b;
  a.add("unet.x", Tensor({1}, {4.0}));
  b.add("control.x", Tensor({1}, {0.0}));
  b.add("control.y", Tensor({1}, {7.0}));
  b.copy_matching(a, "unet.", "control.");
  CHECK(b.get("control.x").value()[0] == 4.0);
  CHECK(b.get("control.y").value()[0] == 7.0);
}
