#include "doctest.h"

#include <functional>

#include "mrcnet/tape.hpp"
#include "support/test_utils.hpp"

using namespace mrc;
using testutil::max_abs_diff;
using testutil::random_tensor;
using Ten = Tensor<double>;

namespace {

// Scalar loss over an op graph driven by one input leaf; checks the input
// gradient by central differences at every coordinate.
using GraphFn = std::function<ValueRef<double>(Tape<double>&, ValueRef<double>)>;

double eval_loss(const Ten& x, const GraphFn& fn) {
  Tape<double> t(false);
  auto out = fn(t, t.leaf(x));
  double s = 0;
  for (i64 i = 0; i < out->val.numel(); ++i) s += out->val[i];
  return s;
}

void check_input_grad(Ten x, const GraphFn& fn, double tol = 1e-6) {
  Ten analytic;
  {
    Tape<double> t;
    auto leaf = t.leaf(x, /*requires_grad=*/true);
    auto out = fn(t, leaf);
    t.backward(t.sum_all(out));
    analytic = leaf->grad_alloc ? leaf->grad : Ten::zeros_like(x);
  }
  for (i64 i = 0; i < x.numel(); ++i) {
    const double theta = x[i];
    const double h = 1e-5 * std::max(1.0, std::abs(theta));
    x[i] = theta + h;
    const double lp = eval_loss(x, fn);
    x[i] = theta - h;
    const double lm = eval_loss(x, fn);
    x[i] = theta;
    const double numeric = (lp - lm) / (2 * h);
    REQUIRE(std::abs(analytic[i] - numeric) <=
            tol * std::max({1.0, std::abs(analytic[i]), std::abs(numeric)}));
  }
}

}  // namespace

TEST_CASE("backward: loss = sum(x) gives all-ones gradient") {
  Rng rng(31);
  Ten x = random_tensor<double>({2, 3, 2, 2}, rng);
  Tape<double> t;
  auto leaf = t.leaf(x, true);
  t.backward(t.sum_all(leaf));
  for (i64 i = 0; i < x.numel(); ++i) CHECK(leaf->grad[i] == 1.0);
}

TEST_CASE("backward: dead relu region has zero gradient") {
  Ten x(1, 2, 2, 2, -3.0);
  Tape<double> t;
  auto leaf = t.leaf(x, true);
  t.backward(t.sum_all(t.relu(leaf)));
  REQUIRE(leaf->grad_alloc);
  CHECK(testutil::max_abs(leaf->grad) == 0.0);
}

TEST_CASE("backward: consumed tape rejects a second pass") {
  Tape<double> t;
  auto leaf = t.leaf(Ten(1, 1, 1, 1, 2.0), true);
  auto loss = t.sum_all(leaf);
  t.backward(loss);
  CHECK_THROWS_AS(t.backward(loss), UsageError);
  Tape<double> t2;
  auto big = t2.leaf(Ten(1, 2, 1, 1), true);
  CHECK_THROWS_AS(t2.backward(big), UsageError);  // non-scalar loss
}

TEST_CASE("backward: parameter grads accumulate additively across passes") {
  ParamTensor<double> p(Shape{1, 1, 1, 1}, InitSpec::constant(2.0));
  Rng rng(32);
  p.initialize(rng);
  for (int pass = 0; pass < 2; ++pass) {
    Tape<double> t;
    auto pv = t.param(p);
    t.backward(t.sum_all(t.mul(pv, t.constant(3.0))));
  }
  CHECK(p.grad[0] == doctest::Approx(6.0));  // 3 + 3
  p.reset_grad();
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("conv2d gradients (input, weight, bias)") {
  Rng rng(33);
  Ten x = random_tensor<double>({2, 2, 4, 4}, rng);
  ParamTensor<double> w(Shape{3, 2, 3, 3}, InitSpec::uniform(0.5));
  ParamTensor<double> b(Shape{1, 3, 1, 1}, InitSpec::uniform(0.5));
  w.initialize(rng);
  b.initialize(rng);

  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.conv2d(in, t.param(w), t.param(b), ConvSpec::square(1, 1));
  });

  // weight/bias gradients against finite differences
  w.reset_grad();
  b.reset_grad();
  {
    Tape<double> t;
    auto out = t.conv2d(t.leaf(x), t.param(w), t.param(b), ConvSpec::square(2, 1));
    t.backward(t.sum_all(out));
  }
  auto loss_with = [&]() {
    Tape<double> t(false);
    auto out = t.conv2d(t.leaf(x), t.leaf(w.value), t.leaf(b.value), ConvSpec::square(2, 1));
    double s = 0;
    for (i64 i = 0; i < out->val.numel(); ++i) s += out->val[i];
    return s;
  };
  for (i64 i = 0; i < w.value.numel(); ++i) {
    const double theta = w.value[i];
    const double h = 1e-5 * std::max(1.0, std::abs(theta));
    w.value[i] = theta + h;
    const double lp = loss_with();
    w.value[i] = theta - h;
    const double lm = loss_with();
    w.value[i] = theta;
    REQUIRE(std::abs(w.grad[i] - (lp - lm) / (2 * h)) < 1e-6);
  }
  for (i64 i = 0; i < b.value.numel(); ++i) {
    const double theta = b.value[i];
    b.value[i] = theta + 1e-5;
    const double lp = loss_with();
    b.value[i] = theta - 1e-5;
    const double lm = loss_with();
    b.value[i] = theta;
    REQUIRE(std::abs(b.grad[i] - (lp - lm) / 2e-5) < 1e-6);
  }
}

TEST_CASE("grouped conv2d gradients") {
  Rng rng(34);
  Ten x = random_tensor<double>({1, 4, 3, 3}, rng);
  ParamTensor<double> w(Shape{4, 2, 3, 3}, InitSpec::uniform(0.5));
  w.initialize(rng);
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.conv2d(in, t.param(w), nullptr, ConvSpec::square(1, 1, 2));
  });
}

TEST_CASE("transposed_conv2d gradients; input grad equals forward conv with same kernel") {
  Rng rng(35);
  Ten x = random_tensor<double>({1, 2, 3, 3}, rng);
  ParamTensor<double> w(Shape{2, 3, 3, 3}, InitSpec::uniform(0.5));
  ParamTensor<double> b(Shape{1, 3, 1, 1}, InitSpec::uniform(0.5));
  w.initialize(rng);
  b.initialize(rng);
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.transposed_conv2d(in, t.param(w), t.param(b), 2, 1, 1);
  });

  // flip relation at stride 1: d/dx sum(tconv(x, w)) == conv2d(ones, w') where
  // w' views the same kernel with in/out channel roles exchanged
  Ten dy(1, 3, 5, 5, 1.0);
  Tape<double> t;
  auto leaf = t.leaf(x, true);
  auto out = t.transposed_conv2d(leaf, t.leaf(w.value), nullptr, 1, 0, 0);
  CHECK(out->val.shape() == Shape{1, 3, 5, 5});
  t.backward(t.sum_all(out));
  Ten wprime(2, 3, 3, 3);  // conv weight [Cout=2][Cin=3][kh][kw] from w[ci][co]
  for (i64 ci = 0; ci < 2; ++ci)
    for (i64 co = 0; co < 3; ++co)
      for (i64 i = 0; i < 3; ++i)
        for (i64 j = 0; j < 3; ++j) wprime.at(ci, co, i, j) = w.value.at(ci, co, i, j);
  Tape<double> t2(false);
  auto conv_of_dy =
      t2.conv2d(t2.leaf(dy), t2.leaf(wprime), nullptr, ConvSpec::square(1, 0));
  CHECK(max_abs_diff(leaf->grad, conv_of_dy->val) < 1e-12);
}

TEST_CASE("pooling gradients") {
  Rng rng(36);
  Ten x = random_tensor<double>({2, 2, 3, 4}, rng);
  check_input_grad(x, [](Tape<double>& t, ValueRef<double> in) {
    return t.pool_mean(in, Axis::W);
  });
  check_input_grad(x, [](Tape<double>& t, ValueRef<double> in) {
    return t.pool_mean(in, Axis::H);
  });
  check_input_grad(x, [](Tape<double>& t, ValueRef<double> in) {
    return t.global_avg_pool(in);
  });
}

TEST_CASE("activation gradients") {
  Rng rng(37);
  Ten x = random_tensor<double>({1, 4, 2, 3}, rng, 0.2, 2.0);  // away from relu kink
  check_input_grad(x, [](Tape<double>& t, ValueRef<double> in) { return t.relu(in); });
  Ten y = random_tensor<double>({1, 4, 2, 3}, rng);
  check_input_grad(y, [](Tape<double>& t, ValueRef<double> in) { return t.sigmoid(in); });
  // weighted softmax so the gradient is not identically zero
  Ten wgt = random_tensor<double>({1, 4, 2, 3}, rng);
  check_input_grad(y, [&](Tape<double>& t, ValueRef<double> in) {
    return t.mul(t.softmax(in, Axis::C), t.leaf(wgt));
  });
}

TEST_CASE("normalization gradients") {
  Rng rng(38);
  Ten x = random_tensor<double>({3, 2, 2, 3}, rng);
  ParamTensor<double> gamma(Shape{1, 2, 1, 1}, InitSpec::uniform(1.0));
  ParamTensor<double> beta(Shape{1, 2, 1, 1}, InitSpec::uniform(1.0));
  gamma.initialize(rng);
  beta.initialize(rng);
  Ten wgt = random_tensor<double>({3, 2, 2, 3}, rng);

  Ten rm(1, 2, 1, 1, 0.0), rv(1, 2, 1, 1, 1.0);
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    Ten rm_local = rm, rv_local = rv;
    return t.mul(t.batch_norm(in, t.param(gamma), t.param(beta), rm_local, rv_local,
                              true, 0.1, 1e-5),
                 t.leaf(wgt));
  });
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    Ten rm_local = rm, rv_local = rv;
    return t.mul(t.batch_norm(in, t.param(gamma), t.param(beta), rm_local, rv_local,
                              false, 0.1, 1e-5),
                 t.leaf(wgt));
  });
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.mul(t.group_norm(in, 2, t.param(gamma), t.param(beta), 1e-5), t.leaf(wgt));
  });
}

TEST_CASE("structure op gradients") {
  Rng rng(39);
  Ten x = random_tensor<double>({2, 4, 2, 2}, rng);
  Ten wgt = random_tensor<double>({4, 2, 2, 2}, rng);
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.mul(t.reshape(in, Shape{4, 2, 2, 2}), t.leaf(wgt));
  });

  Ten wcat = random_tensor<double>({2, 8, 2, 2}, rng);
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    auto parts = t.split(in, {1, 3}, Axis::C);
    auto swapped = t.concat({parts[1], parts[0], in}, Axis::C);
    return t.mul(swapped, t.leaf(wcat));
  });
}

TEST_CASE("broadcast add/mul gradients") {
  Rng rng(40);
  Ten x = random_tensor<double>({2, 3, 2, 2}, rng);
  Ten gate = random_tensor<double>({1, 3, 1, 1}, rng);
  ParamTensor<double> g(Shape{1, 3, 1, 1}, InitSpec::uniform(1.0));
  g.initialize(rng);
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.add(t.mul(in, t.param(g)), t.leaf(gate));
  });
  // gradient w.r.t. the broadcast operand
  check_input_grad(gate, [&](Tape<double>& t, ValueRef<double> in) {
    return t.mul(t.leaf(x), in);
  });
}

TEST_CASE("matmul gradients") {
  Rng rng(41);
  Ten a = random_tensor<double>({2, 1, 1, 3}, rng);
  Ten b = random_tensor<double>({2, 1, 3, 4}, rng);
  check_input_grad(a, [&](Tape<double>& t, ValueRef<double> in) {
    return t.matmul(in, t.leaf(b));
  });
  check_input_grad(b, [&](Tape<double>& t, ValueRef<double> in) {
    return t.matmul(t.leaf(a), in);
  });
}

TEST_CASE("loss op gradients") {
  Rng rng(42);
  Ten x = random_tensor<double>({1, 3, 2, 2}, rng, -2.0, 2.0);
  auto target = std::make_shared<Ten>(1, 3, 2, 2);
  for (i64 i = 0; i < target->numel(); ++i) (*target)[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.bce_with_logits(in, target);
  });
  auto reg_target = std::make_shared<Ten>(1, 3, 2, 2);
  for (i64 i = 0; i < reg_target->numel(); ++i) (*reg_target)[i] = rng.uniform(-2, 2);
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.smooth_l1(in, reg_target, 1.0);
  });
  check_input_grad(x, [&](Tape<double>& t, ValueRef<double> in) {
    return t.scale(in, 0.37);
  });
}

TEST_CASE("flop counter is independent of recording mode") {
  Rng rng(43);
  Ten x = random_tensor<double>({1, 2, 4, 4}, rng);
  Ten w = random_tensor<double>({3, 2, 3, 3}, rng);
  i64 f_rec, f_norec;
  {
    Tape<double> t;
    t.conv2d(t.leaf(x, true), t.leaf(w), nullptr, ConvSpec::square(1, 1));
    f_rec = t.flops();
  }
  {
    Tape<double> t(false);
    t.conv2d(t.leaf(x), t.leaf(w), nullptr, ConvSpec::square(1, 1));
    f_norec = t.flops();
  }
  CHECK(f_rec == f_norec);
  CHECK(f_rec == 2 * 3 * 2 * 3 * 3 * 4 * 4);
}
