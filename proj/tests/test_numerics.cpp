#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dspast/autograd.hpp"
#include "dspast/nn.hpp"
#include "dspast/optim.hpp"

using namespace dspast;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double scl = 1.0) {
  Tensor<double> t(std::move(s));
  Prng rng(seed);
  for (auto& x : t.v) x = scl * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("activation values at the origin") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({3}, {0.0, 1.0, -1.0}));
  CHECK(gelu(x).val().v[0] == 0.0);
  CHECK(sigmoid(x).val().v[0] == 0.5);
  CHECK(relu(x).val().v[2] == 0.0);
}

TEST_CASE("conv2d with identity 1x1 kernel is the identity") {
  Tape<double> tape;
  auto x = tape.constant(random_tensor({2, 1, 4, 5}, 3));
  auto w = tape.constant(Tensor<double>({1, 1, 1, 1}, {1.0}));
  auto b = tape.constant(Tensor<double>({1}, {0.0}));
  auto y = conv2d(x, w, b, 1, 0);
  CHECK(y.val().shape == x.val().shape);
  for (std::size_t i = 0; i < y.val().v.size(); ++i) CHECK(y.val().v[i] == x.val().v[i]);
}

TEST_CASE("softmax rows sum to one") {
  Tape<double> tape;
  auto x = tape.constant(random_tensor({7, 11}, 4, 3.0));
  auto y = softmax_lastdim(x);
  for (int r = 0; r < 7; ++r) {
    double s = 0;
    for (int j = 0; j < 11; ++j) s += y.val().v[static_cast<std::size_t>(r * 11 + j)];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("backward of sum gives all-ones gradient") {
  ParamStore<double> store;
  auto* p = store.create("p", {4, 3}, false);
  init_trunc_normal(p, 1);
  store.zero_grad();
  Tape<double> tape;
  auto loss = sum_all(tape.leaf(*p));
  tape.backward(loss);
  for (double g : p->grad.v) CHECK(g == 1.0);
}

TEST_CASE("parameters not reaching the loss get exact zeros") {
  ParamStore<double> store;
  auto* used = store.create("used", {4}, false);
  auto* unused = store.create("unused", {4}, false);
  init_trunc_normal(used, 1);
  init_trunc_normal(unused, 2);
  store.zero_grad();
  Tape<double> tape;
  auto loss = sum_all(mul(tape.leaf(*used), tape.leaf(*used)));
  tape.leaf(*unused);  // on the tape, but not on the loss path
  tape.backward(loss);
  for (double g : unused->grad.v) CHECK(g == 0.0);
  bool any = false;
  for (double g : used->grad.v) any = any || g != 0.0;
  CHECK(any);
}

TEST_CASE("backward rejects non-scalar loss") {
  ParamStore<double> store;
  auto* p = store.create("p", {3}, false);
  Tape<double> tape;
  auto v = tape.leaf(*p);
  CHECK_THROWS_AS(tape.backward(v), InvalidInput);
}

TEST_CASE("two-layer MLP matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParamStore<double> store;
    auto l1 = LinearLayer<double>::create(store, "l1", 6, 5, false, seed);
    auto l2 = LinearLayer<double>::create(store, "l2", 5, 3, false, seed + 100);
    Tensor<double> input = random_tensor({4, 6}, seed + 7);
    Tensor<double> target = random_tensor({4, 3}, seed + 13);

    auto forward = [&](Tape<double>& tape) {
      auto x = tape.constant(input);
      auto h = gelu(l1.forward(tape, x));
      auto y = l2.forward(tape, h);
      auto diff = add(y, scale(tape.constant(target), -1.0));
      return mean_all(mul(diff, diff));
    };
    auto report = grad_check<double>(
        store.trainable(),
        [&]() { Tape<double> t; return forward(t).val().v[0]; },
        [&]() { Tape<double> t; auto loss = forward(t); t.backward(loss); },
        1e-4, seed);
    CHECK(report.pass);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("gradient check property across layer types") {
  // Touches every layer/op the encoder uses, 20 seeds each.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ParamStore<double> store;
    auto conv = Conv2dLayer<double>::create(store, "conv", 2, 3, 3, 1, 1, false, seed);
    auto bn = BatchNormLayer<double>::create(store, "bn", 3, false);
    auto ln_in = LinearLayer<double>::create(store, "lin", 3 * 4 * 4, 8, false, seed + 1);
    auto blk = TransformerBlock<double>::create(store, "blk", 8, 2, false, seed + 2);
    auto* cls = store.create("cls", {2, 8}, false);
    init_trunc_normal(cls, seed + 3);

    Tensor<double> input = random_tensor({2, 2, 4, 4}, seed + 17);
    auto forward = [&](Tape<double>& tape) {
      auto x = tape.constant(input);
      auto h = conv.forward(tape, x);                     // [2,3,4,4]
      h = bn.forward(tape, h, /*train=*/true);
      h = gelu(h);
      auto flat = reshape(h, {2, 3 * 4 * 4});
      auto tok = ln_in.forward(tape, flat);               // [2,8]
      auto seq = reshape(tok, {2, 1, 8});
      auto with_cls = concat_axis1<double>({broadcast_rows(tape.leaf(*cls), 2), seq});
      auto out = blk.forward(tape, with_cls);             // [2,3,8]
      auto pooled = mean_axis1(out);
      auto gated = mul_channel_gate(reshape(out, {2, 3, 8}), sigmoid(slice_lastdim(pooled, 0, 3)));
      return mean_all(mul(gated, gated));
    };
    auto report = grad_check<double>(
        store.trainable(),
        [&]() { Tape<double> t; return forward(t).val().v[0]; },
        [&]() { Tape<double> t; auto loss = forward(t); t.backward(loss); },
        1e-4, seed, /*max_coords_per_param=*/24);
    INFO("seed ", seed, " max_rel_error ", report.max_rel_error);
    CHECK(report.pass);
  }
}

TEST_CASE("losses match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParamStore<double> store;
    auto lin = LinearLayer<double>::create(store, "lin", 4, 6, false, seed);
    Tensor<double> input = random_tensor({5, 4}, seed + 31);
    Tensor<double> bce_targets({5, 6});
    Prng rng(seed + 41);
    for (auto& t : bce_targets.v) t = rng.uniform() < 0.5 ? 0.0 : 1.0;
    std::vector<int> labels;
    for (int i = 0; i < 5; ++i) labels.push_back(static_cast<int>(rng.below(6)));

    auto forward = [&](Tape<double>& tape) {
      auto logits = lin.forward(tape, tape.constant(input));
      auto a = bce_with_logits_mean(logits, bce_targets);
      auto b = softmax_ce_mean(logits, labels);
      auto c = softmax_ce_mean(scale(normalize_rows(logits), 7.0), labels);
      return add(add(a, b), c);
    };
    auto report = grad_check<double>(
        store.trainable(),
        [&]() { Tape<double> t; return forward(t).val().v[0]; },
        [&]() { Tape<double> t; auto loss = forward(t); t.backward(loss); },
        1e-4, seed);
    CHECK(report.pass);
  }
}

TEST_CASE("grad_check corruption hook reports failure") {
  ParamStore<double> store;
  auto lin = LinearLayer<double>::create(store, "lin", 3, 2, false, 5);
  Tensor<double> input = random_tensor({2, 3}, 6);
  auto forward = [&](Tape<double>& tape) {
    auto y = lin.forward(tape, tape.constant(input));
    return mean_all(mul(y, y));
  };
  auto report = grad_check<double>(
      store.trainable(),
      [&]() { Tape<double> t; return forward(t).val().v[0]; },
      [&]() { Tape<double> t; auto loss = forward(t); t.backward(loss); },
      1e-4, 0, 48, 1e-5, /*corrupt=*/"lin/w");
  CHECK(!report.pass);
}

TEST_CASE("batchnorm eval is deterministic and batch-independent") {
  ParamStore<double> store;
  auto bn = BatchNormLayer<double>::create(store, "bn", 3, false);
  // Drive the running stats with a few training batches.
  for (std::uint64_t i = 0; i < 5; ++i) {
    Tape<double> tape;
    bn.forward(tape, tape.constant(random_tensor({4, 3, 2, 2}, i, 2.0)), true);
  }
  Tensor<double> sample = random_tensor({1, 3, 2, 2}, 99);
  Tensor<double> other = random_tensor({1, 3, 2, 2}, 100);

  auto eval_first = [&](const Tensor<double>& buddy) {
    Tape<double> tape;
    Tensor<double> batch({2, 3, 2, 2});
    std::copy(sample.v.begin(), sample.v.end(), batch.v.begin());
    std::copy(buddy.v.begin(), buddy.v.end(), batch.v.begin() + sample.v.size());
    auto y = bn.forward(tape, tape.constant(batch), false);
    return std::vector<double>(y.val().v.begin(), y.val().v.begin() + static_cast<std::ptrdiff_t>(sample.v.size()));
  };
  CHECK(eval_first(other) == eval_first(random_tensor({1, 3, 2, 2}, 101)));
}

TEST_CASE("adamw basics") {
  ParamStore<double> store;
  auto* p = store.create("p", {3}, false);
  p->value.v = {1.0, -2.0, 0.5};
  store.zero_grad();

  SUBCASE("zero gradient leaves the parameter untouched") {
    AdamW<double> opt({p}, 0.1, 0.9, 0.999, /*weight_decay=*/0.5);
    auto before = p->value.v;
    opt.step();
    CHECK(p->value.v == before);
  }

  SUBCASE("one step on x^2 decreases x") {
    AdamW<double> opt({p}, 0.1, 0.9, 0.999, 0.0);
    p->value.v = {1.0, 1.0, 1.0};
    p->grad.v = {2.0, 2.0, 2.0};
    opt.step();
    for (double x : p->value.v) CHECK(x < 1.0);
  }

  SUBCASE("lr must be positive") {
    CHECK_THROWS_AS(AdamW<double>({p}, 0.0), ConfigError);
  }
}

TEST_CASE("adamw converges on a convex quadratic") {
  // f(x) = sum (x - c)^2, minimizer x = c.
  ParamStore<double> store;
  auto* p = store.create("p", {4}, false);
  p->value.v = {3.0, -1.0, 0.0, 2.0};
  const std::vector<double> c = {0.5, 1.5, -0.5, -2.0};
  AdamW<double> opt({p}, 0.05, 0.9, 0.999, 0.0);
  for (int step = 0; step < 400; ++step) {
    store.zero_grad();
    for (int i = 0; i < 4; ++i) p->grad.v[static_cast<std::size_t>(i)] = 2.0 * (p->value.v[static_cast<std::size_t>(i)] - c[static_cast<std::size_t>(i)]);
    opt.step();
  }
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(p->value.v[static_cast<std::size_t>(i)] - c[static_cast<std::size_t>(i)]) < 1e-3);
}

TEST_CASE("adamw is deterministic") {
  auto run = [&]() {
    ParamStore<double> store;
    auto* p = store.create("p", {8}, false);
    init_trunc_normal(p, 7);
    AdamW<double> opt({p}, 0.01);
    Prng rng(3);
    for (int step = 0; step < 20; ++step) {
      store.zero_grad();
      for (auto& g : p->grad.v) g = rng.normal();
      opt.step();
    }
    return p->value.v;
  };
  CHECK(run() == run());
}

TEST_CASE("dropout scales and masks deterministically by seed") {
  Tape<double> tape;
  Tensor<double> ones = Tensor<double>::full({1000}, 1.0);
  Prng rng(5);
  auto y = dropout(tape.constant(ones), 0.25, rng, true);
  double mean = 0;
  int zeros = 0;
  for (double v : y.val().v) {
    mean += v;
    if (v == 0.0) ++zeros;
    else CHECK(v == doctest::Approx(1.0 / 0.75));
  }
  mean /= 1000.0;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
  CHECK(zeros > 150);
  Prng rng2(5);
  auto y2 = dropout(tape.constant(ones), 0.25, rng2, true);
  CHECK(y.val().v == y2.val().v);
  // Eval mode is the identity.
  Prng rng3(5);
  auto y3 = dropout(tape.constant(ones), 0.25, rng3, false);
  for (double v : y3.val().v) CHECK(v == 1.0);
}

TEST_CASE("bmm transpose flags match explicit permutes") {
  Tape<double> tape;
  auto a = tape.constant(random_tensor({2, 3, 4, 5}, 1));
  auto b = tape.constant(random_tensor({2, 3, 6, 5}, 2));
  auto direct = bmm(a, b, false, true);  // [2,3,4,6]
  auto via_permute = bmm(a, permute(b, {0, 1, 3, 2}), false, false);
  REQUIRE(direct.val().shape == via_permute.val().shape);
  for (std::size_t i = 0; i < direct.val().v.size(); ++i)
    CHECK(direct.val().v[i] == doctest::Approx(via_permute.val().v[i]).epsilon(1e-12));
}
