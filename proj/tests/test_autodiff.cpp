#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "sfdrive/autodiff.hpp"

using namespace sfd;
using namespace sfd::ad;

namespace {

std::vector<double> values(const Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.size());
}

}  // namespace

TEST_CASE("tensor factories and accessors") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.rows() == 2);
  CHECK(z.cols() == 3);
  CHECK(z.size() == 6);
  CHECK(z.shape_str() == "(2, 3)");
  CHECK(!z.requires_grad());

  Tensor f = Tensor::full({4}, 2.5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(f.at(i) == 2.5);

  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(m.at(0, 1) == 2.0);
  CHECK(m.at(1, 0) == 3.0);

  Tensor s = Tensor::scalar(7.0);
  CHECK(s.is_scalar());
  CHECK(s.value() == 7.0);

  CHECK_THROWS_AS(Tensor::from({3}, {1, 2}), Error);
}

TEST_CASE("elementwise add oracle") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  CHECK(values(add(a, b)) == std::vector<double>{4, 6});
  CHECK(values(sub(b, a)) == std::vector<double>{2, 2});
  CHECK(values(mul(a, b)) == std::vector<double>{3, 8});
  CHECK(values(add_scalar(a, 10)) == std::vector<double>{11, 12});
  CHECK(values(mul_scalar(a, -2)) == std::vector<double>{-2, -4});
}

TEST_CASE("shape mismatch error names op and both shapes") {
  Tensor a = Tensor::zeros({2});
  Tensor b = Tensor::zeros({3});
  try {
    add(a, b);
    FAIL("expected shape error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("(2)") != std::string::npos);
    CHECK(msg.find("(3)") != std::string::npos);
  }
}

TEST_CASE("matmul identity and fixed oracle") {
  Tensor id = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(values(matmul(id, x)) == values(x));

  // (3x2)(2x3) worked by hand
  Tensor y = Tensor::from({2, 3}, {7, 8, 9, 10, 11, 12});
  Tensor p = matmul(x, y);
  CHECK(values(p) ==
        std::vector<double>{27, 30, 33, 61, 68, 75, 95, 106, 117});

  CHECK_THROWS_AS(matmul(x, x), Error);
}

TEST_CASE("transpose, reshape, slicing, concatenation") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(values(transpose(x)) == std::vector<double>{1, 4, 2, 5, 3, 6});
  CHECK(reshape(x, {3, 2}).rows() == 3);
  CHECK(values(slice_rows(x, 1, 2)) == std::vector<double>{4, 5, 6});
  CHECK(values(slice_cols(x, 1, 3)) == std::vector<double>{2, 3, 5, 6});
  Tensor c = concat_rows({x, x});
  CHECK(c.rows() == 4);
  Tensor cc = concat_cols({x, x});
  CHECK(cc.cols() == 6);
  CHECK(cc.at(1, 4) == 5.0);
}

TEST_CASE("softmax oracle and numerical stability") {
  Tensor two = Tensor::from({2}, {0, 0});
  auto v = values(softmax(two, 0));
  CHECK(v[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(0.5).epsilon(1e-12));

  // large magnitudes must not overflow
  Tensor big = Tensor::from({1, 2}, {1000.0, 1001.0});
  auto bv = values(softmax(big, 1));
  CHECK(std::isfinite(bv[0]));
  CHECK(bv[0] + bv[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bv[1] > bv[0]);

  // axis 0 normalizes columns
  Tensor m = Tensor::from({2, 2}, {0, 5, 0, 5});
  auto mv = values(softmax(m, 0));
  CHECK(mv[0] == doctest::Approx(0.5));
  CHECK(mv[2] == doctest::Approx(0.5));
}

TEST_CASE("sum of squares gradient oracle") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, /*requires_grad=*/true);
  Tape tape;
  Tensor loss = sum_all(mul(x, x));
  CHECK(loss.value() == 14.0);
  backward(loss);
  CHECK(values(Tensor::from({3}, {x.grad()[0], x.grad()[1], x.grad()[2]})) ==
        std::vector<double>{2, 4, 6});
}

TEST_CASE("L1 gradient is the sign of the residual") {
  Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  Tensor y = Tensor::from({3}, {0.0, 1.0, 0.5});
  Tape tape;
  Tensor loss = sum_all(abs(sub(x, y)));
  backward(loss);
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == -1.0);
  CHECK(x.grad()[2] == 0.0);  // subgradient at zero residual
}

TEST_CASE("gradients accumulate across uses of the same tensor") {
  Tensor x = Tensor::from({2}, {3, 5}, true);
  Tape tape;
  Tensor loss = add(sum_all(x), sum_all(x));
  backward(loss);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("backward twice on one tape is an error") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tensor loss = sum_all(x);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), Error);
}

TEST_CASE("backward outside any tape is an error") {
  Tensor x = Tensor::scalar(1.0, true);
  CHECK_THROWS_AS(backward(x), Error);
}

TEST_CASE("ops without an active tape do plain evaluation") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK(!y.requires_grad());
  CHECK(values(y) == std::vector<double>{1, 4});
}

TEST_CASE("detached copies block gradient flow") {
  Tensor x = Tensor::from({2}, {2, 3}, true);
  Tape tape;
  Tensor loss = sum_all(mul(x.detached(), x));  // d/dx = detached values only
  backward(loss);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 3.0);
}

TEST_CASE("attention mask removes value and gradient at hidden slots") {
  Tensor logits = Tensor::from({1, 3}, {1.0, 2.0, 3.0}, true);
  Tape tape;
  Tensor masked = apply_attention_mask(logits, {1, 0, 1});
  Tensor probs = softmax(masked, 1);
  CHECK(probs.at(0, 1) < 1e-12);
  backward(sum_all(mul(probs, probs)));
  CHECK(logits.grad()[1] == 0.0);

  // a query row with no visible key is a hard error, not a silent NaN
  CHECK_THROWS_AS(apply_attention_mask(logits.detached(), {0, 0, 0}), Error);
}

TEST_CASE("straight-through binary: exact hard forward, scaled backward") {
  Tensor theta = Tensor::scalar(0.7, true);
  Tape tape;
  Tensor pi = straight_through_binary(theta, 1.0, 0.21);
  CHECK(pi.value() == 1.0);
  backward(mul_scalar(pi, 3.0));
  CHECK(theta.grad()[0] == doctest::Approx(3.0 * 0.21).epsilon(1e-12));
}

TEST_CASE("gate_blend picks the branch exactly and routes ST gradient") {
  Tensor pi_on = Tensor::scalar(1.0, true);
  {
    Tape tape;
    Tensor out = gate_blend(pi_on, 0.125, 9.75);
    CHECK(out.value() == 0.125);  // bitwise equal to the branch scalar
    backward(out);
    CHECK(pi_on.grad()[0] == doctest::Approx(0.125 - 9.75).epsilon(1e-12));
  }
  Tensor pi_off = Tensor::scalar(0.0, true);
  {
    Tape tape;
    Tensor out = gate_blend(pi_off, 0.125, 9.75);
    CHECK(out.value() == 9.75);
    backward(out);
    CHECK(pi_off.grad()[0] == doctest::Approx(0.125 - 9.75).epsilon(1e-12));
  }
  CHECK_THROWS_AS(gate_blend(Tensor::scalar(0.5), 1.0, 2.0), Error);
}

TEST_CASE("two-layer MLP matches central differences") {
  Rng rng(17);
  auto randmat = [&](Shape s) {
    Tensor t = Tensor::zeros(std::move(s));
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal() * 0.5;
    return t;
  };
  Tensor w1 = randmat({4, 5}), b1 = randmat({1, 5});
  Tensor w2 = randmat({5, 2}), b2 = randmat({1, 2});

  auto f = [&](const Tensor& x) {
    Tensor h = gelu(add_rowvec(matmul(x, w1), b1));
    Tensor o = add_rowvec(matmul(h, w2), b2);
    return mean_all(mul(o, o));
  };
  Tensor x = randmat({3, 4});
  CHECK(grad_check(f, x, 1e-5) < 1e-4);
}

TEST_CASE("grad check sweeps the remaining op family") {
  Rng rng(99);
  auto randmat = [&](Shape s, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (std::size_t i = 0; i < t.size(); ++i)
      t.data()[i] = rng.normal() * scale;
    return t;
  };

  Tensor gain = randmat({1, 6}, 0.3);
  Tensor bias = randmat({1, 6}, 0.3);
  auto f_ln = [&](const Tensor& x) {
    return mean_all(mul(layer_norm(x, gain, bias), x));
  };
  CHECK(grad_check(f_ln, randmat({4, 6}), 1e-5) < 1e-4);

  auto f_soft = [&](const Tensor& x) {
    Tensor p = softmax(x, 1);
    return sum_all(mul(p, x));
  };
  CHECK(grad_check(f_soft, randmat({3, 5}), 1e-5) < 1e-4);

  auto f_misc = [&](const Tensor& x) {
    Tensor a = sigmoid(slice_cols(x, 0, 2));
    Tensor b = exp(mul_scalar(slice_cols(x, 2, 4), 0.3));
    Tensor c = log(add_scalar(mul(slice_cols(x, 0, 2), slice_cols(x, 0, 2)), 1.5));
    Tensor cat = concat_cols({a, b, c});
    Tensor t = transpose(cat);
    return mean_all(mul(t, t));
  };
  CHECK(grad_check(f_misc, randmat({3, 4}), 1e-5) < 1e-4);

  auto f_red = [&](const Tensor& x) {
    Tensor r = mean_rows(relu(x));
    Tensor clipped = min_scalar(max_scalar(x, -0.4), 0.4);
    return add(sum_all(mul(r, r)), mean_all(mul(clipped, clipped)));
  };
  CHECK(grad_check(f_red, randmat({4, 3}), 1e-5) < 2e-4);

  Tensor s = Tensor::scalar(0.8, true);
  auto f_scale = [&](const Tensor& x) { return sum_all(scale_by(x, s)); };
  CHECK(grad_check(f_scale, randmat({2, 3}), 1e-5) < 1e-4);

  auto f_rows = [&](const Tensor& x) {
    Tensor top = slice_rows(x, 0, 1);
    Tensor rest = slice_rows(x, 1, 3);
    Tensor back = concat_rows({rest, top});
    return mean_all(mul(back, back));
  };
  CHECK(grad_check(f_rows, randmat({3, 4}), 1e-5) < 1e-4);
}

TEST_CASE("layer_norm output rows have zero mean and unit variance") {
  Rng rng(5);
  Tensor x = Tensor::zeros({3, 16});
  for (std::size_t i = 0; i < x.size(); ++i)
    x.data()[i] = rng.normal() * 4.0 + 2.0;
  Tensor ones = Tensor::full({1, 16}, 1.0);
  Tensor zero = Tensor::zeros({1, 16});
  Tensor y = layer_norm(x, ones, zero);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(r, j);
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y.at(r, j) - m) * (y.at(r, j) - m);
    v /= 16;
    CHECK(std::fabs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("forward passes are deterministic and repeatable") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor w = Tensor::zeros({6, 6});
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    Tensor x = Tensor::zeros({2, 6});
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
    Tensor ones = Tensor::full({1, 6}, 1.0);
    Tensor zero = Tensor::zeros({1, 6});
    return values(softmax(layer_norm(matmul(x, w), ones, zero), 1));
  };
  CHECK(run(42) == run(42));          // bitwise
  CHECK(run(42) != run(43));
}

TEST_CASE("rng: ranges, fork independence, state round-trip") {
  Rng rng(123);
  for (int i = 0; i < 1000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  double lo = rng.uniform(-2.0, 5.0);
  CHECK(lo >= -2.0);
  CHECK(lo < 5.0);
  CHECK(rng.randint(7) < 7u);

  // normal() has roughly the right first two moments
  Rng g(7);
  double mean = 0, var = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double z = g.normal();
    mean += z;
    var += z * z;
  }
  mean /= n;
  var = var / n - mean * mean;
  CHECK(std::fabs(mean) < 0.03);
  CHECK(std::fabs(var - 1.0) < 0.05);

  // save/load reproduces the stream bitwise
  Rng a(55);
  (void)a.next_u64();
  std::uint64_t st[4];
  a.save_state(st);
  std::vector<std::uint64_t> want;
  for (int i = 0; i < 8; ++i) want.push_back(a.next_u64());
  Rng b(0);
  b.load_state(st);
  for (int i = 0; i < 8; ++i) CHECK(b.next_u64() == want[std::size_t(i)]);

  // forked stream differs from parent continuation
  Rng p(9);
  Rng child = p.fork();
  CHECK(child.next_u64() != p.next_u64());
}
