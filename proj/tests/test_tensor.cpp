#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "neuroswap/adam.hpp"
#include "neuroswap/gradcheck.hpp"
#include "neuroswap/io.hpp"
#include "neuroswap/tensor.hpp"

using namespace neuroswap;

namespace {

Tensor64 leaf(Shape shape, std::vector<double> data) {
  return Tensor64::from_data(std::move(shape), std::move(data), true);
}

Tensor64 random_leaf(Shape shape, Rng& rng, double spread = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = uniform(rng, -spread, spread);
  return Tensor64::from_data(std::move(shape), std::move(data), true);
}

// FD check of a single-tensor op at the per-op tolerance.
void check_op_grad(const char* name, Tensor64& x, const std::function<Tensor64()>& loss,
                   double tol = 1e-5) {
  std::vector<Tensor64> ins{x};
  auto result = finite_difference_check(ins, loss, {name});
  INFO(name, " worst=", result.worst_input);
  CHECK(result.max_rel_err <= tol);
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST_CASE("matmul identity leaves input unchanged") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = matmul(eye, x);
  for (int i = 0; i < 6; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("matmul hand arithmetic") {
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from_data({2, 1}, {1, 1});
  auto c = matmul(a, b);
  CHECK(c.data()[0] == doctest::Approx(3));
  CHECK(c.data()[1] == doctest::Approx(7));
}

TEST_CASE("matmul rejects mismatched inner dims") {
  auto a = Tensor::from_data({2, 3}, std::vector<float>(6, 1.f));
  auto b = Tensor::from_data({2, 2}, std::vector<float>(4, 1.f));
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("matmul gradient vs central finite differences") {
  Rng rng = make_rng(7);
  auto a = random_leaf({3, 4}, rng);
  auto b = random_leaf({4, 2}, rng);
  std::vector<Tensor64> ins{a, b};
  auto res = finite_difference_check(ins, [&] { return sum_all(tanh_op(matmul(a, b))); }, {"a", "b"});
  CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("matmul_nt matches matmul against transposed operand") {
  Rng rng = make_rng(8);
  auto a = random_leaf({3, 5}, rng);
  auto b = random_leaf({4, 5}, rng);
  auto y = matmul_nt(a, b);
  // reference: plain loops
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int k = 0; k < 5; ++k) s += a.data()[i * 5 + k] * b.data()[j * 5 + k];
      CHECK(y.data()[i * 4 + j] == doctest::Approx(s));
    }
  std::vector<Tensor64> ins{a, b};
  auto res = finite_difference_check(ins, [&] { return sum_all(tanh_op(matmul_nt(a, b))); });
  CHECK(res.max_rel_err <= 1e-6);
}

// ---------------------------------------------------------------------------
// conv
// ---------------------------------------------------------------------------

TEST_CASE("conv1d with unit 1x1 kernel is identity") {
  auto x = Tensor::from_data({1, 1, 4}, {1, 2, 3, 4});
  auto w = Tensor::from_data({1, 1, 1}, {1});
  auto y = conv1d(x, w);
  for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv1d hand arithmetic") {
  auto x = Tensor::from_data({1, 1, 4}, {1, 2, 3, 4});
  auto w = Tensor::from_data({1, 1, 2}, {1, 1});
  auto y = conv1d(x, w);
  REQUIRE(y.shape() == Shape{1, 1, 3});
  CHECK(y.data()[0] == doctest::Approx(3));
  CHECK(y.data()[1] == doctest::Approx(5));
  CHECK(y.data()[2] == doctest::Approx(7));
}

TEST_CASE("conv output extent follows floor((in + 2p - k)/s) + 1") {
  auto x = Tensor::from_data({1, 1, 7}, std::vector<float>(7, 1.f));
  auto w = Tensor::from_data({1, 1, 3}, std::vector<float>(3, 1.f));
  CHECK(conv1d(x, w, {2, 0}).dim(2) == 3);
  CHECK(conv1d(x, w, {2, 1}).dim(2) == 4);
  CHECK(conv1d(x, w, {1, 1}).dim(2) == 7);
}

TEST_CASE("conv kernel larger than padded input errors") {
  auto x = Tensor::from_data({1, 1, 2}, {1, 2});
  auto w = Tensor::from_data({1, 1, 5}, std::vector<float>(5, 1.f));
  CHECK_THROWS_AS(conv1d(x, w), DimensionError);
  auto x2 = Tensor::from_data({1, 1, 2, 2}, std::vector<float>(4, 1.f));
  auto w2 = Tensor::from_data({1, 1, 4, 4}, std::vector<float>(16, 1.f));
  CHECK_THROWS_AS(conv2d(x2, w2), DimensionError);
}

TEST_CASE("conv2d cross-correlation semantics on an asymmetric kernel") {
  // kernel (0,1;0,0) picks the pixel to the right-top of the anchor; a flipped
  // convolution would pick a different one.
  auto x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto w = Tensor::from_data({1, 1, 2, 2}, {0, 1, 0, 0});
  auto y = conv2d(x, w);
  REQUIRE(y.numel() == 1);
  CHECK(y.data()[0] == doctest::Approx(2));
}

TEST_CASE("conv2d gradient vs finite differences") {
  Rng rng = make_rng(21);
  auto x = random_leaf({2, 2, 5, 5}, rng);
  auto w = random_leaf({3, 2, 3, 3}, rng, 0.5);
  std::vector<Tensor64> ins{x, w};
  auto res = finite_difference_check(
      ins, [&] { return sum_all(tanh_op(conv2d(x, w, {2, 1}))); }, {"x", "w"});
  CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("conv1d gradient vs finite differences, strided and padded") {
  Rng rng = make_rng(22);
  auto x = random_leaf({2, 3, 9}, rng);
  auto w = random_leaf({4, 3, 3}, rng, 0.5);
  std::vector<Tensor64> ins{x, w};
  auto res = finite_difference_check(ins, [&] { return sum_all(tanh_op(conv1d(x, w, {2, 1}))); });
  CHECK(res.max_rel_err <= 1e-6);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

TEST_CASE("maxpool constant input stays constant") {
  auto x = Tensor::from_data({1, 1, 6}, std::vector<float>(6, 3.5f));
  auto y = maxpool1d(x, 2, 2);
  for (auto v : y.data()) CHECK(v == doctest::Approx(3.5f));
}

TEST_CASE("maxpool hand case") {
  auto x = Tensor::from_data({1, 1, 4}, {1, 3, 2, 4});
  auto y = maxpool1d(x, 2, 2);
  CHECK(y.data()[0] == doctest::Approx(3));
  CHECK(y.data()[1] == doctest::Approx(4));
}

TEST_CASE("maxpool tie routes gradient to the first element") {
  auto x = leaf({1, 1, 2}, {2, 2});
  auto y = sum_all(maxpool1d(x, 2, 2));
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(1));
  CHECK(x.grad()[1] == doctest::Approx(0));
}

TEST_CASE("maxpool rejects zero-size window") {
  auto x = Tensor::from_data({1, 1, 4}, {1, 2, 3, 4});
  CHECK_THROWS_AS(maxpool1d(x, 0, 1), DimensionError);
}

TEST_CASE("maxpool2d gradient vs finite differences") {
  // distinct values keep the argmax stable under the FD perturbation
  std::vector<double> vals(1 * 2 * 4 * 4);
  for (size_t i = 0; i < vals.size(); ++i) vals[i] = std::sin(2.7 * i) * 3.0 + 0.1 * i;
  auto x = leaf({1, 2, 4, 4}, vals);
  check_op_grad("maxpool2d", x, [&] { return sum_all(tanh_op(maxpool2d(x, 2, 2))); });
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

TEST_CASE("relu/tanh basic values") {
  auto x = Tensor::from_data({3}, {-1, 0, 2});
  auto y = relu(x);
  CHECK(y.data()[0] == 0);
  CHECK(y.data()[1] == 0);
  CHECK(y.data()[2] == 2);
  CHECK(tanh_op(Tensor::from_data({1}, {0})).data()[0] == doctest::Approx(0));
}

TEST_CASE("exp/log round-trip") {
  Rng rng = make_rng(4);
  std::vector<float> xs(16);
  for (auto& v : xs) v = static_cast<float>(uniform(rng, -3, 3));
  auto x = Tensor::from_data({16}, xs);
  auto y = log_op(exp_op(x));
  for (int i = 0; i < 16; ++i) CHECK(std::abs(y.data()[i] - xs[i]) <= 1e-6);
}

TEST_CASE("log of non-positive input is a domain error") {
  auto x = Tensor::from_data({2}, {1.f, 0.f});
  CHECK_THROWS_AS(log_op(x), DomainError);
  auto x2 = Tensor::from_data({1}, {-2.f});
  CHECK_THROWS_AS(log_op(x2), DomainError);
}

TEST_CASE("elementwise gradients vs finite differences") {
  Rng rng = make_rng(5);
  auto x = random_leaf({8}, rng);
  // keep relu inputs away from the kink
  for (auto& v : x.data_mut())
    if (std::abs(v) < 0.1) v += 0.3;
  check_op_grad("relu", x, [&] { return sum_all(mul(relu(x), relu(x))); });
  check_op_grad("tanh", x, [&] { return sum_all(tanh_op(x)); });
  check_op_grad("exp", x, [&] { return sum_all(exp_op(x)); });
  check_op_grad("scale", x, [&] { return sum_all(scale(x, 2.5)); });
  auto y = random_leaf({8}, rng);
  std::vector<Tensor64> ins{x, y};
  auto res = finite_difference_check(ins, [&] { return sum_all(mul(x, y)); });
  CHECK(res.max_rel_err <= 1e-5);
  auto res2 = finite_difference_check(ins, [&] { return sum_all(sub(x, y)); });
  CHECK(res2.max_rel_err <= 1e-5);
  auto xp = random_leaf({8}, rng);
  for (auto& v : xp.data_mut()) v = std::abs(v) + 0.5;
  check_op_grad("log", xp, [&] { return sum_all(log_op(xp)); });
}

TEST_CASE("non-finite forward output raises NumericError") {
  auto x = Tensor::from_data({1}, {100.f});
  CHECK_THROWS_AS(exp_op(x), NumericError);  // exp(100) overflows f32
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST_CASE("softmax symmetry and hand values") {
  auto y = softmax(Tensor::from_data({2}, {0, 0}));
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));
  auto y2 = softmax(Tensor::from_data({2}, {0.f, std::log(2.f)}));
  CHECK(y2.data()[0] == doctest::Approx(1.0 / 3).epsilon(1e-6));
  CHECK(y2.data()[1] == doctest::Approx(2.0 / 3).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng = make_rng(6);
  auto x = Tensor::randn({5, 7}, rng, 3.f);
  auto y = softmax(x, 1);
  for (int i = 0; i < 5; ++i) {
    double s = 0;
    for (int j = 0; j < 7; ++j) {
      s += y.data()[i * 7 + j];
      CHECK(y.data()[i * 7 + j] > 0);
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
  auto yc = softmax(x, 0);
  for (int j = 0; j < 7; ++j) {
    double s = 0;
    for (int i = 0; i < 5; ++i) s += yc.data()[i * 7 + j];
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("softmax and log_softmax gradients vs finite differences") {
  Rng rng = make_rng(9);
  auto x = random_leaf({4, 5}, rng, 2.0);
  auto probe = random_leaf({4, 5}, rng);  // random linear functional of the output
  probe.set_requires_grad(false);
  std::vector<Tensor64> ins{x};
  auto res = finite_difference_check(ins, [&] { return sum_all(mul(softmax(x, 1), probe)); });
  CHECK(res.max_rel_err <= 1e-6);
  auto res0 = finite_difference_check(ins, [&] { return sum_all(mul(softmax(x, 0), probe)); });
  CHECK(res0.max_rel_err <= 1e-6);
  auto resl = finite_difference_check(ins, [&] { return sum_all(mul(log_softmax(x, 1), probe)); });
  CHECK(resl.max_rel_err <= 1e-5);
}

TEST_CASE("masked_log_softmax restricts the denominator") {
  auto x = Tensor::from_data({1, 3}, {0, 0, 0});
  std::vector<uint8_t> mask{1, 1, 0};
  auto y = masked_log_softmax(x, mask, 1);
  CHECK(y.data()[0] == doctest::Approx(std::log(0.5)));
  // gradient check
  Rng rng = make_rng(11);
  auto x64 = random_leaf({3, 4}, rng, 2.0);
  std::vector<uint8_t> m(12, 0);
  for (int i = 0; i < 3; ++i) {
    m[i * 4 + i] = 1;  // diagonal always on
    m[i * 4 + 3] = 1;
  }
  auto probe = random_leaf({3, 4}, rng);
  probe.set_requires_grad(false);
  std::vector<Tensor64> ins{x64};
  auto res = finite_difference_check(ins, [&] { return sum_all(mul(masked_log_softmax(x64, m, 1), probe)); });
  CHECK(res.max_rel_err <= 1e-5);
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

TEST_CASE("batch_norm zero-variance batch outputs the learned bias") {
  auto x = Tensor::from_data({4, 2}, std::vector<float>(8, 3.f));
  auto gamma = Tensor::from_data({2}, {1.f, 2.f});
  auto beta = Tensor::from_data({2}, {0.5f, -1.f});
  BatchNormState st(2);
  auto y = batch_norm(x, gamma, beta, st, true);
  for (int b = 0; b < 4; ++b) {
    CHECK(y.data()[b * 2 + 0] == doctest::Approx(0.5f));
    CHECK(y.data()[b * 2 + 1] == doctest::Approx(-1.f));
  }
}

TEST_CASE("batch_norm train mode standardizes per feature") {
  Rng rng = make_rng(12);
  auto x = Tensor::randn({16, 3}, rng, 2.f);
  auto gamma = Tensor::from_data({3}, {1, 1, 1});
  auto beta = Tensor::from_data({3}, {0, 0, 0});
  BatchNormState st(3);
  auto y = batch_norm(x, gamma, beta, st, true);
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (int b = 0; b < 16; ++b) m += y.data()[b * 3 + c];
    CHECK(std::abs(m / 16) <= 1e-5);
  }
}

TEST_CASE("batch_norm eval mode is deterministic under frozen stats") {
  Rng rng = make_rng(13);
  auto x = Tensor::randn({4, 2}, rng);
  auto gamma = Tensor::from_data({2}, {1, 1});
  auto beta = Tensor::from_data({2}, {0, 0});
  BatchNormState st(2);
  st.running_mean = {0.3f, -0.2f};
  st.running_var = {1.5f, 0.7f};
  auto y1 = batch_norm(x, gamma, beta, st, false);
  auto y2 = batch_norm(x, gamma, beta, st, false);
  for (int i = 0; i < 8; ++i) CHECK(y1.data()[i] == y2.data()[i]);
  CHECK(st.running_mean[0] == 0.3f);  // eval never updates stats
}

TEST_CASE("batch_norm train mode rejects batch of one") {
  auto x = Tensor::from_data({1, 2}, {1, 2});
  auto gamma = Tensor::from_data({2}, {1, 1});
  auto beta = Tensor::from_data({2}, {0, 0});
  BatchNormState st(2);
  CHECK_THROWS_AS(batch_norm(x, gamma, beta, st, true), ConfigError);
}

TEST_CASE("batch_norm gradients vs finite differences, train and eval") {
  Rng rng = make_rng(14);
  auto x = random_leaf({5, 3, 2}, rng, 1.5);
  auto gamma = random_leaf({3}, rng);
  for (auto& g : gamma.data_mut()) g += 1.5;  // keep scales away from zero
  auto beta = random_leaf({3}, rng);
  auto probe = random_leaf({5, 3, 2}, rng);
  probe.set_requires_grad(false);
  std::vector<Tensor64> ins{x, gamma, beta};
  auto train_res = finite_difference_check(ins, [&] {
    BatchNormStateT<double> st(3);  // fresh state per eval: running stats are not differentiated
    return sum_all(mul(batch_norm(x, gamma, beta, st, true), probe));
  });
  CHECK(train_res.max_rel_err <= 1e-5);
  BatchNormStateT<double> eval_st(3);
  eval_st.running_mean = {0.1, -0.4, 0.2};
  eval_st.running_var = {1.2, 0.5, 2.0};
  auto eval_res = finite_difference_check(
      ins, [&] { return sum_all(mul(batch_norm(x, gamma, beta, eval_st, false), probe)); });
  CHECK(eval_res.max_rel_err <= 1e-5);
}

// ---------------------------------------------------------------------------
// cosine similarity
// ---------------------------------------------------------------------------

TEST_CASE("cosine similarity matrix on unit rows") {
  auto a = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto m = cosine_similarity_matrix(a, a);
  CHECK(m.data()[0] == doctest::Approx(1));
  CHECK(m.data()[3] == doctest::Approx(1));
  CHECK(m.data()[1] == doctest::Approx(0));
  CHECK(m.data()[2] == doctest::Approx(0));
}

TEST_CASE("cosine similarity is scale invariant and bounded") {
  Rng rng = make_rng(15);
  auto a = Tensor::randn({4, 6}, rng);
  auto b = Tensor::randn({4, 6}, rng);
  auto m1 = cosine_similarity_matrix(a, b);
  auto a2 = scale(a, 2.f);
  auto m2 = cosine_similarity_matrix(a2, b);
  for (int i = 0; i < 16; ++i) {
    CHECK(std::abs(m1.data()[i] - m2.data()[i]) <= 1e-6);
    CHECK(m1.data()[i] >= -1.f - 1e-6f);
    CHECK(m1.data()[i] <= 1.f + 1e-6f);
  }
}

TEST_CASE("cosine similarity rejects dimension mismatch") {
  auto a = Tensor::from_data({2, 3}, std::vector<float>(6, 1.f));
  auto b = Tensor::from_data({2, 4}, std::vector<float>(8, 1.f));
  CHECK_THROWS_AS(cosine_similarity_matrix(a, b), DimensionError);
}

TEST_CASE("cosine similarity gradient vs finite differences") {
  Rng rng = make_rng(16);
  auto a = random_leaf({3, 4}, rng);
  auto b = random_leaf({3, 4}, rng);
  auto probe = random_leaf({3, 3}, rng);
  probe.set_requires_grad(false);
  std::vector<Tensor64> ins{a, b};
  auto res =
      finite_difference_check(ins, [&] { return sum_all(mul(cosine_similarity_matrix(a, b), probe)); });
  CHECK(res.max_rel_err <= 1e-5);
}

// ---------------------------------------------------------------------------
// misc ops
// ---------------------------------------------------------------------------

TEST_CASE("reshape, gather_rows, sum_diag, add_rowvec, pairwise_sqdist gradients") {
  Rng rng = make_rng(17);
  auto x = random_leaf({4, 3}, rng);
  check_op_grad("reshape", x, [&] { return sum_all(tanh_op(reshape(x, {3, 4}))); });
  check_op_grad("gather_rows", x, [&] { return sum_all(tanh_op(gather_rows(x, {2, 0, 2}))); });
  auto sq = random_leaf({3, 3}, rng);
  check_op_grad("sum_diag", sq, [&] { return sum_diag(tanh_op(sq)); });
  auto v = random_leaf({3}, rng);
  std::vector<Tensor64> ins{x, v};
  auto res = finite_difference_check(ins, [&] { return sum_all(tanh_op(add_rowvec(x, v))); });
  CHECK(res.max_rel_err <= 1e-5);
  auto b = random_leaf({5, 3}, rng);
  std::vector<Tensor64> ins2{x, b};
  auto res2 = finite_difference_check(ins2, [&] { return sum_all(tanh_op(pairwise_sqdist(x, b))); });
  CHECK(res2.max_rel_err <= 1e-5);
}

TEST_CASE("gradient_reversal flips and scales the upstream gradient") {
  auto x = leaf({3}, {1, 2, 3});
  auto y = sum_all(gradient_reversal(x, 10.0));
  backward(y);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(-10.0));
}

TEST_CASE("attention_combine gradient vs finite differences") {
  Rng rng = make_rng(18);
  auto s = random_leaf({2, 3, 4}, rng);
  auto a = random_leaf({2, 3}, rng);
  std::vector<Tensor64> ins{s, a};
  auto res = finite_difference_check(ins, [&] { return sum_all(tanh_op(attention_combine(s, a))); });
  CHECK(res.max_rel_err <= 1e-5);
}

TEST_CASE("nll_loss gradient vs finite differences") {
  Rng rng = make_rng(19);
  auto x = random_leaf({4, 3}, rng, 2.0);
  std::vector<int> labels{0, 2, 1, 2};
  std::vector<Tensor64> ins{x};
  auto res = finite_difference_check(ins, [&] { return nll_loss(log_softmax(x, 1), labels); });
  CHECK(res.max_rel_err <= 1e-5);
}

// ---------------------------------------------------------------------------
// backward mechanics
// ---------------------------------------------------------------------------

TEST_CASE("backward of sum gives ones") {
  auto x = leaf({4}, {1, 2, 3, 4});
  backward(sum_all(x));
  for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(1));
}

TEST_CASE("backward of product routes cross gradients") {
  auto x = Tensor64::scalar(2, true);
  auto y = Tensor64::scalar(3, true);
  backward(mul(x, y));
  CHECK(x.grad()[0] == doctest::Approx(3));
  CHECK(y.grad()[0] == doctest::Approx(2));
}

TEST_CASE("fan-out accumulates additively") {
  auto x = leaf({2}, {1.0, -2.0});
  auto f = sum_all(mul(x, x));          // df/dx = 2x
  auto g = sum_all(scale(x, 3.0));      // dg/dx = 3
  backward(add(f, g));
  CHECK(x.grad()[0] == doctest::Approx(2 * 1.0 + 3));
  CHECK(x.grad()[1] == doctest::Approx(2 * -2.0 + 3));
}

TEST_CASE("backward on a non-scalar root is a contract error") {
  auto x = leaf({3}, {1, 2, 3});
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("repeated backward without reset is a contract error") {
  auto x = leaf({2}, {1, 2});
  auto l = sum_all(x);
  backward(l);
  CHECK_THROWS_AS(backward(l), ContractError);
}

TEST_CASE("tape order is topological: parents precede consumers") {
  Rng rng = make_rng(20);
  auto x = random_leaf({3, 3}, rng);
  auto y = random_leaf({3, 3}, rng);
  auto z = sum_all(mul(add(matmul(x, y), y), tanh_op(x)));
  auto tape = TapeT<double>::build(z);
  std::unordered_map<const Node<double>*, size_t> pos;
  for (size_t i = 0; i < tape.order.size(); ++i) pos[tape.order[i]] = i;
  for (size_t i = 0; i < tape.order.size(); ++i)
    for (const auto& parent : tape.order[i]->parents)
      if (parent->requires_grad) CHECK(pos.at(parent.get()) < i);
}

TEST_CASE("no graph is recorded when gradients are disabled") {
  auto x = leaf({2}, {1, 2});
  NoGradGuard ng;
  auto y = scale(x, 2.0);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node->parents.empty());
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST_CASE("adam leaves params unchanged on zero gradient without decay") {
  auto p = Tensor::from_data({3}, {1, 2, 3}, true);
  p.zero_grad();
  std::vector<Tensor> params{p};
  AdamState st;
  st.weight_decay = 0;
  adam_step(params, st);
  CHECK(p.data()[0] == 1.f);
  CHECK(p.data()[1] == 2.f);
  CHECK(p.data()[2] == 3.f);
}

TEST_CASE("adam first step moves by about lr in the gradient sign direction") {
  auto p = Tensor::from_data({2}, {0.5f, -0.5f}, true);
  p.zero_grad();
  p.node->grad = {0.3f, -0.7f};
  std::vector<Tensor> params{p};
  AdamState st;
  st.lr = 1e-3f;
  st.weight_decay = 0;
  adam_step(params, st);
  // bias-corrected first step: update = lr * g / (|g| + eps') ~= lr * sign(g)
  CHECK(p.data()[0] == doctest::Approx(0.5f - 1e-3f).epsilon(1e-3));
  CHECK(p.data()[1] == doctest::Approx(-0.5f + 1e-3f).epsilon(1e-3));
  CHECK(st.step_count == 1);
}

TEST_CASE("adam descends a quadratic bowl monotonically") {
  auto p = Tensor::from_data({4}, {1.f, -2.f, 0.5f, 3.f}, true);
  std::vector<Tensor> params{p};
  AdamState st;
  st.lr = 5e-2f;
  st.weight_decay = 0;
  double prev = 1e30;
  for (int i = 0; i < 100; ++i) {
    p.zero_grad();
    auto loss = sum_all(mul(p, p));
    double v = loss.item();
    CHECK(v < prev);
    prev = v;
    backward(loss);
    adam_step(params, st);
  }
  CHECK(prev < 0.5);
}

TEST_CASE("adam rejects mismatched state") {
  auto p = Tensor::from_data({3}, {1, 2, 3}, true);
  auto q = Tensor::from_data({2}, {1, 2}, true);
  std::vector<Tensor> params{p};
  AdamState st;
  st.init(params);
  std::vector<Tensor> both{p, q};
  CHECK_THROWS_AS(adam_step(both, st), ContractError);
}

// ---------------------------------------------------------------------------
// NSWT serialization
// ---------------------------------------------------------------------------

TEST_CASE("NSWT round-trip is bit exact, f32 and f64") {
  Rng rng = make_rng(23);
  auto t32 = Tensor::randn({3, 4, 2}, rng);
  std::stringstream buf;
  write_nswt(buf, t32);
  auto back32 = read_nswt<float>(buf);
  REQUIRE(back32.shape() == t32.shape());
  CHECK(std::memcmp(back32.data().data(), t32.data().data(), sizeof(float) * t32.numel()) == 0);

  auto t64 = Tensor64::randn({7}, rng);
  std::stringstream buf64;
  write_nswt(buf64, t64);
  auto back64 = read_nswt<double>(buf64);
  CHECK(std::memcmp(back64.data().data(), t64.data().data(), sizeof(double) * 7) == 0);
}

TEST_CASE("NSWT header layout is stable") {
  auto t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  std::stringstream buf;
  write_nswt(buf, t);
  std::string bytes = buf.str();
  REQUIRE(bytes.size() == 4 + 3 + 16 + 24);
  CHECK(bytes.substr(0, 4) == "NSWT");
  CHECK(bytes[4] == 1);  // version
  CHECK(bytes[5] == 0);  // f32
  CHECK(bytes[6] == 2);  // ndim
  uint64_t d0, d1;
  std::memcpy(&d0, bytes.data() + 7, 8);
  std::memcpy(&d1, bytes.data() + 15, 8);
  CHECK(d0 == 2);
  CHECK(d1 == 3);
}

TEST_CASE("checkpoint container round-trips names and bytes") {
  Rng rng = make_rng(24);
  Checkpoint ck;
  ck.manifest_json = R"({"version":1,"epoch":3})";
  ck.tensors.emplace_back("w1", Tensor::randn({4, 4}, rng));
  ck.tensors.emplace_back("b1", Tensor::randn({4}, rng));
  std::string path = (std::filesystem::temp_directory_path() / "nsw_ckpt_test.bin").string();
  save_checkpoint(path, ck);
  auto back = load_checkpoint(path);
  CHECK(back.manifest_json == ck.manifest_json);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].first == "w1");
  CHECK(std::memcmp(back.find("w1").data().data(), ck.find("w1").data().data(), sizeof(float) * 16) == 0);
  CHECK(std::memcmp(back.find("b1").data().data(), ck.find("b1").data().data(), sizeof(float) * 4) == 0);
  std::filesystem::remove(path);
}
