#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neuroswap/encoders.hpp"
#include "neuroswap/gradcheck.hpp"
#include "neuroswap/objectives.hpp"

using namespace neuroswap;

namespace {

template <typename T>
TensorT<T> random_unit_rows(int64_t n, int64_t d, Rng& rng) {
  std::vector<T> data(n * d);
  for (int64_t i = 0; i < n; ++i) {
    double norm = 0;
    for (int64_t j = 0; j < d; ++j) {
      double v = gaussian(rng);
      data[i * d + j] = static_cast<T>(v);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (int64_t j = 0; j < d; ++j) data[i * d + j] = static_cast<T>(data[i * d + j] / norm);
  }
  return TensorT<T>::from_data({n, d}, std::move(data));
}

}  // namespace

// ---------------------------------------------------------------------------
// info_nce
// ---------------------------------------------------------------------------

TEST_CASE("info_nce with a single pair is exactly zero") {
  ContrastiveBatch batch;
  batch.z_b = Tensor::from_data({1, 3}, {1, 0, 0});
  batch.z_n = Tensor::from_data({1, 3}, {0.3f, 0.7f, 0.1f});
  batch.temperature = 0.1f;
  auto terms = info_nce(batch);
  CHECK(terms.total.item() == doctest::Approx(0.f));
}

TEST_CASE("info_nce hand value for orthogonal pairs at unit temperature") {
  ContrastiveBatch batch;
  batch.z_b = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  batch.z_n = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  batch.temperature = 1.f;
  auto terms = info_nce(batch);
  const double per_direction = 2.0 * std::log(1.0 + std::exp(-1.0));
  CHECK(terms.b2n.item() == doctest::Approx(per_direction).epsilon(1e-5));
  CHECK(terms.n2b.item() == doctest::Approx(per_direction).epsilon(1e-5));
  CHECK(terms.total.item() == doctest::Approx(1.25305).epsilon(1e-4));
}

TEST_CASE("info_nce on random unit vectors sits at the ln N chance level") {
  // Unit-scale similarities: with tau = 1 the expected per-sample
  // per-direction loss is ln N for random codes.
  const int64_t n = 128, d = 128;
  double worst = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng = make_rng(seed, 77);
    ContrastiveBatch batch;
    batch.z_b = random_unit_rows<float>(n, d, rng);
    batch.z_n = random_unit_rows<float>(n, d, rng);
    batch.temperature = 1.f;
    auto terms = info_nce(batch);
    const double per = terms.b2n.item() / n;
    worst = std::max(worst, std::abs(per - std::log(128.0)));
  }
  CHECK(worst <= 0.3);
}

TEST_CASE("info_nce is invariant to a common row permutation") {
  Rng rng = make_rng(3);
  const int64_t n = 6, d = 8;
  ContrastiveBatch batch;
  batch.z_b = random_unit_rows<float>(n, d, rng);
  batch.z_n = random_unit_rows<float>(n, d, rng);
  batch.temperature = 0.1f;
  auto base = info_nce(batch).total.item();

  std::vector<int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  ContrastiveBatch shuffled;
  shuffled.z_b = gather_rows(batch.z_b, perm);
  shuffled.z_n = gather_rows(batch.z_n, perm);
  shuffled.temperature = 0.1f;
  CHECK(info_nce(shuffled).total.item() == doctest::Approx(base).epsilon(1e-5));
}

TEST_CASE("info_nce decreases when a positive pair aligns more closely") {
  Rng rng = make_rng(4);
  const int64_t n = 5, d = 6;
  auto z_b = random_unit_rows<float>(n, d, rng);
  auto z_n = random_unit_rows<float>(n, d, rng);
  ContrastiveBatch batch{z_b, z_n, {}, 0.1f};
  auto before = info_nce(batch).total.item();
  // move z_n row 0 toward z_b row 0
  std::vector<float> data(z_n.data().begin(), z_n.data().end());
  for (int64_t j = 0; j < d; ++j) data[j] = 0.2f * data[j] + 0.8f * z_b.data()[j];
  ContrastiveBatch closer{z_b, Tensor::from_data({n, d}, std::move(data)), {}, 0.1f};
  CHECK(info_nce(closer).total.item() < before);
}

TEST_CASE("combined loss equals the sum of its directions") {
  Rng rng = make_rng(5);
  ContrastiveBatch batch;
  batch.z_b = random_unit_rows<float>(7, 9, rng);
  batch.z_n = random_unit_rows<float>(7, 9, rng);
  batch.temperature = 0.1f;
  auto terms = info_nce(batch);
  CHECK(std::abs(terms.total.item() - (terms.b2n.item() + terms.n2b.item())) <= 1e-6);
}

TEST_CASE("non-positive temperature is a configuration error") {
  ContrastiveBatch batch;
  batch.z_b = Tensor::from_data({1, 2}, {1, 0});
  batch.z_n = Tensor::from_data({1, 2}, {1, 0});
  batch.temperature = 0.f;
  CHECK_THROWS_AS(info_nce(batch), ConfigError);
  batch.temperature = -1.f;
  CHECK_THROWS_AS(info_nce(batch), ConfigError);
}

// ---------------------------------------------------------------------------
// domain-masked info_nce
// ---------------------------------------------------------------------------

TEST_CASE("masked loss equals plain loss when all rows share a domain") {
  Rng rng = make_rng(6);
  ContrastiveBatch batch;
  batch.z_b = random_unit_rows<float>(6, 8, rng);
  batch.z_n = random_unit_rows<float>(6, 8, rng);
  batch.domains = std::vector<int>(6, 2);
  batch.temperature = 0.1f;
  CHECK(info_nce_domain_masked(batch).total.item() ==
        doctest::Approx(info_nce(batch).total.item()).epsilon(1e-6));
}

TEST_CASE("masked loss over two domains decomposes into per-domain losses") {
  Rng rng = make_rng(7);
  const int64_t d = 8;
  auto a_b = random_unit_rows<float>(3, d, rng);
  auto a_n = random_unit_rows<float>(3, d, rng);
  auto b_b = random_unit_rows<float>(4, d, rng);
  auto b_n = random_unit_rows<float>(4, d, rng);

  std::vector<float> zb(a_b.data().begin(), a_b.data().end());
  zb.insert(zb.end(), b_b.data().begin(), b_b.data().end());
  std::vector<float> zn(a_n.data().begin(), a_n.data().end());
  zn.insert(zn.end(), b_n.data().begin(), b_n.data().end());

  ContrastiveBatch mixed;
  mixed.z_b = Tensor::from_data({7, d}, std::move(zb));
  mixed.z_n = Tensor::from_data({7, d}, std::move(zn));
  mixed.domains = {0, 0, 0, 1, 1, 1, 1};
  mixed.temperature = 0.1f;

  ContrastiveBatch da{a_b, a_n, {}, 0.1f};
  ContrastiveBatch db{b_b, b_n, {}, 0.1f};
  const double expected = info_nce(da).total.item() + info_nce(db).total.item();
  CHECK(info_nce_domain_masked(mixed).total.item() == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("masked loss never exceeds the unmasked loss") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed, 55);
    const int64_t n = 8;
    ContrastiveBatch batch;
    batch.z_b = random_unit_rows<float>(n, 12, rng);
    batch.z_n = random_unit_rows<float>(n, 12, rng);
    batch.domains.resize(n);
    for (auto& d : batch.domains) d = static_cast<int>(uniform_int(rng, 0, 2));
    batch.temperature = 0.1f;
    // fewer denominator terms can only shrink each -log softmax term
    CHECK(info_nce_domain_masked(batch).total.item() <= info_nce(batch).total.item() + 1e-5);
  }
}

TEST_CASE("masked loss requires domain ids") {
  ContrastiveBatch batch;
  batch.z_b = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  batch.z_n = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  batch.temperature = 0.1f;
  CHECK_THROWS_AS(info_nce_domain_masked(batch), DimensionError);
}

TEST_CASE("contrastive gradients pass finite-difference checks end to end") {
  // through tiny encoders + projections + InfoNCE, f64
  EncoderConfig cfg;
  cfg.behavior_frames = 4;
  cfg.joints = 2;
  cfg.neural_frames = 4;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.embed_dim = 8;
  cfg.proj_dim = 8;
  cfg.attention_dim = 4;
  cfg.behavior_channels = {6, 8};
  cfg.frame_embed_dim = 8;
  cfg.temporal_channels = {6, 8};
  auto m = ModelBundleT<double>::init(cfg, {}, 42);
  Rng rng = make_rng(43);
  const int64_t B = 3;
  std::vector<double> bdata(B * cfg.behavior_dim() * cfg.behavior_frames);
  for (auto& v : bdata) v = uniform(rng, -1, 1);
  std::vector<double> ndata(B * cfg.neural_frames * cfg.image_h * cfg.image_w);
  for (auto& v : ndata) v = uniform(rng, 0, 1);
  auto xb = Tensor64::from_data({B, cfg.behavior_dim(), cfg.behavior_frames}, std::move(bdata), true);
  auto xn = Tensor64::from_data({B, cfg.neural_frames, cfg.image_h, cfg.image_w}, std::move(ndata), true);

  auto loss_fn = [&] {
    ContrastiveBatchT<double> batch;
    batch.z_b = m.project_behavior(m.encode_behavior_batch(xb, true));
    batch.z_n = m.project_neural(m.encode_neural_batch(xn, true));
    batch.domains = {0, 1, 0};
    batch.temperature = 0.1;
    return info_nce_domain_masked(batch).total;
  };
  std::vector<Tensor64> ins{xb, xn};
  auto res = finite_difference_check(ins, loss_fn, {"xb", "xn"});
  CHECK(res.max_rel_err <= 1e-4);
}

// ---------------------------------------------------------------------------
// GRL discriminator loss
// ---------------------------------------------------------------------------

TEST_CASE("discriminator with probability one on the true domain has zero loss") {
  // logits engineered so softmax ~ one-hot on the labeled domain
  Rng rng = make_rng(8);
  MlpHeadT<float> disc(2, 2, 2, rng);
  // bypass the mlp: feed logits directly through an identity-like check on nll
  auto logits = Tensor::from_data({2, 2}, {50.f, 0.f, 0.f, 50.f});
  auto loss = nll_loss(log_softmax(logits, 1), {0, 1});
  CHECK(loss.item() == doctest::Approx(0.f).epsilon(1e-6));
}

TEST_CASE("uniform discriminator over 4 domains gives per-sample loss ln 4") {
  auto logits = Tensor::from_data({3, 4}, std::vector<float>(12, 0.f));
  auto loss = nll_loss(log_softmax(logits, 1), {0, 1, 3});
  CHECK(loss.item() / 3 == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("grl loss is non-negative and validates configuration") {
  Rng rng = make_rng(9);
  MlpHeadT<float> disc(8, 8, 3, rng);
  auto h = Tensor::randn({5, 8}, rng);
  std::vector<int> domains{0, 1, 2, 0, 1};
  auto loss = grl_discriminator_loss(h, domains, disc, 10.f, 3);
  CHECK(loss.item() >= 0.f);
  CHECK_THROWS_AS(grl_discriminator_loss(h, domains, disc, 10.f, 1), ConfigError);
  MlpHeadT<float> wrong(8, 8, 2, rng);
  CHECK_THROWS_AS(grl_discriminator_loss(h, domains, wrong, 10.f, 3), ConfigError);
}

TEST_CASE("gradient reversal scales the encoder-side gradient by -lambda") {
  Rng rng = make_rng(10);
  MlpHeadT<double> disc(6, 6, 3, rng);
  const double lambda_d = 10.0;
  auto h = Tensor64::randn({4, 6}, rng, 1.0, true);
  std::vector<int> domains{0, 2, 1, 0};

  // encoder-side gradient with reversal
  h.zero_grad();
  backward(grl_discriminator_loss(h, domains, disc, lambda_d, 3));
  std::vector<double> with_reversal(h.grad().begin(), h.grad().end());

  // the same loss without any reversal node
  h.zero_grad();
  backward(nll_loss(log_softmax(disc.forward(h), 1), domains));
  std::vector<double> without(h.grad().begin(), h.grad().end());

  for (size_t i = 0; i < with_reversal.size(); ++i)
    CHECK(with_reversal[i] == doctest::Approx(-lambda_d * without[i]).epsilon(1e-9));

  // and the no-reversal gradient itself agrees with finite differences
  std::vector<Tensor64> ins{h};
  auto res = finite_difference_check(
      ins, [&] { return nll_loss(log_softmax(disc.forward(h), 1), domains); }, {"h"});
  CHECK(res.max_rel_err <= 1e-5);
}

// ---------------------------------------------------------------------------
// MMD
// ---------------------------------------------------------------------------

TEST_CASE("mmd of a sample against itself is (almost) zero") {
  Rng rng = make_rng(11);
  auto h = Tensor::randn({16, 8}, rng);
  auto est = mmd(h, h);
  CHECK(std::abs(est.item()) <= 1e-6);
}

TEST_CASE("mmd of far-separated clouds approaches 2 at fixed bandwidth") {
  Rng rng = make_rng(12);
  const double sigma = 1.0;
  auto a = Tensor::randn({12, 4}, rng, 0.05f);
  std::vector<float> shifted(12 * 4);
  for (int i = 0; i < 12 * 4; ++i)
    shifted[i] = static_cast<float>(gaussian(rng, 0.0, 0.05)) + 100.f;  // 100x the bandwidth away
  auto b = Tensor::from_data({12, 4}, std::move(shifted));
  CHECK(mmd(a, b, sigma).item() >= 1.9f);
}

TEST_CASE("mmd on two samples of the same distribution is small") {
  Rng rng = make_rng(13);
  auto a = Tensor::randn({256, 8}, rng);
  auto b = Tensor::randn({256, 8}, rng);
  CHECK(mmd(a, b).item() <= 0.05f);
}

TEST_CASE("mmd is symmetric in its arguments") {
  Rng rng = make_rng(14);
  auto a = Tensor::randn({10, 6}, rng);
  auto b = Tensor::randn({14, 6}, rng);  // unequal counts take the cross-mean path
  CHECK(std::abs(mmd(a, b).item() - mmd(b, a).item()) <= 1e-9);
  auto c = Tensor::randn({10, 6}, rng);
  CHECK(std::abs(mmd(a, c).item() - mmd(c, a).item()) <= 1e-9);
}

TEST_CASE("mmd needs two samples per side") {
  Rng rng = make_rng(15);
  auto a = Tensor::randn({1, 4}, rng);
  auto b = Tensor::randn({8, 4}, rng);
  CHECK_THROWS_AS(mmd(a, b), ConfigError);
}

TEST_CASE("mmd bandwidth floor guards identical pooled points") {
  auto a = Tensor::from_data({2, 2}, {1.f, 1.f, 1.f, 1.f});
  auto b = Tensor::from_data({2, 2}, {1.f, 1.f, 1.f, 1.f});
  CHECK(mmd_median_bandwidth(a, b) == doctest::Approx(1e-6));
  CHECK(std::abs(mmd(a, b).item()) <= 1e-6);
}

TEST_CASE("mmd gradient vs finite differences") {
  Rng rng = make_rng(16);
  auto a = Tensor64::randn({5, 4}, rng, 1.0, true);
  auto b = Tensor64::randn({6, 4}, rng, 1.0, true);
  for (auto& v : b.data_mut()) v += 2.5;  // separated clouds keep the estimate positive
  const double sigma = 2.0;  // fixed: the median heuristic is not differentiated
  std::vector<Tensor64> ins{a, b};
  auto res = finite_difference_check(ins, [&] { return mmd(a, b, sigma); }, {"a", "b"});
  CHECK(res.max_rel_err <= 1e-5);
}

TEST_CASE("mmd_penalty averages eligible domain pairs") {
  Rng rng = make_rng(17);
  auto h = Tensor::randn({12, 4}, rng);
  std::vector<int> domains{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2};
  auto pen = mmd_penalty(h, domains);
  REQUIRE(pen.defined());
  CHECK(pen.item() >= 0.f);
  // lone third domain drops out, pair (0,1) remains
  std::vector<int> lone{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 3};
  CHECK(mmd_penalty(h, lone).defined());
  std::vector<int> single_domain(12, 0);
  CHECK_FALSE(mmd_penalty(h, single_domain).defined());
}
