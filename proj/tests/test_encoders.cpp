#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "neuroswap/encoders.hpp"
#include "neuroswap/gradcheck.hpp"

using namespace neuroswap;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.behavior_frames = 4;
  cfg.joints = 2;
  cfg.neural_frames = 4;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.embed_dim = 8;
  cfg.proj_dim = 8;
  cfg.attention_dim = 4;
  cfg.behavior_channels = {8, 12};
  cfg.behavior_pool_after = 2;
  cfg.frame_embed_dim = 12;
  cfg.temporal_channels = {8, 12};
  cfg.temporal_pool_after = 2;
  return cfg;
}

Tensor random_neural_batch(const EncoderConfig& cfg, int batch, Rng& rng) {
  std::vector<float> data(batch * cfg.neural_frames * cfg.image_h * cfg.image_w);
  for (auto& v : data) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  return Tensor::from_data({batch, cfg.neural_frames, cfg.image_h, cfg.image_w}, std::move(data));
}

Tensor random_behavior_batch(const EncoderConfig& cfg, int batch, Rng& rng) {
  std::vector<float> data(batch * cfg.behavior_dim() * cfg.behavior_frames);
  for (auto& v : data) v = static_cast<float>(uniform(rng, -1.0, 1.0));
  return Tensor::from_data({batch, cfg.behavior_dim(), cfg.behavior_frames}, std::move(data));
}

}  // namespace

TEST_CASE("encoders produce the configured embedding width") {
  EncoderConfig cfg;  // defaults: 64x64, 32 frames, 128-dim output
  auto m = ModelBundle::init(cfg, {}, 1);
  Rng rng = make_rng(2);

  std::vector<float> bw(cfg.behavior_frames * cfg.joints * 3);
  for (auto& v : bw) v = static_cast<float>(uniform(rng, -1, 1));
  auto hb = encode_behavior(m, Tensor::from_data({cfg.behavior_frames, cfg.joints, 3}, bw));
  CHECK(hb.shape() == Shape{128});

  std::vector<float> nw(cfg.neural_frames * cfg.image_h * cfg.image_w);
  for (auto& v : nw) v = static_cast<float>(uniform(rng, 0, 1));
  auto hn = encode_neural(m, Tensor::from_data({cfg.neural_frames, cfg.image_h, cfg.image_w}, nw));
  CHECK(hn.shape() == Shape{128});

  auto zb = m.project_behavior(reshape(hb, {1, 128}));
  CHECK(zb.shape() == Shape{1, 128});
}

TEST_CASE("wrong joint count is a dimension error") {
  auto m = ModelBundle::init(tiny_config(), {}, 1);
  auto bad = Tensor::zeros({4, 5, 3});  // config expects 2 joints
  CHECK_THROWS_AS(encode_behavior(m, bad), DimensionError);
  auto bad_n = Tensor::zeros({4, 8, 12});
  CHECK_THROWS_AS(encode_neural(m, bad_n), DimensionError);
}

TEST_CASE("eval-mode encoding is a pure function") {
  auto cfg = tiny_config();
  auto m = ModelBundle::init(cfg, {}, 3);
  Rng rng = make_rng(4);
  auto x = random_neural_batch(cfg, 2, rng);
  NoGradGuard ng;
  auto h1 = m.encode_neural_batch(x, false);
  auto h2 = m.encode_neural_batch(x, false);
  for (int64_t i = 0; i < h1.numel(); ++i) CHECK(h1.data()[i] == h2.data()[i]);
}

TEST_CASE("permuting batch order permutes eval outputs identically") {
  auto cfg = tiny_config();
  auto m = ModelBundle::init(cfg, {}, 5);
  Rng rng = make_rng(6);
  auto x = random_behavior_batch(cfg, 3, rng);
  // reversed copy of the batch
  const int64_t stride = cfg.behavior_dim() * cfg.behavior_frames;
  std::vector<float> rev(x.data().begin(), x.data().end());
  for (int b = 0; b < 3; ++b)
    std::copy(x.data().begin() + b * stride, x.data().begin() + (b + 1) * stride,
              rev.begin() + (2 - b) * stride);
  NoGradGuard ng;
  auto h = m.encode_behavior_batch(x, false);
  auto hr = m.encode_behavior_batch(Tensor::from_data(x.shape(), std::move(rev)), false);
  for (int b = 0; b < 3; ++b)
    for (int d = 0; d < cfg.embed_dim; ++d)
      CHECK(h.data()[b * cfg.embed_dim + d] == hr.data()[(2 - b) * cfg.embed_dim + d]);
}

TEST_CASE("identical windows encode identically in eval mode") {
  auto cfg = tiny_config();
  auto m = ModelBundle::init(cfg, {}, 7);
  Rng rng = make_rng(8);
  auto one = random_behavior_batch(cfg, 1, rng);
  std::vector<float> two(one.data().begin(), one.data().end());
  two.insert(two.end(), one.data().begin(), one.data().end());
  NoGradGuard ng;
  auto h = m.encode_behavior_batch(
      Tensor::from_data({2, cfg.behavior_dim(), cfg.behavior_frames}, std::move(two)), false);
  for (int d = 0; d < cfg.embed_dim; ++d)
    CHECK(h.data()[d] == h.data()[cfg.embed_dim + d]);
}

TEST_CASE("all-zero neural input yields a finite bias-path response") {
  auto cfg = tiny_config();
  auto m = ModelBundle::init(cfg, {}, 9);
  auto zero = Tensor::zeros({cfg.neural_frames, cfg.image_h, cfg.image_w});
  auto h = encode_neural(m, zero);  // finiteness enforced by every op
  CHECK(h.numel() == cfg.embed_dim);
}

TEST_CASE("neural encoder gradient wrt input on a tiny config") {
  auto cfg = tiny_config();
  auto m = ModelBundleT<double>::init(cfg, {}, 10);
  Rng rng = make_rng(11);
  std::vector<double> data(2 * cfg.neural_frames * cfg.image_h * cfg.image_w);
  for (auto& v : data) v = uniform(rng, 0.0, 1.0);
  auto x = Tensor64::from_data({2, cfg.neural_frames, cfg.image_h, cfg.image_w}, std::move(data), true);
  std::vector<Tensor64> ins{x};
  auto res = finite_difference_check(
      ins, [&] { return sum_all(tanh_op(m.encode_neural_batch(x, true))); }, {"x"});
  CHECK(res.max_rel_err <= 1e-4);
}

// ---------------------------------------------------------------------------
// attention pooling
// ---------------------------------------------------------------------------

TEST_CASE("attention pooling on two identical rows") {
  Rng rng = make_rng(12);
  AttentionPoolT<float> softmax_attn(3, 4, false, rng);
  AttentionPoolT<float> verbatim_attn(3, 4, true, rng);
  auto s = Tensor::from_data({2, 3}, {0.5f, -1.f, 2.f, 0.5f, -1.f, 2.f});

  auto pooled_soft = attention_pool(softmax_attn, s);
  for (int d = 0; d < 3; ++d) CHECK(pooled_soft.data()[d] == doctest::Approx(s.data()[d]).epsilon(1e-6));

  auto pooled_verb = attention_pool(verbatim_attn, s);
  const float factor = 2.f * std::log(2.f);  // both weights are -log(1/2)
  for (int d = 0; d < 3; ++d)
    CHECK(pooled_verb.data()[d] == doctest::Approx(factor * s.data()[d]).epsilon(1e-5));
}

TEST_CASE("attention pooling degenerate T=1") {
  Rng rng = make_rng(13);
  AttentionPoolT<float> softmax_attn(3, 4, false, rng);
  AttentionPoolT<float> verbatim_attn(3, 4, true, rng);
  auto s = Tensor::from_data({1, 3}, {1.f, 2.f, 3.f});
  auto pooled_soft = attention_pool(softmax_attn, s);
  for (int d = 0; d < 3; ++d) CHECK(pooled_soft.data()[d] == doctest::Approx(s.data()[d]));
  // -log softmax over one step is exactly zero: the documented sharp edge
  auto pooled_verb = attention_pool(verbatim_attn, s);
  for (int d = 0; d < 3; ++d) CHECK(pooled_verb.data()[d] == doctest::Approx(0.f));
}

TEST_CASE("attention weight modes: softmax sums to one, verbatim non-negative") {
  Rng rng = make_rng(14);
  AttentionPoolT<float> soft(5, 4, false, rng);
  AttentionPoolT<float> verb(5, 4, true, rng);
  auto s = Tensor::randn({3, 6, 5}, rng, 2.f);
  auto ws = soft.weights(s);
  for (int b = 0; b < 3; ++b) {
    double total = 0;
    for (int t = 0; t < 6; ++t) total += ws.data()[b * 6 + t];
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
  auto wv = verb.weights(s);
  for (int64_t i = 0; i < wv.numel(); ++i) CHECK(wv.data()[i] >= 0.f);
}

// ---------------------------------------------------------------------------
// projection heads
// ---------------------------------------------------------------------------

TEST_CASE("projection heads preserve width but differ per modality") {
  auto cfg = tiny_config();
  auto m = ModelBundle::init(cfg, {}, 15);
  Rng rng = make_rng(16);
  auto h = Tensor::randn({2, cfg.embed_dim}, rng);
  auto zb = m.project_behavior(h);
  auto zn = m.project_neural(h);
  CHECK(zb.shape() == Shape{2, cfg.embed_dim});
  CHECK(zn.shape() == Shape{2, cfg.embed_dim});
  double diff = 0;
  for (int64_t i = 0; i < zb.numel(); ++i) diff += std::abs(zb.data()[i] - zn.data()[i]);
  CHECK(diff > 1e-3);  // independent parameters
}

// ---------------------------------------------------------------------------
// bundle checkpointing
// ---------------------------------------------------------------------------

TEST_CASE("bundle save/load round-trips encodings bit-exactly") {
  auto cfg = tiny_config();
  BundleExtras extras;
  extras.discriminators = true;
  extras.n_domains = 3;
  auto m = ModelBundle::init(cfg, extras, 17);
  Rng rng = make_rng(18);
  auto x = random_neural_batch(cfg, 2, rng);
  // push the running stats away from init so buffers matter
  { auto unused = m.encode_neural_batch(x, true); (void)unused; }

  Checkpoint ck;
  ck.manifest_json = "{}";
  bundle_to_checkpoint(m, ck);
  std::string path = (std::filesystem::temp_directory_path() / "nsw_bundle_test.bin").string();
  save_checkpoint(path, ck);

  auto m2 = ModelBundle::init(cfg, extras, 999);  // different init, then overwrite
  bundle_from_checkpoint(m2, load_checkpoint(path));
  NoGradGuard ng;
  auto h1 = m.encode_neural_batch(x, false);
  auto h2 = m2.encode_neural_batch(x, false);
  for (int64_t i = 0; i < h1.numel(); ++i) CHECK(h1.data()[i] == h2.data()[i]);
  std::filesystem::remove(path);
}

TEST_CASE("parameter census is stable and names are unique") {
  auto cfg = tiny_config();
  auto m = ModelBundle::init(cfg, {}, 19);
  auto named = m.named_params();
  std::set<std::string> names;
  for (auto& [n, t] : named) names.insert(n);
  CHECK(names.size() == named.size());
  CHECK(m.param_count() > 0);
  auto m2 = ModelBundle::init(cfg, {}, 20);
  CHECK(m2.param_count() == m.param_count());
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg = tiny_config();
  cfg.embed_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.behavior_pool_after = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.image_h = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("encoder config json round-trip") {
  EncoderConfig cfg = tiny_config();
  cfg.attention_mode = "softmax";
  nlohmann::json j = cfg;
  EncoderConfig back = j.get<EncoderConfig>();
  CHECK(back.joints == cfg.joints);
  CHECK(back.attention_mode == "softmax");
  CHECK(back.behavior_channels == cfg.behavior_channels);
  CHECK(back.image_h == cfg.image_h);
}
