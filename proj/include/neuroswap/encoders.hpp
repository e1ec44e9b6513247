#pragma once

// Behavioral encoder f_b, neural encoder f_n, attention pooling and the
// projection heads g_b / g_n. The default layer stack follows the reference
// architecture at reduced input width (64x64 synthetic images instead of
// 128x128); all widths are configurable.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuroswap/errors.hpp"
#include "neuroswap/io.hpp"
#include "neuroswap/nn.hpp"
#include "neuroswap/rng.hpp"
#include "neuroswap/tensor.hpp"

namespace neuroswap {

struct EncoderConfig {
  int behavior_frames = 8;
  int joints = 10;  // behavior feature dim = joints * 3
  int neural_frames = 32;
  int image_h = 64;
  int image_w = 64;
  int embed_dim = 128;  // h_b / h_n
  int proj_dim = 128;   // z_b / z_n
  int attention_dim = 12;
  // "verbatim": a_i = -log softmax(r)_i as printed; "softmax": a_i = softmax(r)_i
  std::string attention_mode = "verbatim";
  std::vector<int> behavior_channels{64, 80, 96, 112, 128};
  int behavior_pool_after = 2;  // single 2x max-pool inserted after this many convs
  std::vector<int> spatial_channels{};  // per-frame 2-d tower; empty -> doubling widths from 2
  int frame_embed_dim = 128;
  std::vector<int> temporal_channels{64, 80, 96, 112, 128};
  int temporal_pool_after = 2;

  int behavior_dim() const { return joints * 3; }

  // Width-doubling tower (2, 4, 8, ...) with one 2x pool per stage until the
  // spatial extent reaches 2.
  std::vector<int> resolved_spatial_channels() const {
    if (!spatial_channels.empty()) return spatial_channels;
    std::vector<int> out;
    int extent = std::min(image_h, image_w);
    int ch = 2;
    while (extent >= 4) {
      out.push_back(ch);
      ch *= 2;
      extent /= 2;
    }
    return out;
  }

  void validate() const {
    if (embed_dim <= 0 || proj_dim <= 0) throw ConfigError("encoder: embedding dims must be positive");
    if (joints < 1) throw ConfigError("encoder: joints must be >= 1");
    if (behavior_frames < 2 || neural_frames < 2)
      throw ConfigError("encoder: windows must hold at least 2 frames");
    if (behavior_channels.empty() || temporal_channels.empty())
      throw ConfigError("encoder: channel stacks must be non-empty");
    if (behavior_pool_after < 1 || behavior_pool_after > static_cast<int>(behavior_channels.size()))
      throw ConfigError("encoder: behavior_pool_after out of range");
    if (temporal_pool_after < 1 || temporal_pool_after > static_cast<int>(temporal_channels.size()))
      throw ConfigError("encoder: temporal_pool_after out of range");
    if (resolved_spatial_channels().empty()) throw ConfigError("encoder: image too small for the conv tower");
    if (image_h < 4 || image_w < 4) throw ConfigError("encoder: image must be at least 4x4");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"behavior_frames", c.behavior_frames},
                     {"joints", c.joints},
                     {"neural_frames", c.neural_frames},
                     {"image_h", c.image_h},
                     {"image_w", c.image_w},
                     {"embed_dim", c.embed_dim},
                     {"proj_dim", c.proj_dim},
                     {"attention_dim", c.attention_dim},
                     {"attention_mode", c.attention_mode},
                     {"behavior_channels", c.behavior_channels},
                     {"behavior_pool_after", c.behavior_pool_after},
                     {"spatial_channels", c.spatial_channels},
                     {"frame_embed_dim", c.frame_embed_dim},
                     {"temporal_channels", c.temporal_channels},
                     {"temporal_pool_after", c.temporal_pool_after}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c = EncoderConfig{};
  c.behavior_frames = j.value("behavior_frames", c.behavior_frames);
  c.joints = j.value("joints", c.joints);
  c.neural_frames = j.value("neural_frames", c.neural_frames);
  c.image_h = j.value("image_h", c.image_h);
  c.image_w = j.value("image_w", c.image_w);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.proj_dim = j.value("proj_dim", c.proj_dim);
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.attention_mode = j.value("attention_mode", c.attention_mode);
  c.behavior_channels = j.value("behavior_channels", c.behavior_channels);
  c.behavior_pool_after = j.value("behavior_pool_after", c.behavior_pool_after);
  c.spatial_channels = j.value("spatial_channels", c.spatial_channels);
  c.frame_embed_dim = j.value("frame_embed_dim", c.frame_embed_dim);
  c.temporal_channels = j.value("temporal_channels", c.temporal_channels);
  c.temporal_pool_after = j.value("temporal_pool_after", c.temporal_pool_after);
}

// ---------------------------------------------------------------------------
// Attention pooling: r = W2 tanh(W1 S^T); verbatim mode weights each step by
// -log softmax(r)_i (all >= 0), softmax mode by softmax(r)_i.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionPoolT {
  TensorT<T> w1;  // [A, D]
  TensorT<T> w2;  // [1, A]
  bool verbatim = true;

  AttentionPoolT() = default;
  AttentionPoolT(int64_t feature_dim, int64_t attn_dim, bool verbatim_mode, Rng& rng)
      : w1(xavier_uniform<T>({attn_dim, feature_dim}, feature_dim, attn_dim, rng)),
        w2(xavier_uniform<T>({1, attn_dim}, attn_dim, 1, rng)),
        verbatim(verbatim_mode) {}

  // weights over time for a batch of sequences [B, T, D] -> [B, T]
  TensorT<T> weights(const TensorT<T>& s_btd) const {
    const int64_t B = s_btd.dim(0), Tn = s_btd.dim(1), D = s_btd.dim(2);
    auto flat = reshape(s_btd, {B * Tn, D});
    auto u = tanh_op(matmul_nt(flat, w1));
    auto r = reshape(matmul_nt(u, w2), {B, Tn});
    return verbatim ? scale(log_softmax(r, 1), T(-1)) : softmax(r, 1);
  }

  TensorT<T> forward(const TensorT<T>& s_btd) const {
    return attention_combine(s_btd, weights(s_btd));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".w2", w2);
  }
};

// Standalone single-sequence pooling, S [T, D] -> [D].
template <typename T>
TensorT<T> attention_pool(const AttentionPoolT<T>& attn, const TensorT<T>& s) {
  if (s.ndim() != 2) throw DimensionError("attention_pool expects S [T,D]");
  auto pooled = attn.forward(reshape(s, {1, s.dim(0), s.dim(1)}));
  return reshape(pooled, {s.dim(1)});
}

// ---------------------------------------------------------------------------
// Behavioral encoder f_b: 1-d conv stack over time, attention pool, fc.
// ---------------------------------------------------------------------------

template <typename T>
struct BehaviorEncoderT {
  std::vector<Conv1dLayerT<T>> convs;
  std::vector<BatchNormLayerT<T>> bns;
  int pool_after = 2;
  AttentionPoolT<T> attn;
  LinearT<T> fc;
  int in_dim = 0, in_frames = 0;

  BehaviorEncoderT() = default;
  BehaviorEncoderT(const EncoderConfig& cfg, Rng& rng)
      : pool_after(cfg.behavior_pool_after), in_dim(cfg.behavior_dim()), in_frames(cfg.behavior_frames) {
    int ch = cfg.behavior_dim();
    for (int width : cfg.behavior_channels) {
      convs.emplace_back(ch, width, 3, ConvSpec{1, 1}, rng);
      bns.emplace_back(width);
      ch = width;
    }
    attn = AttentionPoolT<T>(ch, cfg.attention_dim, cfg.attention_mode == "verbatim", rng);
    fc = LinearT<T>(ch, cfg.embed_dim, rng);
  }

  // x [B, behavior_dim, T] -> [B, embed_dim]
  TensorT<T> forward(const TensorT<T>& x, bool training) const {
    if (x.ndim() != 3 || x.dim(1) != in_dim || x.dim(2) != in_frames)
      throw DimensionError("behavior encoder: expected [B," + std::to_string(in_dim) + "," +
                           std::to_string(in_frames) + "], got " + shape_str(x.shape()));
    TensorT<T> h = x;
    for (size_t i = 0; i < convs.size(); ++i) {
      h = relu(bns[i].forward(convs[i].forward(h), training));
      if (static_cast<int>(i) + 1 == pool_after) h = maxpool1d(h, 2, 2);
    }
    return fc.forward(attn.forward(swap_last_axes(h)));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (size_t i = 0; i < convs.size(); ++i) {
      convs[i].collect(prefix + ".conv" + std::to_string(i), out);
      bns[i].collect(prefix + ".bn" + std::to_string(i), out);
    }
    attn.collect(prefix + ".attn", out);
    fc.collect(prefix + ".fc", out);
  }
  void collect_buffers(const std::string& prefix, NamedBuffers<T>& out) const {
    for (size_t i = 0; i < bns.size(); ++i) bns[i].collect_buffers(prefix + ".bn" + std::to_string(i), out);
  }
};

// ---------------------------------------------------------------------------
// Neural encoder f_n: per-frame 2-d conv tower (no temporal downsampling),
// two per-frame fc layers, then a temporal 1-d conv stack with attention.
// ---------------------------------------------------------------------------

template <typename T>
struct NeuralEncoderT {
  std::vector<Conv2dLayerT<T>> spatial_convs;
  std::vector<BatchNormLayerT<T>> spatial_bns;
  LinearT<T> frame_fc1, frame_fc2;
  BatchNormLayerT<T> frame_bn1, frame_bn2;
  std::vector<Conv1dLayerT<T>> temporal_convs;
  std::vector<BatchNormLayerT<T>> temporal_bns;
  int temporal_pool_after = 2;
  AttentionPoolT<T> attn;
  LinearT<T> fc;
  int in_h = 0, in_w = 0, in_frames = 0;
  int flat_dim = 0;

  NeuralEncoderT() = default;
  NeuralEncoderT(const EncoderConfig& cfg, Rng& rng)
      : temporal_pool_after(cfg.temporal_pool_after),
        in_h(cfg.image_h),
        in_w(cfg.image_w),
        in_frames(cfg.neural_frames) {
    int ch = 1, h = cfg.image_h, w = cfg.image_w;
    for (int width : cfg.resolved_spatial_channels()) {
      spatial_convs.emplace_back(ch, width, 3, ConvSpec{1, 1}, rng);
      spatial_bns.emplace_back(width);
      ch = width;
      h /= 2;
      w /= 2;
    }
    flat_dim = ch * h * w;
    frame_fc1 = LinearT<T>(flat_dim, cfg.frame_embed_dim, rng);
    frame_bn1 = BatchNormLayerT<T>(cfg.frame_embed_dim);
    frame_fc2 = LinearT<T>(cfg.frame_embed_dim, cfg.frame_embed_dim, rng);
    frame_bn2 = BatchNormLayerT<T>(cfg.frame_embed_dim);
    int tch = cfg.frame_embed_dim;
    for (int width : cfg.temporal_channels) {
      temporal_convs.emplace_back(tch, width, 3, ConvSpec{1, 1}, rng);
      temporal_bns.emplace_back(width);
      tch = width;
    }
    attn = AttentionPoolT<T>(tch, cfg.attention_dim, cfg.attention_mode == "verbatim", rng);
    fc = LinearT<T>(tch, cfg.embed_dim, rng);
  }

  // x [B, T, H, W] -> [B, embed_dim]
  TensorT<T> forward(const TensorT<T>& x, bool training) const {
    if (x.ndim() != 4 || x.dim(1) != in_frames || x.dim(2) != in_h || x.dim(3) != in_w)
      throw DimensionError("neural encoder: expected [B," + std::to_string(in_frames) + "," +
                           std::to_string(in_h) + "," + std::to_string(in_w) + "], got " +
                           shape_str(x.shape()));
    const int64_t B = x.dim(0), Tn = x.dim(1);
    TensorT<T> h = reshape(x, {B * Tn, 1, in_h, in_w});
    for (size_t i = 0; i < spatial_convs.size(); ++i) {
      h = relu(spatial_bns[i].forward(spatial_convs[i].forward(h), training));
      h = maxpool2d(h, 2, 2);
    }
    h = reshape(h, {B * Tn, flat_dim});
    h = relu(frame_bn1.forward(frame_fc1.forward(h), training));
    h = relu(frame_bn2.forward(frame_fc2.forward(h), training));
    // [B*T, F] -> [B, F, T] for the temporal stack
    h = swap_last_axes(reshape(h, {B, Tn, h.dim(1)}));
    for (size_t i = 0; i < temporal_convs.size(); ++i) {
      h = relu(temporal_bns[i].forward(temporal_convs[i].forward(h), training));
      if (static_cast<int>(i) + 1 == temporal_pool_after) h = maxpool1d(h, 2, 2);
    }
    return fc.forward(attn.forward(swap_last_axes(h)));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (size_t i = 0; i < spatial_convs.size(); ++i) {
      spatial_convs[i].collect(prefix + ".spatial.conv" + std::to_string(i), out);
      spatial_bns[i].collect(prefix + ".spatial.bn" + std::to_string(i), out);
    }
    frame_fc1.collect(prefix + ".frame.fc1", out);
    frame_bn1.collect(prefix + ".frame.bn1", out);
    frame_fc2.collect(prefix + ".frame.fc2", out);
    frame_bn2.collect(prefix + ".frame.bn2", out);
    for (size_t i = 0; i < temporal_convs.size(); ++i) {
      temporal_convs[i].collect(prefix + ".temporal.conv" + std::to_string(i), out);
      temporal_bns[i].collect(prefix + ".temporal.bn" + std::to_string(i), out);
    }
    attn.collect(prefix + ".attn", out);
    fc.collect(prefix + ".fc", out);
  }
  void collect_buffers(const std::string& prefix, NamedBuffers<T>& out) const {
    for (size_t i = 0; i < spatial_bns.size(); ++i)
      spatial_bns[i].collect_buffers(prefix + ".spatial.bn" + std::to_string(i), out);
    frame_bn1.collect_buffers(prefix + ".frame.bn1", out);
    frame_bn2.collect_buffers(prefix + ".frame.bn2", out);
    for (size_t i = 0; i < temporal_bns.size(); ++i)
      temporal_bns[i].collect_buffers(prefix + ".temporal.bn" + std::to_string(i), out);
  }
};

// ---------------------------------------------------------------------------
// ModelBundle: all parameters of f_b, f_n, g_b, g_n plus optional
// discriminators and baseline heads. Parameter set is fixed at construction.
// ---------------------------------------------------------------------------

struct BundleExtras {
  bool discriminators = false;
  int n_domains = 0;  // discriminator output classes
  bool regression = false;
  bool supervised = false;
  int n_actions = 0;
};

inline void to_json(nlohmann::json& j, const BundleExtras& e) {
  j = nlohmann::json{{"discriminators", e.discriminators},
                     {"n_domains", e.n_domains},
                     {"regression", e.regression},
                     {"supervised", e.supervised},
                     {"n_actions", e.n_actions}};
}

inline void from_json(const nlohmann::json& j, BundleExtras& e) {
  e = BundleExtras{};
  e.discriminators = j.value("discriminators", false);
  e.n_domains = j.value("n_domains", 0);
  e.regression = j.value("regression", false);
  e.supervised = j.value("supervised", false);
  e.n_actions = j.value("n_actions", 0);
}

template <typename T>
struct ModelBundleT {
  EncoderConfig cfg;
  BundleExtras extras;
  BehaviorEncoderT<T> f_b;
  NeuralEncoderT<T> f_n;
  MlpHeadT<T> g_b, g_n;
  std::optional<MlpHeadT<T>> d_b, d_n;
  std::optional<LinearT<T>> regression_head;  // embed -> flattened pose window
  std::optional<LinearT<T>> supervised_head;  // embed -> action logits

  static ModelBundleT init(const EncoderConfig& cfg, const BundleExtras& extras, uint64_t seed) {
    cfg.validate();
    if (extras.discriminators && extras.n_domains < 2)
      throw ConfigError("discriminators need at least 2 domains");
    if (extras.supervised && extras.n_actions < 2)
      throw ConfigError("supervised head needs at least 2 actions");
    Rng rng = make_rng(seed, kStreamInit);
    ModelBundleT m;
    m.cfg = cfg;
    m.extras = extras;
    m.f_b = BehaviorEncoderT<T>(cfg, rng);
    m.f_n = NeuralEncoderT<T>(cfg, rng);
    m.g_b = MlpHeadT<T>(cfg.embed_dim, cfg.embed_dim, cfg.proj_dim, rng);
    m.g_n = MlpHeadT<T>(cfg.embed_dim, cfg.embed_dim, cfg.proj_dim, rng);
    if (extras.discriminators) {
      m.d_b.emplace(cfg.embed_dim, cfg.embed_dim, extras.n_domains, rng);
      m.d_n.emplace(cfg.embed_dim, cfg.embed_dim, extras.n_domains, rng);
    }
    if (extras.regression)
      m.regression_head.emplace(cfg.embed_dim, cfg.behavior_frames * cfg.behavior_dim(), rng);
    if (extras.supervised) m.supervised_head.emplace(cfg.embed_dim, extras.n_actions, rng);
    return m;
  }

  // x [B, behavior_dim, T_b]
  TensorT<T> encode_behavior_batch(const TensorT<T>& x, bool training) const {
    return f_b.forward(x, training);
  }
  // x [B, T_n, H, W]
  TensorT<T> encode_neural_batch(const TensorT<T>& x, bool training) const {
    return f_n.forward(x, training);
  }
  TensorT<T> project_behavior(const TensorT<T>& h) const { return g_b.forward(h); }
  TensorT<T> project_neural(const TensorT<T>& h) const { return g_n.forward(h); }

  NamedParams<T> named_params() const {
    NamedParams<T> out;
    f_b.collect("f_b", out);
    f_n.collect("f_n", out);
    g_b.collect("g_b", out);
    g_n.collect("g_n", out);
    if (d_b) d_b->collect("d_b", out);
    if (d_n) d_n->collect("d_n", out);
    if (regression_head) regression_head->collect("regression_head", out);
    if (supervised_head) supervised_head->collect("supervised_head", out);
    return out;
  }

  std::vector<TensorT<T>> params() const {
    std::vector<TensorT<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  NamedBuffers<T> named_buffers() const {
    NamedBuffers<T> out;
    f_b.collect_buffers("f_b", out);
    f_n.collect_buffers("f_n", out);
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (auto& [name, t] : named_params()) n += t.numel();
    return n;
  }
};

using ModelBundle = ModelBundleT<float>;

// Single-window convenience wrappers (eval mode).
template <typename T>
TensorT<T> encode_behavior(const ModelBundleT<T>& m, const TensorT<T>& window) {
  // window [T_b, J, 3]
  if (window.ndim() != 3 || window.dim(0) != m.cfg.behavior_frames || window.dim(1) != m.cfg.joints ||
      window.dim(2) != 3)
    throw DimensionError("encode_behavior: window " + shape_str(window.shape()) + " does not match config");
  NoGradGuard ng;
  auto x = swap_last_axes(reshape(window, {1, m.cfg.behavior_frames, m.cfg.behavior_dim()}));
  return reshape(m.encode_behavior_batch(x, false), {m.cfg.embed_dim});
}

template <typename T>
TensorT<T> encode_neural(const ModelBundleT<T>& m, const TensorT<T>& window) {
  // window [T_n, H, W]
  if (window.ndim() != 3 || window.dim(0) != m.cfg.neural_frames || window.dim(1) != m.cfg.image_h ||
      window.dim(2) != m.cfg.image_w)
    throw DimensionError("encode_neural: window " + shape_str(window.shape()) + " does not match config");
  NoGradGuard ng;
  auto x = reshape(window, {1, m.cfg.neural_frames, m.cfg.image_h, m.cfg.image_w});
  return reshape(m.encode_neural_batch(x, false), {m.cfg.embed_dim});
}

// ---------------------------------------------------------------------------
// Bundle checkpointing: JSON manifest + named tensors (params, then batch
// norm buffers). Round-trips bit-exactly.
// ---------------------------------------------------------------------------

template <typename T>
void bundle_to_checkpoint(const ModelBundleT<T>& m, Checkpoint& ckpt) {
  static_assert(std::is_same_v<T, float>, "checkpoints are f32");
  for (auto& [name, t] : m.named_params()) ckpt.tensors.emplace_back(name, t);
  for (auto& [name, buf] : m.named_buffers())
    ckpt.tensors.emplace_back(name,
                              Tensor::from_data({static_cast<int64_t>(buf->size())}, *buf));
}

template <typename T>
void bundle_from_checkpoint(ModelBundleT<T>& m, const Checkpoint& ckpt) {
  static_assert(std::is_same_v<T, float>, "checkpoints are f32");
  for (auto& [name, t] : m.named_params()) {
    const Tensor& src = ckpt.find(name);
    if (src.numel() != t.numel()) throw IoError("checkpoint shape mismatch for " + name);
    std::copy(src.data().begin(), src.data().end(), t.data_mut().begin());
  }
  for (auto& [name, buf] : m.named_buffers()) {
    const Tensor& src = ckpt.find(name);
    if (src.numel() != static_cast<int64_t>(buf->size()))
      throw IoError("checkpoint buffer mismatch for " + name);
    std::copy(src.data().begin(), src.data().end(), buf->begin());
  }
}

}  // namespace neuroswap
