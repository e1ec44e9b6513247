#pragma once

// The three training augmentations (cross-animal swapping, calcium-decay
// injection, neural mixing) plus the stochastic jitter families for each
// modality. All ops are pure given an rng stream; the neighbor index is
// immutable after build and shareable across threads.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuroswap/errors.hpp"
#include "neuroswap/rng.hpp"
#include "neuroswap/synthdata.hpp"

namespace neuroswap {

struct CalciumKernel {
  double gamma = 0.95;  // decay per neural frame
  int length = 32;
  double alpha_cal = 1.0;  // event amplitude

  std::vector<float> values() const {
    validate();
    std::vector<float> out(length);
    double v = 1.0;
    for (int t = 0; t < length; ++t) {
      out[t] = static_cast<float>(v);
      v *= gamma;
    }
    return out;
  }
  void validate() const {
    if (gamma <= 0.0 || gamma >= 1.0) throw ConfigError("calcium kernel: gamma must be in (0,1)");
    if (length < 1) throw ConfigError("calcium kernel: length must be positive");
  }
};

struct AugmentConfig {
  int version = 1;
  // swapping
  bool swap_behavior_enabled = true;
  double p_swap_behavior = 1.0;
  bool swap_neural_enabled = true;
  double p_swap_neural = 0.5;
  int neighbor_top_n = 128;
  // calcium injection
  bool calcium_enabled = true;
  double p_calcium = 0.5;
  double calcium_gamma = 0.95;
  double alpha_cal = 1.0;
  // mixing
  bool mix_enabled = true;
  double p_mix = 0.5;
  double mix_alpha_max = 0.5;  // alpha ~ U(0, max)
  // neural jitter
  bool jitter_neural_enabled = true;
  double p_poisson = 0.5;
  double poisson_scale_min = 15.0;  // photons per intensity unit; lower = noisier
  double poisson_scale_max = 60.0;
  double p_blur = 0.3;
  double blur_sigma_min = 0.3;
  double blur_sigma_max = 1.0;
  double p_brightness_contrast = 0.8;
  double brightness_delta = 1.0;   // additive, absolute units
  double contrast_range = 0.25;    // multiplicative about the window mean
  // behavior jitter
  bool jitter_behavior_enabled = true;
  double p_scale = 0.5;
  double scale_range = 0.1;
  double p_shear = 0.5;
  double shear_range = 0.1;
  double temporal_drop_rate = 0.1;  // per-frame zero-fill probability
  double spatial_drop_rate = 0.1;   // per-joint zero-fill probability

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (p < 0.0 || p > 1.0) throw ConfigError(std::string("augment: ") + name + " not in [0,1]");
    };
    prob(p_swap_behavior, "p_swap_behavior");
    prob(p_swap_neural, "p_swap_neural");
    prob(p_calcium, "p_calcium");
    prob(p_mix, "p_mix");
    prob(p_poisson, "p_poisson");
    prob(p_blur, "p_blur");
    prob(p_brightness_contrast, "p_brightness_contrast");
    prob(p_scale, "p_scale");
    prob(p_shear, "p_shear");
    prob(temporal_drop_rate, "temporal_drop_rate");
    prob(spatial_drop_rate, "spatial_drop_rate");
    if (mix_alpha_max < 0.0 || mix_alpha_max >= 1.0)
      throw ConfigError("augment: mix_alpha_max must lie in [0,1)");
    if (neighbor_top_n < 1) throw ConfigError("augment: neighbor_top_n must be positive");
    CalciumKernel{calcium_gamma, 2, alpha_cal}.validate();
  }
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

// ---------------------------------------------------------------------------
// Neighbor index: per-domain pools of (a) individual paired-grid poses and
// (b) whole behavior windows, searched exactly (brute force) with top-N
// truncation. Queries target one domain; swapping never samples the query's
// own domain.
// ---------------------------------------------------------------------------

class NeighborIndex {
 public:
  struct Entry {
    float distance = 0;
    int index = 0;  // position in the target domain's pool
  };

  void build(const SplitDataset& split);
  bool built() const { return split_ != nullptr; }
  int n_domains() const { return static_cast<int>(pose_pool_.size()); }
  int64_t pose_count(int domain) const { return pose_pool_[domain].size() / pose_dim_; }
  int64_t window_count(int domain) const { return window_pool_[domain].size() / window_dim_; }
  const float* pose(int domain, int idx) const { return pose_pool_[domain].data() + idx * pose_dim_; }

  // ascending by distance, at most top_n entries
  std::vector<Entry> query_pose(const float* pose, int target_domain, int top_n) const;
  std::vector<Entry> query_window(const float* window, int target_domain, int top_n) const;

  // back-reference from a window-pool entry to its position in split.train
  int window_train_index(int domain, int pool_idx) const { return window_backref_[domain][pool_idx]; }
  const SplitDataset& split() const { return *split_; }

 private:
  const SplitDataset* split_ = nullptr;
  int64_t pose_dim_ = 0;
  int64_t window_dim_ = 0;
  std::vector<std::vector<float>> pose_pool_;
  std::vector<std::vector<float>> window_pool_;
  std::vector<std::vector<int>> window_backref_;
};

// Softmax over negative Euclidean distances; double accumulation, sums to 1
// within 1e-9. Entries must be non-empty.
std::vector<double> swap_probabilities(const std::vector<NeighborIndex::Entry>& candidates);

// Draws an index into `candidates` according to swap_probabilities.
int sample_swap_candidate(const std::vector<NeighborIndex::Entry>& candidates, Rng& rng);

// Replaces each pose of the window independently with a neighbor sampled from
// a uniformly drawn other domain. Identity (with a warning) when fewer than
// two domains are indexed.
void swap_behavior(float* behavior, int frames, int pose_dim, int source_domain,
                   const NeighborIndex& index, const AugmentConfig& cfg, Rng& rng);

// Replaces the neural window with the neural data of a behavior-window
// neighbor from another domain. Returns the donor domain (== source when
// skipped).
int swap_neural(const float* behavior, int behavior_numel, float* neural, int source_domain,
                const NeighborIndex& index, const AugmentConfig& cfg, Rng& rng);

// n_t += alpha * gamma^(t + delta) * donor frame, then clamp at zero.
void calcium_augment(float* neural, int frames, int64_t frame_px, const float* donor_frame,
                     const CalciumKernel& kernel, int delta);
// As above with delta drawn uniformly from {0..frames-1}.
void calcium_augment(float* neural, int frames, int64_t frame_px, const float* donor_frame,
                     const CalciumKernel& kernel, Rng& rng);

// n += alpha_mix * donor, one alpha per window.
void mix_augment(float* neural, int64_t numel, const float* donor, float alpha_mix);

// ---------------------------------------------------------------------------
// Jitter families: one parameter draw per window, applied to every frame.
// ---------------------------------------------------------------------------

struct NeuralJitterParams {
  bool poisson = false;
  double kappa = 30.0;
  bool blur = false;
  double sigma = 0.5;
  bool brightness_contrast = false;
  double contrast = 1.0;
  double brightness = 0.0;
};

NeuralJitterParams draw_neural_jitter(const AugmentConfig& cfg, Rng& rng);
void jitter_neural(float* neural, int frames, int h, int w, const NeuralJitterParams& params, Rng& rng);

struct BehaviorJitterParams {
  bool scale = false;
  double scale_factor = 1.0;
  bool shear = false;
  double shear_matrix[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::vector<uint8_t> frame_drop;  // [frames]
  std::vector<uint8_t> joint_drop;  // [joints]
};

BehaviorJitterParams draw_behavior_jitter(const AugmentConfig& cfg, int frames, int joints, Rng& rng);
void jitter_behavior(float* behavior, int frames, int joints, const BehaviorJitterParams& params);

// ---------------------------------------------------------------------------
// Full pipeline for one paired sample: swap -> calcium -> mix -> jitter, each
// gated by its probability. Reproducible bit-exactly for a given rng state.
// ---------------------------------------------------------------------------

struct AugmentedPair {
  std::vector<float> behavior;  // [T_b, J*3]
  std::vector<float> neural;    // [T_n, H, W]
  int neural_domain = 0;        // domain the neural window came from (after swap)
  BehaviorJitterParams behavior_masks;
};

// `index` may be null only when both swap gates are disabled.
AugmentedPair augment_pair(const SplitDataset& split, const NeighborIndex* index,
                           const WindowRef& ref, const AugmentConfig& cfg, Rng& rng);

}  // namespace neuroswap
