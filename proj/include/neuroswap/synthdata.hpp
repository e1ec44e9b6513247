#pragma once

// Synthetic multi-animal world: paired pose/calcium streams with ground-truth
// actions and per-animal identity signatures (skeleton scale, joint offsets,
// neuron layout, imaging gain). Stands in for real recordings at desk scale
// while reproducing the cross-animal domain gap the training method targets.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuroswap/errors.hpp"
#include "neuroswap/tensor.hpp"

namespace neuroswap {

struct WorldConfig {
  int version = 1;
  int n_domains = 4;
  int n_actions = 6;  // action 0 is rest
  int joints = 10;    // joint 0 is the root, pinned at the origin
  int image_h = 64;
  int image_w = 64;
  int neurons_per_domain = 12;
  double behavior_fps = 100.0;
  double neural_fps = 16.0;
  double dwell_min_s = 0.5;
  double dwell_max_s = 3.0;
  double gamma_gen = 0.95;  // calcium decay per neural frame
  double alpha_gen = 1.0;   // spike amplitude
  // identity signature: 0 makes all domains statistically identical
  double identity_strength = 1.0;
  double skeleton_scale_spread = 0.2;  // scale in [1-spread, 1+spread] at strength 1
  double joint_offset_sigma = 0.1;
  uint64_t neuron_layout_seed = 0;
  int n_trials = 8;
  double trial_seconds = 24.0;
  double pose_noise_sigma = 0.01;
  // neuron firing
  double rate_active = 0.45;  // per-frame Bernoulli for an action's designated neurons
  double rate_background = 0.02;
  // image rendering
  double blob_sigma_px = 2.2;
  double photons_per_unit = 25.0;  // Poisson shot-noise scale

  void validate() const {
    if (n_domains < 2) throw ConfigError("world: swapping needs at least 2 domains");
    if (n_actions < 2) throw ConfigError("world: need at least 2 actions");
    if (joints < 2) throw ConfigError("world: need at least 2 joints");
    if (behavior_fps <= 0 || neural_fps <= 0) throw ConfigError("world: rates must be positive");
    if (dwell_min_s <= 0 || dwell_max_s < dwell_min_s) throw ConfigError("world: bad dwell range");
    if (gamma_gen <= 0 || gamma_gen >= 1) throw ConfigError("world: gamma must be in (0,1)");
    if (n_trials < 1 || trial_seconds <= 0) throw ConfigError("world: bad trial settings");
    if (neurons_per_domain < 1) throw ConfigError("world: need at least one neuron");
  }
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct ActionInterval {
  double t_start = 0;
  double t_end = 0;
  int action = 0;
};

struct Trial {
  std::vector<float> behavior;  // [behavior_frames, J, 3]
  int64_t behavior_frames = 0;
  std::vector<float> neural;  // [neural_frames, H, W]
  int64_t neural_frames = 0;
  std::vector<ActionInterval> intervals;
  // ground-truth latents, kept in memory for analysis; not serialized
  std::vector<float> calcium;   // [neural_frames, n_neurons]
  std::vector<uint8_t> spikes;  // [neural_frames, n_neurons]

  int action_at(double t) const {
    for (const auto& iv : intervals)
      if (t >= iv.t_start && t < iv.t_end) return iv.action;
    return intervals.empty() ? 0 : intervals.back().action;
  }
};

struct DomainData {
  std::vector<Trial> trials;
  // identity signature (ground truth, for analysis)
  double skeleton_scale = 1.0;
  std::vector<float> joint_offsets;  // [J,3]
  std::vector<float> neuron_x, neuron_y;
  double gain = 1.0;
  double baseline = 5.5;
};

struct MultiDomainDataset {
  WorldConfig cfg;
  uint64_t seed = 0;
  std::vector<DomainData> domains;
};

// A synchronized paired window: 32 neural frames with the behavioral frames
// nearest the 4-fps pairing grid centered on the window.
struct WindowRef {
  int domain = 0;
  int trial = 0;
  int64_t neural_start = 0;
  int64_t neural_len = 32;
  std::vector<int64_t> behavior_idx;  // behavior-stream frame indices
  int action = 0;
  double center_time = 0;
};

struct SyncConfig {
  int neural_window = 32;
  int behavior_window = 8;
  int stride = 8;
};

struct SplitPolicy {
  int holdout_trials = 2;  // per domain, taken from the end
};

struct SplitDataset {
  const MultiDomainDataset* world = nullptr;
  SyncConfig sync;
  std::vector<WindowRef> train;
  std::vector<WindowRef> test;
};

// Generation. Domains are produced in parallel from independent sub-seeded
// generators; results are bit-identical for a given (cfg, seed) regardless of
// thread count.
MultiDomainDataset generate_world(const WorldConfig& cfg, uint64_t seed);

// Sliding-window synchronization over one trial's streams.
std::vector<WindowRef> synchronize_trial(const MultiDomainDataset& data, int domain, int trial,
                                         const SyncConfig& sync);
// All trials of all domains.
std::vector<WindowRef> synchronize(const MultiDomainDataset& data, const SyncConfig& sync = {});

SplitDataset split_train_test(const MultiDomainDataset& data, const SyncConfig& sync = {},
                              const SplitPolicy& policy = {});

// Window materialization into row-major buffers.
void copy_neural_window(const MultiDomainDataset& data, const WindowRef& ref, float* dst);
void copy_behavior_window(const MultiDomainDataset& data, const WindowRef& ref, float* dst);

int64_t neural_window_numel(const MultiDomainDataset& data, const SyncConfig& sync);
int64_t behavior_window_numel(const MultiDomainDataset& data, const SyncConfig& sync);

// On-disk dataset: world.json plus one directory per domain with
// trial_<k>_behavior.nswt, trial_<k>_neural.nswt, trial_<k>_labels.json.
void save_dataset(const MultiDomainDataset& data, const std::string& dir);
MultiDomainDataset load_dataset(const std::string& dir);

}  // namespace neuroswap
