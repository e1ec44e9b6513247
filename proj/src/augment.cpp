#include "neuroswap/augment.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "neuroswap/log.hpp"

namespace neuroswap {

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"version", c.version},
                     {"swap_behavior_enabled", c.swap_behavior_enabled},
                     {"p_swap_behavior", c.p_swap_behavior},
                     {"swap_neural_enabled", c.swap_neural_enabled},
                     {"p_swap_neural", c.p_swap_neural},
                     {"neighbor_top_n", c.neighbor_top_n},
                     {"calcium_enabled", c.calcium_enabled},
                     {"p_calcium", c.p_calcium},
                     {"calcium_gamma", c.calcium_gamma},
                     {"alpha_cal", c.alpha_cal},
                     {"mix_enabled", c.mix_enabled},
                     {"p_mix", c.p_mix},
                     {"mix_alpha_max", c.mix_alpha_max},
                     {"jitter_neural_enabled", c.jitter_neural_enabled},
                     {"p_poisson", c.p_poisson},
                     {"poisson_scale_min", c.poisson_scale_min},
                     {"poisson_scale_max", c.poisson_scale_max},
                     {"p_blur", c.p_blur},
                     {"blur_sigma_min", c.blur_sigma_min},
                     {"blur_sigma_max", c.blur_sigma_max},
                     {"p_brightness_contrast", c.p_brightness_contrast},
                     {"brightness_delta", c.brightness_delta},
                     {"contrast_range", c.contrast_range},
                     {"jitter_behavior_enabled", c.jitter_behavior_enabled},
                     {"p_scale", c.p_scale},
                     {"scale_range", c.scale_range},
                     {"p_shear", c.p_shear},
                     {"shear_range", c.shear_range},
                     {"temporal_drop_rate", c.temporal_drop_rate},
                     {"spatial_drop_rate", c.spatial_drop_rate}};
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  c = AugmentConfig{};
  c.version = j.value("version", 1);
  c.swap_behavior_enabled = j.value("swap_behavior_enabled", c.swap_behavior_enabled);
  c.p_swap_behavior = j.value("p_swap_behavior", c.p_swap_behavior);
  c.swap_neural_enabled = j.value("swap_neural_enabled", c.swap_neural_enabled);
  c.p_swap_neural = j.value("p_swap_neural", c.p_swap_neural);
  c.neighbor_top_n = j.value("neighbor_top_n", c.neighbor_top_n);
  c.calcium_enabled = j.value("calcium_enabled", c.calcium_enabled);
  c.p_calcium = j.value("p_calcium", c.p_calcium);
  c.calcium_gamma = j.value("calcium_gamma", c.calcium_gamma);
  c.alpha_cal = j.value("alpha_cal", c.alpha_cal);
  c.mix_enabled = j.value("mix_enabled", c.mix_enabled);
  c.p_mix = j.value("p_mix", c.p_mix);
  c.mix_alpha_max = j.value("mix_alpha_max", c.mix_alpha_max);
  c.jitter_neural_enabled = j.value("jitter_neural_enabled", c.jitter_neural_enabled);
  c.p_poisson = j.value("p_poisson", c.p_poisson);
  c.poisson_scale_min = j.value("poisson_scale_min", c.poisson_scale_min);
  c.poisson_scale_max = j.value("poisson_scale_max", c.poisson_scale_max);
  c.p_blur = j.value("p_blur", c.p_blur);
  c.blur_sigma_min = j.value("blur_sigma_min", c.blur_sigma_min);
  c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
  c.p_brightness_contrast = j.value("p_brightness_contrast", c.p_brightness_contrast);
  c.brightness_delta = j.value("brightness_delta", c.brightness_delta);
  c.contrast_range = j.value("contrast_range", c.contrast_range);
  c.jitter_behavior_enabled = j.value("jitter_behavior_enabled", c.jitter_behavior_enabled);
  c.p_scale = j.value("p_scale", c.p_scale);
  c.scale_range = j.value("scale_range", c.scale_range);
  c.p_shear = j.value("p_shear", c.p_shear);
  c.shear_range = j.value("shear_range", c.shear_range);
  c.temporal_drop_rate = j.value("temporal_drop_rate", c.temporal_drop_rate);
  c.spatial_drop_rate = j.value("spatial_drop_rate", c.spatial_drop_rate);
}

// ---------------------------------------------------------------------------
// NeighborIndex
// ---------------------------------------------------------------------------

void NeighborIndex::build(const SplitDataset& split) {
  split_ = &split;
  const MultiDomainDataset& world = *split.world;
  const int n_domains = static_cast<int>(world.domains.size());
  pose_dim_ = world.cfg.joints * 3;
  window_dim_ = static_cast<int64_t>(split.sync.behavior_window) * pose_dim_;
  pose_pool_.assign(n_domains, {});
  window_pool_.assign(n_domains, {});
  window_backref_.assign(n_domains, {});

  // pose pools: unique paired-grid poses referenced by the train windows
  std::vector<std::set<std::pair<int, int64_t>>> seen(n_domains);
  for (const auto& ref : split.train)
    for (int64_t idx : ref.behavior_idx) seen[ref.domain].insert({ref.trial, idx});
  for (int s = 0; s < n_domains; ++s) {
    pose_pool_[s].reserve(seen[s].size() * pose_dim_);
    for (const auto& [trial, frame] : seen[s]) {
      const float* src = world.domains[s].trials[trial].behavior.data() + frame * pose_dim_;
      pose_pool_[s].insert(pose_pool_[s].end(), src, src + pose_dim_);
    }
  }

  // window pools with back-references into split.train
  for (int i = 0; i < static_cast<int>(split.train.size()); ++i) {
    const auto& ref = split.train[i];
    const size_t at = window_pool_[ref.domain].size();
    window_pool_[ref.domain].resize(at + window_dim_);
    copy_behavior_window(world, ref, window_pool_[ref.domain].data() + at);
    window_backref_[ref.domain].push_back(i);
  }
}

namespace {

std::vector<NeighborIndex::Entry> top_n_by_distance(const float* query, const float* pool,
                                                    int64_t count, int64_t dim, int top_n) {
  std::vector<NeighborIndex::Entry> all(count);
  for (int64_t i = 0; i < count; ++i) {
    const float* p = pool + i * dim;
    double s = 0;
    for (int64_t k = 0; k < dim; ++k) {
      const double d = static_cast<double>(query[k]) - p[k];
      s += d * d;
    }
    all[i] = {static_cast<float>(std::sqrt(s)), static_cast<int>(i)};
  }
  const int keep = std::min<int64_t>(top_n, count);
  std::partial_sort(all.begin(), all.begin() + keep, all.end(),
                    [](const auto& a, const auto& b) { return a.distance < b.distance; });
  all.resize(keep);
  return all;
}

}  // namespace

std::vector<NeighborIndex::Entry> NeighborIndex::query_pose(const float* pose, int target_domain,
                                                            int top_n) const {
  return top_n_by_distance(pose, pose_pool_[target_domain].data(), pose_count(target_domain),
                           pose_dim_, top_n);
}

std::vector<NeighborIndex::Entry> NeighborIndex::query_window(const float* window, int target_domain,
                                                              int top_n) const {
  return top_n_by_distance(window, window_pool_[target_domain].data(), window_count(target_domain),
                           window_dim_, top_n);
}

// ---------------------------------------------------------------------------
// Swapping
// ---------------------------------------------------------------------------

std::vector<double> swap_probabilities(const std::vector<NeighborIndex::Entry>& candidates) {
  if (candidates.empty()) throw ContractError("swap_probabilities: empty candidate set");
  // softmax of negative distances, max-shifted, double accumulation
  double mind = candidates[0].distance;
  for (const auto& c : candidates) mind = std::min(mind, (double)c.distance);
  std::vector<double> probs(candidates.size());
  double z = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    probs[i] = std::exp(-(candidates[i].distance - mind));
    z += probs[i];
  }
  for (auto& p : probs) p /= z;
  return probs;
}

int sample_swap_candidate(const std::vector<NeighborIndex::Entry>& candidates, Rng& rng) {
  auto probs = swap_probabilities(candidates);
  double u = uniform(rng, 0.0, 1.0);
  for (size_t i = 0; i < probs.size(); ++i) {
    u -= probs[i];
    if (u <= 0) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

namespace {

// uniform draw from domains != source with a non-empty pool
int draw_other_domain(int source, int n_domains, const std::function<bool(int)>& eligible, Rng& rng) {
  std::vector<int> options;
  for (int s = 0; s < n_domains; ++s)
    if (s != source && eligible(s)) options.push_back(s);
  if (options.empty()) return -1;
  return options[uniform_int(rng, 0, static_cast<int64_t>(options.size()) - 1)];
}

}  // namespace

void swap_behavior(float* behavior, int frames, int pose_dim, int source_domain,
                   const NeighborIndex& index, const AugmentConfig& cfg, Rng& rng) {
  if (index.n_domains() < 2) {
    log_warning("swap_behavior: fewer than 2 domains, identity transform");
    return;
  }
  for (int f = 0; f < frames; ++f) {
    float* pose = behavior + static_cast<int64_t>(f) * pose_dim;
    const int target = draw_other_domain(
        source_domain, index.n_domains(), [&](int s) { return index.pose_count(s) > 0; }, rng);
    if (target < 0) {
      log_warning("swap_behavior: no eligible target domain, pose kept");
      continue;
    }
    auto candidates = index.query_pose(pose, target, cfg.neighbor_top_n);
    if (candidates.empty()) {
      log_warning("swap_behavior: empty candidate set, pose kept");
      continue;
    }
    const int pick = sample_swap_candidate(candidates, rng);
    const float* replacement = index.pose(target, candidates[pick].index);
    std::copy(replacement, replacement + pose_dim, pose);
  }
}

int swap_neural(const float* behavior, int behavior_numel, float* neural, int source_domain,
                const NeighborIndex& index, const AugmentConfig& cfg, Rng& rng) {
  if (index.n_domains() < 2) {
    log_warning("swap_neural: fewer than 2 domains, identity transform");
    return source_domain;
  }
  const int target = draw_other_domain(
      source_domain, index.n_domains(), [&](int s) { return index.window_count(s) > 0; }, rng);
  if (target < 0) {
    log_warning("swap_neural: no eligible target domain, window kept");
    return source_domain;
  }
  (void)behavior_numel;
  auto candidates = index.query_window(behavior, target, cfg.neighbor_top_n);
  if (candidates.empty()) {
    log_warning("swap_neural: empty candidate set, window kept");
    return source_domain;
  }
  const int pick = sample_swap_candidate(candidates, rng);
  const SplitDataset& split = index.split();
  const WindowRef& donor = split.train[index.window_train_index(target, candidates[pick].index)];
  copy_neural_window(*split.world, donor, neural);
  return target;
}

// ---------------------------------------------------------------------------
// Calcium and mix
// ---------------------------------------------------------------------------

void calcium_augment(float* neural, int frames, int64_t frame_px, const float* donor_frame,
                     const CalciumKernel& kernel, int delta) {
  kernel.validate();
  if (delta < 0) throw ContractError("calcium_augment: negative phase");
  double w = kernel.alpha_cal * std::pow(kernel.gamma, delta);
  for (int t = 0; t < frames; ++t) {
    float* dst = neural + static_cast<int64_t>(t) * frame_px;
    const float wf = static_cast<float>(w);
    for (int64_t p = 0; p < frame_px; ++p) dst[p] = std::max(0.f, dst[p] + wf * donor_frame[p]);
    w *= kernel.gamma;
  }
}

void calcium_augment(float* neural, int frames, int64_t frame_px, const float* donor_frame,
                     const CalciumKernel& kernel, Rng& rng) {
  const int delta = static_cast<int>(uniform_int(rng, 0, frames - 1));
  calcium_augment(neural, frames, frame_px, donor_frame, kernel, delta);
}

void mix_augment(float* neural, int64_t numel, const float* donor, float alpha_mix) {
  for (int64_t i = 0; i < numel; ++i) neural[i] += alpha_mix * donor[i];
}

// ---------------------------------------------------------------------------
// Jitter
// ---------------------------------------------------------------------------

NeuralJitterParams draw_neural_jitter(const AugmentConfig& cfg, Rng& rng) {
  NeuralJitterParams p;
  p.poisson = uniform(rng, 0, 1) < cfg.p_poisson;
  p.kappa = uniform(rng, cfg.poisson_scale_min, cfg.poisson_scale_max);
  p.blur = uniform(rng, 0, 1) < cfg.p_blur;
  p.sigma = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
  p.brightness_contrast = uniform(rng, 0, 1) < cfg.p_brightness_contrast;
  p.contrast = uniform(rng, 1.0 - cfg.contrast_range, 1.0 + cfg.contrast_range);
  p.brightness = uniform(rng, -cfg.brightness_delta, cfg.brightness_delta);
  return p;
}

namespace {

void gaussian_blur_frame(float* img, int h, int w, double sigma, std::vector<float>& scratch) {
  const int radius = std::max(1, (int)std::ceil(2.5 * sigma));
  std::vector<float> kernel(2 * radius + 1);
  double z = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    z += kernel[i + radius];
  }
  for (auto& k : kernel) k = static_cast<float>(k / z);
  scratch.resize(static_cast<size_t>(h) * w);
  // horizontal pass with clamped borders
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        int xi = std::clamp(x + i, 0, w - 1);
        acc += kernel[i + radius] * img[y * w + xi];
      }
      scratch[y * w + x] = acc;
    }
  // vertical pass
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        int yi = std::clamp(y + i, 0, h - 1);
        acc += kernel[i + radius] * scratch[yi * w + x];
      }
      img[y * w + x] = acc;
    }
}

}  // namespace

void jitter_neural(float* neural, int frames, int h, int w, const NeuralJitterParams& params,
                   Rng& rng) {
  const int64_t px = static_cast<int64_t>(h) * w;
  if (params.poisson) {
    // gaussian approximation of photon shot noise at kappa photons per unit
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int64_t i = 0; i < frames * px; ++i) {
      const double lam = std::max(0.0, (double)neural[i]);
      neural[i] = static_cast<float>(
          std::max(0.0, neural[i] + std::sqrt(lam / params.kappa) * noise(rng)));
    }
  }
  if (params.blur) {
    std::vector<float> scratch;
    for (int t = 0; t < frames; ++t) gaussian_blur_frame(neural + t * px, h, w, params.sigma, scratch);
  }
  if (params.brightness_contrast) {
    double mean = 0;
    for (int64_t i = 0; i < frames * px; ++i) mean += neural[i];
    mean /= static_cast<double>(frames * px);
    const float k = static_cast<float>(params.contrast);
    const float shift = static_cast<float>(mean * (1.0 - params.contrast) + params.brightness);
    for (int64_t i = 0; i < frames * px; ++i) neural[i] = neural[i] * k + shift;
  }
}

BehaviorJitterParams draw_behavior_jitter(const AugmentConfig& cfg, int frames, int joints, Rng& rng) {
  BehaviorJitterParams p;
  p.scale = uniform(rng, 0, 1) < cfg.p_scale;
  p.scale_factor = uniform(rng, 1.0 - cfg.scale_range, 1.0 + cfg.scale_range);
  p.shear = uniform(rng, 0, 1) < cfg.p_shear;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      p.shear_matrix[r * 3 + c] = r == c ? 1.0 : uniform(rng, -cfg.shear_range, cfg.shear_range);
  p.frame_drop.assign(frames, 0);
  for (auto& m : p.frame_drop) m = uniform(rng, 0, 1) < cfg.temporal_drop_rate;
  p.joint_drop.assign(joints, 0);
  for (auto& m : p.joint_drop) m = uniform(rng, 0, 1) < cfg.spatial_drop_rate;
  bool all_dropped = true;
  for (auto m : p.frame_drop) all_dropped = all_dropped && m;
  if (all_dropped && frames > 0) log_warning("behavior jitter dropped every frame of a window");
  return p;
}

void jitter_behavior(float* behavior, int frames, int joints, const BehaviorJitterParams& params) {
  for (int f = 0; f < frames; ++f) {
    float* pose = behavior + static_cast<int64_t>(f) * joints * 3;
    if (params.frame_drop.size() == static_cast<size_t>(frames) && params.frame_drop[f]) {
      std::fill(pose, pose + joints * 3, 0.f);
      continue;
    }
    for (int j = 0; j < joints; ++j) {
      float* xyz = pose + j * 3;
      if (params.joint_drop.size() == static_cast<size_t>(joints) && params.joint_drop[j]) {
        xyz[0] = xyz[1] = xyz[2] = 0.f;
        continue;
      }
      if (params.shear) {
        const double x = xyz[0], y = xyz[1], z = xyz[2];
        const double* m = params.shear_matrix;
        xyz[0] = static_cast<float>(m[0] * x + m[1] * y + m[2] * z);
        xyz[1] = static_cast<float>(m[3] * x + m[4] * y + m[5] * z);
        xyz[2] = static_cast<float>(m[6] * x + m[7] * y + m[8] * z);
      }
      if (params.scale) {
        xyz[0] = static_cast<float>(xyz[0] * params.scale_factor);
        xyz[1] = static_cast<float>(xyz[1] * params.scale_factor);
        xyz[2] = static_cast<float>(xyz[2] * params.scale_factor);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

namespace {

// donor frame from the source domain's train trials, timestamp outside the
// query window
std::pair<int, int64_t> pick_calcium_donor(const SplitDataset& split, const WindowRef& ref, Rng& rng) {
  std::set<int> train_trials;
  for (const auto& w : split.train)
    if (w.domain == ref.domain) train_trials.insert(w.trial);
  std::vector<int> trials(train_trials.begin(), train_trials.end());
  if (trials.empty()) trials.push_back(ref.trial);
  for (int attempt = 0; attempt < 64; ++attempt) {
    const int trial = trials[uniform_int(rng, 0, static_cast<int64_t>(trials.size()) - 1)];
    const Trial& tr = split.world->domains[ref.domain].trials[trial];
    const int64_t frame = uniform_int(rng, 0, tr.neural_frames - 1);
    const bool inside_window = trial == ref.trial && frame >= ref.neural_start &&
                               frame < ref.neural_start + ref.neural_len;
    if (!inside_window) return {trial, frame};
  }
  return {trials[0], 0};
}

}  // namespace

AugmentedPair augment_pair(const SplitDataset& split, const NeighborIndex* index,
                           const WindowRef& ref, const AugmentConfig& cfg, Rng& rng) {
  if ((cfg.swap_behavior_enabled || cfg.swap_neural_enabled) && (!index || !index->built()))
    throw ContractError("augment_pair: swapping enabled but no neighbor index");
  const MultiDomainDataset& world = *split.world;
  const int pose_dim = world.cfg.joints * 3;
  const int frames_b = split.sync.behavior_window;
  const int frames_n = split.sync.neural_window;
  const int64_t frame_px = static_cast<int64_t>(world.cfg.image_h) * world.cfg.image_w;

  AugmentedPair out;
  out.behavior.resize(static_cast<size_t>(frames_b) * pose_dim);
  out.neural.resize(static_cast<size_t>(frames_n) * frame_px);
  out.neural_domain = ref.domain;
  copy_behavior_window(world, ref, out.behavior.data());
  copy_neural_window(world, ref, out.neural.data());

  // swap
  if (cfg.swap_behavior_enabled && uniform(rng, 0, 1) < cfg.p_swap_behavior)
    swap_behavior(out.behavior.data(), frames_b, pose_dim, ref.domain, *index, cfg, rng);
  if (cfg.swap_neural_enabled && uniform(rng, 0, 1) < cfg.p_swap_neural) {
    // distances are computed on the original (pre-swap) behavior window
    std::vector<float> original(static_cast<size_t>(frames_b) * pose_dim);
    copy_behavior_window(world, ref, original.data());
    out.neural_domain = swap_neural(original.data(), static_cast<int>(original.size()),
                                    out.neural.data(), ref.domain, *index, cfg, rng);
  }

  // calcium injection
  if (cfg.calcium_enabled && uniform(rng, 0, 1) < cfg.p_calcium) {
    const auto [trial, frame] = pick_calcium_donor(split, ref, rng);
    const Trial& tr = world.domains[ref.domain].trials[trial];
    CalciumKernel kernel{cfg.calcium_gamma, frames_n, cfg.alpha_cal};
    calcium_augment(out.neural.data(), frames_n, frame_px, tr.neural.data() + frame * frame_px,
                    kernel, rng);
  }

  // mix with a random window from a random domain
  if (cfg.mix_enabled && uniform(rng, 0, 1) < cfg.p_mix && !split.train.empty()) {
    const WindowRef& donor = split.train[uniform_int(rng, 0, (int64_t)split.train.size() - 1)];
    std::vector<float> donor_buf(out.neural.size());
    copy_neural_window(world, donor, donor_buf.data());
    const float alpha = static_cast<float>(uniform(rng, 0.0, cfg.mix_alpha_max));
    mix_augment(out.neural.data(), static_cast<int64_t>(out.neural.size()), donor_buf.data(), alpha);
  }

  // jitter
  if (cfg.jitter_neural_enabled) {
    auto params = draw_neural_jitter(cfg, rng);
    jitter_neural(out.neural.data(), frames_n, world.cfg.image_h, world.cfg.image_w, params, rng);
  }
  if (cfg.jitter_behavior_enabled) {
    out.behavior_masks = draw_behavior_jitter(cfg, frames_b, world.cfg.joints, rng);
    jitter_behavior(out.behavior.data(), frames_b, world.cfg.joints, out.behavior_masks);
  }
  return out;
}

}  // namespace neuroswap
