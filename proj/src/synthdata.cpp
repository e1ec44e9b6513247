#include "neuroswap/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "neuroswap/log.hpp"
#include "neuroswap/parallel.hpp"
#include "neuroswap/rng.hpp"

namespace neuroswap {

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = nlohmann::json{{"version", c.version},
                     {"n_domains", c.n_domains},
                     {"n_actions", c.n_actions},
                     {"joints", c.joints},
                     {"image_h", c.image_h},
                     {"image_w", c.image_w},
                     {"neurons_per_domain", c.neurons_per_domain},
                     {"behavior_fps", c.behavior_fps},
                     {"neural_fps", c.neural_fps},
                     {"dwell_min_s", c.dwell_min_s},
                     {"dwell_max_s", c.dwell_max_s},
                     {"gamma_gen", c.gamma_gen},
                     {"alpha_gen", c.alpha_gen},
                     {"identity_strength", c.identity_strength},
                     {"skeleton_scale_spread", c.skeleton_scale_spread},
                     {"joint_offset_sigma", c.joint_offset_sigma},
                     {"neuron_layout_seed", c.neuron_layout_seed},
                     {"n_trials", c.n_trials},
                     {"trial_seconds", c.trial_seconds},
                     {"pose_noise_sigma", c.pose_noise_sigma},
                     {"rate_active", c.rate_active},
                     {"rate_background", c.rate_background},
                     {"blob_sigma_px", c.blob_sigma_px},
                     {"photons_per_unit", c.photons_per_unit}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  c = WorldConfig{};
  c.version = j.value("version", 1);
  c.n_domains = j.value("n_domains", c.n_domains);
  c.n_actions = j.value("n_actions", c.n_actions);
  c.joints = j.value("joints", c.joints);
  c.image_h = j.value("image_h", c.image_h);
  c.image_w = j.value("image_w", c.image_w);
  c.neurons_per_domain = j.value("neurons_per_domain", c.neurons_per_domain);
  c.behavior_fps = j.value("behavior_fps", c.behavior_fps);
  c.neural_fps = j.value("neural_fps", c.neural_fps);
  c.dwell_min_s = j.value("dwell_min_s", c.dwell_min_s);
  c.dwell_max_s = j.value("dwell_max_s", c.dwell_max_s);
  c.gamma_gen = j.value("gamma_gen", c.gamma_gen);
  c.alpha_gen = j.value("alpha_gen", c.alpha_gen);
  c.identity_strength = j.value("identity_strength", c.identity_strength);
  c.skeleton_scale_spread = j.value("skeleton_scale_spread", c.skeleton_scale_spread);
  c.joint_offset_sigma = j.value("joint_offset_sigma", c.joint_offset_sigma);
  c.neuron_layout_seed = j.value("neuron_layout_seed", c.neuron_layout_seed);
  c.n_trials = j.value("n_trials", c.n_trials);
  c.trial_seconds = j.value("trial_seconds", c.trial_seconds);
  c.pose_noise_sigma = j.value("pose_noise_sigma", c.pose_noise_sigma);
  c.rate_active = j.value("rate_active", c.rate_active);
  c.rate_background = j.value("rate_background", c.rate_background);
  c.blob_sigma_px = j.value("blob_sigma_px", c.blob_sigma_px);
  c.photons_per_unit = j.value("photons_per_unit", c.photons_per_unit);
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// World-level kinematics shared by every domain: rest skeleton, per-action
// sinusoid banks and motion levels, neuron-to-action assignment.
struct WorldKinematics {
  static constexpr int kHarmonics = 2;
  std::vector<double> rest;        // [J,3]
  std::vector<double> freq;        // [A, H] Hz
  std::vector<double> amp;         // [A, J, 3, H]
  std::vector<double> phase;       // [A, J, 3, H]
  std::vector<double> motion;      // [A]; action 0 is rest
  std::vector<int> neuron_action;  // [K] designated action per neuron

  WorldKinematics(const WorldConfig& cfg, uint64_t seed) {
    Rng rng = make_rng(seed, kStreamWorld, 1);
    const int J = cfg.joints, A = cfg.n_actions, H = kHarmonics;
    rest.assign(J * 3, 0.0);
    for (int j = 1; j < J; ++j)
      for (int c = 0; c < 3; ++c) rest[j * 3 + c] = uniform(rng, -1.0, 1.0);
    motion.resize(A);
    motion[0] = 0.05;
    for (int a = 1; a < A; ++a) motion[a] = uniform(rng, 0.4, 1.2);
    freq.resize(A * H);
    amp.resize(A * J * 3 * H);
    phase.resize(A * J * 3 * H);
    for (int a = 0; a < A; ++a) {
      for (int h = 0; h < H; ++h) freq[a * H + h] = uniform(rng, 0.5, 3.0);
      for (int j = 0; j < J; ++j)
        for (int c = 0; c < 3; ++c)
          for (int h = 0; h < H; ++h) {
            amp[((a * J + j) * 3 + c) * H + h] = motion[a] * uniform(rng, 0.05, 0.3);
            phase[((a * J + j) * 3 + c) * H + h] = uniform(rng, 0.0, 2.0 * kPi);
          }
    }
    neuron_action.resize(cfg.neurons_per_domain);
    const int active_actions = std::max(1, A - 1);
    for (int k = 0; k < cfg.neurons_per_domain; ++k)
      neuron_action[k] = A > 1 ? 1 + k % active_actions : 0;
  }

  // root-centered pose before identity transform and noise
  void pose_at(int action, double t, double* out_j3, int J) const {
    const int H = kHarmonics;
    out_j3[0] = out_j3[1] = out_j3[2] = 0.0;
    for (int j = 1; j < J; ++j)
      for (int c = 0; c < 3; ++c) {
        double v = rest[j * 3 + c];
        for (int h = 0; h < H; ++h)
          v += amp[((action * J + j) * 3 + c) * H + h] *
               std::sin(2.0 * kPi * freq[action * H + h] * t +
                        phase[((action * J + j) * 3 + c) * H + h]);
        out_j3[j * 3 + c] = v;
      }
  }
};

std::vector<ActionInterval> sample_action_sequence(const WorldConfig& cfg, Rng& rng) {
  // mildly skewed priors: action 0 twice as likely as any other
  std::vector<double> prior(cfg.n_actions, 1.0);
  prior[0] = 2.0;
  auto draw = [&](int exclude) {
    double total = 0;
    for (int a = 0; a < cfg.n_actions; ++a)
      if (a != exclude) total += prior[a];
    double u = uniform(rng, 0.0, total);
    for (int a = 0; a < cfg.n_actions; ++a) {
      if (a == exclude) continue;
      u -= prior[a];
      if (u <= 0) return a;
    }
    return cfg.n_actions - 1;
  };
  std::vector<ActionInterval> out;
  double t = 0;
  int action = draw(-1);
  while (t < cfg.trial_seconds) {
    double dwell = uniform(rng, cfg.dwell_min_s, cfg.dwell_max_s);
    out.push_back({t, std::min(t + dwell, cfg.trial_seconds), action});
    t += dwell;
    action = draw(action);
  }
  return out;
}

DomainData generate_domain(const WorldConfig& cfg, const WorldKinematics& kin, uint64_t seed, int s) {
  DomainData dom;
  const int J = cfg.joints, K = cfg.neurons_per_domain;
  const int H = cfg.image_h, W = cfg.image_w;

  // identity signature; strength 0 collapses every domain onto one draw
  const bool distinct = cfg.identity_strength > 0.0;
  Rng id_rng =
      make_rng(seed ^ cfg.neuron_layout_seed, kStreamWorld, 2, distinct ? (uint64_t)(s + 1) : 0);
  dom.skeleton_scale = 1.0 + cfg.identity_strength *
                                 uniform(id_rng, -cfg.skeleton_scale_spread, cfg.skeleton_scale_spread);
  dom.joint_offsets.assign(J * 3, 0.f);
  for (int j = 1; j < J; ++j)
    for (int c = 0; c < 3; ++c)
      dom.joint_offsets[j * 3 + c] =
          static_cast<float>(cfg.identity_strength * gaussian(id_rng, 0.0, cfg.joint_offset_sigma));
  dom.gain = 1.0 + cfg.identity_strength * uniform(id_rng, -0.35, 0.6);
  dom.baseline = 5.5 + cfg.identity_strength * uniform(id_rng, -2.5, 2.5);
  dom.neuron_x.resize(K);
  dom.neuron_y.resize(K);
  const double margin = 3.0 * cfg.blob_sigma_px;
  for (int k = 0; k < K; ++k) {
    dom.neuron_x[k] = static_cast<float>(uniform(id_rng, margin, W - 1 - margin));
    dom.neuron_y[k] = static_cast<float>(uniform(id_rng, margin, H - 1 - margin));
  }

  const int radius = static_cast<int>(std::ceil(3.0 * cfg.blob_sigma_px));
  const double inv2s2 = 1.0 / (2.0 * cfg.blob_sigma_px * cfg.blob_sigma_px);

  dom.trials.resize(cfg.n_trials);
  for (int trial = 0; trial < cfg.n_trials; ++trial) {
    Rng rng = make_rng(seed, kStreamWorld, 3, (uint64_t)s, (uint64_t)trial);
    Trial& tr = dom.trials[trial];
    tr.intervals = sample_action_sequence(cfg, rng);

    tr.behavior_frames = static_cast<int64_t>(cfg.trial_seconds * cfg.behavior_fps);
    tr.behavior.resize(tr.behavior_frames * J * 3);
    std::vector<double> pose(J * 3);
    for (int64_t f = 0; f < tr.behavior_frames; ++f) {
      const double t = f / cfg.behavior_fps;
      kin.pose_at(tr.action_at(t), t, pose.data(), J);
      float* dst = tr.behavior.data() + f * J * 3;
      for (int j = 0; j < J; ++j)
        for (int c = 0; c < 3; ++c) {
          if (j == 0) {
            dst[c] = 0.f;  // root stays pinned
            continue;
          }
          double v = pose[j * 3 + c] * dom.skeleton_scale + dom.joint_offsets[j * 3 + c] +
                     gaussian(rng, 0.0, cfg.pose_noise_sigma);
          dst[j * 3 + c] = static_cast<float>(v);
        }
    }

    // spikes and the exact AR calcium recurrence at the neural rate
    tr.neural_frames = static_cast<int64_t>(cfg.trial_seconds * cfg.neural_fps);
    tr.spikes.assign(tr.neural_frames * K, 0);
    tr.calcium.assign(tr.neural_frames * K, 0.f);
    for (int64_t f = 0; f < tr.neural_frames; ++f) {
      const double t = f / cfg.neural_fps;
      const int action = tr.action_at(t);
      for (int k = 0; k < K; ++k) {
        double rate = cfg.rate_background;
        if (kin.neuron_action[k] == action)
          rate = cfg.rate_active * (0.6 + 0.6 * kin.motion[action]);
        const bool spike = uniform(rng, 0.0, 1.0) < rate;
        tr.spikes[f * K + k] = spike ? 1 : 0;
        const double prev = f > 0 ? tr.calcium[(f - 1) * K + k] : 0.0;
        tr.calcium[f * K + k] =
            static_cast<float>(cfg.gamma_gen * prev + cfg.alpha_gen * (spike ? 1.0 : 0.0));
      }
    }

    // images: baseline + gain * sum_k calcium_k * gaussian blob_k, then shot noise
    tr.neural.assign(tr.neural_frames * H * W, 0.f);
    for (int64_t f = 0; f < tr.neural_frames; ++f) {
      float* img = tr.neural.data() + f * H * W;
      for (int64_t p = 0; p < H * W; ++p) img[p] = static_cast<float>(dom.baseline);
      for (int k = 0; k < K; ++k) {
        const double c = tr.calcium[f * K + k];
        if (c <= 1e-4) continue;
        const double cx = dom.neuron_x[k], cy = dom.neuron_y[k];
        const int x0 = std::max(0, (int)std::floor(cx) - radius);
        const int x1 = std::min(W - 1, (int)std::ceil(cx) + radius);
        const int y0 = std::max(0, (int)std::floor(cy) - radius);
        const int y1 = std::min(H - 1, (int)std::ceil(cy) + radius);
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            img[y * W + x] += static_cast<float>(dom.gain * c * std::exp(-r2 * inv2s2));
          }
      }
      for (int64_t p = 0; p < H * W; ++p) {
        const double lambda = std::max(0.0, (double)img[p]) * cfg.photons_per_unit;
        std::poisson_distribution<long> shot(lambda);
        img[p] = static_cast<float>(shot(rng) / cfg.photons_per_unit);
      }
    }
  }
  return dom;
}

}  // namespace

MultiDomainDataset generate_world(const WorldConfig& cfg, uint64_t seed) {
  cfg.validate();
  WorldKinematics kin(cfg, seed);
  MultiDomainDataset data;
  data.cfg = cfg;
  data.seed = seed;
  data.domains.resize(cfg.n_domains);
  parallel_for(cfg.n_domains,
               [&](int64_t s) { data.domains[s] = generate_domain(cfg, kin, seed, (int)s); });
  return data;
}

// ---------------------------------------------------------------------------
// Synchronization and splits
// ---------------------------------------------------------------------------

std::vector<WindowRef> synchronize_trial(const MultiDomainDataset& data, int domain, int trial,
                                         const SyncConfig& sync) {
  const WorldConfig& cfg = data.cfg;
  const Trial& tr = data.domains[domain].trials[trial];
  std::vector<WindowRef> out;
  if (tr.neural_frames < sync.neural_window) return out;
  // behavior pairing grid: behavior_window frames spanning the neural window,
  // shared center timestamp
  const double paired_period =
      (sync.neural_window / cfg.neural_fps) / static_cast<double>(sync.behavior_window);
  for (int64_t start = 0; start + sync.neural_window <= tr.neural_frames; start += sync.stride) {
    WindowRef ref;
    ref.domain = domain;
    ref.trial = trial;
    ref.neural_start = start;
    ref.neural_len = sync.neural_window;
    ref.center_time = (start + (sync.neural_window - 1) / 2.0) / cfg.neural_fps;
    ref.behavior_idx.resize(sync.behavior_window);
    bool ok = true;
    for (int i = 0; i < sync.behavior_window; ++i) {
      const double t = ref.center_time + (i - (sync.behavior_window - 1) / 2.0) * paired_period;
      const int64_t idx = std::llround(t * cfg.behavior_fps);
      if (idx < 0 || idx >= tr.behavior_frames) {
        ok = false;
        break;
      }
      ref.behavior_idx[i] = idx;
    }
    if (!ok) continue;
    std::vector<int> counts(cfg.n_actions, 0);
    for (int f = 0; f < sync.neural_window; ++f)
      counts[tr.action_at((start + f) / cfg.neural_fps)]++;
    ref.action = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    out.push_back(std::move(ref));
  }
  return out;
}

std::vector<WindowRef> synchronize(const MultiDomainDataset& data, const SyncConfig& sync) {
  std::vector<WindowRef> out;
  for (int s = 0; s < (int)data.domains.size(); ++s)
    for (int t = 0; t < (int)data.domains[s].trials.size(); ++t) {
      auto w = synchronize_trial(data, s, t, sync);
      out.insert(out.end(), w.begin(), w.end());
    }
  if (out.empty()) log_warning("synchronize produced no windows (streams too short?)");
  return out;
}

SplitDataset split_train_test(const MultiDomainDataset& data, const SyncConfig& sync,
                              const SplitPolicy& policy) {
  SplitDataset split;
  split.world = &data;
  split.sync = sync;
  for (int s = 0; s < (int)data.domains.size(); ++s) {
    const int trials = static_cast<int>(data.domains[s].trials.size());
    if (trials < policy.holdout_trials + 1)
      throw ConfigError("split: domain " + std::to_string(s) + " has too few trials (" +
                        std::to_string(trials) + ")");
    const int first_test = trials - policy.holdout_trials;
    for (int t = 0; t < trials; ++t) {
      auto w = synchronize_trial(data, s, t, sync);
      auto& dst = t < first_test ? split.train : split.test;
      dst.insert(dst.end(), w.begin(), w.end());
    }
  }
  for (int s = 0; s < (int)data.domains.size(); ++s) {
    std::set<int> actions;
    for (const auto& w : split.test)
      if (w.domain == s) actions.insert(w.action);
    if (actions.size() < 2)
      throw ConfigError("split: test labels for domain " + std::to_string(s) + " are degenerate");
  }
  return split;
}

void copy_neural_window(const MultiDomainDataset& data, const WindowRef& ref, float* dst) {
  const Trial& tr = data.domains[ref.domain].trials[ref.trial];
  const int64_t hw = data.cfg.image_h * data.cfg.image_w;
  const float* src = tr.neural.data() + ref.neural_start * hw;
  std::copy(src, src + ref.neural_len * hw, dst);
}

void copy_behavior_window(const MultiDomainDataset& data, const WindowRef& ref, float* dst) {
  const Trial& tr = data.domains[ref.domain].trials[ref.trial];
  const int64_t jd = data.cfg.joints * 3;
  for (size_t i = 0; i < ref.behavior_idx.size(); ++i) {
    const float* src = tr.behavior.data() + ref.behavior_idx[i] * jd;
    std::copy(src, src + jd, dst + i * jd);
  }
}

int64_t neural_window_numel(const MultiDomainDataset& data, const SyncConfig& sync) {
  return static_cast<int64_t>(sync.neural_window) * data.cfg.image_h * data.cfg.image_w;
}

int64_t behavior_window_numel(const MultiDomainDataset& data, const SyncConfig& sync) {
  return static_cast<int64_t>(sync.behavior_window) * data.cfg.joints * 3;
}

}  // namespace neuroswap
