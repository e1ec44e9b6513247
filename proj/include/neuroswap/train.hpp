#pragma once

// Training loop for the contrastive model and the baselines. A run is fully
// determined by (config, dataset): every random draw comes from sub-streams
// keyed on (seed, epoch, step, item), so loss trajectories are bit-identical
// across runs and across checkpoint resume.

#include <string>
#include <vector>

#include <json.hpp>

#include "neuroswap/adam.hpp"
#include "neuroswap/augment.hpp"
#include "neuroswap/encoders.hpp"
#include "neuroswap/synthdata.hpp"

namespace neuroswap {

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> methods{"ours",       "simclr_no_swap", "regression_conv",
                                                "grl",        "mmd",            "supervised"};
  return methods;
}

struct TrainConfig {
  int version = 1;
  std::string method = "ours";
  int epochs = 200;
  int batch_size = 128;
  float temperature = 0.1f;
  float lr = 1e-4f;
  float weight_decay = 1e-5f;
  int warmup_epochs = 3;      // cosine schedule warm-up
  int da_warmup_epochs = 10;  // epochs with the DA penalty switched off
  float lambda_d = 10.f;
  float lambda_mmd = 1.f;
  uint64_t seed = 0;
  AugmentConfig augment;
  EncoderConfig encoder;
  SyncConfig sync;
  SplitPolicy split;
  std::string metrics_path;     // JSON-lines log; empty disables
  std::string checkpoint_path;  // written every epoch; empty disables

  void validate() const {
    bool ok = false;
    for (const auto& m : known_methods()) ok = ok || m == method;
    if (!ok) throw ConfigError("train: unknown method '" + method + "'");
    if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch size must be positive");
    if (warmup_epochs >= epochs) throw ConfigError("train: warm-up must be shorter than training");
    if (temperature <= 0) throw ConfigError("train: temperature must be positive");
    augment.validate();
  }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// The augmentation family actually applied for a method: swap/calcium/mix are
// specific to "ours"; the DA and SimCLR baselines keep only jitter; the
// supervised and regression baselines train on raw windows.
AugmentConfig resolved_augment(const TrainConfig& cfg);

struct MetricsRow {
  int epoch = 0;
  int step = 0;
  double loss_total = 0;
  double loss_b2n = 0;
  double loss_n2b = 0;
  double loss_da = 0;
};

struct TrainResult {
  ModelBundle model;
  std::vector<MetricsRow> log;
  int epochs_run = 0;
};

// Trains from scratch, or resumes bit-exactly from a checkpoint produced by
// the same config when `resume_from` is non-empty.
TrainResult train(const TrainConfig& cfg, const MultiDomainDataset& world,
                  const std::string& resume_from = "");

// Checkpoint helpers shared with the CLI.
void save_train_checkpoint(const std::string& path, const TrainConfig& cfg, const ModelBundle& model,
                           const AdamState& opt, int epochs_done);
struct LoadedCheckpoint {
  TrainConfig cfg;
  ModelBundle model;
  AdamState opt;
  int epochs_done = 0;
};
LoadedCheckpoint load_train_checkpoint(const std::string& path);

std::string metrics_to_jsonl(const std::vector<MetricsRow>& rows);

}  // namespace neuroswap
