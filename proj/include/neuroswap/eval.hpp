#pragma once

// Linear-probe evaluation on the three benchmarks (single-subject,
// across-subject, identity recognition), raw-feature controls, and the
// cumulative augmentation ablation. Probes only ever consume encoder
// representations h_n; projection outputs are not reachable from this API.

#include <string>
#include <vector>

#include "neuroswap/encoders.hpp"
#include "neuroswap/synthdata.hpp"
#include "neuroswap/train.hpp"

namespace neuroswap {

// Per-domain counters for action-label reads. The across-subject benchmark
// asserts that the held-out domain's counter never moves while its probe is
// being trained.
struct LabelAudit {
  std::vector<int64_t> reads;
  explicit LabelAudit(int n_domains = 0) : reads(n_domains, 0) {}
  int action(const WindowRef& ref) {
    if (ref.domain >= 0 && ref.domain < (int)reads.size()) reads[ref.domain]++;
    return ref.action;
  }
};

// Frozen-feature table, rows aligned with split.train / split.test.
struct FeatureTable {
  Tensor train_x;  // [n_train, d]
  Tensor test_x;   // [n_test, d]
};

// Encoder features h_n for every window (eval mode, no gradients, chunked
// and parallel across chunks).
FeatureTable extract_feature_table(const ModelBundle& model, const SplitDataset& split);
Tensor extract_features(const ModelBundle& model, const SplitDataset& split,
                        const std::vector<WindowRef>& windows);

// Raw-data controls: spatially pooled neural frames (grid x grid cell means
// averaged over the window) and flattened pose windows.
FeatureTable raw_neural_features(const SplitDataset& split, int grid = 8);
FeatureTable raw_behavior_features(const SplitDataset& split);

struct ProbeConfig {
  int epochs = 100;
  float lr = 1e-2f;
  double fraction = 1.0;  // class-stratified share of train labels, ceil per class
  uint64_t seed = 0;
};

// Class-stratified subset used by the probe at fraction < 1: exactly
// ceil(fraction * count) rows per class, deterministic in the seed. Returned
// indices are sorted.
std::vector<int64_t> stratified_subset(const std::vector<int>& labels, int n_classes, double fraction,
                                       uint64_t seed);

// Multinomial logistic regression (single linear layer + softmax
// cross-entropy, full batch), trained on standardized features.
// Returns accuracy on the test split.
double linear_probe(const Tensor& train_x, const std::vector<int>& train_y, const Tensor& test_x,
                    const std::vector<int>& test_y, int n_classes, const ProbeConfig& cfg);

struct BenchmarkReport {
  std::string task;
  double fraction = 1.0;
  double mean_accuracy = 0.0;
  std::vector<int> domains;        // domain ids covered (folds for across-subject)
  std::vector<double> per_domain;  // aligned with `domains`
  double chance = 0.0;
  std::string split_description;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row(const std::string& method) const;
};

struct BenchmarkOptions {
  double fraction = 1.0;
  uint64_t seed = 0;
  bool shuffle_labels = false;  // chance-level control: permutes labels within each split
  ProbeConfig probe;
};

BenchmarkReport benchmark_single_subject(const FeatureTable& features, const SplitDataset& split,
                                         const BenchmarkOptions& opts = {});
BenchmarkReport benchmark_across_subject(const FeatureTable& features, const SplitDataset& split,
                                         const BenchmarkOptions& opts = {});
BenchmarkReport benchmark_identity(const FeatureTable& features, const SplitDataset& split,
                                   const BenchmarkOptions& opts = {});

struct BenchmarkSuite {
  BenchmarkReport single_subject;
  BenchmarkReport across_subject;
  BenchmarkReport identity;
};

BenchmarkSuite run_benchmarks(const FeatureTable& features, const SplitDataset& split,
                              const BenchmarkOptions& opts = {});

// ---------------------------------------------------------------------------
// Ablation: the cumulative ladder {no swap; +swap; +swap+calcium;
// +swap+calcium+mix}, trained per seed, each rung benchmarked on all three
// tasks. Runs are independent and execute in parallel.
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string method;  // rung name
  double single_subject = 0;
  double across_subject = 0;
  double identity = 0;
  uint64_t seed = 0;
};

struct AblationDelta {
  std::string method;
  double d_single = 0;
  double d_across = 0;
  double d_identity = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;      // every (rung, seed) run
  std::vector<std::string> ladder;    // rung names in order
  std::vector<AblationDelta> deltas;  // rung-over-rung mean deltas
  std::string to_csv() const;         // header: method,single,across,identity,seed
};

AblationResult run_ablation(const MultiDomainDataset& world, const TrainConfig& base,
                            const std::vector<uint64_t>& seeds);

}  // namespace neuroswap
