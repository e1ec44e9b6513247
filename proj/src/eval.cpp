#include "neuroswap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "neuroswap/adam.hpp"
#include "neuroswap/log.hpp"
#include "neuroswap/parallel.hpp"

namespace neuroswap {

// ---------------------------------------------------------------------------
// feature extraction
// ---------------------------------------------------------------------------

Tensor extract_features(const ModelBundle& model, const SplitDataset& split,
                        const std::vector<WindowRef>& windows) {
  const MultiDomainDataset& world = *split.world;
  const int64_t n = (int64_t)windows.size();
  const int64_t d = model.cfg.embed_dim;
  const int tn = split.sync.neural_window;
  const int64_t px = (int64_t)world.cfg.image_h * world.cfg.image_w;
  std::vector<float> out((size_t)n * d);

  const int64_t chunk = 32;
  const int64_t n_chunks = (n + chunk - 1) / chunk;
  parallel_for(n_chunks, [&](int64_t c) {
    NoGradGuard ng;
    const int64_t lo = c * chunk, hi = std::min(n, lo + chunk);
    const int64_t b = hi - lo;
    std::vector<float> buf((size_t)b * tn * px);
    for (int64_t i = 0; i < b; ++i)
      copy_neural_window(world, windows[lo + i], buf.data() + (size_t)i * tn * px);
    auto x = Tensor::from_data({b, (int64_t)tn, world.cfg.image_h, world.cfg.image_w}, std::move(buf));
    auto h = model.encode_neural_batch(x, false);
    std::copy(h.data().begin(), h.data().end(), out.begin() + (size_t)lo * d);
  });
  return Tensor::from_data({n, d}, std::move(out));
}

FeatureTable extract_feature_table(const ModelBundle& model, const SplitDataset& split) {
  FeatureTable t;
  t.train_x = extract_features(model, split, split.train);
  t.test_x = extract_features(model, split, split.test);
  return t;
}

namespace {

Tensor pooled_raw_neural(const SplitDataset& split, const std::vector<WindowRef>& windows, int grid) {
  const MultiDomainDataset& world = *split.world;
  const int H = world.cfg.image_h, W = world.cfg.image_w;
  const int tn = split.sync.neural_window;
  const int64_t d = (int64_t)grid * grid;
  std::vector<float> out(windows.size() * d, 0.f);
  for (size_t i = 0; i < windows.size(); ++i) {
    const Trial& tr = world.domains[windows[i].domain].trials[windows[i].trial];
    float* dst = out.data() + i * d;
    for (int f = 0; f < tn; ++f) {
      const float* img = tr.neural.data() + (windows[i].neural_start + f) * (int64_t)H * W;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) dst[(y * grid / H) * grid + (x * grid / W)] += img[y * W + x];
    }
    const float cell = (float)((H / (double)grid) * (W / (double)grid) * tn);
    for (int64_t k = 0; k < d; ++k) dst[k] /= cell;
  }
  return Tensor::from_data({(int64_t)windows.size(), d}, std::move(out));
}

Tensor flattened_behavior(const SplitDataset& split, const std::vector<WindowRef>& windows) {
  const MultiDomainDataset& world = *split.world;
  const int64_t d = behavior_window_numel(world, split.sync);
  std::vector<float> out(windows.size() * d);
  for (size_t i = 0; i < windows.size(); ++i)
    copy_behavior_window(world, windows[i], out.data() + i * d);
  return Tensor::from_data({(int64_t)windows.size(), d}, std::move(out));
}

}  // namespace

FeatureTable raw_neural_features(const SplitDataset& split, int grid) {
  return {pooled_raw_neural(split, split.train, grid), pooled_raw_neural(split, split.test, grid)};
}

FeatureTable raw_behavior_features(const SplitDataset& split) {
  return {flattened_behavior(split, split.train), flattened_behavior(split, split.test)};
}

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

std::vector<int64_t> stratified_subset(const std::vector<int>& labels, int n_classes, double fraction,
                                       uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("stratified_subset: bad fraction");
  std::vector<std::vector<int64_t>> per_class(n_classes);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes)
      throw ContractError("stratified_subset: label out of range");
    per_class[labels[i]].push_back((int64_t)i);
  }
  std::vector<int64_t> keep;
  for (int c = 0; c < n_classes; ++c) {
    auto& rows = per_class[c];
    if (rows.empty()) continue;
    Rng rng = make_rng(seed, kStreamProbe, (uint64_t)c);
    std::shuffle(rows.begin(), rows.end(), rng);
    const int64_t take = (int64_t)std::ceil(fraction * (double)rows.size());
    keep.insert(keep.end(), rows.begin(), rows.begin() + take);
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

double linear_probe(const Tensor& train_x, const std::vector<int>& train_y, const Tensor& test_x,
                    const std::vector<int>& test_y, int n_classes, const ProbeConfig& cfg) {
  if (train_x.ndim() != 2 || test_x.ndim() != 2 || train_x.dim(1) != test_x.dim(1))
    throw DimensionError("linear_probe: feature shape mismatch");
  if ((int64_t)train_y.size() != train_x.dim(0) || (int64_t)test_y.size() != test_x.dim(0))
    throw DimensionError("linear_probe: label count mismatch");

  std::vector<int64_t> keep = stratified_subset(train_y, n_classes, cfg.fraction, cfg.seed);
  {
    std::set<int> present;
    for (int64_t i : keep) present.insert(train_y[i]);
    if (present.size() < 2) throw ContractError("linear_probe: single-class train set");
  }

  const int64_t d = train_x.dim(1), n = (int64_t)keep.size();
  // standardize on the probe's train subset
  std::vector<double> mean(d, 0), stddev(d, 0);
  for (int64_t i : keep)
    for (int64_t k = 0; k < d; ++k) mean[k] += train_x.data()[i * d + k];
  for (auto& m : mean) m /= (double)n;
  for (int64_t i : keep)
    for (int64_t k = 0; k < d; ++k) {
      const double v = train_x.data()[i * d + k] - mean[k];
      stddev[k] += v * v;
    }
  for (auto& s : stddev) s = std::max(std::sqrt(s / (double)n), 1e-6);

  auto standardized = [&](const Tensor& x, const std::vector<int64_t>* rows) {
    const int64_t m = rows ? (int64_t)rows->size() : x.dim(0);
    std::vector<float> out((size_t)m * d);
    for (int64_t i = 0; i < m; ++i) {
      const int64_t src = rows ? (*rows)[i] : i;
      for (int64_t k = 0; k < d; ++k)
        out[i * d + k] = (float)((x.data()[src * d + k] - mean[k]) / stddev[k]);
    }
    return Tensor::from_data({m, d}, std::move(out));
  };

  auto xt = standardized(train_x, &keep);
  std::vector<int> yt;
  yt.reserve(keep.size());
  for (int64_t i : keep) yt.push_back(train_y[i]);

  auto w = Tensor::zeros({n_classes, d}, true);
  auto b = Tensor::zeros({n_classes}, true);
  std::vector<Tensor> params{w, b};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto& p : params) p.zero_grad();
    auto logits = add_rowvec(matmul_nt(xt, w), b);
    auto loss = scale(nll_loss(log_softmax(logits, 1), yt), 1.f / (float)n);
    backward(loss);
    // plain full-batch gradient descent
    for (auto& p : params) {
      auto data = p.data_mut();
      auto g = p.grad();
      for (int64_t i = 0; i < p.numel(); ++i) data[i] -= cfg.lr * g[i];
    }
  }

  NoGradGuard ng;
  auto xe = standardized(test_x, nullptr);
  auto logits = add_rowvec(matmul_nt(xe, w), b);
  int64_t correct = 0;
  for (int64_t i = 0; i < xe.dim(0); ++i) {
    const float* row = logits.data().data() + i * n_classes;
    int best = 0;
    for (int c = 1; c < n_classes; ++c)
      if (row[c] > row[best]) best = c;
    if (best == test_y[i]) ++correct;
  }
  return test_y.empty() ? 0.0 : (double)correct / (double)test_y.size();
}

// ---------------------------------------------------------------------------
// benchmarks
// ---------------------------------------------------------------------------

nlohmann::json BenchmarkReport::to_json() const {
  return nlohmann::json{{"task", task},
                        {"fraction", fraction},
                        {"mean_accuracy", mean_accuracy},
                        {"domains", domains},
                        {"per_domain", per_domain},
                        {"chance", chance},
                        {"split", split_description},
                        {"seed", seed}};
}

std::string BenchmarkReport::csv_header() { return "method,task,fraction,mean_accuracy,chance,seed"; }

std::string BenchmarkReport::csv_row(const std::string& method) const {
  std::ostringstream os;
  os << method << "," << task << "," << fraction << "," << mean_accuracy << "," << chance << ","
     << seed;
  return os.str();
}

namespace {

std::vector<int> window_actions(const std::vector<WindowRef>& windows, LabelAudit& audit) {
  std::vector<int> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(audit.action(w));
  return out;
}

// chance-control label shuffle: permutes the label multiset within a split
std::vector<int> maybe_shuffle(std::vector<int> labels, bool shuffle, uint64_t seed, uint64_t salt) {
  if (shuffle) {
    Rng rng = make_rng(seed, kStreamProbe, 999, salt);
    std::shuffle(labels.begin(), labels.end(), rng);
  }
  return labels;
}

std::vector<int64_t> rows_of_domain(const std::vector<WindowRef>& windows, int domain, bool invert) {
  std::vector<int64_t> rows;
  for (size_t i = 0; i < windows.size(); ++i)
    if ((windows[i].domain == domain) != invert) rows.push_back((int64_t)i);
  return rows;
}

std::vector<int> take(const std::vector<int>& v, const std::vector<int64_t>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (int64_t r : rows) out.push_back(v[r]);
  return out;
}

int distinct(const std::vector<int>& v) { return (int)std::set<int>(v.begin(), v.end()).size(); }

}  // namespace

BenchmarkReport benchmark_single_subject(const FeatureTable& features, const SplitDataset& split,
                                         const BenchmarkOptions& opts) {
  const int n_domains = (int)split.world->domains.size();
  const int n_actions = split.world->cfg.n_actions;
  LabelAudit audit(n_domains);
  auto train_y = maybe_shuffle(window_actions(split.train, audit), opts.shuffle_labels, opts.seed, 1);
  auto test_y = maybe_shuffle(window_actions(split.test, audit), opts.shuffle_labels, opts.seed, 2);

  BenchmarkReport report;
  report.task = "single_subject";
  report.fraction = opts.fraction;
  report.seed = opts.seed;
  report.chance = 1.0 / n_actions;
  report.split_description = "per-domain probe, held-out trials";
  ProbeConfig probe = opts.probe;
  probe.fraction = opts.fraction;
  probe.seed = opts.seed;

  double sum = 0;
  for (int s = 0; s < n_domains; ++s) {
    auto train_rows = rows_of_domain(split.train, s, false);
    auto test_rows = rows_of_domain(split.test, s, false);
    auto yt = take(train_y, train_rows);
    auto ye = take(test_y, test_rows);
    if (train_rows.empty() || test_rows.empty() || distinct(yt) < 2 || distinct(ye) < 2) {
      log_warning("single-subject: domain " + std::to_string(s) + " lacks enough labels, skipped");
      continue;
    }
    const double acc = linear_probe(gather_rows(features.train_x, train_rows), yt,
                                    gather_rows(features.test_x, test_rows), ye, n_actions, probe);
    report.domains.push_back(s);
    report.per_domain.push_back(acc);
    sum += acc;
  }
  if (!report.per_domain.empty()) report.mean_accuracy = sum / (double)report.per_domain.size();
  return report;
}

BenchmarkReport benchmark_across_subject(const FeatureTable& features, const SplitDataset& split,
                                         const BenchmarkOptions& opts) {
  const int n_domains = (int)split.world->domains.size();
  const int n_actions = split.world->cfg.n_actions;
  if (n_domains < 2) throw ConfigError("across-subject benchmark needs at least 2 domains");

  BenchmarkReport report;
  report.task = "across_subject";
  report.fraction = opts.fraction;
  report.seed = opts.seed;
  report.chance = 1.0 / n_actions;
  report.split_description = "leave-one-domain-out, probe on remaining domains";
  ProbeConfig probe = opts.probe;
  probe.fraction = opts.fraction;
  probe.seed = opts.seed;

  double sum = 0;
  for (int target = 0; target < n_domains; ++target) {
    LabelAudit audit(n_domains);
    auto train_rows = rows_of_domain(split.train, target, true);  // every other domain
    std::vector<int> yt;
    yt.reserve(train_rows.size());
    for (int64_t r : train_rows) yt.push_back(audit.action(split.train[r]));
    yt = maybe_shuffle(std::move(yt), opts.shuffle_labels, opts.seed, 10 + target);
    if (audit.reads[target] != 0)
      throw ContractError("across-subject: target-domain labels were read during probe training");
    if (distinct(yt) < 2) {
      log_warning("across-subject: fold " + std::to_string(target) + " lacks labels, skipped");
      continue;
    }
    auto xt = gather_rows(features.train_x, train_rows);
    // the audited phase covers probe training; evaluation below may read
    // the target's ground truth
    auto test_rows = rows_of_domain(split.test, target, false);
    std::vector<int> ye;
    for (int64_t r : test_rows) ye.push_back(split.test[r].action);
    ye = maybe_shuffle(std::move(ye), opts.shuffle_labels, opts.seed, 20 + target);
    if (test_rows.empty() || distinct(ye) < 2) {
      log_warning("across-subject: fold " + std::to_string(target) + " lacks test labels, skipped");
      continue;
    }
    const int64_t target_reads_before = audit.reads[target];
    const double acc =
        linear_probe(xt, yt, gather_rows(features.test_x, test_rows), ye, n_actions, probe);
    if (audit.reads[target] != target_reads_before)
      throw ContractError("across-subject: probe training touched target labels");
    report.domains.push_back(target);
    report.per_domain.push_back(acc);
    sum += acc;
  }
  if (!report.per_domain.empty()) report.mean_accuracy = sum / (double)report.per_domain.size();
  return report;
}

BenchmarkReport benchmark_identity(const FeatureTable& features, const SplitDataset& split,
                                   const BenchmarkOptions& opts) {
  const int n_domains = (int)split.world->domains.size();
  if (n_domains < 2) throw ConfigError("identity benchmark needs at least 2 domains");

  std::vector<int> yt, ye;
  for (const auto& w : split.train) yt.push_back(w.domain);
  for (const auto& w : split.test) ye.push_back(w.domain);
  yt = maybe_shuffle(std::move(yt), opts.shuffle_labels, opts.seed, 31);
  ye = maybe_shuffle(std::move(ye), opts.shuffle_labels, opts.seed, 32);

  ProbeConfig probe = opts.probe;
  probe.fraction = opts.fraction;
  probe.seed = opts.seed;

  BenchmarkReport report;
  report.task = "identity";
  report.fraction = opts.fraction;
  report.seed = opts.seed;
  report.chance = 1.0 / n_domains;
  report.split_description = "domain-id probe on held-out trials";
  report.mean_accuracy =
      linear_probe(features.train_x, yt, features.test_x, ye, n_domains, probe);
  return report;
}

BenchmarkSuite run_benchmarks(const FeatureTable& features, const SplitDataset& split,
                              const BenchmarkOptions& opts) {
  BenchmarkSuite suite;
  suite.single_subject = benchmark_single_subject(features, split, opts);
  suite.across_subject = benchmark_across_subject(features, split, opts);
  suite.identity = benchmark_identity(features, split, opts);
  return suite;
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

std::string AblationResult::to_csv() const {
  std::ostringstream os;
  os << "method,single,across,identity,seed\n";
  for (const auto& r : rows)
    os << r.method << "," << r.single_subject << "," << r.across_subject << "," << r.identity << ","
       << r.seed << "\n";
  return os.str();
}

AblationResult run_ablation(const MultiDomainDataset& world, const TrainConfig& base,
                            const std::vector<uint64_t>& seeds) {
  if (seeds.size() < 3) throw ConfigError("ablation: need at least 3 seeds");

  struct Rung {
    std::string name;
    bool swap, calcium, mix;
  };
  const std::vector<Rung> ladder{{"no_swap", false, false, false},
                                 {"swap", true, false, false},
                                 {"swap_calcium", true, true, false},
                                 {"swap_calcium_mix", true, true, true}};

  AblationResult result;
  for (const auto& r : ladder) result.ladder.push_back(r.name);
  result.rows.resize(ladder.size() * seeds.size());

  parallel_for((int64_t)(ladder.size() * seeds.size()), [&](int64_t task) {
    const size_t rung_idx = task / seeds.size();
    const size_t seed_idx = task % seeds.size();
    const Rung& rung = ladder[rung_idx];

    TrainConfig cfg = base;
    cfg.method = "ours";
    cfg.seed = seeds[seed_idx];
    cfg.metrics_path.clear();
    cfg.checkpoint_path.clear();
    cfg.augment.swap_behavior_enabled = rung.swap;
    cfg.augment.swap_neural_enabled = rung.swap;
    cfg.augment.calcium_enabled = rung.calcium;
    cfg.augment.mix_enabled = rung.mix;

    TrainResult trained = train(cfg, world);
    SplitDataset split = split_train_test(world, cfg.sync, cfg.split);
    FeatureTable features = extract_feature_table(trained.model, split);
    BenchmarkOptions opts;
    opts.fraction = 1.0;
    opts.seed = seeds[seed_idx];
    BenchmarkSuite suite = run_benchmarks(features, split, opts);

    AblationRow row;
    row.method = rung.name;
    row.seed = seeds[seed_idx];
    row.single_subject = suite.single_subject.mean_accuracy;
    row.across_subject = suite.across_subject.mean_accuracy;
    row.identity = suite.identity.mean_accuracy;
    result.rows[task] = row;
  });

  // rung-over-rung deltas of per-rung means
  std::vector<double> mean_single(ladder.size(), 0), mean_across(ladder.size(), 0),
      mean_identity(ladder.size(), 0);
  for (size_t ri = 0; ri < ladder.size(); ++ri) {
    for (size_t si = 0; si < seeds.size(); ++si) {
      const auto& row = result.rows[ri * seeds.size() + si];
      mean_single[ri] += row.single_subject;
      mean_across[ri] += row.across_subject;
      mean_identity[ri] += row.identity;
    }
    mean_single[ri] /= (double)seeds.size();
    mean_across[ri] /= (double)seeds.size();
    mean_identity[ri] /= (double)seeds.size();
  }
  for (size_t ri = 1; ri < ladder.size(); ++ri)
    result.deltas.push_back({ladder[ri].name, mean_single[ri] - mean_single[ri - 1],
                             mean_across[ri] - mean_across[ri - 1],
                             mean_identity[ri] - mean_identity[ri - 1]});
  return result;
}

}  // namespace neuroswap
