#include "neuroswap/train.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "neuroswap/adam.hpp"
#include "neuroswap/io.hpp"
#include "neuroswap/log.hpp"
#include "neuroswap/objectives.hpp"

namespace neuroswap {

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"version", c.version},
                     {"method", c.method},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"temperature", c.temperature},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"warmup_epochs", c.warmup_epochs},
                     {"da_warmup_epochs", c.da_warmup_epochs},
                     {"lambda_d", c.lambda_d},
                     {"lambda_mmd", c.lambda_mmd},
                     {"seed", c.seed},
                     {"augment", c.augment},
                     {"encoder", c.encoder},
                     {"sync",
                      {{"neural_window", c.sync.neural_window},
                       {"behavior_window", c.sync.behavior_window},
                       {"stride", c.sync.stride}}},
                     {"holdout_trials", c.split.holdout_trials},
                     {"metrics_path", c.metrics_path},
                     {"checkpoint_path", c.checkpoint_path}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.version = j.value("version", 1);
  c.method = j.value("method", c.method);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.temperature = j.value("temperature", c.temperature);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.da_warmup_epochs = j.value("da_warmup_epochs", c.da_warmup_epochs);
  c.lambda_d = j.value("lambda_d", c.lambda_d);
  c.lambda_mmd = j.value("lambda_mmd", c.lambda_mmd);
  c.seed = j.value("seed", c.seed);
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
  if (j.contains("sync")) {
    const auto& s = j.at("sync");
    c.sync.neural_window = s.value("neural_window", c.sync.neural_window);
    c.sync.behavior_window = s.value("behavior_window", c.sync.behavior_window);
    c.sync.stride = s.value("stride", c.sync.stride);
  }
  c.split.holdout_trials = j.value("holdout_trials", c.split.holdout_trials);
  c.metrics_path = j.value("metrics_path", c.metrics_path);
  c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
}

AugmentConfig resolved_augment(const TrainConfig& cfg) {
  AugmentConfig a = cfg.augment;
  a.calcium_gamma = cfg.augment.calcium_gamma;
  if (cfg.method == "simclr_no_swap" || cfg.method == "grl" || cfg.method == "mmd") {
    a.swap_behavior_enabled = false;
    a.swap_neural_enabled = false;
    a.calcium_enabled = false;
    a.mix_enabled = false;
  } else if (cfg.method == "regression_conv" || cfg.method == "supervised") {
    a.swap_behavior_enabled = false;
    a.swap_neural_enabled = false;
    a.calcium_enabled = false;
    a.mix_enabled = false;
    a.jitter_neural_enabled = false;
    a.jitter_behavior_enabled = false;
  }
  return a;
}

std::string metrics_to_jsonl(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  for (const auto& r : rows) {
    nlohmann::json j{{"epoch", r.epoch},         {"step", r.step},       {"loss_total", r.loss_total},
                     {"loss_b2n", r.loss_b2n},   {"loss_n2b", r.loss_n2b},
                     {"loss_da", r.loss_da}};
    os << j.dump() << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

void save_train_checkpoint(const std::string& path, const TrainConfig& cfg, const ModelBundle& model,
                           const AdamState& opt, int epochs_done) {
  Checkpoint ck;
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["config"] = cfg;
  manifest["encoder"] = model.cfg;
  manifest["extras"] = model.extras;
  manifest["seed"] = cfg.seed;
  manifest["epoch"] = epochs_done;
  manifest["adam_step_count"] = opt.step_count;
  ck.manifest_json = manifest.dump();
  bundle_to_checkpoint(model, ck);
  for (size_t i = 0; i < opt.m.size(); ++i) {
    ck.tensors.emplace_back("adam.m." + std::to_string(i),
                            Tensor::from_data({(int64_t)opt.m[i].size()}, opt.m[i]));
    ck.tensors.emplace_back("adam.v." + std::to_string(i),
                            Tensor::from_data({(int64_t)opt.v[i].size()}, opt.v[i]));
  }
  save_checkpoint(path, ck);
}

LoadedCheckpoint load_train_checkpoint(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  nlohmann::json manifest = nlohmann::json::parse(ck.manifest_json);
  LoadedCheckpoint out;
  out.cfg = manifest.at("config").get<TrainConfig>();
  EncoderConfig enc = manifest.at("encoder").get<EncoderConfig>();
  BundleExtras extras = manifest.at("extras").get<BundleExtras>();
  out.model = ModelBundle::init(enc, extras, out.cfg.seed);
  bundle_from_checkpoint(out.model, ck);
  out.epochs_done = manifest.value("epoch", 0);
  out.opt.lr = out.cfg.lr;
  out.opt.weight_decay = out.cfg.weight_decay;
  auto params = out.model.params();
  out.opt.init(params);
  out.opt.step_count = manifest.value("adam_step_count", 0);
  for (size_t i = 0; i < out.opt.m.size(); ++i) {
    const Tensor& m = ck.find("adam.m." + std::to_string(i));
    const Tensor& v = ck.find("adam.v." + std::to_string(i));
    out.opt.m[i].assign(m.data().begin(), m.data().end());
    out.opt.v[i].assign(v.data().begin(), v.data().end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

struct BatchBuffers {
  Tensor behavior;             // [B, pose_dim, T_b]
  Tensor neural;               // [B, T_n, H, W]
  Tensor behavior_target;      // [B, T_b * pose_dim] raw, for regression
  std::vector<int> domains;
  std::vector<int> actions;
};

BatchBuffers assemble_batch(const SplitDataset& split, const NeighborIndex* index,
                            const AugmentConfig& aug, const std::vector<int64_t>& order,
                            int64_t first, int batch_size, uint64_t seed, int epoch, int step) {
  const MultiDomainDataset& world = *split.world;
  const int pose_dim = world.cfg.joints * 3;
  const int tb = split.sync.behavior_window, tn = split.sync.neural_window;
  const int64_t px = (int64_t)world.cfg.image_h * world.cfg.image_w;

  BatchBuffers out;
  std::vector<float> bx((size_t)batch_size * pose_dim * tb);
  std::vector<float> nx((size_t)batch_size * tn * px);
  std::vector<float> bt((size_t)batch_size * tb * pose_dim);
  out.domains.resize(batch_size);
  out.actions.resize(batch_size);

  for (int i = 0; i < batch_size; ++i) {
    const WindowRef& ref = split.train[order[first + i]];
    Rng rng = make_rng(seed, kStreamAugment, (uint64_t)epoch, (uint64_t)step, (uint64_t)i);
    AugmentedPair pair = augment_pair(split, index, ref, aug, rng);
    // behavior arrives [T_b, pose_dim]; the encoder wants [pose_dim, T_b]
    for (int t = 0; t < tb; ++t)
      for (int d = 0; d < pose_dim; ++d)
        bx[((size_t)i * pose_dim + d) * tb + t] = pair.behavior[(size_t)t * pose_dim + d];
    std::copy(pair.neural.begin(), pair.neural.end(), nx.begin() + (size_t)i * tn * px);
    copy_behavior_window(world, ref, bt.data() + (size_t)i * tb * pose_dim);
    out.domains[i] = ref.domain;
    out.actions[i] = ref.action;
  }
  out.behavior = Tensor::from_data({batch_size, pose_dim, tb}, std::move(bx));
  out.neural = Tensor::from_data({batch_size, (int64_t)tn, world.cfg.image_h, world.cfg.image_w},
                                 std::move(nx));
  out.behavior_target = Tensor::from_data({batch_size, (int64_t)tb * pose_dim}, std::move(bt));
  return out;
}

void dump_nan_batch(const TrainConfig& cfg, const BatchBuffers& batch, int epoch, int step) {
  std::string dir = cfg.metrics_path.empty() ? "nan_dump" : cfg.metrics_path + ".nan_dump";
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) return;
  save_nswt(dir + "/behavior.nswt", batch.behavior);
  save_nswt(dir + "/neural.nswt", batch.neural);
  nlohmann::json j{{"epoch", epoch}, {"step", step}, {"domains", batch.domains},
                   {"actions", batch.actions}, {"config", cfg}};
  std::ofstream os(dir + "/batch.json");
  os << j.dump(2) << "\n";
}

}  // namespace

TrainResult train(const TrainConfig& cfg_in, const MultiDomainDataset& world,
                  const std::string& resume_from) {
  TrainConfig cfg = cfg_in;
  // encoder input spec always follows the dataset and pairing
  cfg.encoder.joints = world.cfg.joints;
  cfg.encoder.image_h = world.cfg.image_h;
  cfg.encoder.image_w = world.cfg.image_w;
  cfg.encoder.behavior_frames = cfg.sync.behavior_window;
  cfg.encoder.neural_frames = cfg.sync.neural_window;
  cfg.validate();
  cfg.encoder.validate();

  const AugmentConfig aug = resolved_augment(cfg);
  const bool contrastive = cfg.method == "ours" || cfg.method == "simclr_no_swap" ||
                           cfg.method == "grl" || cfg.method == "mmd";
  const bool masked_nce = cfg.method == "grl" || cfg.method == "mmd";
  if ((aug.swap_behavior_enabled || aug.swap_neural_enabled) && world.cfg.n_domains < 2)
    throw ConfigError("train: swapping requires at least 2 domains");

  SplitDataset split = split_train_test(world, cfg.sync, cfg.split);
  if ((int64_t)split.train.size() < cfg.batch_size)
    throw ConfigError("train: fewer train windows than one batch");

  NeighborIndex index;
  const NeighborIndex* index_ptr = nullptr;
  if (aug.swap_behavior_enabled || aug.swap_neural_enabled) {
    index.build(split);
    index_ptr = &index;
  }

  BundleExtras extras;
  extras.n_domains = world.cfg.n_domains;
  extras.discriminators = cfg.method == "grl";
  extras.regression = cfg.method == "regression_conv";
  extras.supervised = cfg.method == "supervised";
  extras.n_actions = world.cfg.n_actions;

  TrainResult result;
  AdamState opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  int start_epoch = 0;
  if (!resume_from.empty()) {
    LoadedCheckpoint loaded = load_train_checkpoint(resume_from);
    result.model = std::move(loaded.model);
    opt = std::move(loaded.opt);
    start_epoch = loaded.epochs_done;
  } else {
    result.model = ModelBundle::init(cfg.encoder, extras, cfg.seed);
  }
  auto params = result.model.params();
  if (!opt.initialized()) opt.init(params);

  const int steps_per_epoch = (int)(split.train.size() / cfg.batch_size);
  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path, start_epoch == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot open metrics file " + cfg.metrics_path);
  }

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const float lr_now = cosine_schedule_lr(cfg.lr, epoch, cfg.epochs, cfg.warmup_epochs);
    std::vector<int64_t> order(split.train.size());
    std::iota(order.begin(), order.end(), 0);
    {
      Rng shuffle_rng = make_rng(cfg.seed, kStreamShuffle, (uint64_t)epoch);
      std::shuffle(order.begin(), order.end(), shuffle_rng);
    }

    for (int step = 0; step < steps_per_epoch; ++step) {
      BatchBuffers batch = assemble_batch(split, index_ptr, aug, order,
                                          (int64_t)step * cfg.batch_size, cfg.batch_size, cfg.seed,
                                          epoch, step);
      MetricsRow row;
      row.epoch = epoch;
      row.step = step;
      try {
        Tensor loss;
        if (contrastive) {
          auto hb = result.model.encode_behavior_batch(batch.behavior, true);
          auto hn = result.model.encode_neural_batch(batch.neural, true);
          ContrastiveBatch cb;
          cb.z_b = result.model.project_behavior(hb);
          cb.z_n = result.model.project_neural(hn);
          cb.domains = batch.domains;
          cb.temperature = cfg.temperature;
          auto terms = masked_nce ? info_nce_domain_masked(cb) : info_nce(cb);
          row.loss_b2n = terms.b2n.item();
          row.loss_n2b = terms.n2b.item();
          loss = terms.total;
          if (cfg.method == "grl" && epoch >= cfg.da_warmup_epochs) {
            auto da = add(grl_discriminator_loss(hb, batch.domains, *result.model.d_b, cfg.lambda_d,
                                                 world.cfg.n_domains),
                          grl_discriminator_loss(hn, batch.domains, *result.model.d_n, cfg.lambda_d,
                                                 world.cfg.n_domains));
            row.loss_da = da.item();
            loss = add(loss, da);
          } else if (cfg.method == "mmd" && epoch >= cfg.da_warmup_epochs) {
            auto pen_b = mmd_penalty(hb, batch.domains);
            auto pen_n = mmd_penalty(hn, batch.domains);
            Tensor pen;
            if (pen_b.defined() && pen_n.defined()) pen = add(pen_b, pen_n);
            else if (pen_b.defined()) pen = pen_b;
            else if (pen_n.defined()) pen = pen_n;
            if (pen.defined()) {
              auto weighted = scale(pen, cfg.lambda_mmd);
              row.loss_da = weighted.item();
              loss = add(loss, weighted);
            }
          }
        } else if (cfg.method == "regression_conv") {
          auto hn = result.model.encode_neural_batch(batch.neural, true);
          auto pred = result.model.regression_head->forward(hn);
          auto diff = sub(pred, batch.behavior_target);
          loss = mean_all(mul(diff, diff));
        } else {  // supervised
          auto hn = result.model.encode_neural_batch(batch.neural, true);
          auto logits = result.model.supervised_head->forward(hn);
          loss = scale(nll_loss(log_softmax(logits, 1), batch.actions),
                       1.f / (float)cfg.batch_size);
        }
        row.loss_total = loss.item();
        for (auto& p : params) p.zero_grad();
        backward(loss);
        adam_step(params, opt, lr_now);
      } catch (const NumericError& e) {
        dump_nan_batch(cfg, batch, epoch, step);
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + "; offending batch dumped");
      }
      result.log.push_back(row);
      if (metrics.is_open()) {
        metrics << metrics_to_jsonl({row});
        metrics.flush();
      }
    }
    result.epochs_run = epoch + 1;
    if (!cfg.checkpoint_path.empty())
      save_train_checkpoint(cfg.checkpoint_path, cfg, result.model, opt, epoch + 1);
  }
  return result;
}

}  // namespace neuroswap
