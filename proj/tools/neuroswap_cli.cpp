// neuroswap command line: dataset generation, training, evaluation,
// gradient checking, the augmentation ablation, and neural pre-processing.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "neuroswap/eval.hpp"
#include "neuroswap/gradsuite.hpp"
#include "neuroswap/io.hpp"
#include "neuroswap/parallel.hpp"
#include "neuroswap/preprocess.hpp"
#include "neuroswap/synthdata.hpp"
#include "neuroswap/train.hpp"

using namespace neuroswap;

namespace {

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  return nlohmann::json::parse(is);
}

int cmd_generate(const std::string& config_path, const std::string& out_dir, uint64_t seed,
                 bool seed_set) {
  WorldConfig cfg;
  uint64_t use_seed = 0;
  if (!config_path.empty()) {
    auto j = read_json_file(config_path);
    if (j.contains("config")) {
      cfg = j.at("config").get<WorldConfig>();
      use_seed = j.value("seed", 0ULL);
    } else {
      cfg = j.get<WorldConfig>();
      use_seed = j.value("seed", 0ULL);
    }
  }
  if (seed_set) use_seed = seed;
  auto world = generate_world(cfg, use_seed);
  save_dataset(world, out_dir);
  int64_t windows = (int64_t)synchronize(world).size();
  std::cout << "generated " << cfg.n_domains << " domains x " << cfg.n_trials << " trials ("
            << windows << " paired windows) under " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out_ckpt,
              const std::string& resume, const std::string& metrics) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = read_json_file(config_path).get<TrainConfig>();
  if (!out_ckpt.empty()) cfg.checkpoint_path = out_ckpt;
  if (!metrics.empty()) cfg.metrics_path = metrics;
  auto world = load_dataset(data_dir);
  auto result = train(cfg, world, resume);
  const auto& last = result.log.empty() ? MetricsRow{} : result.log.back();
  std::cout << "trained method=" << cfg.method << " epochs=" << result.epochs_run
            << " final_loss=" << last.loss_total << "\n";
  if (!cfg.checkpoint_path.empty()) std::cout << "checkpoint: " << cfg.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& task,
             double fraction, const std::string& out_json, const std::string& out_csv,
             bool shuffle_labels, uint64_t seed) {
  auto loaded = load_train_checkpoint(ckpt);
  auto world = load_dataset(data_dir);
  auto split = split_train_test(world, loaded.cfg.sync, loaded.cfg.split);
  auto features = extract_feature_table(loaded.model, split);

  BenchmarkOptions opts;
  opts.fraction = fraction;
  opts.seed = seed;
  opts.shuffle_labels = shuffle_labels;

  std::vector<BenchmarkReport> reports;
  if (task == "single" || task == "all")
    reports.push_back(benchmark_single_subject(features, split, opts));
  if (task == "across" || task == "all")
    reports.push_back(benchmark_across_subject(features, split, opts));
  if (task == "identity" || task == "all")
    reports.push_back(benchmark_identity(features, split, opts));
  if (reports.empty()) {
    std::cerr << "unknown task '" << task << "' (use single|across|identity|all)\n";
    return 2;
  }

  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : reports) {
    out.push_back(r.to_json());
    std::cout << r.task << ": accuracy=" << r.mean_accuracy << " (chance " << r.chance << ")\n";
  }
  if (!out_json.empty()) {
    std::ofstream os(out_json);
    os << out.dump(2) << "\n";
  }
  if (!out_csv.empty()) {
    std::ofstream os(out_csv);
    os << BenchmarkReport::csv_header() << "\n";
    for (const auto& r : reports) os << r.csv_row(loaded.cfg.method) << "\n";
  }
  return 0;
}

int cmd_gradcheck(const std::string& op) {
  auto results = run_gradient_suite(op);
  if (results.empty()) {
    std::cerr << "no such op '" << op << "'\n";
    return 2;
  }
  bool all_pass = true;
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  max_rel_err=" << r.max_rel_err
              << "  tol=" << r.tolerance << "\n";
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

int cmd_ablate(const std::string& data_dir, int seeds, const std::string& out_csv,
               const std::string& config_path) {
  auto world = load_dataset(data_dir);
  TrainConfig base;
  if (!config_path.empty()) base = read_json_file(config_path).get<TrainConfig>();
  std::vector<uint64_t> seed_list;
  for (int i = 0; i < seeds; ++i) seed_list.push_back(i);
  auto result = run_ablation(world, base, seed_list);
  std::cout << result.to_csv();
  std::cout << "\nrung-over-rung mean deltas:\n";
  for (const auto& d : result.deltas)
    std::cout << "  +" << d.method << ": single " << (d.d_single >= 0 ? "+" : "") << d.d_single * 100
              << ", across " << (d.d_across >= 0 ? "+" : "") << d.d_across * 100 << ", identity "
              << (d.d_identity >= 0 ? "+" : "") << d.d_identity * 100 << " points\n";
  if (!out_csv.empty()) {
    std::ofstream os(out_csv);
    os << result.to_csv();
  }
  return 0;
}

int cmd_preprocess(const std::string& in_path, const std::string& out_path, int ref_frame,
                   bool do_register, bool do_dff, int dff_window, double lambda_flow) {
  auto stack = load_nswt<float>(in_path);
  if (stack.ndim() != 3) throw IoError("preprocess expects a [T,H,W] stack");
  const int64_t T = stack.dim(0), H = stack.dim(1), W = stack.dim(2);
  if (ref_frame < 0 || ref_frame >= T) throw ConfigError("reference frame out of range");

  if (do_register) {
    std::vector<float> ref_buf(stack.data().begin() + ref_frame * H * W,
                               stack.data().begin() + (ref_frame + 1) * H * W);
    auto reference = Tensor::from_data({H, W}, std::move(ref_buf));
    std::vector<float> out((size_t)T * H * W);
    RegistrationOptions opts;
    opts.lambda_flow = lambda_flow;
    parallel_for(T, [&](int64_t t) {
      std::vector<float> frame_buf(stack.data().begin() + t * H * W,
                                   stack.data().begin() + (t + 1) * H * W);
      auto frame = Tensor::from_data({H, W}, std::move(frame_buf));
      auto flow = register_frame(frame, reference, opts);
      auto warped = apply_flow(frame, flow);
      std::copy(warped.data().begin(), warped.data().end(), out.begin() + t * H * W);
    });
    stack = Tensor::from_data({T, H, W}, std::move(out));
    std::cout << "registered " << T << " frames against frame " << ref_frame << "\n";
  }
  if (do_dff) {
    stack = delta_f_over_f(stack, dff_window);
    std::cout << "applied dF/F with a " << dff_window << "-frame moving-average baseline\n";
  }
  save_nswt(out_path, stack);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neuroswap: multimodal contrastive action representations at desk scale"};
  app.require_subcommand(1);

  // generate
  std::string gen_config, gen_out = "dataset";
  uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("generate", "generate a synthetic multi-animal dataset");
  gen->add_option("--config", gen_config, "world config JSON (defaults when omitted)");
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "world seed (overrides config)");

  // train
  std::string tr_config, tr_data, tr_out, tr_resume, tr_metrics;
  auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
  tr->add_option("--config", tr_config, "train config JSON");
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "checkpoint path (written every epoch)");
  tr->add_option("--resume", tr_resume, "resume from this checkpoint");
  tr->add_option("--metrics", tr_metrics, "JSON-lines metrics path");

  // eval
  std::string ev_ckpt, ev_data, ev_task = "all", ev_json, ev_csv;
  double ev_fraction = 1.0;
  bool ev_shuffle = false;
  uint64_t ev_seed = 0;
  auto* ev = app.add_subcommand("eval", "linear-probe benchmarks from a checkpoint");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--task", ev_task, "single|across|identity|all");
  ev->add_option("--fraction", ev_fraction, "label fraction (0.5 or 1.0)");
  ev->add_option("--out", ev_json, "write reports as JSON");
  ev->add_option("--csv", ev_csv, "write reports as CSV");
  ev->add_option("--seed", ev_seed, "probe seed");
  ev->add_flag("--shuffle-labels", ev_shuffle, "chance-level control");

  // gradcheck
  std::string gc_op;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite (f64)");
  gc->add_option("--op", gc_op, "check a single op by name");

  // ablate
  std::string ab_data, ab_csv, ab_config;
  int ab_seeds = 3;
  auto* ab = app.add_subcommand("ablate", "cumulative augmentation ablation ladder");
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--seeds", ab_seeds, "number of seeds (>= 3)");
  ab->add_option("--out", ab_csv, "write per-run CSV");
  ab->add_option("--config", ab_config, "base train config JSON");

  // preprocess
  std::string pp_in, pp_out;
  int pp_ref = 0, pp_window = 15;
  bool pp_register = false, pp_dff = false;
  double pp_lambda = 800.0;
  auto* pp = app.add_subcommand("preprocess", "optical-flow registration and dF/F");
  pp->add_option("--in", pp_in, "input NSWT stack [T,H,W]")->required();
  pp->add_option("--out", pp_out, "output NSWT stack")->required();
  pp->add_option("--ref-frame", pp_ref, "reference frame index");
  pp->add_flag("--register", pp_register, "motion-register against the reference frame");
  pp->add_flag("--dff", pp_dff, "apply dF/F normalization");
  pp->add_option("--dff-window", pp_window, "moving-average window");
  pp->add_option("--lambda", pp_lambda, "flow smoothness weight");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(gen_config, gen_out, gen_seed, gen_seed_opt->count() > 0);
    if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_resume, tr_metrics);
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_task, ev_fraction, ev_json, ev_csv, ev_shuffle, ev_seed);
    if (gc->parsed()) return cmd_gradcheck(gc_op);
    if (ab->parsed()) return cmd_ablate(ab_data, ab_seeds, ab_csv, ab_config);
    if (pp->parsed())
      return cmd_preprocess(pp_in, pp_out, pp_ref, pp_register, pp_dff, pp_window, pp_lambda);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
