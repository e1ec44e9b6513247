#pragma once

// The finite-difference gradient suite: every differentiable op plus each
// full objective checked in f64 against central differences. Shared by the
// `gradcheck` CLI subcommand and the acceptance tests.

#include <functional>
#include <string>
#include <vector>

#include "neuroswap/encoders.hpp"
#include "neuroswap/gradcheck.hpp"
#include "neuroswap/objectives.hpp"

namespace neuroswap {

struct GradSuiteEntry {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass = false;
};

namespace gradsuite_detail {

inline Tensor64 rand_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = uniform(rng, lo, hi);
  return Tensor64::from_data(std::move(shape), std::move(data), true);
}

inline EncoderConfig tiny_encoder_config() {
  EncoderConfig cfg;
  cfg.behavior_frames = 4;
  cfg.joints = 2;
  cfg.neural_frames = 4;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.embed_dim = 8;
  cfg.proj_dim = 8;
  cfg.attention_dim = 4;
  cfg.behavior_channels = {6, 8};
  cfg.frame_embed_dim = 8;
  cfg.temporal_channels = {6, 8};
  return cfg;
}

}  // namespace gradsuite_detail

// Runs the whole suite (or a single op when `only` is non-empty).
inline std::vector<GradSuiteEntry> run_gradient_suite(const std::string& only = "") {
  using namespace gradsuite_detail;
  std::vector<GradSuiteEntry> results;

  auto run = [&](const std::string& name, double tol, std::vector<Tensor64> inputs,
                 const std::function<Tensor64()>& loss) {
    if (!only.empty() && only != name) return;
    auto res = finite_difference_check(inputs, loss);
    results.push_back({name, res.max_rel_err, tol, res.max_rel_err <= tol});
  };

  const double per_op = 1e-5;
  const double end_to_end = 1e-4;
  Rng rng = make_rng(20240817);

  {
    auto a = rand_leaf({3, 4}, rng), b = rand_leaf({4, 2}, rng);
    run("matmul", per_op, {a, b}, [=] { return sum_all(tanh_op(matmul(a, b))); });
  }
  {
    auto a = rand_leaf({3, 5}, rng), b = rand_leaf({4, 5}, rng);
    run("matmul_nt", per_op, {a, b}, [=] { return sum_all(tanh_op(matmul_nt(a, b))); });
  }
  {
    auto x = rand_leaf({2, 3, 9}, rng), w = rand_leaf({4, 3, 3}, rng, -0.5, 0.5);
    run("conv1d", per_op, {x, w}, [=] { return sum_all(tanh_op(conv1d(x, w, {2, 1}))); });
  }
  {
    auto x = rand_leaf({2, 2, 6, 6}, rng), w = rand_leaf({3, 2, 3, 3}, rng, -0.5, 0.5);
    run("conv2d", per_op, {x, w}, [=] { return sum_all(tanh_op(conv2d(x, w, {2, 1}))); });
  }
  {
    std::vector<double> vals(2 * 2 * 6);
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = std::sin(2.9 * (double)i) * 2.0 + 0.05 * i;
    auto x = Tensor64::from_data({2, 2, 6}, vals, true);
    run("pool_max", per_op, {x}, [=] { return sum_all(tanh_op(maxpool1d(x, 2, 2))); });
  }
  {
    auto x = rand_leaf({12}, rng);
    for (auto& v : x.data_mut()) v += v >= 0 ? 0.2 : -0.2;  // stay off the relu kink
    run("relu", per_op, {x}, [=] { return sum_all(mul(relu(x), relu(x))); });
    run("tanh", per_op, {x}, [=] { return sum_all(tanh_op(x)); });
    run("exp", per_op, {x}, [=] { return sum_all(exp_op(x)); });
    auto xp = rand_leaf({12}, rng, 0.5, 2.5);
    run("log", per_op, {xp}, [=] { return sum_all(log_op(xp)); });
    auto y = rand_leaf({12}, rng);
    run("add", per_op, {x, y}, [=] { return sum_all(tanh_op(add(x, y))); });
    run("mul", per_op, {x, y}, [=] { return sum_all(mul(x, y)); });
    run("scale", per_op, {x}, [=] { return sum_all(scale(x, 2.7)); });
  }
  {
    auto x = rand_leaf({4, 5}, rng, -2, 2);
    auto probe = rand_leaf({4, 5}, rng);
    probe.set_requires_grad(false);
    run("softmax", per_op, {x}, [=] { return sum_all(mul(softmax(x, 1), probe)); });
    run("log_softmax", per_op, {x}, [=] { return sum_all(mul(log_softmax(x, 1), probe)); });
  }
  {
    auto x = rand_leaf({5, 3, 2}, rng);
    auto gamma = rand_leaf({3}, rng, 0.5, 1.5);
    auto beta = rand_leaf({3}, rng);
    auto probe = rand_leaf({5, 3, 2}, rng);
    probe.set_requires_grad(false);
    run("batch_norm", per_op, {x, gamma, beta}, [=] {
      BatchNormStateT<double> st(3);
      return sum_all(mul(batch_norm(x, gamma, beta, st, true), probe));
    });
  }
  {
    auto a = rand_leaf({3, 4}, rng), b = rand_leaf({3, 4}, rng);
    auto probe = rand_leaf({3, 3}, rng);
    probe.set_requires_grad(false);
    run("cosine_similarity_matrix", per_op, {a, b},
        [=] { return sum_all(mul(cosine_similarity_matrix(a, b), probe)); });
  }
  {
    auto s = rand_leaf({2, 3, 4}, rng), a = rand_leaf({2, 3}, rng);
    run("attention_combine", per_op, {s, a}, [=] { return sum_all(tanh_op(attention_combine(s, a))); });
  }
  {
    Rng arng = make_rng(7);
    AttentionPoolT<double> attn(4, 3, true, arng);
    auto s = rand_leaf({2, 5, 4}, rng);
    run("attention_pool", per_op, {s}, [&attn, s] { return sum_all(tanh_op(attn.forward(s))); });
  }

  // objectives
  {
    auto zb = rand_leaf({5, 6}, rng), zn = rand_leaf({5, 6}, rng);
    run("info_nce", end_to_end, {zb, zn}, [=] {
      ContrastiveBatchT<double> batch{zb, zn, {}, 0.1};
      return info_nce(batch).total;
    });
    run("info_nce_domain_masked", end_to_end, {zb, zn}, [=] {
      ContrastiveBatchT<double> batch{zb, zn, {0, 1, 0, 1, 0}, 0.1};
      return info_nce_domain_masked(batch).total;
    });
  }
  {
    Rng drng = make_rng(9);
    auto disc = std::make_shared<MlpHeadT<double>>(6, 6, 3, drng);
    auto h = rand_leaf({4, 6}, rng);
    std::vector<int> domains{0, 2, 1, 0};
    // FD differentiates the unreversed discriminator path; the analytic
    // encoder-side gradient through the GRL node must equal -lambda_d times it
    run("grl_path", end_to_end, {h}, [=] {
      return nll_loss(log_softmax(disc->forward(h), 1), domains);
    });
    if (only.empty() || only == "grl_reversal") {
      h.zero_grad();
      backward(grl_discriminator_loss(h, domains, *disc, 10.0, 3));
      std::vector<double> reversed(h.grad().begin(), h.grad().end());
      h.zero_grad();
      backward(nll_loss(log_softmax(disc->forward(h), 1), domains));
      double worst = 0;
      for (size_t i = 0; i < reversed.size(); ++i) {
        const double expect = -10.0 * h.grad()[i];
        worst = std::max(worst, std::abs(reversed[i] - expect) / std::max(1.0, std::abs(expect)));
      }
      results.push_back({"grl_reversal", worst, end_to_end, worst <= end_to_end});
    }
  }
  {
    auto a = rand_leaf({5, 4}, rng);
    auto b = rand_leaf({6, 4}, rng, 1.5, 3.5);  // separated clouds: estimate > 0
    run("mmd", end_to_end, {a, b}, [=] { return mmd(a, b, 2.0); });
  }

  // end-to-end: tiny encoders + projections + InfoNCE
  {
    if (only.empty() || only == "encoder_composite") {
      EncoderConfig cfg = tiny_encoder_config();
      auto model = ModelBundleT<double>::init(cfg, {}, 99);
      Rng drng = make_rng(17);
      const int64_t B = 3;
      auto xb = rand_leaf({B, cfg.behavior_dim(), cfg.behavior_frames}, drng);
      auto xn = rand_leaf({B, cfg.neural_frames, cfg.image_h, cfg.image_w}, drng, 0.0, 1.0);
      std::vector<Tensor64> inputs{xb, xn};
      auto loss = [&] {
        ContrastiveBatchT<double> batch;
        batch.z_b = model.project_behavior(model.encode_behavior_batch(xb, true));
        batch.z_n = model.project_neural(model.encode_neural_batch(xn, true));
        batch.temperature = 0.1;
        return info_nce(batch).total;
      };
      auto res = finite_difference_check(inputs, loss);
      results.push_back({"encoder_composite", res.max_rel_err, end_to_end, res.max_rel_err <= end_to_end});
    }
  }
  return results;
}

}  // namespace neuroswap
