#pragma once

// Training objectives: symmetric InfoNCE, the domain-masked variant used with
// domain adaptation, the gradient-reversal discriminator loss, and a squared
// MMD estimate. All are pure functions of their inputs and differentiable
// through the tensor graph.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "neuroswap/errors.hpp"
#include "neuroswap/log.hpp"
#include "neuroswap/nn.hpp"
#include "neuroswap/tensor.hpp"

namespace neuroswap {

template <typename T>
struct ContrastiveBatchT {
  TensorT<T> z_b;  // [N, d]
  TensorT<T> z_n;  // [N, d]
  std::vector<int> domains;  // per-row domain ids (required by the masked loss)
  T temperature = T(0.1);
};

using ContrastiveBatch = ContrastiveBatchT<float>;

template <typename T>
struct InfoNceTerms {
  TensorT<T> total;  // b2n + n2b, sum reduction
  TensorT<T> b2n;    // rows: each z_b^i against all z_n^k
  TensorT<T> n2b;    // columns: each z_n^i against all z_b^k
};

template <typename T>
void validate_contrastive(const ContrastiveBatchT<T>& batch, const char* op) {
  if (batch.temperature <= T(0)) throw ConfigError(std::string(op) + ": temperature must be positive");
  if (batch.z_b.ndim() != 2 || batch.z_n.ndim() != 2 || batch.z_b.shape() != batch.z_n.shape())
    throw DimensionError(std::string(op) + ": z_b " + shape_str(batch.z_b.shape()) + " vs z_n " +
                         shape_str(batch.z_n.shape()));
}

// L^{b->n} = -sum_i log softmax_row(S/tau)[i,i], L^{n->b} column-wise;
// S is the cosine similarity matrix. Returned losses are sums over the batch
// (matching the defining equations); divide by N for the per-sample value.
template <typename T>
InfoNceTerms<T> info_nce(const ContrastiveBatchT<T>& batch) {
  validate_contrastive(batch, "info_nce");
  auto logits = scale(cosine_similarity_matrix(batch.z_b, batch.z_n), T(1) / batch.temperature);
  InfoNceTerms<T> out;
  out.b2n = scale(sum_diag(log_softmax(logits, 1)), T(-1));
  out.n2b = scale(sum_diag(log_softmax(logits, 0)), T(-1));
  out.total = add(out.b2n, out.n2b);
  return out;
}

// Same loss with the denominator restricted to candidates from the query's
// own domain: sum_k 1[dom(i)=dom(k)] exp(<z_b^i, z_n^k>/tau). The positive
// pair is always part of its own denominator. A domain contributing a single
// row makes that row's term collapse to zero; this is allowed but warned.
template <typename T>
InfoNceTerms<T> info_nce_domain_masked(const ContrastiveBatchT<T>& batch) {
  validate_contrastive(batch, "info_nce_domain_masked");
  const int64_t n = batch.z_b.dim(0);
  if (static_cast<int64_t>(batch.domains.size()) != n)
    throw DimensionError("info_nce_domain_masked: every row needs a domain id");

  std::vector<int> count_per_domain;
  for (int d : batch.domains) {
    if (d < 0) throw ConfigError("info_nce_domain_masked: negative domain id");
    if (d >= static_cast<int>(count_per_domain.size())) count_per_domain.resize(d + 1, 0);
    count_per_domain[d]++;
  }
  for (size_t d = 0; d < count_per_domain.size(); ++d)
    if (count_per_domain[d] == 1)
      log_warning("domain " + std::to_string(d) + " has a single sample in batch; its term degenerates to 0");

  std::vector<uint8_t> mask(n * n, 0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < n; ++k) mask[i * n + k] = batch.domains[i] == batch.domains[k];

  auto logits = scale(cosine_similarity_matrix(batch.z_b, batch.z_n), T(1) / batch.temperature);
  InfoNceTerms<T> out;
  out.b2n = scale(sum_diag(masked_log_softmax(logits, mask, 1)), T(-1));
  out.n2b = scale(sum_diag(masked_log_softmax(logits, mask, 0)), T(-1));
  out.total = add(out.b2n, out.n2b);
  return out;
}

// Discriminator cross-entropy L_D = sum_i -log D_m(h_i)[dom_i], with a
// gradient reversal node between the representations and the discriminator:
// the encoder-side gradient equals -lambda_d times the no-reversal gradient,
// while the discriminator's own weights receive the plain minimizing
// gradient.
template <typename T>
TensorT<T> grl_discriminator_loss(const TensorT<T>& h, const std::vector<int>& domains,
                                  const MlpHeadT<T>& discriminator, T lambda_d, int n_domains) {
  if (n_domains < 2) throw ConfigError("grl_discriminator_loss: need at least 2 domains");
  if (h.ndim() != 2) throw DimensionError("grl_discriminator_loss: expected [N,d] representations");
  if (static_cast<int64_t>(domains.size()) != h.dim(0))
    throw DimensionError("grl_discriminator_loss: domain label count mismatch");
  if (discriminator.fc2.w.dim(0) != n_domains)
    throw ConfigError("grl_discriminator_loss: discriminator output size != n_domains");
  auto logits = discriminator.forward(gradient_reversal(h, lambda_d));
  return nll_loss(log_softmax(logits, 1), domains);
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy (squared, unbiased), RBF kernel.
// ---------------------------------------------------------------------------

// Median pairwise Euclidean distance over the pooled rows of a and b,
// floored at 1e-6. Computed on values only: the bandwidth carries no
// gradient.
template <typename T>
double mmd_median_bandwidth(const TensorT<T>& a, const TensorT<T>& b) {
  const int64_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
  std::vector<const T*> rows;
  rows.reserve(m + n);
  for (int64_t i = 0; i < m; ++i) rows.push_back(a.data().data() + i * d);
  for (int64_t i = 0; i < n; ++i) rows.push_back(b.data().data() + i * d);
  std::vector<double> dists;
  dists.reserve(rows.size() * (rows.size() - 1) / 2);
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0;
      for (int64_t k = 0; k < d; ++k) {
        double diff = static_cast<double>(rows[i][k]) - rows[j][k];
        s += diff * diff;
      }
      dists.push_back(std::sqrt(s));
    }
  if (dists.empty()) return 1e-6;
  std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
  return std::max(dists[dists.size() / 2], 1e-6);
}

// Unbiased squared-MMD estimate with k(x,y) = exp(-||x-y||^2 / (2 sigma^2)).
// bandwidth <= 0 selects the median heuristic over the pooled set. For equal
// sample counts this is the paired U-statistic (cross terms exclude i == j),
// which vanishes identically on equal samples; otherwise the cross term
// averages over all pairs. The result is clamped at zero.
template <typename T>
TensorT<T> mmd(const TensorT<T>& h_a, const TensorT<T>& h_b, double bandwidth = 0.0) {
  if (h_a.ndim() != 2 || h_b.ndim() != 2 || h_a.dim(1) != h_b.dim(1))
    throw DimensionError("mmd: " + shape_str(h_a.shape()) + " vs " + shape_str(h_b.shape()));
  const int64_t m = h_a.dim(0), n = h_b.dim(0);
  if (m < 2 || n < 2) throw ConfigError("mmd: need at least 2 samples per side");
  const double sigma = bandwidth > 0.0 ? bandwidth : mmd_median_bandwidth(h_a, h_b);
  const T coef = static_cast<T>(-1.0 / (2.0 * sigma * sigma));

  auto k_aa = exp_op(scale(pairwise_sqdist(h_a, h_a), coef));
  auto k_bb = exp_op(scale(pairwise_sqdist(h_b, h_b), coef));
  auto k_ab = exp_op(scale(pairwise_sqdist(h_a, h_b), coef));

  auto offdiag_mean = [](const TensorT<T>& k, int64_t rows) {
    return scale(sub(sum_all(k), sum_diag(k)), T(1) / static_cast<T>(rows * (rows - 1)));
  };

  TensorT<T> estimate;
  if (m == n) {
    auto cross = scale(sub(sum_all(k_ab), sum_diag(k_ab)), T(2) / static_cast<T>(m * (m - 1)));
    estimate = sub(add(offdiag_mean(k_aa, m), offdiag_mean(k_bb, n)), cross);
  } else {
    auto cross = scale(sum_all(k_ab), T(2) / static_cast<T>(m * n));
    estimate = sub(add(offdiag_mean(k_aa, m), offdiag_mean(k_bb, n)), cross);
  }
  return relu(estimate);
}

// Multi-domain MMD penalty: mean of pairwise estimates over all domain pairs
// with at least two samples each in the batch. Returns an undefined tensor
// when no eligible pair exists.
template <typename T>
TensorT<T> mmd_penalty(const TensorT<T>& h, const std::vector<int>& domains, double bandwidth = 0.0) {
  if (h.ndim() != 2 || static_cast<int64_t>(domains.size()) != h.dim(0))
    throw DimensionError("mmd_penalty: domain label count mismatch");
  int max_dom = 0;
  for (int d : domains) max_dom = std::max(max_dom, d);
  std::vector<std::vector<int64_t>> groups(max_dom + 1);
  for (size_t i = 0; i < domains.size(); ++i) groups[domains[i]].push_back(static_cast<int64_t>(i));

  TensorT<T> acc;
  int pairs = 0;
  for (size_t a = 0; a < groups.size(); ++a) {
    if (groups[a].size() < 2) continue;
    for (size_t b = a + 1; b < groups.size(); ++b) {
      if (groups[b].size() < 2) continue;
      auto est = mmd(gather_rows(h, groups[a]), gather_rows(h, groups[b]), bandwidth);
      acc = acc.defined() ? add(acc, est) : est;
      ++pairs;
    }
  }
  if (!acc.defined()) return acc;
  return scale(acc, T(1) / static_cast<T>(pairs));
}

}  // namespace neuroswap
