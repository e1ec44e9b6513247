#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "neuroswap/errors.hpp"
#include "neuroswap/tensor.hpp"

namespace neuroswap {

// Adam with decoupled weight decay: p <- p - lr*wd*p is applied before the
// moment update, so the decay never enters the moment estimates.
template <typename T>
struct AdamStateT {
  T lr = T(1e-4);
  T weight_decay = T(1e-5);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  int64_t step_count = 0;
  std::vector<std::vector<T>> m;  // first moments, 1:1 with params
  std::vector<std::vector<T>> v;  // second moments

  void init(const std::vector<TensorT<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
    step_count = 0;
  }
  bool initialized() const { return !m.empty(); }
};

using AdamState = AdamStateT<float>;

// One optimizer step over `params` using the gradients accumulated in their
// grad buffers. `lr_now` is the scheduled learning rate for this step
// (defaults to the base lr when negative).
template <typename T>
void adam_step(std::vector<TensorT<T>>& params, AdamStateT<T>& state, T lr_now = T(-1)) {
  if (!state.initialized()) state.init(params);
  if (state.m.size() != params.size())
    throw ContractError("adam_step: state tracks " + std::to_string(state.m.size()) + " params, got " +
                        std::to_string(params.size()));
  if (lr_now < T(0)) lr_now = state.lr;
  state.step_count += 1;
  const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step_count));
  const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step_count));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (state.m[pi].size() != static_cast<size_t>(p.numel()))
      throw ContractError("adam_step: moment/param shape mismatch at index " + std::to_string(pi));
    if (p.grad().empty()) continue;  // never touched by backward
    auto pdata = p.data_mut();
    auto g = p.grad();
    T* mm = state.m[pi].data();
    T* vv = state.v[pi].data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      pdata[i] -= lr_now * state.weight_decay * pdata[i];
      mm[i] = state.beta1 * mm[i] + (T(1) - state.beta1) * g[i];
      vv[i] = state.beta2 * vv[i] + (T(1) - state.beta2) * g[i] * g[i];
      const T mhat = mm[i] / bc1;
      const T vhat = vv[i] / bc2;
      pdata[i] -= lr_now * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// Cosine decay with linear warm-up, evaluated per epoch.
template <typename T>
T cosine_schedule_lr(T base_lr, int epoch, int total_epochs, int warmup_epochs) {
  if (warmup_epochs >= total_epochs) throw ConfigError("warm-up must be shorter than training");
  if (epoch < warmup_epochs) return base_lr * static_cast<T>(epoch + 1) / static_cast<T>(warmup_epochs);
  const double progress =
      static_cast<double>(epoch - warmup_epochs) / std::max(1, total_epochs - warmup_epochs);
  return static_cast<T>(base_lr * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846)));
}

}  // namespace neuroswap
