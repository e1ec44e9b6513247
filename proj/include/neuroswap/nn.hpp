#pragma once

// Parameterized layers on top of the tensor ops: convolutions without bias
// (batch norm follows every conv), linear layers, batch-norm wrappers, and a
// named parameter registry used by the optimizer and checkpoints.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "neuroswap/rng.hpp"
#include "neuroswap/tensor.hpp"

namespace neuroswap {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, TensorT<T>>>;

// Named non-trainable buffers (batch-norm running stats), referenced in place.
template <typename T>
using NamedBuffers = std::vector<std::pair<std::string, std::vector<T>*>>;

template <typename T>
TensorT<T> he_init(Shape shape, int64_t fan_in, Rng& rng) {
  const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
  return TensorT<T>::randn(std::move(shape), rng, stddev, true);
}

template <typename T>
TensorT<T> xavier_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(uniform(rng, -bound, bound));
  return TensorT<T>::from_data(std::move(shape), std::move(data), true);
}

template <typename T>
struct LinearT {
  TensorT<T> w;  // [out, in]
  TensorT<T> b;  // [out]

  LinearT() = default;
  LinearT(int64_t in, int64_t out, Rng& rng)
      : w(he_init<T>({out, in}, in, rng)), b(TensorT<T>::zeros({out}, true)) {}

  TensorT<T> forward(const TensorT<T>& x) const { return add_rowvec(matmul_nt(x, w), b); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

template <typename T>
struct Conv1dLayerT {
  TensorT<T> w;  // [F, C, K]
  ConvSpec spec;

  Conv1dLayerT() = default;
  Conv1dLayerT(int64_t in_ch, int64_t out_ch, int64_t k, ConvSpec s, Rng& rng)
      : w(he_init<T>({out_ch, in_ch, k}, in_ch * k, rng)), spec(s) {}

  TensorT<T> forward(const TensorT<T>& x) const { return conv1d(x, w, spec); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".w", w);
  }
};

template <typename T>
struct Conv2dLayerT {
  TensorT<T> w;  // [F, C, KH, KW]
  ConvSpec spec;

  Conv2dLayerT() = default;
  Conv2dLayerT(int64_t in_ch, int64_t out_ch, int64_t k, ConvSpec s, Rng& rng)
      : w(he_init<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng)), spec(s) {}

  TensorT<T> forward(const TensorT<T>& x) const { return conv2d(x, w, spec); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".w", w);
  }
};

template <typename T>
struct BatchNormLayerT {
  TensorT<T> gamma;
  TensorT<T> beta;
  mutable BatchNormStateT<T> state;

  BatchNormLayerT() = default;
  explicit BatchNormLayerT(int64_t channels)
      : gamma(TensorT<T>::filled({channels}, T(1), true)),
        beta(TensorT<T>::zeros({channels}, true)),
        state(channels) {}

  TensorT<T> forward(const TensorT<T>& x, bool training) const {
    return batch_norm(x, gamma, beta, state, training);
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
  void collect_buffers(const std::string& prefix, NamedBuffers<T>& out) const {
    out.emplace_back(prefix + ".running_mean", &state.running_mean);
    out.emplace_back(prefix + ".running_var", &state.running_var);
  }
};

// Two-layer MLP with ReLU: in -> hidden -> out. Projection heads and domain
// discriminators share this shape.
template <typename T>
struct MlpHeadT {
  LinearT<T> fc1, fc2;

  MlpHeadT() = default;
  MlpHeadT(int64_t in, int64_t hidden, int64_t out, Rng& rng)
      : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

  TensorT<T> forward(const TensorT<T>& x) const { return fc2.forward(relu(fc1.forward(x))); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

}  // namespace neuroswap
