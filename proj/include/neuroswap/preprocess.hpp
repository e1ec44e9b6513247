#pragma once

// Neural pre-processing: variational optical-flow registration against a
// reference frame and dF/F normalization. Both ops are deterministic.
//
// Flow convention: w warps the moving image toward the reference, i.e. the
// registered image is I_t(x + w(x)). The energy is
//   E(w) = sum_x (I_t(x + w(x)) - I_r(x))^2 + lambda * sum_x ||grad w(x)||^2
// minimized by normalized-gradient descent over a coarse-to-fine pyramid
// (3 levels, 200 iterations per level) with a backtracking guard so the
// energy never increases within a level.

#include <cstdint>
#include <vector>

#include "neuroswap/errors.hpp"
#include "neuroswap/tensor.hpp"

namespace neuroswap {

struct FlowField {
  int h = 0;
  int w = 0;
  std::vector<float> data;  // [H, W, 2]: (dx, dy) per pixel
  int reference_frame = 0;
  double lambda_flow = 800.0;

  float dx(int y, int x) const { return data[(y * w + x) * 2]; }
  float dy(int y, int x) const { return data[(y * w + x) * 2 + 1]; }
  double max_abs() const {
    double m = 0;
    for (float v : data) m = std::max(m, (double)std::abs(v));
    return m;
  }
};

struct RegistrationOptions {
  double lambda_flow = 800.0;
  int pyramid_levels = 3;
  int iterations_per_level = 200;
  // initial step in pixels: 1e-3 * lambda_flow at the default weighting
  double step_scale = 1e-3;
};

struct RegistrationDiagnostics {
  // energies recorded after each accepted iteration, per pyramid level
  // (coarse to fine)
  std::vector<std::vector<double>> energy_trace;
};

// Registration energy of a given flow (shared by the solver and tests).
double registration_energy(const float* moving, const float* reference, int h, int w,
                           const FlowField& flow, double lambda_flow);

FlowField register_frame(const TensorT<float>& moving, const TensorT<float>& reference,
                         const RegistrationOptions& opts = {},
                         RegistrationDiagnostics* diag = nullptr);

// Bilinear warp I(x + w(x)); out-of-bounds samples clamp to the border.
TensorT<float> apply_flow(const TensorT<float>& image, const FlowField& flow);

// (F - F0)/F0 * 100 with F0 = per-pixel minimum of a centered moving average
// (shrinking at the boundaries); F0 floored at 1e-6.
TensorT<float> delta_f_over_f(const TensorT<float>& stack, int window = 15);

}  // namespace neuroswap
