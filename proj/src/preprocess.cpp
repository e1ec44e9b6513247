#include "neuroswap/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace neuroswap {

namespace {

inline float sample_bilinear(const float* img, int h, int w, double x, double y) {
  x = std::clamp(x, 0.0, (double)(w - 1));
  y = std::clamp(y, 0.0, (double)(h - 1));
  const int x0 = (int)std::floor(x), y0 = (int)std::floor(y);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  const double v00 = img[y0 * w + x0], v01 = img[y0 * w + x1];
  const double v10 = img[y1 * w + x0], v11 = img[y1 * w + x1];
  return (float)((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11));
}

void box_downsample(const float* src, int h, int w, std::vector<float>& dst, int& oh, int& ow) {
  oh = h / 2;
  ow = w / 2;
  dst.assign((size_t)oh * ow, 0.f);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      dst[y * ow + x] = 0.25f * (src[(2 * y) * w + 2 * x] + src[(2 * y) * w + 2 * x + 1] +
                                 src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1]);
}

// central differences with clamped borders
void image_gradients(const float* img, int h, int w, std::vector<float>& gx, std::vector<float>& gy) {
  gx.assign((size_t)h * w, 0.f);
  gy.assign((size_t)h * w, 0.f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
      const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
      gx[y * w + x] = 0.5f * (img[y * w + xp] - img[y * w + xm]);
      gy[y * w + x] = 0.5f * (img[yp * w + x] - img[ym * w + x]);
    }
}

double flow_energy(const float* moving, const float* reference, int h, int w,
                   const std::vector<double>& flow, double lambda) {
  double data_term = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double wx = flow[(y * w + x) * 2], wy = flow[(y * w + x) * 2 + 1];
      const double r = (double)sample_bilinear(moving, h, w, x + wx, y + wy) - reference[y * w + x];
      data_term += r * r;
    }
  double smooth = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 2; ++c) {
        const double v = flow[(y * w + x) * 2 + c];
        if (x + 1 < w) {
          const double d = flow[(y * w + x + 1) * 2 + c] - v;
          smooth += d * d;
        }
        if (y + 1 < h) {
          const double d = flow[((y + 1) * w + x) * 2 + c] - v;
          smooth += d * d;
        }
      }
  return data_term + lambda * smooth;
}

// Gradient of the energy plus a diagonal (Gauss-Newton/Jacobi) curvature
// estimate per component; descending along grad/curvature keeps the step
// well-scaled across the data and the lambda-weighted smoothness terms.
void flow_gradient(const float* moving, const float* reference, int h, int w,
                   const std::vector<double>& flow, double lambda, const std::vector<float>& gx,
                   const std::vector<float>& gy, std::vector<double>& grad,
                   std::vector<double>& curvature) {
  grad.assign(flow.size(), 0.0);
  curvature.assign(flow.size(), 1e-8);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double wx = flow[(y * w + x) * 2], wy = flow[(y * w + x) * 2 + 1];
      const double r = (double)sample_bilinear(moving, h, w, x + wx, y + wy) - reference[y * w + x];
      const double ix = sample_bilinear(gx.data(), h, w, x + wx, y + wy);
      const double iy = sample_bilinear(gy.data(), h, w, x + wx, y + wy);
      grad[(y * w + x) * 2] += 2.0 * r * ix;
      grad[(y * w + x) * 2 + 1] += 2.0 * r * iy;
      curvature[(y * w + x) * 2] += 2.0 * ix * ix;
      curvature[(y * w + x) * 2 + 1] += 2.0 * iy * iy;
    }
  // smoothness: d/dv sum of squared forward differences
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int degree = (x + 1 < w) + (x > 0) + (y + 1 < h) + (y > 0);
      for (int c = 0; c < 2; ++c) {
        const double v = flow[(y * w + x) * 2 + c];
        double g = 0;
        if (x + 1 < w) g -= 2.0 * (flow[(y * w + x + 1) * 2 + c] - v);
        if (x > 0) g += 2.0 * (v - flow[(y * w + x - 1) * 2 + c]);
        if (y + 1 < h) g -= 2.0 * (flow[((y + 1) * w + x) * 2 + c] - v);
        if (y > 0) g += 2.0 * (v - flow[((y - 1) * w + x) * 2 + c]);
        grad[(y * w + x) * 2 + c] += lambda * g;
        curvature[(y * w + x) * 2 + c] += 2.0 * lambda * degree;
      }
    }
}

// bilinear 2x upsample of a flow field, values scaled by 2
std::vector<double> upsample_flow(const std::vector<double>& flow, int h, int w, int oh, int ow) {
  std::vector<double> out((size_t)oh * ow * 2, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double sx = std::clamp((x + 0.5) / 2.0 - 0.5, 0.0, (double)(w - 1));
      const double sy = std::clamp((y + 0.5) / 2.0 - 0.5, 0.0, (double)(h - 1));
      const int x0 = (int)std::floor(sx), y0 = (int)std::floor(sy);
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < 2; ++c) {
        const double v = (1 - fy) * ((1 - fx) * flow[(y0 * w + x0) * 2 + c] +
                                     fx * flow[(y0 * w + x1) * 2 + c]) +
                         fy * ((1 - fx) * flow[(y1 * w + x0) * 2 + c] +
                               fx * flow[(y1 * w + x1) * 2 + c]);
        out[(y * ow + x) * 2 + c] = 2.0 * v;
      }
    }
  return out;
}

}  // namespace

double registration_energy(const float* moving, const float* reference, int h, int w,
                           const FlowField& flow, double lambda_flow) {
  std::vector<double> f(flow.data.begin(), flow.data.end());
  return flow_energy(moving, reference, h, w, f, lambda_flow);
}

FlowField register_frame(const TensorT<float>& moving, const TensorT<float>& reference,
                         const RegistrationOptions& opts, RegistrationDiagnostics* diag) {
  if (moving.ndim() != 2 || reference.ndim() != 2 || moving.shape() != reference.shape())
    throw DimensionError("register_frame: shapes " + shape_str(moving.shape()) + " vs " +
                         shape_str(reference.shape()));
  const int H = (int)moving.dim(0), W = (int)moving.dim(1);

  // build pyramids, coarse last
  std::vector<std::vector<float>> mov_pyr{std::vector<float>(moving.data().begin(), moving.data().end())};
  std::vector<std::vector<float>> ref_pyr{
      std::vector<float>(reference.data().begin(), reference.data().end())};
  std::vector<std::pair<int, int>> dims{{H, W}};
  for (int l = 1; l < opts.pyramid_levels; ++l) {
    auto [ph, pw] = dims.back();
    if (ph < 8 || pw < 8) break;
    std::vector<float> m, r;
    int oh, ow;
    box_downsample(mov_pyr.back().data(), ph, pw, m, oh, ow);
    box_downsample(ref_pyr.back().data(), ph, pw, r, oh, ow);
    mov_pyr.push_back(std::move(m));
    ref_pyr.push_back(std::move(r));
    dims.push_back({oh, ow});
  }

  if (diag) diag->energy_trace.assign(mov_pyr.size(), {});

  std::vector<double> flow;
  for (int level = (int)mov_pyr.size() - 1; level >= 0; --level) {
    auto [h, w] = dims[level];
    if (flow.empty())
      flow.assign((size_t)h * w * 2, 0.0);
    else {
      auto [ph, pw] = dims[level + 1];
      flow = upsample_flow(flow, ph, pw, h, w);
    }
    const float* mv = mov_pyr[level].data();
    const float* rf = ref_pyr[level].data();
    std::vector<float> gx, gy;
    image_gradients(mv, h, w, gx, gy);

    // dimensionless step: fraction of a curvature-preconditioned descent step
    double step = std::clamp(opts.step_scale * opts.lambda_flow, 1e-4, 0.95);
    double energy = flow_energy(mv, rf, h, w, flow, opts.lambda_flow);
    std::vector<double> grad, curvature, proposal;
    for (int it = 0; it < opts.iterations_per_level; ++it) {
      flow_gradient(mv, rf, h, w, flow, opts.lambda_flow, gx, gy, grad, curvature);
      double gmax = 0;
      for (double g : grad) gmax = std::max(gmax, std::abs(g));
      if (gmax < 1e-12) break;  // already at a stationary point
      bool accepted = false;
      for (int back = 0; back < 24 && !accepted; ++back) {
        proposal = flow;
        for (size_t i = 0; i < flow.size(); ++i) proposal[i] -= step * grad[i] / curvature[i];
        const double e2 = flow_energy(mv, rf, h, w, proposal, opts.lambda_flow);
        if (e2 <= energy) {
          flow.swap(proposal);
          energy = e2;
          accepted = true;
        } else {
          step *= 0.5;  // line-search guard: never accept an energy increase
        }
      }
      if (diag) diag->energy_trace[mov_pyr.size() - 1 - level].push_back(energy);
      if (!accepted) break;  // step underflow, converged
    }
  }

  FlowField out;
  out.h = H;
  out.w = W;
  out.lambda_flow = opts.lambda_flow;
  out.data.resize((size_t)H * W * 2);
  for (size_t i = 0; i < flow.size(); ++i) out.data[i] = (float)flow[i];
  return out;
}

TensorT<float> apply_flow(const TensorT<float>& image, const FlowField& flow) {
  if (image.ndim() != 2 || image.dim(0) != flow.h || image.dim(1) != flow.w)
    throw DimensionError("apply_flow: image " + shape_str(image.shape()) + " vs flow field " +
                         std::to_string(flow.h) + "x" + std::to_string(flow.w));
  for (float v : flow.data)
    if (!std::isfinite(v)) throw NumericError("apply_flow: non-finite flow");
  const int H = flow.h, W = flow.w;
  std::vector<float> out((size_t)H * W);
  const float* src = image.data().data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      out[y * W + x] = sample_bilinear(src, H, W, x + flow.dx(y, x), y + flow.dy(y, x));
  return TensorT<float>::from_data({H, W}, std::move(out));
}

TensorT<float> delta_f_over_f(const TensorT<float>& stack, int window) {
  if (stack.ndim() != 3) throw DimensionError("delta_f_over_f expects [T,H,W]");
  const int64_t T = stack.dim(0), HW = stack.dim(1) * stack.dim(2);
  if (window < 1) throw ContractError("delta_f_over_f: window must be positive");
  if (T < window)
    throw ContractError("delta_f_over_f: stack of " + std::to_string(T) +
                        " frames is shorter than the " + std::to_string(window) + "-frame window");
  const int half = window / 2;
  const float* src = stack.data().data();
  std::vector<float> out((size_t)T * HW);

  // per-pixel prefix sums over time for O(T) moving averages
  std::vector<double> prefix(T + 1);
  for (int64_t p = 0; p < HW; ++p) {
    prefix[0] = 0;
    for (int64_t t = 0; t < T; ++t) prefix[t + 1] = prefix[t] + src[t * HW + p];
    double f0 = std::numeric_limits<double>::infinity();
    for (int64_t t = 0; t < T; ++t) {
      const int64_t lo = std::max<int64_t>(0, t - half);
      const int64_t hi = std::min<int64_t>(T - 1, t + half);
      const double avg = (prefix[hi + 1] - prefix[lo]) / (double)(hi - lo + 1);
      f0 = std::min(f0, avg);
    }
    f0 = std::max(f0, 1e-6);
    for (int64_t t = 0; t < T; ++t)
      out[t * HW + p] = (float)((src[t * HW + p] - f0) / f0 * 100.0);
  }
  return TensorT<float>::from_data(stack.shape(), std::move(out));
}

}  // namespace neuroswap
