#pragma once

#include <cmath>
#include <vector>

#include "flowdet/box.hpp"
#include "flowdet/pointops.hpp"
#include "flowdet/tensor.hpp"

namespace flowdet {

enum class DistanceForm { kSquared, kEuclidean };

template <typename T>
struct ScalarLoss {
  double value = 0.0;
  Tensor<T> grad;
};

// Mean distance from each propagated point to its nearest neighbor in the
// target frame. The NN assignment is treated as fixed per evaluation.
template <typename T>
ScalarLoss<T> nearest_neighbor_loss(const Tensor<T>& propagated, const Tensor<T>& target_xyz,
                                    DistanceForm form = DistanceForm::kSquared) {
  if (target_xyz.rows() == 0) throw ShapeError("nearest_neighbor_loss: empty target cloud");
  const int n = propagated.rows();
  ScalarLoss<T> out;
  out.grad = Tensor<T>::zeros({n, 3});
  if (n == 0) return out;
  KnnResult<T> nn = knn(propagated, target_xyz, 1);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const int j = nn.indices[static_cast<std::size_t>(i)];
    double d2 = 0.0;
    double diff[3];
    for (int c = 0; c < 3; ++c) {
      diff[c] = static_cast<double>(propagated(i, c)) - static_cast<double>(target_xyz(j, c));
      d2 += diff[c] * diff[c];
    }
    if (form == DistanceForm::kSquared) {
      sum += d2;
      for (int c = 0; c < 3; ++c) out.grad(i, c) = static_cast<T>(2.0 * diff[c] / n);
    } else {
      const double d = std::sqrt(d2);
      sum += d;
      if (d > 0) {
        for (int c = 0; c < 3; ++c) out.grad(i, c) = static_cast<T>(diff[c] / (d * n));
      }
    }
  }
  out.value = sum / n;
  return out;
}

// Mean distance between paired rows; grad is with respect to `reconstructed`
// (the gradient w.r.t. `anchors` is its negation).
template <typename T>
ScalarLoss<T> cycle_consistency_loss(const Tensor<T>& anchors, const Tensor<T>& reconstructed,
                                     DistanceForm form = DistanceForm::kSquared) {
  require_same_shape(anchors, reconstructed, "cycle_consistency_loss");
  const int n = anchors.rows();
  ScalarLoss<T> out;
  out.grad = Tensor<T>::zeros({n, 3});
  if (n == 0) return out;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    double d2 = 0.0;
    double diff[3];
    for (int c = 0; c < 3; ++c) {
      diff[c] = static_cast<double>(reconstructed(i, c)) - static_cast<double>(anchors(i, c));
      d2 += diff[c] * diff[c];
    }
    if (form == DistanceForm::kSquared) {
      sum += d2;
      for (int c = 0; c < 3; ++c) out.grad(i, c) = static_cast<T>(2.0 * diff[c] / n);
    } else {
      const double d = std::sqrt(d2);
      sum += d;
      if (d > 0) {
        for (int c = 0; c < 3; ++c) out.grad(i, c) = static_cast<T>(diff[c] / (d * n));
      }
    }
  }
  out.value = sum / n;
  return out;
}

// Reverse correspondence term: mean distance of each target point to its
// nearest propagated point; grad is with respect to the propagated set. The
// pull from vacated/occupied regions is what lets the flow leave the all-zero
// solution on mostly-static scenes.
template <typename T>
ScalarLoss<T> reverse_nearest_neighbor_loss(const Tensor<T>& propagated,
                                            const Tensor<T>& target_xyz,
                                            DistanceForm form = DistanceForm::kSquared) {
  if (propagated.cols() != 3 || target_xyz.cols() != 3) {
    throw ShapeError("reverse_nearest_neighbor_loss: expected [n x 3] inputs");
  }
  const int n = propagated.rows();
  const int m = target_xyz.rows();
  ScalarLoss<T> out;
  out.grad = Tensor<T>::zeros({n, 3});
  if (n == 0 || m == 0) return out;
  KnnResult<T> nn = knn(target_xyz, propagated, 1);
  double sum = 0.0;
  for (int i = 0; i < m; ++i) {
    const int j = nn.indices[static_cast<std::size_t>(i)];
    double d2 = 0.0;
    double diff[3];
    for (int c = 0; c < 3; ++c) {
      diff[c] = static_cast<double>(propagated(j, c)) - static_cast<double>(target_xyz(i, c));
      d2 += diff[c] * diff[c];
    }
    if (form == DistanceForm::kSquared) {
      sum += d2;
      for (int c = 0; c < 3; ++c) {
        out.grad(j, c) += static_cast<T>(2.0 * diff[c] / m);
      }
    } else {
      const double d = std::sqrt(d2);
      sum += d;
      if (d > 0) {
        for (int c = 0; c < 3; ++c) out.grad(j, c) += static_cast<T>(diff[c] / (d * m));
      }
    }
  }
  out.value = sum / m;
  return out;
}

struct FlowLossReport {
  double nn_loss = 0.0;
  double cycle_loss = 0.0;
  double total = 0.0;
};

template <typename T>
struct FlowLossResult {
  FlowLossReport report;
  Tensor<T> d_propagated;     // gradient w.r.t. P'
  Tensor<T> d_reconstructed;  // gradient w.r.t. P''
};

// total = nn(P', P_{t+1}) + reverse_weight * nn(P_{t+1}, P') + cycle(P_t
// samples, P''). The forward and cycle terms have unit weight; the reverse
// term defaults to off and is folded into nn_loss when enabled.
template <typename T>
FlowLossResult<T> flow_total_loss(const Tensor<T>& anchors, const Tensor<T>& target_xyz,
                                  const Tensor<T>& propagated, const Tensor<T>& reconstructed,
                                  DistanceForm form = DistanceForm::kSquared,
                                  double reverse_weight = 0.0) {
  ScalarLoss<T> nn = nearest_neighbor_loss(propagated, target_xyz, form);
  ScalarLoss<T> cyc = cycle_consistency_loss(anchors, reconstructed, form);
  FlowLossResult<T> out;
  out.report.nn_loss = nn.value;
  out.report.cycle_loss = cyc.value;
  out.d_propagated = std::move(nn.grad);
  out.d_reconstructed = std::move(cyc.grad);
  if (reverse_weight > 0) {
    ScalarLoss<T> rev = reverse_nearest_neighbor_loss(propagated, target_xyz, form);
    out.report.nn_loss += reverse_weight * rev.value;
    for (std::size_t i = 0; i < out.d_propagated.data.size(); ++i) {
      out.d_propagated.data[i] += static_cast<T>(reverse_weight) * rev.grad.data[i];
    }
  }
  out.report.total = out.report.nn_loss + out.report.cycle_loss;
  return out;
}

// BEV grid resolution and box-encoding contract of the detection head.
struct DetectHeadConfig {
  double bev_extent = 20.0;  // half side, meters
  int bev_cells = 64;
  int conv_channels = 32;
  int reg_channels = 8;  // dx, dy, z, log w, log l, log h, sin yaw, cos yaw

  double cell_size() const { return 2.0 * bev_extent / bev_cells; }
};

template <typename T>
struct DetectionTargets {
  Tensor<T> heatmap;         // [C x C] in [0,1]
  Tensor<T> reg;             // [C x C x 8]
  std::vector<bool> mask;    // [C*C], cells owning a box center
  int dropped = 0;           // boxes outside the extent
};

// Center-heatmap targets: the owning cell gets 1, neighbors a gaussian decay
// with sigma = bev diagonal / 6 (in cells), clamped to at least one cell.
// dx/dy are sub-cell offsets from the cell center, in cells.
template <typename T>
DetectionTargets<T> make_detection_targets(const std::vector<Box>& boxes,
                                           const DetectHeadConfig& cfg) {
  const int C = cfg.bev_cells;
  DetectionTargets<T> tg;
  tg.heatmap = Tensor<T>::zeros({C, C});
  tg.reg = Tensor<T>::zeros({C, C, cfg.reg_channels});
  tg.mask.assign(static_cast<std::size_t>(C) * C, false);
  const double cs = cfg.cell_size();
  for (const Box& b : boxes) {
    if (b.w <= 0 || b.l <= 0 || b.h <= 0) {
      throw ShapeError("make_detection_targets: non-positive box dimensions");
    }
    const double fx = (b.x + cfg.bev_extent) / cs;
    const double fy = (b.y + cfg.bev_extent) / cs;
    const int cx = static_cast<int>(std::floor(fx));
    const int cy = static_cast<int>(std::floor(fy));
    if (cx < 0 || cx >= C || cy < 0 || cy >= C) {
      ++tg.dropped;
      continue;
    }
    const double sigma = std::max(std::sqrt(b.w * b.w + b.l * b.l) / cs / 6.0, 1.0);
    for (int i = 0; i < C; ++i) {
      for (int j = 0; j < C; ++j) {
        const double d2 = double(i - cx) * (i - cx) + double(j - cy) * (j - cy);
        const T v = static_cast<T>(std::exp(-d2 / (2.0 * sigma * sigma)));
        tg.heatmap(i, j) = std::max(tg.heatmap(i, j), v);
      }
    }
    tg.heatmap(cx, cy) = T(1);
    tg.mask[static_cast<std::size_t>(cx) * C + cy] = true;
    tg.reg(cx, cy, 0) = static_cast<T>(fx - (cx + 0.5));
    tg.reg(cx, cy, 1) = static_cast<T>(fy - (cy + 0.5));
    tg.reg(cx, cy, 2) = static_cast<T>(b.z);
    tg.reg(cx, cy, 3) = static_cast<T>(std::log(b.w));
    tg.reg(cx, cy, 4) = static_cast<T>(std::log(b.l));
    tg.reg(cx, cy, 5) = static_cast<T>(std::log(b.h));
    tg.reg(cx, cy, 6) = static_cast<T>(std::sin(b.yaw));
    tg.reg(cx, cy, 7) = static_cast<T>(std::cos(b.yaw));
  }
  return tg;
}

// Penalty-reduced center-heatmap focal loss.
template <typename T>
ScalarLoss<T> focal_loss(const Tensor<T>& pred, const Tensor<T>& target, double alpha = 2.0,
                         double beta = 4.0) {
  require_same_shape(pred, target, "focal_loss");
  require_finite(pred, "focal_loss");
  ScalarLoss<T> out;
  out.grad = Tensor<T>::zeros(pred.shape);
  int n_pos = 0;
  for (std::size_t i = 0; i < target.data.size(); ++i) {
    if (target.data[i] == T(1)) ++n_pos;
  }
  const double npos = std::max(n_pos, 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pred.data[i]), 1e-6, 1.0 - 1e-6);
    const double t = static_cast<double>(target.data[i]);
    if (t == 1.0) {
      sum += std::pow(1.0 - p, alpha) * std::log(p);
      out.grad.data[i] = static_cast<T>(
          (alpha * std::pow(1.0 - p, alpha - 1.0) * std::log(p) - std::pow(1.0 - p, alpha) / p) /
          npos);
    } else {
      sum += std::pow(1.0 - t, beta) * std::pow(p, alpha) * std::log(1.0 - p);
      out.grad.data[i] = static_cast<T>(
          -std::pow(1.0 - t, beta) *
          (alpha * std::pow(p, alpha - 1.0) * std::log(1.0 - p) - std::pow(p, alpha) / (1.0 - p)) /
          npos);
    }
  }
  out.value = -sum / npos;
  return out;
}

// Mean Huber loss over the channels of masked cells. Empty mask yields 0.
template <typename T>
ScalarLoss<T> huber_loss(const Tensor<T>& pred, const Tensor<T>& target,
                         const std::vector<bool>& mask, double delta = 1.0,
                         bool* empty_mask_warning = nullptr) {
  require_same_shape(pred, target, "huber_loss");
  const int cells = static_cast<int>(mask.size());
  const int ch = cells > 0 ? pred.numel() / cells : 0;
  if (cells * ch != pred.numel()) {
    throw ShapeError("huber_loss: mask size " + std::to_string(cells) + " does not divide " +
                     pred.shape_str());
  }
  ScalarLoss<T> out;
  out.grad = Tensor<T>::zeros(pred.shape);
  int n = 0;
  for (int c = 0; c < cells; ++c) n += mask[c] ? ch : 0;
  if (n == 0) {
    if (empty_mask_warning) *empty_mask_warning = true;
    return out;
  }
  double sum = 0.0;
  for (int c = 0; c < cells; ++c) {
    if (!mask[c]) continue;
    for (int k = 0; k < ch; ++k) {
      const std::size_t i = static_cast<std::size_t>(c) * ch + k;
      const double r = static_cast<double>(pred.data[i]) - static_cast<double>(target.data[i]);
      if (std::abs(r) <= delta) {
        sum += 0.5 * r * r;
        out.grad.data[i] = static_cast<T>(r / n);
      } else {
        sum += delta * (std::abs(r) - 0.5 * delta);
        out.grad.data[i] = static_cast<T>((r > 0 ? delta : -delta) / n);
      }
    }
  }
  out.value = sum / n;
  return out;
}

struct DetectionLossReport {
  double heatmap_loss = 0.0;
  double reg_loss = 0.0;
  double total = 0.0;
};

template <typename T>
struct DetectionLossResult {
  DetectionLossReport report;
  Tensor<T> d_heatmap;
  Tensor<T> d_reg;
};

template <typename T>
DetectionLossResult<T> detection_total_loss(const Tensor<T>& pred_heatmap,
                                            const Tensor<T>& pred_reg,
                                            const DetectionTargets<T>& targets,
                                            double w_hm = 1.0, double w_reg = 2.0,
                                            double huber_delta = 1.0) {
  ScalarLoss<T> hm = focal_loss(pred_heatmap, targets.heatmap);
  ScalarLoss<T> rg = huber_loss(pred_reg, targets.reg, targets.mask, huber_delta);
  DetectionLossResult<T> out;
  out.report.heatmap_loss = hm.value;
  out.report.reg_loss = rg.value;
  out.report.total = w_hm * hm.value + w_reg * rg.value;
  out.d_heatmap = std::move(hm.grad);
  out.d_reg = std::move(rg.grad);
  for (auto& v : out.d_heatmap.data) v *= static_cast<T>(w_hm);
  for (auto& v : out.d_reg.data) v *= static_cast<T>(w_reg);
  return out;
}

}  // namespace flowdet
