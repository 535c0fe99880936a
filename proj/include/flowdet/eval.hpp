#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <limits>
#include <numeric>
#include <vector>

#include "flowdet/box.hpp"
#include "flowdet/losses.hpp"
#include "flowdet/tensor.hpp"

namespace flowdet {

// Mean Euclidean norm of (pred - gt).
template <typename T>
double epe(const Tensor<T>& pred_flow, const Tensor<T>& gt_flow) {
  require_same_shape(pred_flow, gt_flow, "epe");
  const int n = pred_flow.rows();
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = static_cast<double>(pred_flow(i, c)) - static_cast<double>(gt_flow(i, c));
      d2 += d * d;
    }
    sum += std::sqrt(d2);
  }
  return sum / n;
}

// Inverse of make_detection_targets: local-maximum cells decoded into boxes.
// Peaks use a 3x3 neighborhood with strict >, plateau ties surviving at the
// lowest cell index.
template <typename T>
std::vector<Box> decode_detections(const Tensor<T>& heatmap, const Tensor<T>& regmap,
                                   const DetectHeadConfig& cfg, double peak_threshold = 0.1,
                                   int max_dets = 32) {
  const int C = cfg.bev_cells;
  const double cs = cfg.cell_size();
  std::vector<Box> out;
  for (int i = 0; i < C; ++i) {
    for (int j = 0; j < C; ++j) {
      const T p = heatmap(i, j);
      if (static_cast<double>(p) < peak_threshold) continue;
      bool peak = true;
      for (int di = -1; di <= 1 && peak; ++di) {
        for (int dj = -1; dj <= 1 && peak; ++dj) {
          if (di == 0 && dj == 0) continue;
          const int ni = i + di, nj = j + dj;
          if (ni < 0 || ni >= C || nj < 0 || nj >= C) continue;
          const T q = heatmap(ni, nj);
          if (q > p) peak = false;
          if (q == p && ni * C + nj < i * C + j) peak = false;
        }
      }
      if (!peak) continue;
      const double x = -cfg.bev_extent + (i + 0.5 + static_cast<double>(regmap(i, j, 0))) * cs;
      const double y = -cfg.bev_extent + (j + 0.5 + static_cast<double>(regmap(i, j, 1))) * cs;
      const double z = regmap(i, j, 2);
      const double w = std::exp(static_cast<double>(regmap(i, j, 3)));
      const double l = std::exp(static_cast<double>(regmap(i, j, 4)));
      const double h = std::exp(static_cast<double>(regmap(i, j, 5)));
      const double yaw = std::atan2(static_cast<double>(regmap(i, j, 6)),
                                    static_cast<double>(regmap(i, j, 7)));
      out.emplace_back(x, y, z, w, l, h, yaw, 0, static_cast<double>(p));
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Box& a, const Box& b) { return a.score > b.score; });
  if (static_cast<int>(out.size()) > max_dets) out.resize(max_dets);
  return out;
}

namespace detail {

struct Pt2 {
  double x, y;
};

inline std::vector<Pt2> box_corners_bev(const Box& b) {
  const double cs = std::cos(b.yaw), sn = std::sin(b.yaw);
  const double hw = b.w / 2, hl = b.l / 2;
  std::vector<Pt2> c(4);
  const double local[4][2] = {{hw, hl}, {-hw, hl}, {-hw, -hl}, {hw, -hl}};
  for (int i = 0; i < 4; ++i) {
    c[i] = {b.x + cs * local[i][0] - sn * local[i][1], b.y + sn * local[i][0] + cs * local[i][1]};
  }
  return c;
}

inline double polygon_area(const std::vector<Pt2>& poly) {
  double a = 0;
  const int n = static_cast<int>(poly.size());
  for (int i = 0; i < n; ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % n];
    a += p.x * q.y - q.x * p.y;
  }
  return std::abs(a) / 2.0;
}

// Sutherland-Hodgman clip of `subject` against convex `clip` (CCW).
inline std::vector<Pt2> clip_polygon(std::vector<Pt2> subject, const std::vector<Pt2>& clip) {
  const int m = static_cast<int>(clip.size());
  for (int e = 0; e < m && !subject.empty(); ++e) {
    const Pt2 a = clip[e], b = clip[(e + 1) % m];
    // signed-distance tolerance: a vertex epsilon-outside a collinear edge must
    // count as inside, otherwise the near-parallel line intersection blows up
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const double tol = -1e-9 * std::max(1.0, len);
    auto inside = [&](const Pt2& p) {
      return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= tol * len;
    };
    auto intersect = [&](const Pt2& p, const Pt2& q) {
      const double a1 = b.y - a.y, b1 = a.x - b.x, c1 = a1 * a.x + b1 * a.y;
      const double a2 = q.y - p.y, b2 = p.x - q.x, c2 = a2 * p.x + b2 * p.y;
      const double det = a1 * b2 - a2 * b1;
      if (det == 0) return p;
      return Pt2{(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det};
    };
    std::vector<Pt2> out;
    const int n = static_cast<int>(subject.size());
    for (int i = 0; i < n; ++i) {
      const Pt2 cur = subject[i], prev = subject[(i + n - 1) % n];
      if (inside(cur)) {
        if (!inside(prev)) out.push_back(intersect(prev, cur));
        out.push_back(cur);
      } else if (inside(prev)) {
        out.push_back(intersect(prev, cur));
      }
    }
    subject = std::move(out);
  }
  return subject;
}

inline void make_ccw(std::vector<Pt2>& poly) {
  double a = 0;
  const int n = static_cast<int>(poly.size());
  for (int i = 0; i < n; ++i) {
    a += poly[i].x * poly[(i + 1) % n].y - poly[(i + 1) % n].x * poly[i].y;
  }
  if (a < 0) std::reverse(poly.begin(), poly.end());
}

}  // namespace detail

// Intersection-over-union of the yaw-rotated BEV rectangles; z is ignored.
inline double bev_iou(const Box& a, const Box& b) {
  if (a.w <= 0 || a.l <= 0 || b.w <= 0 || b.l <= 0) {
    throw ShapeError("bev_iou: non-positive box sizes");
  }
  auto pa = detail::box_corners_bev(a);
  auto pb = detail::box_corners_bev(b);
  detail::make_ccw(pa);
  detail::make_ccw(pb);
  const auto inter = detail::clip_polygon(pa, pb);
  if (inter.size() < 3) return 0.0;
  const double ai = detail::polygon_area(inter);
  const double au = a.w * a.l + b.w * b.l - ai;
  if (au <= 0) return 0.0;
  return std::clamp(ai / au, 0.0, 1.0);
}

// Greedy descending-score suppression at bev_iou >= threshold; stable order.
inline std::vector<Box> nms(const std::vector<Box>& boxes, double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return boxes[i].score > boxes[j].score; });
  std::vector<bool> dead(boxes.size(), false);
  std::vector<Box> out;
  for (int i : order) {
    if (dead[i]) continue;
    out.push_back(boxes[i]);
    for (int j : order) {
      if (j == i || dead[j]) continue;
      if (bev_iou(boxes[i], boxes[j]) >= iou_threshold) dead[j] = true;
    }
  }
  return out;
}

struct PrPoint {
  double recall = 0;
  double precision = 0;
};

struct ApResult {
  double ap = 0.0;           // NaN when no ground truth exists
  bool undefined = false;
  std::vector<PrPoint> pr_curve;
  int tp = 0, fp = 0, fn = 0;  // at the operating threshold (all detections)
};

// 40-point interpolated average precision with greedy per-frame matching.
// Detections are processed in descending score order; a detection matches the
// unmatched ground-truth box of maximal IoU when that IoU >= the threshold.
inline ApResult average_precision(const std::vector<std::vector<Box>>& dets_per_frame,
                                  const std::vector<std::vector<Box>>& gts_per_frame,
                                  double iou = 0.7, int n_recall = 40) {
  if (dets_per_frame.size() != gts_per_frame.size()) {
    throw ShapeError("average_precision: frame count mismatch");
  }
  int n_gt = 0;
  for (const auto& g : gts_per_frame) n_gt += static_cast<int>(g.size());
  ApResult res;
  if (n_gt == 0) {
    res.ap = std::numeric_limits<double>::quiet_NaN();
    res.undefined = true;
    return res;
  }
  struct Det {
    double score;
    int frame;
    int index;
  };
  std::vector<Det> dets;
  for (std::size_t f = 0; f < dets_per_frame.size(); ++f) {
    for (std::size_t i = 0; i < dets_per_frame[f].size(); ++i) {
      dets.push_back({dets_per_frame[f][i].score, static_cast<int>(f), static_cast<int>(i)});
    }
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Det& a, const Det& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> gt_used(gts_per_frame.size());
  for (std::size_t f = 0; f < gts_per_frame.size(); ++f) {
    gt_used[f].assign(gts_per_frame[f].size(), false);
  }
  std::vector<bool> is_tp(dets.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    const Box& db = dets_per_frame[dets[d].frame][dets[d].index];
    const auto& gts = gts_per_frame[dets[d].frame];
    double best = -1;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[dets[d].frame][g]) continue;
      const double v = bev_iou(db, gts[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best >= iou) {
      is_tp[d] = true;
      gt_used[dets[d].frame][best_g] = true;
    }
  }
  int tp = 0, fp = 0;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    if (is_tp[d]) ++tp; else ++fp;
    res.pr_curve.push_back({static_cast<double>(tp) / n_gt,
                            static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  res.tp = tp;
  res.fp = fp;
  res.fn = n_gt - tp;
  // precision interpolated to the right (ceiling) at n_recall points in (0, 1]
  double ap_sum = 0.0;
  for (int r = 1; r <= n_recall; ++r) {
    const double level = static_cast<double>(r) / n_recall;
    double p = 0.0;
    for (const auto& pt : res.pr_curve) {
      if (pt.recall >= level) p = std::max(p, pt.precision);
    }
    ap_sum += p;
  }
  res.ap = ap_sum / n_recall;
  return res;
}

// Near/mid/far AP by ground-truth (and detection) center distance from the
// sensor origin — the synthetic analog of occlusion-based difficulty tiers.
struct DistanceBinnedAp {
  ApResult near_bin, mid_bin, far_bin;
};

inline DistanceBinnedAp distance_binned_ap(const std::vector<std::vector<Box>>& dets_per_frame,
                                           const std::vector<std::vector<Box>>& gts_per_frame,
                                           double iou = 0.7, double r_near = 7.0,
                                           double r_mid = 14.0) {
  auto filter = [](const std::vector<std::vector<Box>>& frames, double lo, double hi) {
    std::vector<std::vector<Box>> out(frames.size());
    for (std::size_t f = 0; f < frames.size(); ++f) {
      for (const auto& b : frames[f]) {
        const double r = std::hypot(b.x, b.y);
        if (r >= lo && r < hi) out[f].push_back(b);
      }
    }
    return out;
  };
  const double inf = std::numeric_limits<double>::infinity();
  DistanceBinnedAp out;
  out.near_bin = average_precision(filter(dets_per_frame, 0, r_near),
                                   filter(gts_per_frame, 0, r_near), iou);
  out.mid_bin = average_precision(filter(dets_per_frame, r_near, r_mid),
                                  filter(gts_per_frame, r_near, r_mid), iou);
  out.far_bin = average_precision(filter(dets_per_frame, r_mid, inf),
                                  filter(gts_per_frame, r_mid, inf), iou);
  return out;
}

inline void write_pr_curve_csv(std::ostream& os, const std::vector<PrPoint>& curve) {
  os << "recall,precision\n";
  for (const auto& p : curve) os << p.recall << "," << p.precision << "\n";
}

// Flow evaluation summary; static/dynamic split by ground-truth flow norm.
struct FlowEvalReport {
  double epe_mean = 0;
  double epe_static = 0;
  double epe_dynamic = 0;
  int n_static = 0;
  int n_dynamic = 0;
};

template <typename T>
FlowEvalReport flow_eval(const Tensor<T>& pred_flow, const Tensor<T>& gt_flow,
                         double dynamic_threshold = 0.05) {
  require_same_shape(pred_flow, gt_flow, "flow_eval");
  FlowEvalReport rep;
  double sum = 0, ss = 0, sd = 0;
  for (int i = 0; i < pred_flow.rows(); ++i) {
    double d2 = 0, g2 = 0;
    for (int c = 0; c < 3; ++c) {
      const double d = static_cast<double>(pred_flow(i, c)) - static_cast<double>(gt_flow(i, c));
      d2 += d * d;
      g2 += static_cast<double>(gt_flow(i, c)) * static_cast<double>(gt_flow(i, c));
    }
    const double e = std::sqrt(d2);
    sum += e;
    if (std::sqrt(g2) > dynamic_threshold) {
      sd += e;
      ++rep.n_dynamic;
    } else {
      ss += e;
      ++rep.n_static;
    }
  }
  const int n = pred_flow.rows();
  rep.epe_mean = n ? sum / n : 0;
  rep.epe_static = rep.n_static ? ss / rep.n_static : 0;
  rep.epe_dynamic = rep.n_dynamic ? sd / rep.n_dynamic : 0;
  return rep;
}

}  // namespace flowdet
