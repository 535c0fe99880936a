#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <unordered_map>
#include <vector>

#include "flowdet/tensor.hpp"

namespace flowdet {

// One lidar frame: xyz in meters, optional reflectance in [0,1].
template <typename T>
struct PointCloud {
  Tensor<T> xyz;  // [M x 3]
  std::optional<std::vector<T>> reflectance;
  int frame_id = 0;

  int size() const { return xyz.rows(); }
};

// A height-filtered cloud plus the row index each kept point had in the input.
template <typename T>
struct GroundFilterResult {
  PointCloud<T> cloud;
  std::vector<int> orig_idx;
};

// Keep only points with z >= z_min. Used to take the (flat, translation-
// invariant) ground plane out of the flow path, where it carries no motion
// signal but dominates nearest-neighbor matching.
template <typename T>
GroundFilterResult<T> remove_ground(const PointCloud<T>& cloud, double z_min) {
  GroundFilterResult<T> out;
  std::vector<T> xyz;
  for (int i = 0; i < cloud.size(); ++i) {
    if (cloud.xyz(i, 2) >= static_cast<T>(z_min)) {
      for (int c = 0; c < 3; ++c) xyz.push_back(cloud.xyz(i, c));
      out.orig_idx.push_back(i);
    }
  }
  if (out.orig_idx.empty()) throw ShapeError("remove_ground: no points above z_min");
  out.cloud.xyz = Tensor<T>({static_cast<int>(out.orig_idx.size()), 3}, std::move(xyz));
  out.cloud.frame_id = cloud.frame_id;
  if (cloud.reflectance) {
    std::vector<T> refl;
    refl.reserve(out.orig_idx.size());
    for (int i : out.orig_idx) refl.push_back((*cloud.reflectance)[i]);
    out.cloud.reflectance = std::move(refl);
  }
  return out;
}

namespace detail {
template <typename T>
inline T sqdist3(const Tensor<T>& a, int i, const Tensor<T>& b, int j) {
  const T dx = a(i, 0) - b(j, 0);
  const T dy = a(i, 1) - b(j, 1);
  const T dz = a(i, 2) - b(j, 2);
  return dx * dx + dy * dy + dz * dz;
}
}  // namespace detail

// Greedy max-min sampling. First index is uniform under seed; every later
// pick maximizes distance to the already-selected set, ties to lowest index.
// n > M cycles the selected order so downstream shapes stay fixed.
template <typename T>
std::vector<int> farthest_point_sample(const Tensor<T>& xyz, int n, std::uint64_t seed) {
  const int M = xyz.rows();
  if (M == 0) throw ShapeError("farthest_point_sample: empty cloud");
  if (n < 1) throw ShapeError("farthest_point_sample: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  out.reserve(n);
  const int first = static_cast<int>(rng() % static_cast<std::uint64_t>(M));
  out.push_back(first);
  std::vector<T> min_sq(M);
  for (int i = 0; i < M; ++i) min_sq[i] = detail::sqdist3(xyz, i, xyz, first);
  const int base = std::min(n, M);
  while (static_cast<int>(out.size()) < base) {
    int arg = 0;
    T best = T(-1);
    for (int i = 0; i < M; ++i) {
      if (min_sq[i] > best) {
        best = min_sq[i];
        arg = i;
      }
    }
    out.push_back(arg);
    for (int i = 0; i < M; ++i) min_sq[i] = std::min(min_sq[i], detail::sqdist3(xyz, i, xyz, arg));
  }
  for (int i = base; i < n; ++i) out.push_back(out[i % M]);
  return out;
}

template <typename T>
struct KnnResult {
  std::vector<int> indices;  // [Q*k] row-major
  Tensor<T> dists;           // [Q x k], Euclidean, ascending
  int k = 0;
};

// Brute-force k nearest neighbors; ties break to lower reference index.
// k > R pads by repeating the nearest index.
template <typename T>
KnnResult<T> knn(const Tensor<T>& query, const Tensor<T>& reference, int k) {
  const int Q = query.rows(), R = reference.rows();
  if (R == 0) throw ShapeError("knn: empty reference");
  if (k < 1) throw ShapeError("knn: k must be >= 1");
  KnnResult<T> res;
  res.k = k;
  res.indices.resize(static_cast<std::size_t>(Q) * k);
  res.dists = Tensor<T>::zeros({Q, k});
  std::vector<std::pair<T, int>> cand(R);
  for (int q = 0; q < Q; ++q) {
    for (int r = 0; r < R; ++r) cand[r] = {detail::sqdist3(query, q, reference, r), r};
    const int kk = std::min(k, R);
    std::partial_sort(cand.begin(), cand.begin() + kk, cand.end());
    for (int j = 0; j < k; ++j) {
      const auto& c = cand[std::min(j, kk - 1)];
      res.indices[static_cast<std::size_t>(q) * k + j] = j < kk ? c.second : cand[0].second;
      res.dists(q, j) = std::sqrt(j < kk ? c.first : cand[0].first);
    }
  }
  return res;
}

// Neighborhood of one query point in a reference cloud.
template <typename T>
struct NeighborSet {
  int query_index = 0;
  std::vector<int> neighbor_indices;
  Tensor<T> displacements;  // [k x 3], neighbor - query
};

namespace detail {
template <typename T>
NeighborSet<T> make_neighbor_set(int q, const Tensor<T>& query, const Tensor<T>& reference,
                                 std::vector<int> idx) {
  NeighborSet<T> ns;
  ns.query_index = q;
  ns.displacements = Tensor<T>::zeros({static_cast<int>(idx.size()), 3});
  for (std::size_t j = 0; j < idx.size(); ++j) {
    for (int c = 0; c < 3; ++c) {
      ns.displacements(static_cast<int>(j), c) = reference(idx[j], c) - query(q, c);
    }
  }
  ns.neighbor_indices = std::move(idx);
  return ns;
}
}  // namespace detail

// Up to max_k in-radius neighbors in lowest-index order; an isolated query
// falls back to its single nearest neighbor so no group is empty.
template <typename T>
std::vector<NeighborSet<T>> ball_query(const Tensor<T>& query, const Tensor<T>& reference,
                                       double radius, int max_k) {
  const int Q = query.rows(), R = reference.rows();
  if (R == 0) throw ShapeError("ball_query: empty reference");
  if (radius <= 0 || max_k < 1) throw ShapeError("ball_query: radius > 0 and max_k >= 1 required");
  const T r2 = static_cast<T>(radius * radius);
  std::vector<NeighborSet<T>> out;
  out.reserve(Q);
  for (int q = 0; q < Q; ++q) {
    std::vector<int> idx;
    for (int r = 0; r < R && static_cast<int>(idx.size()) < max_k; ++r) {
      if (detail::sqdist3(query, q, reference, r) <= r2) idx.push_back(r);
    }
    if (idx.empty()) {
      T best = detail::sqdist3(query, q, reference, 0);
      int arg = 0;
      for (int r = 1; r < R; ++r) {
        const T d = detail::sqdist3(query, q, reference, r);
        if (d < best) {
          best = d;
          arg = r;
        }
      }
      idx.push_back(arg);
    }
    out.push_back(detail::make_neighbor_set(q, query, reference, std::move(idx)));
  }
  return out;
}

// Per query, rows [neighbor_feature || displacement]. D may be zero, in which
// case the output is pure displacements. Relative coordinates make the result
// invariant under global translation.
template <typename T>
std::vector<Tensor<T>> group_features(const std::vector<NeighborSet<T>>& neighbors,
                                      const Tensor<T>& feats) {
  const int R = feats.rows();
  const int D = feats.shape.size() >= 2 ? feats.shape[1] : 0;
  std::vector<Tensor<T>> out;
  out.reserve(neighbors.size());
  for (const auto& ns : neighbors) {
    const int k = static_cast<int>(ns.neighbor_indices.size());
    Tensor<T> rows = Tensor<T>::zeros({k, D + 3});
    for (int j = 0; j < k; ++j) {
      const int ri = ns.neighbor_indices[j];
      if (ri < 0 || (D > 0 && ri >= R)) {
        throw ShapeError("group_features: neighbor index " + std::to_string(ri) + " out of range");
      }
      for (int c = 0; c < D; ++c) rows(j, c) = feats(ri, c);
      for (int c = 0; c < 3; ++c) rows(j, D + c) = ns.displacements(j, c);
    }
    out.push_back(std::move(rows));
  }
  return out;
}

// Scatters the feature part of per-row gradients back onto d_feats; the
// displacement part optionally flows to query/reference positions.
template <typename T>
void group_features_backward(const std::vector<NeighborSet<T>>& neighbors, int feat_dim,
                             const std::vector<Tensor<T>>& d_rows, Tensor<T>& d_feats,
                             Tensor<T>* d_query_xyz = nullptr, Tensor<T>* d_ref_xyz = nullptr) {
  for (std::size_t g = 0; g < neighbors.size(); ++g) {
    const auto& ns = neighbors[g];
    const Tensor<T>& dr = d_rows[g];
    for (std::size_t j = 0; j < ns.neighbor_indices.size(); ++j) {
      const int ri = ns.neighbor_indices[j];
      for (int c = 0; c < feat_dim; ++c) d_feats(ri, c) += dr(static_cast<int>(j), c);
      if (d_query_xyz || d_ref_xyz) {
        for (int c = 0; c < 3; ++c) {
          const T dd = dr(static_cast<int>(j), feat_dim + c);
          if (d_ref_xyz) (*d_ref_xyz)(ri, c) += dd;
          if (d_query_xyz) (*d_query_xyz)(ns.query_index, c) -= dd;
        }
      }
    }
  }
}

// Cache of the inverse-distance 3-NN interpolation, kept for backward.
template <typename T>
struct InterpCache {
  int k = 0;
  std::vector<std::array<int, 3>> idx;
  std::vector<std::array<T, 3>> w;     // normalized weights
  std::vector<std::array<T, 3>> dist;  // Euclidean distances
  std::vector<bool> snapped;           // exact coincidence with idx[0]
};

inline constexpr double kInterpEps = 1e-8;

// Inverse-distance-weighted 3-NN feature interpolation. A target coinciding
// with a source point gets that source's feature exactly.
template <typename T>
Tensor<T> interpolate_features(const Tensor<T>& target_xyz, const Tensor<T>& source_xyz,
                               const Tensor<T>& source_feats, InterpCache<T>* cache = nullptr) {
  const int S = source_xyz.rows(), D = source_feats.cols();
  if (S == 0) throw ShapeError("interpolate_features: empty source");
  if (source_feats.rows() != S) {
    throw ShapeError("interpolate_features: feats rows " + source_feats.shape_str() +
                     " vs sources " + source_xyz.shape_str());
  }
  const int Tn = target_xyz.rows();
  const int k = std::min(3, S);
  KnnResult<T> nn = knn(target_xyz, source_xyz, k);
  Tensor<T> out = Tensor<T>::zeros({Tn, D});
  if (cache) {
    cache->k = k;
    cache->idx.assign(Tn, {0, 0, 0});
    cache->w.assign(Tn, {T(0), T(0), T(0)});
    cache->dist.assign(Tn, {T(0), T(0), T(0)});
    cache->snapped.assign(Tn, false);
  }
  for (int t = 0; t < Tn; ++t) {
    std::array<int, 3> idx{0, 0, 0};
    std::array<T, 3> d{T(0), T(0), T(0)};
    for (int j = 0; j < k; ++j) {
      idx[j] = nn.indices[static_cast<std::size_t>(t) * k + j];
      d[j] = nn.dists(t, j);
    }
    if (d[0] == T(0)) {
      for (int c = 0; c < D; ++c) out(t, c) = source_feats(idx[0], c);
      if (cache) {
        cache->idx[t] = idx;
        cache->dist[t] = d;
        cache->snapped[t] = true;
        cache->w[t][0] = T(1);
      }
      continue;
    }
    std::array<T, 3> w{T(0), T(0), T(0)};
    T sum = T(0);
    for (int j = 0; j < k; ++j) {
      w[j] = T(1) / (d[j] + static_cast<T>(kInterpEps));
      sum += w[j];
    }
    for (int j = 0; j < k; ++j) w[j] /= sum;
    for (int j = 0; j < k; ++j) {
      for (int c = 0; c < D; ++c) out(t, c) += w[j] * source_feats(idx[j], c);
    }
    if (cache) {
      cache->idx[t] = idx;
      cache->dist[t] = d;
      cache->w[t] = w;
    }
  }
  return out;
}

// Backward of interpolate_features. Feature gradients always flow; position
// gradients are produced only when the destination tensors are given (used on
// the propagated-point path, where positions depend on parameters).
template <typename T>
void interpolate_features_backward(const InterpCache<T>& cache, const Tensor<T>& target_xyz,
                                   const Tensor<T>& source_xyz, const Tensor<T>& source_feats,
                                   const Tensor<T>& d_out, Tensor<T>& d_source_feats,
                                   Tensor<T>* d_target_xyz = nullptr,
                                   Tensor<T>* d_source_xyz = nullptr) {
  const int Tn = static_cast<int>(cache.idx.size());
  const int D = source_feats.cols();
  for (int t = 0; t < Tn; ++t) {
    const auto& idx = cache.idx[t];
    const auto& w = cache.w[t];
    const auto& d = cache.dist[t];
    if (cache.snapped[t]) {
      for (int c = 0; c < D; ++c) d_source_feats(idx[0], c) += d_out(t, c);
      continue;  // the snap branch is locally constant in positions
    }
    for (int j = 0; j < cache.k; ++j) {
      for (int c = 0; c < D; ++c) d_source_feats(idx[j], c) += w[j] * d_out(t, c);
    }
    if (!d_target_xyz && !d_source_xyz) continue;
    // out = sum w_j f_j with w_j = u_j / S, u_j = 1/(d_j + eps).
    T usum = T(0);
    std::array<T, 3> u{T(0), T(0), T(0)};
    for (int j = 0; j < cache.k; ++j) {
      u[j] = T(1) / (d[j] + static_cast<T>(kInterpEps));
      usum += u[j];
    }
    for (int j = 0; j < cache.k; ++j) {
      // dL/dd_j = <d_out, f_j - out> * (-u_j^2) / S ; out = sum w f.
      T dot = T(0);
      for (int c = 0; c < D; ++c) {
        T outc = T(0);
        for (int jj = 0; jj < cache.k; ++jj) outc += w[jj] * source_feats(idx[jj], c);
        dot += d_out(t, c) * (source_feats(idx[j], c) - outc);
      }
      const T dLdd = dot * (-u[j] * u[j]) / usum;
      if (d[j] == T(0)) continue;
      for (int c = 0; c < 3; ++c) {
        const T dir = (target_xyz(t, c) - source_xyz(idx[j], c)) / d[j];
        if (d_target_xyz) (*d_target_xyz)(t, c) += dLdd * dir;
        if (d_source_xyz) (*d_source_xyz)(idx[j], c) -= dLdd * dir;
      }
    }
  }
}

// Uniform-grid accelerator. Must return exactly the brute-force results;
// checked against them in the test suite.
template <typename T>
class PointGrid {
 public:
  PointGrid(const Tensor<T>& points, double cell) : pts_(points), cell_(cell) {
    if (points.rows() == 0) throw ShapeError("PointGrid: empty point set");
    if (cell <= 0) throw ShapeError("PointGrid: cell must be > 0");
    for (int c = 0; c < 3; ++c) {
      min_[c] = points(0, c);
      for (int i = 1; i < points.rows(); ++i) min_[c] = std::min(min_[c], points(i, c));
    }
    cmin_ = cmax_ = cell_coords(points, 0);
    for (int i = 0; i < points.rows(); ++i) {
      const auto c = cell_coords(points, i);
      for (int d = 0; d < 3; ++d) {
        cmin_[d] = std::min(cmin_[d], c[d]);
        cmax_[d] = std::max(cmax_[d], c[d]);
      }
      cells_[key_of(c)].push_back(i);
    }
  }

  KnnResult<T> knn(const Tensor<T>& query, int k) const {
    const int Q = query.rows(), R = pts_.rows();
    KnnResult<T> res;
    res.k = k;
    res.indices.resize(static_cast<std::size_t>(Q) * k);
    res.dists = Tensor<T>::zeros({Q, k});
    for (int q = 0; q < Q; ++q) {
      std::vector<std::pair<T, int>> cand;
      const auto qc = cell_coords(query, q);
      const int kk = std::min(k, R);
      for (int ring = 0;; ++ring) {
        collect_ring(qc, ring, query, q, cand);
        std::sort(cand.begin(), cand.end());
        const double lb = ring * cell_;  // min distance to any cell beyond this ring
        if (static_cast<int>(cand.size()) >= kk &&
            static_cast<double>(cand[kk - 1].first) < lb * lb) {
          break;
        }
        if (ring > max_ring(qc)) break;
      }
      for (int j = 0; j < k; ++j) {
        const auto& c = cand[std::min(j, kk - 1)];
        res.indices[static_cast<std::size_t>(q) * k + j] = j < kk ? c.second : cand[0].second;
        res.dists(q, j) = std::sqrt(j < kk ? c.first : cand[0].first);
      }
    }
    return res;
  }

  std::vector<NeighborSet<T>> ball_query(const Tensor<T>& query, double radius, int max_k) const {
    const int Q = query.rows();
    const T r2 = static_cast<T>(radius * radius);
    const int reach = static_cast<int>(std::ceil(radius / cell_)) + 1;
    std::vector<NeighborSet<T>> out;
    out.reserve(Q);
    for (int q = 0; q < Q; ++q) {
      const auto qc = cell_coords(query, q);
      std::vector<int> idx;
      for (int dx = -reach; dx <= reach; ++dx) {
        for (int dy = -reach; dy <= reach; ++dy) {
          for (int dz = -reach; dz <= reach; ++dz) {
            auto it = cells_.find(key_of({qc[0] + dx, qc[1] + dy, qc[2] + dz}));
            if (it == cells_.end()) continue;
            for (int ri : it->second) {
              if (detail::sqdist3(query, q, pts_, ri) <= r2) idx.push_back(ri);
            }
          }
        }
      }
      std::sort(idx.begin(), idx.end());
      if (static_cast<int>(idx.size()) > max_k) idx.resize(max_k);
      if (idx.empty()) {
        auto nn1 = knn(query, 1);  // fallback, same rule as the brute-force path
        idx.push_back(nn1.indices[static_cast<std::size_t>(q)]);
      }
      out.push_back(detail::make_neighbor_set(q, query, pts_, std::move(idx)));
    }
    return out;
  }

 private:
  std::array<int, 3> cell_coords(const Tensor<T>& p, int i) const {
    std::array<int, 3> c;
    for (int d = 0; d < 3; ++d) {
      c[d] = static_cast<int>(std::floor((static_cast<double>(p(i, d)) - min_[d]) / cell_));
    }
    return c;
  }
  static std::int64_t key_of(const std::array<int, 3>& c) {
    const std::int64_t B = 1 << 20;
    return (static_cast<std::int64_t>(c[0]) * B + c[1]) * B + c[2];
  }
  // Largest ring that can still contain populated cells for this query cell.
  int max_ring(const std::array<int, 3>& qc) const {
    int m = 0;
    for (int d = 0; d < 3; ++d) {
      m = std::max(m, std::abs(qc[d] - cmin_[d]));
      m = std::max(m, std::abs(qc[d] - cmax_[d]));
    }
    return m;
  }
  void collect_ring(const std::array<int, 3>& qc, int ring, const Tensor<T>& query, int q,
                    std::vector<std::pair<T, int>>& cand) const {
    for (int dx = -ring; dx <= ring; ++dx) {
      for (int dy = -ring; dy <= ring; ++dy) {
        for (int dz = -ring; dz <= ring; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          auto it = cells_.find(key_of({qc[0] + dx, qc[1] + dy, qc[2] + dz}));
          if (it == cells_.end()) continue;
          for (int ri : it->second) cand.emplace_back(detail::sqdist3(query, q, pts_, ri), ri);
        }
      }
    }
  }

  Tensor<T> pts_;
  double cell_;
  std::array<double, 3> min_{};
  std::array<int, 3> cmin_{}, cmax_{};
  std::unordered_map<std::int64_t, std::vector<int>> cells_;
};

}  // namespace flowdet
