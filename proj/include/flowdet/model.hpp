#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowdet/losses.hpp"
#include "flowdet/nn.hpp"
#include "flowdet/pointops.hpp"

namespace flowdet {

struct BackboneConfig {
  int n_sample = 2048;
  int n_centroids = 256;
  double radius = 0.5;
  int max_k = 16;
  MlpSpec mlp = MlpSpec{{32, 64}, false};

  int feat_dim() const { return mlp.widths.back(); }
  void validate() const {
    if (n_centroids < 1 || n_sample < 1 || n_centroids > n_sample) {
      throw ConfigError("BackboneConfig: need 1 <= n_centroids <= n_sample");
    }
    if (radius <= 0 || max_k < 1) throw ConfigError("BackboneConfig: radius > 0, max_k >= 1");
    if (mlp.widths.empty()) throw ConfigError("BackboneConfig: empty mlp");
  }
};

struct FlowHeadConfig {
  int embed_k = 16;
  MlpSpec embed_mlp = MlpSpec{{64, 64}, false};
  double setconv_radius = 1.0;
  int setconv_k = 16;
  MlpSpec setconv_mlp = MlpSpec{{64, 64}, false};
  MlpSpec upconv_mlp = MlpSpec{{64, 64}, false};
  MlpSpec fc = MlpSpec{{3}, true};

  void validate() const {
    if (fc.widths.empty() || fc.widths.back() != 3 || !fc.final_linear) {
      throw ConfigError("FlowHeadConfig: fc must end in a linear width-3 layer");
    }
    if (embed_k < 1 || setconv_k < 1 || setconv_radius <= 0) {
      throw ConfigError("FlowHeadConfig: embed_k/setconv_k >= 1, setconv_radius > 0");
    }
    if (embed_mlp.widths.empty() || setconv_mlp.widths.empty() || upconv_mlp.widths.empty()) {
      throw ConfigError("FlowHeadConfig: empty mlp");
    }
  }
};

struct ModelConfig {
  BackboneConfig backbone;
  FlowHeadConfig flow;
  DetectHeadConfig detect;

  void validate() const {
    backbone.validate();
    flow.validate();
    if (detect.bev_cells < 1 || detect.bev_extent <= 0 || detect.reg_channels != 8) {
      throw ConfigError("DetectHeadConfig: bev_cells >= 1, bev_extent > 0, reg_channels == 8");
    }
  }
};

// Named parameters partitioned into the g.* / s.* / h.* namespaces of the
// backbone, flow head and detection head.
template <typename T>
struct ModelParams {
  ParamMap<T> params;
  ModelConfig cfg;
  std::string version = "1";

  void zero_grads() {
    for (auto& [name, p] : params) p.zero_grad();
  }
};

template <typename T>
ModelParams<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> m;
  m.cfg = cfg;
  std::mt19937_64 rng(seed);
  const int D = cfg.backbone.feat_dim();
  mlp_init(m.params, "g.mlp", 3, cfg.backbone.mlp, rng);

  const int E = cfg.flow.embed_mlp.widths.back();
  const int S = cfg.flow.setconv_mlp.widths.back();
  const int U = cfg.flow.upconv_mlp.widths.back();
  mlp_init(m.params, "s.embed", 2 * D + 3, cfg.flow.embed_mlp, rng);
  mlp_init(m.params, "s.setconv", E + 3, cfg.flow.setconv_mlp, rng);
  mlp_init(m.params, "s.upconv", S + D, cfg.flow.upconv_mlp, rng);
  mlp_init(m.params, "s.fc", U, cfg.flow.fc, rng);

  const int cc = cfg.detect.conv_channels;
  auto he = [&](int fan_in, std::vector<int> shape) {
    return randn<T>(std::move(shape), rng, std::sqrt(2.0 / fan_in));
  };
  m.params.emplace("h.conv0.w", Parameter<T>("h.conv0.w", he(9 * D, {9 * D, cc})));
  m.params.emplace("h.conv0.b", Parameter<T>("h.conv0.b", Tensor<T>::zeros({cc})));
  m.params.emplace("h.conv1.w", Parameter<T>("h.conv1.w", he(9 * cc, {9 * cc, cc})));
  m.params.emplace("h.conv1.b", Parameter<T>("h.conv1.b", Tensor<T>::zeros({cc})));
  m.params.emplace("h.hm.w", Parameter<T>("h.hm.w", randn<T>({cc, 1}, rng, 0.01)));
  // bias so the untrained heatmap sits near 0.01 (focal-loss friendly start)
  Tensor<T> hm_b = Tensor<T>::zeros({1});
  hm_b(0) = static_cast<T>(std::log(0.01 / 0.99));
  m.params.emplace("h.hm.b", Parameter<T>("h.hm.b", std::move(hm_b)));
  m.params.emplace("h.reg.w",
                   Parameter<T>("h.reg.w", randn<T>({cc, cfg.detect.reg_channels}, rng, 0.01)));
  m.params.emplace("h.reg.b",
                   Parameter<T>("h.reg.b", Tensor<T>::zeros({cfg.detect.reg_channels})));
  return m;
}

namespace detail {
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, const std::vector<int>& idx) {
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(idx.size()), src.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (int c = 0; c < src.cols(); ++c) out(static_cast<int>(i), c) = src(idx[i], c);
  }
  return out;
}

template <typename T>
Tensor<T> row_of(const Tensor<T>& m, int i) {
  Tensor<T> out = Tensor<T>::zeros({m.cols()});
  for (int c = 0; c < m.cols(); ++c) out(c) = m(i, c);
  return out;
}
}  // namespace detail

// Per-frame encoding plus everything the backward pass needs.
template <typename T>
struct BackboneOut {
  std::vector<int> sample_idx;    // into the raw cloud
  std::vector<int> centroid_idx;  // into sampled_xyz
  Tensor<T> sampled_xyz;          // [n_sample x 3]
  Tensor<T> centroids;            // [n_centroids x 3]
  Tensor<T> centroid_feats;       // [n_centroids x D]
  Tensor<T> sampled_feats;        // [n_sample x D]

  std::vector<NeighborSet<T>> groups;
  std::vector<MlpCache<T>> mlp_caches;
  std::vector<std::vector<int>> pool_argmax;
  InterpCache<T> interp;
};

// FPS twice, displacement-only set conv per centroid, then inverse-distance
// feature propagation back to the sampled points.
template <typename T>
BackboneOut<T> backbone_forward(const PointCloud<T>& cloud, const BackboneConfig& cfg,
                                ParamMap<T>& params, std::uint64_t seed) {
  cfg.validate();
  if (cloud.size() == 0) throw ShapeError("backbone_forward: empty cloud");
  BackboneOut<T> out;
  out.sample_idx = farthest_point_sample(cloud.xyz, cfg.n_sample, seed);
  out.sampled_xyz = detail::gather_rows(cloud.xyz, out.sample_idx);
  out.centroid_idx =
      farthest_point_sample(out.sampled_xyz, cfg.n_centroids, seed ^ 0xda3e39cb94b95bdbULL);
  out.centroids = detail::gather_rows(out.sampled_xyz, out.centroid_idx);
  out.groups = ball_query(out.centroids, out.sampled_xyz, cfg.radius, cfg.max_k);
  auto rows = group_features(out.groups, Tensor<T>{});  // D = 0: pure displacements
  const int D = cfg.feat_dim();
  out.centroid_feats = Tensor<T>::zeros({cfg.n_centroids, D});
  out.mlp_caches.resize(out.groups.size());
  out.pool_argmax.resize(out.groups.size());
  for (std::size_t i = 0; i < out.groups.size(); ++i) {
    Tensor<T> h = mlp_forward(params, "g.mlp", cfg.mlp, rows[i], &out.mlp_caches[i]);
    auto pooled = max_pool_rows(h);
    for (int c = 0; c < D; ++c) out.centroid_feats(static_cast<int>(i), c) = pooled.values(c);
    out.pool_argmax[i] = std::move(pooled.argmax);
  }
  out.sampled_feats =
      interpolate_features(out.sampled_xyz, out.centroids, out.centroid_feats, &out.interp);
  return out;
}

// Accumulates g.* gradients from gradients on the encoding's two feature
// outputs. Raw point positions take no gradients on this path.
template <typename T>
void backbone_backward(const BackboneOut<T>& enc, const BackboneConfig& cfg, ParamMap<T>& params,
                       const Tensor<T>& d_sampled_feats, const Tensor<T>& d_centroid_feats) {
  Tensor<T> d_cent = !d_centroid_feats.data.empty()
                         ? d_centroid_feats
                         : Tensor<T>::zeros(enc.centroid_feats.shape);
  if (!d_sampled_feats.data.empty()) {
    interpolate_features_backward(enc.interp, enc.sampled_xyz, enc.centroids, enc.centroid_feats,
                                  d_sampled_feats, d_cent);
  }
  for (std::size_t i = 0; i < enc.groups.size(); ++i) {
    const int K = static_cast<int>(enc.groups[i].neighbor_indices.size());
    Tensor<T> dy = detail::row_of(d_cent, static_cast<int>(i));
    Tensor<T> d_rows = max_pool_rows_backward(enc.pool_argmax[i], K, dy);
    mlp_backward(params, "g.mlp", cfg.mlp, enc.mlp_caches[i], d_rows);  // d_input discarded
  }
}

// A propagated-point cloud re-encoded without running the backbone: geometry
// from the new positions, features carried over from the source encoding.
template <typename T>
BackboneOut<T> pseudo_encoding(const Tensor<T>& xyz, const BackboneOut<T>& source) {
  BackboneOut<T> out;
  out.sample_idx = source.sample_idx;
  out.centroid_idx = source.centroid_idx;
  out.sampled_xyz = xyz;
  out.centroids = detail::gather_rows(xyz, source.centroid_idx);
  out.centroid_feats = source.centroid_feats;
  out.sampled_feats = source.sampled_feats;
  return out;
}

template <typename T>
struct FlowHeadCache {
  // flow embedding over frame-1 centroids
  KnnResult<T> embed_nn;
  std::vector<MlpCache<T>> embed_caches;
  std::vector<std::vector<int>> embed_argmax;
  Tensor<T> embed_feats;  // [n_c x E]
  // set conv over frame-1 centroids
  std::vector<NeighborSet<T>> sc_groups;
  std::vector<MlpCache<T>> sc_caches;
  std::vector<std::vector<int>> sc_argmax;
  Tensor<T> refined;  // [n_c x S]
  // set upconv to frame-1 samples
  InterpCache<T> up_interp;
  Tensor<T> up_feats;  // [n x S]
  Tensor<T> concat;    // [n x (S + D)]
  MlpCache<T> up_cache;
  Tensor<T> up_out;  // [n x U]
  MlpCache<T> fc_cache;
};

// Flow embedding -> set conv -> set upconv -> fc; flow over frame-1 samples.
template <typename T>
Tensor<T> flow_head_forward(const BackboneOut<T>& f1, const BackboneOut<T>& f2,
                            const FlowHeadConfig& cfg, ParamMap<T>& params,
                            FlowHeadCache<T>* cache = nullptr) {
  cfg.validate();
  const int D = f1.centroid_feats.cols();
  if (f2.centroid_feats.cols() != D) {
    throw ConfigError("flow_head_forward: frames encoded with different feature widths");
  }
  const int n_c = f1.centroids.rows();
  const int E = cfg.embed_mlp.widths.back();
  FlowHeadCache<T> local;
  FlowHeadCache<T>& c = cache ? *cache : local;

  c.embed_nn = knn(f1.centroids, f2.centroids, cfg.embed_k);
  c.embed_caches.resize(n_c);
  c.embed_argmax.resize(n_c);
  c.embed_feats = Tensor<T>::zeros({n_c, E});
  for (int i = 0; i < n_c; ++i) {
    Tensor<T> rows = Tensor<T>::zeros({cfg.embed_k, 2 * D + 3});
    for (int j = 0; j < cfg.embed_k; ++j) {
      const int nj = c.embed_nn.indices[static_cast<std::size_t>(i) * cfg.embed_k + j];
      for (int d = 0; d < D; ++d) {
        rows(j, d) = f1.centroid_feats(i, d);
        rows(j, D + d) = f2.centroid_feats(nj, d);
      }
      for (int d = 0; d < 3; ++d) rows(j, 2 * D + d) = f2.centroids(nj, d) - f1.centroids(i, d);
    }
    Tensor<T> h = mlp_forward(params, "s.embed", cfg.embed_mlp, rows, &c.embed_caches[i]);
    auto pooled = max_pool_rows(h);
    for (int d = 0; d < E; ++d) c.embed_feats(i, d) = pooled.values(d);
    c.embed_argmax[i] = std::move(pooled.argmax);
  }

  const int S = cfg.setconv_mlp.widths.back();
  c.sc_groups = ball_query(f1.centroids, f1.centroids, cfg.setconv_radius, cfg.setconv_k);
  auto sc_rows = group_features(c.sc_groups, c.embed_feats);
  c.sc_caches.resize(n_c);
  c.sc_argmax.resize(n_c);
  c.refined = Tensor<T>::zeros({n_c, S});
  for (int i = 0; i < n_c; ++i) {
    Tensor<T> h = mlp_forward(params, "s.setconv", cfg.setconv_mlp, sc_rows[i], &c.sc_caches[i]);
    auto pooled = max_pool_rows(h);
    for (int d = 0; d < S; ++d) c.refined(i, d) = pooled.values(d);
    c.sc_argmax[i] = std::move(pooled.argmax);
  }

  c.up_feats = interpolate_features(f1.sampled_xyz, f1.centroids, c.refined, &c.up_interp);
  const int n = f1.sampled_xyz.rows();
  c.concat = Tensor<T>::zeros({n, S + D});
  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < S; ++d) c.concat(i, d) = c.up_feats(i, d);
    for (int d = 0; d < D; ++d) c.concat(i, S + d) = f1.sampled_feats(i, d);
  }
  c.up_out = mlp_forward(params, "s.upconv", cfg.upconv_mlp, c.concat, &c.up_cache);
  return mlp_forward(params, "s.fc", cfg.fc, c.up_out, &c.fc_cache);
}

template <typename T>
struct FlowHeadGrads {
  Tensor<T> d_f1_sampled_feats;   // [n x D]
  Tensor<T> d_f1_centroid_feats;  // [n_c x D]
  Tensor<T> d_f2_centroid_feats;  // [n_c x D]
  // frame-1 geometry gradients, used only when frame 1 is a propagated cloud
  Tensor<T> d_f1_sampled_xyz;   // [n x 3]
  Tensor<T> d_f1_centroid_xyz;  // [n_c x 3]
};

// Accumulates s.* gradients and returns gradients on the head's inputs.
// Frame-2 positions are raw measurements and take no gradients.
template <typename T>
FlowHeadGrads<T> flow_head_backward(const BackboneOut<T>& f1, const BackboneOut<T>& f2,
                                    const FlowHeadConfig& cfg, ParamMap<T>& params,
                                    const FlowHeadCache<T>& c, const Tensor<T>& d_flow) {
  const int D = f1.centroid_feats.cols();
  const int n_c = f1.centroids.rows();
  const int E = cfg.embed_mlp.widths.back();
  const int S = cfg.setconv_mlp.widths.back();
  const int n = f1.sampled_xyz.rows();
  FlowHeadGrads<T> g;
  g.d_f1_sampled_feats = Tensor<T>::zeros({n, D});
  g.d_f1_centroid_feats = Tensor<T>::zeros({n_c, D});
  g.d_f2_centroid_feats = Tensor<T>::zeros({n_c, D});
  g.d_f1_sampled_xyz = Tensor<T>::zeros({n, 3});
  g.d_f1_centroid_xyz = Tensor<T>::zeros({n_c, 3});

  Tensor<T> d_up_out = mlp_backward(params, "s.fc", cfg.fc, c.fc_cache, d_flow);
  Tensor<T> d_concat = mlp_backward(params, "s.upconv", cfg.upconv_mlp, c.up_cache, d_up_out);
  Tensor<T> d_up_feats = Tensor<T>::zeros({n, S});
  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < S; ++d) d_up_feats(i, d) = d_concat(i, d);
    for (int d = 0; d < D; ++d) g.d_f1_sampled_feats(i, d) = d_concat(i, S + d);
  }

  Tensor<T> d_refined = Tensor<T>::zeros({n_c, S});
  interpolate_features_backward(c.up_interp, f1.sampled_xyz, f1.centroids, c.refined, d_up_feats,
                                d_refined, &g.d_f1_sampled_xyz, &g.d_f1_centroid_xyz);

  Tensor<T> d_embed = Tensor<T>::zeros({n_c, E});
  std::vector<Tensor<T>> d_sc_rows(n_c);
  for (int i = 0; i < n_c; ++i) {
    const int K = static_cast<int>(c.sc_groups[i].neighbor_indices.size());
    Tensor<T> dy = detail::row_of(d_refined, i);
    Tensor<T> d_pool = max_pool_rows_backward(c.sc_argmax[i], K, dy);
    d_sc_rows[i] = mlp_backward(params, "s.setconv", cfg.setconv_mlp, c.sc_caches[i], d_pool);
  }
  group_features_backward(c.sc_groups, E, d_sc_rows, d_embed, &g.d_f1_centroid_xyz,
                          &g.d_f1_centroid_xyz);

  for (int i = 0; i < n_c; ++i) {
    Tensor<T> dy = detail::row_of(d_embed, i);
    Tensor<T> d_pool = max_pool_rows_backward(c.embed_argmax[i], cfg.embed_k, dy);
    Tensor<T> d_rows = mlp_backward(params, "s.embed", cfg.embed_mlp, c.embed_caches[i], d_pool);
    for (int j = 0; j < cfg.embed_k; ++j) {
      const int nj = c.embed_nn.indices[static_cast<std::size_t>(i) * cfg.embed_k + j];
      for (int d = 0; d < D; ++d) {
        g.d_f1_centroid_feats(i, d) += d_rows(j, d);
        g.d_f2_centroid_feats(nj, d) += d_rows(j, D + d);
      }
      // displacement = c2 - c1: only the frame-1 end is differentiable here
      for (int d = 0; d < 3; ++d) g.d_f1_centroid_xyz(i, d) -= d_rows(j, 2 * D + d);
    }
  }
  return g;
}

template <typename T>
struct FlowPass {
  BackboneOut<T> enc1, enc2, enc_prime;
  Tensor<T> flow_fwd, p_prime, flow_bwd, p_dprime;
  FlowHeadCache<T> fwd_cache, bwd_cache;
};

// Forward flow from frame t, propagate, then backward flow from the
// propagated cloud re-encoded against frame t (shared weights).
template <typename T>
FlowPass<T> forward_backward_flow(const PointCloud<T>& frame_t, const PointCloud<T>& frame_t1,
                                  ModelParams<T>& model, std::uint64_t seed) {
  FlowPass<T> fp;
  fp.enc1 = backbone_forward(frame_t, model.cfg.backbone, model.params, seed);
  fp.enc2 = backbone_forward(frame_t1, model.cfg.backbone, model.params, seed + 1);
  fp.flow_fwd = flow_head_forward(fp.enc1, fp.enc2, model.cfg.flow, model.params, &fp.fwd_cache);
  fp.p_prime = fp.enc1.sampled_xyz;
  for (std::size_t i = 0; i < fp.p_prime.data.size(); ++i) fp.p_prime.data[i] += fp.flow_fwd.data[i];
  fp.enc_prime = pseudo_encoding(fp.p_prime, fp.enc1);
  fp.flow_bwd =
      flow_head_forward(fp.enc_prime, fp.enc1, model.cfg.flow, model.params, &fp.bwd_cache);
  fp.p_dprime = fp.p_prime;
  for (std::size_t i = 0; i < fp.p_dprime.data.size(); ++i) {
    fp.p_dprime.data[i] += fp.flow_bwd.data[i];
  }
  return fp;
}

// One self-supervised training evaluation: loss value plus accumulated
// gradients on every g.* and s.* parameter. Reads no labels.
template <typename T>
FlowLossReport flow_loss_and_grad(const PointCloud<T>& frame_t, const PointCloud<T>& frame_t1,
                                  ModelParams<T>& model, std::uint64_t seed,
                                  FlowPass<T>* pass_out = nullptr,
                                  double reverse_weight = 1.0) {
  FlowPass<T> fp = forward_backward_flow(frame_t, frame_t1, model, seed);
  // the NN target is the full frame t+1 cloud: denser than the FPS sample,
  // which keeps the loss floor well below the motion scale. Training enables
  // the reverse correspondence term; without it the all-zero flow is a strong
  // local minimum on mostly-static scenes.
  auto loss = flow_total_loss(fp.enc1.sampled_xyz, frame_t1.xyz, fp.p_prime, fp.p_dprime,
                              DistanceForm::kSquared, reverse_weight);

  // p'' = p' + F_bwd; cycle grad lands on both summands
  const Tensor<T>& d_flow_bwd = loss.d_reconstructed;
  Tensor<T> d_p_prime = loss.d_propagated;
  for (std::size_t i = 0; i < d_p_prime.data.size(); ++i) {
    d_p_prime.data[i] += loss.d_reconstructed.data[i];
  }

  auto g_bwd = flow_head_backward(fp.enc_prime, fp.enc1, model.cfg.flow, model.params,
                                  fp.bwd_cache, d_flow_bwd);
  // the propagated cloud's geometry is differentiable: fold its position
  // gradients back onto p' (centroids are rows of p')
  for (std::size_t i = 0; i < d_p_prime.data.size(); ++i) {
    d_p_prime.data[i] += g_bwd.d_f1_sampled_xyz.data[i];
  }
  for (std::size_t i = 0; i < fp.enc1.centroid_idx.size(); ++i) {
    const int ci = fp.enc1.centroid_idx[i];
    for (int c = 0; c < 3; ++c) {
      d_p_prime(ci, c) += g_bwd.d_f1_centroid_xyz(static_cast<int>(i), c);
    }
  }

  // p' = samples + F_fwd with non-differentiable samples
  auto g_fwd = flow_head_backward(fp.enc1, fp.enc2, model.cfg.flow, model.params, fp.fwd_cache,
                                  d_p_prime);

  // frame-t features feed the forward head and (re-used) the backward head
  Tensor<T> d_s1 = g_fwd.d_f1_sampled_feats;
  for (std::size_t i = 0; i < d_s1.data.size(); ++i) {
    d_s1.data[i] += g_bwd.d_f1_sampled_feats.data[i];
  }
  Tensor<T> d_c1 = g_fwd.d_f1_centroid_feats;
  for (std::size_t i = 0; i < d_c1.data.size(); ++i) {
    d_c1.data[i] += g_bwd.d_f1_centroid_feats.data[i] + g_bwd.d_f2_centroid_feats.data[i];
  }
  backbone_backward(fp.enc1, model.cfg.backbone, model.params, d_s1, d_c1);
  backbone_backward(fp.enc2, model.cfg.backbone, model.params, Tensor<T>{},
                    g_fwd.d_f2_centroid_feats);
  if (pass_out) *pass_out = std::move(fp);
  return loss.report;
}

namespace detail {
// w laid out [(ky*3 + kx)*Din + ci, co]; zero padding, stride 1.
template <typename T>
Tensor<T> conv3x3_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
  const int C = in.shape[0], Din = in.shape[2], Dout = w.cols();
  if (w.rows() != 9 * Din) throw ShapeError("conv3x3: weight " + w.shape_str());
  Tensor<T> out = Tensor<T>::zeros({C, C, Dout});
  for (int i = 0; i < C; ++i) {
    for (int j = 0; j < C; ++j) {
      for (int ky = -1; ky <= 1; ++ky) {
        const int ii = i + ky;
        if (ii < 0 || ii >= C) continue;
        for (int kx = -1; kx <= 1; ++kx) {
          const int jj = j + kx;
          if (jj < 0 || jj >= C) continue;
          const int tap = ((ky + 1) * 3 + (kx + 1)) * Din;
          for (int ci = 0; ci < Din; ++ci) {
            const T v = in(ii, jj, ci);
            if (v == T(0)) continue;
            for (int co = 0; co < Dout; ++co) out(i, j, co) += v * w(tap + ci, co);
          }
        }
      }
      for (int co = 0; co < Dout; ++co) out(i, j, co) += b(co);
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv3x3_backward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& d_out,
                           Tensor<T>& dw, Tensor<T>& db) {
  const int C = in.shape[0], Din = in.shape[2], Dout = w.cols();
  Tensor<T> d_in = Tensor<T>::zeros(in.shape);
  for (int i = 0; i < C; ++i) {
    for (int j = 0; j < C; ++j) {
      for (int co = 0; co < Dout; ++co) {
        const T d = d_out(i, j, co);
        if (d == T(0)) continue;
        db(co) += d;
        for (int ky = -1; ky <= 1; ++ky) {
          const int ii = i + ky;
          if (ii < 0 || ii >= C) continue;
          for (int kx = -1; kx <= 1; ++kx) {
            const int jj = j + kx;
            if (jj < 0 || jj >= C) continue;
            const int tap = ((ky + 1) * 3 + (kx + 1)) * Din;
            for (int ci = 0; ci < Din; ++ci) {
              dw(tap + ci, co) += d * in(ii, jj, ci);
              d_in(ii, jj, ci) += d * w(tap + ci, co);
            }
          }
        }
      }
    }
  }
  return d_in;
}
}  // namespace detail

template <typename T>
struct DetectCache {
  std::vector<int> cell_of;         // per sampled point, -1 outside the extent
  std::vector<int> scatter_argmax;  // [C*C*D] point index per (cell, channel), -1 empty
  Tensor<T> grid;                   // [C x C x D]
  Tensor<T> a0_pre, a0, a1_pre, a1;
  Tensor<T> hm_pre;  // [C x C]
  bool empty_grid = false;
};

template <typename T>
struct DetectOut {
  Tensor<T> heatmap;  // [C x C] in (0,1)
  Tensor<T> regmap;   // [C x C x 8]
};

// BEV scatter + per-cell max-pool, two 3x3 conv+ReLU blocks, 1x1 heads.
template <typename T>
DetectOut<T> detect_head_forward(const BackboneOut<T>& enc, const DetectHeadConfig& cfg,
                                 ParamMap<T>& params, DetectCache<T>* cache = nullptr) {
  const int C = cfg.bev_cells;
  const int D = enc.sampled_feats.cols();
  const int n = enc.sampled_xyz.rows();
  const double cs = cfg.cell_size();
  DetectCache<T> local;
  DetectCache<T>& c = cache ? *cache : local;
  c.grid = Tensor<T>::zeros({C, C, D});
  c.cell_of.assign(n, -1);
  c.scatter_argmax.assign(static_cast<std::size_t>(C) * C * D, -1);
  int in_extent = 0;
  for (int i = 0; i < n; ++i) {
    const int cx = static_cast<int>(
        std::floor((static_cast<double>(enc.sampled_xyz(i, 0)) + cfg.bev_extent) / cs));
    const int cy = static_cast<int>(
        std::floor((static_cast<double>(enc.sampled_xyz(i, 1)) + cfg.bev_extent) / cs));
    if (cx < 0 || cx >= C || cy < 0 || cy >= C) continue;
    c.cell_of[i] = cx * C + cy;
    ++in_extent;
    for (int d = 0; d < D; ++d) {
      const std::size_t slot = (static_cast<std::size_t>(cx) * C + cy) * D + d;
      if (c.scatter_argmax[slot] < 0 || enc.sampled_feats(i, d) > c.grid(cx, cy, d)) {
        c.grid(cx, cy, d) = enc.sampled_feats(i, d);
        c.scatter_argmax[slot] = i;
      }
    }
  }
  c.empty_grid = (in_extent == 0);

  c.a0_pre = detail::conv3x3_forward(c.grid, param_at(params, "h.conv0.w").value,
                                     param_at(params, "h.conv0.b").value);
  c.a0 = relu_forward(c.a0_pre);
  c.a1_pre = detail::conv3x3_forward(c.a0, param_at(params, "h.conv1.w").value,
                                     param_at(params, "h.conv1.b").value);
  c.a1 = relu_forward(c.a1_pre);

  const int cc = c.a1.shape[2];
  Tensor<T> flat = c.a1;
  flat.shape = {C * C, cc};
  Tensor<T> hm_pre =
      linear_forward(flat, param_at(params, "h.hm.w").value, param_at(params, "h.hm.b").value);
  Tensor<T> reg =
      linear_forward(flat, param_at(params, "h.reg.w").value, param_at(params, "h.reg.b").value);
  DetectOut<T> out;
  out.heatmap = Tensor<T>::zeros({C, C});
  c.hm_pre = Tensor<T>::zeros({C, C});
  for (int i = 0; i < C * C; ++i) {
    c.hm_pre.data[i] = hm_pre(i, 0);
    out.heatmap.data[i] = T(1) / (T(1) + std::exp(-hm_pre(i, 0)));
  }
  out.regmap = std::move(reg);
  out.regmap.shape = {C, C, cfg.reg_channels};
  return out;
}

// Accumulates h.* gradients and returns the gradient on the point features.
template <typename T>
Tensor<T> detect_head_backward(const BackboneOut<T>& enc, const DetectHeadConfig& cfg,
                               ParamMap<T>& params, const DetectCache<T>& c,
                               const Tensor<T>& d_heatmap, const Tensor<T>& d_regmap) {
  const int C = cfg.bev_cells;
  const int D = enc.sampled_feats.cols();
  const int cc = c.a1.shape[2];

  Tensor<T> d_hm_pre = Tensor<T>::zeros({C * C, 1});
  for (int i = 0; i < C * C; ++i) {
    const T s = T(1) / (T(1) + std::exp(-c.hm_pre.data[i]));
    d_hm_pre(i, 0) = d_heatmap.data[i] * s * (T(1) - s);
  }
  Tensor<T> d_reg_flat = d_regmap;
  d_reg_flat.shape = {C * C, cfg.reg_channels};
  Tensor<T> flat = c.a1;
  flat.shape = {C * C, cc};

  auto& hm_w = param_at(params, "h.hm.w");
  auto& hm_b = param_at(params, "h.hm.b");
  LinearGrads<T> gh = linear_backward(flat, hm_w.value, d_hm_pre);
  for (std::size_t k = 0; k < gh.dw.data.size(); ++k) hm_w.grad.data[k] += gh.dw.data[k];
  for (std::size_t k = 0; k < gh.db.data.size(); ++k) hm_b.grad.data[k] += gh.db.data[k];
  auto& reg_w = param_at(params, "h.reg.w");
  auto& reg_b = param_at(params, "h.reg.b");
  LinearGrads<T> gr = linear_backward(flat, reg_w.value, d_reg_flat);
  for (std::size_t k = 0; k < gr.dw.data.size(); ++k) reg_w.grad.data[k] += gr.dw.data[k];
  for (std::size_t k = 0; k < gr.db.data.size(); ++k) reg_b.grad.data[k] += gr.db.data[k];

  Tensor<T> d_a1 = gh.dx;
  for (std::size_t k = 0; k < d_a1.data.size(); ++k) d_a1.data[k] += gr.dx.data[k];
  d_a1.shape = {C, C, cc};
  Tensor<T> d_a1_pre = relu_backward(c.a1_pre, d_a1);
  auto& c1_w = param_at(params, "h.conv1.w");
  auto& c1_b = param_at(params, "h.conv1.b");
  Tensor<T> d_a0 = detail::conv3x3_backward(c.a0, c1_w.value, d_a1_pre, c1_w.grad, c1_b.grad);
  Tensor<T> d_a0_pre = relu_backward(c.a0_pre, d_a0);
  auto& c0_w = param_at(params, "h.conv0.w");
  auto& c0_b = param_at(params, "h.conv0.b");
  Tensor<T> d_grid = detail::conv3x3_backward(c.grid, c0_w.value, d_a0_pre, c0_w.grad, c0_b.grad);

  Tensor<T> d_feats = Tensor<T>::zeros(enc.sampled_feats.shape);
  for (int cx = 0; cx < C; ++cx) {
    for (int cy = 0; cy < C; ++cy) {
      for (int d = 0; d < D; ++d) {
        const int pi = c.scatter_argmax[(static_cast<std::size_t>(cx) * C + cy) * D + d];
        if (pi >= 0) d_feats(pi, d) += d_grid(cx, cy, d);
      }
    }
  }
  return d_feats;
}

// One supervised detection evaluation: loss plus gradients on g.* and h.*.
template <typename T>
DetectionLossReport detect_loss_and_grad(const PointCloud<T>& frame, const std::vector<Box>& boxes,
                                         ModelParams<T>& model, std::uint64_t seed,
                                         DetectOut<T>* out_pred = nullptr) {
  auto enc = backbone_forward(frame, model.cfg.backbone, model.params, seed);
  DetectCache<T> cache;
  auto pred = detect_head_forward(enc, model.cfg.detect, model.params, &cache);
  auto targets = make_detection_targets<T>(boxes, model.cfg.detect);
  auto loss = detection_total_loss(pred.heatmap, pred.regmap, targets);
  Tensor<T> d_feats =
      detect_head_backward(enc, model.cfg.detect, model.params, cache, loss.d_heatmap, loss.d_reg);
  backbone_backward(enc, model.cfg.backbone, model.params, d_feats, Tensor<T>{});
  if (out_pred) *out_pred = std::move(pred);
  return loss.report;
}

}  // namespace flowdet
