#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flowdet/checkpoint.hpp"
#include "flowdet/config.hpp"
#include "flowdet/data.hpp"
#include "flowdet/eval.hpp"
#include "flowdet/model.hpp"
#include "flowdet/optim.hpp"

namespace flowdet {

// The view handed to the self-supervised path: frames only, no label access.
template <typename T>
struct FlowPairView {
  const PointCloud<T>& frame_t;
  const PointCloud<T>& frame_t1;
};

template <typename T>
struct SyntheticDataset {
  std::vector<SceneSample<T>> scenes;
  int n_train = 0;

  static SyntheticDataset make(const DatasetSpec& spec, std::uint64_t seed) {
    spec.generator.validate();
    SyntheticDataset out;
    out.scenes.reserve(spec.n_scenes);
    for (int i = 0; i < spec.n_scenes; ++i) {
      out.scenes.push_back(
          generate_scene<T>(spec.generator, seed * 6364136223846793005ULL + i + 1));
    }
    const int n_val = std::max(1, static_cast<int>(std::floor(spec.val_fraction * spec.n_scenes)));
    out.n_train = spec.n_scenes - n_val;
    if (out.n_train < 1) throw ConfigError("SyntheticDataset: no training scenes left");
    return out;
  }

  FlowPairView<T> flow_pair(int i) const { return {scenes[i].frame_t, scenes[i].frame_t1}; }

  std::vector<int> train_ids() const {
    std::vector<int> ids(n_train);
    for (int i = 0; i < n_train; ++i) ids[i] = i;
    return ids;
  }
  std::vector<int> val_ids() const {
    std::vector<int> ids;
    for (int i = n_train; i < static_cast<int>(scenes.size()); ++i) ids.push_back(i);
    return ids;
  }
};

// Append-only CSV with strictly increasing steps.
class CsvLog {
 public:
  void open(const std::string& path, const std::vector<std::string>& columns) {
    out_.open(path);
    if (!out_) throw FormatError("CsvLog: cannot open " + path);
    n_cols_ = columns.size();
    out_ << "step";
    for (const auto& c : columns) out_ << "," << c;
    out_ << "\n";
  }
  void row(std::int64_t step, const std::vector<double>& values) {
    if (step <= last_step_) {
      throw ConfigError("CsvLog: step " + std::to_string(step) + " not increasing");
    }
    if (values.size() != n_cols_) throw ShapeError("CsvLog: column count mismatch");
    last_step_ = step;
    out_ << step;
    for (double v : values) out_ << "," << v;
    out_ << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::int64_t last_step_ = -1;
  std::size_t n_cols_ = 0;
};

struct FlowEvalSummary {
  double epe = 0;
  double epe_zero = 0;  // zero-flow predictor baseline
  double loss = 0;
};

template <typename T>
FlowEvalSummary flow_eval_on(ModelParams<T>& model, const SyntheticDataset<T>& data,
                             const std::vector<int>& ids, bool strip_ground = false,
                             double ground_z = 0.2) {
  FlowEvalSummary s;
  for (int id : ids) {
    const auto& scene = data.scenes[id];
    GroundFilterResult<T> f_t, f_t1;
    if (strip_ground) {
      f_t = remove_ground(scene.frame_t, ground_z);
      f_t1 = remove_ground(scene.frame_t1, ground_z);
    }
    const PointCloud<T>& frame_t = strip_ground ? f_t.cloud : scene.frame_t;
    const PointCloud<T>& frame_t1 = strip_ground ? f_t1.cloud : scene.frame_t1;
    auto fp = forward_backward_flow(frame_t, frame_t1, model, scene.seed);
    Tensor<T> gt = Tensor<T>::zeros(fp.flow_fwd.shape);
    for (std::size_t i = 0; i < fp.enc1.sample_idx.size(); ++i) {
      const int row = strip_ground ? f_t.orig_idx[fp.enc1.sample_idx[i]] : fp.enc1.sample_idx[i];
      for (int c = 0; c < 3; ++c) {
        gt(static_cast<int>(i), c) = (*scene.gt_flow)(row, c);
      }
    }
    s.epe += epe(fp.flow_fwd, gt);
    s.epe_zero += epe(Tensor<T>::zeros(gt.shape), gt);
    s.loss += flow_total_loss(fp.enc1.sampled_xyz, frame_t1.xyz, fp.p_prime, fp.p_dprime,
                              DistanceForm::kSquared, 1.0)
                  .report.total;
  }
  const double n = std::max<std::size_t>(ids.size(), 1);
  s.epe /= n;
  s.epe_zero /= n;
  s.loss /= n;
  return s;
}

struct DetectEvalSummary {
  double ap = 0;
  bool undefined = false;
  int tp = 0, fp = 0, fn = 0;
};

template <typename T>
DetectEvalSummary detect_eval_on(ModelParams<T>& model, const RunConfig& cfg,
                                 const SyntheticDataset<T>& data, const std::vector<int>& ids,
                                 std::vector<PrPoint>* pr_curve = nullptr) {
  std::vector<std::vector<Box>> dets, gts;
  for (int id : ids) {
    const auto& scene = data.scenes[id];
    GroundFilterResult<T> f_t;
    if (cfg.remove_ground) f_t = remove_ground(scene.frame_t, cfg.ground_z);
    const PointCloud<T>& frame_t = cfg.remove_ground ? f_t.cloud : scene.frame_t;
    auto enc = backbone_forward(frame_t, cfg.model.backbone, model.params, scene.seed);
    auto det = detect_head_forward(enc, cfg.model.detect, model.params);
    auto boxes = decode_detections(det.heatmap, det.regmap, cfg.model.detect,
                                   cfg.decode_threshold);
    dets.push_back(nms(boxes, cfg.nms_iou));
    std::vector<Box> in_extent;
    for (const auto& b : scene.gt_boxes_t) {
      if (std::abs(b.x) < cfg.model.detect.bev_extent && std::abs(b.y) < cfg.model.detect.bev_extent) {
        in_extent.push_back(b);
      }
    }
    gts.push_back(std::move(in_extent));
  }
  auto r = average_precision(dets, gts, cfg.eval_iou);
  DetectEvalSummary s;
  s.ap = r.ap;
  s.undefined = r.undefined;
  s.tp = r.tp;
  s.fp = r.fp;
  s.fn = r.fn;
  if (pr_curve) *pr_curve = std::move(r.pr_curve);
  return s;
}

struct TrainResult {
  double best_metric = 0;
  double final_metric = 0;
  std::uint64_t final_step = 0;
  bool diverged = false;
  std::string checkpoint;  // final-state checkpoint path
};

namespace train_detail {

template <typename T>
void scale_grads(ParamMap<T>& params, double s) {
  for (auto& [name, p] : params) {
    for (auto& v : p.grad.data) v = static_cast<T>(v * s);
  }
}

template <typename T>
bool optimizer_step(ParamMap<T>& params, AdamState<T>& adam, const OptimizerSpec& opt) {
  try {
    if (opt.kind == "adam") {
      adam_step(params, adam, opt.lr, opt.beta1, opt.beta2);
    } else {
      sgd_step(params, opt.lr);
    }
  } catch (const NumericError&) {
    return false;
  }
  return true;
}

inline double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace train_detail

// Self-supervised pre-training of g.* and s.*. Touches only FlowPairView,
// so no label can be read on this code path.
template <typename T>
TrainResult pretrain_flow(const RunConfig& cfg, const SyntheticDataset<T>& data,
                          ModelParams<T>& model) {
  std::filesystem::create_directories(cfg.out_dir);
  CsvLog log;
  log.open(cfg.out_dir + "/flow_metrics.csv",
           {"nn_loss", "cycle_loss", "total", "val_epe", "val_epe_zero", "val_loss", "wall_s"});
  const auto t0 = std::chrono::steady_clock::now();
  const auto train = data.train_ids();
  const auto val = data.val_ids();
  AdamState<T> adam;
  TrainResult res;
  res.best_metric = std::numeric_limits<double>::infinity();
  res.checkpoint = cfg.out_dir + "/ckpt_final.bin";
  CheckpointMeta meta;
  meta.config_hash = run_config_hash(cfg);
  double val_epe = std::nan(""), val_zero = std::nan(""), val_loss = std::nan("");
  int since_best = 0;
  model.zero_grads();
  for (int step = 1; step <= cfg.steps; ++step) {
    FlowLossReport batch;
    bool finite = true;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int id = train[((step - 1) * cfg.batch_size + b) % train.size()];
      FlowPairView<T> view = data.flow_pair(id);
      GroundFilterResult<T> f_t, f_t1;
      if (cfg.remove_ground) {
        f_t = remove_ground(view.frame_t, cfg.ground_z);
        f_t1 = remove_ground(view.frame_t1, cfg.ground_z);
      }
      const PointCloud<T>& frame_t = cfg.remove_ground ? f_t.cloud : view.frame_t;
      const PointCloud<T>& frame_t1 = cfg.remove_ground ? f_t1.cloud : view.frame_t1;
      // re-seed the FPS sampling each visit so one scene yields many views
      const std::uint64_t sample_seed =
          data.scenes[id].seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(step));
      auto rep = flow_loss_and_grad(frame_t, frame_t1, model, sample_seed);
      batch.nn_loss += rep.nn_loss / cfg.batch_size;
      batch.cycle_loss += rep.cycle_loss / cfg.batch_size;
      batch.total += rep.total / cfg.batch_size;
      finite = finite && std::isfinite(rep.total);
    }
    train_detail::scale_grads(model.params, 1.0 / cfg.batch_size);
    if (!finite || !train_detail::optimizer_step(model.params, adam, cfg.optimizer)) {
      res.diverged = true;  // abort; the last saved checkpoint stays valid
      break;
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      auto ev = flow_eval_on(model, data, val, cfg.remove_ground, cfg.ground_z);
      val_epe = ev.epe;
      val_zero = ev.epe_zero;
      val_loss = ev.loss;
      meta.step = static_cast<std::uint64_t>(step);
      if (ev.loss < res.best_metric) {
        res.best_metric = ev.loss;
        since_best = 0;
        save_checkpoint(cfg.out_dir + "/ckpt_best.bin", model, meta, &adam);
      } else if (!cfg.fixed_steps && ++since_best >= cfg.patience) {
        res.final_step = static_cast<std::uint64_t>(step);
        break;
      }
      res.final_metric = ev.epe;
    }
    res.final_step = static_cast<std::uint64_t>(step);
    log.row(step, {batch.nn_loss, batch.cycle_loss, batch.total, val_epe, val_zero, val_loss,
                   train_detail::seconds_since(t0)});
  }
  meta.step = res.final_step;
  save_checkpoint(res.checkpoint, model, meta, static_cast<const AdamState<T>*>(nullptr));
  return res;
}

// Supervised detection training on a label_fraction subset of the training
// scenes; g.* and h.* receive gradients, s.* is untouched.
template <typename T>
TrainResult train_detect(const RunConfig& cfg, const SyntheticDataset<T>& data,
                         ModelParams<T>& model) {
  std::filesystem::create_directories(cfg.out_dir);
  CsvLog log;
  log.open(cfg.out_dir + "/detect_metrics.csv",
           {"heatmap_loss", "reg_loss", "total", "val_ap", "wall_s"});
  const auto t0 = std::chrono::steady_clock::now();
  const auto val = data.val_ids();
  std::vector<std::uint64_t> all_train;
  for (int id : data.train_ids()) all_train.push_back(static_cast<std::uint64_t>(id));
  const auto labeled = subset_split(all_train, cfg.label_fraction, cfg.seed);
  AdamState<T> adam;
  TrainResult res;
  res.best_metric = -1.0;
  res.checkpoint = cfg.out_dir + "/ckpt_final.bin";
  CheckpointMeta meta;
  meta.config_hash = run_config_hash(cfg);
  double val_ap = std::nan("");
  int since_best = 0;
  model.zero_grads();
  for (int step = 1; step <= cfg.steps; ++step) {
    DetectionLossReport batch;
    bool finite = true;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int id = static_cast<int>(
          labeled[((step - 1) * cfg.batch_size + b) % labeled.size()]);
      const auto& scene = data.scenes[id];
      GroundFilterResult<T> f_t;
      if (cfg.remove_ground) f_t = remove_ground(scene.frame_t, cfg.ground_z);
      const PointCloud<T>& frame_t = cfg.remove_ground ? f_t.cloud : scene.frame_t;
      auto rep = detect_loss_and_grad(frame_t, scene.gt_boxes_t, model, scene.seed);
      batch.heatmap_loss += rep.heatmap_loss / cfg.batch_size;
      batch.reg_loss += rep.reg_loss / cfg.batch_size;
      batch.total += rep.total / cfg.batch_size;
      finite = finite && std::isfinite(rep.total);
    }
    train_detail::scale_grads(model.params, 1.0 / cfg.batch_size);
    if (!finite || !train_detail::optimizer_step(model.params, adam, cfg.optimizer)) {
      res.diverged = true;
      break;
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      auto ev = detect_eval_on(model, cfg, data, val);
      val_ap = ev.undefined ? std::nan("") : ev.ap;
      meta.step = static_cast<std::uint64_t>(step);
      if (!ev.undefined && ev.ap > res.best_metric) {
        res.best_metric = ev.ap;
        since_best = 0;
        save_checkpoint(cfg.out_dir + "/ckpt_best.bin", model, meta, &adam);
      } else if (!cfg.fixed_steps && ++since_best >= cfg.patience) {
        res.final_step = static_cast<std::uint64_t>(step);
        break;
      }
      res.final_metric = ev.undefined ? 0.0 : ev.ap;
    }
    res.final_step = static_cast<std::uint64_t>(step);
    log.row(step,
            {batch.heatmap_loss, batch.reg_loss, batch.total, val_ap,
             train_detail::seconds_since(t0)});
  }
  meta.step = res.final_step;
  save_checkpoint(res.checkpoint, model, meta, static_cast<const AdamState<T>*>(nullptr));
  return res;
}

struct StageAudit {
  bool g_iii_from_ii = false;
  bool s_iii_from_i = false;
  bool g_iv_from_iii = false;
  bool h_iv_from_ii = false;
  bool ok() const { return g_iii_from_ii && s_iii_from_i && g_iv_from_iii && h_iv_from_ii; }
};

struct AlternateResult {
  std::array<std::string, 4> stage_checkpoints;
  StageAudit audit;
  double ap_stage_ii = 0;
  double ap_stage_iv = 0;
  bool diverged = false;
};

namespace train_detail {
inline void require_stage_checkpoint(const std::string& path, const char* stage) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError(std::string("alternate_train: missing checkpoint for stage ") + stage +
                      ": " + path);
  }
}
}  // namespace train_detail

// The four-stage alternating schedule:
//   (i)   flow pre-training from scratch
//   (ii)  detection with g from (i)
//   (iii) flow with g from (ii) and s from (i)
//   (iv)  detection with g from (iii) and h from (ii)
// Stage wiring is audited by hashing the parameter namespaces after loading.
template <typename T>
AlternateResult alternate_train(const RunConfig& cfg, const SyntheticDataset<T>& data) {
  std::filesystem::create_directories(cfg.out_dir);
  AlternateResult res;
  RunConfig flow_cfg = cfg;
  flow_cfg.steps = cfg.alt_flow_steps;
  RunConfig det_cfg = cfg;
  det_cfg.steps = cfg.alt_detect_steps;

  // stage (i)
  flow_cfg.out_dir = cfg.out_dir + "/stage_i";
  auto model_i = init_model_params<T>(cfg.model, cfg.seed);
  auto r1 = pretrain_flow(flow_cfg, data, model_i);
  res.stage_checkpoints[0] = r1.checkpoint;
  res.diverged = res.diverged || r1.diverged;
  const std::uint64_t g_i = namespace_hash(model_i, "g");
  const std::uint64_t s_i = namespace_hash(model_i, "s");

  // stage (ii)
  det_cfg.out_dir = cfg.out_dir + "/stage_ii";
  auto model_ii = init_model_params<T>(cfg.model, cfg.seed + 1);
  train_detail::require_stage_checkpoint(res.stage_checkpoints[0], "(ii) <- (i)");
  load_checkpoint(res.stage_checkpoints[0], model_ii, {"g"});
  auto r2 = train_detect(det_cfg, data, model_ii);
  res.stage_checkpoints[1] = r2.checkpoint;
  res.diverged = res.diverged || r2.diverged;
  res.ap_stage_ii = r2.final_metric;
  const std::uint64_t g_ii = namespace_hash(model_ii, "g");
  const std::uint64_t h_ii = namespace_hash(model_ii, "h");

  // stage (iii): g from (ii), s from (i)
  flow_cfg.out_dir = cfg.out_dir + "/stage_iii";
  auto model_iii = init_model_params<T>(cfg.model, cfg.seed + 2);
  train_detail::require_stage_checkpoint(res.stage_checkpoints[1], "(iii) <- (ii)");
  load_checkpoint(res.stage_checkpoints[1], model_iii, {"g"});
  load_checkpoint(res.stage_checkpoints[0], model_iii, {"s"});
  res.audit.g_iii_from_ii = namespace_hash(model_iii, "g") == g_ii;
  res.audit.s_iii_from_i = namespace_hash(model_iii, "s") == s_i;
  auto r3 = pretrain_flow(flow_cfg, data, model_iii);
  res.stage_checkpoints[2] = r3.checkpoint;
  res.diverged = res.diverged || r3.diverged;
  const std::uint64_t g_iii = namespace_hash(model_iii, "g");

  // stage (iv): g from (iii), h from (ii)
  det_cfg.out_dir = cfg.out_dir + "/stage_iv";
  auto model_iv = init_model_params<T>(cfg.model, cfg.seed + 3);
  train_detail::require_stage_checkpoint(res.stage_checkpoints[2], "(iv) <- (iii)");
  load_checkpoint(res.stage_checkpoints[2], model_iv, {"g"});
  load_checkpoint(res.stage_checkpoints[1], model_iv, {"h"});
  res.audit.g_iv_from_iii = namespace_hash(model_iv, "g") == g_iii;
  res.audit.h_iv_from_ii = namespace_hash(model_iv, "h") == h_ii;
  auto r4 = train_detect(det_cfg, data, model_iv);
  res.stage_checkpoints[3] = r4.checkpoint;
  res.diverged = res.diverged || r4.diverged;
  res.ap_stage_iv = r4.final_metric;

  std::ofstream summary(cfg.out_dir + "/alternate_summary.json");
  nlohmann::json j{{"ap_stage_ii", res.ap_stage_ii},
                   {"ap_stage_iv", res.ap_stage_iv},
                   {"audit",
                    {{"g_iii_from_ii", res.audit.g_iii_from_ii},
                     {"s_iii_from_i", res.audit.s_iii_from_i},
                     {"g_iv_from_iii", res.audit.g_iv_from_iii},
                     {"h_iv_from_ii", res.audit.h_iv_from_ii}}},
                   {"diverged", res.diverged}};
  summary << j.dump(2) << "\n";
  (void)g_i;
  return res;
}

}  // namespace flowdet
