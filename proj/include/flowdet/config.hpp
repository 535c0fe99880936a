#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowdet/data.hpp"
#include "flowdet/model.hpp"

namespace flowdet {

struct OptimizerSpec {
  std::string kind = "adam";  // "adam" or "sgd"
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
};

struct DatasetSpec {
  GeneratorConfig generator;
  int n_scenes = 48;
  double val_fraction = 0.25;
};

// A single run of the training/evaluation pipeline.
struct RunConfig {
  std::string stage = "pretrain-flow";
  DatasetSpec dataset;
  double label_fraction = 1.0;
  OptimizerSpec optimizer;
  int steps = 500;
  int batch_size = 1;
  int eval_every = 50;
  std::uint64_t seed = 0;
  std::string init_checkpoint;
  std::string out_dir = "out";
  ModelConfig model;
  // alternating-schedule budgets; equal per stage unless overridden
  int alt_flow_steps = 400;
  int alt_detect_steps = 400;
  bool fixed_steps = true;  // early stopping disabled: deterministic runs
  int patience = 10;
  // Drop near-ground points (z < ground_z) before the flow path. The ground
  // plane is translation-invariant, so keeping it lets the flow head settle
  // into an all-zero prediction; stripping it restores a useful signal.
  bool remove_ground = false;
  double ground_z = 0.2;
  double eval_iou = 0.7;
  double decode_threshold = 0.15;
  double nms_iou = 0.25;

  void validate() const {
    static const std::vector<std::string> stages = {
        "generate",  "pretrain-flow", "train-detect", "alternate",
        "eval-flow", "eval-detect",   "export-ply",   "grad-check"};
    bool known = false;
    for (const auto& s : stages) known = known || s == stage;
    if (!known) throw ConfigError("RunConfig: unknown stage '" + stage + "'");
    if (label_fraction <= 0 || label_fraction > 1) {
      throw ConfigError("RunConfig: label_fraction must be in (0, 1]");
    }
    if (steps <= 0 || alt_flow_steps <= 0 || alt_detect_steps <= 0) {
      throw ConfigError("RunConfig: step counts must be > 0");
    }
    if (batch_size < 1 || eval_every < 1) {
      throw ConfigError("RunConfig: batch_size and eval_every must be >= 1");
    }
    if (optimizer.kind != "adam" && optimizer.kind != "sgd") {
      throw ConfigError("RunConfig: optimizer kind must be adam or sgd");
    }
    if (optimizer.lr <= 0) throw ConfigError("RunConfig: lr must be > 0");
    if (dataset.n_scenes < 2 || dataset.val_fraction <= 0 || dataset.val_fraction >= 1) {
      throw ConfigError("RunConfig: need n_scenes >= 2 and val_fraction in (0, 1)");
    }
    if (eval_iou <= 0 || eval_iou >= 1) throw ConfigError("RunConfig: eval_iou must be in (0, 1)");
    dataset.generator.validate();
    model.validate();
  }
};

namespace cfgjson {

using nlohmann::json;

inline void to_json(json& j, const MlpSpec& m) {
  j = json{{"widths", m.widths}, {"final_linear", m.final_linear}};
}
inline void from_json(const json& j, MlpSpec& m) {
  m.widths = j.value("widths", m.widths);
  m.final_linear = j.value("final_linear", m.final_linear);
}

inline json dump_generator(const GeneratorConfig& g) {
  return json{{"n_objects_min", g.n_objects_min},
              {"n_objects_max", g.n_objects_max},
              {"size_w_min", g.size_w_min},
              {"size_w_max", g.size_w_max},
              {"size_l_min", g.size_l_min},
              {"size_l_max", g.size_l_max},
              {"size_h_min", g.size_h_min},
              {"size_h_max", g.size_h_max},
              {"speed_min", g.speed_min},
              {"speed_max", g.speed_max},
              {"yaw_rate_max", g.yaw_rate_max},
              {"background_points", g.background_points},
              {"object_surface_points", g.object_surface_points},
              {"dropout_prob", g.dropout_prob},
              {"jitter_sigma", g.jitter_sigma},
              {"extent", g.extent},
              {"ego_motion", g.ego_motion},
              {"ego_speed", g.ego_speed}};
}

inline GeneratorConfig parse_generator(const json& j) {
  GeneratorConfig g;
  g.n_objects_min = j.value("n_objects_min", g.n_objects_min);
  g.n_objects_max = j.value("n_objects_max", g.n_objects_max);
  g.size_w_min = j.value("size_w_min", g.size_w_min);
  g.size_w_max = j.value("size_w_max", g.size_w_max);
  g.size_l_min = j.value("size_l_min", g.size_l_min);
  g.size_l_max = j.value("size_l_max", g.size_l_max);
  g.size_h_min = j.value("size_h_min", g.size_h_min);
  g.size_h_max = j.value("size_h_max", g.size_h_max);
  g.speed_min = j.value("speed_min", g.speed_min);
  g.speed_max = j.value("speed_max", g.speed_max);
  g.yaw_rate_max = j.value("yaw_rate_max", g.yaw_rate_max);
  g.background_points = j.value("background_points", g.background_points);
  g.object_surface_points = j.value("object_surface_points", g.object_surface_points);
  g.dropout_prob = j.value("dropout_prob", g.dropout_prob);
  g.jitter_sigma = j.value("jitter_sigma", g.jitter_sigma);
  g.extent = j.value("extent", g.extent);
  g.ego_motion = j.value("ego_motion", g.ego_motion);
  g.ego_speed = j.value("ego_speed", g.ego_speed);
  return g;
}

inline json dump_model(const ModelConfig& m) {
  json jb{{"n_sample", m.backbone.n_sample},
          {"n_centroids", m.backbone.n_centroids},
          {"radius", m.backbone.radius},
          {"max_k", m.backbone.max_k}};
  to_json(jb["mlp"], m.backbone.mlp);
  json jf{{"embed_k", m.flow.embed_k},
          {"setconv_radius", m.flow.setconv_radius},
          {"setconv_k", m.flow.setconv_k}};
  to_json(jf["embed_mlp"], m.flow.embed_mlp);
  to_json(jf["setconv_mlp"], m.flow.setconv_mlp);
  to_json(jf["upconv_mlp"], m.flow.upconv_mlp);
  to_json(jf["fc"], m.flow.fc);
  json jd{{"bev_extent", m.detect.bev_extent},
          {"bev_cells", m.detect.bev_cells},
          {"conv_channels", m.detect.conv_channels},
          {"reg_channels", m.detect.reg_channels}};
  return json{{"backbone", jb}, {"flow", jf}, {"detect", jd}};
}

inline ModelConfig parse_model(const json& j) {
  ModelConfig m;
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    m.backbone.n_sample = b.value("n_sample", m.backbone.n_sample);
    m.backbone.n_centroids = b.value("n_centroids", m.backbone.n_centroids);
    m.backbone.radius = b.value("radius", m.backbone.radius);
    m.backbone.max_k = b.value("max_k", m.backbone.max_k);
    if (b.contains("mlp")) from_json(b.at("mlp"), m.backbone.mlp);
  }
  if (j.contains("flow")) {
    const auto& f = j.at("flow");
    m.flow.embed_k = f.value("embed_k", m.flow.embed_k);
    m.flow.setconv_radius = f.value("setconv_radius", m.flow.setconv_radius);
    m.flow.setconv_k = f.value("setconv_k", m.flow.setconv_k);
    if (f.contains("embed_mlp")) from_json(f.at("embed_mlp"), m.flow.embed_mlp);
    if (f.contains("setconv_mlp")) from_json(f.at("setconv_mlp"), m.flow.setconv_mlp);
    if (f.contains("upconv_mlp")) from_json(f.at("upconv_mlp"), m.flow.upconv_mlp);
    if (f.contains("fc")) from_json(f.at("fc"), m.flow.fc);
  }
  if (j.contains("detect")) {
    const auto& d = j.at("detect");
    m.detect.bev_extent = d.value("bev_extent", m.detect.bev_extent);
    m.detect.bev_cells = d.value("bev_cells", m.detect.bev_cells);
    m.detect.conv_channels = d.value("conv_channels", m.detect.conv_channels);
    m.detect.reg_channels = d.value("reg_channels", m.detect.reg_channels);
  }
  return m;
}

}  // namespace cfgjson

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["stage"] = c.stage;
  j["dataset"] = {{"generator", cfgjson::dump_generator(c.dataset.generator)},
                  {"n_scenes", c.dataset.n_scenes},
                  {"val_fraction", c.dataset.val_fraction}};
  j["label_fraction"] = c.label_fraction;
  j["optimizer"] = {{"kind", c.optimizer.kind},
                    {"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2}};
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["eval_every"] = c.eval_every;
  j["seed"] = c.seed;
  j["init_checkpoint"] = c.init_checkpoint;
  j["out_dir"] = c.out_dir;
  j["model"] = cfgjson::dump_model(c.model);
  j["alt_flow_steps"] = c.alt_flow_steps;
  j["alt_detect_steps"] = c.alt_detect_steps;
  j["fixed_steps"] = c.fixed_steps;
  j["patience"] = c.patience;
  j["remove_ground"] = c.remove_ground;
  j["ground_z"] = c.ground_z;
  j["eval_iou"] = c.eval_iou;
  j["decode_threshold"] = c.decode_threshold;
  j["nms_iou"] = c.nms_iou;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.stage = j.value("stage", c.stage);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (d.contains("generator")) c.dataset.generator = cfgjson::parse_generator(d.at("generator"));
    c.dataset.n_scenes = d.value("n_scenes", c.dataset.n_scenes);
    c.dataset.val_fraction = d.value("val_fraction", c.dataset.val_fraction);
  }
  c.label_fraction = j.value("label_fraction", c.label_fraction);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.kind = o.value("kind", c.optimizer.kind);
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
  }
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  c.init_checkpoint = j.value("init_checkpoint", c.init_checkpoint);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("model")) c.model = cfgjson::parse_model(j.at("model"));
  c.alt_flow_steps = j.value("alt_flow_steps", c.alt_flow_steps);
  c.alt_detect_steps = j.value("alt_detect_steps", c.alt_detect_steps);
  c.fixed_steps = j.value("fixed_steps", c.fixed_steps);
  c.patience = j.value("patience", c.patience);
  c.remove_ground = j.value("remove_ground", c.remove_ground);
  c.ground_z = j.value("ground_z", c.ground_z);
  c.eval_iou = j.value("eval_iou", c.eval_iou);
  c.decode_threshold = j.value("decode_threshold", c.decode_threshold);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  return c;
}

// FNV-1a over the canonical (key-sorted) serialization.
inline std::uint64_t run_config_hash(const RunConfig& c) {
  const std::string s = run_config_to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  return h;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_run_config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("load_run_config: " + path + ": " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

inline void save_run_config(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_run_config: cannot open " + path);
  out << run_config_to_json(c).dump(2) << "\n";
}

}  // namespace flowdet
