#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "flowdet/checkpoint.hpp"
#include "flowdet/config.hpp"
#include "flowdet/gradcheck.hpp"
#include "flowdet/train.hpp"

namespace {

using namespace flowdet;

constexpr const char* kVersion = "flowdet 0.1.0";

struct GlobalOpts {
  std::string config_path;
  std::int64_t seed = -1;
  std::string out_dir;
};

RunConfig resolve_config(const GlobalOpts& g, const std::string& stage) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  cfg.stage = stage;
  if (g.seed >= 0) cfg.seed = static_cast<std::uint64_t>(g.seed);
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  cfg.validate();
  return cfg;
}

// Every run echoes the resolved configuration and a version stamp so an
// out_dir is self-describing.
void echo_run_setup(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  save_run_config(cfg, cfg.out_dir + "/config.json");
  std::ofstream os(cfg.out_dir + "/version.txt");
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(run_config_hash(cfg)));
  os << kVersion << "\nconfig_hash " << hash << "\n";
}

int run_generate(const RunConfig& cfg) {
  echo_run_setup(cfg);
  auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
  const std::string dir = cfg.out_dir + "/scenes";
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t i = 0; i < data.scenes.size(); ++i) {
    const auto& scene = data.scenes[i];
    char stem[32];
    std::snprintf(stem, sizeof(stem), "scene_%04zu", i);
    save_kitti_bin(scene.frame_t, dir + "/" + stem + "_t.bin");
    save_kitti_bin(scene.frame_t1, dir + "/" + stem + "_t1.bin");
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : scene.gt_boxes_t) {
      boxes.push_back({{"x", b.x}, {"y", b.y}, {"z", b.z}, {"w", b.w}, {"l", b.l}, {"h", b.h},
                       {"yaw", b.yaw}});
    }
    manifest.push_back({{"stem", stem},
                        {"seed", scene.seed},
                        {"points_t", scene.frame_t.size()},
                        {"points_t1", scene.frame_t1.size()},
                        {"boxes", std::move(boxes)}});
  }
  std::ofstream(dir + "/scenes.json") << manifest.dump(2) << "\n";
  std::cout << "generated " << data.scenes.size() << " scenes (" << data.n_train << " train, "
            << data.scenes.size() - data.n_train << " val) in " << dir << "\n";
  return 0;
}

int run_pretrain_flow(const RunConfig& cfg) {
  echo_run_setup(cfg);
  auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
  auto model = init_model_params<float>(cfg.model, cfg.seed);
  AdamState<float> adam;
  if (!cfg.init_checkpoint.empty()) load_checkpoint(cfg.init_checkpoint, model, {}, &adam);
  auto res = pretrain_flow(cfg, data, model);
  auto ev = flow_eval_on(model, data, data.val_ids(), cfg.remove_ground, cfg.ground_z);
  std::cout << "pretrain-flow: steps=" << res.final_step << " val_epe=" << ev.epe
            << " zero_flow_epe=" << ev.epe_zero << (res.diverged ? " DIVERGED" : "") << "\n"
            << "checkpoint: " << res.checkpoint << "\n";
  return res.diverged ? 3 : 0;
}

int run_train_detect(const RunConfig& cfg) {
  echo_run_setup(cfg);
  auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
  auto model = init_model_params<float>(cfg.model, cfg.seed);
  if (!cfg.init_checkpoint.empty()) {
    load_checkpoint(cfg.init_checkpoint, model, {"g"});  // backbone-only warm start
  }
  auto res = train_detect(cfg, data, model);
  std::cout << "train-detect: steps=" << res.final_step
            << " label_fraction=" << cfg.label_fraction << " val_ap=" << res.final_metric
            << (res.diverged ? " DIVERGED" : "") << "\n"
            << "checkpoint: " << res.checkpoint << "\n";
  return res.diverged ? 3 : 0;
}

int run_alternate(const RunConfig& cfg) {
  echo_run_setup(cfg);
  auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
  auto res = alternate_train(cfg, data);
  std::cout << "stage wiring: g(iii)<-g(ii) " << (res.audit.g_iii_from_ii ? "ok" : "FAIL")
            << ", s(iii)<-s(i) " << (res.audit.s_iii_from_i ? "ok" : "FAIL")
            << ", g(iv)<-g(iii) " << (res.audit.g_iv_from_iii ? "ok" : "FAIL")
            << ", h(iv)<-h(ii) " << (res.audit.h_iv_from_ii ? "ok" : "FAIL") << "\n"
            << "ap stage(ii)=" << res.ap_stage_ii << " stage(iv)=" << res.ap_stage_iv
            << (res.diverged ? " DIVERGED" : "") << "\n";
  if (res.diverged) return 3;
  return res.audit.ok() ? 0 : 3;
}

int run_eval_flow(const RunConfig& cfg, const std::string& ckpt) {
  echo_run_setup(cfg);
  auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
  auto model = init_model_params<float>(cfg.model, cfg.seed);
  load_checkpoint(ckpt, model);
  auto ev = flow_eval_on(model, data, data.val_ids(), cfg.remove_ground, cfg.ground_z);
  std::cout << "eval-flow: val_epe=" << ev.epe << " zero_flow_epe=" << ev.epe_zero
            << " val_loss=" << ev.loss << "\n";
  nlohmann::json j{{"val_epe", ev.epe}, {"zero_flow_epe", ev.epe_zero}, {"val_loss", ev.loss}};
  std::ofstream(cfg.out_dir + "/eval_flow.json") << j.dump(2) << "\n";
  return 0;
}

int run_eval_detect(const RunConfig& cfg, const std::string& ckpt) {
  echo_run_setup(cfg);
  auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
  auto model = init_model_params<float>(cfg.model, cfg.seed);
  load_checkpoint(ckpt, model);
  std::vector<PrPoint> curve;
  auto ev = detect_eval_on(model, cfg, data, data.val_ids(), &curve);
  std::cout << "eval-detect: iou=" << cfg.eval_iou << " ap=" << ev.ap << " tp=" << ev.tp
            << " fp=" << ev.fp << " fn=" << ev.fn << (ev.undefined ? " (no ground truth)" : "")
            << "\n";
  nlohmann::json j{{"iou", cfg.eval_iou}, {"ap", ev.ap},         {"undefined", ev.undefined},
                   {"tp", ev.tp},         {"fp", ev.fp},         {"fn", ev.fn}};
  std::ofstream(cfg.out_dir + "/eval_detect.json") << j.dump(2) << "\n";
  std::ofstream pr(cfg.out_dir + "/pr_curve.csv");
  write_pr_curve_csv(pr, curve);
  return 0;
}

// Gray points for the two frames, red segments/boxes for ground truth, green
// segments for the model's predicted flow.
int run_export_ply(const RunConfig& cfg, const std::string& ckpt) {
  echo_run_setup(cfg);
  auto scene = generate_scene<float>(cfg.dataset.generator, cfg.seed);
  std::vector<PlyPointSet<float>> points;
  points.push_back({scene.frame_t.xyz, PlyColor{150, 150, 150}});
  points.push_back({scene.frame_t1.xyz, PlyColor{90, 90, 90}});
  std::vector<PlySegmentSet<float>> segments;
  {
    Tensor<float> to = scene.frame_t.xyz;
    for (std::size_t i = 0; i < to.data.size(); ++i) to.data[i] += scene.gt_flow->data[i];
    segments.push_back({scene.frame_t.xyz, std::move(to), PlyColor{220, 60, 60}});
  }
  if (!ckpt.empty()) {
    auto model = init_model_params<float>(cfg.model, cfg.seed);
    load_checkpoint(ckpt, model);
    auto fp = forward_backward_flow(scene.frame_t, scene.frame_t1, model, scene.seed);
    Tensor<float> to = fp.enc1.sampled_xyz;
    for (std::size_t i = 0; i < to.data.size(); ++i) to.data[i] += fp.flow_fwd.data[i];
    segments.push_back({fp.enc1.sampled_xyz, std::move(to), PlyColor{60, 200, 60}});
  }
  std::vector<PlyBoxSet> boxes{{scene.gt_boxes_t, PlyColor{220, 60, 60}}};
  const std::string path = cfg.out_dir + "/scene.ply";
  export_ply(path, points, segments, boxes);
  std::cout << "wrote " << path << "\n";
  return 0;
}

template <typename SetupGrads, typename Loss>
double fd_suite(ModelParams<double>& model, const char* skip_prefix, SetupGrads&& backward,
                Loss&& loss) {
  // nudge parameters off the ReLU kink that zero-init biases sit on
  std::mt19937_64 jitter(101);
  for (auto& [name, p] : model.params) {
    auto noise = randn<double>(p.value.shape, jitter, 0.05);
    for (std::size_t i = 0; i < p.value.data.size(); ++i) p.value.data[i] += noise.data[i];
  }
  model.zero_grads();
  backward();
  std::vector<Tensor<double>> grads;
  for (auto& [name, p] : model.params) {
    if (name.rfind(skip_prefix, 0) == 0) continue;
    grads.push_back(p.grad);
  }
  std::vector<GradCheckInput<double>> inputs;
  std::size_t gi = 0;
  for (auto& [name, p] : model.params) {
    if (name.rfind(skip_prefix, 0) == 0) continue;
    inputs.push_back({name, &p.value, &grads[gi++]});
  }
  auto rep = grad_check<double>(loss, inputs);
  return rep.max_rel_err();
}

int run_grad_check() {
  ModelConfig cfg;
  cfg.backbone.n_sample = 32;
  cfg.backbone.n_centroids = 8;
  cfg.backbone.radius = 1.5;
  cfg.backbone.max_k = 8;
  cfg.backbone.mlp = MlpSpec{{8, 16}, false};
  cfg.flow.embed_k = 4;
  cfg.flow.embed_mlp = MlpSpec{{16, 16}, false};
  cfg.flow.setconv_radius = 2.5;
  cfg.flow.setconv_k = 8;
  cfg.flow.setconv_mlp = MlpSpec{{16, 16}, false};
  cfg.flow.upconv_mlp = MlpSpec{{16, 16}, false};
  cfg.flow.fc = MlpSpec{{3}, true};
  cfg.detect.bev_extent = 4.0;
  cfg.detect.bev_cells = 8;
  cfg.detect.conv_channels = 8;

  std::mt19937_64 rng(41);
  auto cloud = [&](int n) {
    PointCloud<double> c;
    c.xyz = uniform<double>({n, 3}, rng, -2.5, 2.5);
    return c;
  };
  auto pt = cloud(32);
  auto pt1 = cloud(32);

  auto flow_model = init_model_params<double>(cfg, 23);
  const double flow_err = fd_suite(
      flow_model, "h.",
      [&] { flow_loss_and_grad(pt, pt1, flow_model, 29); },
      [&] {
        auto fp = forward_backward_flow(pt, pt1, flow_model, 29);
        return flow_total_loss(fp.enc1.sampled_xyz, pt1.xyz, fp.p_prime, fp.p_dprime,
                               DistanceForm::kSquared, 1.0)
            .report.total;
      });
  const bool flow_ok = flow_err <= 1e-3;
  std::cout << "flow loss gradients:      max rel err " << flow_err << " "
            << (flow_ok ? "[pass]" : "[FAIL]") << "\n";

  auto det_cloud = cloud(40);
  std::vector<Box> boxes{Box(0.5, -0.8, 0.2, 1.5, 2.5, 1.2, 0.4)};
  auto det_model = init_model_params<double>(cfg, 29);
  auto targets = make_detection_targets<double>(boxes, cfg.detect);
  const double det_err = fd_suite(
      det_model, "s.",
      [&] { detect_loss_and_grad(det_cloud, boxes, det_model, 31); },
      [&] {
        auto enc = backbone_forward(det_cloud, cfg.backbone, det_model.params, 31);
        auto pred = detect_head_forward(enc, cfg.detect, det_model.params);
        return detection_total_loss(pred.heatmap, pred.regmap, targets).report.total;
      });
  const bool det_ok = det_err <= 1e-3;
  std::cout << "detection loss gradients: max rel err " << det_err << " "
            << (det_ok ? "[pass]" : "[FAIL]") << "\n";
  return (flow_ok && det_ok) ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scene-flow pre-training and BEV detection on synthetic lidar scenes"};
  app.require_subcommand(1);
  GlobalOpts g;
  std::string ckpt;
  std::string init_ckpt;
  double iou = -1.0;

  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config_path, "JSON run configuration");
    sub->add_option("--seed", g.seed, "override the configured seed");
    sub->add_option("--out", g.out_dir, "override the output directory");
    return sub;
  };
  auto* c_gen = add_globals(app.add_subcommand("generate", "write a synthetic scene corpus"));
  auto* c_flow =
      add_globals(app.add_subcommand("pretrain-flow", "self-supervised flow pre-training"));
  c_flow->add_option("--init", init_ckpt, "checkpoint to warm start from");
  auto* c_det = add_globals(app.add_subcommand("train-detect", "supervised detection training"));
  c_det->add_option("--init", init_ckpt, "checkpoint to warm start the backbone from");
  auto* c_alt =
      add_globals(app.add_subcommand("alternate", "4-stage alternating flow/detection schedule"));
  auto* c_eflow = add_globals(app.add_subcommand("eval-flow", "end-point error on held-out scenes"));
  c_eflow->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  auto* c_edet = add_globals(app.add_subcommand("eval-detect", "AP on held-out scenes"));
  c_edet->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  c_edet->add_option("--iou", iou, "matching IoU threshold (default 0.7)");
  auto* c_ply = add_globals(app.add_subcommand("export-ply", "dump a scene with flow overlays"));
  c_ply->add_option("--checkpoint", ckpt, "model checkpoint for predicted flow");
  auto* c_grad = app.add_subcommand("grad-check", "finite-difference gradient audit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_grad->parsed()) return run_grad_check();
    CLI::App* active = app.get_subcommands().front();
    flowdet::RunConfig cfg = resolve_config(g, active->get_name());
    if (iou > 0) cfg.eval_iou = iou;
    if (!init_ckpt.empty()) cfg.init_checkpoint = init_ckpt;
    if (c_gen->parsed()) return run_generate(cfg);
    if (c_flow->parsed()) return run_pretrain_flow(cfg);
    if (c_det->parsed()) return run_train_detect(cfg);
    if (c_alt->parsed()) return run_alternate(cfg);
    if (c_eflow->parsed()) return run_eval_flow(cfg, ckpt);
    if (c_edet->parsed()) return run_eval_detect(cfg, ckpt);
    if (c_ply->parsed()) return run_export_ply(cfg, ckpt);
  } catch (const flowdet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const flowdet::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const flowdet::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
