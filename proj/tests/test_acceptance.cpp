// Release gate: every case below prints one PASS/FAIL line for its criterion.
// Tolerances and budgets are fixed here, not configurable.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <random>

#include "flowdet/checkpoint.hpp"
#include "flowdet/config.hpp"
#include "flowdet/gradcheck.hpp"
#include "flowdet/train.hpp"

using namespace flowdet;

namespace {

// pinned tolerances and budgets
constexpr double kModelGradRtol = 1e-3;
constexpr double kOpGradRtol = 1e-4;
constexpr double kGradBudgetSec = 120.0;
constexpr double kIouMcTol = 0.01;
constexpr double kApTol = 1e-9;
constexpr double kFlowEpeRatioGate = 0.5;
constexpr double kFlowBudgetSec = 900.0;
constexpr double kLowDataBudgetSec = 2700.0;
constexpr double kDeterminismTol = 1e-5;
constexpr double kDecodeTol = 1e-4;

void report(const char* what, bool ok, const std::string& detail) {
  std::printf("[%s] %s: %s\n", ok ? "PASS" : "FAIL", what, detail.c_str());
  std::fflush(stdout);
}

double now_minus(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string scratch_dir(const char* leaf) {
  auto p = std::filesystem::temp_directory_path() / "flowdet_acceptance" / leaf;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

ModelConfig tiny_model() {
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
  return cfg;
}

RunConfig tiny_run(const std::string& out_dir) {
  RunConfig cfg;
  cfg.dataset.generator.extent = 5.0;
  cfg.dataset.generator.background_points = 200;
  cfg.dataset.generator.object_surface_points = 60;
  cfg.dataset.generator.n_objects_min = 1;
  cfg.dataset.generator.n_objects_max = 2;
  cfg.dataset.n_scenes = 6;
  cfg.dataset.val_fraction = 0.34;
  cfg.model = tiny_model();
  cfg.model.detect.bev_extent = 6.0;
  cfg.steps = 6;
  cfg.eval_every = 3;
  cfg.batch_size = 1;
  cfg.optimizer.lr = 0.003;
  cfg.seed = 9;
  cfg.out_dir = out_dir;
  return cfg;
}

RunConfig desk_config() {
  RunConfig cfg = load_run_config(std::string(FLOWDET_PRESET_DIR) + "/desk.json");
  return cfg;
}

PointCloud<double> rand_cloud(int n, std::uint64_t seed, double extent = 3.0) {
  std::mt19937_64 rng(seed);
  PointCloud<double> c;
  c.xyz = uniform<double>({n, 3}, rng, -extent, extent);
  return c;
}

Tensor<double> rand_points(int n, std::mt19937_64& rng, double extent = 2.0) {
  return uniform<double>({n, 3}, rng, -extent, extent);
}

void jitter_params(ModelParams<double>& model, std::uint64_t seed) {
  // move zero-initialized biases off the ReLU kink before finite differences
  std::mt19937_64 jitter(seed);
  for (auto& [name, p] : model.params) {
    auto noise = randn<double>(p.value.shape, jitter, 0.05);
    for (std::size_t i = 0; i < p.value.data.size(); ++i) p.value.data[i] += noise.data[i];
  }
}

Box rand_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(-2.0, 2.0), size(0.5, 3.0), ang(-M_PI, M_PI);
  return Box(pos(rng), pos(rng), 0.0, size(rng), size(rng), 1.0, ang(rng), 0, 1.0);
}

// area-sampling oracle for rotated-rectangle IoU
double mc_iou(const Box& a, const Box& b, std::mt19937_64& rng, int n_samples) {
  auto inside = [](const Box& box, double x, double y) {
    const double dx = x - box.x, dy = y - box.y;
    const double cs = std::cos(box.yaw), sn = std::sin(box.yaw);
    const double lx = cs * dx + sn * dy;
    const double ly = -sn * dx + cs * dy;
    return std::abs(lx) <= box.w / 2 && std::abs(ly) <= box.l / 2;
  };
  const double r = std::max({std::hypot(a.w, a.l) / 2, std::hypot(b.w, b.l) / 2});
  const double lo_x = std::min(a.x, b.x) - r, hi_x = std::max(a.x, b.x) + r;
  const double lo_y = std::min(a.y, b.y) - r, hi_y = std::max(a.y, b.y) + r;
  std::uniform_real_distribution<double> ux(lo_x, hi_x), uy(lo_y, hi_y);
  long in_a = 0, in_b = 0, in_both = 0;
  for (int i = 0; i < n_samples; ++i) {
    const double x = ux(rng), y = uy(rng);
    const bool ia = inside(a, x, y), ib = inside(b, x, y);
    in_a += ia;
    in_b += ib;
    in_both += ia && ib;
  }
  const long uni = in_a + in_b - in_both;
  return uni == 0 ? 0.0 : static_cast<double>(in_both) / uni;
}

// independent AP re-computation: global score sort, greedy per-frame matching,
// 40-point interpolated integration from scratch
double ap_oracle(const std::vector<std::vector<Box>>& dets,
                 const std::vector<std::vector<Box>>& gts, double iou) {
  int n_gt = 0;
  for (const auto& g : gts) n_gt += static_cast<int>(g.size());
  struct D {
    double score;
    std::size_t f, i;
  };
  std::vector<D> order;
  for (std::size_t f = 0; f < dets.size(); ++f) {
    for (std::size_t i = 0; i < dets[f].size(); ++i) order.push_back({dets[f][i].score, f, i});
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const D& a, const D& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) used[f].assign(gts[f].size(), false);
  std::vector<double> rec, prec;
  int tp = 0, fp = 0;
  for (const auto& d : order) {
    double best = -1;
    int bg = -1;
    for (std::size_t g = 0; g < gts[d.f].size(); ++g) {
      if (used[d.f][g]) continue;
      const double v = bev_iou(dets[d.f][d.i], gts[d.f][g]);
      if (v > best) {
        best = v;
        bg = static_cast<int>(g);
      }
    }
    if (bg >= 0 && best >= iou) {
      used[d.f][bg] = true;
      ++tp;
    } else {
      ++fp;
    }
    rec.push_back(static_cast<double>(tp) / n_gt);
    prec.push_back(static_cast<double>(tp) / (tp + fp));
  }
  double s = 0;
  for (int k = 1; k <= 40; ++k) {
    const double level = k / 40.0;
    double p = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
      if (rec[i] >= level) p = std::max(p, prec[i]);
    }
    s += p;
  }
  return s / 40.0;
}

// state shared between the flow pre-training and the low-data benchmark
struct {
  std::string flow_checkpoint;
} g_shared;

}  // namespace

TEST_CASE("gradient correctness: analytic vs finite differences") {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_op = 0.0;

  // individual ops at rtol 1e-4
  std::mt19937_64 rng(41);
  {
    auto x = uniform<double>({5, 7}, rng, -1, 1);
    auto w = uniform<double>({7, 4}, rng, -1, 1);
    auto b = uniform<double>({4}, rng, -1, 1);
    auto dy = Tensor<double>({5, 4}, std::vector<double>(20, 1.0));
    auto g = linear_backward(x, w, dy);
    auto loss = [&]() {
      const auto y = linear_forward(x, w, b);
      double s = 0;
      for (double v : y.data) s += v;
      return s;
    };
    auto rep = grad_check<double>(
        loss, {{"w", &w, &g.dw}, {"x", &x, &g.dx}});
    worst_op = std::max(worst_op, rep.max_rel_err());
  }
  {
    auto x = uniform<double>({6, 6}, rng, -1, 1);
    for (auto& v : x.data) {
      if (std::abs(v) < 0.05) v += 0.1;  // stay off the kink
    }
    auto dy = Tensor<double>({6, 6}, std::vector<double>(36, 1.0));
    auto g = relu_backward(x, dy);
    auto loss = [&]() {
      double s = 0;
      for (double v : relu_forward(x).data) s += v;
      return s;
    };
    auto rep = grad_check<double>(loss, {{"x", &x, &g}});
    worst_op = std::max(worst_op, rep.max_rel_err());
  }
  {
    auto p = rand_points(6, rng);
    auto t = rand_points(30, rng);
    auto nn2 = knn(p, t, 2);
    bool safe = true;
    for (int i = 0; i < 6; ++i) {
      if (nn2.dists(i, 1) - nn2.dists(i, 0) < 1e-2) safe = false;
    }
    REQUIRE(safe);  // frozen rng; regenerate the seed if this ever trips
    auto l = nearest_neighbor_loss(p, t);
    auto loss = [&]() { return nearest_neighbor_loss(p, t).value; };
    auto rep = grad_check<double>(loss, {{"p", &p, &l.grad}});
    worst_op = std::max(worst_op, rep.max_rel_err());
  }
  {
    auto x = rand_points(5, rng);
    auto y = rand_points(5, rng);
    auto l = cycle_consistency_loss(x, y);
    auto loss = [&]() { return cycle_consistency_loss(x, y).value; };
    auto rep = grad_check<double>(loss, {{"y", &y, &l.grad}});
    worst_op = std::max(worst_op, rep.max_rel_err());
  }
  {
    auto p = uniform<double>({9}, rng, 0.05, 0.95);
    Tensor<double> t = Tensor<double>::zeros({9});
    t(0) = 1.0;
    t(3) = 0.4;
    auto g = focal_loss(p, t);
    auto loss = [&]() { return focal_loss(p, t).value; };
    auto rep = grad_check<double>(loss, {{"p", &p, &g.grad}});
    worst_op = std::max(worst_op, rep.max_rel_err());
  }
  {
    auto pred = uniform<double>({2, 4}, rng, -3.0, 3.0);
    auto tgt = Tensor<double>::zeros({2, 4});
    for (auto& v : pred.data) {
      if (std::abs(std::abs(v) - 1.0) < 0.05) v += 0.2;
    }
    std::vector<bool> mask{true, true};
    auto g = huber_loss(pred, tgt, mask);
    auto loss = [&]() { return huber_loss(pred, tgt, mask).value; };
    auto rep = grad_check<double>(loss, {{"pred", &pred, &g.grad}});
    worst_op = std::max(worst_op, rep.max_rel_err());
  }
  const bool ops_ok = worst_op <= kOpGradRtol;

  // full model at rtol 1e-3, flow and detection paths
  auto cfg = tiny_model();
  double worst_model = 0.0;
  {
    auto model = init_model_params<double>(cfg, 23);
    jitter_params(model, 77);
    auto pt = rand_cloud(32, 24, 2.5);
    auto pt1 = rand_cloud(32, 25, 2.5);
    model.zero_grads();
    flow_loss_and_grad(pt, pt1, model, 29);
    std::vector<Tensor<double>> grads;
    std::vector<GradCheckInput<double>> inputs;
    for (auto& [name, p] : model.params) {
      if (name.rfind("h.", 0) == 0) continue;
      grads.push_back(p.grad);
    }
    std::size_t gi = 0;
    for (auto& [name, p] : model.params) {
      if (name.rfind("h.", 0) == 0) continue;
      inputs.push_back({name, &p.value, &grads[gi++]});
    }
    auto loss = [&]() {
      auto fp = forward_backward_flow(pt, pt1, model, 29);
      return flow_total_loss(fp.enc1.sampled_xyz, pt1.xyz, fp.p_prime, fp.p_dprime,
                             DistanceForm::kSquared, 1.0)
          .report.total;
    };
    worst_model = std::max(worst_model, grad_check<double>(loss, inputs).max_rel_err());
  }
  {
    auto model = init_model_params<double>(cfg, 29);
    jitter_params(model, 78);
    auto cloud = rand_cloud(40, 30, 3.0);
    std::vector<Box> boxes{Box(0.5, -0.8, 0.2, 1.5, 2.5, 1.2, 0.4)};
    model.zero_grads();
    detect_loss_and_grad(cloud, boxes, model, 31);
    std::vector<Tensor<double>> grads;
    std::vector<GradCheckInput<double>> inputs;
    for (auto& [name, p] : model.params) {
      if (name.rfind("s.", 0) == 0) continue;
      grads.push_back(p.grad);
    }
    std::size_t gi = 0;
    for (auto& [name, p] : model.params) {
      if (name.rfind("s.", 0) == 0) continue;
      inputs.push_back({name, &p.value, &grads[gi++]});
    }
    auto targets = make_detection_targets<double>(boxes, cfg.detect);
    auto loss = [&]() {
      auto enc = backbone_forward(cloud, cfg.backbone, model.params, 31);
      auto pred = detect_head_forward(enc, cfg.detect, model.params);
      return detection_total_loss(pred.heatmap, pred.regmap, targets).report.total;
    };
    worst_model = std::max(worst_model, grad_check<double>(loss, inputs).max_rel_err());
  }
  const bool model_ok = worst_model <= kModelGradRtol;
  const double elapsed = now_minus(t0);
  const bool time_ok = elapsed <= kGradBudgetSec;

  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "op max rel err %.3g (tol %.0e), model max rel err %.3g (tol %.0e), %.1fs",
                worst_op, kOpGradRtol, worst_model, kModelGradRtol, elapsed);
  report("gradient correctness", ops_ok && model_ok && time_ok, buf);
  CHECK(ops_ok);
  CHECK(model_ok);
  CHECK(time_ok);
}

TEST_CASE("oracle equivalence: knn, losses, IoU, AP") {
  bool ok = true;
  std::string fail;

  // knn vs exhaustive scan, 1000 instances
  {
    std::mt19937_64 rng(101);
    for (int it = 0; it < 1000 && ok; ++it) {
      const int q = 1 + static_cast<int>(rng() % 6);
      const int r = 1 + static_cast<int>(rng() % 12);
      const int k = 1 + static_cast<int>(rng() % 3);
      auto Q = rand_points(q, rng);
      auto R = rand_points(r, rng);
      auto res = knn(Q, R, k);
      for (int i = 0; i < q; ++i) {
        std::vector<std::pair<double, int>> d;
        for (int j = 0; j < r; ++j) {
          double s = 0;
          for (int c = 0; c < 3; ++c) {
            const double v = Q(i, c) - R(j, c);
            s += v * v;
          }
          d.emplace_back(s, j);
        }
        std::stable_sort(d.begin(), d.end());
        for (int kk = 0; kk < res.k; ++kk) {
          // k > R pads by repeating the nearest reference index
          const int want = kk < static_cast<int>(d.size()) ? d[kk].second : d[0].second;
          if (res.indices[static_cast<std::size_t>(i) * res.k + kk] != want) {
            ok = false;
            fail = "knn index mismatch";
          }
        }
      }
    }
  }

  // nearest-neighbor loss vs brute force, 1000 instances
  if (ok) {
    std::mt19937_64 rng(103);
    for (int it = 0; it < 1000 && ok; ++it) {
      const int n = 1 + static_cast<int>(rng() % 8);
      const int m = 1 + static_cast<int>(rng() % 10);
      auto p = rand_points(n, rng);
      auto t = rand_points(m, rng);
      double oracle = 0;
      for (int i = 0; i < n; ++i) {
        double best = 1e300;
        for (int j = 0; j < m; ++j) {
          double d2 = 0;
          for (int c = 0; c < 3; ++c) {
            const double d = p(i, c) - t(j, c);
            d2 += d * d;
          }
          best = std::min(best, d2);
        }
        oracle += best;
      }
      oracle /= n;
      if (std::abs(nearest_neighbor_loss(p, t).value - oracle) > 1e-9 * std::max(1.0, oracle)) {
        ok = false;
        fail = "nn loss mismatch";
      }
    }
  }

  // cycle loss vs closed form, 1000 instances
  if (ok) {
    std::mt19937_64 rng(107);
    for (int it = 0; it < 1000 && ok; ++it) {
      const int n = 1 + static_cast<int>(rng() % 8);
      auto x = rand_points(n, rng);
      auto y = rand_points(n, rng);
      double oracle = 0;
      for (int i = 0; i < x.numel(); ++i) {
        const double d = x.data[i] - y.data[i];
        oracle += d * d;
      }
      oracle /= n;
      if (std::abs(cycle_consistency_loss(x, y).value - oracle) > 1e-9 * std::max(1.0, oracle)) {
        ok = false;
        fail = "cycle loss mismatch";
      }
    }
  }

  // rotated-rectangle IoU vs Monte-Carlo area sampling, 1000 pairs, tol 0.01
  double worst_iou = 0.0;
  if (ok) {
    std::mt19937_64 rng(109);
    for (int it = 0; it < 1000 && ok; ++it) {
      Box a = rand_box(rng);
      Box b = rand_box(rng);
      const double exact = bev_iou(a, b);
      const double mc = mc_iou(a, b, rng, 200000);
      worst_iou = std::max(worst_iou, std::abs(exact - mc));
      if (std::abs(exact - mc) > kIouMcTol || exact < 0.0 || exact > 1.0) {
        ok = false;
        fail = "bev_iou outside MC tolerance";
      }
    }
  }

  // AP vs independent re-computation, 1000 instances, tol 1e-9
  if (ok) {
    std::mt19937_64 rng(113);
    std::uniform_real_distribution<double> sc(0.0, 1.0);
    int evaluated = 0;
    for (int it = 0; evaluated < 1000 && ok; ++it) {
      const int n_frames = 1 + static_cast<int>(rng() % 3);
      std::vector<std::vector<Box>> dets(n_frames), gts(n_frames);
      int total_gt = 0;
      for (int f = 0; f < n_frames; ++f) {
        const int ng = static_cast<int>(rng() % 4);
        const int nd = static_cast<int>(rng() % 5);
        for (int i = 0; i < ng; ++i) gts[f].push_back(rand_box(rng));
        total_gt += ng;
        for (int i = 0; i < nd; ++i) {
          Box d = (!gts[f].empty() && rng() % 2) ? gts[f][rng() % gts[f].size()] : rand_box(rng);
          d.x += 0.05 * (sc(rng) - 0.5);
          d.y += 0.05 * (sc(rng) - 0.5);
          d.score = sc(rng);
          dets[f].push_back(d);
        }
      }
      if (total_gt == 0) continue;
      ++evaluated;
      auto r = average_precision(dets, gts, 0.7);
      if (std::abs(r.ap - ap_oracle(dets, gts, 0.7)) > kApTol) {
        ok = false;
        fail = "AP mismatch";
      }
    }
  }

  char buf[192];
  std::snprintf(buf, sizeof(buf),
                "1000 instances per op, IoU worst MC gap %.4f (tol %.2f)%s%s", worst_iou,
                kIouMcTol, ok ? "" : " — ", fail.c_str());
  report("oracle equivalence", ok, buf);
  CHECK(ok);
}

TEST_CASE("flow pre-training beats the zero-flow baseline on held-out scenes") {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = desk_config();
  cfg.out_dir = scratch_dir("flow");
  REQUIRE(cfg.steps <= 2000);

  auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
  auto model = init_model_params<float>(cfg.model, cfg.seed);
  // the training loop sees scenes only through FlowPairView (frames, no labels)
  auto res = pretrain_flow(cfg, data, model);
  auto ev = flow_eval_on(model, data, data.val_ids(), cfg.remove_ground, cfg.ground_z);
  const double elapsed = now_minus(t0);

  const double ratio = ev.epe / ev.epe_zero;
  const bool ok = !res.diverged && ratio <= kFlowEpeRatioGate && elapsed <= kFlowBudgetSec;
  g_shared.flow_checkpoint = ok ? res.checkpoint : "";

  char buf[192];
  std::snprintf(buf, sizeof(buf),
                "val EPE %.4f vs zero-flow %.4f (ratio %.3f, gate %.2f), %d steps, %.0fs",
                ev.epe, ev.epe_zero, ratio, kFlowEpeRatioGate, static_cast<int>(res.final_step),
                elapsed);
  report("self-supervised flow pre-training", ok, buf);
  CHECK_FALSE(res.diverged);
  CHECK(ratio <= kFlowEpeRatioGate);
  CHECK(elapsed <= kFlowBudgetSec);
}

TEST_CASE("flow pre-training improves low-data detection") {
  const auto t0 = std::chrono::steady_clock::now();
  REQUIRE_FALSE(g_shared.flow_checkpoint.empty());

  RunConfig base = desk_config();
  base.stage = "train-detect";
  base.steps = 600;
  base.eval_every = 100;
  base.eval_iou = 0.3;

  const double fractions[2] = {0.05, 0.20};
  const std::uint64_t seeds[3] = {1, 2, 3};
  bool ok = true;
  std::string detail;
  for (double frac : fractions) {
    double mean_rand = 0, mean_flow = 0;
    for (std::uint64_t s : seeds) {
      RunConfig cfg = base;
      cfg.label_fraction = frac;
      cfg.seed = s;
      auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);

      cfg.out_dir = scratch_dir(("det_rand_" + std::to_string(frac) + "_" +
                                 std::to_string(s)).c_str());
      auto rand_model = init_model_params<float>(cfg.model, cfg.seed);
      mean_rand += train_detect(cfg, data, rand_model).final_metric / 3.0;

      cfg.out_dir = scratch_dir(("det_flow_" + std::to_string(frac) + "_" +
                                 std::to_string(s)).c_str());
      auto flow_model = init_model_params<float>(cfg.model, cfg.seed);
      load_checkpoint(g_shared.flow_checkpoint, flow_model, {"g"});
      mean_flow += train_detect(cfg, data, flow_model).final_metric / 3.0;
    }
    ok = ok && mean_flow > mean_rand;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "frac %.2f: flow-init AP %.3f vs random-init %.3f; ",
                  frac, mean_flow, mean_rand);
    detail += buf;
  }
  const double elapsed = now_minus(t0);
  const bool time_ok = elapsed <= kLowDataBudgetSec;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.0fs (budget %.0fs)", elapsed, kLowDataBudgetSec);
  report("low-data detection benefit", ok && time_ok, detail + buf);
  CHECK(ok);
  CHECK(time_ok);
}

TEST_CASE("alternating schedule wires stages correctly") {
  RunConfig cfg = desk_config();
  cfg.stage = "alternate";
  cfg.alt_flow_steps = 300;
  cfg.alt_detect_steps = 300;
  cfg.label_fraction = 0.2;
  cfg.eval_iou = 0.3;
  cfg.eval_every = 100;

  bool wiring_ok = true;
  int improved = 0;
  std::string detail;
  for (std::uint64_t s : {1ULL, 2ULL, 3ULL}) {
    cfg.seed = s;
    cfg.out_dir = scratch_dir(("alt_" + std::to_string(s)).c_str());
    auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
    auto res = alternate_train(cfg, data);
    wiring_ok = wiring_ok && res.audit.ok() && !res.diverged;
    if (res.ap_stage_iv >= res.ap_stage_ii) ++improved;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "seed %d: AP (ii) %.3f -> (iv) %.3f%s; ",
                  static_cast<int>(s), res.ap_stage_ii, res.ap_stage_iv,
                  res.audit.ok() ? "" : " WIRING-FAIL");
    detail += buf;
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "stage (iv) >= (ii) in %d/3 seeds (reported, not gated)",
                improved);
  // the wiring audit gates; the AP direction across seeds is informational
  report("alternating schedule", wiring_ok, detail + buf);
  CHECK(wiring_ok);
}

TEST_CASE("determinism and checkpoint integrity") {
  RunConfig cfg = tiny_run(scratch_dir("det_run_a"));
  auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);

  auto model_a = init_model_params<float>(cfg.model, cfg.seed);
  auto res_a = pretrain_flow(cfg, data, model_a);
  auto ev_a = flow_eval_on(model_a, data, data.val_ids());

  cfg.out_dir = scratch_dir("det_run_b");
  auto model_b = init_model_params<float>(cfg.model, cfg.seed);
  auto res_b = pretrain_flow(cfg, data, model_b);
  auto ev_b = flow_eval_on(model_b, data, data.val_ids());

  const bool metrics_ok = std::abs(ev_a.epe - ev_b.epe) <= kDeterminismTol &&
                          std::abs(res_a.best_metric - res_b.best_metric) <= kDeterminismTol;
  bool params_ok = true;
  for (auto& [name, p] : model_a.params) {
    params_ok = params_ok && p.value.data == param_at(model_b.params, name).value.data;
  }

  // round trip is bitwise; a namespace-filtered load touches only that prefix
  const std::string ckpt = scratch_dir("det_ckpt") + "/m.bin";
  CheckpointMeta meta;
  meta.step = 7;
  save_checkpoint(ckpt, model_a, meta, static_cast<const AdamState<float>*>(nullptr));
  auto model_c = init_model_params<float>(cfg.model, cfg.seed + 1);
  const std::uint64_t h_before = namespace_hash(model_c, "h");
  load_checkpoint(ckpt, model_c, {"g", "s"});
  bool filtered_ok = namespace_hash(model_c, "h") == h_before;
  filtered_ok = filtered_ok && namespace_hash(model_c, "g") == namespace_hash(model_a, "g");
  filtered_ok = filtered_ok && namespace_hash(model_c, "s") == namespace_hash(model_a, "s");

  auto model_d = init_model_params<float>(cfg.model, cfg.seed + 2);
  load_checkpoint(ckpt, model_d);
  bool round_trip_ok = true;
  for (auto& [name, p] : model_a.params) {
    round_trip_ok = round_trip_ok && p.value.data == param_at(model_d.params, name).value.data;
  }

  char buf[192];
  std::snprintf(buf, sizeof(buf),
                "|EPE delta| %.2g (tol %.0e), params bitwise %s, round trip %s, filtered load %s",
                std::abs(ev_a.epe - ev_b.epe), kDeterminismTol, params_ok ? "equal" : "DIFFER",
                round_trip_ok ? "exact" : "FAIL", filtered_ok ? "exact" : "FAIL");
  report("determinism and checkpoints", metrics_ok && params_ok && round_trip_ok && filtered_ok,
         buf);
  CHECK(metrics_ok);
  CHECK(params_ok);
  CHECK(round_trip_ok);
  CHECK(filtered_ok);
}

TEST_CASE("analytic zero cases") {
  // a static scene through a zeroed flow output layer: flow == 0, cycle == 0
  GeneratorConfig gen;
  gen.speed_min = gen.speed_max = 0.0;
  gen.yaw_rate_max = 0.0;
  gen.dropout_prob = 0.0;
  gen.jitter_sigma = 0.0;
  gen.background_points = 120;
  gen.object_surface_points = 40;
  auto scene = generate_scene<double>(gen, 42);
  auto cfg = tiny_model();
  auto model = init_model_params<double>(cfg, 7);
  param_at(model.params, "s.fc.0.w").value = Tensor<double>::zeros({16, 3});
  param_at(model.params, "s.fc.0.b").value = Tensor<double>::zeros({3});
  auto fp = forward_backward_flow(scene.frame_t, scene.frame_t1, model, 13);
  bool flow_zero = true;
  for (double v : fp.flow_fwd.data) flow_zero = flow_zero && v == 0.0;
  for (double v : fp.flow_bwd.data) flow_zero = flow_zero && v == 0.0;
  const double cyc =
      flow_total_loss(fp.enc1.sampled_xyz, scene.frame_t1.xyz, fp.p_prime, fp.p_dprime)
          .report.cycle_loss;
  const bool cycle_zero = cyc == 0.0;

  // detections identical to ground truth: AP exactly 1
  std::mt19937_64 rng(211);
  std::vector<std::vector<Box>> gts(4), dets(4);
  for (int f = 0; f < 4; ++f) {
    const int n = 1 + static_cast<int>(rng() % 3);
    for (int i = 0; i < n; ++i) {
      Box b = rand_box(rng);
      gts[f].push_back(b);
      b.score = 0.5 + 0.4 * (i % 2);
      dets[f].push_back(b);
    }
  }
  const bool ap_one = average_precision(dets, gts, 0.7).ap == 1.0;

  // target encoding decodes back to the source boxes within 1e-4
  DetectHeadConfig dcfg;
  dcfg.bev_extent = 6.0;
  dcfg.bev_cells = 16;
  std::vector<Box> boxes{Box(-3.2, 1.7, 0.3, 1.4, 2.6, 1.1, 0.6),
                         Box(2.9, -4.1, -0.1, 2.0, 3.1, 1.4, -1.2)};
  auto targets = make_detection_targets<double>(boxes, dcfg);
  auto decoded = decode_detections(targets.heatmap, targets.reg, dcfg, 0.5);
  bool decode_ok = decoded.size() == boxes.size();
  if (decode_ok) {
    for (const auto& b : boxes) {
      double best = 1e300;
      for (const auto& d : decoded) {
        const double err = std::max({std::abs(d.x - b.x), std::abs(d.y - b.y),
                                     std::abs(d.z - b.z), std::abs(d.w - b.w),
                                     std::abs(d.l - b.l), std::abs(d.h - b.h),
                                     std::abs(d.yaw - b.yaw)});
        best = std::min(best, err);
      }
      decode_ok = decode_ok && best <= kDecodeTol;
    }
  }

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "static-scene flow %s, cycle loss %.1g, perfect-detection AP %s, "
                "encode-decode %s (tol %.0e)",
                flow_zero ? "== 0" : "NONZERO", cyc, ap_one ? "== 1" : "!= 1",
                decode_ok ? "ok" : "FAIL", kDecodeTol);
  report("analytic zero cases", flow_zero && cycle_zero && ap_one && decode_ok, buf);
  CHECK(flow_zero);
  CHECK(cycle_zero);
  CHECK(ap_one);
  CHECK(decode_ok);
}

TEST_CASE("point-cloud file format round trip") {
  const std::string dir = scratch_dir("kitti");
  const std::string path = dir + "/cloud.bin";
  std::mt19937_64 rng(301);
  const int n = 137;
  PointCloud<float> cloud;
  cloud.xyz = uniform<float>({n, 3}, rng, -40.0, 40.0);
  std::vector<float> refl;
  for (int i = 0; i < n; ++i) refl.push_back(static_cast<float>(rng() % 256) / 255.0f);
  cloud.reflectance = refl;
  save_kitti_bin(cloud, path);

  const auto size = std::filesystem::file_size(path);
  const bool size_ok = size == static_cast<std::uintmax_t>(n) * 16;

  auto back = load_kitti_bin<float>(path);
  const bool count_ok = back.size() == static_cast<int>(size / 16);
  bool identity = back.xyz.data == cloud.xyz.data && back.reflectance.has_value() &&
                  *back.reflectance == refl;

  char buf[128];
  std::snprintf(buf, sizeof(buf), "%d points, %ju bytes (== n*16: %s), reader o writer identity %s",
                n, static_cast<std::uintmax_t>(size), size_ok ? "yes" : "NO",
                identity ? "exact" : "FAIL");
  report("point-cloud file format", size_ok && count_ok && identity, buf);
  CHECK(size_ok);
  CHECK(count_ok);
  CHECK(identity);
}
