#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <sstream>

#include "flowdet/eval.hpp"

using namespace flowdet;

namespace {

// area-sampling oracle for rotated-rectangle IoU
double mc_iou(const Box& a, const Box& b, std::mt19937_64& rng, int n_samples = 1000000) {
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

Box rand_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(-2.0, 2.0), size(0.5, 3.0), ang(-M_PI, M_PI);
  return Box(pos(rng), pos(rng), 0.0, size(rng), size(rng), 1.0, ang(rng), 0, 1.0);
}

// independent AP re-computation: sort all dets globally, greedy match per frame,
// then integrate the 40-point interpolated curve from scratch
double ap_oracle(const std::vector<std::vector<Box>>& dets,
                 const std::vector<std::vector<Box>>& gts, double iou) {
  int n_gt = 0;
  for (const auto& g : gts) n_gt += static_cast<int>(g.size());
  REQUIRE(n_gt > 0);
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

}  // namespace

TEST_CASE("epe") {
  Tensor<double> gt({3, 3}, {1, 2, 3, -1, 0, 2, 0.5, 0.5, 0.5});
  CHECK(epe(gt, gt) == 0.0);

  Tensor<double> pred = gt;
  for (int i = 0; i < 3; ++i) {
    pred(i, 1) += 3.0;
    pred(i, 2) += 4.0;
  }
  CHECK(epe(pred, gt) == doctest::Approx(5.0).epsilon(1e-12));

  // zero-flow predictor on a uniform-speed field -> speed
  Tensor<double> flow = Tensor<double>::zeros({4, 3});
  for (int i = 0; i < 4; ++i) {
    flow(i, 0) = 0.6;
    flow(i, 1) = 0.8;
  }
  CHECK(epe(Tensor<double>::zeros({4, 3}), flow) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(epe(gt, Tensor<double>::zeros({2, 3})), ShapeError);
}

TEST_CASE("decode_detections") {
  DetectHeadConfig cfg;
  cfg.bev_cells = 16;
  cfg.bev_extent = 8.0;

  SUBCASE("all-zero heatmap -> empty") {
    auto dets = decode_detections(Tensor<double>::zeros({16, 16}),
                                  Tensor<double>::zeros({16, 16, 8}), cfg);
    CHECK(dets.empty());
  }

  SUBCASE("encode-decode round trip") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> pos(-6.0, 6.0), size(0.8, 3.0), ang(-3.0, 3.0);
    for (int it = 0; it < 50; ++it) {
      Box b(pos(rng), pos(rng), pos(rng) * 0.1, size(rng), size(rng), size(rng), ang(rng));
      auto tg = make_detection_targets<double>({b}, cfg);
      REQUIRE(tg.dropped == 0);
      auto dets = decode_detections(tg.heatmap, tg.reg, cfg, 0.5);
      REQUIRE(dets.size() == 1);
      CHECK(dets[0].x == doctest::Approx(b.x).epsilon(1e-4));
      CHECK(dets[0].y == doctest::Approx(b.y).epsilon(1e-4));
      CHECK(dets[0].z == doctest::Approx(b.z).epsilon(1e-4));
      CHECK(dets[0].w == doctest::Approx(b.w).epsilon(1e-4));
      CHECK(dets[0].l == doctest::Approx(b.l).epsilon(1e-4));
      CHECK(dets[0].h == doctest::Approx(b.h).epsilon(1e-4));
      CHECK(std::abs(wrap_angle(dets[0].yaw - b.yaw)) < 1e-4);
    }
  }

  SUBCASE("adjacent equal peaks: exactly one survives, lowest cell index") {
    Tensor<double> hm = Tensor<double>::zeros({16, 16});
    hm(5, 5) = 0.9;
    hm(5, 6) = 0.9;
    Tensor<double> rg = Tensor<double>::zeros({16, 16, 8});
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) rg(i, j, 7) = 1.0;  // cos(yaw)=1 so atan2 is defined
    }
    auto dets = decode_detections(hm, rg, cfg, 0.5);
    REQUIRE(dets.size() == 1);
    // cell (5,5) -> x = -8 + 5.5
    CHECK(dets[0].x == doctest::Approx(-2.5));
    CHECK(dets[0].y == doctest::Approx(-2.5));
  }

  SUBCASE("max_dets caps output by score") {
    Tensor<double> hm = Tensor<double>::zeros({16, 16});
    hm(2, 2) = 0.9;
    hm(8, 8) = 0.7;
    hm(13, 13) = 0.8;
    Tensor<double> rg = Tensor<double>::zeros({16, 16, 8});
    for (auto& v : rg.data) v = 0;
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) rg(i, j, 7) = 1.0;
    }
    auto dets = decode_detections(hm, rg, cfg, 0.5, 2);
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].score == doctest::Approx(0.9));
    CHECK(dets[1].score == doctest::Approx(0.8));
  }
}

TEST_CASE("bev_iou hand cases") {
  Box a(0, 0, 0, 1, 1, 1, 0);
  CHECK(bev_iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  Box b(0.5, 0, 0, 1, 1, 1, 0);
  CHECK(bev_iou(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-9));

  Box far(10, 10, 0, 1, 1, 1, 0);
  CHECK(bev_iou(a, far) == 0.0);

  // symmetry and yaw period
  Box r1(0.2, -0.1, 0, 2, 1, 1, 0.7);
  Box r2(0.5, 0.3, 0, 1.5, 1.2, 1, -0.4);
  CHECK(bev_iou(r1, r2) == doctest::Approx(bev_iou(r2, r1)).epsilon(1e-12));
  Box r1p = r1;
  r1p.yaw = wrap_angle(r1.yaw + M_PI);
  CHECK(bev_iou(r1, r1p) == doctest::Approx(1.0).epsilon(1e-9));

  std::vector<Box> bad(1);
  bad[0].w = 0;
  bad[0].l = 1;
  CHECK_THROWS_AS(bev_iou(bad[0], a), ShapeError);
}

TEST_CASE("bev_iou matches Monte-Carlo oracle on random rotated pairs") {
  std::mt19937_64 rng(23);
  for (int it = 0; it < 25; ++it) {
    Box a = rand_box(rng);
    Box b = rand_box(rng);
    const double exact = bev_iou(a, b);
    const double mc = mc_iou(a, b, rng);
    CHECK(std::abs(exact - mc) < 0.01);
    CHECK(exact >= 0.0);
    CHECK(exact <= 1.0);
  }
}

TEST_CASE("nms") {
  Box a(0, 0, 0, 2, 4, 1.5, 0.1, 0, 0.9);
  CHECK(nms({a}, 0.5).size() == 1);

  Box b = a;
  b.score = 0.8;
  auto kept = nms({b, a}, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == doctest::Approx(0.9));

  Box c(10, 10, 0, 2, 4, 1.5, 0.1, 0, 0.5);
  CHECK(nms({a, b, c}, 0.5).size() == 2);
  CHECK(nms({}, 0.5).empty());
}

TEST_CASE("average_precision hand cases") {
  Box gt(0, 0, 0, 2, 4, 1.5, 0.0);

  SUBCASE("perfect detection -> 1.0") {
    Box det = gt;
    det.score = 0.9;
    auto r = average_precision({{det}}, {{gt}});
    CHECK(r.ap == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.tp == 1);
    CHECK(r.fp == 0);
    CHECK(r.fn == 0);
  }

  SUBCASE("only the lower-scored of two detections matches -> 0.5") {
    Box miss(10, 10, 0, 2, 4, 1.5, 0.0, 0, 0.9);
    Box hit = gt;
    hit.score = 0.4;
    auto r = average_precision({{miss, hit}}, {{gt}});
    CHECK(r.ap == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(r.tp == 1);
    CHECK(r.fp == 1);
  }

  SUBCASE("no ground truth -> NaN with flag") {
    Box det = gt;
    det.score = 0.9;
    auto r = average_precision({{det}}, {{}});
    CHECK(r.undefined);
    CHECK(std::isnan(r.ap));
  }

  SUBCASE("missed gt counts as FN and caps recall") {
    Box det = gt;
    det.score = 0.9;
    Box gt2(10, 10, 0, 2, 4, 1.5, 0.0);
    auto r = average_precision({{det}}, {{gt, gt2}});
    CHECK(r.fn == 1);
    // recall never reaches above 0.5 -> interpolated precision 0 there
    CHECK(r.ap == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("average_precision matches exhaustive oracle on 1000 random instances") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> sc(0.0, 1.0);
  for (int it = 0; it < 1000; ++it) {
    const int n_frames = 1 + static_cast<int>(rng() % 3);
    std::vector<std::vector<Box>> dets(n_frames), gts(n_frames);
    int total_gt = 0;
    for (int f = 0; f < n_frames; ++f) {
      const int ng = static_cast<int>(rng() % 4);
      const int nd = static_cast<int>(rng() % 5);
      for (int i = 0; i < ng; ++i) gts[f].push_back(rand_box(rng));
      total_gt += ng;
      for (int i = 0; i < nd; ++i) {
        // half the detections are jittered copies of a gt, half are random
        Box d = (!gts[f].empty() && rng() % 2) ? gts[f][rng() % gts[f].size()] : rand_box(rng);
        d.x += 0.05 * (sc(rng) - 0.5);
        d.y += 0.05 * (sc(rng) - 0.5);
        d.score = sc(rng);
        dets[f].push_back(d);
      }
    }
    if (total_gt == 0) continue;
    auto r = average_precision(dets, gts, 0.7);
    CHECK(std::abs(r.ap - ap_oracle(dets, gts, 0.7)) <= 1e-9);
    CHECK(r.ap >= 0.0);
    CHECK(r.ap <= 1.0);
  }
}

TEST_CASE("average_precision is monotone when a false positive is removed") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> sc(0.0, 1.0);
  for (int it = 0; it < 200; ++it) {
    std::vector<std::vector<Box>> gts(1), dets(1);
    const int ng = 1 + static_cast<int>(rng() % 3);
    for (int i = 0; i < ng; ++i) gts[0].push_back(rand_box(rng));
    for (int i = 0; i < 4; ++i) {
      Box d = (rng() % 2) ? gts[0][rng() % gts[0].size()] : rand_box(rng);
      d.score = sc(rng);
      dets[0].push_back(d);
    }
    auto base = average_precision(dets, gts, 0.7);
    // find one FP and remove it
    for (std::size_t i = 0; i < dets[0].size(); ++i) {
      bool is_fp = true;
      for (const auto& g : gts[0]) {
        if (bev_iou(dets[0][i], g) >= 0.7) is_fp = false;
      }
      if (!is_fp) continue;
      auto reduced = dets;
      reduced[0].erase(reduced[0].begin() + static_cast<long>(i));
      auto after = average_precision(reduced, gts, 0.7);
      CHECK(after.ap >= base.ap - 1e-12);
      break;
    }
  }
}

TEST_CASE("distance_binned_ap splits by range") {
  Box near_gt(1, 1, 0, 2, 4, 1.5, 0.0);
  Box far_gt(15, 10, 0, 2, 4, 1.5, 0.0);
  Box near_det = near_gt;
  near_det.score = 0.9;
  auto r = distance_binned_ap({{near_det}}, {{near_gt, far_gt}});
  CHECK(r.near_bin.ap == doctest::Approx(1.0));
  CHECK(r.mid_bin.undefined);
  CHECK(r.far_bin.ap == 0.0);
}

TEST_CASE("pr curve csv") {
  std::ostringstream os;
  write_pr_curve_csv(os, {{0.5, 1.0}, {1.0, 0.5}});
  CHECK(os.str() == "recall,precision\n0.5,1\n1,0.5\n");
}
