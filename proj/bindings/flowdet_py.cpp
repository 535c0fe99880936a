// Python bindings for the flowdet core ops and run-level entry points.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "flowdet/config.hpp"
#include "flowdet/train.hpp"

namespace py = pybind11;
using namespace flowdet;

namespace {

Tensor<double> to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  const int rows = static_cast<int>(a.shape(0));
  const int cols = static_cast<int>(a.shape(1));
  std::vector<double> data(a.data(), a.data() + static_cast<std::size_t>(rows) * cols);
  return Tensor<double>({rows, cols}, std::move(data));
}

py::array_t<double> to_array(const Tensor<double>& t) {
  if (t.shape.size() != 2) throw ShapeError("expected a rank-2 tensor");
  py::array_t<double> a({t.shape[0], t.shape[1]});
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

Box box_from_tuple(const py::dict& d) {
  return Box(d["x"].cast<double>(), d["y"].cast<double>(), d["z"].cast<double>(),
             d["w"].cast<double>(), d["l"].cast<double>(), d["h"].cast<double>(),
             d["yaw"].cast<double>(), d.contains("class_id") ? d["class_id"].cast<int>() : 0,
             d.contains("score") ? d["score"].cast<double>() : 1.0);
}

py::dict box_to_dict(const Box& b) {
  py::dict d;
  d["x"] = b.x;
  d["y"] = b.y;
  d["z"] = b.z;
  d["w"] = b.w;
  d["l"] = b.l;
  d["h"] = b.h;
  d["yaw"] = b.yaw;
  d["class_id"] = b.class_id;
  d["score"] = b.score;
  return d;
}

std::vector<Box> boxes_from_list(const py::list& l) {
  std::vector<Box> out;
  for (auto item : l) out.push_back(box_from_tuple(item.cast<py::dict>()));
  return out;
}

RunConfig config_from_json_str(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_flowdet, m) {
  m.doc() = "Scene-flow pre-training core: point ops, losses, eval, run entry points";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "farthest_point_sample",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> xyz, int n,
         std::uint64_t seed) { return farthest_point_sample(to_tensor(xyz), n, seed); },
      py::arg("xyz"), py::arg("n"), py::arg("seed") = 0);

  m.def(
      "knn",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> query,
         py::array_t<double, py::array::c_style | py::array::forcecast> reference, int k) {
        auto r = knn(to_tensor(query), to_tensor(reference), k);
        const int q = r.dists.shape[0];
        py::array_t<int> idx({q, r.k});
        std::copy(r.indices.begin(), r.indices.end(), idx.mutable_data());
        return py::make_tuple(idx, to_array(r.dists));
      },
      py::arg("query"), py::arg("reference"), py::arg("k"));

  m.def(
      "nearest_neighbor_loss",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> propagated,
         py::array_t<double, py::array::c_style | py::array::forcecast> target,
         bool squared) {
        auto r = nearest_neighbor_loss(to_tensor(propagated), to_tensor(target),
                                       squared ? DistanceForm::kSquared
                                               : DistanceForm::kEuclidean);
        return py::make_tuple(r.value, to_array(r.grad));
      },
      py::arg("propagated"), py::arg("target"), py::arg("squared") = true);

  m.def(
      "cycle_consistency_loss",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> anchors,
         py::array_t<double, py::array::c_style | py::array::forcecast> reconstructed,
         bool squared) {
        auto r = cycle_consistency_loss(to_tensor(anchors), to_tensor(reconstructed),
                                        squared ? DistanceForm::kSquared
                                                : DistanceForm::kEuclidean);
        return py::make_tuple(r.value, to_array(r.grad));
      },
      py::arg("anchors"), py::arg("reconstructed"), py::arg("squared") = true);

  m.def(
      "epe",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> pred,
         py::array_t<double, py::array::c_style | py::array::forcecast> gt) {
        return epe(to_tensor(pred), to_tensor(gt));
      },
      py::arg("pred_flow"), py::arg("gt_flow"));

  m.def(
      "bev_iou",
      [](const py::dict& a, const py::dict& b) {
        return bev_iou(box_from_tuple(a), box_from_tuple(b));
      },
      py::arg("box_a"), py::arg("box_b"));

  m.def(
      "nms",
      [](const py::list& boxes, double iou_threshold) {
        py::list out;
        for (const auto& b : nms(boxes_from_list(boxes), iou_threshold)) out.append(box_to_dict(b));
        return out;
      },
      py::arg("boxes"), py::arg("iou_threshold"));

  m.def(
      "average_precision",
      [](const py::list& dets_per_frame, const py::list& gts_per_frame, double iou_threshold) {
        std::vector<std::vector<Box>> dets, gts;
        for (auto f : dets_per_frame) dets.push_back(boxes_from_list(f.cast<py::list>()));
        for (auto f : gts_per_frame) gts.push_back(boxes_from_list(f.cast<py::list>()));
        auto r = average_precision(dets, gts, iou_threshold);
        py::dict d;
        d["ap"] = r.ap;
        d["undefined"] = r.undefined;
        d["tp"] = r.tp;
        d["fp"] = r.fp;
        d["fn"] = r.fn;
        py::list curve;
        for (const auto& p : r.pr_curve) curve.append(py::make_tuple(p.recall, p.precision));
        d["pr_curve"] = curve;
        return d;
      },
      py::arg("dets_per_frame"), py::arg("gts_per_frame"), py::arg("iou_threshold") = 0.7);

  m.def(
      "generate_scene",
      [](const std::string& generator_json, std::uint64_t seed) {
        GeneratorConfig g = cfgjson::parse_generator(nlohmann::json::parse(generator_json));
        g.validate();
        auto s = generate_scene<double>(g, seed);
        py::dict d;
        d["frame_t"] = to_array(s.frame_t.xyz);
        d["frame_t1"] = to_array(s.frame_t1.xyz);
        if (s.gt_flow) d["gt_flow"] = to_array(*s.gt_flow);
        py::list boxes;
        for (const auto& b : s.gt_boxes_t) boxes.append(box_to_dict(b));
        d["gt_boxes_t"] = boxes;
        d["seed"] = s.seed;
        return d;
      },
      py::arg("generator_json"), py::arg("seed"));

  m.def(
      "remove_ground",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> xyz, double z_min) {
        PointCloud<double> c;
        c.xyz = to_tensor(xyz);
        auto r = remove_ground(c, z_min);
        return py::make_tuple(to_array(r.cloud.xyz), r.orig_idx);
      },
      py::arg("xyz"), py::arg("z_min"));

  m.def(
      "load_kitti_bin",
      [](const std::string& path) {
        auto c = load_kitti_bin<double>(path);
        py::dict d;
        d["xyz"] = to_array(c.xyz);
        if (c.reflectance) {
          py::array_t<double> r(
              std::vector<py::ssize_t>{static_cast<py::ssize_t>(c.reflectance->size())});
          std::copy(c.reflectance->begin(), c.reflectance->end(), r.mutable_data());
          d["reflectance"] = r;
        }
        return d;
      },
      py::arg("path"));

  m.def(
      "save_kitti_bin",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> xyz,
         const py::object& reflectance, const std::string& path) {
        PointCloud<double> c;
        c.xyz = to_tensor(xyz);
        if (!reflectance.is_none()) {
          auto r = reflectance.cast<
              py::array_t<double, py::array::c_style | py::array::forcecast>>();
          c.reflectance = std::vector<double>(r.data(), r.data() + r.size());
        }
        save_kitti_bin(c, path);
      },
      py::arg("xyz"), py::arg("reflectance"), py::arg("path"));

  m.def(
      "pretrain_flow",
      [](const std::string& config_json) {
        RunConfig cfg = config_from_json_str(config_json);
        auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
        auto model = init_model_params<float>(cfg.model, cfg.seed);
        auto res = pretrain_flow(cfg, data, model);
        auto ev = flow_eval_on(model, data, data.val_ids(), cfg.remove_ground, cfg.ground_z);
        py::dict d;
        d["final_step"] = res.final_step;
        d["diverged"] = res.diverged;
        d["checkpoint"] = res.checkpoint;
        d["val_epe"] = ev.epe;
        d["val_epe_zero"] = ev.epe_zero;
        return d;
      },
      py::arg("config_json"));

  m.def(
      "train_detect",
      [](const std::string& config_json) {
        RunConfig cfg = config_from_json_str(config_json);
        auto data = SyntheticDataset<float>::make(cfg.dataset, cfg.seed);
        auto model = init_model_params<float>(cfg.model, cfg.seed);
        if (!cfg.init_checkpoint.empty()) load_checkpoint(cfg.init_checkpoint, model, {"g"});
        auto res = train_detect(cfg, data, model);
        py::dict d;
        d["final_step"] = res.final_step;
        d["diverged"] = res.diverged;
        d["checkpoint"] = res.checkpoint;
        d["val_ap"] = res.final_metric;
        return d;
      },
      py::arg("config_json"));
}
