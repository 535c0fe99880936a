#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowdet/box.hpp"
#include "flowdet/pointops.hpp"
#include "flowdet/tensor.hpp"

namespace flowdet {

// Synthetic lidar-like scene generator settings.
struct GeneratorConfig {
  int n_objects_min = 2;
  int n_objects_max = 4;
  double size_w_min = 1.6, size_w_max = 2.4;  // meters
  double size_l_min = 3.2, size_l_max = 4.8;
  double size_h_min = 1.4, size_h_max = 1.9;
  double speed_min = 0.4, speed_max = 1.2;  // meters per frame
  double yaw_rate_max = 0.05;               // radians per frame
  int background_points = 700;
  int object_surface_points = 140;  // per object
  double dropout_prob = 0.1;
  double jitter_sigma = 0.01;  // meters
  double extent = 20.0;        // half side of the scene square
  bool ego_motion = false;     // optional whole-scene translation of frame t+1
  double ego_speed = 0.5;

  std::uint64_t hash() const {
    std::ostringstream os;
    os << n_objects_min << ',' << n_objects_max << ',' << size_w_min << ',' << size_w_max << ','
       << size_l_min << ',' << size_l_max << ',' << size_h_min << ',' << size_h_max << ','
       << speed_min << ',' << speed_max << ',' << yaw_rate_max << ',' << background_points << ','
       << object_surface_points << ',' << dropout_prob << ',' << jitter_sigma << ',' << extent
       << ',' << ego_motion << ',' << ego_speed;
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : os.str()) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    return h;
  }

  void validate() const {
    if (extent <= 0) throw ConfigError("GeneratorConfig: degenerate extent");
    if (n_objects_max < n_objects_min || n_objects_min < 0) {
      throw ConfigError("GeneratorConfig: empty object-count range");
    }
    if (dropout_prob < 0 || dropout_prob >= 1) {
      throw ConfigError("GeneratorConfig: dropout must be in [0, 1)");
    }
    if (speed_max < speed_min || size_w_max < size_w_min || size_l_max < size_l_min ||
        size_h_max < size_h_min) {
      throw ConfigError("GeneratorConfig: empty range");
    }
  }
};

// A frame pair with exact ground truth. gt_flow rows match frame_t points;
// it maps each observed frame-t point to the underlying surface position at
// t+1, so EPE against it is exact even under dropout and jitter.
template <typename T>
struct SceneSample {
  PointCloud<T> frame_t;
  PointCloud<T> frame_t1;
  std::optional<Tensor<T>> gt_flow;  // [M x 3], M == frame_t point count
  std::optional<Tensor<T>> clean_surface_t1;  // pre-dropout, pre-jitter t+1 surface
  std::vector<Box> gt_boxes_t;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

namespace detail {

// Uniform sample on the surface of an axis-aligned unit-centered cuboid.
template <typename T>
void cuboid_surface_point(std::mt19937_64& rng, double w, double l, double h, double out[3]) {
  // face areas: +-x (l*h), +-y (w*h), top/bottom (w*l)
  const double ax = l * h, ay = w * h, az = w * l;
  const double total = 2 * (ax + ay + az);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double r = u01(rng) * total;
  std::uniform_real_distribution<double> uw(-w / 2, w / 2), ul(-l / 2, l / 2), uh(-h / 2, h / 2);
  if (r < 2 * ax) {
    out[0] = (r < ax) ? w / 2 : -w / 2;
    out[1] = ul(rng);
    out[2] = uh(rng);
  } else if (r < 2 * ax + 2 * ay) {
    r -= 2 * ax;
    out[0] = uw(rng);
    out[1] = (r < ay) ? l / 2 : -l / 2;
    out[2] = uh(rng);
  } else {
    r -= 2 * ax + 2 * ay;
    out[0] = uw(rng);
    out[1] = ul(rng);
    out[2] = (r < az) ? h / 2 : -h / 2;
  }
}

}  // namespace detail

// Ground plane + static clutter + moving rigid boxes with exact flow.
template <typename T>
SceneSample<T> generate_scene(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::vector<std::array<double, 3>> pts_t;      // observed frame-t positions (jittered)
  std::vector<std::array<double, 3>> surf_t1;    // clean corresponding t+1 positions
  std::vector<bool> is_object;

  // ground plane (80% of background budget) and vertical clutter poles (20%)
  const int n_ground = cfg.background_points * 8 / 10;
  for (int i = 0; i < n_ground; ++i) {
    const double x = (u01(rng) * 2 - 1) * cfg.extent;
    const double y = (u01(rng) * 2 - 1) * cfg.extent;
    pts_t.push_back({x, y, 0.0});
    surf_t1.push_back({x, y, 0.0});
    is_object.push_back(false);
  }
  const int n_clutter = cfg.background_points - n_ground;
  const int n_poles = std::max(1, n_clutter / 12);
  for (int p = 0; p < n_poles; ++p) {
    const double x = (u01(rng) * 2 - 1) * cfg.extent * 0.9;
    const double y = (u01(rng) * 2 - 1) * cfg.extent * 0.9;
    const int per = n_clutter / n_poles;
    for (int i = 0; i < per; ++i) {
      const double z = u01(rng) * 2.5;
      pts_t.push_back({x, y, z});
      surf_t1.push_back({x, y, z});
      is_object.push_back(false);
    }
  }

  // moving rigid boxes
  std::vector<Box> boxes;
  const int k = cfg.n_objects_min +
                (cfg.n_objects_max > cfg.n_objects_min
                     ? static_cast<int>(rng() % static_cast<std::uint64_t>(
                                            cfg.n_objects_max - cfg.n_objects_min + 1))
                     : 0);
  for (int o = 0; o < k; ++o) {
    const double w = cfg.size_w_min + u01(rng) * (cfg.size_w_max - cfg.size_w_min);
    const double l = cfg.size_l_min + u01(rng) * (cfg.size_l_max - cfg.size_l_min);
    const double h = cfg.size_h_min + u01(rng) * (cfg.size_h_max - cfg.size_h_min);
    const double cx = (u01(rng) * 2 - 1) * cfg.extent * 0.7;
    const double cy = (u01(rng) * 2 - 1) * cfg.extent * 0.7;
    const double cz = h / 2;
    const double yaw = (u01(rng) * 2 - 1) * M_PI;
    const double speed = cfg.speed_min + u01(rng) * (cfg.speed_max - cfg.speed_min);
    const double heading = yaw + (u01(rng) * 2 - 1) * 0.3;
    const double vx = speed * std::cos(heading), vy = speed * std::sin(heading);
    const double yaw_rate = (u01(rng) * 2 - 1) * cfg.yaw_rate_max;
    boxes.emplace_back(cx, cy, cz, w, l, h, yaw, 0, 1.0);
    const double cs = std::cos(yaw), sn = std::sin(yaw);
    const double cs1 = std::cos(yaw + yaw_rate), sn1 = std::sin(yaw + yaw_rate);
    for (int i = 0; i < cfg.object_surface_points; ++i) {
      double local[3];
      detail::cuboid_surface_point<T>(rng, w, l, h, local);
      // frame t position
      const double px = cx + cs * local[0] - sn * local[1];
      const double py = cy + sn * local[0] + cs * local[1];
      const double pz = cz + local[2];
      // frame t+1 position after rigid motion
      const double qx = cx + vx + cs1 * local[0] - sn1 * local[1];
      const double qy = cy + vy + sn1 * local[0] + cs1 * local[1];
      const double qz = cz + local[2];
      pts_t.push_back({px, py, pz});
      surf_t1.push_back({qx, qy, qz});
      is_object.push_back(true);
    }
  }

  double ego[3] = {0, 0, 0};
  if (cfg.ego_motion) {
    const double ang = u01(rng) * 2 * M_PI;
    ego[0] = cfg.ego_speed * std::cos(ang);
    ego[1] = cfg.ego_speed * std::sin(ang);
    for (auto& p : surf_t1) {
      for (int c = 0; c < 3; ++c) p[c] += ego[c];
    }
  }

  // frame t: jitter first, then record flow against the clean t+1 surface,
  // then dropout. Flow therefore maps observed points to true correspondences.
  std::mt19937_64 rng_t(seed * 0x9e3779b97f4a7c15ULL + 2);
  std::mt19937_64 rng_t1(seed * 0x9e3779b97f4a7c15ULL + 3);
  std::normal_distribution<double> jt(0.0, cfg.jitter_sigma);
  SceneSample<T> out;
  std::vector<T> xyz_t, flow, xyz_t1;
  for (std::size_t i = 0; i < pts_t.size(); ++i) {
    double p[3];
    for (int c = 0; c < 3; ++c) p[c] = pts_t[i][c] + (cfg.jitter_sigma > 0 ? jt(rng_t) : 0.0);
    const bool keep = u01(rng_t) >= cfg.dropout_prob;
    if (keep) {
      for (int c = 0; c < 3; ++c) xyz_t.push_back(static_cast<T>(p[c]));
      for (int c = 0; c < 3; ++c) flow.push_back(static_cast<T>(surf_t1[i][c] - p[c]));
    }
  }
  for (std::size_t i = 0; i < surf_t1.size(); ++i) {
    double q[3];
    for (int c = 0; c < 3; ++c) q[c] = surf_t1[i][c] + (cfg.jitter_sigma > 0 ? jt(rng_t1) : 0.0);
    const bool keep = u01(rng_t1) >= cfg.dropout_prob;
    if (keep) {
      for (int c = 0; c < 3; ++c) xyz_t1.push_back(static_cast<T>(q[c]));
    }
  }
  const int m_t = static_cast<int>(xyz_t.size() / 3);
  const int m_t1 = static_cast<int>(xyz_t1.size() / 3);
  out.frame_t.xyz = Tensor<T>({m_t, 3}, std::move(xyz_t));
  out.frame_t.frame_id = 0;
  out.frame_t1.xyz = Tensor<T>({m_t1, 3}, std::move(xyz_t1));
  out.frame_t1.frame_id = 1;
  out.gt_flow = Tensor<T>({m_t, 3}, std::move(flow));
  {
    std::vector<T> clean;
    clean.reserve(surf_t1.size() * 3);
    for (const auto& q : surf_t1) {
      for (int c = 0; c < 3; ++c) clean.push_back(static_cast<T>(q[c]));
    }
    out.clean_surface_t1 = Tensor<T>({static_cast<int>(surf_t1.size()), 3}, std::move(clean));
  }
  out.gt_boxes_t = std::move(boxes);
  out.seed = seed;
  out.config_hash = cfg.hash();
  return out;
}

// KITTI velodyne .bin: consecutive little-endian float32 (x, y, z, r).
template <typename T>
PointCloud<T> load_kitti_bin(const std::string& path, int* rejected_nonfinite = nullptr) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("load_kitti_bin: cannot open " + path);
  const std::streamoff size = in.tellg();
  if (size % 16 != 0) {
    throw FormatError("load_kitti_bin: " + path + " truncated at byte offset " +
                      std::to_string(size - size % 16) + " (size " + std::to_string(size) +
                      " not divisible by 16)");
  }
  in.seekg(0);
  std::vector<float> raw(static_cast<std::size_t>(size) / 4);
  if (size > 0) in.read(reinterpret_cast<char*>(raw.data()), size);
  PointCloud<T> cloud;
  std::vector<T> xyz;
  std::vector<T> refl;
  int rejected = 0;
  for (std::size_t i = 0; i + 3 < raw.size(); i += 4) {
    if (!std::isfinite(raw[i]) || !std::isfinite(raw[i + 1]) || !std::isfinite(raw[i + 2]) ||
        !std::isfinite(raw[i + 3])) {
      ++rejected;
      continue;
    }
    xyz.push_back(static_cast<T>(raw[i]));
    xyz.push_back(static_cast<T>(raw[i + 1]));
    xyz.push_back(static_cast<T>(raw[i + 2]));
    refl.push_back(static_cast<T>(raw[i + 3]));
  }
  if (rejected_nonfinite) *rejected_nonfinite = rejected;
  const int n = static_cast<int>(xyz.size() / 3);
  cloud.xyz = Tensor<T>({n, 3}, std::move(xyz));
  cloud.reflectance = std::move(refl);
  return cloud;
}

template <typename T>
void save_kitti_bin(const PointCloud<T>& cloud, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("save_kitti_bin: cannot open " + path);
  for (int i = 0; i < cloud.size(); ++i) {
    float rec[4] = {static_cast<float>(cloud.xyz(i, 0)), static_cast<float>(cloud.xyz(i, 1)),
                    static_cast<float>(cloud.xyz(i, 2)),
                    cloud.reflectance ? static_cast<float>((*cloud.reflectance)[i]) : 0.0f};
    out.write(reinterpret_cast<const char*>(rec), sizeof(rec));
  }
}

// Deterministic shuffled prefix of ceil(fraction * n) ids. For a fixed seed,
// smaller fractions are prefixes of larger ones.
inline std::vector<std::uint64_t> subset_split(const std::vector<std::uint64_t>& ids,
                                               double fraction, std::uint64_t seed) {
  if (ids.empty()) throw ConfigError("subset_split: empty dataset");
  if (fraction <= 0 || fraction > 1) throw ConfigError("subset_split: fraction must be in (0,1]");
  std::vector<std::uint64_t> shuffled = ids;
  std::mt19937_64 rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const std::size_t n =
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size())));
  shuffled.resize(std::min(n, shuffled.size()));
  return shuffled;
}

template <typename T>
struct SamplePointsResult {
  std::vector<int> indices;
  Tensor<T> xyz;
};

// Delegates to farthest_point_sample; default N = 2048.
template <typename T>
SamplePointsResult<T> sample_points(const PointCloud<T>& cloud, int n = 2048,
                                    std::uint64_t seed = 0) {
  SamplePointsResult<T> out;
  out.indices = farthest_point_sample(cloud.xyz, n, seed);
  out.xyz = Tensor<T>::zeros({n, 3});
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) out.xyz(i, c) = cloud.xyz(out.indices[i], c);
  }
  return out;
}

struct PlyColor {
  unsigned char r = 200, g = 200, b = 200;
};

template <typename T>
struct PlyPointSet {
  Tensor<T> xyz;
  PlyColor color;
};

template <typename T>
struct PlySegmentSet {
  Tensor<T> from;  // [n x 3]
  Tensor<T> to;    // [n x 3]
  PlyColor color;
};

struct PlyBoxSet {
  std::vector<Box> boxes;
  PlyColor color;
};

// ASCII PLY with colored vertices and an edge element for flow segments and
// box wireframes.
template <typename T>
void export_ply(const std::string& path, const std::vector<PlyPointSet<T>>& points,
                const std::vector<PlySegmentSet<T>>& segments = {},
                const std::vector<PlyBoxSet>& boxes = {}) {
  std::vector<std::array<double, 3>> verts;
  std::vector<PlyColor> colors;
  std::vector<std::pair<int, int>> edges;
  for (const auto& ps : points) {
    for (int i = 0; i < ps.xyz.rows(); ++i) {
      verts.push_back({static_cast<double>(ps.xyz(i, 0)), static_cast<double>(ps.xyz(i, 1)),
                       static_cast<double>(ps.xyz(i, 2))});
      colors.push_back(ps.color);
    }
  }
  for (const auto& ss : segments) {
    require_same_shape(ss.from, ss.to, "export_ply segments");
    for (int i = 0; i < ss.from.rows(); ++i) {
      const int a = static_cast<int>(verts.size());
      verts.push_back({static_cast<double>(ss.from(i, 0)), static_cast<double>(ss.from(i, 1)),
                       static_cast<double>(ss.from(i, 2))});
      verts.push_back({static_cast<double>(ss.to(i, 0)), static_cast<double>(ss.to(i, 1)),
                       static_cast<double>(ss.to(i, 2))});
      colors.push_back(ss.color);
      colors.push_back(ss.color);
      edges.emplace_back(a, a + 1);
    }
  }
  static const int kEdgePairs[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                        {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
  for (const auto& bs : boxes) {
    for (const Box& b : bs.boxes) {
      const int base = static_cast<int>(verts.size());
      const double cs = std::cos(b.yaw), sn = std::sin(b.yaw);
      for (int zi = 0; zi < 2; ++zi) {
        const double corners[4][2] = {{b.w / 2, b.l / 2},
                                      {-b.w / 2, b.l / 2},
                                      {-b.w / 2, -b.l / 2},
                                      {b.w / 2, -b.l / 2}};
        for (auto& c : corners) {
          verts.push_back({b.x + cs * c[0] - sn * c[1], b.y + sn * c[0] + cs * c[1],
                           b.z + (zi ? b.h / 2 : -b.h / 2)});
          colors.push_back(bs.color);
        }
      }
      for (auto& e : kEdgePairs) edges.emplace_back(base + e[0], base + e[1]);
    }
  }
  if (verts.empty()) throw ConfigError("export_ply: nothing to write");
  std::ofstream out(path);
  if (!out) throw FormatError("export_ply: cannot open " + path);
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << verts.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element edge " << edges.size() << "\n";
  out << "property int vertex1\nproperty int vertex2\n";
  out << "end_header\n";
  out.precision(6);
  for (std::size_t i = 0; i < verts.size(); ++i) {
    out << static_cast<float>(verts[i][0]) << ' ' << static_cast<float>(verts[i][1]) << ' '
        << static_cast<float>(verts[i][2]) << ' ' << int(colors[i].r) << ' ' << int(colors[i].g)
        << ' ' << int(colors[i].b) << "\n";
  }
  for (const auto& [a, b] : edges) out << a << ' ' << b << "\n";
  if (!out) throw FormatError("export_ply: write failed for " + path);
}

// Minimal reader for the files written above; used by tests and tooling.
template <typename T>
Tensor<T> parse_ply_vertices(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("parse_ply_vertices: cannot open " + path);
  std::string line;
  int n = -1;
  while (std::getline(in, line)) {
    if (line.rfind("element vertex", 0) == 0) n = std::stoi(line.substr(15));
    if (line == "end_header") break;
  }
  if (n < 0) throw FormatError("parse_ply_vertices: no vertex element in " + path);
  Tensor<T> out = Tensor<T>::zeros({n, 3});
  for (int i = 0; i < n; ++i) {
    double x, y, z;
    int r, g, b;
    in >> x >> y >> z >> r >> g >> b;
    out(i, 0) = static_cast<T>(x);
    out(i, 1) = static_cast<T>(y);
    out(i, 2) = static_cast<T>(z);
  }
  if (!in) throw FormatError("parse_ply_vertices: truncated " + path);
  return out;
}

}  // namespace flowdet
