#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gsocc/error.hpp"
#include "gsocc/grid.hpp"
#include "gsocc/parallel.hpp"

namespace gsocc {

using Mat4 = Eigen::Matrix4d;

/// Pinhole camera with a camera-to-world pose. Camera looks down +z, x right, y down.
struct CameraModel {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  std::int64_t width = 1, height = 1;
  Mat4 pose = Mat4::Identity();

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidParameter("CameraModel: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw InvalidParameter("CameraModel: image size must be positive");
    const Mat3 r = pose.topLeftCorner<3, 3>();
    if (!((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-8)) {
      throw InvalidParameter("CameraModel: pose rotation is not orthonormal");
    }
    if (!pose.allFinite()) throw InvalidParameter("CameraModel: pose must be finite");
  }

  Mat3 rotation() const { return pose.topLeftCorner<3, 3>(); }
  Vec3 center() const { return pose.topRightCorner<3, 1>(); }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  ///< unit length
};

/// Reference depths along each ray: R equally spaced points in [depth_min, depth_max].
struct RaySampling {
  double depth_min = 1.0;
  double depth_max = 51.2;
  std::size_t num_refs = 64;

  void validate() const {
    if (!(depth_min > 0.0) || !(depth_max > depth_min)) {
      throw InvalidParameter("RaySampling: need 0 < depth_min < depth_max");
    }
    if (num_refs < 2) throw InvalidParameter("RaySampling: need at least two reference points");
  }

  double depth(std::size_t k) const {
    return depth_min + static_cast<double>(k) * (depth_max - depth_min) / static_cast<double>(num_refs - 1);
  }
};

/// Ray through the center of pixel (u, v).
inline Ray pixel_ray(const CameraModel& cam, std::int64_t u, std::int64_t v) {
  if (u < 0 || v < 0 || u >= cam.width || v >= cam.height) throw OutOfRange("pixel_ray: pixel outside the image");
  const Vec3 local((static_cast<double>(u) + 0.5 - cam.cx) / cam.fx, (static_cast<double>(v) + 0.5 - cam.cy) / cam.fy,
                   1.0);
  return {cam.center(), (cam.rotation() * local).normalized()};
}

inline std::vector<Vec3> ray_reference_points(const Vec3& origin, const Vec3& direction, const RaySampling& sampling) {
  sampling.validate();
  std::vector<Vec3> pts(sampling.num_refs);
  for (std::size_t k = 0; k < pts.size(); ++k) pts[k] = origin + sampling.depth(k) * direction;
  return pts;
}

/// 1 where the voxel containing the point is non-empty; 0 otherwise, including outside the grid.
inline std::vector<std::uint8_t> occupancy_labels(std::span<const Vec3> points, const VoxelGrid& gt) {
  std::vector<std::uint8_t> l(points.size());
  for (std::size_t k = 0; k < points.size(); ++k) l[k] = gt.label_at(points[k]) != 0 ? 1 : 0;
  return l;
}

/// Clamp applied to predicted probabilities before taking logs.
inline constexpr double kBceEps = 1e-7;

/// Mean binary cross entropy over the R reference points.
inline double bce_init_loss(std::span<const double> pred, std::span<const std::uint8_t> labels) {
  if (pred.size() != labels.size()) throw InvalidParameter("bce_init_loss: length mismatch");
  if (pred.empty()) throw InvalidParameter("bce_init_loss: empty input");
  CompensatedSum s;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double p = std::clamp(pred[k], kBceEps, 1.0 - kBceEps);
    s.add(labels[k] ? -std::log(p) : -std::log1p(-p));
  }
  return s.value() / static_cast<double>(pred.size());
}

/// d(bce_init_loss)/d(pred); zero where the clamp is active.
inline std::vector<double> bce_init_grad(std::span<const double> pred, std::span<const std::uint8_t> labels) {
  if (pred.size() != labels.size()) throw InvalidParameter("bce_init_grad: length mismatch");
  const double n = static_cast<double>(pred.size());
  std::vector<double> g(pred.size(), 0.0);
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double p = pred[k];
    if (p < kBceEps || p > 1.0 - kBceEps) continue;
    g[k] = (p - labels[k]) / (p * (1.0 - p)) / n;
  }
  return g;
}

/// Occupancy profile for every pixel, row-major (v outer, u inner).
inline std::vector<std::vector<std::uint8_t>> pixel_occupancy_labels(const CameraModel& cam, const VoxelGrid& gt,
                                                                     const RaySampling& sampling) {
  cam.validate();
  sampling.validate();
  const auto w = static_cast<std::size_t>(cam.width);
  std::vector<std::vector<std::uint8_t>> out(w * static_cast<std::size_t>(cam.height));
  parallel_for(out.size(), [&](std::size_t p) {
    const Ray ray = pixel_ray(cam, static_cast<std::int64_t>(p % w), static_cast<std::int64_t>(p / w));
    out[p] = occupancy_labels(ray_reference_points(ray.origin, ray.direction, sampling), gt);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Camera description file:
//   fx fy cx cy
//   width height
//   4 lines of 4 pose entries (row-major camera-to-world)

inline CameraModel read_camera(std::istream& is) {
  CameraModel cam;
  is >> cam.fx >> cam.fy >> cam.cx >> cam.cy >> cam.width >> cam.height;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) is >> cam.pose(r, c);
  if (!is) throw FormatError("camera file: expected 4 intrinsics, 2 image dims and 16 pose entries");
  std::string extra;
  if (is >> extra) throw FormatError("camera file: trailing content");
  try {
    cam.validate();
  } catch (const InvalidParameter& e) {
    throw FormatError(std::string("camera file: ") + e.what());
  }
  return cam;
}

inline void write_camera(std::ostream& os, const CameraModel& cam) {
  os << format_double(cam.fx) << ' ' << format_double(cam.fy) << ' ' << format_double(cam.cx) << ' '
     << format_double(cam.cy) << '\n'
     << cam.width << ' ' << cam.height << '\n';
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) os << (c ? " " : "") << format_double(cam.pose(r, c));
    os << '\n';
  }
}

/// One line per pixel with R space-separated 0/1 labels.
inline void write_pixel_labels(std::ostream& os, const std::vector<std::vector<std::uint8_t>>& rows) {
  std::string line;
  for (const auto& row : rows) {
    line.clear();
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (k) line += ' ';
      line += row[k] ? '1' : '0';
    }
    line += '\n';
    os << line;
  }
}

}  // namespace gsocc
