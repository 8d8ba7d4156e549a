#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <algorithm>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gsocc/error.hpp"

namespace gsocc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
/// Quaternion stored as (w, x, y, z).
using Quat = Eigen::Vector4d;

/// Smallest admissible scale component in meters. Smaller values are raised
/// to this floor at construction so the covariance never goes singular.
inline constexpr double kMinScale = 1e-3;

inline Quat identity_quat() { return Quat(1.0, 0.0, 0.0, 0.0); }

/// Rotation matrix of a (w, x, y, z) quaternion. The input is normalized
/// internally; q and -q give the same matrix.
inline Mat3 quat_to_rotation(const Quat& q) {
  const double n = q.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw InvalidParameter("quat_to_rotation: quaternion must have nonzero finite norm");
  }
  const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  Mat3 r;
  r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
      2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
      2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
  return r;
}

/// One semantic Gaussian: mean, per-axis scale, orientation, opacity and
/// class logits. Immutable once built.
class GaussianPrimitive {
 public:
  GaussianPrimitive(const Vec3& mean, const Vec3& scale, const Quat& rotation, double opacity,
                    std::vector<double> semantics)
      : mean_(mean), scale_(scale), rotation_(rotation), opacity_(opacity),
        semantics_(std::move(semantics)) {
    if (!mean_.allFinite() || !scale_.allFinite()) {
      throw InvalidParameter("GaussianPrimitive: mean and scale must be finite");
    }
    for (int k = 0; k < 3; ++k) {
      if (!(scale_[k] > 0.0)) throw InvalidParameter("GaussianPrimitive: scale must be positive");
      scale_[k] = std::max(scale_[k], kMinScale);
    }
    const double n = rotation_.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw InvalidParameter("GaussianPrimitive: quaternion must have nonzero finite norm");
    }
    // Leave already-unit quaternions untouched so serialization round-trips bit-exactly.
    if (std::abs(n - 1.0) > 4.0 * std::numeric_limits<double>::epsilon()) rotation_ /= n;
    if (!(opacity_ >= 0.0) || !std::isfinite(opacity_)) {
      throw InvalidParameter("GaussianPrimitive: opacity must be finite and >= 0");
    }
    if (semantics_.empty()) throw InvalidParameter("GaussianPrimitive: semantics must be non-empty");
    for (double c : semantics_) {
      if (!std::isfinite(c)) throw InvalidParameter("GaussianPrimitive: semantics must be finite");
    }
  }

  const Vec3& mean() const noexcept { return mean_; }
  const Vec3& scale() const noexcept { return scale_; }
  const Quat& rotation() const noexcept { return rotation_; }
  double opacity() const noexcept { return opacity_; }
  std::span<const double> semantics() const noexcept { return semantics_; }
  std::size_t num_classes() const noexcept { return semantics_.size(); }

 private:
  Vec3 mean_;
  Vec3 scale_;
  Quat rotation_;
  double opacity_;
  std::vector<double> semantics_;
};

/// Ordered collection of primitives sharing one class count.
class GaussianSet {
 public:
  GaussianSet(std::vector<GaussianPrimitive> primitives, std::size_t num_classes)
      : primitives_(std::move(primitives)), num_classes_(num_classes) {
    if (num_classes_ == 0) throw InvalidParameter("GaussianSet: num_classes must be positive");
    if (primitives_.empty()) throw InvalidParameter("GaussianSet: at least one primitive required");
    for (const auto& g : primitives_) {
      if (g.num_classes() != num_classes_) {
        throw InvalidParameter("GaussianSet: primitive has " + std::to_string(g.num_classes()) +
                               " logits, expected " + std::to_string(num_classes_));
      }
    }
  }

  std::span<const GaussianPrimitive> primitives() const noexcept { return primitives_; }
  const GaussianPrimitive& operator[](std::size_t i) const { return primitives_[i]; }
  std::size_t size() const noexcept { return primitives_.size(); }
  std::size_t num_classes() const noexcept { return num_classes_; }

 private:
  std::vector<GaussianPrimitive> primitives_;
  std::size_t num_classes_;
};

/// Σ = R·S·Sᵀ·Rᵀ together with the factors it was built from.
struct CovarianceDecomposition {
  Mat3 rotation;
  Mat3 scale;
  Mat3 covariance;
  Mat3 inverse;
  double det = 1.0;
};

inline CovarianceDecomposition build_covariance(const Vec3& scale, const Quat& rotation) {
  Vec3 s = scale;
  for (int k = 0; k < 3; ++k) s[k] = std::max(s[k], kMinScale);
  CovarianceDecomposition d;
  d.rotation = quat_to_rotation(rotation);
  d.scale = s.asDiagonal();
  d.covariance = d.rotation * d.scale * d.scale.transpose() * d.rotation.transpose();
  const Vec3 inv_var = s.cwiseProduct(s).cwiseInverse();
  d.inverse = d.rotation * inv_var.asDiagonal() * d.rotation.transpose();
  const double vol = s[0] * s[1] * s[2];
  d.det = vol * vol;
  return d;
}

inline CovarianceDecomposition build_covariance(const GaussianPrimitive& g) {
  return build_covariance(g.scale(), g.rotation());
}

/// (x − m)ᵀ Σ⁻¹ (x − m), evaluated in the Gaussian's local frame.
inline double mahalanobis_sq(const Vec3& x, const Vec3& mean, const Mat3& rotation, const Vec3& scale) {
  const Vec3 local = rotation.transpose() * (x - mean);
  double d2 = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double u = local[k] / scale[k];
    d2 += u * u;
  }
  return d2;
}

inline double mahalanobis_sq(const Vec3& x, const GaussianPrimitive& g) {
  return mahalanobis_sq(x, g.mean(), quat_to_rotation(g.rotation()), g.scale());
}

}  // namespace gsocc
