#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "gsocc/error.hpp"
#include "gsocc/field.hpp"
#include "gsocc/grid.hpp"
#include "gsocc/parallel.hpp"
#include "gsocc/report.hpp"
#include "gsocc/rng.hpp"

namespace gsocc {

/// χ²₃ critical value at 90% confidence.
inline constexpr double kChiSquare3Dof90 = 6.251;

// ---------------------------------------------------------------------------
// IoU / mIoU

/// Rows are ground truth, columns are prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {}

  static ConfusionMatrix from_grids(const VoxelGrid& pred, const VoxelGrid& gt) {
    if (!(pred.spec() == gt.spec())) throw InvalidParameter("confusion matrix: grid specs differ");
    ConfusionMatrix cm(gt.spec().num_classes_total);
    const auto p = pred.labels();
    const auto g = gt.labels();
    for (std::size_t i = 0; i < g.size(); ++i) cm.add(g[i], p[i]);
    return cm;
  }

  void add(std::size_t gt, std::size_t pred, std::uint64_t count = 1) { counts_[gt * n_ + pred] += count; }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.n_ != n_) throw InvalidParameter("confusion matrix: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  std::size_t classes() const noexcept { return n_; }
  std::uint64_t operator()(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t true_positive(std::size_t k) const { return (*this)(k, k); }
  std::uint64_t false_positive(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t g = 0; g < n_; ++g) s += g == k ? 0 : (*this)(g, k);
    return s;
  }
  std::uint64_t false_negative(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < n_; ++p) s += p == k ? 0 : (*this)(k, p);
    return s;
  }

  /// Occupied-vs-empty IoU. Both sides entirely empty counts as perfect agreement.
  double geometry_iou() const {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t g = 0; g < n_; ++g) {
      for (std::size_t p = 0; p < n_; ++p) {
        const auto c = (*this)(g, p);
        if (g != 0 && p != 0) tp += c;
        if (g == 0 && p != 0) fp += c;
        if (g != 0 && p == 0) fn += c;
      }
    }
    const auto denom = tp + fp + fn;
    return denom == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(denom);
  }

  /// IoU of class k; NaN when k appears in neither prediction nor ground truth.
  double class_iou(std::size_t k) const {
    const auto tp = true_positive(k);
    const auto denom = tp + false_positive(k) + false_negative(k);
    return denom == 0 ? std::numeric_limits<double>::quiet_NaN()
                      : static_cast<double>(tp) / static_cast<double>(denom);
  }

  /// Mean IoU over non-empty classes. Classes absent from both sides are
  /// skipped unless include_absent is set, in which case they count as 0.
  /// With no class to average, returns 1.
  double mean_iou(bool include_absent = false) const {
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 1; k < n_; ++k) {
      const double v = class_iou(k);
      if (std::isnan(v)) {
        if (!include_absent) continue;
        ++used;
        continue;
      }
      sum += v;
      ++used;
    }
    return used == 0 ? 1.0 : sum / static_cast<double>(used);
  }

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

inline double iou(const VoxelGrid& pred, const VoxelGrid& gt) {
  return ConfusionMatrix::from_grids(pred, gt).geometry_iou();
}

inline double miou(const VoxelGrid& pred, const VoxelGrid& gt, bool include_absent = false) {
  return ConfusionMatrix::from_grids(pred, gt).mean_iou(include_absent);
}

// ---------------------------------------------------------------------------
// Position metrics

/// Percentage of Gaussians whose mean lies in a non-empty gt voxel.
inline double perc_correct(const GaussianSet& gs, const VoxelGrid& gt) {
  std::size_t correct = 0;
  for (const auto& g : gs.primitives()) correct += gt.label_at(g.mean()) != 0 ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(gs.size());
}

inline double l1_distance(const Vec3& a, const Vec3& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

/// Smallest L1 distance from x to an occupied voxel center. Searches
/// Chebyshev shells of voxels around x and stops once no farther shell can
/// beat the best distance found.
inline double nearest_occupied_l1(const Vec3& x, const VoxelGrid& gt) {
  const auto& spec = gt.spec();
  const Vec3 vs = spec.voxel_size();
  Index3 q{};
  for (int k = 0; k < 3; ++k) {
    const double t = std::floor((x[k] - spec.min_corner[k]) / vs[k]);
    q[k] = static_cast<std::int64_t>(std::clamp(t, 0.0, static_cast<double>(spec.resolution[k] - 1)));
  }
  const Vec3 qc = voxel_center(spec, q);
  std::int64_t max_r = 0;
  for (int k = 0; k < 3; ++k) max_r = std::max({max_r, q[k], spec.resolution[k] - 1 - q[k]});

  double best = std::numeric_limits<double>::infinity();
  for (std::int64_t r = 0; r <= max_r; ++r) {
    // Lower bound on any voxel at Chebyshev index distance ≥ r from q.
    double bound = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) bound = std::min(bound, static_cast<double>(r) * vs[k] - std::abs(x[k] - qc[k]));
    if (bound >= best) break;
    const std::int64_t x0 = std::max<std::int64_t>(q[0] - r, 0), x1 = std::min(q[0] + r, spec.resolution[0] - 1);
    const std::int64_t y0 = std::max<std::int64_t>(q[1] - r, 0), y1 = std::min(q[1] + r, spec.resolution[1] - 1);
    const std::int64_t z0 = std::max<std::int64_t>(q[2] - r, 0), z1 = std::min(q[2] + r, spec.resolution[2] - 1);
    auto visit = [&](std::int64_t ix, std::int64_t iy, std::int64_t iz) {
      const Index3 v{ix, iy, iz};
      if (gt[spec.flat(v)] != 0) best = std::min(best, l1_distance(x, voxel_center(spec, v)));
    };
    for (std::int64_t ix = x0; ix <= x1; ++ix) {
      for (std::int64_t iy = y0; iy <= y1; ++iy) {
        if (std::abs(ix - q[0]) == r || std::abs(iy - q[1]) == r) {
          for (std::int64_t iz = z0; iz <= z1; ++iz) visit(ix, iy, iz);
        } else {
          // Off the x/y faces only the two z caps belong to the shell.
          if (q[2] - r >= 0) visit(ix, iy, q[2] - r);
          if (r > 0 && q[2] + r < spec.resolution[2]) visit(ix, iy, q[2] + r);
        }
      }
    }
  }
  return best;
}

/// Mean over all Gaussians of the L1 distance from the mean to the nearest occupied voxel center.
inline double mean_nearest_dist(const GaussianSet& gs, const VoxelGrid& gt) {
  bool any = false;
  for (Label l : gt.labels()) {
    if (l != 0) {
      any = true;
      break;
    }
  }
  if (!any) throw UndefinedMetric("mean_nearest_dist: ground truth has no occupied voxel");
  std::vector<double> d(gs.size());
  parallel_for(gs.size(), [&](std::size_t i) { d[i] = nearest_occupied_l1(gs[i].mean(), gt); });
  CompensatedSum s;
  for (double v : d) s.add(v);
  return s.value() / static_cast<double>(gs.size());
}

// ---------------------------------------------------------------------------
// Overlap metrics

/// Volume of the 90% confidence ellipsoid, (4/3)·π·6.251^{3/2}·|Σ|^{1/2}.
inline double ellipsoid_volume_90(const GaussianPrimitive& g) {
  const Vec3& s = g.scale();
  return 4.0 / 3.0 * std::numbers::pi * std::pow(kChiSquare3Dof90, 1.5) * (s[0] * s[1] * s[2]);
}

struct AxisBox {
  Vec3 lo;
  Vec3 hi;
  double volume() const { return (hi - lo).prod(); }
};

inline AxisBox grid_box(const GridSpec& spec) { return {spec.min_corner, spec.max_corner}; }

struct OverlapEstimate {
  double ratio = 0.0;            ///< Σ V₉₀ / V_coverage
  double summed_volume = 0.0;    ///< Σ V₉₀
  double coverage_volume = 0.0;  ///< V_scene · N_in / N_total
  std::uint64_t n_in = 0;
  std::uint64_t n_total = 0;
};

/// Monte Carlo estimate of the union volume of the 90% ellipsoids inside
/// `scene`, compared with the summed analytic ellipsoid volumes. Sample i is
/// a pure function of (seed, i).
inline OverlapEstimate overall_overlap(const GaussianSet& gs, const AxisBox& scene, std::uint64_t samples,
                                       std::uint64_t seed) {
  if (samples == 0) throw InvalidParameter("overall_overlap: need at least one sample");
  if (!((scene.hi.array() > scene.lo.array()).all())) throw InvalidParameter("overall_overlap: empty scene box");
  const auto prepared = prepare(gs);
  const GaussianIndex index(prepared, kChiSquare3Dof90);
  const CounterRng rng(seed, 0x0ae7a11);
  const Vec3 ext = scene.hi - scene.lo;

  constexpr std::size_t kChunks = 256;
  std::vector<std::uint64_t> hits(kChunks, 0);
  parallel_chunks(samples, kChunks, [&](std::size_t c, std::size_t b, std::size_t e) {
    std::uint64_t n = 0;
    for (std::size_t i = b; i < e; ++i) {
      const Vec3 x(scene.lo[0] + ext[0] * rng.uniform(3 * i), scene.lo[1] + ext[1] * rng.uniform(3 * i + 1),
                   scene.lo[2] + ext[2] * rng.uniform(3 * i + 2));
      bool inside = false;
      for (std::uint32_t j : index.candidates(x)) {
        if (prepared[j].mahalanobis_sq(x) <= kChiSquare3Dof90) {
          inside = true;
          break;
        }
      }
      n += inside ? 1 : 0;
    }
    hits[c] = n;
  });

  OverlapEstimate est;
  est.n_total = samples;
  for (auto h : hits) est.n_in += h;
  if (est.n_in == 0) throw UndefinedMetric("overall_overlap: no coverage detected");
  CompensatedSum vol;
  for (const auto& g : gs.primitives()) vol.add(ellipsoid_volume_90(g));
  est.summed_volume = vol.value();
  est.coverage_volume = scene.volume() * static_cast<double>(est.n_in) / static_cast<double>(samples);
  est.ratio = est.summed_volume / est.coverage_volume;
  return est;
}

/// log|A| of a symmetric positive-definite 3×3 matrix.
inline double log_det_spd(const Mat3& a) {
  const Eigen::LLT<Mat3> llt(a);
  const Mat3 l = llt.matrixL();
  return 2.0 * (std::log(l(0, 0)) + std::log(l(1, 1)) + std::log(l(2, 2)));
}

namespace detail {
struct OverlapTerm {
  Vec3 mean;
  Mat3 cov;
  double log_det;
};

inline OverlapTerm overlap_term(const GaussianPrimitive& g) {
  const auto d = build_covariance(g);
  return {g.mean(), d.covariance, log_det_spd(d.covariance)};
}

inline double bhattacharyya(const OverlapTerm& a, const OverlapTerm& b) {
  const Mat3 avg = 0.5 * (a.cov + b.cov);
  const Eigen::LLT<Mat3> llt(avg);
  const Vec3 diff = a.mean - b.mean;
  const double maha = diff.dot(llt.solve(diff));
  const Mat3 l = llt.matrixL();
  const double log_det_avg = 2.0 * (std::log(l(0, 0)) + std::log(l(1, 1)) + std::log(l(2, 2)));
  return std::exp(0.25 * (a.log_det + b.log_det) - 0.5 * log_det_avg - 0.125 * maha);
}
}  // namespace detail

/// Bhattacharyya coefficient of two Gaussians with Σᵢⱼ = ½(Σᵢ + Σⱼ).
inline double bhattacharyya_coef(const GaussianPrimitive& gi, const GaussianPrimitive& gj) {
  return detail::bhattacharyya(detail::overlap_term(gi), detail::overlap_term(gj));
}

/// (1/P) Σᵢ Σ_{j≠i} BCᵢⱼ, evaluated on the upper triangle and doubled (BC is symmetric).
inline double indiv_overlap(const GaussianSet& gs) {
  const std::size_t n = gs.size();
  std::vector<detail::OverlapTerm> terms;
  terms.reserve(n);
  for (const auto& g : gs.primitives()) terms.push_back(detail::overlap_term(g));
  std::vector<double> rows(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    CompensatedSum s;
    for (std::size_t j = i + 1; j < n; ++j) s.add(detail::bhattacharyya(terms[i], terms[j]));
    rows[i] = s.value();
  });
  CompensatedSum total;
  for (double r : rows) total.add(r);
  return 2.0 * total.value() / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Reports

struct UtilizationReport {
  double perc_correct = 0.0;
  double mean_dist = 0.0;
  double overall_overlap = 0.0;
  double indiv_overlap = 0.0;
  std::uint64_t mc_samples = 0;
  std::uint64_t mc_inside = 0;

  Report to_report() const {
    Report r;
    r.set("perc_correct", perc_correct);
    r.set("mean_dist", mean_dist);
    r.set("overall_overlap", overall_overlap);
    r.set("indiv_overlap", indiv_overlap);
    r.set("mc_samples", static_cast<std::int64_t>(mc_samples));
    r.set("mc_inside", static_cast<std::int64_t>(mc_inside));
    return r;
  }
};

/// Position and overlap audit of a Gaussian set against a reference grid.
/// The Monte Carlo box is the grid extent.
inline UtilizationReport audit(const GaussianSet& gs, const VoxelGrid& gt, std::uint64_t mc_samples,
                               std::uint64_t seed) {
  UtilizationReport r;
  r.perc_correct = perc_correct(gs, gt);
  r.mean_dist = mean_nearest_dist(gs, gt);
  const auto est = overall_overlap(gs, grid_box(gt.spec()), mc_samples, seed);
  r.overall_overlap = est.ratio;
  r.mc_samples = est.n_total;
  r.mc_inside = est.n_in;
  r.indiv_overlap = indiv_overlap(gs);
  return r;
}

/// IoU, mIoU and per-class IoU (`iou_k`, NaN when class k is absent from both grids).
inline Report occupancy_report(const VoxelGrid& pred, const VoxelGrid& gt) {
  const auto cm = ConfusionMatrix::from_grids(pred, gt);
  Report r;
  r.set("iou", cm.geometry_iou());
  r.set("miou", cm.mean_iou());
  for (std::size_t k = 1; k < cm.classes(); ++k) r.set("iou_" + std::to_string(k), cm.class_iou(k));
  r.set("voxels", static_cast<std::int64_t>(cm.total()));
  return r;
}

}  // namespace gsocc
