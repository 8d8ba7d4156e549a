#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "gsocc/gaussian.hpp"
#include "gsocc/parallel.hpp"

namespace gsocc {

/// How a Gaussian set turns into occupancy.
enum class Model {
  Probabilistic,  ///< complement-product geometry + GMM semantics, C logits
  Additive,       ///< legacy weighted sum, C+1 logits (index 0 = empty)
};

enum class GmmFallback {
  Uniform,  ///< uniform over classes when the mixture density underflows
};

struct EvalOptions {
  /// Primitives with d² above this contribute exactly zero. +inf disables the cutoff.
  double cutoff_mahalanobis_sq = 25.0;
  /// Use the uniform-grid index over primitive bounding boxes.
  bool neighbor_index = true;
  GmmFallback gmm_fallback = GmmFallback::Uniform;
  /// Compensated summation everywhere (order-insensitive results).
  bool deterministic = true;
};

/// Probability clamp for a single Gaussian's α inside the log-space product.
inline constexpr double kMaxSingleAlpha = 1.0 - 1e-15;
/// Mixture densities below this are treated as underflow.
inline constexpr double kMixtureFloor = 1e-300;

struct FieldSample {
  double geometry_prob = 0.0;
  std::vector<double> semantics_expectation;
  std::vector<double> full_prediction;
};

inline void softmax_into(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - mx);
    z += out[k];
  }
  for (double& v : out) v /= z;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  softmax_into(logits, out);
  return out;
}

/// Per-primitive quantities reused across many query points.
struct PreparedGaussian {
  Vec3 mean;
  Mat3 rotation;
  Vec3 scale;
  double opacity = 0.0;
  /// log a − Σ log s: log of the unnormalized mixture weight at d² = 0.
  double log_weight = 0.0;
  std::vector<double> logits;
  std::vector<double> probs;  ///< softmax(logits)

  double mahalanobis_sq(const Vec3& x) const { return gsocc::mahalanobis_sq(x, mean, rotation, scale); }

  /// Half extent of the axis-aligned box enclosing {d² ≤ cutoff}.
  Vec3 half_extent(double cutoff) const {
    Vec3 h;
    for (int r = 0; r < 3; ++r) {
      double var = 0.0;
      for (int c = 0; c < 3; ++c) var += rotation(r, c) * rotation(r, c) * scale[c] * scale[c];
      h[r] = std::sqrt(cutoff * var);
    }
    return h;
  }
};

inline PreparedGaussian prepare(const Vec3& mean, const Mat3& rotation, const Vec3& scale, double opacity,
                                std::span<const double> logits) {
  PreparedGaussian p;
  p.mean = mean;
  p.rotation = rotation;
  p.scale = scale;
  p.opacity = opacity;
  p.log_weight = std::log(opacity) - (std::log(scale[0]) + std::log(scale[1]) + std::log(scale[2]));
  p.logits.assign(logits.begin(), logits.end());
  p.probs = softmax(logits);
  return p;
}

inline PreparedGaussian prepare(const GaussianPrimitive& g) {
  return prepare(g.mean(), quat_to_rotation(g.rotation()), g.scale(), g.opacity(), g.semantics());
}

inline std::vector<PreparedGaussian> prepare(const GaussianSet& gs) {
  std::vector<PreparedGaussian> out;
  out.reserve(gs.size());
  for (const auto& g : gs.primitives()) out.push_back(prepare(g));
  return out;
}

/// Uniform grid over the cutoff bounding boxes of a primitive list. Each cell
/// lists, in ascending order, every primitive whose box touches it, so the
/// candidates for a point are a superset of the primitives within the cutoff
/// and come back in the same order as a full scan.
class GaussianIndex {
 public:
  GaussianIndex() = default;

  GaussianIndex(std::span<const PreparedGaussian> gaussians, double cutoff) {
    if (gaussians.empty() || !std::isfinite(cutoff)) return;
    const std::size_t n = gaussians.size();
    std::vector<Vec3> lo(n), hi(n);
    std::vector<double> extents(n);
    lo_ = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 top = -lo_;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 h = gaussians[i].half_extent(cutoff);
      lo[i] = gaussians[i].mean - h;
      hi[i] = gaussians[i].mean + h;
      lo_ = lo_.cwiseMin(lo[i]);
      top = top.cwiseMax(hi[i]);
      extents[i] = 2.0 * h.maxCoeff();
    }
    std::nth_element(extents.begin(), extents.begin() + n / 2, extents.end());
    double cell = std::max(extents[n / 2], 1e-9);
    const Vec3 span = (top - lo_).cwiseMax(1e-9);
    // Keep the table bounded for sets with a few tiny primitives.
    while ((span / cell).array().ceil().prod() > 4.0e6) cell *= 2.0;
    for (int k = 0; k < 3; ++k) {
      dims_[k] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(span[k] / cell)));
      cell_[k] = span[k] / static_cast<double>(dims_[k]);
    }
    const std::size_t cells = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
    offsets_.assign(cells + 1, 0);
    auto cell_range = [&](std::size_t i, std::array<std::int64_t, 3>& a, std::array<std::int64_t, 3>& b) {
      for (int k = 0; k < 3; ++k) {
        a[k] = clamp_cell(k, std::floor((lo[i][k] - lo_[k]) / cell_[k]));
        b[k] = clamp_cell(k, std::floor((hi[i][k] - lo_[k]) / cell_[k]));
      }
    };
    std::array<std::int64_t, 3> a{}, b{};
    for (int pass = 0; pass < 2; ++pass) {
      std::vector<std::uint32_t> cursor;
      if (pass == 1) {
        for (std::size_t c = 0; c < cells; ++c) offsets_[c + 1] += offsets_[c];
        items_.resize(offsets_[cells]);
        cursor.assign(offsets_.begin(), offsets_.end() - 1);
      }
      for (std::size_t i = 0; i < n; ++i) {
        cell_range(i, a, b);
        for (auto x = a[0]; x <= b[0]; ++x)
          for (auto y = a[1]; y <= b[1]; ++y)
            for (auto z = a[2]; z <= b[2]; ++z) {
              const std::size_t c = flat(x, y, z);
              if (pass == 0) {
                ++offsets_[c + 1];
              } else {
                items_[cursor[c]++] = static_cast<std::uint32_t>(i);
              }
            }
      }
    }
    built_ = true;
  }

  bool built() const noexcept { return built_; }

  /// Candidate primitive indices for x (ascending). Empty outside the index bounds.
  std::span<const std::uint32_t> candidates(const Vec3& x) const {
    std::array<std::int64_t, 3> c{};
    for (int k = 0; k < 3; ++k) {
      const double t = (x[k] - lo_[k]) / cell_[k];
      if (!(t >= 0.0) || t > static_cast<double>(dims_[k])) return {};
      c[k] = clamp_cell(k, std::floor(t));
    }
    const std::size_t f = flat(c[0], c[1], c[2]);
    return std::span<const std::uint32_t>(items_).subspan(offsets_[f], offsets_[f + 1] - offsets_[f]);
  }

 private:
  std::int64_t clamp_cell(int k, double v) const {
    return std::clamp<std::int64_t>(static_cast<std::int64_t>(v), 0, dims_[k] - 1);
  }
  std::size_t flat(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((x * dims_[1] + y) * dims_[2] + z);
  }

  bool built_ = false;
  Vec3 lo_ = Vec3::Zero();
  Vec3 cell_ = Vec3::Ones();
  std::array<std::int64_t, 3> dims_{1, 1, 1};
  std::vector<std::uint32_t> offsets_;
  std::vector<std::uint32_t> items_;
};

/// A primitive within the cutoff of a query point.
struct Contribution {
  std::uint32_t index;
  double d2;
};

/// Visit every primitive with d² ≤ cutoff, in ascending index order.
template <typename Fn>
void for_each_contribution(std::span<const PreparedGaussian> gaussians, const GaussianIndex* index,
                           double cutoff, const Vec3& x, Fn&& fn) {
  auto visit = [&](std::uint32_t i) {
    const double d2 = gaussians[i].mahalanobis_sq(x);
    if (d2 <= cutoff) fn(Contribution{i, d2});
  };
  if (index != nullptr && index->built()) {
    for (std::uint32_t i : index->candidates(x)) visit(i);
  } else {
    for (std::uint32_t i = 0; i < gaussians.size(); ++i) visit(i);
  }
}

namespace detail {

template <bool Compensated>
struct Accumulator;

template <>
struct Accumulator<true> {
  CompensatedSum s;
  void add(double x) { s.add(x); }
  double value() const { return s.value(); }
};

template <>
struct Accumulator<false> {
  double s = 0.0;
  void add(double x) { s += x; }
  double value() const { return s; }
};

}  // namespace detail

/// Evaluates occupancy fields of one Gaussian set at many points. Read-only
/// after construction; safe to query concurrently.
class FieldEvaluator {
 public:
  FieldEvaluator(const GaussianSet& gs, EvalOptions opts)
      : opts_(opts), classes_(gs.num_classes()), gaussians_(prepare(gs)) {
    if (!(opts_.cutoff_mahalanobis_sq > 0.0)) {
      throw InvalidParameter("EvalOptions: cutoff_mahalanobis_sq must be positive");
    }
    any_opacity_ = std::any_of(gaussians_.begin(), gaussians_.end(),
                               [](const PreparedGaussian& g) { return g.opacity > 0.0; });
    if (opts_.neighbor_index) index_ = GaussianIndex(gaussians_, opts_.cutoff_mahalanobis_sq);
  }

  std::size_t num_classes() const noexcept { return classes_; }
  const EvalOptions& options() const noexcept { return opts_; }
  std::span<const PreparedGaussian> gaussians() const noexcept { return gaussians_; }

  /// α(x) = 1 − ∏(1 − αᵢ(x)), accumulated as a sum of log1p terms.
  double geometry(const Vec3& x) const {
    return opts_.deterministic ? geometry_impl<true>(x) : geometry_impl<false>(x);
  }

  /// Posterior-weighted expectation of softmaxed semantics (C entries).
  void semantics(const Vec3& x, std::span<double> out) const {
    if (!any_opacity_) throw InvalidSet("gmm_semantics: every opacity is zero");
    if (opts_.deterministic) {
      semantics_impl<true>(x, out);
    } else {
      semantics_impl<false>(x, out);
    }
  }

  /// [1 − α; α·e] (C + 1 entries).
  void compose(const Vec3& x, std::span<double> out) const {
    const double alpha = geometry(x);
    semantics(x, out.subspan(1));
    out[0] = 1.0 - alpha;
    for (std::size_t k = 1; k < out.size(); ++k) out[k] *= alpha;
  }

  /// Σ aᵢ·αᵢ(x)·cᵢ over raw logits; unbounded.
  void legacy(const Vec3& x, std::span<double> out) const {
    if (opts_.deterministic) {
      legacy_impl<true>(x, out);
    } else {
      legacy_impl<false>(x, out);
    }
  }

  FieldSample sample(const Vec3& x) const {
    FieldSample s;
    s.geometry_prob = geometry(x);
    s.semantics_expectation.resize(classes_);
    semantics(x, s.semantics_expectation);
    s.full_prediction.resize(classes_ + 1);
    s.full_prediction[0] = 1.0 - s.geometry_prob;
    for (std::size_t k = 0; k < classes_; ++k) {
      s.full_prediction[k + 1] = s.geometry_prob * s.semantics_expectation[k];
    }
    return s;
  }

 private:
  template <typename Fn>
  void visit(const Vec3& x, Fn&& fn) const {
    for_each_contribution(gaussians_, opts_.neighbor_index ? &index_ : nullptr, opts_.cutoff_mahalanobis_sq,
                          x, std::forward<Fn>(fn));
  }

  template <bool C>
  double geometry_impl(const Vec3& x) const {
    detail::Accumulator<C> log_empty;
    bool saturated = false;
    double max_a = 0.0;
    visit(x, [&](const Contribution& c) {
      const double a = std::exp(-0.5 * c.d2);
      if (a >= kMaxSingleAlpha) saturated = true;
      max_a = std::max(max_a, a);
      log_empty.add(std::log1p(-std::min(a, kMaxSingleAlpha)));
    });
    if (saturated) return 1.0;
    // The log1p/expm1 round trip can land an ulp below the largest term.
    return std::max(max_a, -std::expm1(log_empty.value()));
  }

  template <bool C>
  void semantics_impl(const Vec3& x, std::span<double> out) const {
    thread_local std::vector<Contribution> hits;
    hits.clear();
    double max_lw = -std::numeric_limits<double>::infinity();
    visit(x, [&](const Contribution& c) {
      if (gaussians_[c.index].opacity <= 0.0) return;
      hits.push_back(c);
      max_lw = std::max(max_lw, gaussians_[c.index].log_weight - 0.5 * c.d2);
    });
    constexpr double kLogNorm = 1.5 * 1.8378770664093453;  // 1.5·log(2π)
    detail::Accumulator<C> z;
    for (const auto& c : hits) z.add(std::exp(gaussians_[c.index].log_weight - 0.5 * c.d2 - max_lw));
    const double log_density = hits.empty() ? -std::numeric_limits<double>::infinity()
                                            : max_lw + std::log(z.value()) - kLogNorm;
    if (!(log_density >= std::log(kMixtureFloor))) {
      std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(classes_));
      return;
    }
    thread_local std::vector<detail::Accumulator<C>> acc;
    acc.assign(classes_, {});
    const double zv = z.value();
    for (const auto& c : hits) {
      const auto& g = gaussians_[c.index];
      const double post = std::exp(g.log_weight - 0.5 * c.d2 - max_lw) / zv;
      for (std::size_t k = 0; k < classes_; ++k) acc[k].add(post * g.probs[k]);
    }
    for (std::size_t k = 0; k < classes_; ++k) out[k] = acc[k].value();
  }

  template <bool C>
  void legacy_impl(const Vec3& x, std::span<double> out) const {
    thread_local std::vector<detail::Accumulator<C>> acc;
    acc.assign(classes_, {});
    visit(x, [&](const Contribution& c) {
      const auto& g = gaussians_[c.index];
      const double w = g.opacity * std::exp(-0.5 * c.d2);
      for (std::size_t k = 0; k < classes_; ++k) acc[k].add(w * g.logits[k]);
    });
    for (std::size_t k = 0; k < classes_; ++k) out[k] = acc[k].value();
  }

  EvalOptions opts_;
  std::size_t classes_;
  std::vector<PreparedGaussian> gaussians_;
  GaussianIndex index_;
  bool any_opacity_ = false;
};

// Point-wise convenience wrappers. These scan every primitive; build a
// FieldEvaluator to amortize preparation over many points.

/// exp(−½ d²): 1 at the mean, decaying with Mahalanobis distance.
inline double single_occupancy_prob(const Vec3& x, const GaussianPrimitive& g) {
  return std::exp(-0.5 * mahalanobis_sq(x, g));
}

inline EvalOptions scan_options(EvalOptions opts) {
  opts.neighbor_index = false;
  return opts;
}

inline double aggregate_geometry(const Vec3& x, const GaussianSet& gs, const EvalOptions& opts = {}) {
  return FieldEvaluator(gs, scan_options(opts)).geometry(x);
}

inline std::vector<double> gmm_semantics(const Vec3& x, const GaussianSet& gs, const EvalOptions& opts = {}) {
  std::vector<double> out(gs.num_classes());
  FieldEvaluator(gs, scan_options(opts)).semantics(x, out);
  return out;
}

inline std::vector<double> compose_occupancy(const Vec3& x, const GaussianSet& gs, const EvalOptions& opts = {}) {
  std::vector<double> out(gs.num_classes() + 1);
  FieldEvaluator(gs, scan_options(opts)).compose(x, out);
  return out;
}

/// gs must carry C+1 logits with the empty class at index 0.
inline std::vector<double> legacy_additive(const Vec3& x, const GaussianSet& gs, const EvalOptions& opts = {}) {
  std::vector<double> out(gs.num_classes());
  FieldEvaluator(gs, scan_options(opts)).legacy(x, out);
  return out;
}

}  // namespace gsocc
