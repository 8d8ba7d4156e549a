#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gsocc/error.hpp"
#include "gsocc/field.hpp"
#include "gsocc/fps.hpp"
#include "gsocc/gaussian.hpp"
#include "gsocc/grid.hpp"
#include "gsocc/metrics.hpp"
#include "gsocc/parallel.hpp"
#include "gsocc/rng.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Configuration

struct FitConfig {
  std::size_t num_gaussians = 256;
  std::size_t iterations = 2000;
  std::size_t batch_size = 2048;
  double occupied_ratio = 0.5;  ///< fraction of each batch drawn from occupied voxels
  std::uint64_t seed = 0;
  Model model = Model::Probabilistic;

  double lr_mean = 0.02;
  double lr_scale = 0.02;
  double lr_rotation = 0.02;
  double lr_opacity = 0.05;
  double lr_semantics = 0.05;
  double min_lr_ratio = 0.05;  ///< cosine schedule floor, relative to the base rate
  double weight_decay = 0.01;  ///< decoupled; applied to opacity and semantics parameters
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_scale = 20.0;  ///< upper clamp on scales in meters

  std::size_t eval_every = 100;
  double cutoff = 25.0;
  bool batched_fps = false;
  double init_logit_scale = 5.0;

  void validate() const {
    auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
    if (num_gaussians == 0 || iterations == 0 || batch_size == 0 || eval_every == 0) {
      throw InvalidParameter("FitConfig: counts must be positive");
    }
    if (!(occupied_ratio > 0.0 && occupied_ratio < 1.0)) {
      throw InvalidParameter("FitConfig: occupied_ratio must lie in (0, 1)");
    }
    for (double v : {lr_mean, lr_scale, lr_rotation, lr_opacity, lr_semantics, min_lr_ratio, beta1, beta2, adam_eps,
                     max_scale, cutoff, init_logit_scale}) {
      if (!positive(v)) throw InvalidParameter("FitConfig: rates, betas, scales and cutoff must be positive");
    }
    if (min_lr_ratio > 1.0 || beta1 >= 1.0 || beta2 >= 1.0) {
      throw InvalidParameter("FitConfig: min_lr_ratio must be <= 1 and betas < 1");
    }
    if (!(weight_decay >= 0.0)) throw InvalidParameter("FitConfig: weight_decay must be >= 0");
    if (max_scale <= kMinScale) throw InvalidParameter("FitConfig: max_scale must exceed the scale floor");
  }
};

inline std::string model_name(Model m) { return m == Model::Probabilistic ? "probabilistic" : "additive"; }

inline Model parse_model(std::string_view s) {
  if (s == "probabilistic") return Model::Probabilistic;
  if (s == "additive") return Model::Additive;
  throw InvalidParameter("unknown model '" + std::string(s) + "' (expected probabilistic or additive)");
}

namespace detail {
inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw FormatError("config: bad value for '" + key + "': '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw FormatError("config: bad boolean for '" + key + "': '" + v + "'");
}
}  // namespace detail

/// Applies `key=value` lines onto `cfg`. Blank lines and `#` comments are ignored.
inline void apply_fit_config(std::istream& is, FitConfig& cfg) {
  using detail::parse_number;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string v = detail::trim(std::string_view(line).substr(eq + 1));
    if (key == "num_gaussians") cfg.num_gaussians = parse_number<std::size_t>(key, v);
    else if (key == "iterations") cfg.iterations = parse_number<std::size_t>(key, v);
    else if (key == "batch_size") cfg.batch_size = parse_number<std::size_t>(key, v);
    else if (key == "occupied_ratio") cfg.occupied_ratio = parse_number<double>(key, v);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "model") {
      try {
        cfg.model = parse_model(v);
      } catch (const InvalidParameter& e) {
        throw FormatError(std::string("config: ") + e.what());
      }
    }
    else if (key == "lr_mean") cfg.lr_mean = parse_number<double>(key, v);
    else if (key == "lr_scale") cfg.lr_scale = parse_number<double>(key, v);
    else if (key == "lr_rotation") cfg.lr_rotation = parse_number<double>(key, v);
    else if (key == "lr_opacity") cfg.lr_opacity = parse_number<double>(key, v);
    else if (key == "lr_semantics") cfg.lr_semantics = parse_number<double>(key, v);
    else if (key == "min_lr_ratio") cfg.min_lr_ratio = parse_number<double>(key, v);
    else if (key == "weight_decay") cfg.weight_decay = parse_number<double>(key, v);
    else if (key == "beta1") cfg.beta1 = parse_number<double>(key, v);
    else if (key == "beta2") cfg.beta2 = parse_number<double>(key, v);
    else if (key == "adam_eps") cfg.adam_eps = parse_number<double>(key, v);
    else if (key == "max_scale") cfg.max_scale = parse_number<double>(key, v);
    else if (key == "eval_every") cfg.eval_every = parse_number<std::size_t>(key, v);
    else if (key == "cutoff") cfg.cutoff = parse_number<double>(key, v);
    else if (key == "batched_fps") cfg.batched_fps = detail::parse_bool(key, v);
    else if (key == "init_logit_scale") cfg.init_logit_scale = parse_number<double>(key, v);
    else throw FormatError("config: unknown key '" + key + "'");
  }
}

inline FitConfig read_fit_config(std::istream& is) {
  FitConfig cfg;
  apply_fit_config(is, cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Unconstrained parameterization

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
/// Inverse of softplus for a > 0.
inline double softplus_inverse(double a) {
  if (!(a > 0.0)) return -700.0;
  return a > 30.0 ? a + std::log(-std::expm1(-a)) : std::log(std::expm1(a));
}

/// Flat parameter block, per Gaussian:
/// mean(3) | log scale(3) | quaternion wxyz(4) | softplus⁻¹(opacity)(1) | logits(C).
class ParamVector {
 public:
  static constexpr std::size_t kMean = 0;
  static constexpr std::size_t kLogScale = 3;
  static constexpr std::size_t kQuat = 6;
  static constexpr std::size_t kOpacity = 10;
  static constexpr std::size_t kLogits = 11;

  ParamVector(std::size_t count, std::size_t classes)
      : classes_(classes), values_(count * (kLogits + classes), 0.0) {}

  std::size_t stride() const noexcept { return kLogits + classes_; }
  std::size_t count() const noexcept { return values_.size() / stride(); }
  std::size_t num_classes() const noexcept { return classes_; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> gaussian(std::size_t i) { return std::span<double>(values_).subspan(i * stride(), stride()); }
  std::span<const double> gaussian(std::size_t i) const {
    return std::span<const double>(values_).subspan(i * stride(), stride());
  }

 private:
  std::size_t classes_;
  std::vector<double> values_;
};

inline ParamVector encode(const GaussianSet& gs) {
  ParamVector p(gs.size(), gs.num_classes());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const auto& g = gs[i];
    auto v = p.gaussian(i);
    for (int k = 0; k < 3; ++k) {
      v[ParamVector::kMean + k] = g.mean()[k];
      v[ParamVector::kLogScale + k] = std::log(g.scale()[k]);
    }
    for (int k = 0; k < 4; ++k) v[ParamVector::kQuat + k] = g.rotation()[k];
    v[ParamVector::kOpacity] = softplus_inverse(g.opacity());
    std::copy(g.semantics().begin(), g.semantics().end(), v.begin() + ParamVector::kLogits);
  }
  return p;
}

inline GaussianPrimitive decode_one(std::span<const double> v, std::size_t classes) {
  return GaussianPrimitive(Vec3(v[0], v[1], v[2]), Vec3(std::exp(v[3]), std::exp(v[4]), std::exp(v[5])),
                           Quat(v[6], v[7], v[8], v[9]), softplus(v[ParamVector::kOpacity]),
                           std::vector<double>(v.begin() + ParamVector::kLogits,
                                               v.begin() + static_cast<std::ptrdiff_t>(ParamVector::kLogits + classes)));
}

inline GaussianSet decode(const ParamVector& p) {
  std::vector<GaussianPrimitive> out;
  out.reserve(p.count());
  for (std::size_t i = 0; i < p.count(); ++i) out.push_back(decode_one(p.gaussian(i), p.num_classes()));
  return GaussianSet(std::move(out), p.num_classes());
}

// ---------------------------------------------------------------------------
// Loss and analytic gradient

/// A supervised query point.
struct SamplePoint {
  Vec3 x;
  Label label;
};

inline std::vector<SamplePoint> samples_from_voxels(const VoxelGrid& gt, std::span<const std::size_t> voxels) {
  std::vector<SamplePoint> out;
  out.reserve(voxels.size());
  for (std::size_t f : voxels) out.push_back({voxel_center(gt.spec(), gt.spec().unflat(f)), gt[f]});
  return out;
}

/// Added inside the log of the probabilistic cross-entropy.
inline constexpr double kCrossEntropyEps = 1e-12;

namespace detail {

/// ∂R/∂q̂ for each quaternion component of the (w, x, y, z) rotation formula.
inline std::array<Mat3, 4> rotation_jacobian(const Quat& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  std::array<Mat3, 4> d;
  d[0] << 0, -z, y, z, 0, -x, -y, x, 0;
  d[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
  d[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
  d[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
  for (auto& m : d) m *= 2.0;
  return d;
}

struct FitGaussian {
  PreparedGaussian prep;
  Quat q_unit;
  double q_norm = 1.0;
  double log_opacity_grad = 0.0;  ///< d log a / d raw (probabilistic) or d a / d raw (additive)
};

/// Per-Gaussian gradient accumulators, kept in the Gaussian's local frame
/// until the end of a pass.
struct GaussianAccum {
  Vec3 mean_local = Vec3::Zero();  ///< Σ g·Du, mean gradient is −2R·this
  Vec3 log_scale = Vec3::Zero();
  Mat3 rot_outer = Mat3::Zero();   ///< Σ g·δ(Du)ᵀ, contracted with ∂R/∂q̂
  double opacity = 0.0;
};

struct Hit {
  std::uint32_t index;
  double d2;
  Vec3 local;  ///< Rᵀ(x − m)
  Vec3 delta;  ///< x − m
};

class FitObjective {
 public:
  FitObjective(const ParamVector& params, Model model, const EvalOptions& opts)
      : params_(params), model_(model), opts_(opts), classes_(params.num_classes()) {
    const std::size_t n = params.count();
    gaussians_.resize(n);
    std::vector<PreparedGaussian> prepared(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = params.gaussian(i);
      auto& g = gaussians_[i];
      const Quat q(v[6], v[7], v[8], v[9]);
      g.q_norm = q.norm();
      if (!(g.q_norm > 0.0)) throw InvalidParameter("fit: zero quaternion parameter");
      g.q_unit = q / g.q_norm;
      const Vec3 scale(std::exp(v[3]), std::exp(v[4]), std::exp(v[5]));
      const double raw = v[ParamVector::kOpacity];
      const double a = softplus(raw);
      g.prep = prepare(Vec3(v[0], v[1], v[2]), quat_to_rotation(g.q_unit), scale, a,
                       v.subspan(ParamVector::kLogits, classes_));
      g.log_opacity_grad = model_ == Model::Probabilistic ? sigmoid(raw) / a : sigmoid(raw);
      prepared[i] = g.prep;
    }
    prepared_ = std::move(prepared);
    if (opts_.neighbor_index) index_ = GaussianIndex(prepared_, opts_.cutoff_mahalanobis_sq);
  }

  /// Mean loss over `samples`; when `grad` is non-null it receives the
  /// gradient with respect to every parameter.
  double evaluate(std::span<const SamplePoint> samples, std::vector<double>* grad) const {
    const std::size_t n = gaussians_.size();
    constexpr std::size_t kChunks = 32;
    const std::size_t chunks = std::min(kChunks, std::max<std::size_t>(samples.size(), 1));
    std::vector<double> chunk_loss(chunks, 0.0);
    std::vector<std::vector<GaussianAccum>> accum(grad ? chunks : 0);
    std::vector<std::vector<double>> logit_grad(grad ? chunks : 0);

    parallel_chunks(samples.size(), chunks, [&](std::size_t c, std::size_t b, std::size_t e) {
      GaussianAccum* acc = nullptr;
      double* lg = nullptr;
      if (grad) {
        accum[c].assign(n, GaussianAccum{});
        logit_grad[c].assign(n * classes_, 0.0);
        acc = accum[c].data();
        lg = logit_grad[c].data();
      }
      std::vector<Hit> hits;
      std::vector<double> work;
      CompensatedSum loss;
      for (std::size_t s = b; s < e; ++s) {
        gather(samples[s].x, hits);
        const double l = model_ == Model::Probabilistic
                             ? point_probabilistic(samples[s].label, hits, acc, lg, work)
                             : point_additive(samples[s].label, hits, acc, lg, work);
        loss.add(l);
      }
      chunk_loss[c] = loss.value();
    });

    CompensatedSum total;
    for (double l : chunk_loss) total.add(l);
    const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(samples.size(), 1));
    if (grad) finish_gradient(accum, logit_grad, inv, *grad);
    return total.value() * inv;
  }

 private:
  void gather(const Vec3& x, std::vector<Hit>& hits) const {
    hits.clear();
    for_each_contribution(prepared_, opts_.neighbor_index ? &index_ : nullptr, opts_.cutoff_mahalanobis_sq, x,
                          [&](const Contribution& c) {
                            const auto& p = prepared_[c.index];
                            const Vec3 delta = x - p.mean;
                            hits.push_back({c.index, c.d2, p.rotation.transpose() * delta, delta});
                          });
  }

  /// Route ∂L/∂d² of one hit into the geometric accumulators.
  void push_d2(const Hit& h, double g, GaussianAccum* acc) const {
    if (g == 0.0) return;
    const Vec3& s = gaussians_[h.index].prep.scale;
    const Vec3 du(h.local[0] / (s[0] * s[0]), h.local[1] / (s[1] * s[1]), h.local[2] / (s[2] * s[2]));
    auto& a = acc[h.index];
    a.mean_local += g * du;
    for (int k = 0; k < 3; ++k) a.log_scale[k] += g * (-2.0 * h.local[k] * du[k]);
    a.rot_outer += g * (h.delta * du.transpose());
  }

  double point_probabilistic(Label y, const std::vector<Hit>& hits, GaussianAccum* acc, double* lg,
                             std::vector<double>& work) const {
    // Geometry: log(1 − α) = Σ log1p(−αᵢ).
    bool saturated = false;
    CompensatedSum log_empty;
    for (const auto& h : hits) {
      const double a = std::exp(-0.5 * h.d2);
      if (a >= kMaxSingleAlpha) saturated = true;
      log_empty.add(std::log1p(-std::min(a, kMaxSingleAlpha)));
    }
    const double one_minus = saturated ? 0.0 : std::exp(log_empty.value());
    const double alpha = saturated ? 1.0 : -std::expm1(log_empty.value());

    // Semantics: posterior over hits with positive opacity.
    work.assign(classes_, 0.0);
    double max_lw = -std::numeric_limits<double>::infinity();
    for (const auto& h : hits) {
      const auto& g = gaussians_[h.index].prep;
      if (g.opacity > 0.0) max_lw = std::max(max_lw, g.log_weight - 0.5 * h.d2);
    }
    CompensatedSum z;
    for (const auto& h : hits) {
      const auto& g = gaussians_[h.index].prep;
      if (g.opacity > 0.0) z.add(std::exp(g.log_weight - 0.5 * h.d2 - max_lw));
    }
    constexpr double kLogNorm = 1.5 * 1.8378770664093453;
    const bool fallback =
        !std::isfinite(max_lw) || !(max_lw + std::log(z.value()) - kLogNorm >= std::log(kMixtureFloor));
    std::vector<CompensatedSum> e_acc(classes_);
    if (fallback) {
      std::fill(work.begin(), work.end(), 1.0 / static_cast<double>(classes_));
    } else {
      for (const auto& h : hits) {
        const auto& g = gaussians_[h.index].prep;
        if (g.opacity <= 0.0) continue;
        const double post = std::exp(g.log_weight - 0.5 * h.d2 - max_lw) / z.value();
        for (std::size_t k = 0; k < classes_; ++k) e_acc[k].add(post * g.probs[k]);
      }
      for (std::size_t k = 0; k < classes_; ++k) work[k] = e_acc[k].value();
    }

    const double o_y = y == 0 ? one_minus : alpha * work[y - 1];
    const double loss = -std::log(o_y + kCrossEntropyEps);
    if (acc == nullptr) return loss;

    const double dl_do = -1.0 / (o_y + kCrossEntropyEps);
    // dL/d(log(1−α)).
    const double g_log_empty = y == 0 ? dl_do * one_minus : dl_do * work[y - 1] * (-one_minus);
    if (!saturated && g_log_empty != 0.0) {
      for (const auto& h : hits) {
        const double a = std::exp(-0.5 * h.d2);
        // d log1p(−αᵢ)/d dᵢ² = ½αᵢ/(1 − αᵢ)
        push_d2(h, g_log_empty * 0.5 * a / (1.0 - a), acc);
      }
    }
    if (y != 0 && !fallback) {
      const std::size_t cls = y - 1;
      const double g_e = dl_do * alpha;
      const double e_y = work[cls];
      for (const auto& h : hits) {
        const auto& fg = gaussians_[h.index];
        const auto& g = fg.prep;
        if (g.opacity <= 0.0) continue;
        const double post = std::exp(g.log_weight - 0.5 * h.d2 - max_lw) / z.value();
        double* l = lg + static_cast<std::size_t>(h.index) * classes_;
        const double py = g.probs[cls];
        for (std::size_t j = 0; j < classes_; ++j) {
          l[j] += g_e * post * py * ((j == cls ? 1.0 : 0.0) - g.probs[j]);
        }
        const double g_lw = g_e * post * (py - e_y);
        auto& a = acc[h.index];
        a.opacity += g_lw;  // times d log a / d raw at the end
        for (int k = 0; k < 3; ++k) a.log_scale[k] -= g_lw;
        push_d2(h, -0.5 * g_lw, acc);
      }
    }
    return loss;
  }

  double point_additive(Label y, const std::vector<Hit>& hits, GaussianAccum* acc, double* lg,
                        std::vector<double>& work) const {
    std::vector<CompensatedSum> o_acc(classes_);
    for (const auto& h : hits) {
      const auto& g = gaussians_[h.index].prep;
      const double w = g.opacity * std::exp(-0.5 * h.d2);
      for (std::size_t k = 0; k < classes_; ++k) o_acc[k].add(w * g.logits[k]);
    }
    work.resize(classes_);
    for (std::size_t k = 0; k < classes_; ++k) work[k] = o_acc[k].value();
    const double mx = *std::max_element(work.begin(), work.end());
    double z = 0.0;
    for (double o : work) z += std::exp(o - mx);
    const double lse = mx + std::log(z);
    const double loss = lse - work[y];
    if (acc == nullptr) return loss;

    // dL/do = softmax(o) − onehot(y)
    std::vector<double> dl_do(classes_);
    for (std::size_t k = 0; k < classes_; ++k) dl_do[k] = std::exp(work[k] - lse) - (k == y ? 1.0 : 0.0);
    for (const auto& h : hits) {
      const auto& g = gaussians_[h.index].prep;
      const double a_i = std::exp(-0.5 * h.d2);
      double dot = 0.0;
      for (std::size_t k = 0; k < classes_; ++k) dot += g.logits[k] * dl_do[k];
      double* l = lg + static_cast<std::size_t>(h.index) * classes_;
      for (std::size_t k = 0; k < classes_; ++k) l[k] += g.opacity * a_i * dl_do[k];
      acc[h.index].opacity += a_i * dot;  // dL/da, times da/draw at the end
      push_d2(h, g.opacity * dot * (-0.5 * a_i), acc);
    }
    return loss;
  }

  void finish_gradient(const std::vector<std::vector<GaussianAccum>>& accum,
                       const std::vector<std::vector<double>>& logit_grad, double scale,
                       std::vector<double>& grad) const {
    const std::size_t n = gaussians_.size();
    const std::size_t stride = params_.stride();
    grad.assign(n * stride, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      GaussianAccum a;
      for (const auto& chunk : accum) {
        if (chunk.empty()) continue;
        a.mean_local += chunk[i].mean_local;
        a.log_scale += chunk[i].log_scale;
        a.rot_outer += chunk[i].rot_outer;
        a.opacity += chunk[i].opacity;
      }
      const auto& g = gaussians_[i];
      double* out = grad.data() + i * stride;
      const Vec3 gm = -2.0 * (g.prep.rotation * a.mean_local);
      for (int k = 0; k < 3; ++k) {
        out[ParamVector::kMean + k] = gm[k] * scale;
        out[ParamVector::kLogScale + k] = a.log_scale[k] * scale;
      }
      // d(d²)/dR = 2·δ(Du)ᵀ, then through R(q̂) and q̂ = q/|q|.
      const auto jac = rotation_jacobian(g.q_unit);
      Quat gq_unit;
      for (int l = 0; l < 4; ++l) gq_unit[l] = 2.0 * (a.rot_outer.cwiseProduct(jac[l])).sum();
      const Quat gq = (gq_unit - g.q_unit * g.q_unit.dot(gq_unit)) / g.q_norm;
      for (int l = 0; l < 4; ++l) out[ParamVector::kQuat + l] = gq[l] * scale;
      out[ParamVector::kOpacity] = a.opacity * g.log_opacity_grad * scale;
      for (std::size_t k = 0; k < classes_; ++k) {
        double s = 0.0;
        for (const auto& chunk : logit_grad) {
          if (!chunk.empty()) s += chunk[i * classes_ + k];
        }
        out[ParamVector::kLogits + k] = s * scale;
      }
    }
  }

  const ParamVector& params_;
  Model model_;
  EvalOptions opts_;
  std::size_t classes_;
  std::vector<FitGaussian> gaussians_;
  std::vector<PreparedGaussian> prepared_;
  GaussianIndex index_;
};

}  // namespace detail

/// Mean cross-entropy of the model's per-point class distribution against the
/// sample labels. Probabilistic: −log(ô_y + 1e-12) on the composed
/// prediction. Additive: softmax cross-entropy of the summed logits.
inline double fit_loss(const ParamVector& params, std::span<const SamplePoint> samples, Model model,
                       const EvalOptions& opts = {}) {
  return detail::FitObjective(params, model, opts).evaluate(samples, nullptr);
}

inline std::vector<double> fit_grad(const ParamVector& params, std::span<const SamplePoint> samples, Model model,
                                    const EvalOptions& opts = {}) {
  std::vector<double> g;
  detail::FitObjective(params, model, opts).evaluate(samples, &g);
  return g;
}

inline double fit_loss_and_grad(const ParamVector& params, std::span<const SamplePoint> samples, Model model,
                                const EvalOptions& opts, std::vector<double>& grad) {
  return detail::FitObjective(params, model, opts).evaluate(samples, &grad);
}

// ---------------------------------------------------------------------------
// Initialization

/// Gaussians on FPS-selected occupied voxel centers, one voxel wide, with
/// one-hot logits of the local label. When the grid has fewer occupied
/// voxels than requested, every occupied voxel is used and the remainder are
/// drawn with repetition and jittered within their voxel.
inline GaussianSet init_from_grid(const VoxelGrid& gt, const FitConfig& cfg) {
  const auto occupied = gt.occupied();
  if (occupied.empty()) throw InvalidParameter("init_from_grid: ground truth has no occupied voxel");
  const auto& spec = gt.spec();
  const Vec3 vs = spec.voxel_size();
  std::vector<Vec3> centers;
  centers.reserve(occupied.size());
  for (std::size_t f : occupied) centers.push_back(voxel_center(spec, spec.unflat(f)));

  const std::size_t p = cfg.num_gaussians;
  std::vector<Vec3> means;
  std::vector<Label> labels;
  if (occupied.size() >= p) {
    const auto picks = cfg.batched_fps ? batched_farthest_point_sampling(centers, p, cfg.seed)
                                       : farthest_point_sampling(centers, p, cfg.seed);
    for (std::size_t j : picks) {
      means.push_back(centers[j]);
      labels.push_back(gt[occupied[j]]);
    }
  } else {
    for (std::size_t j = 0; j < occupied.size(); ++j) {
      means.push_back(centers[j]);
      labels.push_back(gt[occupied[j]]);
    }
    const CounterRng rng(cfg.seed, 0x1417);
    for (std::size_t extra = 0; means.size() < p; ++extra) {
      const std::size_t j = rng.below(4 * extra, occupied.size());
      Vec3 m = centers[j];
      for (int k = 0; k < 3; ++k) m[k] += 0.5 * vs[k] * (rng.uniform(4 * extra + 1 + k) - 0.5);
      means.push_back(m);
      labels.push_back(gt[occupied[j]]);
    }
  }

  const bool additive = cfg.model == Model::Additive;
  const std::size_t classes = additive ? spec.num_classes_total : spec.num_classes_total - 1;
  std::vector<GaussianPrimitive> prims;
  prims.reserve(p);
  for (std::size_t i = 0; i < p; ++i) {
    std::vector<double> logits(classes, 0.0);
    logits[additive ? labels[i] : labels[i] - 1] = cfg.init_logit_scale;
    prims.emplace_back(means[i], vs, identity_quat(), 1.0, std::move(logits));
  }
  return GaussianSet(std::move(prims), classes);
}

// ---------------------------------------------------------------------------
// Optimization

struct MetricPoint {
  std::size_t iteration;
  double iou;
  double miou;
};

struct FitResult {
  GaussianSet gaussians;
  std::vector<double> loss;  ///< loss[t−1] is the batch loss at the parameters used for step t
  std::vector<MetricPoint> metrics;
};

/// Balanced batch of voxel indices for one step; a pure function of (seed, step).
inline std::vector<std::size_t> draw_batch(std::span<const std::size_t> occupied, std::span<const std::size_t> empty,
                                           const FitConfig& cfg, std::size_t step) {
  const CounterRng rng(cfg.seed, 0xba7c4 + step);
  std::size_t n_occ = static_cast<std::size_t>(std::llround(cfg.occupied_ratio * static_cast<double>(cfg.batch_size)));
  if (empty.empty()) n_occ = cfg.batch_size;
  if (occupied.empty()) n_occ = 0;
  std::vector<std::size_t> batch(cfg.batch_size);
  for (std::size_t j = 0; j < cfg.batch_size; ++j) {
    batch[j] = j < n_occ ? occupied[rng.below(j, occupied.size())] : empty[rng.below(j, empty.size())];
  }
  return batch;
}

inline double cosine_factor(const FitConfig& cfg, std::size_t step) {
  const double t = static_cast<double>(step) / static_cast<double>(cfg.iterations);
  return cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Adam with decoupled weight decay and cosine decay, from init_from_grid.
/// Every evaluation of IoU/mIoU voxelizes the current set over the gt spec.
inline FitResult fit(const VoxelGrid& gt, const FitConfig& cfg,
                     const std::function<void(std::size_t, double)>& on_step = {}) {
  cfg.validate();
  EvalOptions opts;
  opts.cutoff_mahalanobis_sq = cfg.cutoff;

  const auto& spec = gt.spec();
  std::vector<std::size_t> occupied, empty;
  for (std::size_t f = 0; f < gt.size(); ++f) (gt[f] ? occupied : empty).push_back(f);

  ParamVector params = encode(init_from_grid(gt, cfg));
  const std::size_t stride = params.stride();
  std::vector<double> rate(stride);
  std::vector<bool> decay(stride, false);
  for (std::size_t k = 0; k < stride; ++k) {
    if (k < ParamVector::kLogScale) rate[k] = cfg.lr_mean;
    else if (k < ParamVector::kQuat) rate[k] = cfg.lr_scale;
    else if (k < ParamVector::kOpacity) rate[k] = cfg.lr_rotation;
    else if (k == ParamVector::kOpacity) rate[k] = cfg.lr_opacity;
    else rate[k] = cfg.lr_semantics;
    decay[k] = k >= ParamVector::kOpacity;
  }

  FitResult result{decode(params), {}, {}};
  auto evaluate_metrics = [&](std::size_t step, const GaussianSet& gs) {
    const auto pred = voxelize(gs, spec, opts, cfg.model);
    const auto cm = ConfusionMatrix::from_grids(pred, gt);
    result.metrics.push_back({step, cm.geometry_iou(), cm.mean_iou()});
  };
  evaluate_metrics(0, result.gaussians);

  std::vector<double> m1(params.values().size(), 0.0), m2(params.values().size(), 0.0), grad;
  const double lo_log_scale = std::log(kMinScale), hi_log_scale = std::log(cfg.max_scale);
  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    const auto batch = draw_batch(occupied, empty, cfg, step);
    const auto samples = samples_from_voxels(gt, batch);
    const double loss = fit_loss_and_grad(params, samples, cfg.model, opts, grad);
    result.loss.push_back(loss);
    if (on_step) on_step(step, loss);

    const double lr = cosine_factor(cfg, step - 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    auto values = params.values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const std::size_t k = j % stride;
      m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * grad[j];
      m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
      const double step_size = lr * rate[k];
      double update = (m1[j] / bc1) / (std::sqrt(m2[j] / bc2) + cfg.adam_eps);
      if (decay[k]) update += cfg.weight_decay * values[j];
      values[j] -= step_size * update;
    }
    for (std::size_t i = 0; i < params.count(); ++i) {
      auto v = params.gaussian(i);
      for (std::size_t k = ParamVector::kLogScale; k < ParamVector::kQuat; ++k) {
        v[k] = std::clamp(v[k], lo_log_scale, hi_log_scale);
      }
      const double qn = std::sqrt(v[6] * v[6] + v[7] * v[7] + v[8] * v[8] + v[9] * v[9]);
      for (std::size_t k = ParamVector::kQuat; k < ParamVector::kOpacity; ++k) v[k] /= qn;
    }

    if (step % cfg.eval_every == 0 || step == cfg.iterations) {
      result.gaussians = decode(params);
      evaluate_metrics(step, result.gaussians);
    }
  }
  return result;
}

/// CSV with header `iteration,loss,iou,miou`. Row 0 holds the initial
/// metrics and no loss; metric columns are blank on steps without evaluation.
inline void write_trace_csv(std::ostream& os, const FitResult& r) {
  os << "iteration,loss,iou,miou\n";
  std::size_t m = 0;
  for (std::size_t step = 0; step <= r.loss.size(); ++step) {
    os << step << ',';
    if (step > 0) os << format_double(r.loss[step - 1]);
    if (m < r.metrics.size() && r.metrics[m].iteration == step) {
      os << ',' << format_double(r.metrics[m].iou) << ',' << format_double(r.metrics[m].miou) << '\n';
      ++m;
    } else {
      os << ",,\n";
    }
  }
}

}  // namespace gsocc
