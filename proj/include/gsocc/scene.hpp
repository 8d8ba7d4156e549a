#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gsocc/error.hpp"
#include "gsocc/grid.hpp"
#include "gsocc/rng.hpp"

namespace gsocc {

/// Semantic classes used by synthetic scenes.
namespace scene_class {
inline constexpr Label kEmpty = 0;
inline constexpr Label kGround = 1;
inline constexpr Label kVehicle = 2;
inline constexpr Label kBuilding = 3;
inline constexpr Label kPole = 4;
inline constexpr Label kVegetation = 5;
inline constexpr std::size_t kTotal = 6;
}  // namespace scene_class

inline constexpr std::string_view scene_class_name(Label l) {
  constexpr std::string_view names[] = {"empty", "ground", "vehicle", "building", "pole", "vegetation"};
  return l < scene_class::kTotal ? names[l] : std::string_view("unknown");
}

/// Everything with z below `height`.
struct GroundPlane {
  double height;
};

struct Box {
  Vec3 lo;
  Vec3 hi;
};

/// Vertical cylinder standing on (base.x, base.y) from base.z up to base.z + height.
struct Cylinder {
  Vec3 base;
  double radius;
  double height;
};

struct Sphere {
  Vec3 center;
  double radius;
};

using ShapeGeometry = std::variant<GroundPlane, Box, Cylinder, Sphere>;

struct Shape {
  ShapeGeometry geometry;
  Label label;
};

inline bool shape_contains(const ShapeGeometry& g, const Vec3& p) {
  struct Visitor {
    const Vec3& p;
    bool operator()(const GroundPlane& s) const { return p.z() < s.height; }
    bool operator()(const Box& s) const {
      return (p.array() >= s.lo.array()).all() && (p.array() <= s.hi.array()).all();
    }
    bool operator()(const Cylinder& s) const {
      const double dx = p.x() - s.base.x(), dy = p.y() - s.base.y();
      return dx * dx + dy * dy <= s.radius * s.radius && p.z() >= s.base.z() && p.z() <= s.base.z() + s.height;
    }
    bool operator()(const Sphere& s) const { return (p - s.center).squaredNorm() <= s.radius * s.radius; }
  };
  return std::visit(Visitor{p}, g);
}

/// Horizontal translation (planes are left in place).
inline ShapeGeometry translate_xy(const ShapeGeometry& g, double dx, double dy) {
  const Vec3 d(dx, dy, 0.0);
  struct Visitor {
    const Vec3& d;
    ShapeGeometry operator()(const GroundPlane& s) const { return s; }
    ShapeGeometry operator()(const Box& s) const { return Box{s.lo + d, s.hi + d}; }
    ShapeGeometry operator()(const Cylinder& s) const { return Cylinder{s.base + d, s.radius, s.height}; }
    ShapeGeometry operator()(const Sphere& s) const { return Sphere{s.center + d, s.radius}; }
  };
  return std::visit(Visitor{d}, g);
}

/// Shapes are painted in order; later shapes overwrite earlier ones.
/// Every non-plane shape is shifted by a seeded horizontal offset in [-jitter, jitter].
struct Recipe {
  std::string name;
  std::vector<Shape> shapes;
  double jitter = 0.0;
};

struct SceneMetadata {
  std::string recipe;
  std::uint64_t seed = 0;
  std::vector<Shape> placed;  ///< shapes after jitter
  std::vector<std::size_t> class_counts;
};

struct Scene {
  VoxelGrid grid;
  SceneMetadata metadata;
};

inline const std::vector<std::string>& recipe_names() {
  static const std::vector<std::string> names = {"ground-plane", "single-box", "mini-street", "park"};
  return names;
}

/// Named recipes, laid out in fractions of the grid extent so they scale to any spec.
inline Recipe make_recipe(std::string_view name, const GridSpec& spec) {
  const Vec3 lo = spec.min_corner;
  const Vec3 ext = spec.max_corner - spec.min_corner;
  auto at = [&](double fx, double fy, double fz) { return Vec3(lo.x() + fx * ext.x(), lo.y() + fy * ext.y(), lo.z() + fz * ext.z()); };
  const double ground = lo.z() + ext.z() / 8.0;
  const double horiz = std::min(ext.x(), ext.y());
  using namespace scene_class;

  Recipe r;
  r.name = std::string(name);
  if (name == "ground-plane") {
    r.shapes = {{GroundPlane{ground}, kGround}};
  } else if (name == "single-box") {
    r.shapes = {{Box{at(0.3, 0.3, 0.125), at(0.6, 0.5, 0.5)}, kBuilding}};
  } else if (name == "mini-street") {
    r.jitter = 0.05 * horiz;
    r.shapes = {
        {GroundPlane{ground}, kGround},
        {Box{at(0.15, 0.20, 0.125), at(0.35, 0.30, 0.30)}, kVehicle},
        {Box{at(0.55, 0.22, 0.125), at(0.72, 0.32, 0.32)}, kVehicle},
        {Box{at(0.20, 0.60, 0.125), at(0.55, 0.85, 0.80)}, kBuilding},
        {Cylinder{at(0.75, 0.55, 0.125), 0.02 * horiz, 0.6 * ext.z()}, kPole},
        {Cylinder{at(0.80, 0.80, 0.125), 0.04 * horiz, 0.7 * ext.z()}, kVegetation},
    };
  } else if (name == "park") {
    r.jitter = 0.05 * horiz;
    r.shapes = {
        {GroundPlane{ground}, kGround},
        {Cylinder{at(0.3, 0.3, 0.125), 0.03 * horiz, 0.4 * ext.z()}, kVegetation},
        {Sphere{at(0.3, 0.3, 0.6), 0.12 * horiz}, kVegetation},
        {Cylinder{at(0.7, 0.6, 0.125), 0.03 * horiz, 0.4 * ext.z()}, kVegetation},
        {Sphere{at(0.7, 0.6, 0.6), 0.10 * horiz}, kVegetation},
        {Box{at(0.45, 0.15, 0.125), at(0.6, 0.25, 0.3)}, kVehicle},
    };
  } else {
    throw InvalidParameter("unknown recipe '" + std::string(name) + "'");
  }
  return r;
}

/// Rasterizes a recipe at voxel centers. Deterministic in (seed, recipe, spec).
inline Scene synth_scene(std::uint64_t seed, const Recipe& recipe, const GridSpec& spec) {
  if (recipe.shapes.empty()) throw InvalidParameter("synth_scene: recipe has no shapes");
  spec.validate();
  for (const auto& s : recipe.shapes) {
    if (s.label == 0 || s.label >= spec.num_classes_total) {
      throw InvalidParameter("synth_scene: shape label outside the grid's semantic classes");
    }
  }
  const CounterRng rng(seed, 0x5ce4e);
  SceneMetadata meta;
  meta.recipe = recipe.name;
  meta.seed = seed;
  for (std::size_t i = 0; i < recipe.shapes.size(); ++i) {
    const double dx = recipe.jitter * (2.0 * rng.uniform(2 * i) - 1.0);
    const double dy = recipe.jitter * (2.0 * rng.uniform(2 * i + 1) - 1.0);
    meta.placed.push_back({translate_xy(recipe.shapes[i].geometry, dx, dy), recipe.shapes[i].label});
  }

  std::vector<Label> labels(spec.voxel_count(), 0);
  parallel_for(labels.size(), [&](std::size_t f) {
    const Vec3 c = voxel_center(spec, spec.unflat(f));
    for (const auto& s : meta.placed) {
      if (shape_contains(s.geometry, c)) labels[f] = s.label;
    }
  });
  VoxelGrid grid(spec, std::move(labels));
  meta.class_counts = grid.class_histogram();
  std::size_t present = 0;
  for (auto c : meta.class_counts) present += c > 0 ? 1 : 0;
  if (present < 2) throw std::runtime_error("synth_scene: rasterized scene has fewer than two classes");
  return {std::move(grid), std::move(meta)};
}

inline Scene synth_scene(std::uint64_t seed, std::string_view recipe, const GridSpec& spec) {
  return synth_scene(seed, make_recipe(recipe, spec), spec);
}

}  // namespace gsocc
