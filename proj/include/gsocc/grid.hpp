#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <istream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gsocc/error.hpp"
#include "gsocc/field.hpp"
#include "gsocc/gaussian.hpp"
#include "gsocc/parallel.hpp"

namespace gsocc {

using Label = std::uint16_t;
using Index3 = std::array<std::int64_t, 3>;

/// Axis-aligned voxel lattice. Class 0 is empty; labels run over [0, num_classes_total).
struct GridSpec {
  Vec3 min_corner = Vec3::Zero();
  Vec3 max_corner = Vec3::Ones();
  std::array<std::int64_t, 3> resolution{1, 1, 1};
  std::size_t num_classes_total = 2;

  void validate() const {
    for (int k = 0; k < 3; ++k) {
      if (!(max_corner[k] > min_corner[k])) throw InvalidParameter("GridSpec: max_corner must exceed min_corner");
      if (resolution[k] <= 0) throw InvalidParameter("GridSpec: resolution must be positive");
    }
    if (num_classes_total < 2) throw InvalidParameter("GridSpec: need the empty class plus at least one class");
    if (num_classes_total > 65536) throw InvalidParameter("GridSpec: labels are limited to 16 bits");
  }

  Vec3 voxel_size() const {
    return Vec3((max_corner[0] - min_corner[0]) / static_cast<double>(resolution[0]),
                (max_corner[1] - min_corner[1]) / static_cast<double>(resolution[1]),
                (max_corner[2] - min_corner[2]) / static_cast<double>(resolution[2]));
  }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(resolution[0] * resolution[1] * resolution[2]);
  }

  double volume() const { return (max_corner - min_corner).prod(); }

  bool contains(const Index3& i) const {
    for (int k = 0; k < 3; ++k) {
      if (i[k] < 0 || i[k] >= resolution[k]) return false;
    }
    return true;
  }

  /// (ix·Y + iy)·Z + iz
  std::size_t flat(const Index3& i) const {
    return static_cast<std::size_t>((i[0] * resolution[1] + i[1]) * resolution[2] + i[2]);
  }

  Index3 unflat(std::size_t f) const {
    const auto z = static_cast<std::int64_t>(f) % resolution[2];
    const auto rest = static_cast<std::int64_t>(f) / resolution[2];
    return {rest / resolution[1], rest % resolution[1], z};
  }

  /// Voxel containing x; nullopt outside [min_corner, max_corner).
  std::optional<Index3> locate(const Vec3& x) const {
    const Vec3 vs = voxel_size();
    Index3 i{};
    for (int k = 0; k < 3; ++k) {
      const double t = std::floor((x[k] - min_corner[k]) / vs[k]);
      if (!(t >= 0.0) || t >= static_cast<double>(resolution[k])) return std::nullopt;
      i[k] = static_cast<std::int64_t>(t);
    }
    return i;
  }

  bool operator==(const GridSpec& o) const {
    return min_corner == o.min_corner && max_corner == o.max_corner && resolution == o.resolution &&
           num_classes_total == o.num_classes_total;
  }
};

inline Vec3 voxel_center(const GridSpec& spec, std::int64_t ix, std::int64_t iy, std::int64_t iz) {
  if (!spec.contains({ix, iy, iz})) throw OutOfRange("voxel_center: index outside the grid");
  const Vec3 vs = spec.voxel_size();
  return Vec3(spec.min_corner[0] + (static_cast<double>(ix) + 0.5) * vs[0],
              spec.min_corner[1] + (static_cast<double>(iy) + 0.5) * vs[1],
              spec.min_corner[2] + (static_cast<double>(iz) + 0.5) * vs[2]);
}

inline Vec3 voxel_center(const GridSpec& spec, const Index3& i) { return voxel_center(spec, i[0], i[1], i[2]); }

/// 200×200×16 over [-50,50]×[-50,50]×[-5,3] with 0.5 m voxels; 16 semantic
/// classes plus empty (the noise class is not carried).
inline GridSpec nuscenes_spec() {
  return {Vec3(-50, -50, -5), Vec3(50, 50, 3), {200, 200, 16}, 17};
}

/// 256×256×32 over a 51.2×51.2×6.4 m box ahead of the ego vehicle; 18 semantic classes plus empty.
inline GridSpec kitti360_spec() {
  return {Vec3(0.0, -25.6, -2.0), Vec3(51.2, 25.6, 4.4), {256, 256, 32}, 19};
}

/// Desk-scale street scene: 40×40×16 voxels of 0.5 m.
inline GridSpec mini_street_spec() { return {Vec3(0, 0, 0), Vec3(20, 20, 8), {40, 40, 16}, 6}; }

class VoxelGrid {
 public:
  explicit VoxelGrid(GridSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    labels_.assign(spec_.voxel_count(), 0);
  }

  VoxelGrid(GridSpec spec, std::vector<Label> labels) : spec_(std::move(spec)), labels_(std::move(labels)) {
    spec_.validate();
    if (labels_.size() != spec_.voxel_count()) throw InvalidParameter("VoxelGrid: label count does not match spec");
    for (Label l : labels_) {
      if (l >= spec_.num_classes_total) throw InvalidParameter("VoxelGrid: label out of class range");
    }
  }

  const GridSpec& spec() const noexcept { return spec_; }
  std::span<const Label> labels() const noexcept { return labels_; }
  std::size_t size() const noexcept { return labels_.size(); }

  Label at(const Index3& i) const {
    if (!spec_.contains(i)) throw OutOfRange("VoxelGrid::at: index outside the grid");
    return labels_[spec_.flat(i)];
  }
  Label operator[](std::size_t flat) const { return labels_[flat]; }

  void set(const Index3& i, Label l) {
    if (!spec_.contains(i)) throw OutOfRange("VoxelGrid::set: index outside the grid");
    if (l >= spec_.num_classes_total) throw InvalidParameter("VoxelGrid::set: label out of class range");
    labels_[spec_.flat(i)] = l;
  }
  void set(std::size_t flat, Label l) {
    if (flat >= labels_.size()) throw OutOfRange("VoxelGrid::set: flat index outside the grid");
    if (l >= spec_.num_classes_total) throw InvalidParameter("VoxelGrid::set: label out of class range");
    labels_[flat] = l;
  }

  /// Label of the voxel containing x, 0 outside the grid.
  Label label_at(const Vec3& x) const {
    const auto i = spec_.locate(x);
    return i ? labels_[spec_.flat(*i)] : Label{0};
  }

  std::vector<std::size_t> occupied() const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < labels_.size(); ++f) {
      if (labels_[f] != 0) out.push_back(f);
    }
    return out;
  }

  std::vector<std::size_t> class_histogram() const {
    std::vector<std::size_t> h(spec_.num_classes_total, 0);
    for (Label l : labels_) ++h[l];
    return h;
  }

  bool operator==(const VoxelGrid& o) const { return spec_ == o.spec_ && labels_ == o.labels_; }

 private:
  GridSpec spec_;
  std::vector<Label> labels_;
};

/// First index of the maximum entry.
inline Label argmax_label(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (v[k] > v[best]) best = k;
  }
  return static_cast<Label>(best);
}

/// Labels every voxel center with the argmax of the model's prediction
/// (ties go to the lowest class index).
inline VoxelGrid voxelize(const GaussianSet& gs, const GridSpec& spec, const EvalOptions& opts = {},
                          Model model = Model::Probabilistic) {
  spec.validate();
  const std::size_t expected = model == Model::Probabilistic ? spec.num_classes_total - 1 : spec.num_classes_total;
  if (gs.num_classes() != expected) {
    throw InvalidParameter("voxelize: set carries " + std::to_string(gs.num_classes()) + " logits, grid expects " +
                           std::to_string(expected));
  }
  const FieldEvaluator field(gs, opts);
  std::vector<Label> labels(spec.voxel_count(), 0);
  parallel_chunks(labels.size(), 64, [&](std::size_t, std::size_t b, std::size_t e) {
    std::vector<double> out(spec.num_classes_total);
    for (std::size_t f = b; f < e; ++f) {
      const Vec3 x = voxel_center(spec, spec.unflat(f));
      if (model == Model::Probabilistic) {
        field.compose(x, out);
      } else {
        field.legacy(x, out);
      }
      labels[f] = argmax_label(out);
    }
  });
  return VoxelGrid(spec, std::move(labels));
}

// ---------------------------------------------------------------------------
// OGRID v1 files

enum class GridEncoding { Text, Binary, Auto };

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string grid_header(const GridSpec& s) {
  std::ostringstream os;
  os << "OGRID 1 " << s.resolution[0] << ' ' << s.resolution[1] << ' ' << s.resolution[2] << ' '
     << s.num_classes_total;
  for (int k = 0; k < 3; ++k) os << ' ' << format_double(s.min_corner[k]);
  for (int k = 0; k < 3; ++k) os << ' ' << format_double(s.max_corner[k]);
  return os.str();
}

inline void write_grid(std::ostream& os, const VoxelGrid& grid, GridEncoding enc = GridEncoding::Text) {
  const auto& s = grid.spec();
  os << grid_header(s) << '\n';
  const auto labels = grid.labels();
  if (enc == GridEncoding::Binary) {
    std::string bytes(labels.size() * 2, '\0');
    for (std::size_t i = 0; i < labels.size(); ++i) {
      bytes[2 * i] = static_cast<char>(labels[i] & 0xff);
      bytes[2 * i + 1] = static_cast<char>(labels[i] >> 8);
    }
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  } else {
    const auto z = static_cast<std::size_t>(s.resolution[2]);
    std::string line;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      line += std::to_string(labels[i]);
      line += (i + 1) % z == 0 ? '\n' : ' ';
      if (line.size() > 1 << 16) {
        os << line;
        line.clear();
      }
    }
    os << line;
  }
  if (!os) throw std::runtime_error("write_grid: stream error");
}

/// Reads either encoding. With Auto, a body of exactly 2·N bytes containing
/// any byte other than ASCII digits and whitespace is taken as binary.
inline VoxelGrid read_grid(std::istream& is, GridEncoding enc = GridEncoding::Auto) {
  std::string header;
  if (!std::getline(is, header)) throw FormatError("OGRID: missing header");
  std::istringstream hs(header);
  std::string magic;
  int version = 0;
  GridSpec spec;
  hs >> magic >> version >> spec.resolution[0] >> spec.resolution[1] >> spec.resolution[2] >> spec.num_classes_total;
  for (int k = 0; k < 3; ++k) hs >> spec.min_corner[k];
  for (int k = 0; k < 3; ++k) hs >> spec.max_corner[k];
  if (!hs || magic != "OGRID" || version != 1) throw FormatError("OGRID: bad header '" + header + "'");
  std::string extra;
  if (hs >> extra) throw FormatError("OGRID: trailing header fields");
  try {
    spec.validate();
  } catch (const InvalidParameter& e) {
    throw FormatError(std::string("OGRID: ") + e.what());
  }
  const std::size_t n = spec.voxel_count();
  const std::string body{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};

  if (enc == GridEncoding::Auto) {
    bool textual = true;
    for (unsigned char c : body) {
      if (!(std::isdigit(c) || std::isspace(c))) {
        textual = false;
        break;
      }
    }
    enc = (!textual && body.size() == 2 * n) ? GridEncoding::Binary : GridEncoding::Text;
  }

  std::vector<Label> labels(n);
  if (enc == GridEncoding::Binary) {
    if (body.size() != 2 * n) throw FormatError("OGRID: binary body has wrong length");
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<Label>(static_cast<unsigned char>(body[2 * i]) |
                                     (static_cast<unsigned>(static_cast<unsigned char>(body[2 * i + 1])) << 8));
    }
  } else {
    std::size_t i = 0;
    const char* p = body.data();
    const char* end = p + body.size();
    while (true) {
      while (p < end && std::isspace(static_cast<unsigned char>(*p))) ++p;
      if (p == end) break;
      unsigned long v = 0;
      const char* start = p;
      while (p < end && std::isdigit(static_cast<unsigned char>(*p))) {
        v = v * 10 + static_cast<unsigned long>(*p - '0');
        if (v > 65535) throw FormatError("OGRID: label too large");
        ++p;
      }
      if (p == start || (p < end && !std::isspace(static_cast<unsigned char>(*p)))) {
        throw FormatError("OGRID: non-integer label");
      }
      if (i >= n) throw FormatError("OGRID: too many labels");
      labels[i++] = static_cast<Label>(v);
    }
    if (i != n) throw FormatError("OGRID: expected " + std::to_string(n) + " labels, got " + std::to_string(i));
  }
  try {
    return VoxelGrid(spec, std::move(labels));
  } catch (const InvalidParameter& e) {
    throw FormatError(std::string("OGRID: ") + e.what());
  }
}

}  // namespace gsocc
