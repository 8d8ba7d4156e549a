#pragma once

#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gsocc/error.hpp"
#include "gsocc/gaussian.hpp"
#include "gsocc/grid.hpp"

namespace gsocc {

// GSOCC v1 text format:
//   GSOCC 1 <P> <C>
//   P lines: mean(3) scale(3) quat-wxyz(4) opacity(1) logits(C)
// Values are written with 17 significant digits, so doubles round-trip exactly.

inline void write_gaussians(std::ostream& os, const GaussianSet& gs) {
  os << "GSOCC 1 " << gs.size() << ' ' << gs.num_classes() << '\n';
  std::string line;
  for (const auto& g : gs.primitives()) {
    line.clear();
    auto put = [&](double v) {
      if (!line.empty()) line += ' ';
      line += format_double(v);
    };
    for (int k = 0; k < 3; ++k) put(g.mean()[k]);
    for (int k = 0; k < 3; ++k) put(g.scale()[k]);
    for (int k = 0; k < 4; ++k) put(g.rotation()[k]);
    put(g.opacity());
    for (double c : g.semantics()) put(c);
    line += '\n';
    os << line;
  }
  if (!os) throw std::runtime_error("write_gaussians: stream error");
}

inline GaussianSet read_gaussians(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw FormatError("GSOCC: missing header");
  std::istringstream hs(header);
  std::string magic;
  int version = 0;
  long long p = 0, c = 0;
  hs >> magic >> version >> p >> c;
  if (!hs || magic != "GSOCC" || version != 1 || p <= 0 || c <= 0) {
    throw FormatError("GSOCC: bad header '" + header + "'");
  }
  std::vector<GaussianPrimitive> prims;
  prims.reserve(static_cast<std::size_t>(p));
  std::string line;
  for (long long i = 0; i < p; ++i) {
    if (!std::getline(is, line)) throw FormatError("GSOCC: expected " + std::to_string(p) + " primitive lines");
    std::istringstream ls(line);
    std::vector<double> v(static_cast<std::size_t>(11 + c));
    for (double& x : v) ls >> x;
    std::string extra;
    if (!ls || (ls >> extra)) {
      throw FormatError("GSOCC: line " + std::to_string(i + 2) + " must hold " + std::to_string(11 + c) + " numbers");
    }
    try {
      prims.emplace_back(Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5]), Quat(v[6], v[7], v[8], v[9]), v[10],
                         std::vector<double>(v.begin() + 11, v.end()));
    } catch (const InvalidParameter& e) {
      throw FormatError("GSOCC: line " + std::to_string(i + 2) + ": " + e.what());
    }
  }
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) throw FormatError("GSOCC: trailing content");
  }
  return GaussianSet(std::move(prims), static_cast<std::size_t>(c));
}

}  // namespace gsocc
