#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "gsocc/error.hpp"
#include "gsocc/gaussian.hpp"
#include "gsocc/rng.hpp"

namespace gsocc {

/// Greedy farthest point sampling. A seeded random probe picks the start:
/// the first chosen point is the candidate farthest from the probe, and every
/// later pick maximizes the distance to the chosen set. Ties resolve to the
/// lowest index.
inline std::vector<std::size_t> farthest_point_sampling(std::span<const Vec3> points, std::size_t k,
                                                        std::uint64_t seed) {
  const std::size_t n = points.size();
  if (k == 0) throw InvalidParameter("farthest_point_sampling: k must be at least 1");
  if (k > n) throw InvalidParameter("farthest_point_sampling: k exceeds the number of candidates");

  const Vec3 probe = points[CounterRng(seed, 0xf95).below(0, n)];
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = (points[i] - probe).squaredNorm();

  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  std::vector<bool> taken(n, false);
  auto pick_farthest = [&] {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n || dist[i] > dist[best]) best = i;
    }
    return best;
  };

  std::size_t next = pick_farthest();
  while (true) {
    chosen.push_back(next);
    taken[next] = true;
    if (chosen.size() == k) break;
    const Vec3& p = points[next];
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (points[i] - p).squaredNorm();
      // First pick replaces the probe distances; later picks take the minimum.
      dist[i] = chosen.size() == 1 ? d : std::min(dist[i], d);
    }
    next = pick_farthest();
  }
  return chosen;
}

/// Divide-and-conquer FPS: split the bounding box into 2³ octants, give each
/// octant a quota proportional to its point count (largest remainder), run
/// FPS per octant and concatenate in octant order.
inline std::vector<std::size_t> batched_farthest_point_sampling(std::span<const Vec3> points, std::size_t k,
                                                                std::uint64_t seed) {
  const std::size_t n = points.size();
  if (k == 0) throw InvalidParameter("batched_farthest_point_sampling: k must be at least 1");
  if (k > n) throw InvalidParameter("batched_farthest_point_sampling: k exceeds the number of candidates");

  Vec3 lo = points[0], hi = points[0];
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 mid = 0.5 * (lo + hi);
  std::array<std::vector<std::size_t>, 8> buckets;
  for (std::size_t i = 0; i < n; ++i) {
    const int o = (points[i][0] > mid[0] ? 1 : 0) | (points[i][1] > mid[1] ? 2 : 0) | (points[i][2] > mid[2] ? 4 : 0);
    buckets[o].push_back(i);
  }

  std::array<std::size_t, 8> quota{};
  std::array<double, 8> remainder{};
  std::size_t assigned = 0;
  for (int o = 0; o < 8; ++o) {
    const double exact = static_cast<double>(k) * static_cast<double>(buckets[o].size()) / static_cast<double>(n);
    quota[o] = static_cast<std::size_t>(exact);
    remainder[o] = exact - static_cast<double>(quota[o]);
    assigned += quota[o];
  }
  while (assigned < k) {
    int best = -1;
    for (int o = 0; o < 8; ++o) {
      if (quota[o] >= buckets[o].size()) continue;
      if (best < 0 || remainder[o] > remainder[best]) best = o;
    }
    ++quota[best];
    remainder[best] = -1.0;
    ++assigned;
  }

  std::vector<std::size_t> out;
  out.reserve(k);
  std::vector<Vec3> local;
  for (int o = 0; o < 8; ++o) {
    if (quota[o] == 0) continue;
    local.clear();
    for (std::size_t i : buckets[o]) local.push_back(points[i]);
    for (std::size_t j : farthest_point_sampling(local, quota[o], seed + static_cast<std::uint64_t>(o))) {
      out.push_back(buckets[o][j]);
    }
  }
  return out;
}

}  // namespace gsocc
