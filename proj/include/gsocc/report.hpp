#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsocc/grid.hpp"

namespace gsocc {

/// Ordered flat key/value document. Doubles print with 17 significant digits
/// so equal values always produce equal bytes.
class Report {
 public:
  using Value = std::variant<double, std::int64_t, std::string>;

  void set(std::string key, Value v) {
    for (auto& [k, old] : entries_) {
      if (k == key) {
        old = std::move(v);
        return;
      }
    }
    entries_.emplace_back(std::move(key), std::move(v));
  }

  const std::vector<std::pair<std::string, Value>>& entries() const noexcept { return entries_; }

  const Value* find(const std::string& key) const {
    for (const auto& [k, v] : entries_) {
      if (k == key) return &v;
    }
    return nullptr;
  }

  /// `key=value` lines. NaN prints as `nan`.
  void write_kv(std::ostream& os) const {
    for (const auto& [k, v] : entries_) {
      os << k << '=';
      std::visit(
          [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, double>) {
              os << (std::isnan(x) ? std::string("nan") : format_double(x));
            } else {
              os << x;
            }
          },
          v);
      os << '\n';
    }
  }

  /// JSON object with keys in insertion order; NaN becomes null.
  void write_json(std::ostream& os) const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : entries_) {
      std::visit(
          [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, double>) {
              if (std::isfinite(x)) {
                j[k] = x;
              } else {
                j[k] = nullptr;
              }
            } else {
              j[k] = x;
            }
          },
          v);
    }
    os << j.dump(2) << '\n';
  }

 private:
  std::vector<std::pair<std::string, Value>> entries_;
};

}  // namespace gsocc
