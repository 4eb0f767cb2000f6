#pragma once

// Seeded instance generation and JSON-lines dataset persistence.
//
// Dataset line schema (v1):
//   {"v":1,"coords":[[x,y],...],"prizes":[...],"depot_start":[x,y],
//    "depot_end":[x,y],"t_max":2.0,"m":2}
// with an optional "speed" (default 1). Reals are written in shortest
// round-trip form, so load(save(x)) == x bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "topforge/core.hpp"
#include "topforge/errors.hpp"
#include "topforge/random.hpp"

namespace topforge {

enum class PrizeScheme { Constant, Uniform, DistanceBased };

inline const char* to_string(PrizeScheme s) {
  switch (s) {
    case PrizeScheme::Constant: return "constant";
    case PrizeScheme::Uniform: return "uniform";
    case PrizeScheme::DistanceBased: return "distance";
  }
  return "?";
}

inline PrizeScheme parse_prize_scheme(const std::string& s) {
  if (s == "constant" || s == "const") return PrizeScheme::Constant;
  if (s == "uniform" || s == "unif") return PrizeScheme::Uniform;
  if (s == "distance" || s == "dist" || s == "distance-based") return PrizeScheme::DistanceBased;
  throw ConfigError("unknown prize scheme '" + s + "' (expected constant|uniform|distance)");
}

struct GenConfig {
  int n = 20;
  int m = 2;
  double t_max = 2.0;
  PrizeScheme prize_scheme = PrizeScheme::Constant;
  bool single_depot = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (n < 1) throw ConfigError("n must be >= 1");
    if (m < 1) throw ConfigError("m must be >= 1");
    if (!(t_max > 0.0) || !std::isfinite(t_max)) throw ConfigError("t_max must be positive");
  }
};

inline constexpr double kMinPrize = 0.01;

// Prizes for the given region coordinates. Uniform draws from rng; the other
// schemes are deterministic.
inline std::vector<double> prize_assign(PrizeScheme scheme, const std::vector<Point>& coords,
                                        const Point& depot, Rng& rng) {
  if (coords.empty()) throw InvalidArgument("prize_assign: no regions");
  std::vector<double> prizes(coords.size(), 1.0);
  switch (scheme) {
    case PrizeScheme::Constant:
      break;
    case PrizeScheme::Uniform:
      for (double& p : prizes) p = rng.uniform(kMinPrize, 1.0);
      break;
    case PrizeScheme::DistanceBased: {
      std::vector<double> d(coords.size());
      double dmax = 0.0;
      for (std::size_t i = 0; i < coords.size(); ++i) {
        d[i] = travel_time(depot, coords[i]);
        dmax = std::max(dmax, d[i]);
      }
      for (std::size_t i = 0; i < coords.size(); ++i) {
        if (dmax <= 0.0) {
          prizes[i] = kMinPrize;
          continue;
        }
        const double ratio = std::min(d[i] / dmax, 1.0);
        prizes[i] = (1.0 + std::floor(99.0 * ratio)) / 100.0;
      }
      break;
    }
  }
  return prizes;
}

inline Instance generate_instance(const GenConfig& cfg, std::uint64_t stream_index) {
  cfg.validate();
  Rng rng(cfg.seed, stream_index);
  Instance inst;
  inst.t_max = cfg.t_max;
  inst.m = cfg.m;
  inst.depot_start = {rng.uniform(), rng.uniform()};
  inst.depot_end = cfg.single_depot ? inst.depot_start : Point{rng.uniform(), rng.uniform()};
  inst.coords.resize(static_cast<std::size_t>(cfg.n));
  for (Point& p : inst.coords) p = {rng.uniform(), rng.uniform()};
  inst.prizes = prize_assign(cfg.prize_scheme, inst.coords, inst.depot_start, rng);
  return inst;
}

inline std::vector<Instance> generate_dataset(const GenConfig& cfg, std::size_t count,
                                              std::uint64_t first_stream = 0) {
  std::vector<Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_instance(cfg, first_stream + i));
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json point_to_json(const Point& p) { return nlohmann::json::array({p.x, p.y}); }

inline nlohmann::json instance_to_json(const Instance& inst) {
  nlohmann::json coords = nlohmann::json::array();
  for (const Point& p : inst.coords) coords.push_back(point_to_json(p));
  nlohmann::json j;
  j["v"] = 1;
  j["coords"] = std::move(coords);
  j["prizes"] = inst.prizes;
  j["depot_start"] = point_to_json(inst.depot_start);
  j["depot_end"] = point_to_json(inst.depot_end);
  j["t_max"] = inst.t_max;
  j["m"] = inst.m;
  if (inst.speed != 1.0) j["speed"] = inst.speed;
  return j;
}

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(std::string("missing field '") + key + "'");
  return *it;
}

inline double require_real(const nlohmann::json& j, const char* what) {
  if (!j.is_number()) throw SchemaError(std::string("field '") + what + "' must be a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw SchemaError(std::string("field '") + what + "' must be finite");
  return v;
}

inline Point require_point(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 2) throw SchemaError(std::string("field '") + what + "' must be [x, y]");
  return {require_real(j[0], what), require_real(j[1], what)};
}

}  // namespace detail

inline Instance instance_from_json(const nlohmann::json& j) {
  using detail::require;
  if (!j.is_object()) throw SchemaError("instance must be a JSON object");
  if (auto v = j.find("v"); v != j.end() && (!v->is_number_integer() || v->get<int>() != 1))
    throw SchemaError("unsupported schema version");

  Instance inst;
  const auto& coords = require(j, "coords");
  const auto& prizes = require(j, "prizes");
  if (!coords.is_array() || !prizes.is_array()) throw SchemaError("'coords' and 'prizes' must be arrays");
  if (coords.size() != prizes.size()) throw SchemaError("'coords' and 'prizes' differ in length");
  for (const auto& c : coords) inst.coords.push_back(detail::require_point(c, "coords"));
  for (const auto& p : prizes) {
    const double v = detail::require_real(p, "prizes");
    if (v < 0.0) throw SchemaError("prizes must be non-negative");
    inst.prizes.push_back(v);
  }
  inst.depot_start = detail::require_point(require(j, "depot_start"), "depot_start");
  inst.depot_end = detail::require_point(require(j, "depot_end"), "depot_end");
  inst.t_max = detail::require_real(require(j, "t_max"), "t_max");
  if (!(inst.t_max > 0.0)) throw SchemaError("t_max must be positive");
  const auto& m = require(j, "m");
  if (!m.is_number_integer() || m.get<long long>() < 1) throw SchemaError("m must be a positive integer");
  inst.m = m.get<int>();
  if (auto s = j.find("speed"); s != j.end()) {
    inst.speed = detail::require_real(*s, "speed");
    if (!(inst.speed > 0.0)) throw SchemaError("speed must be positive");
  }
  return inst;
}

inline void save_dataset(const std::vector<Instance>& instances, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  for (const Instance& inst : instances) out << instance_to_json(inst).dump() << '\n';
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

inline std::vector<Instance> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::vector<Instance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(e.what(), lineno);
    }
    try {
      out.push_back(instance_from_json(j));
    } catch (const SchemaError& e) {
      throw SchemaError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace topforge
