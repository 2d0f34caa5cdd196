#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "json.hpp"
#include "promptroute/cvrp.hpp"

namespace promptroute {

// A TSPLIB-style CVRP file after parsing. `instance` is normalized into the
// unit square; `raw` keeps the source coordinates.
struct CvrplibFile {
  std::string name;
  std::string comment;
  int dimension = 0;  // nodes including the depot
  int capacity = 0;
  RawInstance raw;
  Instance instance;
};

// Accepts EUC_2D files with NODE_COORD_SECTION, DEMAND_SECTION and an optional
// DEPOT_SECTION (default: node 1). Distances stay exact, not rounded to
// integers.
CvrplibFile parse_cvrplib(std::string_view text);
CvrplibFile read_cvrplib(const std::filesystem::path& path);

// Writes `raw` with the depot as node 1; coordinates at full precision.
std::string format_cvrplib(const RawInstance& raw, std::string_view comment = {});

nlohmann::json instance_to_json(const Instance& instance);
Instance instance_from_json(const nlohmann::json& j);
void write_instance(const std::filesystem::path& path, const Instance& instance);
Instance read_instance(const std::filesystem::path& path);

// Reads either a .vrp file or a JSON instance, by extension.
Instance load_any_instance(const std::filesystem::path& path);

// {"instances": {name: {"cost": ..., ...}}} -> name -> cost.
std::map<std::string, double> load_best_known(const std::filesystem::path& path);

}  // namespace promptroute
