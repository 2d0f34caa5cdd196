#include "promptroute/instance_io.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <vector>

#include "promptroute/error.hpp"

namespace promptroute {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

[[noreturn]] void parse_error(int line, const std::string& what) {
  throw Error(ErrorCode::kParse, "line " + std::to_string(line) + ": " + what);
}

long long parse_int(const std::string& tok, int line) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(tok, &used);
  } catch (const std::exception&) {
    parse_error(line, "expected an integer, got '" + tok + "'");
  }
  if (used != tok.size()) parse_error(line, "expected an integer, got '" + tok + "'");
  return v;
}

double parse_real(const std::string& tok, int line) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    parse_error(line, "expected a number, got '" + tok + "'");
  }
  if (used != tok.size()) parse_error(line, "expected a number, got '" + tok + "'");
  return v;
}

std::vector<std::string> split(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string t; in >> t;) out.push_back(t);
  return out;
}

enum class Section { kNone, kCoords, kDemands, kDepots };

}  // namespace

CvrplibFile parse_cvrplib(std::string_view text) {
  CvrplibFile out;
  std::optional<std::string> edge_type;
  bool have_dimension = false, have_capacity = false, have_coords = false, have_demands = false;
  std::map<long long, Point> coords;
  std::map<long long, long long> demands;
  std::vector<long long> depots;
  bool depot_done = false;
  Section section = Section::kNone;

  std::istringstream in{std::string(text)};
  std::string raw_line;
  int line_no = 0;
  while (std::getline(in, raw_line)) {
    ++line_no;
    const std::string line = trim(raw_line);
    if (line.empty()) continue;
    const std::string head = upper(split(line).front());
    if (head == "EOF") break;
    if (head == "NODE_COORD_SECTION") {
      section = Section::kCoords;
      have_coords = true;
      continue;
    }
    if (head == "DEMAND_SECTION") {
      section = Section::kDemands;
      have_demands = true;
      continue;
    }
    if (head == "DEPOT_SECTION") {
      section = Section::kDepots;
      continue;
    }
    const auto colon = line.find(':');
    const bool numeric = std::isdigit(static_cast<unsigned char>(line[0])) || line[0] == '-' ||
                         line[0] == '+';
    if (colon != std::string::npos && !numeric) {
      section = Section::kNone;
      const std::string key = upper(trim(line.substr(0, colon)));
      const std::string value = trim(line.substr(colon + 1));
      if (key == "NAME") {
        out.name = value;
      } else if (key == "COMMENT") {
        out.comment = value;
      } else if (key == "TYPE") {
        if (upper(value) != "CVRP") parse_error(line_no, "TYPE must be CVRP, got '" + value + "'");
      } else if (key == "DIMENSION") {
        out.dimension = static_cast<int>(parse_int(value, line_no));
        have_dimension = true;
      } else if (key == "CAPACITY") {
        out.capacity = static_cast<int>(parse_int(value, line_no));
        have_capacity = true;
      } else if (key == "EDGE_WEIGHT_TYPE") {
        edge_type = upper(value);
      }
      continue;
    }
    const auto toks = split(line);
    switch (section) {
      case Section::kCoords:
        if (toks.size() != 3) parse_error(line_no, "coordinate line needs 'id x y'");
        coords[parse_int(toks[0], line_no)] = {parse_real(toks[1], line_no),
                                               parse_real(toks[2], line_no)};
        break;
      case Section::kDemands:
        if (toks.size() != 2) parse_error(line_no, "demand line needs 'id demand'");
        demands[parse_int(toks[0], line_no)] = parse_int(toks[1], line_no);
        break;
      case Section::kDepots:
        for (const auto& t : toks) {
          const long long id = parse_int(t, line_no);
          if (id == -1) depot_done = true;
          else if (!depot_done) depots.push_back(id);
        }
        break;
      case Section::kNone:
        parse_error(line_no, "unexpected line '" + line + "'");
    }
  }

  if (!edge_type) throw Error(ErrorCode::kMissingSection, "missing EDGE_WEIGHT_TYPE");
  if (*edge_type != "EUC_2D")
    throw Error(ErrorCode::kUnsupportedEdgeWeight,
                "only EUC_2D is supported, got '" + *edge_type + "'");
  if (!have_dimension) throw Error(ErrorCode::kMissingSection, "missing DIMENSION");
  if (!have_capacity) throw Error(ErrorCode::kMissingSection, "missing CAPACITY");
  if (!have_coords) throw Error(ErrorCode::kMissingSection, "missing NODE_COORD_SECTION");
  if (!have_demands) throw Error(ErrorCode::kMissingSection, "missing DEMAND_SECTION");
  if (out.dimension < 2) throw Error(ErrorCode::kParse, "DIMENSION must be at least 2");
  if (static_cast<int>(coords.size()) != out.dimension)
    throw Error(ErrorCode::kParse, "expected " + std::to_string(out.dimension) +
                                       " coordinates, got " + std::to_string(coords.size()));
  if (static_cast<int>(demands.size()) != out.dimension)
    throw Error(ErrorCode::kParse, "expected " + std::to_string(out.dimension) + " demands, got " +
                                       std::to_string(demands.size()));
  for (long long id = 1; id <= out.dimension; ++id)
    if (!coords.count(id) || !demands.count(id))
      throw Error(ErrorCode::kParse, "node ids must be 1.." + std::to_string(out.dimension));

  long long depot = 1;
  if (!depots.empty()) {
    if (depots.size() > 1) throw Error(ErrorCode::kParse, "only a single depot is supported");
    depot = depots.front();
    if (!coords.count(depot)) throw Error(ErrorCode::kParse, "depot id out of range");
  } else if (demands.at(1) != 0) {
    throw Error(ErrorCode::kParse, "no DEPOT_SECTION and node 1 has nonzero demand");
  }

  out.raw.id = out.name;
  out.raw.meta = "cvrplib";
  out.raw.capacity = out.capacity;
  out.raw.depot = coords.at(depot);
  for (long long id = 1; id <= out.dimension; ++id) {
    if (id == depot) continue;
    out.raw.customers.push_back({coords.at(id), static_cast<int>(demands.at(id))});
  }
  out.instance = normalize_instance(out.raw);
  check_instance(out.instance);
  return out;
}

CvrplibFile read_cvrplib(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_cvrplib(buf.str());
}

std::string format_cvrplib(const RawInstance& raw, std::string_view comment) {
  std::ostringstream out;
  char buf[96];
  const std::size_t dim = raw.customers.size() + 1;
  out << "NAME : " << (raw.id.empty() ? "instance" : raw.id) << "\n";
  if (!comment.empty()) out << "COMMENT : " << comment << "\n";
  out << "TYPE : CVRP\nDIMENSION : " << dim << "\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : "
      << raw.capacity << "\nNODE_COORD_SECTION\n";
  auto coord = [&](std::size_t id, Point p) {
    std::snprintf(buf, sizeof buf, "%zu %.17g %.17g\n", id, p.x, p.y);
    out << buf;
  };
  coord(1, raw.depot);
  for (std::size_t i = 0; i < raw.customers.size(); ++i) coord(i + 2, raw.customers[i].pos);
  out << "DEMAND_SECTION\n1 0\n";
  for (std::size_t i = 0; i < raw.customers.size(); ++i)
    out << i + 2 << " " << raw.customers[i].demand << "\n";
  out << "DEPOT_SECTION\n1\n-1\nEOF\n";
  return out.str();
}

json instance_to_json(const Instance& inst) {
  json customers = json::array();
  for (const auto& c : inst.customers) customers.push_back({c.pos.x, c.pos.y, c.demand});
  return {{"id", inst.id},
          {"meta", inst.meta},
          {"capacity", inst.capacity},
          {"depot", {inst.depot.x, inst.depot.y}},
          {"customers", customers},
          {"scale", inst.scale},
          {"offset", {inst.offset.x, inst.offset.y}}};
}

Instance instance_from_json(const json& j) {
  Instance inst;
  try {
    for (const auto& [k, v] : j.items())
      if (k != "id" && k != "meta" && k != "capacity" && k != "depot" && k != "customers" &&
          k != "scale" && k != "offset")
        throw Error(ErrorCode::kParse, "unknown instance key '" + k + "'");
    inst.id = j.value("id", "");
    inst.meta = j.value("meta", "");
    inst.capacity = j.at("capacity").get<int>();
    inst.depot = {j.at("depot").at(0).get<double>(), j.at("depot").at(1).get<double>()};
    for (const auto& c : j.at("customers")) {
      if (c.size() != 3) throw Error(ErrorCode::kParse, "customer entries are [x, y, demand]");
      inst.customers.push_back({{c.at(0).get<double>(), c.at(1).get<double>()}, c.at(2).get<int>()});
    }
    inst.scale = j.value("scale", 1.0);
    if (j.contains("offset"))
      inst.offset = {j["offset"].at(0).get<double>(), j["offset"].at(1).get<double>()};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("instance json: ") + e.what());
  }
  check_instance(inst);
  return inst;
}

void write_instance(const std::filesystem::path& path, const Instance& instance) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << instance_to_json(instance).dump() << "\n";
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

Instance read_instance(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  return instance_from_json(j);
}

Instance load_any_instance(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".vrp") return read_cvrplib(path).instance;
  return read_instance(path);
}

std::map<std::string, double> load_best_known(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::map<std::string, double> out;
  try {
    json j;
    in >> j;
    for (const auto& [name, entry] : j.at("instances").items())
      out[name] = entry.at("cost").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace promptroute
