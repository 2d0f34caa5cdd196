#include "promptroute/cvrp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "promptroute/error.hpp"

namespace promptroute {

double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

void check_instance(const Instance& instance) {
  auto fail = [&](const std::string& what) {
    throw Error(ErrorCode::kInvalidInstance, "instance '" + instance.id + "': " + what);
  };
  if (instance.customers.empty()) fail("needs at least one customer");
  if (instance.capacity <= 0) fail("capacity must be positive");
  auto in_unit = [](Point p) {
    return p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0;
  };
  if (!in_unit(instance.depot)) fail("depot outside [0,1]^2");
  for (std::size_t i = 0; i < instance.customers.size(); ++i) {
    const auto& c = instance.customers[i];
    if (!in_unit(c.pos)) fail("customer " + std::to_string(i + 1) + " outside [0,1]^2");
    if (c.demand < 1 || c.demand > instance.capacity)
      fail("customer " + std::to_string(i + 1) + " demand " + std::to_string(c.demand) +
           " not in [1, C]");
  }
}

double route_cost(const Instance& instance, const Route& route) {
  const auto n = static_cast<int>(instance.num_customers());
  double total = 0.0;
  Point prev = instance.depot;
  for (int c : route) {
    if (c < 1 || c > n)
      throw Error(ErrorCode::kInvalidRoute,
                  "customer index " + std::to_string(c) + " out of range [1, " +
                      std::to_string(n) + "]");
    const Point p = instance.customers[c - 1].pos;
    total += distance(prev, p);
    prev = p;
  }
  if (!route.empty()) total += distance(prev, instance.depot);
  return total;
}

double tour_cost(const Instance& instance, std::span<const Route> routes) {
  double total = 0.0;
  for (const auto& r : routes) total += route_cost(instance, r);
  return total;
}

int route_demand(const Instance& instance, const Route& route) {
  int total = 0;
  for (int c : route) total += instance.demand(static_cast<std::size_t>(c));
  return total;
}

Solution make_solution(const Instance& instance, std::vector<Route> routes) {
  Solution s;
  s.cost = tour_cost(instance, routes);
  s.routes = std::move(routes);
  return s;
}

std::string ValidityReport::describe() const {
  std::ostringstream out;
  auto list = [&](const char* label, const auto& items) {
    if (items.empty()) return;
    out << label << ":";
    for (auto v : items) out << ' ' << v;
    out << "; ";
  };
  list("missing", missing);
  list("duplicate", duplicates);
  list("out-of-range", out_of_range);
  list("empty-route", empty_routes);
  list("over-capacity-route", overloaded_routes);
  if (cost_mismatch) out << "cost-mismatch; ";
  const auto s = out.str();
  return s.empty() ? "valid" : s;
}

ValidityReport validate_solution(const Instance& instance, const Solution& solution) {
  ValidityReport report;
  const auto n = static_cast<int>(instance.num_customers());
  std::vector<int> seen(static_cast<std::size_t>(n) + 1, 0);
  for (std::size_t r = 0; r < solution.routes.size(); ++r) {
    const auto& route = solution.routes[r];
    if (route.empty()) report.empty_routes.push_back(r);
    long load = 0;
    for (int c : route) {
      if (c < 1 || c > n) {
        report.out_of_range.push_back(c);
        continue;
      }
      if (seen[c]++ == 1) report.duplicates.push_back(c);
      load += instance.demand(static_cast<std::size_t>(c));
    }
    if (load > instance.capacity) report.overloaded_routes.push_back(r);
  }
  for (int c = 1; c <= n; ++c)
    if (seen[c] == 0) report.missing.push_back(c);

  if (report.out_of_range.empty()) {
    const double recomputed = tour_cost(instance, solution.routes);
    const double tol = 1e-9 * std::max(std::abs(recomputed), std::abs(solution.cost));
    report.cost_mismatch = !(std::abs(recomputed - solution.cost) <= tol);
  }
  return report;
}

Solution brute_force_solve(const Instance& instance) {
  const std::size_t n = instance.num_customers();
  if (n > kBruteForceLimit)
    throw Error(ErrorCode::kSizeLimit, "brute_force_solve supports n <= " +
                                           std::to_string(kBruteForceLimit) + ", got " +
                                           std::to_string(n));
  if (n == 0) return {};

  const int cap = instance.capacity;
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 1);

  std::vector<double> depot_leg(n + 1);
  std::vector<std::vector<double>> leg(n + 1, std::vector<double>(n + 1));
  for (std::size_t i = 1; i <= n; ++i) {
    depot_leg[i] = distance(instance.depot, instance.node(i));
    for (std::size_t j = 1; j <= n; ++j) leg[i][j] = distance(instance.node(i), instance.node(j));
  }

  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<int> best_perm;
  std::vector<std::size_t> best_cut;

  // best[j]: optimal cost of serving perm[0..j) as consecutive routes.
  std::vector<double> best(n + 1);
  std::vector<std::size_t> parent(n + 1);
  do {
    best[0] = 0.0;
    for (std::size_t j = 1; j <= n; ++j) best[j] = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (best[i] >= best_cost) continue;
      int load = 0;
      double path = 0.0;
      for (std::size_t j = i; j < n; ++j) {
        load += instance.demand(static_cast<std::size_t>(perm[j]));
        if (load > cap) break;
        path += (j == i) ? depot_leg[perm[j]] : leg[perm[j - 1]][perm[j]];
        const double total = best[i] + path + depot_leg[perm[j]];
        if (total < best[j + 1]) {
          best[j + 1] = total;
          parent[j + 1] = i;
        }
      }
    }
    if (best[n] < best_cost) {
      best_cost = best[n];
      best_perm = perm;
      best_cut.assign(parent.begin(), parent.end());
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  std::vector<Route> routes;
  for (std::size_t j = n; j > 0;) {
    const std::size_t i = best_cut[j];
    routes.emplace_back(best_perm.begin() + static_cast<long>(i),
                        best_perm.begin() + static_cast<long>(j));
    j = i;
  }
  std::reverse(routes.begin(), routes.end());
  return make_solution(instance, std::move(routes));
}

Instance normalize_instance(const RawInstance& raw) {
  if (raw.capacity <= 0)
    throw Error(ErrorCode::kInvalidInstance, "capacity must be positive");
  double min_x = raw.depot.x, max_x = raw.depot.x;
  double min_y = raw.depot.y, max_y = raw.depot.y;
  for (const auto& c : raw.customers) {
    min_x = std::min(min_x, c.pos.x);
    max_x = std::max(max_x, c.pos.x);
    min_y = std::min(min_y, c.pos.y);
    max_y = std::max(max_y, c.pos.y);
  }
  const double span = std::max(max_x - min_x, max_y - min_y);
  if (!(span > 0.0))
    throw Error(ErrorCode::kDegenerateInstance,
                "instance '" + raw.id + "' has zero spatial extent");

  auto map = [&](Point p) {
    return Point{std::clamp((p.x - min_x) / span, 0.0, 1.0),
                 std::clamp((p.y - min_y) / span, 0.0, 1.0)};
  };
  Instance out;
  out.id = raw.id;
  out.meta = raw.meta;
  out.capacity = raw.capacity;
  out.depot = map(raw.depot);
  out.customers.reserve(raw.customers.size());
  for (const auto& c : raw.customers) out.customers.push_back({map(c.pos), c.demand});
  out.scale = span;
  out.offset = {min_x, min_y};
  return out;
}

RawInstance denormalize(const Instance& instance) {
  auto map = [&](Point p) {
    return Point{instance.offset.x + instance.scale * p.x,
                 instance.offset.y + instance.scale * p.y};
  };
  RawInstance raw;
  raw.id = instance.id;
  raw.meta = instance.meta;
  raw.capacity = instance.capacity;
  raw.depot = map(instance.depot);
  for (const auto& c : instance.customers) raw.customers.push_back({map(c.pos), c.demand});
  return raw;
}

}  // namespace promptroute
