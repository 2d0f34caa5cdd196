#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace promptroute {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

double distance(Point a, Point b);

struct Customer {
  Point pos;
  int demand = 0;
};

// A CVRP instance in normalized coordinates. Node 0 is the depot; node i >= 1
// is customers[i - 1]. `scale` and `offset` map normalized coordinates back
// to the source units: original = offset + scale * normalized.
struct Instance {
  std::string id;
  std::string meta;
  Point depot;
  std::vector<Customer> customers;
  int capacity = 0;
  double scale = 1.0;
  Point offset;

  std::size_t num_customers() const { return customers.size(); }
  std::size_t num_nodes() const { return customers.size() + 1; }
  Point node(std::size_t i) const { return i == 0 ? depot : customers[i - 1].pos; }
  int demand(std::size_t i) const { return i == 0 ? 0 : customers[i - 1].demand; }
};

// Throws kInvalidInstance if the coordinate, demand or size invariants fail.
void check_instance(const Instance& instance);

// Customer indices 1..n; the depot legs at both ends are implicit.
using Route = std::vector<int>;

struct Solution {
  std::vector<Route> routes;
  double cost = 0.0;
};

double route_cost(const Instance& instance, const Route& route);
double tour_cost(const Instance& instance, std::span<const Route> routes);
int route_demand(const Instance& instance, const Route& route);

// Builds a Solution with the cost recomputed from `routes`.
Solution make_solution(const Instance& instance, std::vector<Route> routes);

struct ValidityReport {
  std::vector<int> missing;
  std::vector<int> duplicates;
  std::vector<int> out_of_range;
  std::vector<std::size_t> empty_routes;
  std::vector<std::size_t> overloaded_routes;
  bool cost_mismatch = false;

  bool valid() const {
    return missing.empty() && duplicates.empty() && out_of_range.empty() &&
           empty_routes.empty() && overloaded_routes.empty() && !cost_mismatch;
  }
  std::string describe() const;
};

ValidityReport validate_solution(const Instance& instance, const Solution& solution);

inline constexpr std::size_t kBruteForceLimit = 10;

// Exact optimum: every customer permutation, each split optimally into
// capacity-feasible consecutive segments. n <= kBruteForceLimit.
Solution brute_force_solve(const Instance& instance);

// Instance in source units, before normalization.
struct RawInstance {
  std::string id;
  std::string meta;
  Point depot;
  std::vector<Customer> customers;
  int capacity = 0;
};

// Translates each axis minimum to 0 and divides both axes by the larger span,
// so aspect ratio is preserved. Records scale and offset on the result.
Instance normalize_instance(const RawInstance& raw);

RawInstance denormalize(const Instance& instance);

}  // namespace promptroute
