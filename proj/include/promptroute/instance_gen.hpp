#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "promptroute/cvrp.hpp"
#include "promptroute/rng.hpp"

namespace promptroute {

enum class DistKind {
  kUniform,
  kGaussianMixture,
  // Held-out test families.
  kCluster,
  kExpansion,
  kExplosion,
  kImplosion,
  kGrid,
  kMixed,
};

std::string_view kind_name(DistKind kind);
// Accepts the long names ("implosion") and the two-letter codes ("IM").
DistKind parse_kind(std::string_view name);
bool is_test_kind(DistKind kind);

struct DistributionSpec {
  DistKind kind = DistKind::kUniform;
  int clusters = 0;  // c, gaussian mixture only
  int scale = 0;     // l, gaussian mixture only
  int size = 100;
  std::string stream = "default";

  // (0, 0) is the uniform distribution, anything else GM_c^l.
  static DistributionSpec geometric(int clusters, int scale, int size);

  // Short tag used in ids, logs and RNG stream labels, e.g. "U", "GM3_50", "CL".
  std::string label() const;
  void validate() const;

  friend bool operator==(const DistributionSpec&, const DistributionSpec&) = default;
};

// The 11 geometric (c, l) settings shared by training and key building.
inline constexpr std::array<std::pair<int, int>, 11> kGeometricSettings = {{
    {0, 0}, {1, 1},
    {3, 10}, {3, 30}, {3, 50},
    {5, 10}, {5, 30}, {5, 50},
    {7, 10}, {7, 30}, {7, 50},
}};

int capacity_for(int n);  // ceil(30 + n / 5)

struct DemandAssignment {
  std::vector<int> demands;
  int capacity = 0;
};

// Demands i.i.d. uniform on {1, ..., 9}.
DemandAssignment assign_demands(int n, Rng& rng);

// Even split of n nodes over c clusters, remainder to the first clusters.
std::vector<int> cluster_sizes(int n, int clusters);

Instance gen_instance(const DistributionSpec& spec, std::uint64_t seed);

// kind: any test family name or code (cluster/CL, expansion/EA, ...).
Instance gen_test_instance(std::string_view kind, int n, std::uint64_t seed);

std::vector<int> paper_training_sizes();  // 50, 55, ..., 200
std::vector<int> desk_training_sizes();   // 10, 15, 20

// Size-major: for each size, the 11 geometric settings in kGeometricSettings
// order.
std::vector<DistributionSpec> training_schedule(std::span<const int> sizes);
std::vector<DistributionSpec> training_schedule();

// 1-based epoch; wraps around the schedule.
const DistributionSpec& schedule_entry(std::span<const DistributionSpec> schedule, int epoch);

// The eight symmetries of the unit square; transform 0 is the identity.
Point dihedral(int transform, Point p);
Point dihedral_inverse(int transform, Point p);
std::array<Instance, 8> augment_x8(const Instance& instance);

// Building blocks of the test families, exposed for property tests.
namespace geometry {

void clamp_unit(std::vector<Point>& points);
// Joint min-max over both axes into [0, 1].
void min_max_normalize(std::vector<Point>& points);
void implode(std::vector<Point>& points, Point focus, double radius, double factor);
void expand(std::vector<Point>& points, Point focus, double radius, double factor);
void explode(std::vector<Point>& points, Point focus, double radius, Rng& rng);

}  // namespace geometry

}  // namespace promptroute
