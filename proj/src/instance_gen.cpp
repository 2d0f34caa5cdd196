#include "promptroute/instance_gen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numbers>

#include "promptroute/error.hpp"

namespace promptroute {

namespace {

struct KindName {
  DistKind kind;
  std::string_view name;
  std::string_view code;
};

constexpr std::array<KindName, 8> kKindNames = {{
    {DistKind::kUniform, "uniform", "U"},
    {DistKind::kGaussianMixture, "gm", "GM"},
    {DistKind::kCluster, "cluster", "CL"},
    {DistKind::kExpansion, "expansion", "EA"},
    {DistKind::kExplosion, "explosion", "EO"},
    {DistKind::kImplosion, "implosion", "IM"},
    {DistKind::kGrid, "grid", "GR"},
    {DistKind::kMixed, "mixed", "MX"},
}};

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Test-family constants. These are fixed choices (see README), not values
// taken from a reference generator.
constexpr double kClusterSigma = 0.04;
constexpr double kImplosionFactor = 0.5;
constexpr double kGridJitter = 0.05;
constexpr double kExplosionRingNoise = 0.02;

std::vector<Point> uniform_points(int count, Rng& rng) {
  std::vector<Point> pts(static_cast<std::size_t>(count));
  for (auto& p : pts) {
    p.x = rng.uniform();
    p.y = rng.uniform();
  }
  return pts;
}

// Gaussian blobs around `centers`, nodes split evenly in contiguous blocks.
std::vector<Point> gaussian_blobs(int count, const std::vector<Point>& centers, double sigma,
                                  Rng& rng) {
  std::vector<Point> pts;
  pts.reserve(static_cast<std::size_t>(count));
  const auto sizes = cluster_sizes(count, static_cast<int>(centers.size()));
  for (std::size_t k = 0; k < centers.size(); ++k)
    for (int i = 0; i < sizes[k]; ++i)
      pts.push_back({rng.normal(centers[k].x, sigma), rng.normal(centers[k].y, sigma)});
  return pts;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(v[i - 1], v[j]);
  }
}

// Node 0 of `nodes` becomes the depot.
Instance assemble(const std::vector<Point>& nodes, const DemandAssignment& demands,
                  std::string id, std::string meta) {
  Instance inst;
  inst.id = std::move(id);
  inst.meta = std::move(meta);
  inst.capacity = demands.capacity;
  inst.depot = nodes[0];
  inst.customers.reserve(nodes.size() - 1);
  for (std::size_t i = 1; i < nodes.size(); ++i)
    inst.customers.push_back({nodes[i], demands.demands[i - 1]});
  return inst;
}

std::vector<Point> gaussian_mixture_nodes(const DistributionSpec& spec, Rng& rng) {
  const int n = spec.size;
  std::vector<Point> centers(static_cast<std::size_t>(spec.clusters));
  for (auto& c : centers) {
    c.x = rng.uniform(0.0, spec.scale);
    c.y = rng.uniform(0.0, spec.scale);
  }
  // Depot from a uniformly chosen cluster, customers in even blocks.
  const auto& dc = centers[static_cast<std::size_t>(rng.uniform_int(0, spec.clusters - 1))];
  std::vector<Point> nodes;
  nodes.reserve(static_cast<std::size_t>(n) + 1);
  nodes.push_back({rng.normal(dc.x, 1.0), rng.normal(dc.y, 1.0)});
  auto customers = gaussian_blobs(n, centers, 1.0, rng);
  nodes.insert(nodes.end(), customers.begin(), customers.end());
  geometry::min_max_normalize(nodes);
  return nodes;
}

std::vector<Point> random_centers(int count, double lo, double hi, Rng& rng) {
  std::vector<Point> centers(static_cast<std::size_t>(count));
  for (auto& c : centers) c = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
  return centers;
}

std::vector<Point> test_family_nodes(DistKind kind, int count, Rng& rng) {
  switch (kind) {
    case DistKind::kCluster: {
      const int c = static_cast<int>(rng.uniform_int(3, 7));
      auto centers = random_centers(c, 0.0, 1.0, rng);
      auto pts = gaussian_blobs(count, centers, kClusterSigma, rng);
      shuffle(pts, rng);
      geometry::min_max_normalize(pts);
      return pts;
    }
    case DistKind::kExpansion: {
      auto pts = uniform_points(count, rng);
      const Point focus{rng.uniform(), rng.uniform()};
      const double radius = rng.uniform(0.1, 0.4);
      const double r = rng.uniform(0.5, 1.5);
      geometry::expand(pts, focus, radius, 1.0 + r);
      return pts;
    }
    case DistKind::kExplosion: {
      auto pts = uniform_points(count, rng);
      const Point focus{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
      const double radius = rng.uniform(0.1, 0.3);
      geometry::explode(pts, focus, radius, rng);
      return pts;
    }
    case DistKind::kImplosion: {
      auto pts = uniform_points(count, rng);
      const Point focus{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
      double radius = rng.uniform(0.2, 0.4);
      // The disc must capture at least one point.
      double nearest = std::numeric_limits<double>::infinity();
      for (auto p : pts) nearest = std::min(nearest, distance(p, focus));
      radius = std::max(radius, nearest * 1.000001);
      geometry::implode(pts, focus, radius, kImplosionFactor);
      return pts;
    }
    case DistKind::kGrid: {
      const int k = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
      std::vector<Point> lattice;
      lattice.reserve(static_cast<std::size_t>(k) * static_cast<std::size_t>(k));
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
          lattice.push_back({(i + 0.5) / k + rng.uniform(-kGridJitter, kGridJitter),
                             (j + 0.5) / k + rng.uniform(-kGridJitter, kGridJitter)});
      shuffle(lattice, rng);
      lattice.resize(static_cast<std::size_t>(count));
      geometry::clamp_unit(lattice);
      return lattice;
    }
    case DistKind::kMixed: {
      const int n_uniform = count / 2;
      auto pts = uniform_points(n_uniform, rng);
      const int c = static_cast<int>(rng.uniform_int(3, 7));
      auto centers = random_centers(c, 0.1, 0.9, rng);
      auto blobs = gaussian_blobs(count - n_uniform, centers, kClusterSigma, rng);
      pts.insert(pts.end(), blobs.begin(), blobs.end());
      geometry::clamp_unit(pts);
      shuffle(pts, rng);
      return pts;
    }
    default:
      throw Error(ErrorCode::kUnknownKind,
                  "not a test distribution: " + std::string(kind_name(kind)));
  }
}

}  // namespace

std::string_view kind_name(DistKind kind) {
  for (const auto& k : kKindNames)
    if (k.kind == kind) return k.name;
  return "unknown";
}

DistKind parse_kind(std::string_view name) {
  const auto key = lower(name);
  for (const auto& k : kKindNames)
    if (key == k.name || key == lower(k.code)) return k.kind;
  if (key == "gaussian_mixture") return DistKind::kGaussianMixture;
  throw Error(ErrorCode::kUnknownKind, "unknown distribution kind '" + std::string(name) + "'");
}

bool is_test_kind(DistKind kind) {
  return kind != DistKind::kUniform && kind != DistKind::kGaussianMixture;
}

DistributionSpec DistributionSpec::geometric(int clusters, int scale, int size) {
  DistributionSpec spec;
  spec.size = size;
  if (clusters == 0 && scale == 0) {
    spec.kind = DistKind::kUniform;
  } else {
    spec.kind = DistKind::kGaussianMixture;
    spec.clusters = clusters;
    spec.scale = scale;
  }
  return spec;
}

std::string DistributionSpec::label() const {
  if (kind == DistKind::kGaussianMixture)
    return "GM" + std::to_string(clusters) + "_" + std::to_string(scale);
  for (const auto& k : kKindNames)
    if (k.kind == kind) return std::string(k.code);
  return "?";
}

void DistributionSpec::validate() const {
  if (size < 1 || size > 10000)
    throw Error(ErrorCode::kConfig, "distribution size must be in [1, 10000], got " +
                                        std::to_string(size));
  if (kind == DistKind::kGaussianMixture && (clusters < 1 || scale < 1))
    throw Error(ErrorCode::kConfig, "gaussian mixture needs c >= 1 and l >= 1");
}

int capacity_for(int n) { return 30 + (n + 4) / 5; }

DemandAssignment assign_demands(int n, Rng& rng) {
  DemandAssignment out;
  out.capacity = capacity_for(n);
  out.demands.resize(static_cast<std::size_t>(n));
  for (auto& d : out.demands) d = static_cast<int>(rng.uniform_int(1, 9));
  return out;
}

std::vector<int> cluster_sizes(int n, int clusters) {
  std::vector<int> sizes(static_cast<std::size_t>(clusters), n / clusters);
  for (int k = 0; k < n % clusters; ++k) ++sizes[static_cast<std::size_t>(k)];
  return sizes;
}

Instance gen_instance(const DistributionSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto label = spec.label();
  Rng base = Rng::stream(seed, {"instance", label, std::to_string(spec.size), spec.stream});
  Rng coord_rng = base.fork("coords");
  Rng demand_rng = base.fork("demands");

  std::vector<Point> nodes;
  switch (spec.kind) {
    case DistKind::kUniform:
      nodes = uniform_points(spec.size + 1, coord_rng);
      break;
    case DistKind::kGaussianMixture:
      nodes = gaussian_mixture_nodes(spec, coord_rng);
      break;
    default:
      nodes = test_family_nodes(spec.kind, spec.size + 1, coord_rng);
      break;
  }
  const auto demands = assign_demands(spec.size, demand_rng);
  return assemble(nodes, demands,
                  label + "-n" + std::to_string(spec.size) + "-s" + std::to_string(seed), label);
}

Instance gen_test_instance(std::string_view kind, int n, std::uint64_t seed) {
  DistributionSpec spec;
  spec.kind = parse_kind(kind);
  if (!is_test_kind(spec.kind))
    throw Error(ErrorCode::kUnknownKind, "not a test distribution: " + std::string(kind));
  spec.size = n;
  spec.stream = "test";
  return gen_instance(spec, seed);
}

std::vector<int> paper_training_sizes() {
  std::vector<int> sizes;
  for (int n = 50; n <= 200; n += 5) sizes.push_back(n);
  return sizes;
}

std::vector<int> desk_training_sizes() { return {10, 15, 20}; }

std::vector<DistributionSpec> training_schedule(std::span<const int> sizes) {
  std::vector<DistributionSpec> out;
  out.reserve(sizes.size() * kGeometricSettings.size());
  for (int n : sizes)
    for (auto [c, l] : kGeometricSettings) {
      auto spec = DistributionSpec::geometric(c, l, n);
      spec.stream = "train";
      out.push_back(spec);
    }
  return out;
}

std::vector<DistributionSpec> training_schedule() {
  const auto sizes = paper_training_sizes();
  return training_schedule(sizes);
}

const DistributionSpec& schedule_entry(std::span<const DistributionSpec> schedule, int epoch) {
  if (schedule.empty() || epoch < 1)
    throw Error(ErrorCode::kOutOfRange, "schedule_entry needs epoch >= 1 and a nonempty schedule");
  return schedule[static_cast<std::size_t>(epoch - 1) % schedule.size()];
}

Point dihedral(int transform, Point p) {
  const double x = p.x, y = p.y;
  switch (transform) {
    case 0: return {x, y};
    case 1: return {y, x};
    case 2: return {x, 1.0 - y};
    case 3: return {y, 1.0 - x};
    case 4: return {1.0 - x, y};
    case 5: return {1.0 - y, x};
    case 6: return {1.0 - x, 1.0 - y};
    case 7: return {1.0 - y, 1.0 - x};
    default:
      throw Error(ErrorCode::kOutOfRange, "dihedral transform index must be in [0, 8)");
  }
}

Point dihedral_inverse(int transform, Point p) {
  // 3 and 5 are the quarter turns; every other member is an involution.
  if (transform == 3) return dihedral(5, p);
  if (transform == 5) return dihedral(3, p);
  return dihedral(transform, p);
}

std::array<Instance, 8> augment_x8(const Instance& instance) {
  std::array<Instance, 8> out;
  for (int t = 0; t < 8; ++t) {
    auto& copy = out[static_cast<std::size_t>(t)];
    copy = instance;
    if (t == 0) continue;
    copy.depot = dihedral(t, instance.depot);
    for (auto& c : copy.customers) c.pos = dihedral(t, c.pos);
  }
  return out;
}

namespace geometry {

void clamp_unit(std::vector<Point>& points) {
  for (auto& p : points) {
    p.x = std::clamp(p.x, 0.0, 1.0);
    p.y = std::clamp(p.y, 0.0, 1.0);
  }
}

void min_max_normalize(std::vector<Point>& points) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (auto p : points) {
    lo = std::min({lo, p.x, p.y});
    hi = std::max({hi, p.x, p.y});
  }
  const double span = hi - lo;
  if (!(span > 0.0)) {
    for (auto& p : points) p = {0.0, 0.0};
    return;
  }
  for (auto& p : points) {
    p.x = (p.x - lo) / span;
    p.y = (p.y - lo) / span;
  }
  clamp_unit(points);
}

void implode(std::vector<Point>& points, Point focus, double radius, double factor) {
  for (auto& p : points)
    if (distance(p, focus) < radius)
      p = {focus.x + factor * (p.x - focus.x), focus.y + factor * (p.y - focus.y)};
}

void expand(std::vector<Point>& points, Point focus, double radius, double factor) {
  for (auto& p : points)
    if (distance(p, focus) < radius)
      p = {focus.x + factor * (p.x - focus.x), focus.y + factor * (p.y - focus.y)};
  clamp_unit(points);
}

void explode(std::vector<Point>& points, Point focus, double radius, Rng& rng) {
  for (auto& p : points) {
    const double d = distance(p, focus);
    if (d >= radius) continue;
    double angle = std::atan2(p.y - focus.y, p.x - focus.x);
    if (d == 0.0) angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ring = radius + std::abs(rng.normal(0.0, kExplosionRingNoise));
    p = {focus.x + ring * std::cos(angle), focus.y + ring * std::sin(angle)};
  }
  clamp_unit(points);
}

}  // namespace geometry

}  // namespace promptroute
