#pragma once

// Demonstration scenes: the Mandelbrot set on a planar hexagon made of two
// quadtrees, and random spherical shells in the unit cube.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <set>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "octray/bytes.hpp"
#include "octray/forest.hpp"
#include "octray/geometry.hpp"
#include "octray/integrators.hpp"
#include "octray/pipeline.hpp"
#include "octray/runtime.hpp"

namespace octray {

// ===========================================================================
// Mandelbrot

/// Escape iteration of z -> z^2 + c from z = 0, divided by max_iter; 1 if
/// the orbit stays within radius 2.
inline double mandelbrot_value(std::complex<double> c, int max_iter) {
  if (max_iter < 1) throw std::invalid_argument("max_iter must be at least 1");
  std::complex<double> z = 0;
  for (int n = 1; n <= max_iter; ++n) {
    z = z * z + c;
    if (std::norm(z) > 4.0) return static_cast<double>(n) / max_iter;
  }
  return 1.0;
}

inline bool mandelbrot_refine_flag(const std::array<double, 4>& v) {
  return !(v[0] == v[1] && v[0] == v[2] && v[0] == v[3]);
}

/// Hexagon outline, counterclockwise from the lower left.
inline std::array<Vec3, 6> hexagon_corners() {
  return {Vec3{-2.3, -0.75, 0}, Vec3{-0.25, -1.8, 0}, Vec3{1.3, -1.0, 0},
          Vec3{1.3, 1.0, 0},    Vec3{-0.25, 1.8, 0},  Vec3{-2.3, 0.75, 0}};
}

/// Two bilinear quadtrees; tree 0 is the left half, and its t1 = 1 edge is
/// tree 1's t1 = 0 edge.
inline std::vector<ControlPointGrid> hexagon_geometry() {
  const auto h = hexagon_corners();
  auto grid = [](int id, Vec3 a, Vec3 b, Vec3 c, Vec3 d) {
    ControlPointGrid g{id, 2, 1, std::vector<Vec3>(4)};
    g.at(0, 0) = a;
    g.at(1, 0) = b;
    g.at(0, 1) = c;
    g.at(1, 1) = d;
    return g;
  };
  return {grid(0, h[0], h[1], h[5], h[4]), grid(1, h[1], h[2], h[4], h[3])};
}

struct MandelbrotParams {
  int max_iter = 30;
  int min_level = 2;
  int max_level = 5;
  int cycles = -1;  ///< refinement passes; negative means max_level - min_level

  void validate() const {
    if (max_iter < 1) throw std::invalid_argument("max_iter must be at least 1");
    if (min_level < 0 || max_level < min_level || max_level > 12)
      throw std::invalid_argument("mandelbrot levels must satisfy 0 <= min <= max <= 12");
  }
  int refinement_cycles() const { return cycles < 0 ? max_level - min_level : cycles; }
};

/// Values at the element corners in patch order (0,0), (1,0), (0,1), (1,1).
struct MandelbrotData {
  std::array<double, 4> v{};
};

namespace detail {

/// Lookup of leaves and vertex values on the two-tree hexagon mesh, with
/// coordinates in finest-level units.
class HexagonMesh {
 public:
  static constexpr int kDim = 2;

  HexagonMesh(const std::vector<LeafKey>& leaves, const std::vector<ControlPointGrid>& trees, int max_iter)
      : leaves_(&leaves), trees_(&trees), max_iter_(max_iter) {}

  static std::int64_t extent() { return std::int64_t{1} << max_level(kDim); }

  /// The leaf covering the finest cell (x, y) of `tree`, following the shared
  /// edge between the trees; null outside the domain.
  const LeafKey* cell(int tree, std::int64_t x, std::int64_t y) const {
    const auto E = extent();
    if (y < 0 || y >= E) return nullptr;
    if (x < 0) {
      if (tree != 1) return nullptr;
      tree = 0;
      x += E;
    } else if (x >= E) {
      if (tree != 0) return nullptr;
      tree = 1;
      x -= E;
    }
    const Position p{tree, octree::interleave(kDim, {static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y), 0})};
    auto it = std::upper_bound(leaves_->begin(), leaves_->end(), p,
                               [](const Position& a, const LeafKey& k) { return a < k.position(); });
    if (it == leaves_->begin()) return nullptr;
    --it;
    if (!(p < detail::end_of(kDim, *it))) return nullptr;
    return &*it;
  }

  /// Value at a mesh vertex; hanging vertices interpolate their coarse edge.
  double value(int tree, std::int64_t x, std::int64_t y) {
    const auto E = extent();
    if (tree == 1 && x == 0) {
      tree = 0;
      x = E;
    }
    const auto key = std::make_tuple(tree, x, y);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    for (int dy = -1; dy <= 0; ++dy)
      for (int dx = -1; dx <= 0; ++dx) {
        const LeafKey* q = cell(tree, x + dx, y + dy);
        if (!q) continue;
        // the vertex in q's tree coordinates
        std::int64_t px = x, py = y;
        if (q->tree != tree) px += q->tree == 1 ? -E : E;
        const auto a = octree::anchor(kDim, *q);
        const std::int64_t ax = a[0], ay = a[1];
        const std::int64_t s = std::int64_t{1} << (max_level(kDim) - q->level);
        const bool on_x = px == ax || px == ax + s, on_y = py == ay || py == ay + s;
        if (on_x && on_y) continue;
        double v;
        if (on_x) {
          v = 0.5 * (value(q->tree, px, ay) + value(q->tree, px, ay + s));
        } else {
          v = 0.5 * (value(q->tree, ax, py) + value(q->tree, ax + s, py));
        }
        cache_[key] = v;
        return v;
      }
    const auto& g = (*trees_)[static_cast<std::size_t>(tree)];
    const double t1 = static_cast<double>(x) / static_cast<double>(E);
    const double t2 = static_cast<double>(y) / static_cast<double>(E);
    const Vec3 p = (1 - t2) * ((1 - t1) * g.at(0, 0) + t1 * g.at(1, 0)) + t2 * ((1 - t1) * g.at(0, 1) + t1 * g.at(1, 1));
    const double v = mandelbrot_value({p.x, p.y}, max_iter_);
    cache_[key] = v;
    return v;
  }

  std::array<double, 4> corners(const LeafKey& k) {
    const auto a = octree::anchor(kDim, k);
    const std::int64_t s = std::int64_t{1} << (max_level(kDim) - k.level);
    const std::int64_t x = a[0], y = a[1];
    return {value(k.tree, x, y), value(k.tree, x + s, y), value(k.tree, x, y + s), value(k.tree, x + s, y + s)};
  }

 private:
  const std::vector<LeafKey>* leaves_;
  const std::vector<ControlPointGrid>* trees_;
  int max_iter_;
  std::map<std::tuple<int, std::int64_t, std::int64_t>, double> cache_;
};

inline std::vector<LeafKey> uniform_keys(int dim, int num_trees, int level) {
  std::vector<LeafKey> out;
  const std::uint64_t n = std::uint64_t{1} << (dim * level);
  for (std::int32_t t = 0; t < num_trees; ++t)
    for (std::uint64_t m = 0; m < n; ++m) out.push_back({t, level, m * octree::span(dim, level)});
  return out;
}

inline void refine_keys(int dim, std::vector<LeafKey>& leaves, const std::vector<char>& flag) {
  std::vector<LeafKey> out;
  out.reserve(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (flag[i]) {
      for (int c = 0; c < (1 << dim); ++c) out.push_back(octree::child(dim, leaves[i], c));
    } else {
      out.push_back(leaves[i]);
    }
  }
  leaves = std::move(out);
}

}  // namespace detail

/// Refines until no face neighbors differ by more than one level. Each pass
/// looks up the four face neighbors of every leaf by finest-cell key.
inline void balance_hexagon(std::vector<LeafKey>& leaves, const std::vector<ControlPointGrid>& trees) {
  constexpr int dim = 2;
  for (;;) {
    detail::HexagonMesh mesh(leaves, trees, 1);
    std::set<LeafKey> coarse;
    for (const auto& k : leaves) {
      const auto a = octree::anchor(dim, k);
      const std::int64_t s = std::int64_t{1} << (max_level(dim) - k.level);
      const std::int64_t x = a[0], y = a[1];
      for (auto [cx, cy] : {std::pair{x - 1, y}, std::pair{x + s, y}, std::pair{x, y - 1}, std::pair{x, y + s}})
        if (const LeafKey* q = mesh.cell(k.tree, cx, cy); q && q->level < k.level - 1) coarse.insert(*q);
    }
    if (coarse.empty()) return;
    std::vector<char> flag(leaves.size());
    for (std::size_t i = 0; i < leaves.size(); ++i) flag[i] = coarse.count(leaves[i]) ? 1 : 0;
    detail::refine_keys(dim, leaves, flag);
  }
}

/// Every rank builds the same refined, balanced mesh; leaves carry their
/// corner values.
inline std::vector<Leaf<MandelbrotData>> build_mandelbrot_leaves(const MandelbrotParams& p) {
  p.validate();
  const auto trees = hexagon_geometry();
  auto keys = detail::uniform_keys(2, 2, p.min_level);
  for (int c = 0; c < p.refinement_cycles(); ++c) {
    detail::HexagonMesh mesh(keys, trees, p.max_iter);
    std::vector<char> flag(keys.size());
    bool any = false;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      flag[i] = keys[i].level < p.max_level && mandelbrot_refine_flag(mesh.corners(keys[i]));
      any = any || flag[i];
    }
    if (!any) break;
    detail::refine_keys(2, keys, flag);
    balance_hexagon(keys, trees);
  }
  detail::HexagonMesh mesh(keys, trees, p.max_iter);
  std::vector<Leaf<MandelbrotData>> out;
  out.reserve(keys.size());
  for (const auto& k : keys) out.push_back({k, true, MandelbrotData{mesh.corners(k)}});
  return out;
}

/// Instance 0 is opaque grey to white; odd instances are translucent with
/// values just below the maximum emphasized in yellow.
inline SurfaceMaterial mandelbrot_material(double v, int instance, int max_iter) {
  SurfaceMaterial m;
  if (instance % 2 == 0) {
    m.A_s = {0, 0, 0};
    m.I_s.fill(0.6 + 0.4 * v);
  } else {
    const double d = (1 - v) * max_iter;
    const double w = std::exp(-0.5 * d * d);
    m.A_s.fill(0.85 - 0.5 * w);
    m.I_s = {w, w, 0.3 * (1 - w)};
  }
  return m;
}

struct MandelbrotScene {
  using Data = MandelbrotData;

  MandelbrotParams params;
  std::vector<ControlPointGrid> grids = hexagon_geometry();

  int dim() const { return 2; }
  const std::vector<ControlPointGrid>& trees() const { return grids; }

  SurfaceMaterial material(const Data& d, double t1, double t2, int instance) const {
    const double v = (1 - t2) * ((1 - t1) * d.v[0] + t1 * d.v[1]) + t2 * ((1 - t1) * d.v[2] + t1 * d.v[3]);
    return mandelbrot_material(v, instance, params.max_iter);
  }

  static void marshal(const Data& d, ByteWriter& w) {
    for (double x : d.v) w.put(x);
  }
  static Data unmarshal(ByteReader& r) {
    Data d;
    for (double& x : d.v) x = r.get<double>();
    return d;
  }
};

inline Forest<MandelbrotData> build_mandelbrot_forest(const MandelbrotParams& p, int rank, int num_ranks) {
  return Forest<MandelbrotData>::from_replicated(2, 2, build_mandelbrot_leaves(p), rank, num_ranks);
}

/// Placement of a look_at camera.
struct ViewSpec {
  Vec3 eye, target, up{0, 0, 1};
  double near = 1.0, far = 20.0;
  double fov_y = 0.8;  ///< radians

  Camera camera(int w, int h) const { return Camera::look_at(eye, target, up, near, far, fov_y, w, h); }
};

/// A top view symmetric about the real axis and an oblique view.
inline std::vector<ViewSpec> mandelbrot_views() {
  return {{{-0.5, 0, 4}, {-0.5, 0, 0}, {0, 1, 0}, 1.0, 20.0, 2 * std::atan(2.0 / 4)},
          {{-0.5, -3.4, 3.0}, {-0.5, 0, 0}, {0, 0, 1}, 1.0, 20.0, 2 * std::atan(1.9 / 4.5)}};
}

/// The top view gets a checker skybox, the oblique view a dark one.
inline std::vector<ImageInstance> mandelbrot_instances(int w, int h, const std::vector<ViewSpec>& views = mandelbrot_views()) {
  if (views.size() != 2) throw std::invalid_argument("the mandelbrot scene renders two views");
  ImageInstance top;
  top.id = 0;
  top.camera = views[0].camera(w, h);
  top.background.checker_cells = 8;
  ImageInstance side;
  side.id = 1;
  side.camera = views[1].camera(w, h);
  side.background.color = {0.04, 0.04, 0.1};
  return {top, side};
}

// ===========================================================================
// Spheres

struct Sphere {
  std::uint64_t id = 0;
  Vec3 center;
  double radius = 0;
  friend bool operator==(const Sphere&, const Sphere&) = default;
};

struct SphereParams {
  double s0 = 1e-4, s1 = 1e-2;  ///< cross section (great-disk area) range
  double epsilon = 0.2;         ///< shell half width relative to the radius
  double density = 0.025;       ///< element cross section per unit face area
  double opacity = 1.5;         ///< optical depth of one shell crossing along its normal
  int min_level = 2, max_level = 5;
  std::uint64_t seed = 1;
  std::array<double, kChannels> small_color{0.3, 0.6, 1.0};
  std::array<double, kChannels> large_color{1.0, 0.5, 0.15};

  void validate() const {
    if (!(s0 > 0) || !(s1 > s0)) throw std::invalid_argument("sphere cross sections must satisfy 0 < s0 < s1");
    if (!(epsilon > 0) || !(epsilon < 1)) throw std::invalid_argument("epsilon must lie in (0, 1)");
    if (!(density >= 0)) throw std::invalid_argument("density must be >= 0");
    if (!(opacity > 0)) throw std::invalid_argument("opacity must be positive");
    if (min_level < 0 || max_level < min_level || max_level > 10)
      throw std::invalid_argument("sphere levels must satisfy 0 <= min <= max <= 10");
  }
};

/// Mean of s under the density proportional to 1/s on [s0, s1].
inline double expected_cross_section(double s0, double s1) {
  if (!(s0 > 0) || !(s1 > s0)) throw std::invalid_argument("expected_cross_section: need 0 < s0 < s1");
  return (s1 - s0) / std::log1p((s1 - s0) / s0);
}

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t element_seed(std::uint64_t seed, std::int32_t tree, int level, std::uint64_t morton) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(tree)));
  h = mix64(h ^ static_cast<std::uint64_t>(level));
  return mix64(h ^ morton);
}

/// Uniform on [0, 1) from the top 53 bits.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Poisson deviate: product of uniforms for small means, rejection against
/// a Lorentzian otherwise.
inline std::uint64_t poisson_sample(double lambda, std::mt19937_64& rng) {
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw std::invalid_argument("poisson_sample: bad mean");
  if (lambda == 0) return 0;
  if (lambda < 30) {
    const double g = std::exp(-lambda);
    std::uint64_t k = 0;
    double t = uniform01(rng);
    while (t > g) {
      ++k;
      t *= uniform01(rng);
    }
    return k;
  }
  const double sq = std::sqrt(2 * lambda), alxm = std::log(lambda);
  const double g = lambda * alxm - std::lgamma(lambda + 1);
  for (;;) {
    double y, em;
    do {
      y = std::tan(std::numbers::pi * uniform01(rng));
      em = sq * y + lambda;
    } while (em < 0);
    em = std::floor(em);
    const double t = 0.9 * (1 + y * y) * std::exp(em * alxm - std::lgamma(em + 1) - g);
    if (uniform01(rng) <= t) return static_cast<std::uint64_t>(em);
  }
}

/// Cross section drawn with density proportional to 1/s on [s0, s1].
inline double sample_cross_section(double s0, double s1, std::mt19937_64& rng) {
  return s0 * std::pow(s1 / s0, uniform01(rng));
}

/// Spheres of one element with box [lo, lo + size]: Poisson count with mean
/// C / E, ids id_base + k.
inline std::vector<Sphere> populate_element(double C, double E, const SphereParams& p, Vec3 lo, double size,
                                            std::mt19937_64& rng, std::uint64_t id_base) {
  if (!(C >= 0) || !(E > 0)) throw std::invalid_argument("populate_element: bad cross sections");
  const auto n = poisson_sample(C / E, rng);
  std::vector<Sphere> out;
  for (std::uint64_t k = 0; k < n; ++k) {
    Sphere s;
    s.id = id_base + k;
    s.radius = std::sqrt(sample_cross_section(p.s0, p.s1, rng) / std::numbers::pi);
    for (int a = 0; a < 3; ++a) s.center[a] = lo[a] + size * uniform01(rng);
    out.push_back(s);
  }
  return out;
}

/// Whether the shell between (1 - eps) r and (1 + eps) r meets the box.
inline bool shell_meets_box(const Sphere& s, double eps, Vec3 lo, Vec3 hi) {
  double dmin = 0, dmax = 0;
  for (int a = 0; a < 3; ++a) {
    const double c = s.center[a];
    const double near = std::clamp(c, lo[a], hi[a]) - c;
    const double far = std::max(std::abs(c - lo[a]), std::abs(c - hi[a]));
    dmin += near * near;
    dmax += far * far;
  }
  const double r0 = (1 - eps) * s.radius, r1 = (1 + eps) * s.radius;
  return dmin <= r1 * r1 && dmax >= r0 * r0;
}

inline bool sphere_refine_flag(Vec3 lo, Vec3 hi, std::span<const Sphere> spheres, double eps) {
  const double edge = std::min({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
  for (const auto& s : spheres)
    if (edge >= 0.5 * eps * s.radius && shell_meets_box(s, eps, lo, hi)) return true;
  return false;
}

inline std::array<double, kChannels> sphere_color(const Sphere& s, const SphereParams& p) {
  const double area = std::numbers::pi * s.radius * s.radius;
  const double u = std::clamp(std::log(area / p.s0) / std::log(p.s1 / p.s0), 0.0, 1.0);
  std::array<double, kChannels> c;
  for (int k = 0; k < kChannels; ++k) c[k] = (1 - u) * p.small_color[k] + u * p.large_color[k];
  return c;
}

/// Absorption peaks on each sphere surface and falls smoothly to zero at the
/// shell boundary; emission is the sphere color times absorption.
inline ChannelCoefficients sphere_coefficients(std::span<const Sphere> spheres, Vec3 x, const SphereParams& p) {
  ChannelCoefficients out{};
  for (const auto& s : spheres) {
    const double width = p.epsilon * s.radius;
    const double d = norm(x - s.center) - s.radius;
    if (std::abs(d) >= width) continue;
    const double q = 1 - (d / width) * (d / width);
    const double beta = p.opacity / width * q * q * q;
    const auto col = sphere_color(s, p);
    for (int k = 0; k < kChannels; ++k) {
      out[k].beta += beta;
      out[k].gamma += col[k] * beta;
    }
  }
  return out;
}

/// The coefficients along the line origin + x direction.
inline CoefficientField sphere_field(std::vector<Sphere> spheres, const SphereParams& p, Vec3 origin, Vec3 direction) {
  return CoefficientField([spheres = std::move(spheres), p, origin, direction](double x) {
    return sphere_coefficients(spheres, origin + x * direction, p);
  });
}

struct SphereData {
  std::vector<Sphere> spheres;  ///< sorted by id
};

namespace detail {

inline void put_sphere(ByteWriter& w, const Sphere& s) {
  w.put(s.id);
  w.put(s.center.x);
  w.put(s.center.y);
  w.put(s.center.z);
  w.put(s.radius);
}

inline Sphere get_sphere(ByteReader& r) {
  Sphere s;
  s.id = r.get<std::uint64_t>();
  s.center.x = r.get<double>();
  s.center.y = r.get<double>();
  s.center.z = r.get<double>();
  s.radius = r.get<double>();
  return s;
}

inline std::pair<Vec3, Vec3> node_box(const ControlPointGrid& g, const LagrangeBasis& basis, const LeafKey& k) {
  const auto b = element_aabb(g, basis, octree::subcube(3, k));
  return {b.lo, b.hi};
}

}  // namespace detail

inline constexpr Tag kTagSpheres = 0x0200;

/// Sends each held sphere to every rank owning an element its shell meets,
/// found by descending the partition with shell/box pruning. Returns the
/// spheres whose shell meets a local element, sorted by id and unique.
template <class Payload>
std::vector<Sphere> assign_spheres(const Forest<Payload>& f, const std::vector<ControlPointGrid>& trees,
                                   const std::vector<Sphere>& held, double eps, Comm& comm) {
  const int P = comm.size(), me = comm.rank(), dim = f.dim();
  if (dim != 3) throw std::invalid_argument("assign_spheres: volume forest required");
  std::vector<LagrangeBasis> bases;
  for (const auto& g : trees) bases.emplace_back(g.degree);
  auto box = [&](const LeafKey& k) {
    return detail::node_box(trees[static_cast<std::size_t>(k.tree)], bases[static_cast<std::size_t>(k.tree)], k);
  };

  std::vector<std::vector<Sphere>> out(static_cast<std::size_t>(P));
  for (const auto& s : held) {
    std::set<int> dest;
    search_partition(
        dim, f.num_trees(), f.markers(),
        [&](const LeafKey& node, int, int) {
          const auto [lo, hi] = box(node);
          return shell_meets_box(s, eps, lo, hi);
        },
        [&](const LeafKey&, int rank) { dest.insert(rank); });
    for (int q : dest) out[static_cast<std::size_t>(q)].push_back(s);
  }

  ByteWriter cw;
  for (const auto& v : out) cw.put<std::uint64_t>(v.size());
  const auto counts = comm.allgather(cw.take());
  std::vector<RecvHandle> recvs;
  for (int p = 0; p < P; ++p) {
    if (p == me) continue;
    ByteReader r(counts[static_cast<std::size_t>(p)]);
    std::uint64_t n = 0;
    for (int q = 0; q <= me; ++q) n = r.get<std::uint64_t>();
    if (n > 0) recvs.push_back(comm.post_recv(p, kTagSpheres));
  }
  for (int q = 0; q < P; ++q) {
    const auto& v = out[static_cast<std::size_t>(q)];
    if (q == me || v.empty()) continue;
    ByteWriter w;
    w.put_varint(v.size());
    for (const auto& s : v) detail::put_sphere(w, s);
    comm.post_send(q, kTagSpheres, w.take());
  }
  comm.wait_all(recvs);

  std::vector<Sphere> got = std::move(out[static_cast<std::size_t>(me)]);
  for (auto& h : recvs) {
    ByteReader r(h.data);
    const auto n = r.get_varint();
    for (std::uint64_t k = 0; k < n; ++k) got.push_back(detail::get_sphere(r));
    if (!r.done()) r.fail("assign_spheres: trailing bytes");
  }
  std::sort(got.begin(), got.end(), [](const Sphere& a, const Sphere& b) { return a.id < b.id; });
  got.erase(std::unique(got.begin(), got.end(), [](const Sphere& a, const Sphere& b) { return a.id == b.id; }),
            got.end());

  std::vector<Sphere> keep;
  for (const auto& s : got) {
    bool hit = false;
    f.search_local(
        [&](const LeafKey& node) {
          if (hit) return false;
          const auto [lo, hi] = box(node);
          return shell_meets_box(s, eps, lo, hi);
        },
        [&](const Leaf<Payload>& l, std::size_t) {
          if (hit) return;
          const auto [lo, hi] = box(l.key);
          hit = shell_meets_box(s, eps, lo, hi);
        });
    if (hit) keep.push_back(s);
  }
  return keep;
}

struct SphereScene {
  using Data = SphereData;

  SphereParams params;
  std::vector<ControlPointGrid> grids{reference_grid(3, 1, 0)};

  int dim() const { return 3; }
  const std::vector<ControlPointGrid>& trees() const { return grids; }

  ChannelCoefficients coefficients(const Data& d, Vec3 x, int) const { return sphere_coefficients(d.spheres, x, params); }

  static void marshal(const Data& d, ByteWriter& w) {
    w.put_varint(d.spheres.size());
    for (const auto& s : d.spheres) detail::put_sphere(w, s);
  }
  static Data unmarshal(ByteReader& r) {
    Data d;
    const auto n = r.get_varint();
    if (n > r.remaining() / 40) r.fail("sphere list longer than message");
    d.spheres.reserve(static_cast<std::size_t>(n));
    for (std::uint64_t k = 0; k < n; ++k) d.spheres.push_back(detail::get_sphere(r));
    return d;
  }
};

/// Spheres generated by one base element; identical on every rank.
inline std::vector<Sphere> base_element_spheres(const SphereParams& p, const LeafKey& k) {
  const double size = std::ldexp(1.0, -k.level);
  const auto sc = octree::subcube(3, k);
  std::mt19937_64 rng(element_seed(p.seed, k.tree, k.level, k.morton));
  const std::uint64_t index = k.morton / octree::span(3, k.level);
  return populate_element(p.density * size * size, expected_cross_section(p.s0, p.s1), p,
                          {sc.lower[0], sc.lower[1], sc.lower[2]}, size, rng, index << 20);
}

struct SphereBuild {
  Forest<SphereData> forest;
  std::uint64_t generated = 0;  ///< spheres over all ranks
  int cycles = 0;               ///< refinement passes that refined something
};

/// Populates the uniform base level, then refines around shells until the
/// level cap, repartitioning by element count after every pass.
inline SphereBuild build_sphere_forest(const SphereParams& p, Comm& comm) {
  p.validate();
  const int P = comm.size(), me = comm.rank();
  const std::vector<ControlPointGrid> trees{reference_grid(3, 1, 0)};
  const LagrangeBasis basis(1);
  std::vector<Leaf<NoPayload>> base;
  for (const auto& k : detail::uniform_keys(3, 1, p.min_level)) base.push_back({k, true, {}});
  auto f = Forest<NoPayload>::from_replicated(3, 1, std::move(base), me, P);

  std::vector<Sphere> held;
  for (const auto& l : f.leaves())
    for (const auto& s : base_element_spheres(p, l.key)) held.push_back(s);
  SphereBuild out{Forest<SphereData>(3, 1, me, P), 0, 0};
  {
    ByteWriter w;
    w.put<std::uint64_t>(held.size());
    for (const auto& b : comm.allgather(w.take())) out.generated += ByteReader(b).get<std::uint64_t>();
  }

  for (int level = p.min_level; level < p.max_level; ++level) {
    held = assign_spheres(f, trees, held, p.epsilon, comm);
    std::vector<char> flag(f.leaves().size());
    bool any = false;
    for (std::size_t i = 0; i < flag.size(); ++i) {
      const auto& k = f.leaves()[i].key;
      const auto [lo, hi] = detail::node_box(trees[0], basis, k);
      flag[i] = k.level < p.max_level && sphere_refine_flag(lo, hi, held, p.epsilon);
      any = any || flag[i];
    }
    ByteWriter w;
    w.put<std::uint8_t>(any ? 1 : 0);
    bool global = false;
    for (const auto& b : comm.allgather(w.take())) global = global || ByteReader(b).get<std::uint8_t>() != 0;
    if (!global) break;
    ++out.cycles;
    std::vector<LeafKey> keys;
    for (const auto& l : f.leaves()) keys.push_back(l.key);
    detail::refine_keys(3, keys, flag);
    f.leaves().clear();
    for (const auto& k : keys) f.leaves().push_back({k, true, {}});
    const std::vector<std::uint64_t> ones(f.leaves().size(), 1);
    f = repartition<NoPayload>(
        std::move(f), ones, comm, [](const NoPayload&, ByteWriter&) {}, [](ByteReader&) { return NoPayload{}; }, false);
  }

  held = assign_spheres(f, trees, held, p.epsilon, comm);
  for (const auto& l : f.leaves()) {
    const auto [lo, hi] = detail::node_box(trees[0], basis, l.key);
    SphereData d;
    for (const auto& s : held)
      if (shell_meets_box(s, p.epsilon, lo, hi)) d.spheres.push_back(s);
    out.forest.leaves().push_back({l.key, true, std::move(d)});
  }
  out.forest.set_markers(f.markers());
  return out;
}

/// An oblique view of the unit cube.
inline std::vector<ViewSpec> sphere_views() {
  return {{{2.1, -1.5, 1.6}, {0.5, 0.5, 0.5}, {0, 0, 1}, 0.5, 20.0, 2 * std::atan(0.85 / 2.7)}};
}

inline std::vector<ImageInstance> sphere_instances(int w, int h, const std::vector<ViewSpec>& views = sphere_views()) {
  if (views.size() != 1) throw std::invalid_argument("the sphere scene renders one view");
  ImageInstance v;
  v.id = 0;
  v.camera = views[0].camera(w, h);
  v.background.color = {0.02, 0.02, 0.05};
  return {v};
}

}  // namespace octray
