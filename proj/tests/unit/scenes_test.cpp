#include "octray/scenes.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "test_util.hpp"

namespace octray {
namespace {

// ---------------------------------------------------------------------------
// Mandelbrot

// escape count by real arithmetic
double escape_oracle(double cr, double ci, int max_iter) {
  double x = 0, y = 0;
  for (int n = 1; n <= max_iter; ++n) {
    const double nx = x * x - y * y + cr;
    const double ny = 2 * x * y + ci;
    x = nx;
    y = ny;
    if (x * x + y * y > 4) return double(n) / max_iter;
  }
  return 1.0;
}

TEST(Mandelbrot, Examples) {
  EXPECT_EQ(mandelbrot_value({0, 0}, 30), 1.0);
  EXPECT_EQ(mandelbrot_value({-1, 0}, 30), 1.0);
  EXPECT_EQ(mandelbrot_value({1, 0}, 30), 3.0 / 30);
  EXPECT_EQ(mandelbrot_value({2.5, 0}, 30), 1.0 / 30);
  EXPECT_THROW(mandelbrot_value({0, 0}, 0), std::invalid_argument);
}

TEST(Mandelbrot, MatchesDirectIteration) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> re(-2.3, 1.3), im(-1.8, 1.8);
  for (int k = 0; k < 1000; ++k) {
    const double a = re(rng), b = im(rng);
    EXPECT_EQ(mandelbrot_value({a, b}, 30), escape_oracle(a, b, 30));
    // the set is symmetric to the real axis
    EXPECT_EQ(mandelbrot_value({a, b}, 30), mandelbrot_value({a, -b}, 30));
  }
}

TEST(Mandelbrot, RefineFlagExamples) {
  EXPECT_FALSE(mandelbrot_refine_flag({1, 1, 1, 1}));
  EXPECT_TRUE(mandelbrot_refine_flag({1, 1, 1, 29.0 / 30}));
}

TEST(Mandelbrot, RefineFlagExhaustive) {
  std::array<double, 31> v;
  for (int k = 0; k <= 30; ++k) v[k] = k / 30.0;
  std::size_t flagged = 0;
  for (int a = 0; a <= 30; ++a)
    for (int b = 0; b <= 30; ++b)
      for (int c = 0; c <= 30; ++c)
        for (int d = 0; d <= 30; ++d) {
          const bool any_differs = std::set<int>{a, b, c, d}.size() > 1;
          const bool f = mandelbrot_refine_flag({v[a], v[b], v[c], v[d]});
          ASSERT_EQ(f, any_differs);
          flagged += f;
        }
  EXPECT_EQ(flagged, 31u * 31 * 31 * 31 - 31);
}

TEST(Hexagon, CornersAreTheOutline) {
  const auto g = hexagon_geometry();
  ASSERT_EQ(g.size(), 2u);
  const std::vector<Vec3> expect{{-2.3, 0.75, 0}, {-0.25, 1.8, 0}, {1.3, 1, 0},
                                 {-2.3, -0.75, 0}, {-0.25, -1.8, 0}, {1.3, -1, 0}};
  std::vector<Vec3> got;
  for (const auto& t : g)
    for (auto p : t.points) got.push_back(p);
  for (const auto& e : expect) {
    const bool found = std::any_of(got.begin(), got.end(), [&](Vec3 p) { return norm(p - e) == 0; });
    EXPECT_TRUE(found) << e.x << " " << e.y;
  }
}

TEST(Hexagon, SharedEdgeAgrees) {
  const auto g = hexagon_geometry();
  const LagrangeBasis b(1);
  for (int k = 0; k < 10; ++k) {
    const double s = k / 9.0;
    const std::array<double, 2> t0{1.0, s}, t1{0.0, s};
    const Vec3 a = evaluate_geometry(g[0], b, t0), c = evaluate_geometry(g[1], b, t1);
    EXPECT_LE(norm(a - c), 1e-15);
  }
}

TEST(Hexagon, AreaAndOrientation) {
  // shoelace over the outline
  const auto h = hexagon_corners();
  double shoelace = 0;
  for (int k = 0; k < 6; ++k) {
    const auto& p = h[k];
    const auto& q = h[(k + 1) % 6];
    shoelace += p.x * q.y - q.x * p.y;
  }
  shoelace *= 0.5;
  // Jacobian of the bilinear maps, 2x2 Gauss points (exact for bilinear)
  double area = 0;
  const double gp[2] = {0.5 - std::sqrt(3.0) / 6, 0.5 + std::sqrt(3.0) / 6};
  for (const auto& g : hexagon_geometry())
    for (double s : gp)
      for (double t : gp) {
        const Vec3 d1 = (1 - t) * (g.at(1, 0) - g.at(0, 0)) + t * (g.at(1, 1) - g.at(0, 1));
        const Vec3 d2 = (1 - s) * (g.at(0, 1) - g.at(0, 0)) + s * (g.at(1, 1) - g.at(1, 0));
        const double J = d1.x * d2.y - d1.y * d2.x;
        EXPECT_GT(J, 0);
        area += 0.25 * J;
      }
  EXPECT_NEAR(area, shoelace, 1e-12);
}

// whether two leaves of the hexagon share an edge piece; returns their levels
bool share_edge(const LeafKey& a, const LeafKey& b) {
  const std::int64_t E = std::int64_t{1} << max_level(2);
  auto box = [&](const LeafKey& k) {
    const auto an = octree::anchor(2, k);
    const std::int64_t s = std::int64_t{1} << (max_level(2) - k.level);
    const std::int64_t off = k.tree == 1 ? E : 0;
    return std::array<std::int64_t, 4>{an[0] + off, an[1], an[0] + off + s, an[1] + s};
  };
  const auto p = box(a), q = box(b);
  const bool touch_x = p[2] == q[0] || q[2] == p[0];
  const bool touch_y = p[3] == q[1] || q[3] == p[1];
  const bool overlap_y = std::min(p[3], q[3]) > std::max(p[1], q[1]);
  const bool overlap_x = std::min(p[2], q[2]) > std::max(p[0], q[0]);
  return (touch_x && overlap_y) || (touch_y && overlap_x);
}

TEST(MandelbrotMesh, BalancedAndComplete) {
  MandelbrotParams p;
  p.min_level = 1;
  p.max_level = 5;
  const auto leaves = build_mandelbrot_leaves(p);
  // complete: areas add up to two unit squares
  double area = 0;
  for (const auto& l : leaves) area += std::ldexp(1.0, -2 * l.key.level);
  EXPECT_DOUBLE_EQ(area, 2.0);
  int max_seen = 0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    max_seen = std::max(max_seen, int(leaves[i].key.level));
    for (std::size_t j = i + 1; j < leaves.size(); ++j)
      if (share_edge(leaves[i].key, leaves[j].key)) {
        ASSERT_LE(std::abs(leaves[i].key.level - leaves[j].key.level), 1);
      }
  }
  EXPECT_EQ(max_seen, 5);
  for (std::size_t i = 1; i < leaves.size(); ++i) EXPECT_LT(leaves[i - 1].key, leaves[i].key);
}

TEST(MandelbrotMesh, BalanceFixesADeepCorner) {
  const auto trees = hexagon_geometry();
  std::vector<LeafKey> keys{octree::root(0), octree::root(1)};
  // refine tree 1 four times toward its lower left corner, next to tree 0
  for (int k = 0; k < 4; ++k) {
    std::vector<LeafKey> next;
    for (const auto& key : keys) {
      if (key.tree == 1 && key.morton == 0 && key.level == k) {
        for (int c = 0; c < 4; ++c) next.push_back(octree::child(2, key, c));
      } else {
        next.push_back(key);
      }
    }
    keys = next;
  }
  balance_hexagon(keys, trees);
  for (std::size_t i = 0; i < keys.size(); ++i)
    for (std::size_t j = i + 1; j < keys.size(); ++j)
      if (share_edge(keys[i], keys[j])) {
        EXPECT_LE(std::abs(keys[i].level - keys[j].level), 1);
      }
  // tree 0 had to refine next to the shared edge
  EXPECT_GT(std::count_if(keys.begin(), keys.end(), [](const LeafKey& k) { return k.tree == 0; }), 1);
}

TEST(MandelbrotMesh, VertexValues) {
  MandelbrotParams p;
  p.min_level = 2;
  p.max_level = 5;
  const auto leaves = build_mandelbrot_leaves(p);
  const auto h = hexagon_corners();
  const std::int64_t E = std::int64_t{1} << max_level(2);
  // boxes in one coordinate frame spanning both trees
  std::vector<std::array<std::int64_t, 4>> boxes;
  for (const auto& l : leaves) {
    const auto an = octree::anchor(2, l.key);
    const std::int64_t s = std::int64_t{1} << (max_level(2) - l.key.level);
    const std::int64_t off = l.key.tree == 1 ? E : 0;
    boxes.push_back({an[0] + off, an[1], an[0] + off + s, an[1] + s});
  }
  // every leaf agrees on shared vertices
  std::map<std::pair<std::int64_t, std::int64_t>, double> vertex;
  for (std::size_t i = 0; i < leaves.size(); ++i)
    for (int c = 0; c < 4; ++c) {
      const std::pair<std::int64_t, std::int64_t> xy{c & 1 ? boxes[i][2] : boxes[i][0], c >> 1 ? boxes[i][3] : boxes[i][1]};
      auto [it, fresh] = vertex.emplace(xy, leaves[i].payload.v[c]);
      if (!fresh) {
        ASSERT_EQ(it->second, leaves[i].payload.v[c]);
      }
    }
  std::size_t hanging = 0;
  for (const auto& [xy, v] : vertex) {
    const auto [x, y] = xy;
    bool found = false;
    double expect = 0;
    for (const auto& q : boxes) {
      if ((x == q[0] || x == q[2]) && y > q[1] && y < q[3]) {
        expect = 0.5 * (vertex.at({x, q[1]}) + vertex.at({x, q[3]}));
        found = true;
      } else if ((y == q[1] || y == q[3]) && x > q[0] && x < q[2]) {
        expect = 0.5 * (vertex.at({q[0], y}) + vertex.at({q[2], y}));
        found = true;
      }
      if (found) break;
    }
    if (found) {
      ++hanging;
      EXPECT_EQ(v, expect);
      continue;
    }
    // a conforming vertex carries the escape count at its image point
    const int tree = x > E ? 1 : 0;
    const double t1 = double(x - tree * E) / double(E), t2 = double(y) / double(E);
    const auto& a = tree == 0 ? std::array<Vec3, 4>{h[0], h[1], h[5], h[4]} : std::array<Vec3, 4>{h[1], h[2], h[4], h[3]};
    const Vec3 pt = (1 - t2) * ((1 - t1) * a[0] + t1 * a[1]) + t2 * ((1 - t1) * a[2] + t1 * a[3]);
    EXPECT_EQ(v, escape_oracle(pt.x, pt.y, 30)) << x << " " << y;
  }
  EXPECT_GT(hanging, 0u);
}

TEST(MandelbrotMesh, MirrorSymmetric) {
  MandelbrotParams p;
  p.min_level = 1;
  p.max_level = 5;
  const auto leaves = build_mandelbrot_leaves(p);
  std::map<std::tuple<int, int, std::uint32_t, std::uint32_t>, std::array<double, 4>> byAnchor;
  for (const auto& l : leaves) {
    const auto a = octree::anchor(2, l.key);
    byAnchor[{l.key.tree, l.key.level, a[0], a[1]}] = l.payload.v;
  }
  const std::uint32_t E = 1u << max_level(2);
  for (const auto& l : leaves) {
    const auto a = octree::anchor(2, l.key);
    const std::uint32_t s = 1u << (max_level(2) - l.key.level);
    auto it = byAnchor.find({l.key.tree, l.key.level, a[0], E - a[1] - s});
    ASSERT_NE(it, byAnchor.end());
    // mirror swaps the bottom and top corner rows
    EXPECT_EQ(it->second[0], l.payload.v[2]);
    EXPECT_EQ(it->second[1], l.payload.v[3]);
  }
}

TEST(MandelbrotMaterial, Instances) {
  const auto m0 = mandelbrot_material(1.0, 0, 30);
  EXPECT_EQ(m0.A_s[0], 0.0);
  EXPECT_DOUBLE_EQ(m0.I_s[1], 1.0);
  EXPECT_DOUBLE_EQ(mandelbrot_material(0.0, 0, 30).I_s[2], 0.6);
  const auto m1 = mandelbrot_material(1.0, 1, 30);
  EXPECT_DOUBLE_EQ(m1.A_s[0], 0.35);
  EXPECT_EQ(m1.I_s[0], m1.I_s[1]);
  const auto far = mandelbrot_material(0.5, 1, 30);
  EXPECT_NEAR(far.A_s[0], 0.85, 1e-12);
}

// ---------------------------------------------------------------------------
// sphere statistics

TEST(CrossSection, Expected) {
  EXPECT_NEAR(expected_cross_section(1.0, std::exp(1.0)), std::exp(1.0) - 1, 1e-14);
  EXPECT_NEAR(expected_cross_section(2.0, 2.0 * (1 + 1e-10)), 2.0, 1e-9);
  EXPECT_THROW(expected_cross_section(1.0, 1.0), std::invalid_argument);
  std::mt19937_64 rng(1);
  for (int k = 0; k < 100; ++k) {
    const double s0 = std::exp(std::uniform_real_distribution<double>(-10, 0)(rng));
    const double s1 = s0 * std::exp(std::uniform_real_distribution<double>(0.01, 8)(rng));
    const double E = expected_cross_section(s0, s1);
    EXPECT_GT(E, s0);
    EXPECT_LT(E, s1);
    // midpoint rule on the log scale for the integral of s rho(s)
    const int N = 20000;
    double acc = 0;
    const double L = std::log(s1 / s0);
    for (int i = 0; i < N; ++i) {
      const double s = s0 * std::exp(L * (i + 0.5) / N);
      acc += s * (1 / (s * L)) * s * (L / N);
    }
    EXPECT_NEAR(acc / E, 1.0, 1e-6);
  }
}

void poisson_moments(double lambda) {
  std::mt19937_64 rng(17 + std::uint64_t(lambda));
  const int n = 100000;
  double sum = 0, sum2 = 0;
  for (int k = 0; k < n; ++k) {
    const double x = double(poisson_sample(lambda, rng));
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n;
  const double var = (sum2 - n * mean * mean) / (n - 1);
  EXPECT_LE(std::abs(mean - lambda), 3 * std::sqrt(lambda / n)) << lambda;
  // standard error of the sample variance: sqrt((mu4 - sigma^4) / n)
  const double mu4 = lambda * (1 + 3 * lambda);
  EXPECT_LE(std::abs(var - lambda), 3 * std::sqrt((mu4 - lambda * lambda) / n)) << lambda;
}

TEST(Poisson, Moments) {
  poisson_moments(3.0);
  poisson_moments(0.4);
  poisson_moments(50.0);
  poisson_moments(400.0);
}

TEST(Poisson, ZeroMean) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 100; ++k) EXPECT_EQ(poisson_sample(0.0, rng), 0u);
  EXPECT_THROW(poisson_sample(-1.0, rng), std::invalid_argument);
}

TEST(Poisson, SmallMeanProbabilities) {
  // P(0) = e^-lambda for the product-of-uniforms branch
  std::mt19937_64 rng(99);
  const int n = 100000;
  int zeros = 0;
  for (int k = 0; k < n; ++k) zeros += poisson_sample(1.5, rng) == 0;
  const double p = std::exp(-1.5);
  EXPECT_LE(std::abs(zeros / double(n) - p), 3 * std::sqrt(p * (1 - p) / n));
}

TEST(CrossSectionSampler, LogUniformKolmogorovSmirnov) {
  const double s0 = 1e-4, s1 = 1e-2;
  std::mt19937_64 rng(5);
  const int n = 100000;
  std::vector<double> u(n);
  for (auto& x : u) {
    const double s = sample_cross_section(s0, s1, rng);
    ASSERT_GE(s, s0);
    ASSERT_LT(s, s1);
    x = std::log(s / s0) / std::log(s1 / s0);
  }
  std::sort(u.begin(), u.end());
  double D = 0;
  for (int i = 0; i < n; ++i) D = std::max({D, (i + 1.0) / n - u[i], u[i] - double(i) / n});
  EXPECT_LT(D, 1.628 / std::sqrt(double(n)));
}

TEST(PopulateElement, CountsAndPlacement) {
  SphereParams p;
  std::mt19937_64 rng(3);
  EXPECT_TRUE(populate_element(0.0, 1.0, p, {0, 0, 0}, 1.0, rng, 0).empty());
  const double E = expected_cross_section(p.s0, p.s1);
  std::size_t total = 0;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    const auto s = populate_element(2 * E, E, p, {1, 2, 3}, 0.5, rng, 100);
    total += s.size();
    for (std::size_t k = 0; k < s.size(); ++k) {
      EXPECT_EQ(s[k].id, 100 + k);
      for (int a = 0; a < 3; ++a) {
        EXPECT_GE(s[k].center[a], a + 1.0);
        EXPECT_LT(s[k].center[a], a + 1.5);
      }
      const double area = std::numbers::pi * s[k].radius * s[k].radius;
      EXPECT_GE(area, p.s0 * (1 - 1e-12));
      EXPECT_LE(area, p.s1 * (1 + 1e-12));
    }
  }
  EXPECT_NEAR(total / double(trials), 2.0, 3 * std::sqrt(2.0 / trials));
}

TEST(PopulateElement, SeedDeterminesOutput) {
  SphereParams p;
  const LeafKey k{0, 2, 5 * octree::span(3, 2)};
  EXPECT_EQ(base_element_spheres(p, k), base_element_spheres(p, k));
  p.seed = 2;
  SphereParams q;
  EXPECT_NE(element_seed(p.seed, 0, 2, k.morton), element_seed(q.seed, 0, 2, k.morton));
  EXPECT_NE(element_seed(1, 0, 2, 0), element_seed(1, 0, 3, 0));
}

// ---------------------------------------------------------------------------
// shells

double shell_sample_oracle(const Sphere& s, double eps, Vec3 lo, Vec3 hi, bool& meets) {
  // dense grid over the box; distance range reached by the samples
  double dmin = 1e300, dmax = 0;
  const int n = 24;
  for (int a = 0; a <= n; ++a)
    for (int b = 0; b <= n; ++b)
      for (int c = 0; c <= n; ++c) {
        const Vec3 x{lo.x + (hi.x - lo.x) * a / n, lo.y + (hi.y - lo.y) * b / n, lo.z + (hi.z - lo.z) * c / n};
        const double d = norm(x - s.center);
        dmin = std::min(dmin, d);
        dmax = std::max(dmax, d);
      }
  meets = dmin <= (1 + eps) * s.radius && dmax >= (1 - eps) * s.radius;
  return (hi.x - lo.x) * std::sqrt(3.0) / n;
}

TEST(Shell, BoxTestAgreesWithSampling) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  int checked = 0;
  for (int k = 0; k < 400; ++k) {
    const Sphere s{0, {u(rng), u(rng), u(rng)}, 0.05 + 0.3 * u(rng)};
    const double size = 0.05 + 0.3 * u(rng);
    const Vec3 lo{u(rng), u(rng), u(rng)};
    const Vec3 hi = lo + Vec3{size, size, size};
    bool meets = false;
    const double h = shell_sample_oracle(s, 0.1, lo, hi, meets);
    // skip cases within the sampling resolution of the shell boundary
    bool lo_meets = false, hi_meets = false;
    Sphere a = s, b = s;
    a.radius = s.radius - h;
    b.radius = s.radius + h;
    shell_sample_oracle(a, 0.1, lo, hi, lo_meets);
    shell_sample_oracle(b, 0.1, lo, hi, hi_meets);
    if (lo_meets != meets || hi_meets != meets) continue;
    EXPECT_EQ(shell_meets_box(s, 0.1, lo, hi), meets);
    ++checked;
  }
  EXPECT_GT(checked, 300);
}

TEST(SphereRefineFlag, Examples) {
  const Sphere s{0, {0.5, 0.5, 0.5}, 0.2};
  const std::vector<Sphere> v{s};
  EXPECT_FALSE(sphere_refine_flag({3, 3, 3}, {4, 4, 4}, v, 0.1));
  // large element around a surface point
  EXPECT_TRUE(sphere_refine_flag({0.6, 0.4, 0.4}, {0.8, 0.6, 0.6}, v, 0.1));
  // inside the hollow, away from the shell
  EXPECT_FALSE(sphere_refine_flag({0.45, 0.45, 0.45}, {0.55, 0.55, 0.55}, v, 0.1));
  // on the surface but already smaller than eps r / 2 = 0.01
  EXPECT_FALSE(sphere_refine_flag({0.695, 0.495, 0.495}, {0.704, 0.504, 0.504}, v, 0.1));
  EXPECT_TRUE(sphere_refine_flag({0.695, 0.495, 0.495}, {0.706, 0.506, 0.506}, v, 0.1));
}

TEST(SphereField, PeakAndSupport) {
  SphereParams p;
  const Sphere s{0, {0, 0, 0}, 0.1};
  const std::vector<Sphere> v{s};
  const auto on = sphere_coefficients(v, {0.1, 0, 0}, p);
  EXPECT_DOUBLE_EQ(on[0].beta, p.opacity / (p.epsilon * 0.1));
  const auto col = sphere_color(s, p);
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(on[c].gamma, col[c] * on[c].beta);
  const auto far = sphere_coefficients(v, {1, 1, 1}, p);
  for (int c = 0; c < 3; ++c) {
    EXPECT_LT(far[c].beta, 1e-12);
    EXPECT_LT(far[c].gamma, 1e-12);
  }
  EXPECT_EQ(sphere_coefficients(v, {0, 0, 0}, p)[0].beta, 0.0);
}

TEST(SphereField, IntegralThroughCenter) {
  // every shell crossing along the normal has optical depth
  // opacity * 32/35, the integral of (1 - x^2)^3 over [-1, 1]
  SphereParams p;
  const Sphere s{0, {0.3, 0.2, 0.1}, 0.07};
  const Vec3 dir = normalized(Vec3{1, 2, 2});
  const Vec3 start = s.center - 0.2 * dir;
  auto field = sphere_field({s}, p, start, dir);
  IntegratorConfig cfg;
  cfg.scheme = Scheme::gauss2;
  cfg.c_rk = 1e-4;
  // element-sized chords, narrower than the shell, as the renderer sees them
  Segment3 r = identity_segment3();
  for (int k = 0; k < 40; ++k) r = aggregate(segeval(field, 0.01 * k, 0.01 * (k + 1), cfg).seg, r);
  const double tau = 2 * p.opacity * 32.0 / 35.0;
  const auto col = sphere_color(s, p);
  // dense midpoint quadrature oracle of the same transmission
  const int N = 400000;
  double dense = 0;
  for (int i = 0; i < N; ++i) dense += field((i + 0.5) * 0.4 / N)[0].beta * 0.4 / N;
  EXPECT_NEAR(dense, tau, 1e-8);
  for (int c = 0; c < 3; ++c) {
    EXPECT_TRUE(testing::rel_close(r[c].A, std::exp(-tau), 1e-5)) << r[c].A << " vs " << std::exp(-tau);
    // emission is color times absorption, so B = color (1 - A)
    EXPECT_TRUE(testing::rel_close(r[c].B, col[c] * (1 - std::exp(-tau)), 1e-5));
  }
}

// ---------------------------------------------------------------------------
// distribution

TEST(AssignSpheres, SingleRankKeepsEveryShellInTheDomain) {
  Harness h(1);
  h.run([](Comm& c) {
    std::vector<Leaf<NoPayload>> base;
    for (const auto& k : detail::uniform_keys(3, 1, 2)) base.push_back({k, true, {}});
    auto f = Forest<NoPayload>::from_replicated(3, 1, base, 0, 1);
    const std::vector<Sphere> s{{1, {0.5, 0.5, 0.5}, 0.1}, {2, {3, 3, 3}, 0.1}, {0, {0.2, 0.9, 0.4}, 0.3}};
    const auto got = assign_spheres(f, {reference_grid(3, 1)}, s, 0.1, c);
    ASSERT_EQ(got.size(), 2u);
    EXPECT_EQ(got[0].id, 0u);
    EXPECT_EQ(got[1].id, 1u);
  });
}

TEST(AssignSpheres, MatchesAllPairsOracle) {
  for (Backend be : {Backend::threads, Backend::roundrobin}) {
    const int P = 8;
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<Sphere> all;
    for (int k = 0; k < 60; ++k) all.push_back({std::uint64_t(k), {u(gen), u(gen), u(gen)}, 0.01 + 0.15 * u(gen)});
    std::vector<std::vector<Sphere>> got(P);
    std::vector<std::vector<LeafKey>> keys(P);
    Harness h(P, be);
    h.run([&](Comm& c) {
      // mixed levels, spread by uneven weights
      std::vector<Leaf<NoPayload>> leaves;
      for (const auto& k : detail::uniform_keys(3, 1, 2)) {
        if (k.morton / octree::span(3, 2) % 5 == 0) {
          for (int ch = 0; ch < 8; ++ch) leaves.push_back({octree::child(3, k, ch), true, {}});
        } else {
          leaves.push_back({k, true, {}});
        }
      }
      auto f = Forest<NoPayload>::from_replicated(3, 1, leaves, c.rank(), P);
      std::vector<std::uint64_t> w;
      for (const auto& l : f.leaves()) w.push_back(1 + l.key.morton % 7);
      f = repartition<NoPayload>(std::move(f), w, c, [](const NoPayload&, ByteWriter&) {},
                                 [](ByteReader&) { return NoPayload{}; }, false);
      // each rank starts with a different slice of the spheres
      std::vector<Sphere> mine;
      for (const auto& s : all)
        if (int(s.id % P) == c.rank()) mine.push_back(s);
      got[c.rank()] = assign_spheres(f, {reference_grid(3, 1)}, mine, 0.1, c);
      for (const auto& l : f.leaves()) keys[c.rank()].push_back(l.key);
    });
    for (int r = 0; r < P; ++r) {
      std::vector<std::uint64_t> expect;
      for (const auto& s : all) {
        bool hit = false;
        for (const auto& k : keys[r]) {
          const auto sc = octree::subcube(3, k);
          const Vec3 lo{sc.lower[0], sc.lower[1], sc.lower[2]};
          hit = hit || shell_meets_box(s, 0.1, lo, lo + Vec3{sc.size, sc.size, sc.size});
        }
        if (hit) expect.push_back(s.id);
      }
      std::vector<std::uint64_t> ids;
      for (const auto& s : got[r]) ids.push_back(s.id);
      EXPECT_EQ(ids, expect) << "rank " << r;
    }
  }
}

TEST(AssignSpheres, InteriorSphereHasOneOwner) {
  const int P = 8;
  std::vector<int> holds(P, 0);
  Harness h(P);
  h.run([&](Comm& c) {
    std::vector<Leaf<NoPayload>> leaves;
    for (const auto& k : detail::uniform_keys(3, 1, 1)) leaves.push_back({k, true, {}});
    auto f = Forest<NoPayload>::from_replicated(3, 1, leaves, c.rank(), P);
    // rank r owns octant r; the sphere sits well inside octant 0
    std::vector<Sphere> s;
    if (c.rank() == 3) s.push_back({9, {0.25, 0.25, 0.25}, 0.1});
    holds[c.rank()] = int(assign_spheres(f, {reference_grid(3, 1)}, s, 0.1, c).size());
  });
  EXPECT_EQ(holds[0], 1);
  EXPECT_EQ(std::accumulate(holds.begin(), holds.end(), 0), 1);
}

std::vector<std::pair<LeafKey, std::vector<std::uint64_t>>> sphere_mesh(int P, Backend be, const SphereParams& p,
                                                                        std::uint64_t* generated = nullptr) {
  std::vector<std::vector<std::pair<LeafKey, std::vector<std::uint64_t>>>> parts(P);
  std::vector<std::uint64_t> gen(P);
  Harness h(P, be);
  h.run([&](Comm& c) {
    auto b = build_sphere_forest(p, c);
    b.forest.validate();
    gen[c.rank()] = b.generated;
    for (const auto& l : b.forest.leaves()) {
      std::vector<std::uint64_t> ids;
      for (const auto& s : l.payload.spheres) ids.push_back(s.id);
      parts[c.rank()].push_back({l.key, ids});
    }
  });
  for (int r = 1; r < P; ++r) EXPECT_EQ(gen[r], gen[0]);
  if (generated) *generated = gen[0];
  std::vector<std::pair<LeafKey, std::vector<std::uint64_t>>> all;
  for (auto& v : parts) all.insert(all.end(), v.begin(), v.end());
  return all;
}

TEST(SphereForest, IndependentOfRankCount) {
  SphereParams p;
  p.min_level = 2;
  p.max_level = 4;
  p.seed = 5;
  std::uint64_t g1 = 0;
  const auto one = sphere_mesh(1, Backend::threads, p, &g1);
  EXPECT_GT(g1, 10u);
  for (int P : {3, 8}) {
    std::uint64_t gP = 0;
    EXPECT_EQ(sphere_mesh(P, Backend::threads, p, &gP), one) << P;
    EXPECT_EQ(gP, g1);
  }
  EXPECT_EQ(sphere_mesh(5, Backend::roundrobin, p), one);
}

TEST(SphereForest, RefinementFollowsShells) {
  SphereParams p;
  p.min_level = 1;
  p.max_level = 4;
  p.seed = 9;
  const auto mesh = sphere_mesh(2, Backend::threads, p);
  // the generated spheres, from the base elements directly
  std::vector<Sphere> all;
  for (const auto& k : detail::uniform_keys(3, 1, p.min_level))
    for (const auto& s : base_element_spheres(p, k)) all.push_back(s);
  ASSERT_FALSE(all.empty());
  std::size_t deep = 0;
  for (const auto& [k, ids] : mesh) {
    const auto sc = octree::subcube(3, k);
    const Vec3 lo{sc.lower[0], sc.lower[1], sc.lower[2]};
    const Vec3 hi = lo + Vec3{sc.size, sc.size, sc.size};
    // stored lists are exactly the shells meeting the element
    std::vector<std::uint64_t> expect;
    for (const auto& s : all)
      if (shell_meets_box(s, p.epsilon, lo, hi)) expect.push_back(s.id);
    std::sort(expect.begin(), expect.end());
    EXPECT_EQ(ids, expect);
    // below the cap, nothing left to refine
    if (k.level < p.max_level) {
      EXPECT_FALSE(sphere_refine_flag(lo, hi, all, p.epsilon));
    }
    deep += k.level == p.max_level;
  }
  EXPECT_GT(deep, 0u);
}

}  // namespace
}  // namespace octray
