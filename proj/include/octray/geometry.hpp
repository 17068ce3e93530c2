#pragma once

// Tensor-product Lagrange geometry, the camera frame, camera-space bounding
// boxes with their pixel rectangles, and ray/bilinear-patch intersection.

#include <algorithm>
#include <array>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace octray {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  double& operator[](int k) { return k == 0 ? x : k == 1 ? y : z; }
  double operator[](int k) const { return k == 0 ? x : k == 1 ? y : z; }

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator-(Vec3 a) { return {-a.x, -a.y, -a.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend Vec3 operator*(Vec3 a, double s) { return s * a; }
  friend Vec3 operator/(Vec3 a, double s) { return {a.x / s, a.y / s, a.z / s}; }
  Vec3& operator+=(Vec3 b) { return *this = *this + b; }
  Vec3& operator-=(Vec3 b) { return *this = *this - b; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) { return a / norm(a); }

// ---------------------------------------------------------------------------
// Lagrange basis on Gauss-Lobatto nodes

/// R+1 Gauss-Lobatto nodes mapped to [0, 1].
inline std::vector<double> lobatto_nodes(int R) {
  if (R < 1) throw std::invalid_argument("lobatto_nodes: degree must be at least 1");
  const int N = R;
  // Newton iteration on (1 - x^2) P'_N(x) from Chebyshev-Lobatto guesses.
  std::vector<double> x(N + 1);
  for (int k = 0; k <= N; ++k) x[k] = std::cos(std::numbers::pi * k / N);
  for (int it = 0; it < 100; ++it) {
    double change = 0;
    for (int k = 0; k <= N; ++k) {
      double pm1 = 1.0, p = x[k];
      for (int n = 2; n <= N; ++n) {
        const double pn = ((2 * n - 1) * x[k] * p - (n - 1) * pm1) / n;
        pm1 = p;
        p = pn;
      }
      // p = P_N(x), pm1 = P_{N-1}(x)
      const double xo = x[k];
      x[k] = xo - (xo * p - pm1) / ((N + 1) * p);
      change = std::max(change, std::abs(x[k] - xo));
    }
    if (change < 1e-16) break;
  }
  std::vector<double> eta(N + 1);
  for (int k = 0; k <= N; ++k) eta[k] = 0.5 * (1.0 - x[k]);
  std::sort(eta.begin(), eta.end());
  eta.front() = 0.0;
  eta.back() = 1.0;
  for (int k = 0; k <= N / 2; ++k) {
    const double s = 0.5 * (eta[k] + 1.0 - eta[N - k]);
    eta[k] = s;
    eta[N - k] = 1.0 - s;
  }
  if (N % 2 == 0) eta[N / 2] = 0.5;
  return eta;
}

class LagrangeBasis {
 public:
  explicit LagrangeBasis(int R) : R_(R), eta_(lobatto_nodes(R)), denom_(R + 1, 1.0) {
    for (int m = 0; m <= R_; ++m)
      for (int k = 0; k <= R_; ++k)
        if (k != m) denom_[m] *= eta_[m] - eta_[k];
  }

  int degree() const { return R_; }
  const std::vector<double>& nodes() const { return eta_; }

  double psi(int m, double t) const {
    double p = 1.0;
    for (int k = 0; k <= R_; ++k)
      if (k != m) p *= t - eta_[k];
    return p / denom_[m];
  }

  /// All R+1 basis values at t.
  void values(double t, double* out) const {
    for (int m = 0; m <= R_; ++m) out[m] = psi(m, t);
  }

 private:
  int R_;
  std::vector<double> eta_;
  std::vector<double> denom_;
};

/// (R+1)^d control points of one tree; index m1 + (R+1) m2 + (R+1)^2 m3.
struct ControlPointGrid {
  int tree_id = 0;
  int dim = 2;
  int degree = 1;
  std::vector<Vec3> points;

  int side() const { return degree + 1; }
  std::size_t expected_size() const {
    std::size_t n = 1;
    for (int k = 0; k < dim; ++k) n *= static_cast<std::size_t>(side());
    return n;
  }
  const Vec3& at(int m1, int m2, int m3 = 0) const {
    return points[static_cast<std::size_t>(m1 + side() * (m2 + side() * m3))];
  }
  Vec3& at(int m1, int m2, int m3 = 0) {
    return points[static_cast<std::size_t>(m1 + side() * (m2 + side() * m3))];
  }
  void validate() const {
    if (dim != 2 && dim != 3) throw std::invalid_argument("control grid dimension must be 2 or 3");
    if (degree < 1) throw std::invalid_argument("control grid degree must be at least 1");
    if (points.size() != expected_size())
      throw std::invalid_argument("control grid has " + std::to_string(points.size()) +
                                  " points, expected " + std::to_string(expected_size()));
  }
};

/// Grid whose control points sit on the reference lattice (identity map).
inline ControlPointGrid reference_grid(int dim, int R, int tree_id = 0) {
  const auto eta = lobatto_nodes(R);
  ControlPointGrid g{tree_id, dim, R, {}};
  g.points.resize(g.expected_size());
  const int s = R + 1;
  for (int m3 = 0; m3 < (dim == 3 ? s : 1); ++m3)
    for (int m2 = 0; m2 < s; ++m2)
      for (int m1 = 0; m1 < s; ++m1) g.at(m1, m2, m3) = {eta[m1], eta[m2], dim == 3 ? eta[m3] : 0.0};
  return g;
}

inline Vec3 evaluate_geometry(const ControlPointGrid& grid, const LagrangeBasis& basis,
                              std::span<const double> t) {
  if (grid.degree != basis.degree() || static_cast<int>(t.size()) != grid.dim ||
      grid.points.size() != grid.expected_size())
    throw std::invalid_argument("evaluate_geometry: shape mismatch");
  const int s = grid.side();
  std::array<std::vector<double>, 3> w;
  for (int k = 0; k < grid.dim; ++k) {
    w[k].resize(static_cast<std::size_t>(s));
    basis.values(t[k], w[k].data());
  }
  Vec3 r;
  const int s3 = grid.dim == 3 ? s : 1;
  for (int m3 = 0; m3 < s3; ++m3) {
    const double w3 = grid.dim == 3 ? w[2][m3] : 1.0;
    for (int m2 = 0; m2 < s; ++m2)
      for (int m1 = 0; m1 < s; ++m1) r += (w[0][m1] * w[1][m2] * w3) * grid.at(m1, m2, m3);
  }
  return r;
}

inline Vec3 evaluate_geometry(const ControlPointGrid& grid, const LagrangeBasis& basis,
                              std::initializer_list<double> t) {
  return evaluate_geometry(grid, basis, std::span<const double>(t.begin(), t.size()));
}

// ---------------------------------------------------------------------------
// Camera

struct Camera {
  Vec3 o{0, 0, 0};
  Vec3 t{1, 0, 0};  ///< unit right
  Vec3 u{0, 1, 0};  ///< unit up
  Vec3 v{0, 0, 1};  ///< view vector, length = near distance
  double f = 10;    ///< far distance
  int w = 64, h = 64;
  double ell = 1.0 / 64;  ///< pixel edge length in the projection plane

  double n() const { return norm(v); }
  double cx() const { return 0.5 * (w - 1); }
  double cy() const { return 0.5 * (h - 1); }
  double alpha_max() const { return f / n(); }

  void validate() const {
    const double tol = 1e-12;
    if (std::abs(norm(t) - 1) > tol || std::abs(norm(u) - 1) > tol)
      throw std::invalid_argument("camera: t and u must be unit vectors");
    const double nn = n();
    if (!(nn > 0)) throw std::invalid_argument("camera: view vector must be nonzero");
    if (std::abs(dot(t, u)) > tol || std::abs(dot(t, v)) > tol * nn || std::abs(dot(u, v)) > tol * nn)
      throw std::invalid_argument("camera: t, u, v must be mutually orthogonal");
    if (!(f > nn)) throw std::invalid_argument("camera: far distance must exceed near distance");
    if (w < 1 || h < 1) throw std::invalid_argument("camera: image size must be positive");
    if (!(ell > 0)) throw std::invalid_argument("camera: pixel length must be positive");
  }

  /// Camera at `eye` looking at `target`, with `up_hint` roughly up, image
  /// plane at distance `near` spanning `fov_y` radians vertically.
  static Camera look_at(Vec3 eye, Vec3 target, Vec3 up_hint, double near, double far,
                        double fov_y, int w, int h) {
    Camera c;
    const Vec3 dir = normalized(target - eye);
    c.t = normalized(cross(dir, up_hint));
    c.u = cross(c.t, dir);
    c.o = eye;
    c.v = near * dir;
    c.f = far;
    c.w = w;
    c.h = h;
    c.ell = 2.0 * near * std::tan(0.5 * fov_y) / h;
    return c;
  }
};

inline Vec3 camera_transform(const Camera& cam, Vec3 x) {
  const Vec3 d = x - cam.o;
  return {dot(cam.t, d), dot(cam.u, d), dot(cam.v, d) / cam.n()};
}

inline ControlPointGrid transform_control_points(const Camera& cam, const ControlPointGrid& g) {
  ControlPointGrid r = g;
  for (auto& p : r.points) p = camera_transform(cam, p);
  return r;
}

inline void check_pixel(const Camera& cam, int i, int j) {
  if (i < 0 || i >= cam.w || j < 0 || j >= cam.h)
    throw std::out_of_range("pixel (" + std::to_string(i) + ", " + std::to_string(j) +
                            ") outside image");
}

inline Vec3 ray_direction_world(const Camera& cam, int i, int j) {
  check_pixel(cam, i, j);
  return cam.v + cam.ell * ((i - cam.cx()) * cam.t + (j - cam.cy()) * cam.u);
}

/// Ray direction in camera coordinates; the ray starts at the origin.
inline Vec3 ray_direction_camera(const Camera& cam, int i, int j) {
  check_pixel(cam, i, j);
  return {cam.ell * (i - cam.cx()), cam.ell * (j - cam.cy()), cam.n()};
}

// ---------------------------------------------------------------------------
// Ray / bilinear patch intersection

struct RayHit {
  double alpha;
  double t1, t2;
  double cos_phi;  ///< |cos| of the angle between ray and surface normal
};

struct IntersectOptions {
  bool closed_domain = false;  ///< [0,1]^2 instead of [0,1)^2
  double alpha_min = 0.0;
  double alpha_max = std::numeric_limits<double>::infinity();
};

namespace detail {

inline constexpr double kParamTol = 1e-12;

inline bool in_domain(double t, bool closed) {
  return closed ? (t >= -kParamTol && t <= 1 + kParamTol) : (t >= -kParamTol && t < 1 - kParamTol);
}

inline void orthogonal_pair(Vec3 r, Vec3& d1, Vec3& d2) {
  int k = 0;
  for (int m = 1; m < 3; ++m)
    if (std::abs(r[m]) < std::abs(r[k])) k = m;
  Vec3 e;
  e[k] = 1.0;
  d1 = normalized(cross(r, e));
  d2 = normalized(cross(r, d1));
}

}  // namespace detail

/// Intersections of the ray origin + alpha r with the bilinear patch through
/// corners c00, c10, c01, c11 (order (t1, t2) = (0,0), (1,0), (0,1), (1,1)).
inline std::vector<RayHit> intersect_ray_bilinear(const std::array<Vec3, 4>& corners, Vec3 r,
                                                  Vec3 origin = {},
                                                  const IntersectOptions& opt = {}) {
  std::vector<RayHit> hits;
  const double rr = dot(r, r);
  if (!(rr > 0)) return hits;
  const Vec3 a = corners[0] - origin;
  const Vec3 b = corners[1] - corners[0];
  const Vec3 c = corners[2] - corners[0];
  const Vec3 e = corners[3] - corners[1] - corners[2] + corners[0];

  Vec3 d1, d2;
  detail::orthogonal_pair(r, d1, d2);
  const double A1 = dot(d1, a), B1 = dot(d1, b), C1 = dot(d1, c), E1 = dot(d1, e);
  const double A2 = dot(d2, a), B2 = dot(d2, b), C2 = dot(d2, c), E2 = dot(d2, e);

  // t1 (B + E t2) = -(A + C t2) in both projections; eliminate t1.
  const double q2 = C1 * E2 - C2 * E1;
  const double q1 = A1 * E2 + C1 * B2 - A2 * E1 - C2 * B1;
  const double q0 = A1 * B2 - A2 * B1;

  const double scale = std::max({norm(a), norm(b), norm(c), norm(e), 1e-300});
  const double s2 = scale * scale;
  std::array<double, 2> roots{};
  int nroots = 0;
  if (std::abs(q2) <= 1e-14 * s2) {
    if (std::abs(q1) > 1e-14 * s2) roots[nroots++] = -q0 / q1;
  } else {
    const double disc = q1 * q1 - 4 * q2 * q0;
    const double dscale = std::max(q1 * q1, std::abs(4 * q2 * q0));
    if (std::abs(disc) <= 1e-12 * dscale) {
      roots[nroots++] = -q1 / (2 * q2);
    } else if (disc > 0) {
      const double sq = std::sqrt(disc);
      const double q = -0.5 * (q1 + (q1 >= 0 ? sq : -sq));
      roots[nroots++] = q / q2;
      if (q != 0) roots[nroots++] = q0 / q;
    }
  }

  for (int k = 0; k < nroots; ++k) {
    const double t2 = roots[k];
    if (!std::isfinite(t2) || !detail::in_domain(t2, opt.closed_domain)) continue;
    const double den1 = B1 + E1 * t2, den2 = B2 + E2 * t2;
    double t1;
    if (std::abs(den1) >= std::abs(den2)) {
      if (den1 == 0) continue;
      t1 = -(A1 + C1 * t2) / den1;
    } else {
      t1 = -(A2 + C2 * t2) / den2;
    }
    if (!std::isfinite(t1) || !detail::in_domain(t1, opt.closed_domain)) continue;
    const Vec3 p = a + t1 * b + t2 * c + (t1 * t2) * e;
    const double alpha = dot(p, r) / rr;
    if (alpha < opt.alpha_min || alpha > opt.alpha_max) continue;
    const Vec3 nrm = cross(b + t2 * e, c + t1 * e);
    const double nn = norm(nrm);
    const double cphi = nn > 0 ? std::abs(dot(nrm, r)) / (nn * std::sqrt(rr)) : 0.0;
    if (nroots == 2 && k == 1 && !hits.empty() && std::abs(hits[0].t2 - t2) <= detail::kParamTol &&
        std::abs(hits[0].t1 - t1) <= detail::kParamTol)
      continue;
    hits.push_back({alpha, t1, t2, cphi});
  }
  std::sort(hits.begin(), hits.end(), [](const RayHit& x, const RayHit& y) { return x.alpha < y.alpha; });
  return hits;
}

// ---------------------------------------------------------------------------
// Element sub-cubes, bounding boxes, pixel rectangles

/// Reference sub-cube [lower, lower + size]^d of an element within its tree.
struct Subcube {
  std::array<double, 3> lower{0, 0, 0};
  double size = 1.0;
};

/// Map a point of the element's local unit cube into the tree's geometry.
inline Vec3 evaluate_local(const ControlPointGrid& grid, const LagrangeBasis& basis,
                           const Subcube& sc, std::array<double, 3> local) {
  std::array<double, 3> t{};
  for (int k = 0; k < grid.dim; ++k) t[k] = sc.lower[k] + sc.size * local[k];
  return evaluate_geometry(grid, basis, std::span<const double>(t.data(), grid.dim));
}

/// Corners of a 2D element, in bilinear patch order.
inline std::array<Vec3, 4> surface_corners(const ControlPointGrid& grid, const LagrangeBasis& basis,
                                           const Subcube& sc) {
  return {evaluate_local(grid, basis, sc, {0, 0, 0}), evaluate_local(grid, basis, sc, {1, 0, 0}),
          evaluate_local(grid, basis, sc, {0, 1, 0}), evaluate_local(grid, basis, sc, {1, 1, 0})};
}

/// Corners of face `f` (= 2 * axis + side) of a 3D element, in bilinear
/// patch order over the two remaining axes taken in increasing order.
inline std::array<Vec3, 4> volume_face_corners(const ControlPointGrid& grid,
                                               const LagrangeBasis& basis, const Subcube& sc, int f) {
  const int axis = f / 2;
  const double side = f % 2;
  const int p = axis == 0 ? 1 : 0;
  const int q = axis == 2 ? 1 : 2;
  std::array<Vec3, 4> out;
  for (int k = 0; k < 4; ++k) {
    std::array<double, 3> l{};
    l[axis] = side;
    l[p] = k & 1;
    l[q] = (k >> 1) & 1;
    out[k] = evaluate_local(grid, basis, sc, l);
  }
  return out;
}

struct CameraAABB {
  Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  Vec3 hi{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity()};

  void include(Vec3 p) {
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  }
  bool empty() const { return lo.x > hi.x; }
  bool contains(Vec3 p, double tol = 0) const {
    for (int k = 0; k < 3; ++k)
      if (p[k] < lo[k] - tol || p[k] > hi[k] + tol) return false;
    return true;
  }
};

/// Camera-space box of an element; `grid` must already be in camera
/// coordinates. Exact for degree 1, inflated lattice samples otherwise.
inline CameraAABB element_aabb(const ControlPointGrid& grid, const LagrangeBasis& basis,
                               const Subcube& sc) {
  CameraAABB box;
  const int R = grid.degree;
  const int n = R == 1 ? 2 : 4 * R + 1;
  const int n3 = grid.dim == 3 ? n : 1;
  for (int c = 0; c < n3; ++c)
    for (int b = 0; b < n; ++b)
      for (int a = 0; a < n; ++a)
        box.include(evaluate_local(grid, basis, sc,
                                   {double(a) / (n - 1), double(b) / (n - 1),
                                    n3 > 1 ? double(c) / (n - 1) : 0.0}));
  if (R >= 2) {
    const double pad = 0.05 * norm(box.hi - box.lo);
    box.lo -= Vec3{pad, pad, pad};
    box.hi += Vec3{pad, pad, pad};
  }
  return box;
}

/// Half-open pixel rectangle [i0, i1) x [j0, j1).
struct PixelRect {
  int i0 = 0, j0 = 0, i1 = 0, j1 = 0;

  bool empty() const { return i0 >= i1 || j0 >= j1; }
  long long area() const { return empty() ? 0 : static_cast<long long>(i1 - i0) * (j1 - j0); }
  int width() const { return i1 - i0; }
  int height() const { return j1 - j0; }
  bool contains(int i, int j) const { return i >= i0 && i < i1 && j >= j0 && j < j1; }
  bool contains(const PixelRect& o) const {
    return o.empty() || (o.i0 >= i0 && o.i1 <= i1 && o.j0 >= j0 && o.j1 <= j1);
  }
  PixelRect intersect(const PixelRect& o) const {
    PixelRect r{std::max(i0, o.i0), std::max(j0, o.j0), std::min(i1, o.i1), std::min(j1, o.j1)};
    if (r.empty()) return {};
    return r;
  }
  PixelRect unite(const PixelRect& o) const {
    if (empty()) return o;
    if (o.empty()) return *this;
    return {std::min(i0, o.i0), std::min(j0, o.j0), std::max(i1, o.i1), std::max(j1, o.j1)};
  }
  friend bool operator==(const PixelRect& a, const PixelRect& b) {
    return (a.empty() && b.empty()) || (a.i0 == b.i0 && a.j0 == b.j0 && a.i1 == b.i1 && a.j1 == b.j1);
  }
};

/// Pixels whose center ray may pass through the box within the visible depth
/// range [n, f].
inline PixelRect project_to_pixels(const CameraAABB& box, const Camera& cam) {
  if (box.empty()) return {};
  const double n = cam.n();
  const double zlo = std::max(box.lo.z, n), zhi = std::min(box.hi.z, cam.f);
  if (zlo > zhi) return {};
  // extremes of X n / (Z ell) over the box occur at its corners
  auto range = [&](double xlo, double xhi, double c) {
    double lo = INFINITY, hi = -INFINITY;
    for (double X : {xlo, xhi})
      for (double Z : {zlo, zhi}) {
        const double p = X * n / (Z * cam.ell) + c;
        lo = std::min(lo, p);
        hi = std::max(hi, p);
      }
    return std::pair{lo, hi};
  };
  const auto [pi0, pi1] = range(box.lo.x, box.hi.x, cam.cx());
  const auto [pj0, pj1] = range(box.lo.y, box.hi.y, cam.cy());
  constexpr double eps = 1e-9;
  auto lower = [](double p) { return static_cast<long long>(std::ceil(p - eps)); };
  auto upper = [](double p) { return static_cast<long long>(std::floor(p + eps)) + 1; };
  const long long i0 = std::max<long long>(0, lower(pi0)), i1 = std::min<long long>(cam.w, upper(pi1));
  const long long j0 = std::max<long long>(0, lower(pj0)), j1 = std::min<long long>(cam.h, upper(pj1));
  if (i0 >= i1 || j0 >= j1) return {};
  return {int(i0), int(j0), int(i1), int(j1)};
}

}  // namespace octray
