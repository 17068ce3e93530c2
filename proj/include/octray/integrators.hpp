#pragma once

// Adaptive evaluation of (A, B) for a ray segment from sampled absorption
// and emission coefficients.
//
// The integration coordinate runs in the direction the light travels: x1 is
// the end farther from the camera, x2 the end nearer to it. A step returns the
// segment that maps the intensity entering at x1 to the intensity leaving at
// x2, and a split aggregates the near half in front of the far half.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "octray/segment_algebra.hpp"

namespace octray {

using ChannelCoefficients = std::array<Coefficients, kChannels>;

class IntegratorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Explicit Runge-Kutta tableau whose only nonzero stage coefficients sit on
/// the subdiagonal.
struct RKTableau {
  std::string name;
  std::vector<double> c;  ///< nodes, size M
  std::vector<double> a;  ///< a[i-1] = a_{i,i-1}, size M-1
  std::vector<double> b;  ///< weights, size M

  int stages() const { return static_cast<int>(c.size()); }

  bool consistent(double tol = 1e-14) const {
    if (c.empty() || a.size() + 1 != c.size() || b.size() != c.size()) return false;
    double sum = 0;
    for (double w : b) sum += w;
    if (std::abs(sum - 1.0) > tol || std::abs(c[0]) > tol) return false;
    for (std::size_t i = 1; i < c.size(); ++i)
      if (std::abs(c[i] - a[i - 1]) > tol) return false;
    return true;
  }
};

inline const RKTableau& explicit_euler_tableau() {
  static const RKTableau t{"explicit_euler", {0.0}, {}, {1.0}};
  return t;
}
inline const RKTableau& heun2_tableau() {
  static const RKTableau t{"heun2", {0.0, 1.0}, {1.0}, {0.5, 0.5}};
  return t;
}
inline const RKTableau& heun3_tableau() {
  static const RKTableau t{"heun3", {0.0, 1.0 / 3, 2.0 / 3}, {1.0 / 3, 2.0 / 3}, {0.25, 0.0, 0.75}};
  return t;
}
inline const RKTableau& rk4_tableau() {
  static const RKTableau t{
      "rk4", {0.0, 0.5, 0.5, 1.0}, {0.5, 0.5, 1.0}, {1.0 / 6, 1.0 / 3, 1.0 / 3, 1.0 / 6}};
  return t;
}

enum class Scheme { explicit_euler, heun2, heun3, rk4, gauss2, simpson };

inline const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::explicit_euler: return "explicit_euler";
    case Scheme::heun2: return "heun2";
    case Scheme::heun3: return "heun3";
    case Scheme::rk4: return "rk4";
    case Scheme::gauss2: return "gauss2";
    case Scheme::simpson: return "simpson";
  }
  return "?";
}

inline std::optional<Scheme> parse_scheme(const std::string& s) {
  for (Scheme k : {Scheme::explicit_euler, Scheme::heun2, Scheme::heun3, Scheme::rk4,
                   Scheme::gauss2, Scheme::simpson})
    if (s == scheme_name(k)) return k;
  if (s == "euler") return Scheme::explicit_euler;
  return std::nullopt;
}

inline bool is_explicit(Scheme s) { return s != Scheme::gauss2 && s != Scheme::simpson; }

inline const RKTableau& tableau_for(Scheme s) {
  switch (s) {
    case Scheme::explicit_euler: return explicit_euler_tableau();
    case Scheme::heun2: return heun2_tableau();
    case Scheme::heun3: return heun3_tableau();
    case Scheme::rk4: return rk4_tableau();
    default: throw std::invalid_argument("scheme has no explicit tableau");
  }
}

struct IntegratorConfig {
  Scheme scheme = Scheme::gauss2;
  double c_rk = 0.5;
  int max_depth = 40;

  void validate() const {
    if (!(c_rk > 0) || !std::isfinite(c_rk)) throw std::invalid_argument("c_rk must be positive");
    if (max_depth < 1) throw std::invalid_argument("max_depth must be at least 1");
  }
};

/// Anything callable as `ChannelCoefficients(double x)`.
template <class F>
concept CoefficientEvaluator = requires(const F& f, double x) {
  { f(x) } -> std::convertible_to<ChannelCoefficients>;
};

/// Type-erased coefficient field that counts its evaluations.
class CoefficientField {
 public:
  using Fn = std::function<ChannelCoefficients(double)>;

  CoefficientField() = default;
  explicit CoefficientField(Fn fn) : fn_(std::move(fn)) {}
  CoefficientField(const CoefficientField& o) : fn_(o.fn_), count_(o.count_.load()) {}

  /// Same (beta, gamma) for all channels.
  static CoefficientField scalar(std::function<Coefficients(double)> f) {
    return CoefficientField([f = std::move(f)](double x) {
      const Coefficients c = f(x);
      return ChannelCoefficients{c, c, c};
    });
  }

  static CoefficientField constant(double beta, double gamma) {
    return scalar([=](double) { return Coefficients{beta, gamma}; });
  }

  ChannelCoefficients operator()(double x) const {
    count_.fetch_add(1, std::memory_order_relaxed);
    return fn_(x);
  }

  std::uint64_t evaluations() const { return count_.load(std::memory_order_relaxed); }
  void reset_count() { count_.store(0); }

 private:
  Fn fn_;
  mutable std::atomic<std::uint64_t> count_{0};
};

namespace detail {

template <CoefficientEvaluator F>
ChannelCoefficients sample(const F& field, double x) {
  const ChannelCoefficients c = field(x);
  for (const auto& k : c)
    if (!std::isfinite(k.beta) || !std::isfinite(k.gamma))
      throw IntegratorError("non-finite coefficient at x = " + std::to_string(x));
  return c;
}

inline bool exceeds(const ChannelCoefficients& c, double dx, double c_rk) {
  for (const auto& k : c)
    if (dx * k.beta > c_rk) return true;
  return false;
}

}  // namespace detail

/// One explicit RK step. Returns nullopt (a split request) as soon as an
/// evaluated node has dx * beta above c_rk.
template <CoefficientEvaluator F>
std::optional<Segment3> step_explicit_rk(const F& field, double x1, double x2, const RKTableau& tab,
                                         double c_rk) {
  if (x2 < x1) throw std::invalid_argument("step_explicit_rk: x2 < x1");
  const double dx = x2 - x1;
  const int M = tab.stages();
  std::array<double, kChannels> Abar{}, Bbar{}, sumA{}, sumB{};
  ChannelCoefficients k{};
  for (int i = 0; i < M; ++i) {
    // stage value from the previous stage only
    if (i == 0) {
      Abar.fill(1.0);
      Bbar.fill(0.0);
    } else {
      for (int ch = 0; ch < kChannels; ++ch) {
        const double Ap = Abar[ch], Bp = Bbar[ch];
        Abar[ch] = 1.0 + dx * tab.a[i - 1] * (-k[ch].beta * Ap);
        Bbar[ch] = dx * tab.a[i - 1] * (k[ch].gamma - k[ch].beta * Bp);
      }
    }
    if (i == 0 || tab.c[i] != tab.c[i - 1]) {
      k = detail::sample(field, x1 + tab.c[i] * dx);
      if (detail::exceeds(k, dx, c_rk)) return std::nullopt;
    }
    for (int ch = 0; ch < kChannels; ++ch) {
      sumA[ch] += tab.b[i] * (-k[ch].beta * Abar[ch]);
      sumB[ch] += tab.b[i] * (k[ch].gamma - k[ch].beta * Bbar[ch]);
    }
  }
  Segment3 out;
  for (int ch = 0; ch < kChannels; ++ch) out[ch] = {1.0 + dx * sumA[ch], dx * sumB[ch]};
  return out;
}

inline constexpr double kGaussNodeOffset = 0.28867513459481288225;  // sqrt(3)/6

namespace detail {

inline Segment3 gauss2_from_samples(const ChannelCoefficients& k0, const ChannelCoefficients& k1,
                                    double dx) {
  constexpr double sqrt3 = 1.7320508075688772935;
  Segment3 out;
  for (int ch = 0; ch < kChannels; ++ch) {
    const double b0 = k0[ch].beta, b1 = k1[ch].beta, g0 = k0[ch].gamma, g1 = k1[ch].gamma;
    const double a1 = dx * (b0 + b1) / 4.0;
    const double a2 = dx * dx * b0 * b1 / 12.0;
    const double e1 = dx * (g0 + g1) / 2.0;
    const double e2 = dx * dx * (b0 * g1 - b1 * g0) * sqrt3 / 12.0;
    const double den = 1.0 + a1 + a2;
    if (!std::isfinite(den)) {
      // dx so large that the products overflow; same ratio scaled by 1/dx^2
      const double q = 1.0 / dx;
      const double s1 = q * (b0 + b1) / 4.0, s2 = b0 * b1 / 12.0;
      const double sd = q * q + s1 + s2;
      const double se = q * (g0 + g1) / 2.0 + (b0 * g1 - b1 * g0) * sqrt3 / 12.0;
      out[ch] = {(q * q - s1 + s2) / sd, se / sd};
      continue;
    }
    out[ch] = {(1.0 - a1 + a2) / den, (e1 + e2) / den};
  }
  return out;
}

inline Segment3 simpson_from_samples(const ChannelCoefficients& k0, const ChannelCoefficients& k1,
                                     const ChannelCoefficients& k2, double dx) {
  Segment3 out;
  for (int ch = 0; ch < kChannels; ++ch) {
    const double A = std::exp(-dx * (k0[ch].beta + 4.0 * k1[ch].beta + k2[ch].beta) / 6.0);
    const double B =
        dx * (A * k0[ch].gamma + 4.0 * std::sqrt(A) * k1[ch].gamma + k2[ch].gamma) / 6.0;
    out[ch] = {A, B};
  }
  return out;
}

}  // namespace detail

/// Two-stage Gauss step in closed form. The lower node is sampled first.
template <CoefficientEvaluator F>
Segment3 step_gauss2(const F& field, double x1, double x2) {
  if (x2 < x1) throw std::invalid_argument("step_gauss2: x2 < x1");
  const double dx = x2 - x1;
  const auto k0 = detail::sample(field, x1 + (0.5 - kGaussNodeOffset) * dx);
  const auto k1 = detail::sample(field, x1 + (0.5 + kGaussNodeOffset) * dx);
  return detail::gauss2_from_samples(k0, k1, dx);
}

template <CoefficientEvaluator F>
Segment3 step_simpson(const F& field, double x1, double x2) {
  if (x2 < x1) throw std::invalid_argument("step_simpson: x2 < x1");
  const double dx = x2 - x1;
  const auto k0 = detail::sample(field, x1);
  const auto k1 = detail::sample(field, x1 + 0.5 * dx);
  const auto k2 = detail::sample(field, x2);
  return detail::simpson_from_samples(k0, k1, k2, dx);
}

struct SegEvalResult {
  Segment3 seg = identity_segment3();
  int depth = 0;           ///< deepest recursion level reached
  std::uint64_t steps = 0; ///< accepted steps (recursion leaves)
};

namespace detail {

template <CoefficientEvaluator F>
std::optional<Segment3> try_step(const F& field, double x1, double x2, const IntegratorConfig& cfg) {
  const double dx = x2 - x1;
  switch (cfg.scheme) {
    case Scheme::gauss2: {
      const auto k0 = sample(field, x1 + (0.5 - kGaussNodeOffset) * dx);
      if (exceeds(k0, dx, cfg.c_rk)) return std::nullopt;
      const auto k1 = sample(field, x1 + (0.5 + kGaussNodeOffset) * dx);
      if (exceeds(k1, dx, cfg.c_rk)) return std::nullopt;
      return gauss2_from_samples(k0, k1, dx);
    }
    case Scheme::simpson: {
      const auto k0 = sample(field, x1);
      if (exceeds(k0, dx, cfg.c_rk)) return std::nullopt;
      const auto k1 = sample(field, x1 + 0.5 * dx);
      if (exceeds(k1, dx, cfg.c_rk)) return std::nullopt;
      const auto k2 = sample(field, x2);
      if (exceeds(k2, dx, cfg.c_rk)) return std::nullopt;
      return simpson_from_samples(k0, k1, k2, dx);
    }
    default:
      return step_explicit_rk(field, x1, x2, tableau_for(cfg.scheme), cfg.c_rk);
  }
}

template <CoefficientEvaluator F>
void segeval_rec(const F& field, double x1, double x2, const IntegratorConfig& cfg, int depth,
                 SegEvalResult& r, Segment3& out) {
  if (auto s = try_step(field, x1, x2, cfg)) {
    out = *s;
    r.depth = std::max(r.depth, depth);
    ++r.steps;
    return;
  }
  if (depth >= cfg.max_depth)
    throw IntegratorError("segeval: recursion depth limit " + std::to_string(cfg.max_depth) +
                          " exceeded on [" + std::to_string(x1) + ", " + std::to_string(x2) + "]");
  const double xm = 0.5 * (x1 + x2);
  Segment3 near, far;
  segeval_rec(field, xm, x2, cfg, depth + 1, r, near);
  segeval_rec(field, x1, xm, cfg, depth + 1, r, far);
  out = aggregate(near, far);
}

}  // namespace detail

/// Adaptive segment evaluation: a failed threshold test splits the interval
/// at its midpoint and aggregates the two halves.
template <CoefficientEvaluator F>
SegEvalResult segeval(const F& field, double x1, double x2, const IntegratorConfig& cfg) {
  cfg.validate();
  if (!(x2 >= x1)) throw std::invalid_argument("segeval: x2 < x1");
  SegEvalResult r;
  if (x2 == x1) return r;
  detail::segeval_rec(field, x1, x2, cfg, 0, r, r.seg);
  return r;
}

}  // namespace octray
