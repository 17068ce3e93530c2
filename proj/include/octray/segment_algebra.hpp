#pragma once

// Ray-segment algebra for emission/absorption along a ray.
//
// A segment over an interval of a ray is the pair (A, B) of the affine map
// I_out = A * I_in + B that the medium applies to the intensity entering it
// from behind.  Segments form a group under aggregation, which lets any
// number of pieces of a ray be combined in any bracketing without a global
// back-to-front sort.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace octray {

inline constexpr int kChannels = 3;

struct ChannelSegment {
  double A = 1.0;  // transmission ratio
  double B = 0.0;  // emitted intensity

  friend bool operator==(const ChannelSegment&, const ChannelSegment&) = default;
};

using Segment3 = std::array<ChannelSegment, kChannels>;

inline constexpr ChannelSegment identity_segment() { return {1.0, 0.0}; }

inline constexpr Segment3 identity_segment3() {
  return {identity_segment(), identity_segment(), identity_segment()};
}

struct PixelIndex {
  int instance = 0;
  int i = 0;
  int j = 0;

  friend auto operator<=>(const PixelIndex&, const PixelIndex&) = default;
};

/// One ray segment of a pixel.
///
/// Coordinates are ray parameters alpha (the ray is o + alpha * r with
/// alpha = 1 on the projection plane).  `x_in` is the end nearer to the
/// camera and x_in <= x_out.  Lengths for the Delta-x dependent formulas are
/// (x_out - x_in) * |r| and are supplied by the caller.
struct RaySegment {
  PixelIndex pixel;
  double x_in = 0.0;
  double x_out = 0.0;
  Segment3 ch = identity_segment3();

  double length() const { return x_out - x_in; }
};

struct SurfaceMaterial {
  std::array<double, kChannels> A_s{1.0, 1.0, 1.0};  // transparency per channel
  std::array<double, kChannels> I_s{0.0, 0.0, 0.0};  // intensity per channel
};

// ---------------------------------------------------------------------------
// group operations

/// `near` is the segment closer to the camera.
inline constexpr ChannelSegment aggregate(const ChannelSegment& near, const ChannelSegment& far) {
  return {near.A * far.A, near.B + near.A * far.B};
}

inline Segment3 aggregate(const Segment3& near, const Segment3& far) {
  Segment3 out;
  for (int c = 0; c < kChannels; ++c) out[c] = aggregate(near[c], far[c]);
  return out;
}

inline ChannelSegment inverse(const ChannelSegment& s) {
  if (!(s.A > 0.0)) throw std::domain_error("inverse: segment with A <= 0 has no inverse");
  return {1.0 / s.A, -s.B / s.A};
}

inline Segment3 inverse(const Segment3& s) {
  Segment3 out;
  for (int c = 0; c < kChannels; ++c) out[c] = inverse(s[c]);
  return out;
}

inline constexpr double apply_background(const ChannelSegment& s, double background) {
  return s.A * background + s.B;
}

// ---------------------------------------------------------------------------
// constant-coefficient segments

/// A = exp(-beta dx), B = gamma/beta (1 - A), with the beta -> 0 limit
/// B = gamma dx.  Negative coefficients are allowed.
inline ChannelSegment segment_from_constant(double beta, double gamma, double dx) {
  const double bdx = beta * dx;
  const double A = std::exp(-bdx);
  // (1 - e^{-x}) / x without cancellation near 0
  const double one_minus_over = (std::abs(bdx) < 1e-300) ? 1.0 : -std::expm1(-bdx) / bdx;
  return {A, gamma * dx * one_minus_over};
}

struct Coefficients {
  double beta = 0.0;
  double gamma = 0.0;
};

/// Inverse of segment_from_constant: beta = -ln A / dx, gamma = beta B / (1 - A).
inline Coefficients coefficients_from_segment(const ChannelSegment& s, double dx) {
  if (!(dx > 0.0)) throw std::invalid_argument("coefficients_from_segment: dx must be positive");
  if (!(s.A > 0.0)) throw std::domain_error("coefficients_from_segment: A must be positive");
  const double lnA = std::log(s.A);
  const double beta = -lnA / dx;
  // gamma = B * (-ln A) / (1 - A) / dx; the ratio -ln A / (1 - A) -> 1 as A -> 1
  double ratio;
  if (std::abs(lnA) < 1e-300) {
    ratio = 1.0;
  } else {
    ratio = -lnA / -std::expm1(lnA);
  }
  return {beta, s.B * ratio / dx};
}

// ---------------------------------------------------------------------------
// split and average

/// Split a segment of length dx1 + dx2 into the part of length dx1 and the
/// part of length dx2.  Which part is nearer the camera is the caller's
/// choice: both pieces follow the same formula, and aggregate(first, second)
/// as well as aggregate(second, first) reproduce `s`.
inline std::pair<ChannelSegment, ChannelSegment> split(const ChannelSegment& s, double dx1,
                                                       double dx2) {
  if (dx1 < 0.0 || dx2 < 0.0) throw std::invalid_argument("split: negative length");
  const double dx = dx1 + dx2;
  if (!(dx > 0.0)) throw std::invalid_argument("split: zero total length");
  const double f1 = dx1 / dx;
  const double f2 = dx2 / dx;
  if (s.A == 1.0) return {{1.0, s.B * f1}, {1.0, s.B * f2}};
  if (s.A == 0.0) {
    // opaque: each part inherits the full opacity; B follows the A -> 0 limit
    return {{dx1 > 0.0 ? 0.0 : 1.0, dx1 > 0.0 ? s.B : 0.0},
            {dx2 > 0.0 ? 0.0 : 1.0, dx2 > 0.0 ? s.B : 0.0}};
  }
  auto part = [&](double f) -> ChannelSegment {
    if (s.A > 0.0) {
      const double lnA = std::log(s.A);
      const double Ai = std::exp(f * lnA);
      // (1 - A^f) / (1 - A) evaluated with expm1 for A near 1
      const double den = std::expm1(lnA);
      const double w = (den == 0.0) ? f : std::expm1(f * lnA) / den;
      return {Ai, s.B * w};
    }
    // negative A has no real fractional power
    throw std::domain_error("split: segment with A < 0");
  };
  return {part(f1), part(f2)};
}

inline ChannelSegment average(const ChannelSegment& s1, const ChannelSegment& s2) {
  return {std::sqrt(s1.A * s2.A), 0.5 * (s1.B + s2.B)};
}

inline Segment3 average(const Segment3& s1, const Segment3& s2) {
  Segment3 out;
  for (int c = 0; c < kChannels; ++c) out[c] = average(s1[c], s2[c]);
  return out;
}

// ---------------------------------------------------------------------------
// surfaces

/// Segment of an infinitesimally thin surface hit at angle phi to its normal.
inline ChannelSegment surface_segment(double A_s, double I_s, double cos_phi) {
  if (!(cos_phi > 0.0)) throw std::domain_error("surface_segment: cos_phi must be positive");
  if (A_s < 0.0 || A_s > 1.0) throw std::invalid_argument("surface_segment: A_s outside [0, 1]");
  if (A_s == 0.0) return {0.0, I_s};
  const double A = std::pow(A_s, 1.0 / cos_phi);
  return {A, I_s * (1.0 - A)};
}

inline Segment3 surface_segment(const SurfaceMaterial& m, double cos_phi) {
  Segment3 out;
  for (int c = 0; c < kChannels; ++c) out[c] = surface_segment(m.A_s[c], m.I_s[c], cos_phi);
  return out;
}

// ---------------------------------------------------------------------------
// overlapping ray segments

/// Tolerance for treating two ray coordinates as equal.
inline bool same_coordinate(double a, double b) {
  return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)});
}

/// Cut `s` at ray coordinate x (strictly inside) into the near and far piece.
inline std::pair<RaySegment, RaySegment> cut(const RaySegment& s, double x) {
  RaySegment near = s;
  RaySegment far = s;
  near.x_out = x;
  far.x_in = x;
  const double d1 = x - s.x_in;
  const double d2 = s.x_out - x;
  for (int c = 0; c < kChannels; ++c) {
    auto [a, b] = split(s.ch[c], d1, d2);
    near.ch[c] = a;
    far.ch[c] = b;
  }
  return {near, far};
}

namespace detail {

inline bool is_point(const RaySegment& s) { return same_coordinate(s.x_in, s.x_out); }

// Merge two z-ordered, internally non-overlapping lists; pieces of the two
// lists that overlap on a positive length are averaged there.  Points (zero
// length, i.e. surface hits) inside an interval cut the interval and are
// inserted between the pieces.
template <class Out>
void merge_resolve(const std::vector<RaySegment>& a, const std::vector<RaySegment>& b, Out& out) {
  std::size_t ia = 0, ib = 0;
  bool have_a = false, have_b = false;
  RaySegment ca, cb;
  auto next_a = [&] {
    have_a = ia < a.size();
    if (have_a) ca = a[ia++];
  };
  auto next_b = [&] {
    have_b = ib < b.size();
    if (have_b) cb = b[ib++];
  };
  next_a();
  next_b();
  while (have_a || have_b) {
    if (!have_b) {
      out.push_back(ca);
      next_a();
      continue;
    }
    if (!have_a) {
      out.push_back(cb);
      next_b();
      continue;
    }
    // separated or touching
    if (ca.x_out < cb.x_in || same_coordinate(ca.x_out, cb.x_in)) {
      if (!(is_point(ca) && is_point(cb) && same_coordinate(ca.x_in, cb.x_in))) {
        // a point that touches the start of an interval goes first
        out.push_back(ca);
        next_a();
        continue;
      }
    } else if (cb.x_out < ca.x_in || same_coordinate(cb.x_out, ca.x_in)) {
      out.push_back(cb);
      next_b();
      continue;
    }
    const bool pa = is_point(ca);
    const bool pb = is_point(cb);
    if (pa && pb) {
      // coincident points
      RaySegment m = ca;
      m.ch = average(ca.ch, cb.ch);
      out.push_back(m);
      next_a();
      next_b();
      continue;
    }
    if (pa || pb) {
      // point strictly inside the other interval: cut and insert
      RaySegment& interval = pa ? cb : ca;
      const RaySegment& point = pa ? ca : cb;
      if (same_coordinate(point.x_in, interval.x_in)) {
        out.push_back(point);
      } else {
        auto [n, f] = cut(interval, point.x_in);
        out.push_back(n);
        out.push_back(point);
        interval = f;
      }
      if (pa) next_a(); else next_b();
      continue;
    }
    // proper overlap of two intervals
    const double lo = std::max(ca.x_in, cb.x_in);
    if (!same_coordinate(ca.x_in, lo) && ca.x_in < lo) {
      auto [n, f] = cut(ca, lo);
      out.push_back(n);
      ca = f;
    } else if (!same_coordinate(cb.x_in, lo) && cb.x_in < lo) {
      auto [n, f] = cut(cb, lo);
      out.push_back(n);
      cb = f;
    }
    const double hi = std::min(ca.x_out, cb.x_out);
    RaySegment pa_part = ca, pb_part = cb;
    bool a_done = true, b_done = true;
    if (!same_coordinate(ca.x_out, hi) && ca.x_out > hi) {
      auto [n, f] = cut(ca, hi);
      pa_part = n;
      ca = f;
      a_done = false;
    }
    if (!same_coordinate(cb.x_out, hi) && cb.x_out > hi) {
      auto [n, f] = cut(cb, hi);
      pb_part = n;
      cb = f;
      b_done = false;
    }
    RaySegment m = pa_part;
    m.x_in = std::min(pa_part.x_in, pb_part.x_in);
    m.x_out = hi;
    m.ch = average(pa_part.ch, pb_part.ch);
    out.push_back(m);
    if (a_done) next_a();
    if (b_done) next_b();
  }
}

}  // namespace detail

/// Resolve two segments of the same pixel into 1..3 disjoint segments,
/// ordered by x_in.  Overlapping parts are averaged; the rest is unchanged.
inline std::vector<RaySegment> resolve_overlap(const RaySegment& a, const RaySegment& b) {
  std::vector<RaySegment> out;
  out.reserve(3);
  if (b.x_in < a.x_in) {
    detail::merge_resolve(std::vector<RaySegment>{b}, std::vector<RaySegment>{a}, out);
  } else {
    detail::merge_resolve(std::vector<RaySegment>{a}, std::vector<RaySegment>{b}, out);
  }
  return out;
}

}  // namespace octray
