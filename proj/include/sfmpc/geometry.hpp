#ifndef SFMPC__GEOMETRY_HPP_
#define SFMPC__GEOMETRY_HPP_

/**
 * @file
 * @brief Half-space polytopes in the plane: collision-free convex sets and convex obstacles.
 */

#include "sfmpc/core.hpp"

#include <limits>
#include <string>
#include <vector>

namespace sfmpc {

/// n . p <= b with |n| = 1.
struct Halfspace
{
  Vec2 normal{1.0, 0.0};
  double offset{0.0};

  double slack(const Vec2 & p) const { return offset - normal.dot(p); }
  bool operator==(const Halfspace &) const = default;
};

struct ConvexFreeSet
{
  std::string id;
  std::vector<Halfspace> halfspaces;

  /// Signed clearance: distance to the nearest face, negative outside.
  double clearance(const Vec2 & p) const
  {
    double c = std::numeric_limits<double>::infinity();
    for (const auto & h : halfspaces) { c = std::min(c, h.slack(p)); }
    return c;
  }

  bool operator==(const ConvexFreeSet &) const = default;
};

/// Convex polygon, vertices counterclockwise.
struct ConvexPolygon
{
  std::string id;
  std::vector<Vec2> vertices;

  /// Outward edge half-spaces (inside <=> all slacks >= 0).
  std::vector<Halfspace> halfspaces() const
  {
    std::vector<Halfspace> hs;
    const auto n = vertices.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2 & a = vertices[i];
      const Vec2 & b = vertices[(i + 1) % n];
      const Vec2 e   = b - a;
      Vec2 nrm(e.y(), -e.x());
      nrm.normalize();
      hs.push_back({nrm, nrm.dot(a)});
    }
    return hs;
  }

  /// Penetration depth: distance from an interior point to the boundary, 0 outside.
  double depth(const Vec2 & p) const
  {
    double d = std::numeric_limits<double>::infinity();
    for (const auto & h : halfspaces()) { d = std::min(d, h.slack(p)); }
    return std::max(0.0, d);
  }

  bool operator==(const ConvexPolygon & o) const
  {
    if (id != o.id || vertices.size() != o.vertices.size()) { return false; }
    for (std::size_t i = 0; i < vertices.size(); ++i) {
      if (vertices[i] != o.vertices[i]) { return false; }
    }
    return true;
  }
};

inline Halfspace make_halfspace(const Vec2 & normal, double offset)
{
  const double n = normal.norm();
  require(n > 0.0, "half-space normal must be nonzero");
  return {normal / n, offset / n};
}

/// Axis-aligned box as a free set.
inline ConvexFreeSet box_set(std::string id, double x0, double y0, double x1, double y1)
{
  return {std::move(id),
    {{Vec2(1, 0), x1}, {Vec2(-1, 0), -x0}, {Vec2(0, 1), y1}, {Vec2(0, -1), -y0}}};
}

inline ConvexPolygon box_polygon(std::string id, double x0, double y0, double x1, double y1)
{
  return {std::move(id), {Vec2(x0, y0), Vec2(x1, y0), Vec2(x1, y1), Vec2(x0, y1)}};
}

struct ChebyshevBall
{
  Vec2 center{Vec2::Zero()};
  double radius{-std::numeric_limits<double>::infinity()};
};

/**
 * @brief Largest inscribed ball of {p : n_i . p <= b_i} intersected with a box of half-width
 * `bound`. A negative radius means the set is empty.
 *
 * The 3-variable LP max r s.t. n_i . c + r <= b_i is solved by enumerating its vertices; the
 * polytopes here have a handful of faces, so this is exact and cheap.
 */
inline ChebyshevBall chebyshev_ball(std::vector<Halfspace> hs, double bound = 1e3)
{
  hs.push_back({Vec2(1, 0), bound});
  hs.push_back({Vec2(-1, 0), bound});
  hs.push_back({Vec2(0, 1), bound});
  hs.push_back({Vec2(0, -1), bound});
  const auto m = hs.size();
  ChebyshevBall best;
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      for (std::size_t c = b + 1; c < m; ++c) {
        Eigen::Matrix3d A;
        Eigen::Vector3d rhs;
        std::size_t idx[3] = {a, b, c};
        for (int r = 0; r < 3; ++r) {
          A(r, 0) = hs[idx[r]].normal.x();
          A(r, 1) = hs[idx[r]].normal.y();
          A(r, 2) = 1.0;
          rhs[r]  = hs[idx[r]].offset;
        }
        Eigen::FullPivLU<Eigen::Matrix3d> lu(A);
        if (!lu.isInvertible()) { continue; }
        const Eigen::Vector3d x = lu.solve(rhs);
        if (!(x[2] > best.radius)) { continue; }
        bool ok = true;
        for (const auto & h : hs) {
          if (h.normal.dot(x.head<2>()) + x[2] > h.offset + 1e-9 * (1.0 + std::abs(h.offset))) {
            ok = false;
            break;
          }
        }
        if (ok) { best = {x.head<2>(), x[2]}; }
      }
    }
  }
  return best;
}

inline double intersection_radius(const ConvexFreeSet & a, const ConvexFreeSet & b)
{
  std::vector<Halfspace> hs = a.halfspaces;
  hs.insert(hs.end(), b.halfspaces.begin(), b.halfspaces.end());
  return chebyshev_ball(std::move(hs)).radius;
}

inline double intersection_radius(const ConvexFreeSet & a, const ConvexPolygon & b)
{
  std::vector<Halfspace> hs = a.halfspaces;
  const auto ob = b.halfspaces();
  hs.insert(hs.end(), ob.begin(), ob.end());
  return chebyshev_ball(std::move(hs)).radius;
}

inline bool is_convex_ccw(const ConvexPolygon & p)
{
  const auto n = p.vertices.size();
  if (n < 3) { return false; }
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 e1 = p.vertices[(i + 1) % n] - p.vertices[i];
    const Vec2 e2 = p.vertices[(i + 2) % n] - p.vertices[(i + 1) % n];
    if (e1.x() * e2.y() - e1.y() * e2.x() <= 0.0) { return false; }
  }
  return true;
}

}  // namespace sfmpc

#endif  // SFMPC__GEOMETRY_HPP_
