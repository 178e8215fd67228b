#include "isim/spline.hpp"

#include <algorithm>
#include <cmath>

namespace isim {

ClampedSpline::ClampedSpline(std::span<const double> t, std::span<const double> y, double slope_start,
                             double slope_end)
    : t_(t.begin(), t.end()), y_(y.begin(), y.end()) {
  if (t.size() != y.size()) throw Error(Errc::InvalidKnots, "knot and value counts differ");
  if (t.size() < 2) throw Error(Errc::InvalidKnots, "a spline needs at least 2 knots");
  for (std::size_t i = 1; i < t.size(); ++i)
    if (!(t[i] > t[i - 1]))
      throw Error(Errc::InvalidKnots, "knot times must be strictly increasing (index " + std::to_string(i) + ")");

  // Tridiagonal system for the knot second derivatives, solved by the
  // Thomas algorithm.
  const std::size_t n = t.size();
  std::vector<double> sub(n, 0.0), diag(n, 0.0), sup(n, 0.0), rhs(n, 0.0);
  auto h = [&](std::size_t i) { return t[i + 1] - t[i]; };
  auto slope = [&](std::size_t i) { return (y[i + 1] - y[i]) / h(i); };
  diag[0] = 2.0 * h(0);
  sup[0] = h(0);
  rhs[0] = 6.0 * (slope(0) - slope_start);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    sub[i] = h(i - 1);
    diag[i] = 2.0 * (h(i - 1) + h(i));
    sup[i] = h(i);
    rhs[i] = 6.0 * (slope(i) - slope(i - 1));
  }
  sub[n - 1] = h(n - 2);
  diag[n - 1] = 2.0 * h(n - 2);
  rhs[n - 1] = 6.0 * (slope_end - slope(n - 2));

  for (std::size_t i = 1; i < n; ++i) {
    const double w = sub[i] / diag[i - 1];
    diag[i] -= w * sup[i - 1];
    rhs[i] -= w * rhs[i - 1];
  }
  m_.assign(n, 0.0);
  m_[n - 1] = rhs[n - 1] / diag[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) m_[i] = (rhs[i] - sup[i] * m_[i + 1]) / diag[i];
}

std::size_t ClampedSpline::segment_of(double t) const {
  if (t <= t_.front()) return 0;
  if (t >= t_.back()) return t_.size() - 2;
  const auto it = std::upper_bound(t_.begin(), t_.end(), t);
  return static_cast<std::size_t>(std::distance(t_.begin(), it)) - 1;
}

double ClampedSpline::cubic_coefficient(std::size_t i) const {
  return (m_[i + 1] - m_[i]) / (6.0 * (t_[i + 1] - t_[i]));
}

double ClampedSpline::eval(double t, int order) const {
  const std::size_t i = segment_of(t);
  const double h = t_[i + 1] - t_[i];
  const double tau = t - t_[i];
  const double b = (y_[i + 1] - y_[i]) / h - h * (2.0 * m_[i] + m_[i + 1]) / 6.0;
  const double c = 0.5 * m_[i];
  const double d = cubic_coefficient(i);
  switch (order) {
    case 0: return y_[i] + tau * (b + tau * (c + tau * d));
    case 1: return b + tau * (2.0 * c + 3.0 * d * tau);
    case 2: return 2.0 * c + 6.0 * d * tau;
    case 3: return 6.0 * d;
    default: return 0.0;
  }
}

SplineCurve fit_clamped(const TrajectoryFeature& feature) {
  if (!(feature.duration > 0.0) || !std::isfinite(feature.duration))
    throw Error(Errc::InvalidKnots, "feature duration must be positive");
  const std::size_t k = feature.waypoints.size();
  if (k == 0) throw Error(Errc::InvalidKnots, "feature has no waypoints");
  std::vector<double> t(k + 1), xs(k + 1), ys(k + 1);
  t[0] = 0.0;
  xs[0] = feature.entry_pos.x;
  ys[0] = feature.entry_pos.y;
  for (std::size_t i = 1; i <= k; ++i) {
    t[i] = i == k ? feature.duration : double(i) * feature.duration / double(k);
    xs[i] = feature.waypoints[i - 1].x;
    ys[i] = feature.waypoints[i - 1].y;
  }
  return {ClampedSpline(t, xs, feature.entry_vel.x, feature.exit_vel.x),
          ClampedSpline(t, ys, feature.entry_vel.y, feature.exit_vel.y)};
}

std::vector<double> prior_grid(double duration, double dt) {
  if (!(dt > 0.0)) throw Error(Errc::InvalidInput, "grid dt must be positive");
  const double tol = 1e-9 * std::max(1.0, duration);
  const auto full = static_cast<std::size_t>(std::floor(duration / dt + 1e-9));
  std::vector<double> g;
  g.reserve(full + 2);
  for (std::size_t i = 0; i <= full; ++i) g.push_back(double(i) * dt);
  if (duration - g.back() > tol)
    g.push_back(duration);
  else
    g.back() = duration;
  if (g.size() == 1) g.push_back(duration);
  return g;
}

Vec2 PriorTrajectory::at(double age) const {
  if (age >= duration) return destination;
  if (age <= 0.0) return feature.entry_pos;
  return curve(age);
}

double PriorTrajectory::max_step_speed() const {
  double v = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i)
    v = std::max(v, distance(points[i], points[i - 1]) / (times[i] - times[i - 1]));
  return v;
}

PriorTrajectory evaluate(const SplineCurve& curve, const TrajectoryFeature& feature, double dt, AgentKind kind) {
  PriorTrajectory p;
  p.kind = kind;
  p.dt = dt;
  p.duration = feature.duration;
  p.feature = feature;
  p.curve = curve;
  p.destination = feature.waypoints.back();
  p.times = prior_grid(feature.duration, dt);
  p.points.reserve(p.times.size());
  for (double t : p.times) p.points.push_back(p.at(t));
  return p;
}

}  // namespace isim
