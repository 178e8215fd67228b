#pragma once

// Clamped cubic splines and prior trajectories reconstructed from features.

#include <span>
#include <vector>

#include "isim/core.hpp"

namespace isim {

// C2 piecewise cubic through (t_i, y_i) with prescribed end slopes.
class ClampedSpline {
 public:
  ClampedSpline() = default;
  // Throws InvalidKnots unless knot times are strictly increasing.
  ClampedSpline(std::span<const double> t, std::span<const double> y, double slope_start, double slope_end);

  double operator()(double t) const { return eval(t, 0); }
  double derivative(double t, int order = 1) const { return eval(t, order); }

  std::span<const double> knots() const { return t_; }
  std::span<const double> values() const { return y_; }
  // Second derivative at each knot.
  std::span<const double> moments() const { return m_; }
  // Cubic coefficient of segment i.
  double cubic_coefficient(std::size_t i) const;
  std::size_t segment_of(double t) const;

 private:
  double eval(double t, int order) const;

  std::vector<double> t_, y_, m_;
};

struct SplineCurve {
  ClampedSpline x, y;

  Vec2 operator()(double t) const { return {x(t), y(t)}; }
  Vec2 velocity(double t) const { return {x.derivative(t), y.derivative(t)}; }
};

// Knots at k*T/K for k = 0..K: the entry point followed by the waypoints.
SplineCurve fit_clamped(const TrajectoryFeature& feature);

inline constexpr double kDefaultPriorDt = 0.4;

struct PriorTrajectory {
  AgentKind kind = AgentKind::Pedestrian;
  double dt = kDefaultPriorDt;
  std::vector<double> times;  // grid, last entry is exactly duration
  std::vector<Vec2> points;
  double duration = 0.0;
  Vec2 destination;  // x_pr(T)
  TrajectoryFeature feature;
  SplineCurve curve;

  // x_pr at `age` seconds after entry, clamped to [0, T]; destination
  // returned exactly for age >= T.
  Vec2 at(double age) const;
  double max_step_speed() const;
};

PriorTrajectory evaluate(const SplineCurve& curve, const TrajectoryFeature& feature, double dt,
                         AgentKind kind = AgentKind::Pedestrian);

inline PriorTrajectory make_prior(const TrajectoryFeature& feature, double dt = kDefaultPriorDt,
                                  AgentKind kind = AgentKind::Pedestrian) {
  return evaluate(fit_clamped(feature), feature, dt, kind);
}

// Grid times 0, dt, 2dt, ..., with a final clamped point at exactly `duration`.
std::vector<double> prior_grid(double duration, double dt);

}  // namespace isim
