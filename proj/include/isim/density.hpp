#pragma once

// Time-of-day model of the concurrent agent count.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "isim/core.hpp"
#include "isim/rng.hpp"

namespace isim {

struct TodComponent {
  double weight = 1.0;
  double mean = 0.0;  // hours on the shifted axis
  double std = 1.0;   // hours
};

// Components are Gaussians truncated to the shifted day [-0.5, 23.5), so the
// hourly bins are centred on integer hours and the axis wraps once per day.
struct TodDensityModel {
  AgentKind kind = AgentKind::Pedestrian;
  double shift_hours = 8.0;
  std::vector<TodComponent> components;
  double amplitude = 0.0;
  double fit_rmse = 0.0;

  static constexpr double kAxisLo = -0.5;
  static constexpr double kAxisHi = 23.5;

  // Maps a clock hour onto the shifted axis, wrapping modulo 24.
  double shifted(double hour) const;
  double density(double shifted_hour) const;
  double expected_value(double hour) const { return amplitude * density(shifted(hour)); }
};

struct TodFitOptions {
  int max_iter = 300;
  double tol = 1e-10;
  double min_std = 0.25;
  double max_std = 48.0;
};

TodDensityModel fit_tod(std::span<const double> hourly_counts, AgentKind kind, int n_components,
                        double shift_hours = 8.0, const TodFitOptions& opts = {});

unsigned expected_count(const TodDensityModel& model, double hour);

// Optional Poisson draw around the expected level.
unsigned sample_count(const TodDensityModel& model, double hour, Rng& rng);

inline int default_tod_components(AgentKind k) { return k == AgentKind::Pedestrian ? 4 : 3; }

}  // namespace isim
