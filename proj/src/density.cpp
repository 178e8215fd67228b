#include "isim/density.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>

namespace isim {

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014327;

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double truncation_mass(double mean, double sd) {
  return normal_cdf((TodDensityModel::kAxisHi - mean) / sd) - normal_cdf((TodDensityModel::kAxisLo - mean) / sd);
}

double truncated_pdf(double s, double mean, double sd) {
  if (s < TodDensityModel::kAxisLo || s >= TodDensityModel::kAxisHi) return 0.0;
  const double z = (s - mean) / sd;
  const double mass = truncation_mass(mean, sd);
  if (!(mass > 0.0)) return 0.0;
  return kInvSqrt2Pi * std::exp(-0.5 * z * z) / (sd * mass);
}

// Minimizes f over R^2 with a Nelder-Mead simplex. Termination depends only
// on the simplex size, so rescaling f leaves the path unchanged.
using Point2 = std::array<double, 2>;

Point2 nelder_mead(const std::function<double(const Point2&)>& f, Point2 start, Point2 step, int max_iter) {
  std::array<Point2, 3> p{start, start, start};
  p[1][0] += step[0];
  p[2][1] += step[1];
  std::array<double, 3> v{f(p[0]), f(p[1]), f(p[2])};
  auto combine = [](const Point2& a, const Point2& b, double t) {
    return Point2{a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])};
  };
  for (int it = 0; it < max_iter; ++it) {
    std::array<int, 3> idx{0, 1, 2};
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return v[std::size_t(a)] < v[std::size_t(b)]; });
    const auto best = std::size_t(idx[0]), mid = std::size_t(idx[1]), worst = std::size_t(idx[2]);
    double size = 0.0;
    for (std::size_t i : {mid, worst})
      size = std::max(size, std::abs(p[i][0] - p[best][0]) + std::abs(p[i][1] - p[best][1]));
    if (size < 1e-10) break;
    const Point2 centroid{0.5 * (p[best][0] + p[mid][0]), 0.5 * (p[best][1] + p[mid][1])};
    const Point2 refl = combine(centroid, p[worst], -1.0);
    const double fr = f(refl);
    if (fr < v[best]) {
      const Point2 exp = combine(centroid, p[worst], -2.0);
      const double fe = f(exp);
      if (fe < fr) {
        p[worst] = exp;
        v[worst] = fe;
      } else {
        p[worst] = refl;
        v[worst] = fr;
      }
    } else if (fr < v[mid]) {
      p[worst] = refl;
      v[worst] = fr;
    } else {
      const bool outside = fr < v[worst];
      const Point2 con = combine(centroid, outside ? refl : p[worst], 0.5);
      const double fc = f(con);
      if (fc < std::min(fr, v[worst])) {
        p[worst] = con;
        v[worst] = fc;
      } else {
        for (std::size_t i : {mid, worst}) {
          p[i] = combine(p[best], p[i], 0.5);
          v[i] = f(p[i]);
        }
      }
    }
  }
  const auto best = std::size_t(std::distance(v.begin(), std::min_element(v.begin(), v.end())));
  return p[best];
}

struct Moments {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0;
};

}  // namespace

double TodDensityModel::shifted(double hour) const {
  double s = std::fmod(hour - shift_hours, 24.0);
  if (s < 0.0) s += 24.0;
  if (s >= kAxisHi) s -= 24.0;
  return s;
}

double TodDensityModel::density(double shifted_hour) const {
  double d = 0.0;
  for (const auto& c : components) d += c.weight * truncated_pdf(shifted_hour, c.mean, c.std);
  return d;
}

TodDensityModel fit_tod(std::span<const double> hourly_counts, AgentKind kind, int n_components,
                        double shift_hours, const TodFitOptions& opts) {
  if (hourly_counts.size() != 24)
    throw Error(Errc::InvalidInput, "expected 24 hourly counts, got " + std::to_string(hourly_counts.size()));
  if (n_components < 1) throw Error(Errc::InvalidInput, "component count must be >= 1");
  double total = 0.0;
  for (double c : hourly_counts) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw Error(Errc::InvalidInput, "hourly counts must be finite and >= 0");
    total += c;
  }
  if (!(total > 0.0)) throw Error(Errc::InsufficientData, "all hourly counts are zero");

  TodDensityModel model;
  model.kind = kind;
  model.shift_hours = shift_hours;

  // Bin values on the shifted axis, ordered along it.
  std::array<double, 24> pos{}, cnt{};
  for (int h = 0; h < 24; ++h) {
    const double s = model.shifted(double(h));
    const auto i = static_cast<std::size_t>(std::lround(s));
    pos[i] = double(i);
    cnt[i] = hourly_counts[std::size_t(h)];
  }

  // Quantile initialisation.
  double mean_all = 0.0, var_all = 0.0;
  for (std::size_t i = 0; i < 24; ++i) mean_all += cnt[i] * pos[i];
  mean_all /= total;
  for (std::size_t i = 0; i < 24; ++i) var_all += cnt[i] * (pos[i] - mean_all) * (pos[i] - mean_all);
  var_all = var_all / total + 1.0 / 12.0;
  const int n = n_components;
  model.components.resize(std::size_t(n));
  for (int k = 0; k < n; ++k) {
    const double q = (double(k) + 0.5) / double(n) * total;
    double acc = 0.0;
    double at = pos[23];
    for (std::size_t i = 0; i < 24; ++i) {
      acc += cnt[i];
      if (acc >= q) {
        at = pos[i];
        break;
      }
    }
    model.components[std::size_t(k)] = {1.0 / n, at, std::clamp(std::sqrt(var_all) / n, opts.min_std, opts.max_std)};
  }

  const double log_lo = std::log(opts.min_std), log_hi = std::log(opts.max_std);
  double prev_ll = -std::numeric_limits<double>::infinity();
  std::vector<std::array<double, 24>> resp(static_cast<std::size_t>(n));
  for (int it = 0; it < opts.max_iter; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < 24; ++i) {
      double sum = 0.0;
      for (int k = 0; k < n; ++k) {
        const auto& c = model.components[std::size_t(k)];
        const double r = c.weight * truncated_pdf(pos[i], c.mean, c.std);
        resp[std::size_t(k)][i] = r;
        sum += r;
      }
      if (cnt[i] > 0.0) ll += cnt[i] * std::log(std::max(sum, 1e-300));
      for (int k = 0; k < n; ++k)
        resp[std::size_t(k)][i] = sum > 0.0 ? resp[std::size_t(k)][i] / sum : 1.0 / n;
    }
    if (std::isfinite(prev_ll) && std::abs(ll - prev_ll) < opts.tol * total) break;
    prev_ll = ll;

    for (int k = 0; k < n; ++k) {
      Moments mo;
      for (std::size_t i = 0; i < 24; ++i) {
        const double a = cnt[i] * resp[std::size_t(k)][i];
        mo.s0 += a;
        mo.s1 += a * pos[i];
        mo.s2 += a * pos[i] * pos[i];
      }
      auto& comp = model.components[std::size_t(k)];
      comp.weight = mo.s0 / total;
      if (!(mo.s0 > 0.0)) continue;
      // Counts are spread uniformly over their one-hour bin.
      mo.s2 += mo.s0 / 12.0;
      auto neg_ll = [&](const Point2& x) {
        const double mu = x[0];
        const double lsd = std::clamp(x[1], log_lo, log_hi);
        const double sd = std::exp(lsd);
        const double mass = truncation_mass(mu, sd);
        if (!(mass > 0.0)) return std::numeric_limits<double>::max();
        const double quad = (mo.s2 - 2.0 * mu * mo.s1 + mu * mu * mo.s0) / (2.0 * sd * sd);
        const double penalty = std::abs(x[1] - lsd) * mo.s0;  // keeps the simplex inside the bounds
        return mo.s0 * (lsd + std::log(mass)) + quad + penalty;
      };
      const Point2 best = nelder_mead(neg_ll, {comp.mean, std::log(comp.std)}, {0.5, 0.2}, 400);
      comp.mean = best[0];
      comp.std = std::exp(std::clamp(best[1], log_lo, log_hi));
    }
    double wsum = 0.0;
    for (const auto& c : model.components) wsum += c.weight;
    for (auto& c : model.components) c.weight /= wsum;
  }

  // Least-squares amplitude against the counts.
  double num = 0.0, den = 0.0;
  for (int h = 0; h < 24; ++h) {
    const double d = model.density(model.shifted(double(h)));
    num += hourly_counts[std::size_t(h)] * d;
    den += d * d;
  }
  model.amplitude = den > 0.0 ? std::max(0.0, num / den) : 0.0;
  double sq = 0.0;
  for (int h = 0; h < 24; ++h) {
    const double r = hourly_counts[std::size_t(h)] - model.expected_value(double(h));
    sq += r * r;
  }
  model.fit_rmse = std::sqrt(sq / 24.0);
  return model;
}

unsigned expected_count(const TodDensityModel& model, double hour) {
  const double v = std::round(model.expected_value(hour));
  return v > 0.0 ? static_cast<unsigned>(v) : 0u;
}

unsigned sample_count(const TodDensityModel& model, double hour, Rng& rng) {
  return static_cast<unsigned>(rng.poisson(model.expected_value(hour)));
}

}  // namespace isim
