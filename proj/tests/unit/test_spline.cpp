#include <doctest.h>

#include <cmath>
#include <functional>

#include "isim/spline.hpp"

using namespace isim;

namespace {

TrajectoryFeature feature_of(const std::function<Vec2(double)>& f, const std::function<Vec2(double)>& df, double T,
                             int K) {
  TrajectoryFeature z;
  z.entry_pos = f(0);
  z.entry_vel = df(0);
  z.exit_pos = f(T);
  z.exit_vel = df(T);
  z.duration = T;
  for (int k = 1; k <= K; ++k) z.waypoints.push_back(f(k * T / K));
  return z;
}

}  // namespace

TEST_CASE("linear data is reproduced with zero cubic terms") {
  auto f = [](double t) { return Vec2{2 * t + 1, -t}; };
  auto df = [](double) { return Vec2{2, -1}; };
  const auto z = feature_of(f, df, 5.0, 10);
  const auto c = fit_clamped(z);
  for (std::size_t i = 0; i + 1 < c.x.knots().size(); ++i) {
    CHECK(std::abs(c.x.cubic_coefficient(i)) <= 1e-12);
    CHECK(std::abs(c.y.cubic_coefficient(i)) <= 1e-12);
  }
  for (double t = 0; t <= 5.0; t += 0.37) {
    CHECK(std::abs(c(t).x - f(t).x) <= 1e-12);
    CHECK(std::abs(c(t).y - f(t).y) <= 1e-12);
  }
}

TEST_CASE("cubic data with exact end slopes is reproduced") {
  auto f = [](double t) { return Vec2{t * t * t, 0.0}; };
  auto df = [](double t) { return Vec2{3 * t * t, 0.0}; };
  const auto c = fit_clamped(feature_of(f, df, 1.0, 20));
  for (int i = 0; i <= 1000; ++i) {
    const double t = i / 1000.0;
    CHECK(std::abs(c(t).x - t * t * t) <= 1e-10);
  }
}

TEST_CASE("perturbed waypoint still interpolated") {
  auto f = [](double t) { return Vec2{t, std::sin(t)}; };
  auto df = [](double t) { return Vec2{1, std::cos(t)}; };
  auto z = feature_of(f, df, 4.0, 8);
  z.waypoints[3].y += 1.0;
  const auto c = fit_clamped(z);
  CHECK(c(0.0).x == z.entry_pos.x);
  CHECK(c(0.0).y == z.entry_pos.y);
  for (int k = 1; k <= 8; ++k) {
    const Vec2 w = z.waypoints[std::size_t(k - 1)];
    const Vec2 p = c(k * 4.0 / 8);
    CHECK(std::abs(p.x - w.x) <= 1e-12 * (1 + std::abs(w.x)));
    CHECK(std::abs(p.y - w.y) <= 1e-12 * (1 + std::abs(w.y)));
  }
  CHECK(c.velocity(0.0).y == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(c.velocity(4.0).y == doctest::Approx(std::cos(4.0)).epsilon(1e-9));
}

TEST_CASE("second derivative is continuous at knots") {
  const double t[] = {0, 0.5, 1.7, 2.0, 3.1};
  const double y[] = {1, -1, 2, 0.5, 0};
  const ClampedSpline s(t, y, 0.3, -2.0);
  for (int i = 1; i < 4; ++i) {
    const double h = 1e-7;
    CHECK(s.derivative(t[i] - h, 2) == doctest::Approx(s.derivative(t[i] + h, 2)).epsilon(1e-5));
  }
  CHECK(s.derivative(0.0) == doctest::Approx(0.3));
  CHECK(s.derivative(3.1) == doctest::Approx(-2.0));
}

TEST_CASE("knot validation") {
  const double t[] = {0, 1, 1, 2};
  const double y[] = {0, 1, 2, 3};
  try {
    ClampedSpline s(t, y, 0, 0);
    FAIL("expected InvalidKnots");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidKnots);
  }
  const double one_t[] = {0};
  const double one_y[] = {0};
  CHECK_THROWS_AS(ClampedSpline(one_t, one_y, 0, 0), Error);
  auto z = feature_of([](double s) { return Vec2{s, 0}; }, [](double) { return Vec2{1, 0}; }, 1.0, 4);
  z.duration = 0.0;
  CHECK_THROWS_AS(fit_clamped(z), Error);
}

TEST_CASE("prior grid remainder handling") {
  const auto a = prior_grid(2.0, 0.4);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(0.4 * double(i)));
  CHECK(a.back() == 2.0);
  const auto b = prior_grid(1.0, 0.4);
  REQUIRE(b.size() == 4);
  CHECK(b[2] == doctest::Approx(0.8));
  CHECK(b[3] == 1.0);
}

TEST_CASE("evaluate constant velocity prior") {
  auto f = [](double t) { return Vec2{t, 2.0}; };
  auto df = [](double) { return Vec2{1, 0}; };
  const auto z = feature_of(f, df, 8.0, 20);
  const auto p = make_prior(z, 0.4, AgentKind::Vehicle);
  REQUIRE(p.points.size() == 21);
  CHECK(p.points[0] == z.entry_pos);
  for (std::size_t i = 0; i < p.points.size(); ++i) {
    CHECK(p.points[i].x == doctest::Approx(0.4 * double(i)).epsilon(1e-12));
    CHECK(p.points[i].y == doctest::Approx(2.0));
  }
  CHECK(p.destination == p.curve(8.0));
  CHECK(p.at(100.0) == p.destination);
  CHECK(p.at(1.0).x == doctest::Approx(1.0));
  CHECK(p.curve.velocity(0.0).x == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(p.max_step_speed() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(p.kind == AgentKind::Vehicle);
}
