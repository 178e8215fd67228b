#include <doctest.h>

#include <cmath>
#include <numbers>

#include "isim/core.hpp"
#include "isim/rng.hpp"

using namespace isim;

namespace {

Trajectory line_traj(Vec2 a, Vec2 b, double duration, double dt, double t0 = 0.0) {
  Trajectory t;
  t.t0 = t0;
  t.dt = dt;
  const int n = int(std::lround(duration / dt));
  for (int i = 0; i <= n; ++i) t.points.push_back(lerp(a, b, double(i) / n));
  return t;
}

// Piecewise-linear interpolation over sorted samples.
double pl(const std::vector<double>& ts, const std::vector<double>& xs, double t) {
  for (std::size_t i = 1; i < ts.size(); ++i)
    if (t <= ts[i]) return xs[i - 1] + (xs[i] - xs[i - 1]) * (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
  return xs.back();
}

}  // namespace

TEST_CASE("resample_uniform midpoint and endpoints") {
  const TimedPoint a[] = {{0, {0, 0}}, {1, {2, 0}}};
  auto t = resample_uniform(a, 0.5);
  REQUIRE(t.points.size() == 3);
  CHECK(t.points[0] == Vec2{0, 0});
  CHECK(t.points[1] == Vec2{1, 0});
  CHECK(t.points[2] == Vec2{2, 0});

  const TimedPoint b[] = {{0, {0, 0}}, {2, {0, 4}}};
  t = resample_uniform(b, 2.0);
  REQUIRE(t.points.size() == 2);
  CHECK(t.points[1] == Vec2{0, 4});
}

TEST_CASE("resample_uniform matches a piecewise-linear oracle") {
  const std::vector<double> ts{0.0, 0.3, 0.9, 1.4, 2.2, 2.5, 3.0};
  std::vector<double> xs;
  std::vector<TimedPoint> raw;
  for (double t : ts) {
    xs.push_back(t * t);
    raw.push_back({t, {t * t, 0.0}});
  }
  const auto out = resample_uniform(raw, 0.5);
  REQUIRE(out.points.size() == 7);
  for (std::size_t i = 0; i < out.points.size(); ++i) {
    CHECK(out.points[i].x == doctest::Approx(pl(ts, xs, 0.5 * double(i))).epsilon(1e-12));
    CHECK(out.points[i].y == 0.0);
  }
}

TEST_CASE("resample_uniform rejects bad input") {
  const TimedPoint one[] = {{0, {0, 0}}};
  CHECK_THROWS_AS(resample_uniform(one, 0.5), Error);
  const TimedPoint back[] = {{1, {0, 0}}, {0, {1, 0}}};
  CHECK_THROWS_AS(resample_uniform(back, 0.5), Error);
  const TimedPoint ok[] = {{0, {0, 0}}, {1, {1, 0}}};
  CHECK_THROWS_AS(resample_uniform(ok, 0.0), Error);
}

TEST_CASE("vectorize constant velocity") {
  const auto t = line_traj({0, 0}, {10, 0}, 10.0, 0.1);
  const auto f = vectorize_trajectory(t, 20);
  CHECK(f.duration == doctest::Approx(10.0));
  CHECK(f.entry_vel.x == doctest::Approx(1.0));
  CHECK(f.entry_vel.y == doctest::Approx(0.0));
  CHECK(f.exit_vel.x == doctest::Approx(1.0));
  REQUIRE(f.waypoint_count() == 20);
  for (int k = 0; k < 20; ++k) CHECK(f.waypoints[std::size_t(k)].x == doctest::Approx(0.5 * (k + 1)));
  CHECK(f.exit_pos.x == doctest::Approx(10.0));
}

TEST_CASE("vectorize stationary") {
  const auto t = line_traj({3, 3}, {3, 3}, 8.0, 0.5);
  const auto f = vectorize_trajectory(t);
  CHECK(f.entry_vel == Vec2{0, 0});
  CHECK(f.exit_vel == Vec2{0, 0});
  CHECK(f.duration == doctest::Approx(8.0));
  for (const auto& w : f.waypoints) CHECK(w == Vec2{3, 3});
}

TEST_CASE("vectorize quarter arc within chord bound") {
  const double r = 5.0;
  const int n = 40;
  const double half_pi = std::numbers::pi / 2;
  Trajectory t;
  t.dt = 0.25;
  for (int i = 0; i < n; ++i) {
    const double th = half_pi * i / (n - 1);
    t.points.push_back({r * std::cos(th), r * std::sin(th)});
  }
  const auto f = vectorize_trajectory(t, 20);
  const double dth = half_pi / (n - 1);
  const double bound = r * (1 - std::cos(dth / 2)) + 1e-12;
  for (int k = 1; k <= 20; ++k) {
    const double th = half_pi * k / 20.0;
    const Vec2 exact{r * std::cos(th), r * std::sin(th)};
    CHECK(distance(f.waypoints[std::size_t(k - 1)], exact) <= bound);
  }
}

TEST_CASE("feature flatten round trip") {
  const auto f = vectorize_trajectory(line_traj({1, 2}, {7, -3}, 6.0, 0.2), 5);
  const auto z = f.flatten();
  REQUIRE(z.size() == feature_dimension(5));
  const auto g = TrajectoryFeature::unflatten(z);
  CHECK(g.flatten() == z);
  CHECK(z[0] == 1.0);
  CHECK(z.back() == doctest::Approx(6.0));
}

TEST_CASE("slice_scene masks") {
  std::vector<Trajectory> full{line_traj({0, 0}, {1, 0}, 1.9, 0.1), line_traj({0, 1}, {1, 1}, 1.9, 0.1)};
  auto s = slice_scene(full, 0, 20);
  REQUIRE(s.agents.size() == 2);
  for (const auto& a : s.agents)
    for (auto m : a.mask) CHECK(m == 1);

  // Present on frames 5..12.
  std::vector<Trajectory> part{line_traj({0, 0}, {0.7, 0}, 0.7, 0.1, 0.5)};
  s = slice_scene(part, 0, 20);
  REQUIRE(s.agents.size() == 1);
  for (int f = 0; f < 20; ++f) CHECK(s.agents[0].present(f) == (f >= 5 && f <= 12));
  CHECK(s.agents[0].first_present() == 5);
  CHECK(s.agents[0].last_present() == 12);
}

TEST_CASE("slice_scene agent count equals brute-force overlap") {
  Rng rng(5);
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 100; ++i) {
    const auto start = std::int64_t(rng.below(200));
    const int len = 1 + int(rng.below(40));
    auto t = line_traj({0, 0}, {1, 1}, 0.1 * (len - 1), 0.1);
    if (len == 1) t.points.resize(1);
    t.t0 = 0.1 * double(start);
    t.agent_id = i;
    trajs.push_back(t);
  }
  for (int w = 0; w < 20; ++w) {
    const auto start = std::int64_t(rng.below(220));
    const auto s = slice_scene(trajs, start, 20);
    std::size_t expected = 0;
    for (const auto& t : trajs) {
      const auto a = std::llround(t.t0 / 0.1);
      const auto b = a + std::int64_t(t.points.size()) - 1;
      const auto lo = std::max<std::int64_t>(a, start), hi = std::min<std::int64_t>(b, start + 19);
      if (hi - lo + 1 >= 2) ++expected;
    }
    CHECK(s.agents.size() == expected);
  }
}

TEST_CASE("trajectory interpolation and validation") {
  const auto t = line_traj({0, 0}, {4, 0}, 4.0, 1.0, 10.0);
  CHECK(t.at(1.5).x == doctest::Approx(1.5));
  CHECK(t.at(-1).x == 0.0);
  CHECK(t.at(9).x == 4.0);
  CHECK(t.end_time() == doctest::Approx(14.0));
  Trajectory bad = t;
  bad.points[1].x = std::nan("");
  CHECK_THROWS_AS(validate(bad), Error);
  bad = t;
  bad.dt = 0;
  CHECK_THROWS_AS(validate(bad), Error);
}

TEST_CASE("kind tags") {
  CHECK(kind_tag(AgentKind::Pedestrian) == "ped");
  CHECK(parse_kind("veh") == AgentKind::Vehicle);
  CHECK_THROWS_AS(parse_kind("bike"), Error);
}
