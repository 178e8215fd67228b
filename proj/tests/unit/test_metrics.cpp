#include <doctest.h>

#include <cmath>

#include "isim/metrics.hpp"

using namespace isim;

namespace {

TickRecord tick(std::int64_t n, std::vector<AgentSample> agents) {
  TickRecord r;
  r.tick = n;
  r.agents = std::move(agents);
  return r;
}

Trajectory straight(std::int64_t id, Vec2 from, Vec2 vel, int frames, double dt = 0.4) {
  Trajectory t;
  t.agent_id = id;
  t.dt = dt;
  for (int i = 0; i < frames; ++i) t.points.push_back(from + vel * (i * dt));
  return t;
}

}  // namespace

TEST_CASE("ade") {
  Tracks truth{{{0, 0}, {1, 0}}}, pred = truth;
  TrackMasks m{{1, 1}};
  CHECK(ade(pred, truth, m) == 0.0);
  pred = {{{3, 0}, {1, 4}}};
  CHECK(ade(pred, truth, m) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-14));
  CHECK(ade(pred, truth, m, true) == doctest::Approx(3.5));

  Tracks t2{truth[0], {{5, 5}, {6, 6}}}, p2{pred[0], {{50, 5}, {6, 60}}};
  TrackMasks m2{{1, 1}, {0, 0}};
  CHECK(ade(p2, t2, m2) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-14));
  TrackMasks none{{0, 0}};
  CHECK_THROWS_AS(ade(pred, truth, none), Error);
}

TEST_CASE("fde") {
  Tracks truth{{{0, 0}, {1, 0}}, {{0, 0}, {2, 0}}};
  CHECK(fde(truth, truth, {{1, 1}, {1, 1}}) == 0.0);
  Tracks pred{{{0, 0}, {1, 0}}, {{0, 0}, {4, 0}}};
  CHECK(fde(pred, truth, {{1, 1}, {1, 1}}) == doctest::Approx(std::sqrt(2.0)));
  CHECK(fde(pred, truth, {{1, 1}, {1, 1}}, true) == doctest::Approx(1.0));
  CHECK(fde(pred, truth, {{1, 1}, {1, 0}}) == 0.0);
}

TEST_CASE("min_separation of static agents") {
  SimTrace t;
  t.ticks.push_back(tick(1, {{1, AgentKind::Pedestrian, {0, 0}}}));
  t.ticks.push_back(tick(2, {{1, AgentKind::Pedestrian, {0, 0}}, {2, AgentKind::Vehicle, {3, 4}}}));
  t.ticks.push_back(tick(3, {{1, AgentKind::Pedestrian, {0, 0}}, {2, AgentKind::Vehicle, {3, 4}}}));
  const auto s = min_separation(t);
  CHECK(s.distance == 5.0);
  CHECK(s.tick == 2);
  CHECK(min_separation(t, PairFilter::PedVeh).distance == 5.0);
  CHECK_THROWS_AS(min_separation(t, PairFilter::PedPed), Error);
}

TEST_CASE("min_separation of crossing straight lines") {
  // A moves along +x, B along +y, both pass the origin at tick 10 with a
  // 0.3 tick offset; closest approach of the sampled sweep is the closed
  // form evaluated at integer ticks.
  SimTrace t;
  double best = 1e300;
  for (int k = 0; k <= 20; ++k) {
    const Vec2 a{double(k - 10), 0.0};
    const Vec2 b{0.0, double(k) - 10.3};
    best = std::min(best, std::hypot(a.x, b.y));
    t.ticks.push_back(tick(k + 1, {{1, AgentKind::Pedestrian, a}, {2, AgentKind::Vehicle, b}}));
  }
  const auto s = min_separation(t, PairFilter::PedVeh);
  CHECK(s.distance == doctest::Approx(best).epsilon(1e-12));
  CHECK(s.distance < 0.5);
  CHECK(s.tick == 11);
}

TEST_CASE("pair filters") {
  CHECK(parse_pair_filter("ped-veh") == PairFilter::PedVeh);
  CHECK(parse_pair_filter("any") == PairFilter::Any);
  CHECK_THROWS_AS(parse_pair_filter("bike-bike"), Error);
}

TEST_CASE("overshoot along the exit direction") {
  TrajectoryFeature f;
  f.exit_pos = {10, 0};
  f.exit_vel = {2, 0};
  CHECK(overshoot({12, 1}, f) == doctest::Approx(2.0));
  CHECK(overshoot({8, 0}, f) == 0.0);
}

TEST_CASE("constant-velocity predictor is exact on constant-velocity scenes") {
  std::vector<Trajectory> trajs{straight(1, {-8, 0}, {1, 0}, 60), straight(2, {0, -8}, {0, 0.8}, 60)};
  Scene s = slice_scene(trajs, 3, 40);
  for (auto& a : s.agents) a.feature = vectorize_trajectory(trajs[std::size_t(a.agent_id - 1)]);
  const Scene scenes[] = {s};
  EvalOptions o;
  o.horizon = 32;
  const auto r = evaluate(constant_velocity_predictor(0.4), scenes, o);
  CHECK(r.agents.size() == 2);
  CHECK(r.ade <= 1e-9);
  CHECK(r.fde <= 1e-9);
  CHECK(r.calls == 1);
  CHECK(r.fps() > 0.0);
  const auto agg = aggregate(r, [](const AgentEval& e) { return e.agent_id == 2; });
  CHECK(agg.agents == 1);

  const auto prior = evaluate(prior_predictor(0.4), scenes, o);
  CHECK(prior.ade <= 1e-6);

  EvalOptions too_long = o;
  too_long.horizon = 40;
  CHECK_THROWS_AS(evaluate(constant_velocity_predictor(0.4), scenes, too_long), Error);
}

TEST_CASE("evaluation tables") {
  const std::vector<TableRow> rows{{"wpts", 12, "wpts", 1.23456, 2.5, 900.0}, {"cv", 0, "-", 3, 4, 1e6}};
  const auto text = format_table(rows);
  CHECK(text.find("Model") != std::string::npos);
  CHECK(text.find("1.235") != std::string::npos);
  const auto csv = format_table_csv(rows);
  CHECK(csv.rfind("Model,L_pd,Goal,ADE,FDE,FPS\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
