#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>

#include "isim/ingest.hpp"
#include "isim/sim.hpp"

using namespace isim;

namespace {

struct Fixture {
  std::shared_ptr<const GmmModel> ped, veh;

  Fixture() {
    SynthConfig c;
    c.seed = 41;
    c.ped_per_route = 40;
    c.veh_per_route = 30;
    const auto s = synth_generate(c);
    std::vector<std::vector<double>> pf, vf;
    for (const auto& t : s.corpus)
      (t.kind == AgentKind::Pedestrian ? pf : vf).push_back(vectorize_trajectory(t).flatten());
    ped = std::make_shared<GmmModel>(fit_em(pf, AgentKind::Pedestrian, 8, 1));
    veh = std::make_shared<GmmModel>(fit_em(vf, AgentKind::Vehicle, 12, 1));
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

std::shared_ptr<const TodDensityModel> flat(AgentKind k, double level) {
  auto m = std::make_shared<TodDensityModel>();
  m->kind = k;
  m->components = {{1.0, 12.0, 1e6}};
  m->amplitude = level * 24.0;
  return m;
}

SimModels models(double ped_level, double veh_level) {
  SimModels m;
  m.gmm = {fx().ped, fx().veh};
  m.density = {flat(AgentKind::Pedestrian, ped_level), flat(AgentKind::Vehicle, veh_level)};
  return m;
}

SimConfig prior_only(std::uint64_t seed = 1) {
  SimConfig c;
  c.seed = seed;
  c.refine = false;
  return c;
}

}  // namespace

TEST_CASE("flat density gives the configured level") {
  CHECK(expected_count(*flat(AgentKind::Pedestrian, 6), 3.0) == 6u);
  CHECK(expected_count(*flat(AgentKind::Pedestrian, 6), 20.0) == 6u);
}

TEST_CASE("prior_gen") {
  const auto& veh = *fx().veh;
  SimConfig cfg;
  Rng rng(3);
  CHECK(prior_gen(veh, 0, std::nullopt, rng, cfg).empty());

  const int comp = 4;
  const auto priors = prior_gen(veh, 5, ComponentSet{comp}, rng, cfg);
  REQUIRE(priors.size() == 5);
  // Entry and exit blocks of the feature: 8 leading dimensions.
  const Eigen::VectorXd mu = veh.means()[comp].head(8);
  const Eigen::MatrixXd cov = veh.covariances()[comp].topLeftCorner(8, 8);
  for (const auto& g : priors) {
    CHECK(g.component == comp);
    const Eigen::VectorXd z = veh.standardizer().forward(Eigen::Map<const Eigen::VectorXd>(
        g.prior->feature.flatten().data(), veh.dimension()));
    const Eigen::VectorXd r = z.head(8) - mu;
    const double maha = std::sqrt(r.dot(cov.ldlt().solve(r)));
    CHECK(maha <= 3.0 * std::sqrt(8.0));
    CHECK(g.prior->duration > 2 * cfg.dt);
    CHECK(g.prior->max_step_speed() <= cfg.speed_cap[1]);
  }

  Rng a(8), b(8);
  const auto pa = prior_gen(*fx().ped, 6, std::nullopt, a, cfg);
  const auto pb = prior_gen(*fx().ped, 6, std::nullopt, b, cfg);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].component == pb[i].component);
    CHECK(pa[i].prior->points == pb[i].prior->points);
  }
}

TEST_CASE("prior_gen gives up on impossible speed caps") {
  SimConfig cfg;
  cfg.speed_cap = {1e-3, 1e-3};
  Rng rng(1);
  try {
    prior_gen(*fx().ped, 1, std::nullopt, rng, cfg);
    FAIL("expected PriorRejection");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::PriorRejection);
  }
}

TEST_CASE("largest-remainder split") {
  CHECK(Simulator::split_deficit(3, {6, 4}) == std::array<unsigned, 2>{2, 1});
  CHECK(Simulator::split_deficit(0, {6, 4}) == std::array<unsigned, 2>{0, 0});
  CHECK(Simulator::split_deficit(5, {0, 0}) == std::array<unsigned, 2>{0, 0});
  CHECK(Simulator::split_deficit(7, {1, 0}) == std::array<unsigned, 2>{7, 0});
  const auto s = Simulator::split_deficit(9, {5, 7});
  CHECK(s[0] + s[1] == 9u);
}

TEST_CASE("no spawns when the target is zero") {
  const auto t = run(prior_only(), models(0, 0), 50);
  REQUIRE(t.ticks.size() == 50);
  for (const auto& r : t.ticks) {
    CHECK(r.spawned.empty());
    CHECK(r.agents.empty());
  }
}

TEST_CASE("population rule keeps the target filled") {
  Simulator sim(prior_only(2), models(6, 4));
  for (int i = 0; i < 200; ++i) {
    const auto r = sim.step();
    CHECK(r.n_target == 10u);
    const unsigned deficit = r.active_before < 10 ? unsigned(10 - r.active_before) : 0u;
    CHECK(r.spawned.size() == deficit);
    CHECK(r.agents.size() == std::max<std::size_t>(r.active_before, 10));
  }
}

TEST_CASE("prior-following agents exit at their destination") {
  Simulator sim(prior_only(3), models(0, 0));
  Command c;
  c.body = SpawnCmd{AgentKind::Vehicle, 1, {2}};
  REQUIRE(sim.apply(c).ok());
  const auto first = sim.step();
  REQUIRE(first.cmd_spawned.size() == 1);
  const auto id = first.cmd_spawned[0].id;
  const double T = sim.state().agents[0].prior->duration;
  std::optional<AgentStatus> how;
  int age = 0;
  while (!how && age < 10000) {
    const auto r = sim.step();
    ++age;
    for (const auto& x : r.removed)
      if (x.id == id) how = x.status;
  }
  REQUIRE(how);
  CHECK(*how == AgentStatus::Exited);
  CHECK(age * sim.config().dt <= sim.config().force_remove_margin * T);
}

TEST_CASE("spawn command records components") {
  Simulator sim(prior_only(4), models(0, 0));
  Command c;
  c.id = 9;
  c.body = SpawnCmd{AgentKind::Vehicle, 3, {5}};
  const auto res = sim.apply(c);
  CHECK(res.ok());
  CHECK(res.scheduled_tick == 1);
  const auto r = sim.step();
  REQUIRE(r.cmd_spawned.size() == 3);
  std::set<std::int64_t> ids;
  for (const auto& s : r.cmd_spawned) {
    CHECK(s.kind == AgentKind::Vehicle);
    CHECK(s.component == 5);
    ids.insert(s.id);
  }
  CHECK(ids.size() == 3);
}

TEST_CASE("command validation") {
  Simulator sim(prior_only(), models(0, 0));
  Command c;
  c.body = SetSpeedCmd{0.0};
  auto r = sim.apply(c);
  CHECK(r.code == Errc::InvalidSpeed);
  CHECK(r.status == "error");
  c.body = SpawnCmd{AgentKind::Pedestrian, 1, {99}};
  CHECK(sim.apply(c).code == Errc::InvalidCondition);
  c.body = SetConditionSetCmd{AgentKind::Vehicle, {1, 3}};
  CHECK(sim.apply(c).ok());
  const auto cond = sim.state().condition[1];
  REQUIRE(cond);
  CHECK(*cond == ComponentSet{1, 3});
  c.body = SetSpeedCmd{2.5};
  CHECK(sim.apply(c).ok());
  CHECK(sim.state().speed == 2.5);

  SimModels none;
  Simulator empty(prior_only(), none);
  c.body = SpawnCmd{AgentKind::Pedestrian, 1, {}};
  CHECK(empty.apply(c).code == Errc::ConfigMismatch);
}

TEST_CASE("condition set restricts population spawns") {
  SimConfig cfg = prior_only(5);
  cfg.condition[0] = ComponentSet{2};
  const auto t = run(cfg, models(5, 0), 40);
  std::size_t n = 0;
  for (const auto& r : t.ticks)
    for (const auto& s : r.spawned) {
      CHECK(s.component == 2);
      ++n;
    }
  CHECK(n >= 5);
}

TEST_CASE("run length, determinism and pause") {
  const auto one = run(prior_only(), models(3, 2), 1);
  CHECK(one.ticks.size() == 1);

  const auto a = run(prior_only(11), models(6, 4), 300);
  const auto b = run(prior_only(11), models(6, 4), 300);
  REQUIRE(a.ticks.size() == b.ticks.size());
  for (std::size_t i = 0; i < a.ticks.size(); ++i) {
    REQUIRE(a.ticks[i].agents.size() == b.ticks[i].agents.size());
    for (std::size_t k = 0; k < a.ticks[i].agents.size(); ++k) {
      CHECK(a.ticks[i].agents[k].id == b.ticks[i].agents[k].id);
      CHECK(distance(a.ticks[i].agents[k].pos, b.ticks[i].agents[k].pos) <= 1e-12);
    }
  }

  Command pause;
  pause.at_tick = 6;
  pause.body = PauseCmd{};
  const Command script[] = {pause};
  const auto p = run(prior_only(), models(3, 2), 100, script);
  CHECK(p.ticks.size() == 5);
  REQUIRE(p.commands.size() == 1);
  CHECK(p.commands[0].at_tick == 6);
}

TEST_CASE("inject scenario schedules a close encounter") {
  Simulator sim(prior_only(6), models(0, 0));
  Command c;
  InjectScenarioCmd inj;
  inj.target_distance = 2.0;
  c.body = inj;
  const auto r = sim.apply(c);
  REQUIRE(r.ok());
  REQUIRE(r.scheduled_tick);
  REQUIRE(r.planned_distance);
  CHECK(*r.planned_distance >= 0.0);
  std::size_t spawned = 0;
  for (int i = 0; i < 400; ++i) spawned += sim.step().cmd_spawned.size();
  CHECK(spawned == 2);
}

TEST_CASE("config validation") {
  SimConfig c;
  c.dt = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.speed = -1;
  try {
    c.validate();
    FAIL("expected InvalidSpeed");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidSpeed);
  }
  SimModels swapped;
  swapped.gmm = {fx().veh, fx().ped};
  CHECK_THROWS_AS(Simulator(prior_only(), swapped), Error);
}
