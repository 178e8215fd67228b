#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "isim/io.hpp"

using namespace isim;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "isim_test_io";
  fs::create_directories(dir);
  return (dir / name).string();
}

GmmModel small_gmm() {
  Rng rng(1);
  std::vector<std::vector<double>> z;
  for (int i = 0; i < 200; ++i) z.push_back({rng.normal(i % 2 ? 3.0 : -3.0, 1.0), rng.normal(), rng.uniform()});
  return fit_em(z, AgentKind::Vehicle, 2, 3);
}

}  // namespace

TEST_CASE("mixture model round trip") {
  const auto g = small_gmm();
  const auto path = temp_path("gmm.json");
  write_json_file(path, to_json(g));
  const auto back = load_gmm(path);
  CHECK(back.kind() == AgentKind::Vehicle);
  CHECK(back.components() == 2);
  const double z[] = {0.5, -1.0, 0.2};
  CHECK(log_pdf(back, z) == log_pdf(g, z));

  Json bad = to_json(g);
  bad["type"] = "forecaster";
  CHECK_THROWS_AS(gmm_from_json(bad), Error);
  bad = to_json(g);
  bad["weights"] = Json::array({1.0});
  CHECK_THROWS_AS(gmm_from_json(bad), Error);
}

TEST_CASE("density model round trip") {
  TodDensityModel m;
  m.kind = AgentKind::Vehicle;
  m.components = {{0.4, 2.0, 1.0}, {0.6, 9.5, 2.5}};
  m.amplitude = 33.0;
  const auto back = density_from_json(to_json(m));
  CHECK(back.kind == m.kind);
  CHECK(back.shift_hours == m.shift_hours);
  for (int h = 0; h < 24; ++h) CHECK(back.expected_value(h) == m.expected_value(h));
}

TEST_CASE("forecaster checkpoint round trip") {
  ForecastHyper hp;
  hp.embed = 5;
  hp.hidden = 7;
  hp.mode = Supervision::Destination;
  ForecastModel m = ForecastModel::initialize(hp, 3);
  m.input_scale()(0) = 0.37;
  m.output_scale()(1) = 0.9;
  const auto path = temp_path("model.json");
  write_json_file(path, to_json(m));
  const auto back = load_forecaster(path);
  CHECK(back.hyper().mode == Supervision::Destination);
  CHECK(back.params() == m.params());
  CHECK(back.input_scale() == m.input_scale());
  CHECK(back.output_scale() == m.output_scale());
  Json bad = to_json(m);
  bad["params"].erase(0);
  CHECK_THROWS_AS(forecaster_from_json(bad), Error);
}

TEST_CASE("simulation config") {
  SimConfig c;
  c.seed = 12;
  c.refine = false;
  c.condition[1] = ComponentSet{2, 5};
  const auto back = sim_config_from_json(to_json(c));
  CHECK(back.seed == 12);
  CHECK(!back.refine);
  REQUIRE(back.condition[1]);
  CHECK(*back.condition[1] == ComponentSet{2, 5});
  CHECK(!back.condition[0]);
  CHECK(sim_config_from_json(Json::object()).pred_len == SimConfig{}.pred_len);
  CHECK_THROWS_AS(sim_config_from_json({{"speed", 0.0}}), Error);
  CHECK_THROWS_AS(sim_config_from_json({{"dt", "fast"}}), Error);
}

TEST_CASE("synthetic config") {
  const auto c = synth_config_from_json({{"seed", 4}, {"ped_per_route", 3}, {"route_counts", {{"veh_nb_left", 7}}}});
  CHECK(c.seed == 4);
  CHECK(c.ped_per_route == 3);
  CHECK(c.veh_per_route == SynthConfig{}.veh_per_route);
  CHECK(c.route_counts.at("veh_nb_left") == 7);
  CHECK_THROWS_AS(synth_config_from_json(Json::array()), Error);
}

TEST_CASE("command script") {
  const auto path = temp_path("script.json");
  std::ofstream(path) << R"([{"type":"spawn","kind":"veh","count":3,"components":[5],"at_tick":4},
                            {"type":"pause","at_tick":9},
                            {"type":"inject_scenario","ped":{"components":[1]},"veh":{"components":[2]},
                             "target_distance":0.5,"at_tick":2}])";
  const auto s = load_script(path);
  REQUIRE(s.size() == 3);
  CHECK(s[0].at_tick == 4);
  const auto* sp = std::get_if<SpawnCmd>(&s[0].body);
  REQUIRE(sp);
  CHECK(sp->kind == AgentKind::Vehicle);
  CHECK(sp->components == ComponentSet{5});
  const auto* inj = std::get_if<InjectScenarioCmd>(&s[2].body);
  REQUIRE(inj);
  CHECK(inj->ped.components == ComponentSet{1});
  CHECK(inj->target_distance == 0.5);

  std::ofstream(path) << R"({"type":"pause"})";
  CHECK_THROWS_AS(load_script(path), Error);
  std::ofstream(path) << R"([{"type":"teleport"}])";
  try {
    load_script(path);
    FAIL("expected Unsupported");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::Unsupported);
  }
}

TEST_CASE("trace lines") {
  SimConfig cfg;
  cfg.refine = false;
  SimTrace t;
  t.config = cfg;
  TickRecord r;
  r.tick = 1;
  r.t = 0.4;
  r.agents.push_back({3, AgentKind::Vehicle, {1.23456789, -2.0}});
  r.spawned.push_back({3, AgentKind::Vehicle, 1});
  t.ticks.push_back(r);
  CommandRecord c;
  c.command.body = PauseCmd{};
  c.at_tick = 2;
  t.commands.push_back(c);
  std::ostringstream out;
  write_trace(out, t);
  std::istringstream in(out.str());
  std::string line;
  std::vector<Json> lines;
  while (std::getline(in, line)) lines.push_back(Json::parse(line));
  REQUIRE(lines.size() == 3);
  CHECK(lines[0].contains("config"));
  CHECK(lines[1].contains("tick"));
  CHECK(lines[2].contains("command"));
  CHECK(lines[1]["agents"][0]["pos"][0].get<double>() == 1.23456789);
}

TEST_CASE("file errors") {
  try {
    read_json_file(temp_path("nope.json"));
    FAIL("expected IoError");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::IoError);
  }
  const auto path = temp_path("broken.json");
  std::ofstream(path) << "{not json";
  try {
    read_json_file(path);
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ParseError);
  }
}
