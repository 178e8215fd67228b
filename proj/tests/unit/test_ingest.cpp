#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "isim/gmm.hpp"
#include "isim/ingest.hpp"

using namespace isim;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "isim_test_ingest";
  fs::create_directories(dir);
  return (dir / name).string();
}

void write_file(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

Trajectory track(std::int64_t id, std::vector<Vec2> pts, double dt = 0.5) {
  Trajectory t;
  t.agent_id = id;
  t.dt = dt;
  t.points = std::move(pts);
  return t;
}

}  // namespace

TEST_CASE("load_corpus edge cases") {
  const auto empty = temp_path("empty.jsonl");
  write_file(empty, "");
  const auto e = load_corpus(empty);
  CHECK(e.trajectories.empty());
  CHECK(!e.warnings.empty());

  const auto mixed = temp_path("mixed.jsonl");
  write_file(mixed,
             "{\"agent_id\":1,\"kind\":\"ped\",\"t0\":0,\"dt\":0.5,\"points\":[[0,0],[1,1]]}\n"
             "{\"agent_id\":2,\"kind\":\"veh\",\"t0\":0,\"dt\":0.5,\"points\":[[0,0],[NaN,1]]}\n");
  const auto lenient = load_corpus(mixed, false);
  CHECK(lenient.trajectories.size() == 1);
  REQUIRE(lenient.skipped.size() == 1);
  CHECK(lenient.skipped[0].line == 2);
  try {
    load_corpus(mixed, true);
    FAIL("expected ParseError");
  } catch (const Error& err) {
    CHECK(err.code() == Errc::ParseError);
  }
  try {
    load_corpus(temp_path("missing.jsonl"));
    FAIL("expected IoError");
  } catch (const Error& err) {
    CHECK(err.code() == Errc::IoError);
  }
}

TEST_CASE("corpus round trip") {
  SynthConfig c;
  c.seed = 5;
  c.ped_per_route = 60;
  c.veh_per_route = 45;
  const auto s = synth_generate(c);
  REQUIRE(s.corpus.size() >= 1000);
  const std::vector<Trajectory> first(s.corpus.begin(), s.corpus.begin() + 1000);
  const auto path = temp_path("round.jsonl");
  save_corpus(path, first);
  const auto back = load_corpus(path).trajectories;
  REQUIRE(back.size() == 1000);
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].agent_id == first[i].agent_id);
    CHECK(back[i].kind == first[i].kind);
    CHECK(std::abs(back[i].t0 - first[i].t0) <= 1e-12 * std::max(1.0, first[i].t0));
    CHECK(back[i].dt == first[i].dt);
    REQUIRE(back[i].points.size() == first[i].points.size());
    for (std::size_t k = 0; k < back[i].points.size(); ++k)
      CHECK(distance(back[i].points[k], first[i].points[k]) <= 1e-12);
  }
}

TEST_CASE("trajectory lines") {
  CHECK_THROWS_AS(parse_trajectory("{\"agent_id\":1}"), Error);
  CHECK_THROWS_AS(parse_trajectory("{\"agent_id\":1,\"kind\":\"cat\",\"t0\":0,\"dt\":1,\"points\":[[0,0],[1,1]]}"),
                  Error);
  const auto t = parse_trajectory(format_trajectory(track(4, {{1, 2}, {3, 4}})));
  CHECK(t.agent_id == 4);
  CHECK(t.points[1] == Vec2{3, 4});
}

TEST_CASE("regions") {
  const auto sq = Region::square(10);
  CHECK(sq.contains({0, 0}));
  CHECK(!sq.contains({11, 0}));
  CHECK(sq.boundary_distance({9, 0}) == doctest::Approx(1.0));
  Region line{{{0, 0}, {1, 1}, {2, 2}}};
  CHECK_THROWS_AS(line.validate(), Error);
  Region dart{{{0, 0}, {4, 0}, {1, 1}, {0, 4}}};
  try {
    dart.validate();
    FAIL("expected InvalidRegion");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidRegion);
  }
}

TEST_CASE("filter_truncated") {
  const auto region = Region::square(10);
  const std::vector<Trajectory> two{track(1, {{-10, 0}, {0, 0}, {10, 0}}), track(2, {{-10, 0}, {-5, 0}, {0, 0}})};
  const auto r = filter_truncated(two, region, 0.5);
  REQUIRE(r.kept.size() == 1);
  CHECK(r.kept[0].agent_id == 1);
  CHECK(r.dropped == std::vector<std::size_t>{1});

  SynthConfig c;
  c.seed = 8;
  c.ped_per_route = 25;
  c.veh_per_route = 25;
  const auto s = synth_generate(c);
  std::vector<Trajectory> all(s.corpus.begin(), s.corpus.begin() + 500);
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    Trajectory t = s.corpus[std::size_t(i)];
    // Stop the track somewhere well inside the region.
    const Vec2 stop{rng.uniform(-6, 6), rng.uniform(-6, 6)};
    t.points.back() = stop;
    t.agent_id = 100000 + i;
    all.insert(all.begin() + std::ptrdiff_t(rng.below(all.size() + 1)), t);
  }
  const auto f = filter_truncated(all, Region::square(c.half_width), 1.0);
  CHECK(f.dropped.size() == 50);
  for (auto idx : f.dropped) CHECK(all[idx].agent_id >= 100000);
  CHECK_THROWS_AS(filter_truncated(all, Region::square(10), -1.0), Error);
}

TEST_CASE("synth_generate") {
  SynthConfig zero;
  zero.ped_per_route = 0;
  zero.veh_per_route = 0;
  CHECK(synth_generate(zero).corpus.empty());

  SynthConfig c;
  c.seed = 77;
  c.ped_per_route = 5;
  c.veh_per_route = 5;
  const auto a = synth_generate(c), b = synth_generate(c);
  REQUIRE(a.corpus.size() == b.corpus.size());
  CHECK(a.corpus.size() == 8 * 5 + 12 * 5);
  for (std::size_t i = 0; i < a.corpus.size(); ++i) {
    CHECK(a.corpus[i].points == b.corpus[i].points);
    CHECK(a.labels[i] == b.labels[i]);
  }
  CHECK(a.hourly == b.hourly);
  CHECK(synth_routes().size() == 20);
}

TEST_CASE("two separated routes are recovered") {
  SynthConfig c;
  c.seed = 13;
  c.route_counts = {{"ped_n_eb", 100}, {"ped_s_wb", 100}};
  c.ped_per_route = 0;
  c.veh_per_route = 0;
  const auto s = synth_generate(c);
  REQUIRE(s.corpus.size() == 200);
  std::vector<std::vector<double>> z;
  for (const auto& t : s.corpus) z.push_back(vectorize_trajectory(t).flatten());
  const auto g = fit_em(z, AgentKind::Pedestrian, 2, 2);
  std::map<std::pair<std::string, int>, int> joint;
  for (std::size_t i = 0; i < z.size(); ++i) ++joint[{s.labels[i], most_likely_component(g, z[i])}];
  const int direct = joint[{"ped_n_eb", 0}] + joint[{"ped_s_wb", 1}];
  const int swapped = joint[{"ped_n_eb", 1}] + joint[{"ped_s_wb", 0}];
  CHECK(double(std::max(direct, swapped)) / 200.0 >= 0.99);
}

TEST_CASE("extract_scenes") {
  SynthConfig c;
  c.seed = 2;
  c.ped_per_route = 10;
  c.veh_per_route = 10;
  const auto s = synth_generate(c);
  CHECK(extract_scenes(s.corpus, 20, 0, 0.4, 1).empty());

  // A single agent spanning exactly 20 frames.
  Trajectory t = track(1, {}, 0.4);
  for (int i = 0; i < 20; ++i) t.points.push_back({double(i), 0});
  const Trajectory one[] = {t};
  const auto only = extract_scenes(one, 20, 5, 0.4, 3);
  REQUIRE(!only.empty());
  for (const auto& sc : only) {
    REQUIRE(sc.agents.size() == 1);
    CHECK(sc.agents[0].agent_id == 1);
    CHECK(sc.agents[0].feature.has_value());
  }

  const auto scenes = extract_scenes(s.corpus, 20, 1000, 0.4, 9);
  REQUIRE(scenes.size() == 1000);
  std::vector<Trajectory> grid;
  for (const auto& tr : s.corpus)
    if (auto g = resample_on_grid(tr, 0.4)) grid.push_back(*g);
  std::map<std::size_t, int> hist, recount;
  for (const auto& sc : scenes) {
    ++hist[sc.agents.size()];
    std::size_t n = 0;
    for (const auto& g : grid) {
      const auto a = std::llround(g.t0 / 0.4), b = a + std::int64_t(g.points.size()) - 1;
      const auto lo = std::max<std::int64_t>(a, sc.start_index), hi = std::min<std::int64_t>(b, sc.start_index + 19);
      if (hi - lo + 1 >= 2) ++n;
    }
    ++recount[n];
  }
  CHECK(hist == recount);
}

TEST_CASE("scene and hourly count files") {
  SynthConfig c;
  c.seed = 4;
  c.ped_per_route = 8;
  c.veh_per_route = 8;
  const auto s = synth_generate(c);
  const auto scenes = extract_scenes(s.corpus, 12, 20, 0.4, 5);
  const auto path = temp_path("scenes.jsonl");
  save_scenes(path, scenes);
  const auto back = load_scenes(path);
  REQUIRE(back.size() == scenes.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].start_index == scenes[i].start_index);
    REQUIRE(back[i].agents.size() == scenes[i].agents.size());
    for (std::size_t k = 0; k < back[i].agents.size(); ++k) {
      CHECK(back[i].agents[k].mask == scenes[i].agents[k].mask);
      CHECK(back[i].agents[k].feature->flatten() == scenes[i].agents[k].feature->flatten());
    }
  }

  const auto counts = temp_path("counts.csv");
  save_hourly_counts(counts, s.hourly);
  CHECK(load_hourly_counts(counts, AgentKind::Vehicle) == s.hourly[1]);
  const auto single = temp_path("single.csv");
  std::string text = "hour,count\n";
  for (int h = 0; h < 24; ++h) text += std::to_string(h) + "," + std::to_string(h * 2) + "\n";
  write_file(single, text);
  CHECK(load_hourly_counts(single, AgentKind::Pedestrian)[5] == 10.0);
  write_file(single, "hour,count\n0,1\n");
  CHECK_THROWS_AS(load_hourly_counts(single, AgentKind::Pedestrian), Error);
}
