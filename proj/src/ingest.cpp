#include "isim/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "isim/rng.hpp"

namespace isim {

using nlohmann::json;

namespace {

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open '" + path + "' for reading");
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot open '" + path + "' for writing");
  return out;
}

json points_json(std::span<const Vec2> pts) {
  json a = json::array();
  for (const auto& p : pts) a.push_back({p.x, p.y});
  return a;
}

std::vector<Vec2> points_from(const json& a) {
  if (!a.is_array()) throw Error(Errc::ParseError, "points must be an array");
  std::vector<Vec2> out;
  out.reserve(a.size());
  for (const auto& p : a) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
      throw Error(Errc::ParseError, "each point must be [x, y] numbers");
    out.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return out;
}

}  // namespace

Trajectory parse_trajectory(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("invalid JSON: ") + e.what());
  }
  try {
    Trajectory t;
    t.agent_id = j.at("agent_id").get<std::int64_t>();
    t.kind = parse_kind(j.at("kind").get<std::string>());
    t.t0 = j.at("t0").get<double>();
    t.dt = j.at("dt").get<double>();
    t.points = points_from(j.at("points"));
    validate(t);
    return t;
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("schema violation: ") + e.what());
  } catch (const Error& e) {
    throw Error(Errc::ParseError, e.what());
  }
}

std::string format_trajectory(const Trajectory& t) {
  json j;
  j["agent_id"] = t.agent_id;
  j["kind"] = std::string(kind_tag(t.kind));
  j["t0"] = t.t0;
  j["dt"] = t.dt;
  j["points"] = points_json(t.points);
  return j.dump();
}

CorpusLoad load_corpus(const std::string& path, bool strict) {
  auto in = open_in(path);
  CorpusLoad out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.trajectories.push_back(parse_trajectory(line));
    } catch (const Error& e) {
      if (strict) throw Error(Errc::ParseError, "line " + std::to_string(no) + ": " + e.what());
      out.skipped.push_back({no, e.what()});
    }
  }
  if (out.trajectories.empty() && out.skipped.empty()) out.warnings.push_back("corpus '" + path + "' is empty");
  return out;
}

void save_corpus(const std::string& path, std::span<const Trajectory> trajs) {
  auto out = open_out(path);
  for (const auto& t : trajs) out << format_trajectory(t) << '\n';
  if (!out) throw Error(Errc::IoError, "write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Region filter

Region Region::square(double h) { return {{{-h, -h}, {h, -h}, {h, h}, {-h, h}}}; }

namespace {

double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return distance(p, a + t * ab);
}

}  // namespace

void Region::validate() const {
  const std::size_t n = vertices.size();
  if (n < 3) throw Error(Errc::InvalidRegion, "region needs at least 3 vertices");
  double area = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!vertices[i].finite()) throw Error(Errc::InvalidRegion, "non-finite region vertex");
    area += cross(vertices[i], vertices[(i + 1) % n]);
  }
  if (!(std::abs(area) > 1e-12)) throw Error(Errc::InvalidRegion, "region has zero area");
  const double sign = area > 0.0 ? 1.0 : -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 e1 = vertices[(i + 1) % n] - vertices[i];
    const Vec2 e2 = vertices[(i + 2) % n] - vertices[(i + 1) % n];
    if (sign * cross(e1, e2) < -1e-12) throw Error(Errc::InvalidRegion, "region is not convex");
  }
}

bool Region::contains(Vec2 p) const {
  const std::size_t n = vertices.size();
  double area = 0.0;
  for (std::size_t i = 0; i < n; ++i) area += cross(vertices[i], vertices[(i + 1) % n]);
  const double sign = area > 0.0 ? 1.0 : -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = vertices[i], b = vertices[(i + 1) % n];
    if (sign * cross(b - a, p - a) < 0.0) return false;
  }
  return true;
}

double Region::boundary_distance(Vec2 p) const {
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < vertices.size(); ++i)
    d = std::min(d, segment_distance(p, vertices[i], vertices[(i + 1) % vertices.size()]));
  return d;
}

FilterResult filter_truncated(std::span<const Trajectory> trajs, const Region& region, double margin) {
  region.validate();
  if (!(margin >= 0.0)) throw Error(Errc::InvalidInput, "margin must be >= 0");
  auto peripheral = [&](Vec2 p) { return !region.contains(p) || region.boundary_distance(p) <= margin; };
  FilterResult out;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& t = trajs[i];
    if (!t.points.empty() && peripheral(t.points.front()) && peripheral(t.points.back()))
      out.kept.push_back(t);
    else
      out.dropped.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic intersection

Vec2 SynthRoute::tangent(double s) const {
  double acc = 0.0;
  const Piece* last = &pieces.back();
  double u = last->length;
  if (s <= 0.0) {
    last = &pieces.front();
    u = 0.0;
  } else {
    for (const auto& p : pieces) {
      if (s <= acc + p.length) {
        last = &p;
        u = s - acc;
        break;
      }
      acc += p.length;
    }
  }
  if (!last->arc) return last->dir;
  const double ang = last->angle0 + last->sweep * (u / last->length);
  const double sg = last->sweep > 0.0 ? 1.0 : -1.0;
  return {-sg * std::sin(ang), sg * std::cos(ang)};
}

Vec2 SynthRoute::point(double s) const {
  if (s <= 0.0) return start + s * tangent(0.0);
  if (s >= length) return end + (s - length) * tangent(length);
  double acc = 0.0;
  for (const auto& p : pieces) {
    if (s <= acc + p.length) {
      const double u = s - acc;
      if (!p.arc) return p.a + u * p.dir;
      const double ang = p.angle0 + p.sweep * (u / p.length);
      return p.a + p.radius * Vec2{std::cos(ang), std::sin(ang)};
    }
    acc += p.length;
  }
  return end;
}

namespace {

Vec2 rotate(Vec2 v, int quarter) {
  for (int i = 0; i < quarter; ++i) v = {-v.y, v.x};
  return v;
}

SynthRoute finish(std::string label, AgentKind kind, std::vector<SynthRoute::Piece> pieces) {
  SynthRoute r;
  r.label = std::move(label);
  r.kind = kind;
  r.pieces = std::move(pieces);
  for (const auto& p : r.pieces) r.length += p.length;
  const auto& f = r.pieces.front();
  r.start = f.arc ? f.a + f.radius * Vec2{std::cos(f.angle0), std::sin(f.angle0)} : f.a;
  const auto& l = r.pieces.back();
  r.end = l.arc ? l.a + l.radius * Vec2{std::cos(l.angle0 + l.sweep), std::sin(l.angle0 + l.sweep)}
                : l.a + l.length * l.dir;
  return r;
}

SynthRoute::Piece line(Vec2 a, Vec2 dir, double len) { return {false, a, dir, 0.0, 0.0, 0.0, len}; }

SynthRoute::Piece arc(Vec2 c, double r, double a0, double sweep) {
  return {true, c, {}, r, a0, sweep, r * std::abs(sweep)};
}

}  // namespace

std::vector<SynthRoute> synth_routes(double h) {
  std::vector<SynthRoute> routes;
  const double cw = 0.8 * h;  // crosswalk offset from the centre
  const struct {
    const char* name;
    Vec2 start, dir;
  } walks[] = {
      {"ped_n_eb", {-h, cw}, {1, 0}},  {"ped_n_wb", {h, cw}, {-1, 0}},
      {"ped_s_eb", {-h, -cw}, {1, 0}}, {"ped_s_wb", {h, -cw}, {-1, 0}},
      {"ped_e_nb", {cw, -h}, {0, 1}},  {"ped_e_sb", {cw, h}, {0, -1}},
      {"ped_w_nb", {-cw, -h}, {0, 1}}, {"ped_w_sb", {-cw, h}, {0, -1}},
  };
  for (const auto& w : walks) routes.push_back(finish(w.name, AgentKind::Pedestrian, {line(w.start, w.dir, 2 * h)}));

  // Northbound approach in the x = +lane lane; the others are quarter turns of it.
  const double lane = 2.0, r_right = 8.0, r_left = 12.0;
  const double pi = std::numbers::pi;
  const char* approach[] = {"nb", "wb", "sb", "eb"};
  for (int q = 0; q < 4; ++q) {
    auto rot_line = [&](Vec2 a, Vec2 d, double len) { return line(rotate(a, q), rotate(d, q), len); };
    auto rot_arc = [&](Vec2 c, double r, double a0, double sw) { return arc(rotate(c, q), r, a0 + q * pi / 2, sw); };
    const std::string pre = std::string("veh_") + approach[q] + "_";
    routes.push_back(finish(pre + "through", AgentKind::Vehicle, {rot_line({lane, -h}, {0, 1}, 2 * h)}));
    routes.push_back(finish(pre + "left", AgentKind::Vehicle,
                            {rot_line({lane, -h}, {0, 1}, h + lane - r_left),
                             rot_arc({lane - r_left, lane - r_left}, r_left, 0.0, pi / 2),
                             rot_line({lane - r_left, lane}, {-1, 0}, h + lane - r_left)}));
    routes.push_back(finish(pre + "right", AgentKind::Vehicle,
                            {rot_line({lane, -h}, {0, 1}, h - lane - r_right),
                             rot_arc({lane + r_right, -lane - r_right}, r_right, pi, -pi / 2),
                             rot_line({lane + r_right, -lane}, {1, 0}, h - lane - r_right)}));
  }
  return routes;
}

int SynthConfig::count_for(const SynthRoute& r) const {
  if (auto it = route_counts.find(r.label); it != route_counts.end()) return it->second;
  return r.kind == AgentKind::Pedestrian ? ped_per_route : veh_per_route;
}

std::array<double, 24> synth_profile(const SynthConfig& cfg, AgentKind kind) {
  std::array<double, 24> m{};
  const double level = cfg.peak_level[kind_index(kind)];
  for (int hr = 0; hr < 24; ++hr) {
    double v = cfg.base_fraction;
    for (std::size_t p = 0; p < 2; ++p) {
      double d = std::abs(double(hr) - cfg.peak_hours[p]);
      d = std::min(d, 24.0 - d);
      v += std::exp(-0.5 * d * d / (cfg.peak_widths[p] * cfg.peak_widths[p]));
    }
    m[std::size_t(hr)] = level * v;
  }
  return m;
}

namespace {

struct Noise {
  std::array<double, 4> freq{}, phase{};
  double amp = 0.0;

  Noise(Rng& rng, double sigma) : amp(sigma * std::sqrt(2.0 / 4.0)) {
    for (std::size_t k = 0; k < 4; ++k) {
      freq[k] = rng.uniform(0.05, 0.25);
      phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }
  double operator()(double tau) const {
    double v = 0.0;
    for (std::size_t k = 0; k < 4; ++k) v += std::sin(2.0 * std::numbers::pi * freq[k] * tau + phase[k]);
    return amp * v;
  }
};

Vec2 offset_point(const SynthRoute& r, double s, double lateral) {
  const Vec2 t = r.tangent(std::clamp(s, 0.0, r.length));
  return r.point(s) + lateral * Vec2{-t.y, t.x};
}

}  // namespace

SynthResult synth_generate(const SynthConfig& cfg) {
  if (!(cfg.noise_sigma >= 0.0)) throw Error(Errc::InvalidInput, "noise sigma must be >= 0");
  if (!(cfg.native_dt > 0.0)) throw Error(Errc::InvalidInput, "native dt must be positive");
  if (cfg.ped_speed[0] <= 0.0 || cfg.ped_speed[1] < cfg.ped_speed[0] || cfg.veh_speed[0] <= 0.0 ||
      cfg.veh_speed[1] < cfg.veh_speed[0])
    throw Error(Errc::InvalidInput, "speed ranges must be positive and ordered");
  const auto routes = synth_routes(cfg.half_width);
  for (const auto& [label, n] : cfg.route_counts) {
    if (n < 0) throw Error(Errc::InvalidInput, "route count for '" + label + "' is negative");
    if (std::none_of(routes.begin(), routes.end(), [&](const SynthRoute& r) { return r.label == label; }))
      throw Error(Errc::InvalidInput, "unknown route label '" + label + "'");
  }

  SynthResult out;
  std::uint64_t agent = 0;
  const double dt = cfg.native_dt;

  // Pedestrians first so vehicles can yield to them.
  for (const auto& r : routes) {
    if (r.kind != AgentKind::Pedestrian) continue;
    for (int i = 0, n = cfg.count_for(r); i < n; ++i, ++agent) {
      Rng rng(Rng::mix(cfg.seed, agent + 1));
      Trajectory t;
      t.agent_id = std::int64_t(agent + 1);
      t.kind = r.kind;
      t.dt = dt;
      t.t0 = cfg.start_time + rng.uniform() * cfg.span_seconds;
      const double v = rng.uniform(cfg.ped_speed[0], cfg.ped_speed[1]);
      const Noise noise(rng, cfg.noise_sigma);
      double s = 0.0;
      for (std::size_t k = 0;; ++k) {
        const double tau = double(k) * dt;
        s = v * tau;
        t.points.push_back(offset_point(r, s, noise(tau)));
        if (s >= r.length) break;
      }
      out.corpus.push_back(std::move(t));
      out.labels.push_back(r.label);
    }
  }

  struct PedSpan {
    double start, end;
    std::size_t index;
  };
  std::vector<PedSpan> peds;
  for (std::size_t i = 0; i < out.corpus.size(); ++i)
    peds.push_back({out.corpus[i].t0, out.corpus[i].end_time(), i});
  std::sort(peds.begin(), peds.end(), [](const PedSpan& a, const PedSpan& b) { return a.start < b.start; });
  double longest = 0.0;
  for (const auto& p : peds) longest = std::max(longest, p.end - p.start);

  for (const auto& r : routes) {
    if (r.kind != AgentKind::Vehicle) continue;
    for (int i = 0, n = cfg.count_for(r); i < n; ++i, ++agent) {
      Rng rng(Rng::mix(cfg.seed, agent + 1));
      Trajectory t;
      t.agent_id = std::int64_t(agent + 1);
      t.kind = r.kind;
      t.dt = dt;
      t.t0 = cfg.start_time + rng.uniform() * cfg.span_seconds;
      const double v_des = rng.uniform(cfg.veh_speed[0], cfg.veh_speed[1]);
      const Noise noise(rng, cfg.noise_sigma);
      double s = 0.0, v = v_des;
      for (std::size_t k = 0;; ++k) {
        const double tau = double(k) * dt;
        const Vec2 pos = offset_point(r, s, noise(tau));
        t.points.push_back(pos);
        if (s >= r.length || tau > 600.0) break;
        bool yield = false;
        if (cfg.vehicles_yield) {
          const double now = t.t0 + tau;
          const Vec2 fwd = r.tangent(std::clamp(s, 0.0, r.length));
          auto it = std::lower_bound(peds.begin(), peds.end(), now - longest,
                                     [](const PedSpan& p, double x) { return p.start < x; });
          for (; it != peds.end() && it->start <= now && !yield; ++it) {
            if (it->end < now) continue;
            const Vec2 d = out.corpus[it->index].at(now - it->start) - pos;
            const double along = d.dot(fwd);
            const double lateral = std::abs(cross(fwd, d));
            yield = along > 0.0 && along < 4.0 && lateral < 1.5;
          }
        }
        v = yield ? std::max(0.0, v - 4.0 * dt) : std::min(v_des, v + 2.0 * dt);
        s += v * dt;
      }
      out.corpus.push_back(std::move(t));
      out.labels.push_back(r.label);
    }
  }

  for (AgentKind k : {AgentKind::Pedestrian, AgentKind::Vehicle}) {
    Rng rng(Rng::mix(cfg.seed, 0xC0FFEEull + kind_index(k)));
    const auto mean = synth_profile(cfg, k);
    for (std::size_t h = 0; h < 24; ++h) out.hourly[kind_index(k)][h] = double(rng.poisson(mean[h]));
  }
  return out;
}

void save_hourly_counts(const std::string& path, const std::array<std::array<double, 24>, 2>& hourly) {
  auto out = open_out(path);
  out << "hour,ped,veh\n";
  for (std::size_t h = 0; h < 24; ++h) out << h << ',' << hourly[0][h] << ',' << hourly[1][h] << '\n';
}

std::array<double, 24> load_hourly_counts(const std::string& path, AgentKind kind) {
  auto in = open_in(path);
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) {
      c.erase(std::remove_if(c.begin(), c.end(), [](unsigned char ch) { return std::isspace(ch); }), c.end());
      cells.push_back(c);
    }
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::ParseError, "'" + path + "' is empty");
  const auto header = split(line);
  std::size_t col = header.size();
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == kind_tag(kind)) col = i;
  if (col == header.size())
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == "count") col = i;
  if (header.empty() || header[0] != "hour" || col == header.size())
    throw Error(Errc::ParseError, "'" + path + "' needs a header 'hour,count' or 'hour,ped,veh'");
  std::array<double, 24> counts{};
  std::array<bool, 24> seen{};
  std::size_t no = 1;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split(line);
    try {
      if (cells.size() <= col) throw std::invalid_argument("missing column");
      const int h = std::stoi(cells[0]);
      if (h < 0 || h > 23) throw std::invalid_argument("hour out of range");
      counts[std::size_t(h)] = std::stod(cells[col]);
      seen[std::size_t(h)] = true;
    } catch (const std::exception& e) {
      throw Error(Errc::ParseError, path + " line " + std::to_string(no) + ": " + e.what());
    }
  }
  for (std::size_t h = 0; h < 24; ++h)
    if (!seen[h]) throw Error(Errc::ParseError, path + ": no row for hour " + std::to_string(h));
  return counts;
}

// ---------------------------------------------------------------------------
// Scenes

std::vector<Scene> extract_scenes(std::span<const Trajectory> corpus, int length, std::size_t count, double dt,
                                  std::uint64_t seed, int waypoints) {
  if (count == 0) return {};
  if (length < 2) throw Error(Errc::InvalidInput, "scene length must be >= 2");
  std::vector<Trajectory> grid;
  std::vector<std::pair<double, TrajectoryFeature>> info;  // native t0, feature
  for (const auto& t : corpus) {
    auto g = resample_on_grid(t, dt);
    if (!g || t.points.size() < 2) continue;
    grid.push_back(std::move(*g));
    info.emplace_back(t.t0, vectorize_trajectory(t, waypoints));
  }
  if (grid.empty()) throw Error(Errc::InsufficientData, "corpus has no trajectory spanning two frames");
  std::int64_t lo = std::numeric_limits<std::int64_t>::max(), hi = std::numeric_limits<std::int64_t>::min();
  for (const auto& g : grid) {
    const auto first = std::int64_t(std::llround(g.t0 / dt));
    lo = std::min(lo, first);
    hi = std::max(hi, first + std::int64_t(g.points.size()) - 1);
  }
  if (hi - lo + 1 < length)
    throw Error(Errc::InsufficientData, "corpus timeline (" + std::to_string(hi - lo + 1) +
                                            " frames) is shorter than the window");
  std::map<std::int64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < grid.size(); ++i) by_id[grid[i].agent_id] = i;

  std::vector<Scene> scenes;
  const std::uint64_t positions = std::uint64_t(hi - lo - length + 2);
  const std::uint64_t max_draws = 50 * count + 100;
  for (std::uint64_t w = 0; w < max_draws && scenes.size() < count; ++w) {
    Rng rng(Rng::mix(seed, w));
    const std::int64_t start = lo + std::int64_t(rng.below(positions));
    try {
      Scene s = slice_scene(grid, start, length);
      for (auto& a : s.agents) {
        const auto& [t0, feature] = info[by_id.at(a.agent_id)];
        a.t0 = t0;
        a.feature = feature;
      }
      scenes.push_back(std::move(s));
    } catch (const Error& e) {
      if (e.code() != Errc::EmptyScene) throw;
    }
  }
  return scenes;
}

void save_scenes(const std::string& path, std::span<const Scene> scenes) {
  auto out = open_out(path);
  for (const auto& s : scenes) {
    json j;
    j["start_index"] = s.start_index;
    j["length"] = s.length;
    j["dt"] = s.dt;
    json agents = json::array();
    for (const auto& a : s.agents) {
      json ja;
      ja["agent_id"] = a.agent_id;
      ja["kind"] = std::string(kind_tag(a.kind));
      ja["t0"] = a.t0;
      ja["points"] = points_json(a.points);
      ja["mask"] = a.mask;
      ja["feature"] = a.feature ? json(a.feature->flatten()) : json(nullptr);
      agents.push_back(std::move(ja));
    }
    j["agents"] = std::move(agents);
    out << j.dump() << '\n';
  }
}

std::vector<Scene> load_scenes(const std::string& path) {
  auto in = open_in(path);
  std::vector<Scene> scenes;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      Scene s;
      s.start_index = j.at("start_index").get<std::int64_t>();
      s.length = j.at("length").get<int>();
      s.dt = j.at("dt").get<double>();
      for (const auto& ja : j.at("agents")) {
        SceneAgent a;
        a.agent_id = ja.at("agent_id").get<std::int64_t>();
        a.kind = parse_kind(ja.at("kind").get<std::string>());
        a.t0 = ja.at("t0").get<double>();
        a.points = points_from(ja.at("points"));
        a.mask = ja.at("mask").get<std::vector<std::uint8_t>>();
        if (a.points.size() != std::size_t(s.length) || a.mask.size() != std::size_t(s.length))
          throw Error(Errc::ParseError, "agent rows must match the scene length");
        if (!ja.at("feature").is_null()) a.feature = TrajectoryFeature::unflatten(ja["feature"].get<std::vector<double>>());
        s.agents.push_back(std::move(a));
      }
      scenes.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw Error(Errc::ParseError, path + " line " + std::to_string(no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(Errc::ParseError, path + " line " + std::to_string(no) + ": " + e.what());
    }
  }
  return scenes;
}

}  // namespace isim
