#include "isim/io.hpp"

#include <fstream>

namespace isim {

namespace {

void check_schema(const Json& j, std::string_view type) {
  if (!j.is_object()) throw Error(Errc::ParseError, "expected a JSON object");
  const int v = j.value("schema_version", -1);
  if (v != kSchemaVersion)
    throw Error(Errc::ParseError, "unsupported schema_version " + std::to_string(v) + " (expected " +
                                      std::to_string(kSchemaVersion) + ")");
  if (j.value("type", std::string()) != type)
    throw Error(Errc::ParseError, "expected type '" + std::string(type) + "', got '" +
                                      j.value("type", std::string()) + "'");
}

Json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vec_from(const Json& j, Eigen::Index n, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (n >= 0 && Eigen::Index(v.size()) != n)
    throw Error(Errc::ParseError, std::string(what) + " has " + std::to_string(v.size()) + " entries, expected " +
                                      std::to_string(n));
  return Eigen::Map<const Eigen::VectorXd>(v.data(), Eigen::Index(v.size()));
}

template <class F>
auto guarded(F&& f) {
  try {
    return f();
  } catch (const Json::exception& e) {
    throw Error(Errc::ParseError, e.what());
  }
}

Json pos_json(Vec2 p) { return Json::array({p.x, p.y}); }

}  // namespace

Json to_json(const GmmModel& m) {
  const int d = m.dimension(), k = m.components();
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["type"] = "gmm";
  j["kind"] = std::string(kind_tag(m.kind()));
  j["D"] = d;
  j["M"] = k;
  j["weights"] = vec_json(m.weights());
  Json means = Json::array(), covs = Json::array();
  for (int c = 0; c < k; ++c) {
    means.push_back(vec_json(m.means()[std::size_t(c)]));
    const Eigen::MatrixXd& s = m.covariances()[std::size_t(c)];
    std::vector<double> row_major;
    row_major.reserve(std::size_t(d) * std::size_t(d));
    for (int r = 0; r < d; ++r)
      for (int q = 0; q < d; ++q) row_major.push_back(s(r, q));
    covs.push_back(std::move(row_major));
  }
  j["means"] = std::move(means);
  j["covariances"] = std::move(covs);
  j["standardizer"] = {{"mean", vec_json(m.standardizer().mean)}, {"scale", vec_json(m.standardizer().scale)}};
  return j;
}

GmmModel gmm_from_json(const Json& j) {
  check_schema(j, "gmm");
  return guarded([&] {
    const int d = j.at("D").get<int>(), k = j.at("M").get<int>();
    if (d < 1 || k < 1) throw Error(Errc::ParseError, "D and M must be positive");
    Eigen::VectorXd w = vec_from(j.at("weights"), k, "weights");
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covs;
    if (j.at("means").size() != std::size_t(k) || j.at("covariances").size() != std::size_t(k))
      throw Error(Errc::ParseError, "means/covariances must have M entries");
    for (int c = 0; c < k; ++c) {
      means.push_back(vec_from(j["means"][std::size_t(c)], d, "mean"));
      const Eigen::VectorXd flat = vec_from(j["covariances"][std::size_t(c)], Eigen::Index(d) * d, "covariance");
      Eigen::MatrixXd s(d, d);
      for (int r = 0; r < d; ++r)
        for (int q = 0; q < d; ++q) s(r, q) = flat(Eigen::Index(r) * d + q);
      covs.push_back(std::move(s));
    }
    Standardizer st;
    st.mean = vec_from(j.at("standardizer").at("mean"), d, "standardizer mean");
    st.scale = vec_from(j.at("standardizer").at("scale"), d, "standardizer scale");
    return GmmModel(parse_kind(j.at("kind").get<std::string>()), std::move(w), std::move(means), std::move(covs),
                    std::move(st));
  });
}

Json to_json(const TodDensityModel& m) {
  Json comps = Json::array();
  for (const auto& c : m.components) comps.push_back({{"w", c.weight}, {"mean", c.mean}, {"std", c.std}});
  return {{"schema_version", kSchemaVersion}, {"type", "tod_density"}, {"kind", std::string(kind_tag(m.kind))},
          {"shift_hours", m.shift_hours},     {"components", comps},    {"amplitude", m.amplitude},
          {"fit_rmse", m.fit_rmse}};
}

TodDensityModel density_from_json(const Json& j) {
  check_schema(j, "tod_density");
  return guarded([&] {
    TodDensityModel m;
    m.kind = parse_kind(j.at("kind").get<std::string>());
    m.shift_hours = j.at("shift_hours").get<double>();
    m.amplitude = j.at("amplitude").get<double>();
    m.fit_rmse = j.value("fit_rmse", 0.0);
    for (const auto& c : j.at("components"))
      m.components.push_back({c.at("w").get<double>(), c.at("mean").get<double>(), c.at("std").get<double>()});
    if (m.components.empty()) throw Error(Errc::ParseError, "density has no components");
    for (const auto& c : m.components)
      if (!(c.std > 0.0) || !(c.weight >= 0.0)) throw Error(Errc::ParseError, "invalid density component");
    return m;
  });
}

Json to_json(const ForecastModel& m) {
  const auto& hp = m.hyper();
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["type"] = "forecaster";
  j["hyper"] = {{"embed", hp.embed},
                {"hidden", hp.hidden},
                {"grid_cells", hp.grid.cells},
                {"cell_size", hp.grid.cell_size},
                {"obs_len", hp.obs_len},
                {"pred_len", hp.pred_len},
                {"dt", hp.dt}};
  j["supervision"] = std::string(supervision_tag(hp.mode));
  j["input_scale"] = vec_json(m.input_scale());
  j["output_scale"] = {m.output_scale()(0), m.output_scale()(1)};
  j["params"] = vec_json(m.params());
  return j;
}

ForecastModel forecaster_from_json(const Json& j) {
  check_schema(j, "forecaster");
  return guarded([&] {
    const Json& h = j.at("hyper");
    ForecastHyper hp;
    hp.embed = h.at("embed").get<int>();
    hp.hidden = h.at("hidden").get<int>();
    hp.grid.cells = h.at("grid_cells").get<int>();
    hp.grid.cell_size = h.at("cell_size").get<double>();
    hp.obs_len = h.at("obs_len").get<int>();
    hp.pred_len = h.at("pred_len").get<int>();
    hp.dt = h.at("dt").get<double>();
    hp.mode = parse_supervision(j.at("supervision").get<std::string>());
    ForecastModel m(hp);
    m.params() = vec_from(j.at("params"), Eigen::Index(parameter_count(hp)), "params");
    m.input_scale() = vec_from(j.at("input_scale"), hp.input_dim(), "input_scale");
    const auto os = vec_from(j.at("output_scale"), 2, "output_scale");
    m.output_scale() = Eigen::Vector2d(os(0), os(1));
    if (!m.params().allFinite()) throw Error(Errc::ParseError, "checkpoint has non-finite parameters");
    return m;
  });
}

Json to_json(const SimConfig& c) {
  Json cond = Json::object();
  for (AgentKind k : {AgentKind::Pedestrian, AgentKind::Vehicle})
    cond[std::string(kind_tag(k))] = c.condition[kind_index(k)] ? Json(*c.condition[kind_index(k)]) : Json(nullptr);
  return {{"dt", c.dt},
          {"obs_len", c.obs_len},
          {"pred_len", c.pred_len},
          {"exit_eps", c.exit_eps},
          {"force_remove_margin", c.force_remove_margin},
          {"speed", c.speed},
          {"seed", c.seed},
          {"start_hour", c.start_hour},
          {"refine", c.refine},
          {"poisson_counts", c.poisson_counts},
          {"condition", cond},
          {"speed_cap", {c.speed_cap[0], c.speed_cap[1]}},
          {"max_prior_attempts", c.max_prior_attempts}};
}

SimConfig sim_config_from_json(const Json& j, SimConfig c) {
  return guarded([&] {
    c.dt = j.value("dt", c.dt);
    c.obs_len = j.value("obs_len", c.obs_len);
    c.pred_len = j.value("pred_len", c.pred_len);
    c.exit_eps = j.value("exit_eps", c.exit_eps);
    c.force_remove_margin = j.value("force_remove_margin", c.force_remove_margin);
    c.speed = j.value("speed", c.speed);
    c.seed = j.value("seed", c.seed);
    c.start_hour = j.value("start_hour", c.start_hour);
    c.refine = j.value("refine", c.refine);
    c.poisson_counts = j.value("poisson_counts", c.poisson_counts);
    c.max_prior_attempts = j.value("max_prior_attempts", c.max_prior_attempts);
    if (j.contains("speed_cap")) {
      const auto v = j["speed_cap"].get<std::vector<double>>();
      if (v.size() != 2) throw Error(Errc::ParseError, "speed_cap needs two entries");
      c.speed_cap = {v[0], v[1]};
    }
    if (j.contains("condition"))
      for (AgentKind k : {AgentKind::Pedestrian, AgentKind::Vehicle}) {
        const auto key = std::string(kind_tag(k));
        if (j["condition"].contains(key) && !j["condition"][key].is_null())
          c.condition[kind_index(k)] = j["condition"][key].get<ComponentSet>();
      }
    c.validate();
    return c;
  });
}

SynthConfig synth_config_from_json(const Json& j) {
  if (!j.is_object()) throw Error(Errc::ParseError, "synthetic config must be a JSON object");
  return guarded([&] {
    SynthConfig c;
    auto pair = [&](const char* key, std::array<double, 2>& v) {
      if (!j.contains(key)) return;
      const auto x = j[key].get<std::vector<double>>();
      if (x.size() != 2) throw Error(Errc::ParseError, std::string(key) + " needs two entries");
      v = {x[0], x[1]};
    };
    c.seed = j.value("seed", c.seed);
    c.half_width = j.value("half_width", c.half_width);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.ped_per_route = j.value("ped_per_route", c.ped_per_route);
    c.veh_per_route = j.value("veh_per_route", c.veh_per_route);
    c.route_counts = j.value("route_counts", c.route_counts);
    pair("ped_speed", c.ped_speed);
    pair("veh_speed", c.veh_speed);
    c.native_dt = j.value("native_dt", c.native_dt);
    c.start_time = j.value("start_time", c.start_time);
    c.span_seconds = j.value("span_seconds", c.span_seconds);
    c.vehicles_yield = j.value("vehicles_yield", c.vehicles_yield);
    pair("peak_hours", c.peak_hours);
    pair("peak_widths", c.peak_widths);
    pair("peak_level", c.peak_level);
    c.base_fraction = j.value("base_fraction", c.base_fraction);
    return c;
  });
}

namespace {

Json spawn_fields(const SpawnCmd& s) { return {{"kind", std::string(kind_tag(s.kind))}, {"count", s.count}, {"components", s.components}}; }

SpawnCmd spawn_from(const Json& j, std::optional<AgentKind> fixed) {
  SpawnCmd s;
  s.kind = fixed ? *fixed : parse_kind(j.at("kind").get<std::string>());
  if (fixed && j.contains("kind") && parse_kind(j["kind"].get<std::string>()) != *fixed)
    throw Error(Errc::ParseError, "scenario group has the wrong kind");
  s.count = j.value("count", 1);
  s.components = j.value("components", ComponentSet{});
  return s;
}

}  // namespace

Json to_json(const Command& c) {
  struct V {
    Json operator()(const PauseCmd&) const { return Json::object(); }
    Json operator()(const ResumeCmd&) const { return Json::object(); }
    Json operator()(const SetSpeedCmd& s) const { return {{"multiplier", s.multiplier}}; }
    Json operator()(const SpawnCmd& s) const { return spawn_fields(s); }
    Json operator()(const InjectScenarioCmd& s) const {
      return {{"ped", spawn_fields(s.ped)},
              {"veh", spawn_fields(s.veh)},
              {"target_tick", s.target_tick},
              {"target_distance", s.target_distance}};
    }
    Json operator()(const SetConditionSetCmd& s) const {
      return {{"kind", std::string(kind_tag(s.kind))}, {"components", s.components}};
    }
    Json operator()(const SnapshotCmd&) const { return Json::object(); }
  };
  Json j = std::visit(V{}, c.body);
  j["type"] = std::string(command_tag(c.body));
  j["id"] = c.id;
  j["at_tick"] = c.at_tick;
  return j;
}

Command command_from_json(const Json& j) {
  if (!j.is_object()) throw Error(Errc::ParseError, "command must be a JSON object");
  if (!j.contains("type") || !j["type"].is_string()) throw Error(Errc::ParseError, "command needs a string 'type'");
  const std::string type = j["type"].get<std::string>();
  return guarded([&] {
    Command c;
    c.id = j.value("id", std::int64_t(0));
    c.at_tick = j.value("at_tick", std::int64_t(0));
    if (type == "pause") c.body = PauseCmd{};
    else if (type == "resume") c.body = ResumeCmd{};
    else if (type == "set_speed") c.body = SetSpeedCmd{j.at("multiplier").get<double>()};
    else if (type == "spawn") c.body = spawn_from(j, std::nullopt);
    else if (type == "inject_scenario") {
      InjectScenarioCmd s;
      if (j.contains("ped")) s.ped = spawn_from(j["ped"], AgentKind::Pedestrian);
      if (j.contains("veh")) s.veh = spawn_from(j["veh"], AgentKind::Vehicle);
      s.target_tick = j.value("target_tick", s.target_tick);
      s.target_distance = j.value("target_distance", s.target_distance);
      c.body = s;
    } else if (type == "set_condition_set")
      c.body = SetConditionSetCmd{parse_kind(j.at("kind").get<std::string>()), j.value("components", ComponentSet{})};
    else if (type == "snapshot") c.body = SnapshotCmd{};
    else throw Error(Errc::Unsupported, "unsupported command type '" + type + "'");
    return c;
  });
}

Json to_json(const CommandResult& r) {
  Json j{{"status", r.status}, {"code", std::string(errc_name(r.code))}, {"tick", r.tick}};
  if (!r.detail.empty()) j["detail"] = r.detail;
  if (r.scheduled_tick) j["scheduled_tick"] = *r.scheduled_tick;
  if (r.planned_distance) j["planned_distance"] = *r.planned_distance;
  return j;
}

Json to_json(const TickRecord& r) {
  auto spawns = [](const std::vector<SpawnRecord>& v) {
    Json a = Json::array();
    for (const auto& s : v) a.push_back({{"id", s.id}, {"kind", std::string(kind_tag(s.kind))}, {"component", s.component}});
    return a;
  };
  Json agents = Json::array();
  for (const auto& a : r.agents) agents.push_back({{"id", a.id}, {"kind", std::string(kind_tag(a.kind))}, {"pos", pos_json(a.pos)}});
  Json removed = Json::array();
  for (const auto& x : r.removed) removed.push_back({{"id", x.id}, {"status", std::string(status_tag(x.status))}});
  return {{"tick", r.tick},
          {"t", r.t},
          {"n_target", r.n_target},
          {"active_before", r.active_before},
          {"spawned", spawns(r.spawned)},
          {"cmd_spawned", spawns(r.cmd_spawned)},
          {"agents", agents},
          {"removed", removed},
          {"refined", r.refined}};
}

Json to_json(const CommandRecord& r) {
  return {{"command", to_json(r.command)}, {"at_tick", r.at_tick}, {"result", to_json(r.result)}};
}

void write_trace(std::ostream& out, const SimTrace& trace) {
  out << Json{{"config", to_json(trace.config)}, {"schema_version", kSchemaVersion}}.dump() << '\n';
  std::size_t c = 0;
  for (const auto& t : trace.ticks) {
    while (c < trace.commands.size() && trace.commands[c].at_tick <= t.tick) out << to_json(trace.commands[c++]).dump() << '\n';
    out << to_json(t).dump() << '\n';
  }
  while (c < trace.commands.size()) out << to_json(trace.commands[c++]).dump() << '\n';
}

void save_trace(const std::string& path, const SimTrace& trace) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot open '" + path + "' for writing");
  write_trace(out, trace);
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open '" + path + "' for reading");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(Errc::ParseError, path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot open '" + path + "' for writing");
  out << j.dump(1) << '\n';
}

GmmModel load_gmm(const std::string& path) { return gmm_from_json(read_json_file(path)); }
TodDensityModel load_density(const std::string& path) { return density_from_json(read_json_file(path)); }
ForecastModel load_forecaster(const std::string& path) { return forecaster_from_json(read_json_file(path)); }

std::vector<Command> load_script(const std::string& path) {
  const Json j = read_json_file(path);
  const Json& arr = j.is_object() && j.contains("commands") ? j["commands"] : j;
  if (!arr.is_array()) throw Error(Errc::ParseError, path + ": script must be a JSON array of commands");
  std::vector<Command> out;
  std::int64_t next_id = 1;
  for (const auto& c : arr) {
    Command cmd = command_from_json(c);
    if (!c.contains("id")) cmd.id = next_id;
    next_id = std::max(next_id, cmd.id) + 1;
    out.push_back(std::move(cmd));
  }
  return out;
}

}  // namespace isim
