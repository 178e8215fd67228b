#include "isim/wire.hpp"

#include <cmath>

namespace isim {

double round_mm(double v) { return std::round(v * 1000.0) / 1000.0; }

namespace {

Json pos(Vec2 p) { return Json::array({round_mm(p.x), round_mm(p.y)}); }

Json palette(const Simulator& sim) {
  Json out = Json::object();
  for (AgentKind k : {AgentKind::Pedestrian, AgentKind::Vehicle}) {
    Json list = Json::array();
    if (const auto& g = sim.models().gmm[kind_index(k)]) {
      for (int m = 0; m < g->components(); ++m) {
        Json entry{{"component", m}, {"weight", g->weights()(m)}, {"points", Json::array()}};
        try {
          const Eigen::VectorXd mean = g->feature_mean(m);
          const auto f = TrajectoryFeature::unflatten(std::span<const double>(mean.data(), std::size_t(mean.size())));
          const auto prior = make_prior(f, sim.config().dt, k);
          for (const auto& p : prior.points) entry["points"].push_back(pos(p));
        } catch (const Error&) {
          // Degenerate mean feature: the thumbnail stays empty.
        }
        list.push_back(std::move(entry));
      }
    }
    out[std::string(kind_tag(k))] = std::move(list);
  }
  return out;
}

}  // namespace

Json encode_hello(const Simulator& sim, double extent) {
  return {{"type", "hello"},
          {"schema_version", kProtocolVersion},
          {"config", to_json(sim.config())},
          {"extent", extent},
          {"supervision", sim.models().has_forecaster()
                              ? std::string(supervision_tag(sim.models().model_set().hyper().mode))
                              : std::string("prior")},
          {"palette", palette(sim)}};
}

Json encode_snapshot(const Simulator& sim) {
  const auto& st = sim.state();
  const auto& cfg = sim.config();
  const bool refine = cfg.refine && sim.models().has_forecaster();
  const Supervision mode = refine ? sim.models().model_set().hyper().mode : Supervision::Destination;
  Json agents = Json::array();
  std::array<std::size_t, 2> population{0, 0};
  for (const auto& a : st.agents) {
    ++population[kind_index(a.kind)];
    Json tail = Json::array();
    const std::size_t n = std::min(kTailLength, a.history.size());
    for (std::size_t i = a.history.size() - n; i < a.history.size(); ++i) tail.push_back(pos(a.history[i]));
    const Vec2 goal = mode == Supervision::None ? a.destination()
                                                : goal_for(*a.prior, a.age(cfg.dt), mode, cfg.pred_len, cfg.dt);
    agents.push_back({{"id", a.id},
                      {"kind", std::string(kind_tag(a.kind))},
                      {"component", a.component},
                      {"pos", pos(a.position())},
                      {"recent_tail", std::move(tail)},
                      {"goal", pos(goal)},
                      {"status", std::string(status_tag(a.status))}});
  }
  return {{"type", "snapshot"},
          {"tick", st.tick},
          {"sim_time", st.t},
          {"paused", st.paused},
          {"speed", st.speed},
          {"agents", std::move(agents)},
          {"population", {{"ped", population[0]}, {"veh", population[1]}}},
          {"expected_N_t", st.expected[0] + st.expected[1]}};
}

Json encode_ack(std::int64_t command_id, const CommandResult& result) {
  return {{"type", "ack"}, {"command_id", command_id}, {"result", to_json(result)}};
}

Json encode_error(std::string_view code, std::string_view detail) {
  return {{"type", "error"}, {"code", std::string(code)}, {"detail", std::string(detail)}};
}

Json encode_metrics(double fps, const std::array<std::size_t, 2>& active) {
  return {{"type", "metrics"}, {"fps", fps}, {"active_counts", {{"ped", active[0]}, {"veh", active[1]}}}};
}

DecodedCommand decode_command(std::string_view bytes) {
  DecodedCommand out;
  Json j;
  try {
    j = Json::parse(bytes);
  } catch (const Json::exception& e) {
    out.error = encode_error("parse_error", e.what());
    return out;
  }
  try {
    out.command = command_from_json(j);
  } catch (const Error& e) {
    out.error = encode_error(e.code() == Errc::Unsupported ? "unsupported" : "parse_error", e.what());
  }
  return out;
}

}  // namespace isim
