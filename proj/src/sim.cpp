#include "isim/sim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace isim {

void SimConfig::validate() const {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw Error(Errc::InvalidInput, "dt must be positive");
  if (!(exit_eps > 0.0)) throw Error(Errc::InvalidInput, "exit_eps must be positive");
  if (obs_len < 2 || pred_len < 1) throw Error(Errc::InvalidInput, "obs_len >= 2 and pred_len >= 1 required");
  if (!(force_remove_margin > 0.0)) throw Error(Errc::InvalidInput, "force_remove_margin must be positive");
  if (!(speed > 0.0) || !std::isfinite(speed)) throw Error(Errc::InvalidSpeed, "speed multiplier must be > 0");
  if (max_prior_attempts < 1) throw Error(Errc::InvalidInput, "max_prior_attempts must be >= 1");
}

std::string_view status_tag(AgentStatus s) noexcept {
  switch (s) {
    case AgentStatus::Active: return "active";
    case AgentStatus::Exited: return "exited";
    case AgentStatus::ForceRemoved: return "force_removed";
  }
  return "active";
}

std::string_view command_tag(const CommandBody& body) noexcept {
  struct V {
    std::string_view operator()(const PauseCmd&) const { return "pause"; }
    std::string_view operator()(const ResumeCmd&) const { return "resume"; }
    std::string_view operator()(const SetSpeedCmd&) const { return "set_speed"; }
    std::string_view operator()(const SpawnCmd&) const { return "spawn"; }
    std::string_view operator()(const InjectScenarioCmd&) const { return "inject_scenario"; }
    std::string_view operator()(const SetConditionSetCmd&) const { return "set_condition_set"; }
    std::string_view operator()(const SnapshotCmd&) const { return "snapshot"; }
  };
  return std::visit(V{}, body);
}

std::vector<GeneratedPrior> prior_gen(const GmmModel& gmm, std::size_t n, const std::optional<ComponentSet>& c,
                                      Rng& rng, const SimConfig& cfg) {
  std::vector<GeneratedPrior> out;
  out.reserve(n);
  if (c) gmm.check_condition(*c);
  const double cap = cfg.speed_cap[kind_index(gmm.kind())];
  for (std::size_t i = 0; i < n; ++i) {
    int too_short = 0, too_fast = 0, invalid = 0;
    double last_t = 0.0, last_speed = 0.0;
    bool done = false;
    for (int attempt = 0; attempt < cfg.max_prior_attempts && !done; ++attempt) {
      auto draw = c ? sample_conditional(gmm, *c, 1, rng) : sample(gmm, 1, rng);
      const TrajectoryFeature f = TrajectoryFeature::unflatten(draw[0].z);
      last_t = f.duration;
      if (!(f.duration > 2.0 * cfg.dt) || !std::isfinite(f.duration)) {
        ++too_short;
        continue;
      }
      try {
        auto prior = std::make_shared<PriorTrajectory>(make_prior(f, cfg.dt, gmm.kind()));
        last_speed = prior->max_step_speed();
        if (!(last_speed <= cap)) {
          ++too_fast;
          continue;
        }
        out.push_back({std::move(prior), draw[0].component});
        done = true;
      } catch (const Error&) {
        ++invalid;
      }
    }
    if (!done)
      throw Error(Errc::PriorRejection,
                  std::to_string(cfg.max_prior_attempts) + " consecutive rejections for " +
                      std::string(kind_tag(gmm.kind())) + " (" + std::to_string(too_short) + " with T <= 2dt, " +
                      std::to_string(too_fast) + " over " + std::to_string(cap) + " m/s, " +
                      std::to_string(invalid) + " invalid; last T=" + std::to_string(last_t) +
                      ", last speed=" + std::to_string(last_speed) + ")");
  }
  return out;
}

namespace {

bool close(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)); }

}  // namespace

Simulator::Simulator(SimConfig cfg, SimModels models)
    : cfg_(std::move(cfg)),
      models_(std::move(models)),
      prior_rng_(Rng::mix(cfg_.seed, 1)),
      count_rng_(Rng::mix(cfg_.seed, 2)) {
  cfg_.validate();
  for (std::size_t k = 0; k < 2; ++k) {
    if (models_.density[k] && !models_.gmm[k])
      throw Error(Errc::ConfigMismatch, "density model for " + std::string(kind_tag(AgentKind(k))) +
                                            " has no matching mixture model");
    if (models_.gmm[k] && models_.gmm[k]->kind() != AgentKind(k))
      throw Error(Errc::ConfigMismatch, "mixture model kind does not match its slot");
    if (cfg_.condition[k] && models_.gmm[k]) models_.gmm[k]->check_condition(*cfg_.condition[k]);
  }
  auto check = [&](const ForecastModel* m) {
    if (!m) return;
    const auto& hp = m->hyper();
    if (!close(hp.dt, cfg_.dt) || hp.obs_len != cfg_.obs_len || hp.pred_len != cfg_.pred_len)
      throw Error(Errc::ConfigMismatch, "forecaster (dt " + std::to_string(hp.dt) + ", obs " +
                                            std::to_string(hp.obs_len) + ", pred " + std::to_string(hp.pred_len) +
                                            ") does not match the simulation config");
  };
  check(models_.shared.get());
  check(models_.per_kind[0].get());
  check(models_.per_kind[1].get());
  state_.speed = cfg_.speed;
  state_.condition = cfg_.condition;
  trace_.config = cfg_;
}

SimTrace Simulator::take_trace() {
  SimTrace out = std::move(trace_);
  trace_ = SimTrace{};
  trace_.config = cfg_;
  return out;
}

std::array<unsigned, 2> Simulator::expected_counts(double t) {
  std::array<unsigned, 2> n{0, 0};
  const double hour = cfg_.start_hour + t / 3600.0;
  for (std::size_t k = 0; k < 2; ++k) {
    if (!models_.density[k]) continue;
    n[k] = cfg_.poisson_counts ? sample_count(*models_.density[k], hour, count_rng_)
                               : expected_count(*models_.density[k], hour);
  }
  return n;
}

std::array<unsigned, 2> Simulator::split_deficit(unsigned deficit, std::array<unsigned, 2> expected) {
  const double total = double(expected[0]) + double(expected[1]);
  if (deficit == 0 || total == 0.0) return {0, 0};
  std::array<unsigned, 2> out{};
  std::array<double, 2> rem{};
  unsigned assigned = 0;
  for (std::size_t k = 0; k < 2; ++k) {
    const double q = double(deficit) * double(expected[k]) / total;
    out[k] = static_cast<unsigned>(std::floor(q));
    rem[k] = q - std::floor(q);
    assigned += out[k];
  }
  // Ties go to pedestrians.
  while (assigned < deficit) {
    const std::size_t k = rem[1] > rem[0] ? 1 : 0;
    ++out[k];
    rem[k] = -1.0;
    ++assigned;
  }
  return out;
}

std::optional<ComponentSet> Simulator::effective_condition(const SpawnCmd& s) const {
  if (!s.components.empty()) return s.components;
  return state_.condition[kind_index(s.kind)];
}

GeneratedPrior Simulator::draw_prior(AgentKind kind, const std::optional<ComponentSet>& c) {
  const auto& gmm = models_.gmm[kind_index(kind)];
  if (!gmm) throw Error(Errc::ConfigMismatch, "no mixture model loaded for " + std::string(kind_tag(kind)));
  return prior_gen(*gmm, 1, c, prior_rng_, cfg_).front();
}

ActiveAgent Simulator::make_agent(AgentKind kind, GeneratedPrior g) {
  ActiveAgent a;
  a.id = state_.next_id++;
  a.kind = kind;
  a.component = g.component;
  a.prior = std::move(g.prior);
  a.spawn_tick = state_.tick;
  a.spawn_time = state_.t;
  a.history.push_back(a.prior->at(0.0));
  return a;
}

void Simulator::refine_agents() {
  const auto start = std::chrono::steady_clock::now();
  std::vector<RolloutAgent> in;
  in.reserve(state_.agents.size());
  for (const auto& a : state_.agents) {
    RolloutAgent r;
    r.kind = a.kind;
    const std::size_t keep = std::min(a.history.size(), std::size_t(cfg_.obs_len));
    r.observed.assign(a.history.end() - std::ptrdiff_t(keep), a.history.end());
    r.prior = a.prior.get();
    r.age = a.age(cfg_.dt);
    in.push_back(std::move(r));
  }
  const auto out = rollout(models_.model_set(), in, cfg_.pred_len);
  for (std::size_t i = 0; i < state_.agents.size(); ++i)
    state_.agents[i].buffer.assign(out[i].begin(), out[i].end());
  ++trace_.refinement_calls;
  trace_.refinement_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

TickRecord Simulator::step() {
  ++state_.tick;
  state_.t = double(state_.tick) * cfg_.dt;
  TickRecord rec;
  rec.tick = state_.tick;
  rec.t = state_.t;

  // Advance along the refined buffer, or the prior when none is queued.
  for (auto& a : state_.agents) {
    Vec2 next;
    if (!a.buffer.empty()) {
      next = a.buffer.front();
      a.buffer.pop_front();
    } else {
      next = a.prior->at(double(a.history.size()) * cfg_.dt);
    }
    a.history.push_back(next);
  }

  // Exit and force-removal checks.
  std::vector<ActiveAgent> kept;
  kept.reserve(state_.agents.size());
  for (auto& a : state_.agents) {
    if (distance(a.position(), a.destination()) < cfg_.exit_eps)
      a.status = AgentStatus::Exited;
    else if (a.age(cfg_.dt) > cfg_.force_remove_margin * a.prior->duration)
      a.status = AgentStatus::ForceRemoved;
    if (a.status == AgentStatus::Active)
      kept.push_back(std::move(a));
    else
      rec.removed.push_back({a.id, a.status});
  }
  state_.agents = std::move(kept);

  // Command spawns due this tick.
  std::vector<PendingSpawn> later;
  for (auto& p : state_.pending) {
    if (p.tick > state_.tick) {
      later.push_back(std::move(p));
      continue;
    }
    ActiveAgent a = make_agent(p.kind, std::move(p.prior));
    rec.cmd_spawned.push_back({a.id, a.kind, a.component});
    state_.agents.push_back(std::move(a));
  }
  state_.pending = std::move(later);

  // Population rule.
  rec.active_before = state_.agents.size();
  state_.expected = expected_counts(state_.t);
  rec.n_target = state_.expected[0] + state_.expected[1];
  const unsigned deficit =
      rec.n_target > rec.active_before ? rec.n_target - static_cast<unsigned>(rec.active_before) : 0u;
  const auto split = split_deficit(deficit, state_.expected);
  for (std::size_t k = 0; k < 2; ++k) {
    for (unsigned i = 0; i < split[k]; ++i) {
      const AgentKind kind = AgentKind(k);
      ActiveAgent a = make_agent(kind, draw_prior(kind, state_.condition[k]));
      rec.spawned.push_back({a.id, a.kind, a.component});
      state_.agents.push_back(std::move(a));
    }
  }

  if (cfg_.refine && models_.has_forecaster() && (state_.tick - 1) % cfg_.pred_len == 0 && !state_.agents.empty()) {
    refine_agents();
    rec.refined = true;
  }

  rec.agents.reserve(state_.agents.size());
  for (const auto& a : state_.agents) rec.agents.push_back({a.id, a.kind, a.position()});
  if (record_) trace_.ticks.push_back(rec);
  return rec;
}

CommandResult Simulator::inject(const InjectScenarioCmd& cmd) {
  const auto pc = effective_condition(cmd.ped);
  const auto vc = effective_condition(cmd.veh);
  if (cmd.ped.count < 1 || cmd.veh.count < 1) throw Error(Errc::InvalidInput, "scenario counts must be >= 1");

  // Closest grid pair between two priors.
  struct Pair {
    double d = std::numeric_limits<double>::infinity();
    std::size_t i = 0, j = 0;
  };
  auto closest = [](const PriorTrajectory& p, const PriorTrajectory& v) {
    Pair best;
    for (std::size_t i = 0; i < p.points.size(); ++i)
      for (std::size_t j = 0; j < v.points.size(); ++j) {
        const double d = distance(p.points[i], v.points[j]);
        if (d < best.d) best = {d, i, j};
      }
    return best;
  };

  GeneratedPrior ped, veh;
  Pair pair;
  for (int attempt = 0; attempt < cfg_.max_prior_attempts; ++attempt) {
    GeneratedPrior p = draw_prior(AgentKind::Pedestrian, pc);
    GeneratedPrior v = draw_prior(AgentKind::Vehicle, vc);
    const Pair c = closest(*p.prior, *v.prior);
    if (c.d < pair.d) {
      pair = c;
      ped = p;
      veh = v;
    }
    if (pair.d <= cmd.target_distance) break;
  }

  const std::int64_t earliest = state_.tick + 1;
  const auto lead = std::int64_t(std::max(pair.i, pair.j));
  std::int64_t target = cmd.target_tick >= 0 ? cmd.target_tick : earliest + lead;
  CommandResult res;
  if (target - lead < earliest) {
    target = earliest + lead;
    res.detail = "target tick moved to " + std::to_string(target);
  }
  if (pair.d > cmd.target_distance) {
    if (!res.detail.empty()) res.detail += "; ";
    res.detail += "closest approach " + std::to_string(pair.d) + " m exceeds target";
  }
  state_.pending.push_back({target - std::int64_t(pair.i), AgentKind::Pedestrian, ped});
  state_.pending.push_back({target - std::int64_t(pair.j), AgentKind::Vehicle, veh});
  // Extra group members align with the first member of the other group.
  for (int k = 1; k < cmd.ped.count; ++k) {
    GeneratedPrior p = draw_prior(AgentKind::Pedestrian, pc);
    const Pair c = closest(*p.prior, *veh.prior);
    state_.pending.push_back({std::max(earliest, target - std::int64_t(pair.j) + std::int64_t(c.j) - std::int64_t(c.i)),
                              AgentKind::Pedestrian, p});
  }
  for (int k = 1; k < cmd.veh.count; ++k) {
    GeneratedPrior v = draw_prior(AgentKind::Vehicle, vc);
    const Pair c = closest(*ped.prior, *v.prior);
    state_.pending.push_back({std::max(earliest, target - std::int64_t(pair.i) + std::int64_t(c.i) - std::int64_t(c.j)),
                              AgentKind::Vehicle, v});
  }
  res.scheduled_tick = target;
  res.planned_distance = pair.d;
  return res;
}

CommandResult Simulator::apply(const Command& cmd) {
  CommandResult res;
  try {
    struct V {
      Simulator& s;
      CommandResult operator()(const PauseCmd&) {
        s.state_.paused = true;
        return {};
      }
      CommandResult operator()(const ResumeCmd&) {
        s.state_.paused = false;
        return {};
      }
      CommandResult operator()(const SetSpeedCmd& c) {
        if (!(c.multiplier > 0.0) || !std::isfinite(c.multiplier))
          throw Error(Errc::InvalidSpeed, "speed multiplier must be finite and > 0");
        s.state_.speed = c.multiplier;
        return {};
      }
      CommandResult operator()(const SpawnCmd& c) {
        if (c.count < 0) throw Error(Errc::InvalidInput, "spawn count must be >= 0");
        const auto cond = s.effective_condition(c);
        const auto& gmm = s.models_.gmm[kind_index(c.kind)];
        if (!gmm) throw Error(Errc::ConfigMismatch, "no mixture model loaded for " + std::string(kind_tag(c.kind)));
        if (cond) gmm->check_condition(*cond);
        for (auto& g : prior_gen(*gmm, std::size_t(c.count), cond, s.prior_rng_, s.cfg_))
          s.state_.pending.push_back({s.state_.tick + 1, c.kind, std::move(g)});
        CommandResult r;
        r.scheduled_tick = s.state_.tick + 1;
        if (s.state_.paused) r.status = "deferred";
        return r;
      }
      CommandResult operator()(const InjectScenarioCmd& c) {
        CommandResult r = s.inject(c);
        if (s.state_.paused) r.status = "deferred";
        return r;
      }
      CommandResult operator()(const SetConditionSetCmd& c) {
        auto& slot = s.state_.condition[kind_index(c.kind)];
        if (c.components.empty()) {
          slot.reset();
          return {};
        }
        const auto& gmm = s.models_.gmm[kind_index(c.kind)];
        if (!gmm) throw Error(Errc::ConfigMismatch, "no mixture model loaded for " + std::string(kind_tag(c.kind)));
        gmm->check_condition(c.components);
        slot = c.components;
        return {};
      }
      CommandResult operator()(const SnapshotCmd&) { return {}; }
    };
    res = std::visit(V{*this}, cmd.body);
  } catch (const Error& e) {
    res = {};
    res.status = "error";
    res.code = e.code();
    res.detail = e.what();
  }
  res.tick = state_.tick;
  trace_.commands.push_back({cmd, state_.tick + 1, res});
  return res;
}

SimTrace run(const SimConfig& cfg, const SimModels& models, int ticks, std::span<const Command> script) {
  if (ticks < 1) throw Error(Errc::InvalidInput, "run needs at least one tick");
  const auto start = std::chrono::steady_clock::now();
  Simulator sim(cfg, models);
  std::vector<Command> ordered(script.begin(), script.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const Command& a, const Command& b) { return a.at_tick < b.at_tick; });
  std::size_t next = 0;
  while (sim.state().tick < ticks) {
    while (next < ordered.size() && (ordered[next].at_tick <= sim.state().tick + 1 || sim.state().paused))
      sim.apply(ordered[next++]);
    if (sim.state().paused) break;
    sim.step();
  }
  SimTrace trace = sim.take_trace();
  trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return trace;
}

}  // namespace isim
