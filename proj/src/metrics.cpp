#include "isim/metrics.hpp"

#include <chrono>
#include <cstdio>
#include <limits>
#include <sstream>

namespace isim {

namespace {

void check_shapes(const Tracks& pred, const Tracks& truth, const TrackMasks& masks) {
  if (pred.size() != truth.size() || pred.size() != masks.size())
    throw Error(Errc::InvalidInput, "pred/truth/mask agent counts differ");
  for (std::size_t a = 0; a < pred.size(); ++a)
    if (pred[a].size() != truth[a].size() || pred[a].size() != masks[a].size())
      throw Error(Errc::InvalidInput, "pred/truth/mask step counts differ for agent " + std::to_string(a));
}

double reduce(double sq, double lin, double n, bool mean_l2) { return mean_l2 ? lin / n : std::sqrt(sq / n); }

}  // namespace

double ade(const Tracks& pred, const Tracks& truth, const TrackMasks& masks, bool mean_l2) {
  check_shapes(pred, truth, masks);
  double sq = 0.0, lin = 0.0, n = 0.0;
  for (std::size_t a = 0; a < pred.size(); ++a)
    for (std::size_t s = 0; s < pred[a].size(); ++s) {
      if (!masks[a][s]) continue;
      const Vec2 d = pred[a][s] - truth[a][s];
      sq += d.dot(d);
      lin += d.norm();
      n += 1.0;
    }
  if (n == 0.0) throw Error(Errc::EmptyEval, "no present entries");
  return reduce(sq, lin, n, mean_l2);
}

double fde(const Tracks& pred, const Tracks& truth, const TrackMasks& masks, bool mean_l2) {
  check_shapes(pred, truth, masks);
  double sq = 0.0, lin = 0.0, n = 0.0;
  for (std::size_t a = 0; a < pred.size(); ++a) {
    if (pred[a].empty() || !masks[a].back()) continue;
    const Vec2 d = pred[a].back() - truth[a].back();
    sq += d.dot(d);
    lin += d.norm();
    n += 1.0;
  }
  if (n == 0.0) throw Error(Errc::EmptyEval, "no agent present at the final step");
  return reduce(sq, lin, n, mean_l2);
}

PairFilter parse_pair_filter(std::string_view tag) {
  if (tag == "any") return PairFilter::Any;
  if (tag == "ped-veh" || tag == "cross") return PairFilter::PedVeh;
  if (tag == "ped-ped") return PairFilter::PedPed;
  if (tag == "veh-veh") return PairFilter::VehVeh;
  throw Error(Errc::InvalidInput, "unknown pair filter '" + std::string(tag) + "'");
}

Separation min_separation(const SimTrace& trace, PairFilter filter) {
  auto keep = [filter](AgentKind a, AgentKind b) {
    switch (filter) {
      case PairFilter::Any: return true;
      case PairFilter::PedVeh: return a != b;
      case PairFilter::PedPed: return a == AgentKind::Pedestrian && b == AgentKind::Pedestrian;
      case PairFilter::VehVeh: return a == AgentKind::Vehicle && b == AgentKind::Vehicle;
    }
    return true;
  };
  Separation best;
  best.distance = std::numeric_limits<double>::infinity();
  bool any = false;
  for (const auto& rec : trace.ticks) {
    for (std::size_t i = 0; i < rec.agents.size(); ++i)
      for (std::size_t j = i + 1; j < rec.agents.size(); ++j) {
        const auto& a = rec.agents[i];
        const auto& b = rec.agents[j];
        if (!keep(a.kind, b.kind)) continue;
        any = true;
        const double d = distance(a.pos, b.pos);
        if (d < best.distance) best = {d, rec.tick, a.id, b.id};
      }
  }
  if (!any) throw Error(Errc::NoPairs, "fewer than two matching agents were ever co-present");
  return best;
}

double overshoot(Vec2 final_position, const TrajectoryFeature& feature) {
  const Vec2 goal = feature.waypoints.empty() ? feature.exit_pos : feature.waypoints.back();
  Vec2 dir = feature.exit_vel;
  if (!(dir.norm() > 1e-9) && feature.waypoints.size() > 1)
    dir = feature.waypoints.back() - feature.waypoints[feature.waypoints.size() - 2];
  const double n = dir.norm();
  if (!(n > 1e-9)) return 0.0;
  return std::max(0.0, (final_position - goal).dot(dir / n));
}

Predictor model_predictor(const ModelSet& models) {
  return [models](std::span<const RolloutAgent> agents, int horizon) { return rollout(models, agents, horizon); };
}

Predictor constant_velocity_predictor(double dt) {
  return [dt](std::span<const RolloutAgent> agents, int horizon) {
    return rollout_constant_velocity(agents, horizon, dt);
  };
}

Predictor prior_predictor(double dt) {
  return [dt](std::span<const RolloutAgent> agents, int horizon) {
    Tracks out(agents.size());
    for (std::size_t a = 0; a < agents.size(); ++a) {
      if (!agents[a].prior) throw Error(Errc::MissingHistory, "prior predictor needs a prior");
      for (int s = 1; s <= horizon; ++s) out[a].push_back(agents[a].prior->at(agents[a].age + double(s) * dt));
    }
    return out;
  };
}

EvalReport evaluate(const Predictor& predictor, std::span<const Scene> scenes, const EvalOptions& opts,
                    const std::function<bool(const SceneAgent&)>& agent_filter) {
  EvalReport rep;
  rep.horizon = opts.horizon;
  double sq = 0.0, lin = 0.0, n = 0.0, fsq = 0.0, flin = 0.0, fn = 0.0;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const Scene& scene = scenes[si];
    if (scene.length < opts.obs_len + opts.horizon) continue;
    std::vector<std::size_t> targets;
    for (std::size_t idx : forecast_targets(scene, opts.obs_len))
      if (!agent_filter || agent_filter(scene.agents[idx])) targets.push_back(idx);
    if (targets.empty()) continue;

    std::vector<PriorTrajectory> priors;
    priors.reserve(targets.size());
    std::vector<RolloutAgent> in;
    for (std::size_t idx : targets) {
      const auto& a = scene.agents[idx];
      priors.push_back(make_prior(*a.feature, opts.dt, a.kind));
    }
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto& a = scene.agents[targets[k]];
      RolloutAgent r;
      r.kind = a.kind;
      r.observed.assign(a.points.begin(), a.points.begin() + opts.obs_len);
      r.prior = &priors[k];
      r.age = scene.frame_time(opts.obs_len - 1) - a.t0;
      in.push_back(std::move(r));
    }
    const auto start = std::chrono::steady_clock::now();
    const Tracks pred = predictor(in, opts.horizon);
    rep.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ++rep.calls;
    ++rep.scenes;

    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto& a = scene.agents[targets[k]];
      AgentEval ev;
      ev.scene = si;
      ev.agent_id = a.agent_id;
      ev.kind = a.kind;
      ev.remaining_steps = (a.feature->duration - in[k].age) / opts.dt;
      ev.overshoot = overshoot(pred[k].back(), *a.feature);
      for (int s = 0; s < opts.horizon; ++s) {
        const int f = opts.obs_len + s;
        if (!a.present(f)) continue;
        const Vec2 d = pred[k][std::size_t(s)] - a.points[std::size_t(f)];
        ev.sq_error_sum += d.dot(d);
        ev.error_sum += d.norm();
        ++ev.steps;
      }
      const int last = opts.obs_len + opts.horizon - 1;
      if (a.present(last)) {
        ev.final_present = true;
        ev.final_error = distance(pred[k].back(), a.points[std::size_t(last)]);
        fsq += ev.final_error * ev.final_error;
        flin += ev.final_error;
        fn += 1.0;
      }
      sq += ev.sq_error_sum;
      lin += ev.error_sum;
      n += double(ev.steps);
      rep.agents.push_back(ev);
    }
  }
  if (n == 0.0) throw Error(Errc::EmptyEval, "no evaluable agents in " + std::to_string(scenes.size()) + " scenes");
  rep.ade = reduce(sq, lin, n, opts.mean_l2);
  rep.fde = fn > 0.0 ? reduce(fsq, flin, fn, opts.mean_l2) : 0.0;
  return rep;
}

Aggregate aggregate(const EvalReport& r, const std::function<bool(const AgentEval&)>& keep, bool mean_l2) {
  double sq = 0.0, lin = 0.0, n = 0.0, fsq = 0.0, flin = 0.0, fn = 0.0;
  Aggregate out;
  for (const auto& a : r.agents) {
    if (keep && !keep(a)) continue;
    ++out.agents;
    sq += a.sq_error_sum;
    lin += a.error_sum;
    n += double(a.steps);
    if (a.final_present) {
      fsq += a.final_error * a.final_error;
      flin += a.final_error;
      fn += 1.0;
    }
  }
  if (n == 0.0) throw Error(Errc::EmptyEval, "no agents selected");
  out.ade = reduce(sq, lin, n, mean_l2);
  out.fde = fn > 0.0 ? reduce(fsq, flin, fn, mean_l2) : 0.0;
  return out;
}

std::string format_table(const std::vector<TableRow>& rows) {
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.model.size());
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s %5s %5s %8s %8s %10s\n", int(w), "Model", "L_pd", "Goal", "ADE", "FDE", "FPS");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %5d %5s %8.3f %8.3f %10.1f\n", int(w), r.model.c_str(), r.pred_len,
                  r.goal.c_str(), r.ade, r.fde, r.fps);
    os << buf;
  }
  return os.str();
}

std::string format_table_csv(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << "Model,L_pd,Goal,ADE,FDE,FPS\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%s,%.6f,%.6f,%.3f\n", r.model.c_str(), r.pred_len, r.goal.c_str(), r.ade,
                  r.fde, r.fps);
    os << buf;
  }
  return os.str();
}

}  // namespace isim
