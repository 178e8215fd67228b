#pragma once

// Displacement metrics, separation sweeps and evaluation tables.

#include <functional>
#include <string>
#include <vector>

#include "isim/forecaster.hpp"
#include "isim/sim.hpp"

namespace isim {

using Tracks = std::vector<std::vector<Vec2>>;                // [agent][step]
using TrackMasks = std::vector<std::vector<std::uint8_t>>;    // 1 where present

// RMSE over present (agent, step) entries; mean Euclidean error with mean_l2.
double ade(const Tracks& pred, const Tracks& truth, const TrackMasks& masks, bool mean_l2 = false);
// Same over the final step only, for agents present there.
double fde(const Tracks& pred, const Tracks& truth, const TrackMasks& masks, bool mean_l2 = false);

enum class PairFilter { Any, PedVeh, PedPed, VehVeh };
PairFilter parse_pair_filter(std::string_view tag);

struct Separation {
  double distance = 0.0;
  std::int64_t tick = 0;
  std::int64_t first = 0, second = 0;  // agent ids
};

Separation min_separation(const SimTrace& trace, PairFilter filter = PairFilter::Any);

// Distance travelled past x_T along the exit direction, zero if short of it.
double overshoot(Vec2 final_position, const TrajectoryFeature& feature);

using Predictor = std::function<Tracks(std::span<const RolloutAgent>, int horizon)>;

Predictor model_predictor(const ModelSet& models);
Predictor constant_velocity_predictor(double dt);
// Follows each agent's prior from its current age.
Predictor prior_predictor(double dt);

struct AgentEval {
  std::size_t scene = 0;
  std::int64_t agent_id = 0;
  AgentKind kind = AgentKind::Pedestrian;
  double sq_error_sum = 0.0;
  double error_sum = 0.0;
  int steps = 0;
  bool final_present = false;
  double final_error = 0.0;
  double overshoot = 0.0;
  double remaining_steps = 0.0;  // (T - age at last observation) / dt
};

struct EvalOptions {
  int obs_len = 8;
  int horizon = 12;
  double dt = kDefaultPriorDt;
  bool mean_l2 = false;
};

struct EvalReport {
  double ade = 0.0;
  double fde = 0.0;
  std::vector<AgentEval> agents;
  int horizon = 0;
  std::size_t scenes = 0;
  int calls = 0;
  double seconds = 0.0;  // wall time inside predictor calls

  double fps() const { return seconds > 0.0 ? double(calls) * double(horizon) / seconds : 0.0; }
};

EvalReport evaluate(const Predictor& predictor, std::span<const Scene> scenes, const EvalOptions& opts,
                    const std::function<bool(const SceneAgent&)>& agent_filter = {});

// Aggregates a subset of agents of a report.
struct Aggregate {
  double ade = 0.0, fde = 0.0;
  std::size_t agents = 0;
};
Aggregate aggregate(const EvalReport& r, const std::function<bool(const AgentEval&)>& keep, bool mean_l2 = false);

struct TableRow {
  std::string model;
  int pred_len = 0;
  std::string goal;
  double ade = 0.0, fde = 0.0, fps = 0.0;
};

std::string format_table(const std::vector<TableRow>& rows);
std::string format_table_csv(const std::vector<TableRow>& rows);

}  // namespace isim
