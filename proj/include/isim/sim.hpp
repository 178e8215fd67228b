#pragma once

// Simulation engine: prior generation, the tick loop with buffered
// refinement, agent lifecycle and steering commands.

#include <array>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "isim/density.hpp"
#include "isim/forecaster.hpp"
#include "isim/gmm.hpp"
#include "isim/spline.hpp"

namespace isim {

struct SimConfig {
  double dt = kDefaultPriorDt;
  int obs_len = 8;
  int pred_len = 12;
  double exit_eps = 1.0;
  double force_remove_margin = 1.5;  // multiple of the prior duration
  double speed = 1.0;                // wall-clock pacing multiplier
  std::uint64_t seed = 0;
  double start_hour = 8.0;           // clock hour at t = 0
  bool refine = true;                // false: agents follow their priors
  bool poisson_counts = false;       // draw N_t instead of rounding the expectation
  std::array<std::optional<ComponentSet>, 2> condition;  // per kind, indexed by kind_index
  std::array<double, 2> speed_cap{4.0, 30.0};
  int max_prior_attempts = 20;

  void validate() const;
};

// Shared, immutable model inputs. Any entry may be empty.
struct SimModels {
  std::array<std::shared_ptr<const GmmModel>, 2> gmm;
  std::array<std::shared_ptr<const TodDensityModel>, 2> density;
  std::shared_ptr<const ForecastModel> shared;
  std::array<std::shared_ptr<const ForecastModel>, 2> per_kind;

  bool has_forecaster() const { return shared || per_kind[0] || per_kind[1]; }
  ModelSet model_set() const { return {shared.get(), per_kind[0].get(), per_kind[1].get()}; }
};

struct GeneratedPrior {
  std::shared_ptr<const PriorTrajectory> prior;
  int component = 0;
};

// Draws N priors from `gmm` (conditioned on `c` when given), rejecting
// features with T <= 2*dt or any step faster than the kind's cap.
std::vector<GeneratedPrior> prior_gen(const GmmModel& gmm, std::size_t n, const std::optional<ComponentSet>& c,
                                      Rng& rng, const SimConfig& cfg);

enum class AgentStatus { Active, Exited, ForceRemoved };
std::string_view status_tag(AgentStatus s) noexcept;

struct ActiveAgent {
  std::int64_t id = 0;
  AgentKind kind = AgentKind::Pedestrian;
  int component = 0;
  std::shared_ptr<const PriorTrajectory> prior;
  std::int64_t spawn_tick = 0;
  double spawn_time = 0.0;
  std::vector<Vec2> history;  // one position per tick since spawn
  std::deque<Vec2> buffer;    // refined positions not yet reached
  AgentStatus status = AgentStatus::Active;

  Vec2 position() const { return history.back(); }
  Vec2 destination() const { return prior->destination; }
  double age(double dt) const { return double(history.size() - 1) * dt; }
};

struct SpawnCmd {
  AgentKind kind = AgentKind::Pedestrian;
  int count = 1;
  ComponentSet components;  // empty: the kind's active condition set
};

struct InjectScenarioCmd {
  SpawnCmd ped{AgentKind::Pedestrian, 1, {}};
  SpawnCmd veh{AgentKind::Vehicle, 1, {}};
  std::int64_t target_tick = -1;  // -1: earliest feasible
  double target_distance = 1.0;
};

struct PauseCmd {};
struct ResumeCmd {};
struct SetSpeedCmd {
  double multiplier = 1.0;
};
struct SetConditionSetCmd {
  AgentKind kind = AgentKind::Pedestrian;
  ComponentSet components;  // empty clears the condition
};
struct SnapshotCmd {};

using CommandBody =
    std::variant<PauseCmd, ResumeCmd, SetSpeedCmd, SpawnCmd, InjectScenarioCmd, SetConditionSetCmd, SnapshotCmd>;

std::string_view command_tag(const CommandBody& body) noexcept;

struct Command {
  std::int64_t id = 0;
  std::int64_t at_tick = 0;  // scripted: applied just before this tick runs
  CommandBody body;
};

struct CommandResult {
  std::string status = "ok";  // ok | deferred | error
  Errc code = Errc::Ok;
  std::string detail;
  std::int64_t tick = 0;  // tick counter when applied
  std::optional<std::int64_t> scheduled_tick;
  std::optional<double> planned_distance;

  bool ok() const { return code == Errc::Ok; }
};

struct AgentSample {
  std::int64_t id;
  AgentKind kind;
  Vec2 pos;
};

struct SpawnRecord {
  std::int64_t id;
  AgentKind kind;
  int component;
};

struct RemovalRecord {
  std::int64_t id;
  AgentStatus status;
};

struct TickRecord {
  std::int64_t tick = 0;
  double t = 0.0;
  unsigned n_target = 0;
  std::size_t active_before = 0;  // after removals and command spawns
  std::vector<SpawnRecord> spawned;      // population-rule spawns
  std::vector<SpawnRecord> cmd_spawned;  // from Spawn / InjectScenario
  std::vector<AgentSample> agents;
  std::vector<RemovalRecord> removed;
  bool refined = false;
};

struct CommandRecord {
  Command command;
  std::int64_t at_tick = 0;
  CommandResult result;
};

struct SimTrace {
  SimConfig config;
  std::vector<TickRecord> ticks;
  std::vector<CommandRecord> commands;
  int refinement_calls = 0;
  double refinement_seconds = 0.0;
  double wall_seconds = 0.0;
};

struct PendingSpawn {
  std::int64_t tick;  // spawn when this tick runs
  AgentKind kind;
  GeneratedPrior prior;
};

struct SimState {
  std::int64_t tick = 0;
  double t = 0.0;
  bool paused = false;
  double speed = 1.0;
  std::int64_t next_id = 1;
  std::vector<ActiveAgent> agents;
  std::vector<PendingSpawn> pending;
  std::array<std::optional<ComponentSet>, 2> condition;
  std::array<unsigned, 2> expected{0, 0};
};

class Simulator {
 public:
  Simulator(SimConfig cfg, SimModels models);

  const SimConfig& config() const { return cfg_; }
  const SimModels& models() const { return models_; }
  const SimState& state() const { return state_; }
  const SimTrace& trace() const { return trace_; }
  SimTrace take_trace();
  void set_recording(bool on) { record_ = on; }

  // Expected concurrent population per kind at time t.
  std::array<unsigned, 2> expected_counts(double t);
  TickRecord step();
  CommandResult apply(const Command& cmd);

  // Largest-remainder split of `deficit` by expected per-kind counts.
  static std::array<unsigned, 2> split_deficit(unsigned deficit, std::array<unsigned, 2> expected);

 private:
  GeneratedPrior draw_prior(AgentKind kind, const std::optional<ComponentSet>& c);
  std::optional<ComponentSet> effective_condition(const SpawnCmd& s) const;
  ActiveAgent make_agent(AgentKind kind, GeneratedPrior g);
  void refine_agents();
  CommandResult inject(const InjectScenarioCmd& cmd);

  SimConfig cfg_;
  SimModels models_;
  SimState state_;
  SimTrace trace_;
  Rng prior_rng_;
  Rng count_rng_;
  bool record_ = true;
};

// Runs `ticks` ticks applying scripted commands (ordered by at_tick) just
// before the tick they name. While paused no tick runs and the remaining
// commands are applied in order; the run ends if the script is exhausted
// while paused.
SimTrace run(const SimConfig& cfg, const SimModels& models, int ticks, std::span<const Command> script = {});

}  // namespace isim
