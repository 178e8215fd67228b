#pragma once

// Corpus files, the truncation filter, scene extraction and the synthetic
// intersection generator.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "isim/core.hpp"

namespace isim {

struct SkippedLine {
  std::size_t line;  // 1-based
  std::string reason;
};

struct CorpusLoad {
  std::vector<Trajectory> trajectories;
  std::vector<SkippedLine> skipped;
  std::vector<std::string> warnings;
};

// Strict mode throws ParseError on the first bad line; lenient mode skips it.
CorpusLoad load_corpus(const std::string& path, bool strict = true);
void save_corpus(const std::string& path, std::span<const Trajectory> trajs);

// Single JSON line <-> trajectory.
Trajectory parse_trajectory(std::string_view line);
std::string format_trajectory(const Trajectory& traj);

struct Region {
  std::vector<Vec2> vertices;  // convex, either orientation

  static Region square(double half_width);
  // Throws InvalidRegion for fewer than 3 vertices, zero area or a non-convex outline.
  void validate() const;
  bool contains(Vec2 p) const;
  double boundary_distance(Vec2 p) const;
};

struct FilterResult {
  std::vector<Trajectory> kept;
  std::vector<std::size_t> dropped;  // input indices
};

// Keeps trajectories whose first and last points are outside the region or
// within `margin` of its boundary.
FilterResult filter_truncated(std::span<const Trajectory> trajs, const Region& region, double margin);

struct SynthRoute {
  std::string label;
  AgentKind kind = AgentKind::Pedestrian;
  double length = 0.0;
  Vec2 start, end;

  Vec2 point(double s) const;    // arc length s, extended straight past both ends
  Vec2 tangent(double s) const;  // unit

  struct Piece {
    bool arc = false;
    Vec2 a;        // line start or arc center
    Vec2 dir;      // line direction (unit)
    double radius = 0.0, angle0 = 0.0, sweep = 0.0;  // arc; sweep signed
    double length = 0.0;
  };
  std::vector<Piece> pieces;
};

// Eight crosswalk routes and twelve vehicle routes (through/left/right per approach).
std::vector<SynthRoute> synth_routes(double half_width = 15.0);

struct SynthConfig {
  std::uint64_t seed = 0;
  double half_width = 15.0;
  double noise_sigma = 0.05;
  int ped_per_route = 100;
  int veh_per_route = 100;
  std::map<std::string, int> route_counts;  // overrides per label
  std::array<double, 2> ped_speed{0.9, 1.6};
  std::array<double, 2> veh_speed{3.0, 7.0};
  double native_dt = 1.0 / 30.0;
  double start_time = 8.0 * 3600.0;
  double span_seconds = 3600.0;
  bool vehicles_yield = true;
  std::array<double, 2> peak_hours{8.0, 17.5};
  std::array<double, 2> peak_widths{1.5, 2.0};
  std::array<double, 2> peak_level{20.0, 12.0};  // concurrent peds, vehicles at a peak
  double base_fraction = 0.1;

  int count_for(const SynthRoute& r) const;
};

struct SynthResult {
  std::vector<Trajectory> corpus;
  std::vector<std::string> labels;  // route label per trajectory
  std::array<std::array<double, 24>, 2> hourly{};  // [kind][hour]
};

SynthResult synth_generate(const SynthConfig& cfg);

// Mean of the configured daily profile (before the Poisson draw).
std::array<double, 24> synth_profile(const SynthConfig& cfg, AgentKind kind);

void save_hourly_counts(const std::string& path, const std::array<std::array<double, 24>, 2>& hourly);
// Reads a `hour,<column>` CSV. The column may be named after the kind
// ("ped"/"veh") or "count".
std::array<double, 24> load_hourly_counts(const std::string& path, AgentKind kind);

// Uniformly sampled windows of `length` frames on the absolute grid k*dt.
// Each scene agent carries the feature of its full native trajectory.
std::vector<Scene> extract_scenes(std::span<const Trajectory> corpus, int length, std::size_t count, double dt,
                                  std::uint64_t seed, int waypoints = kDefaultWaypoints);

void save_scenes(const std::string& path, std::span<const Scene> scenes);
std::vector<Scene> load_scenes(const std::string& path);

}  // namespace isim
