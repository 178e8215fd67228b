#pragma once

// Shared domain types for the intersection simulator: agents, trajectories,
// feature vectors and scene windows.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace isim {

enum class Errc : int {
  Ok = 0,
  InvalidInput,
  EmptyScene,
  InsufficientData,
  ComponentCollapse,
  InvalidCondition,
  DegenerateLikelihoods,
  InvalidKnots,
  NumericalFault,
  MissingHistory,
  EmptyBatch,
  EmptyEval,
  NoPairs,
  PriorRejection,
  ConfigMismatch,
  InvalidSpeed,
  IoError,
  ParseError,
  InvalidRegion,
  Unsupported,
  BindError,
};

std::string_view errc_name(Errc e) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2& operator+=(Vec2 o) { x += o.x; y += o.y; return *this; }
  constexpr Vec2& operator-=(Vec2 o) { x -= o.x; y -= o.y; return *this; }
  friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Vec2 operator-(Vec2 a) { return {-a.x, -a.y}; }
  friend constexpr Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend constexpr Vec2 operator*(Vec2 a, double s) { return {s * a.x, s * a.y}; }
  friend constexpr Vec2 operator/(Vec2 a, double s) { return {a.x / s, a.y / s}; }
  friend constexpr bool operator==(Vec2, Vec2) = default;

  double norm() const { return std::hypot(x, y); }
  constexpr double dot(Vec2 o) const { return x * o.x + y * o.y; }
  bool finite() const { return std::isfinite(x) && std::isfinite(y); }
};

inline double distance(Vec2 a, Vec2 b) { return (a - b).norm(); }

// a + (b - a) * w, returning a exactly at w == 0.
inline Vec2 lerp(Vec2 a, Vec2 b, double w) { return w == 0.0 ? a : a + (b - a) * w; }

enum class AgentKind : std::uint8_t { Pedestrian, Vehicle };

std::string_view kind_tag(AgentKind k) noexcept;  // "ped" / "veh"
AgentKind parse_kind(std::string_view tag);
inline std::size_t kind_index(AgentKind k) { return k == AgentKind::Pedestrian ? 0 : 1; }

struct Trajectory {
  std::int64_t agent_id = 0;
  AgentKind kind = AgentKind::Pedestrian;
  double t0 = 0.0;  // seconds since dataset epoch (local midnight)
  double dt = 0.0;  // seconds per sample
  std::vector<Vec2> points;

  double duration() const { return points.empty() ? 0.0 : double(points.size() - 1) * dt; }
  double end_time() const { return t0 + duration(); }
  // Linear interpolation at `tau` seconds after t0, clamped to the ends.
  Vec2 at(double tau) const;
};

// Throws InvalidInput when the trajectory breaks the uniform-rate invariants.
void validate(const Trajectory& traj);

inline constexpr int kDefaultWaypoints = 20;

struct TrajectoryFeature {
  Vec2 entry_pos;
  Vec2 entry_vel;
  Vec2 exit_pos;
  Vec2 exit_vel;
  std::vector<Vec2> waypoints;  // at times k*T/K, k = 1..K
  double duration = 0.0;

  int waypoint_count() const { return static_cast<int>(waypoints.size()); }
  std::size_t dimension() const { return 2 * waypoints.size() + 9; }

  // Layout: [entry_pos, entry_vel, exit_pos, exit_vel, waypoints..., T].
  std::vector<double> flatten() const;
  static TrajectoryFeature unflatten(std::span<const double> z);
};

inline constexpr std::size_t feature_dimension(int waypoints) { return 2 * std::size_t(waypoints) + 9; }

struct TimedPoint {
  double t;
  Vec2 p;
};

Trajectory resample_uniform(std::span<const TimedPoint> raw, double dt_out);

// Resamples onto the absolute grid origin + i*dt (first grid time >= traj.t0).
// Returns nullopt when fewer than two grid points fall inside the trajectory.
std::optional<Trajectory> resample_on_grid(const Trajectory& traj, double dt, double origin = 0.0);

TrajectoryFeature vectorize_trajectory(const Trajectory& traj, int waypoints = kDefaultWaypoints);

struct SceneAgent {
  std::int64_t agent_id = 0;
  AgentKind kind = AgentKind::Pedestrian;
  double t0 = 0.0;                   // absolute start time of the source trajectory
  std::vector<Vec2> points;          // one per scene frame, zero where absent
  std::vector<std::uint8_t> mask;    // 1 where present
  std::optional<TrajectoryFeature> feature;  // vectorized full trajectory

  int first_present() const;
  int last_present() const;
  bool present(int frame) const { return mask[static_cast<std::size_t>(frame)] != 0; }
};

struct Scene {
  std::int64_t start_index = 0;  // absolute frame index of frame 0
  int length = 0;
  double dt = 0.0;
  std::vector<SceneAgent> agents;

  double frame_time(int frame) const { return double(start_index + frame) * dt; }
};

// `trajs` must share a common dt and sit on the absolute grid k*dt.
Scene slice_scene(std::span<const Trajectory> trajs, std::int64_t start, int length,
                  int min_length = 2);

}  // namespace isim
