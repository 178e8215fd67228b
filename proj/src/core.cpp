#include "isim/core.hpp"

#include <algorithm>
#include <cmath>

namespace isim {

std::string_view errc_name(Errc e) noexcept {
  switch (e) {
    case Errc::Ok: return "Ok";
    case Errc::InvalidInput: return "InvalidInput";
    case Errc::EmptyScene: return "EmptyScene";
    case Errc::InsufficientData: return "InsufficientData";
    case Errc::ComponentCollapse: return "ComponentCollapse";
    case Errc::InvalidCondition: return "InvalidCondition";
    case Errc::DegenerateLikelihoods: return "DegenerateLikelihoods";
    case Errc::InvalidKnots: return "InvalidKnots";
    case Errc::NumericalFault: return "NumericalFault";
    case Errc::MissingHistory: return "MissingHistory";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::EmptyEval: return "EmptyEval";
    case Errc::NoPairs: return "NoPairs";
    case Errc::PriorRejection: return "PriorRejection";
    case Errc::ConfigMismatch: return "ConfigMismatch";
    case Errc::InvalidSpeed: return "InvalidSpeed";
    case Errc::IoError: return "IoError";
    case Errc::ParseError: return "ParseError";
    case Errc::InvalidRegion: return "InvalidRegion";
    case Errc::Unsupported: return "Unsupported";
    case Errc::BindError: return "BindError";
  }
  return "Unknown";
}

std::string_view kind_tag(AgentKind k) noexcept {
  return k == AgentKind::Pedestrian ? "ped" : "veh";
}

AgentKind parse_kind(std::string_view tag) {
  if (tag == "ped" || tag == "pedestrian") return AgentKind::Pedestrian;
  if (tag == "veh" || tag == "vehicle") return AgentKind::Vehicle;
  throw Error(Errc::InvalidInput, "unknown agent kind '" + std::string(tag) + "'");
}

Vec2 Trajectory::at(double tau) const {
  if (points.empty()) return {};
  if (tau <= 0.0 || points.size() == 1) return points.front();
  const double s = tau / dt;
  const auto last = static_cast<double>(points.size() - 1);
  if (s >= last) return points.back();
  const auto i = static_cast<std::size_t>(std::floor(s));
  return lerp(points[i], points[i + 1], s - double(i));
}

void validate(const Trajectory& traj) {
  if (!(traj.dt > 0.0) || !std::isfinite(traj.dt))
    throw Error(Errc::InvalidInput, "trajectory " + std::to_string(traj.agent_id) + ": dt must be positive");
  if (traj.points.size() < 2)
    throw Error(Errc::InvalidInput, "trajectory " + std::to_string(traj.agent_id) + ": fewer than 2 points");
  if (!std::isfinite(traj.t0))
    throw Error(Errc::InvalidInput, "trajectory " + std::to_string(traj.agent_id) + ": non-finite t0");
  for (const auto& p : traj.points)
    if (!p.finite())
      throw Error(Errc::InvalidInput, "trajectory " + std::to_string(traj.agent_id) + ": non-finite point");
}

std::vector<double> TrajectoryFeature::flatten() const {
  std::vector<double> z;
  z.reserve(dimension());
  for (Vec2 v : {entry_pos, entry_vel, exit_pos, exit_vel}) {
    z.push_back(v.x);
    z.push_back(v.y);
  }
  for (Vec2 w : waypoints) {
    z.push_back(w.x);
    z.push_back(w.y);
  }
  z.push_back(duration);
  return z;
}

TrajectoryFeature TrajectoryFeature::unflatten(std::span<const double> z) {
  if (z.size() < 9 || (z.size() - 9) % 2 != 0)
    throw Error(Errc::InvalidInput, "feature vector length " + std::to_string(z.size()) + " is not 2K+9");
  TrajectoryFeature f;
  f.entry_pos = {z[0], z[1]};
  f.entry_vel = {z[2], z[3]};
  f.exit_pos = {z[4], z[5]};
  f.exit_vel = {z[6], z[7]};
  const std::size_t k = (z.size() - 9) / 2;
  f.waypoints.resize(k);
  for (std::size_t i = 0; i < k; ++i) f.waypoints[i] = {z[8 + 2 * i], z[9 + 2 * i]};
  f.duration = z.back();
  return f;
}

namespace {

Vec2 interpolate_raw(std::span<const TimedPoint> raw, double t) {
  // Last sample with time <= t.
  auto it = std::upper_bound(raw.begin(), raw.end(), t,
                             [](double v, const TimedPoint& s) { return v < s.t; });
  if (it == raw.begin()) return raw.front().p;
  const auto& lo = *(it - 1);
  if (lo.t == t || it == raw.end()) return lo.p;
  const auto& hi = *it;
  return lerp(lo.p, hi.p, (t - lo.t) / (hi.t - lo.t));
}

}  // namespace

Trajectory resample_uniform(std::span<const TimedPoint> raw, double dt_out) {
  if (raw.size() < 2) throw Error(Errc::InvalidInput, "resample needs at least 2 samples");
  if (!(dt_out > 0.0)) throw Error(Errc::InvalidInput, "resample dt must be positive");
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!raw[i].p.finite() || !std::isfinite(raw[i].t))
      throw Error(Errc::InvalidInput, "non-finite sample at index " + std::to_string(i));
    if (i > 0 && !(raw[i].t > raw[i - 1].t))
      throw Error(Errc::InvalidInput, "sample times not strictly increasing at index " + std::to_string(i));
  }
  const double first = raw.front().t;
  const double span = raw.back().t - first;
  const auto steps = static_cast<std::size_t>(std::floor(span / dt_out + 1e-9));

  Trajectory out;
  out.t0 = first;
  out.dt = dt_out;
  out.points.reserve(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) {
    const double t = first + double(i) * dt_out;
    if (i == steps && std::abs(t - raw.back().t) <= 1e-9 * std::max(1.0, std::abs(t)))
      out.points.push_back(raw.back().p);
    else
      out.points.push_back(interpolate_raw(raw, t));
  }
  return out;
}

std::optional<Trajectory> resample_on_grid(const Trajectory& traj, double dt, double origin) {
  if (!(dt > 0.0)) throw Error(Errc::InvalidInput, "grid dt must be positive");
  const double eps = 1e-9;
  const double first_k = std::ceil((traj.t0 - origin) / dt - eps);
  const double end = traj.end_time();
  Trajectory out;
  out.agent_id = traj.agent_id;
  out.kind = traj.kind;
  out.dt = dt;
  out.t0 = origin + first_k * dt;
  for (double k = first_k;; k += 1.0) {
    const double t = origin + k * dt;
    if (t > end + eps) break;
    out.points.push_back(traj.at(t - traj.t0));
  }
  if (out.points.size() < 2) return std::nullopt;
  return out;
}

TrajectoryFeature vectorize_trajectory(const Trajectory& traj, int waypoints) {
  if (traj.points.size() < 2)
    throw Error(Errc::InvalidInput, "cannot vectorize a trajectory with fewer than 2 samples");
  if (waypoints < 1) throw Error(Errc::InvalidInput, "waypoint count must be >= 1");
  const auto& pts = traj.points;
  const std::size_t n = pts.size();
  TrajectoryFeature f;
  f.entry_pos = pts.front();
  f.exit_pos = pts.back();
  f.entry_vel = (pts[1] - pts[0]) / traj.dt;
  f.exit_vel = (pts[n - 1] - pts[n - 2]) / traj.dt;
  f.duration = double(n - 1) * traj.dt;
  f.waypoints.resize(static_cast<std::size_t>(waypoints));
  // Sample-index space avoids re-deriving times: waypoint k at s = k (N-1) / K.
  const double last = double(n - 1);
  for (int k = 1; k <= waypoints; ++k) {
    if (k == waypoints) {
      f.waypoints[std::size_t(k - 1)] = pts.back();
      continue;
    }
    const double s = double(k) * last / double(waypoints);
    const auto i = std::min(static_cast<std::size_t>(std::floor(s)), n - 2);
    f.waypoints[std::size_t(k - 1)] = lerp(pts[i], pts[i + 1], s - double(i));
  }
  return f;
}

int SceneAgent::first_present() const {
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) return static_cast<int>(i);
  return -1;
}

int SceneAgent::last_present() const {
  for (std::size_t i = mask.size(); i-- > 0;)
    if (mask[i]) return static_cast<int>(i);
  return -1;
}

Scene slice_scene(std::span<const Trajectory> trajs, std::int64_t start, int length, int min_length) {
  if (length < min_length)
    throw Error(Errc::InvalidInput, "scene length " + std::to_string(length) + " is shorter than " +
                                        std::to_string(min_length));
  Scene scene;
  scene.start_index = start;
  scene.length = length;
  scene.dt = trajs.empty() ? 0.0 : trajs.front().dt;
  const std::int64_t end = start + length;  // exclusive
  for (const auto& tr : trajs) {
    if (tr.dt != scene.dt)
      throw Error(Errc::InvalidInput, "slice_scene: trajectories have different dt");
    const auto first = static_cast<std::int64_t>(std::llround(tr.t0 / tr.dt));
    const auto last = first + static_cast<std::int64_t>(tr.points.size()) - 1;
    const std::int64_t lo = std::max(first, start);
    const std::int64_t hi = std::min(last, end - 1);
    if (hi - lo + 1 < 2) continue;
    SceneAgent a;
    a.agent_id = tr.agent_id;
    a.kind = tr.kind;
    a.t0 = tr.t0;
    a.points.assign(static_cast<std::size_t>(length), Vec2{});
    a.mask.assign(static_cast<std::size_t>(length), 0);
    for (std::int64_t f = lo; f <= hi; ++f) {
      a.points[static_cast<std::size_t>(f - start)] = tr.points[static_cast<std::size_t>(f - first)];
      a.mask[static_cast<std::size_t>(f - start)] = 1;
    }
    scene.agents.push_back(std::move(a));
  }
  if (scene.agents.empty())
    throw Error(Errc::EmptyScene, "no agent has 2 or more frames in window starting at " + std::to_string(start));
  return scene;
}

}  // namespace isim
