#include "isim/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace isim {

std::string_view supervision_tag(Supervision s) noexcept {
  switch (s) {
    case Supervision::None: return "none";
    case Supervision::Destination: return "dest";
    case Supervision::Waypoint: return "wpts";
  }
  return "none";
}

Supervision parse_supervision(std::string_view tag) {
  if (tag == "none" || tag == "-") return Supervision::None;
  if (tag == "dest" || tag == "destination") return Supervision::Destination;
  if (tag == "wpts" || tag == "waypoint" || tag == "waypoints") return Supervision::Waypoint;
  throw Error(Errc::InvalidInput, "unknown supervision mode '" + std::string(tag) + "'");
}

ForecastModel::Layout make_layout(const ForecastHyper& hp) {
  ForecastModel::Layout l{};
  const std::size_t e = std::size_t(hp.embed), h = std::size_t(hp.hidden), in = std::size_t(hp.input_dim());
  std::size_t off = 0;
  l.embed_w = off; off += e * in;
  l.embed_b = off; off += e;
  l.gate_wx = off; off += 4 * h * e;
  l.gate_wh = off; off += 4 * h * h;
  l.gate_b = off;  off += 4 * h;
  l.dec_w = off;   off += 2 * h;
  l.dec_b = off;   off += 2;
  l.total = off;
  return l;
}

std::size_t parameter_count(const ForecastHyper& hp) { return make_layout(hp).total; }

ForecastModel::ForecastModel(const ForecastHyper& hp)
    : hp_(hp),
      layout_(make_layout(hp)),
      params_(Eigen::VectorXd::Zero(Eigen::Index(layout_.total))),
      input_scale_(Eigen::VectorXd::Ones(hp.input_dim())) {
  if (hp.embed < 1 || hp.hidden < 1 || hp.grid.cells < 1 || !(hp.grid.cell_size > 0.0))
    throw Error(Errc::InvalidInput, "forecaster sizes must be positive");
  if (hp.obs_len < 2 || hp.pred_len < 1 || !(hp.dt > 0.0))
    throw Error(Errc::InvalidInput, "forecaster needs obs_len >= 2, pred_len >= 1, dt > 0");
}

ForecastModel ForecastModel::initialize(const ForecastHyper& hp, std::uint64_t seed) {
  ForecastModel m(hp);
  Rng rng(seed);
  auto fill = [&](std::size_t off, std::size_t count, int fan_in) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (std::size_t i = 0; i < count; ++i) m.params_(Eigen::Index(off + i)) = rng.uniform(-bound, bound);
  };
  const auto& l = m.layout_;
  fill(l.embed_w, l.embed_b - l.embed_w, hp.input_dim());
  fill(l.gate_wx, l.gate_wh - l.gate_wx, hp.embed + hp.hidden);
  fill(l.gate_wh, l.gate_b - l.gate_wh, hp.embed + hp.hidden);
  fill(l.dec_w, l.dec_b - l.dec_w, hp.hidden);
  // Forget-gate bias starts at 1.
  for (int i = 0; i < hp.hidden; ++i) m.params_(Eigen::Index(l.gate_b) + hp.hidden + i) = 1.0;
  return m;
}

// ---------------------------------------------------------------------------
// Pooling

std::vector<double> pool_neighbors(std::span<const Vec2> positions, std::span<const std::uint8_t> present,
                                   std::size_t self, const GridParams& grid) {
  const int g = grid.cells;
  std::vector<double> occ(std::size_t(g * g), 0.0);
  const double half = grid.half_extent();
  const Vec2 origin = positions[self];
  for (std::size_t j = 0; j < positions.size(); ++j) {
    if (j == self || (!present.empty() && !present[j])) continue;
    const Vec2 d = positions[j] - origin;
    if (!(d.x >= -half && d.x < half && d.y >= -half && d.y < half)) continue;
    const int ix = std::min(g - 1, static_cast<int>(std::floor((d.x + half) / grid.cell_size)));
    const int iy = std::min(g - 1, static_cast<int>(std::floor((d.y + half) / grid.cell_size)));
    occ[std::size_t(iy * g + ix)] += 1.0;
  }
  return occ;
}

std::vector<double> pool_neighbors(std::span<const Vec2> positions, std::size_t self, const GridParams& grid) {
  return pool_neighbors(positions, {}, self, grid);
}

Eigen::VectorXd assemble_input(const ForecastHyper& hp, Vec2 displacement, Vec2 goal_offset,
                               std::span<const double> occupancy, AgentKind kind) {
  Eigen::VectorXd u(hp.input_dim());
  u(0) = displacement.x;
  u(1) = displacement.y;
  u(2) = goal_offset.x;
  u(3) = goal_offset.y;
  const int cells = hp.grid.cells * hp.grid.cells;
  for (int i = 0; i < cells; ++i) u(4 + i) = occupancy[std::size_t(i)];
  u(4 + cells) = kind == AgentKind::Vehicle ? 1.0 : 0.0;
  return u;
}

// ---------------------------------------------------------------------------
// Recurrent step

namespace {

Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& x) { return 1.0 / (1.0 + (-x).exp()); }

struct StepCache {
  Eigen::MatrixXd u;  // scaled input
  Eigen::MatrixXd e;  // tanh embedding
  Eigen::ArrayXXd i, f, g, o;
  Eigen::MatrixXd c_prev, h_prev, c, tc, h;
  Eigen::Matrix2Xd y;
};

void step_cached(const ForecastModel& m, const Eigen::MatrixXd& scaled, const Eigen::MatrixXd& h_prev,
                 const Eigen::MatrixXd& c_prev, StepCache& s, bool check) {
  const int hd = m.hyper().hidden;
  auto fault = [&](const char* layer, const Eigen::MatrixXd& v) {
    if (check && !v.allFinite()) throw Error(Errc::NumericalFault, std::string("non-finite values in ") + layer);
  };
  s.u = scaled;
  s.e = ((m.embed_w() * scaled).colwise() + m.embed_b()).array().tanh().matrix();
  fault("embedding", s.e);
  const Eigen::MatrixXd z = ((m.gate_wx() * s.e + m.gate_wh() * h_prev).colwise() + m.gate_b());
  fault("gates", z);
  s.i = sigmoid(z.topRows(hd).array());
  s.f = sigmoid(z.middleRows(hd, hd).array());
  s.g = z.middleRows(2 * hd, hd).array().tanh();
  s.o = sigmoid(z.bottomRows(hd).array());
  s.h_prev = h_prev;
  s.c_prev = c_prev;
  s.c = (s.f * c_prev.array() + s.i * s.g).matrix();
  s.tc = s.c.array().tanh().matrix();
  s.h = (s.o * s.tc.array()).matrix();
  fault("cell", s.h);
  s.y = (((m.dec_w() * s.h).colwise() + m.dec_b()).array().colwise() * m.output_scale().array()).matrix();
  fault("decoder", s.y);
}

Eigen::MatrixXd scale_inputs(const ForecastModel& m, const Eigen::MatrixXd& raw) {
  if (raw.rows() != m.hyper().input_dim())
    throw Error(Errc::InvalidInput, "input has " + std::to_string(raw.rows()) + " rows, expected " +
                                        std::to_string(m.hyper().input_dim()));
  return (raw.array().colwise() / m.input_scale().array()).matrix();
}

}  // namespace

StepOutput forward_step(const ForecastModel& model, const RecurrentState& state, const Eigen::MatrixXd& inputs) {
  StepCache s;
  step_cached(model, scale_inputs(model, inputs), state.h, state.c, s, true);
  return {{std::move(s.h), std::move(s.c)}, std::move(s.y)};
}

// ---------------------------------------------------------------------------
// Rollout

const ForecastModel& ModelSet::for_kind(AgentKind k) const {
  const ForecastModel* m = k == AgentKind::Pedestrian ? pedestrian : vehicle;
  if (!m) m = shared;
  if (!m) throw Error(Errc::ConfigMismatch, "no forecaster for kind " + std::string(kind_tag(k)));
  return *m;
}

const ForecastHyper& ModelSet::hyper() const {
  if (shared) return shared->hyper();
  if (pedestrian) return pedestrian->hyper();
  if (vehicle) return vehicle->hyper();
  throw Error(Errc::ConfigMismatch, "empty model set");
}

Vec2 goal_for(const PriorTrajectory& prior, double age, Supervision mode, int pred_len, double dt) {
  switch (mode) {
    case Supervision::Waypoint: return prior.at(std::min(age + double(pred_len) * dt, prior.duration));
    case Supervision::Destination: return prior.destination;
    case Supervision::None: break;
  }
  return {};
}

namespace {

Vec2 goal_offset(const RolloutAgent& a, Vec2 pos, double age, const ForecastHyper& hp) {
  if (hp.mode == Supervision::None || !a.prior) return {};
  return goal_for(*a.prior, age, hp.mode, hp.pred_len, hp.dt) - pos;
}

Vec2 padded_prior(const PriorTrajectory& prior, double age) {
  if (age >= 0.0) return prior.at(age);
  return prior.feature.entry_pos + age * prior.feature.entry_vel;
}

}  // namespace

std::vector<Vec2> observation_window(const RolloutAgent& agent, int obs_len, double dt) {
  std::vector<Vec2> obs = agent.observed;
  if (obs.empty()) {
    if (!agent.prior) throw Error(Errc::MissingHistory, "agent has neither history nor prior");
    obs.push_back(agent.prior->at(agent.age));
  }
  const auto need = std::size_t(obs_len);
  if (obs.size() >= need) return {obs.end() - std::ptrdiff_t(need), obs.end()};
  std::vector<Vec2> out(need);
  const std::size_t missing = need - obs.size();
  for (std::size_t k = 0; k < missing; ++k) {
    const double back = double(obs.size() - 1 + (missing - k)) * dt;
    out[k] = agent.prior ? padded_prior(*agent.prior, agent.age - back) : obs.front();
  }
  std::copy(obs.begin(), obs.end(), out.begin() + std::ptrdiff_t(missing));
  return out;
}

namespace {

struct ModelGroup {
  const ForecastModel* model;
  std::vector<Eigen::Index> members;
  RecurrentState state;
};

std::vector<ModelGroup> group_by_model(const ModelSet& models, std::span<const RolloutAgent> agents) {
  std::vector<ModelGroup> groups;
  for (std::size_t a = 0; a < agents.size(); ++a) {
    const ForecastModel* m = &models.for_kind(agents[a].kind);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const ModelGroup& g) { return g.model == m; });
    if (it == groups.end()) {
      groups.push_back({m, {}, {}});
      it = groups.end() - 1;
    }
    it->members.push_back(Eigen::Index(a));
  }
  const auto& ref = models.hyper();
  for (auto& g : groups) {
    const auto& hp = g.model->hyper();
    if (hp.obs_len != ref.obs_len || hp.pred_len != ref.pred_len || hp.dt != ref.dt || hp.mode != ref.mode)
      throw Error(Errc::ConfigMismatch, "forecasters in a model set disagree on obs_len/pred_len/dt/mode");
    g.state = RecurrentState::zeros(*g.model, Eigen::Index(g.members.size()));
  }
  return groups;
}

// Joint step: inputs for every agent, then each model group advances.
Eigen::Matrix2Xd joint_step(std::vector<ModelGroup>& groups, const Eigen::MatrixXd& inputs) {
  Eigen::Matrix2Xd disp(2, inputs.cols());
  for (auto& g : groups) {
    Eigen::MatrixXd sub(inputs.rows(), Eigen::Index(g.members.size()));
    for (std::size_t j = 0; j < g.members.size(); ++j) sub.col(Eigen::Index(j)) = inputs.col(g.members[j]);
    StepOutput out = forward_step(*g.model, g.state, sub);
    g.state = std::move(out.state);
    for (std::size_t j = 0; j < g.members.size(); ++j) disp.col(g.members[j]) = out.displacement.col(Eigen::Index(j));
  }
  return disp;
}

std::vector<std::vector<Vec2>> rollout_chunk(const ModelSet& models, std::span<const RolloutAgent> agents,
                                             const std::vector<std::vector<Vec2>>& windows, int steps) {
  const auto& hp = models.hyper();
  const std::size_t n = agents.size();
  auto groups = group_by_model(models, agents);
  const int obs = hp.obs_len;
  std::vector<Vec2> cur(n), prev(n);
  Eigen::MatrixXd inputs(hp.input_dim(), Eigen::Index(n));

  auto build_inputs = [&](auto age_of) {
    for (std::size_t a = 0; a < n; ++a) {
      const auto occ = pool_neighbors(cur, a, hp.grid);
      const double age = age_of(a);
      inputs.col(Eigen::Index(a)) =
          assemble_input(hp, cur[a] - prev[a], goal_offset(agents[a], cur[a], age, hp), occ, agents[a].kind);
    }
  };

  Eigen::Matrix2Xd disp;
  for (int j = 1; j < obs; ++j) {
    for (std::size_t a = 0; a < n; ++a) {
      cur[a] = windows[a][std::size_t(j)];
      prev[a] = windows[a][std::size_t(j - 1)];
    }
    build_inputs([&](std::size_t a) { return agents[a].age - double(obs - 1 - j) * hp.dt; });
    disp = joint_step(groups, inputs);
  }

  std::vector<std::vector<Vec2>> out(n);
  for (auto& o : out) o.reserve(std::size_t(steps));
  for (int s = 1; s <= steps; ++s) {
    for (std::size_t a = 0; a < n; ++a) {
      prev[a] = cur[a];
      cur[a] = cur[a] + Vec2{disp(0, Eigen::Index(a)), disp(1, Eigen::Index(a))};
      out[a].push_back(cur[a]);
    }
    if (s == steps) break;
    build_inputs([&](std::size_t a) { return agents[a].age + double(s) * hp.dt; });
    disp = joint_step(groups, inputs);
  }
  return out;
}

}  // namespace

std::vector<std::vector<Vec2>> rollout(const ModelSet& models, std::span<const RolloutAgent> agents, int horizon) {
  const auto& hp = models.hyper();
  std::vector<std::vector<Vec2>> result(agents.size());
  if (agents.empty() || horizon <= 0) return result;
  std::vector<RolloutAgent> work(agents.begin(), agents.end());
  std::vector<std::vector<Vec2>> windows(agents.size());
  for (std::size_t a = 0; a < agents.size(); ++a) windows[a] = observation_window(agents[a], hp.obs_len, hp.dt);

  int remaining = horizon;
  while (remaining > 0) {
    const int steps = std::min(hp.pred_len, remaining);
    auto chunk = rollout_chunk(models, work, windows, steps);
    for (std::size_t a = 0; a < agents.size(); ++a) {
      result[a].insert(result[a].end(), chunk[a].begin(), chunk[a].end());
      std::vector<Vec2> joined = windows[a];
      joined.insert(joined.end(), chunk[a].begin(), chunk[a].end());
      windows[a].assign(joined.end() - hp.obs_len, joined.end());
      work[a].age += double(steps) * hp.dt;
    }
    remaining -= steps;
  }
  return result;
}

std::vector<std::vector<Vec2>> rollout_constant_velocity(std::span<const RolloutAgent> agents, int horizon,
                                                         double dt) {
  std::vector<std::vector<Vec2>> out(agents.size());
  for (std::size_t a = 0; a < agents.size(); ++a) {
    const auto w = observation_window(agents[a], 2, dt);
    const Vec2 v = w[1] - w[0];
    for (int s = 1; s <= horizon; ++s) out[a].push_back(w[1] + double(s) * v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

double smooth_l1(double r) {
  const double a = std::abs(r);
  return a <= 1.0 ? 0.5 * r * r : a - 0.5;
}

double smooth_l1_grad(double r) { return std::abs(r) <= 1.0 ? r : (r > 0.0 ? 1.0 : -1.0); }

double loss_smooth_l1(const std::vector<std::vector<Vec2>>& pred, const std::vector<std::vector<Vec2>>& target,
                      const std::vector<std::vector<std::uint8_t>>& mask) {
  if (pred.size() != target.size() || pred.size() != mask.size())
    throw Error(Errc::InvalidInput, "loss inputs have different agent counts");
  double sum = 0.0, count = 0.0;
  for (std::size_t a = 0; a < pred.size(); ++a) {
    if (pred[a].size() != target[a].size() || pred[a].size() != mask[a].size())
      throw Error(Errc::InvalidInput, "loss inputs have different step counts");
    for (std::size_t s = 0; s < pred[a].size(); ++s) {
      if (!mask[a][s]) continue;
      const Vec2 d = pred[a][s] - target[a][s];
      sum += smooth_l1(d.x) + smooth_l1(d.y);
      count += 2.0;
    }
  }
  if (count == 0.0) throw Error(Errc::EmptyBatch, "no present entries in loss");
  return sum / count;
}

// ---------------------------------------------------------------------------
// Training data

std::vector<std::size_t> forecast_targets(const Scene& scene, int obs_len) {
  std::vector<std::size_t> out;
  if (scene.length < obs_len + 1) return out;
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    const auto& a = scene.agents[i];
    if (!a.feature) continue;
    bool full = true;
    for (int f = 0; f < obs_len && full; ++f) full = a.present(f);
    if (full) out.push_back(i);
  }
  return out;
}

namespace {

double agent_age(const Scene& scene, const SceneAgent& a, int frame) { return scene.frame_time(frame) - a.t0; }

}  // namespace

void fit_normalization(ForecastModel& model, std::span<const Scene> scenes) {
  auto& hp = model.hyper();
  const int len = hp.obs_len + hp.pred_len;
  double disp_sq = 0.0, goal_sq = 0.0, n = 0.0;
  for (const auto& scene : scenes) {
    const int used = std::min(len, scene.length);
    for (std::size_t idx : forecast_targets(scene, hp.obs_len)) {
      const auto& a = scene.agents[idx];
      const PriorTrajectory prior = make_prior(*a.feature, hp.dt, a.kind);
      for (int f = 1; f < used; ++f) {
        if (!a.present(f) || !a.present(f - 1)) continue;
        const Vec2 d = a.points[std::size_t(f)] - a.points[std::size_t(f - 1)];
        disp_sq += d.dot(d);
        if (hp.mode != Supervision::None) {
          const Vec2 g = goal_for(prior, agent_age(scene, a, f), hp.mode, hp.pred_len, hp.dt) - a.points[std::size_t(f)];
          goal_sq += g.dot(g);
        }
        n += 2.0;
      }
    }
  }
  if (n == 0.0) throw Error(Errc::InsufficientData, "no forecast targets to normalise over");
  const double ds = std::max(std::sqrt(disp_sq / n), 1e-3);
  const double gs = hp.mode == Supervision::None ? 1.0 : std::max(std::sqrt(goal_sq / n), 1e-3);
  model.input_scale().setOnes();
  model.input_scale()(0) = model.input_scale()(1) = ds;
  model.input_scale()(2) = model.input_scale()(3) = gs;
  model.output_scale().setConstant(ds);
}

std::vector<TrainingSample> build_training_samples(const ForecastModel& model, std::span<const Scene> scenes) {
  const auto& hp = model.hyper();
  const int len = hp.obs_len + hp.pred_len;
  std::vector<TrainingSample> samples;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const Scene& scene = scenes[si];
    const auto targets = forecast_targets(scene, hp.obs_len);
    if (targets.empty()) continue;
    const int used = std::min(len, scene.length);
    const auto n = Eigen::Index(targets.size());
    std::vector<PriorTrajectory> priors;
    priors.reserve(targets.size());
    for (std::size_t t : targets) priors.push_back(make_prior(*scene.agents[t].feature, hp.dt, scene.agents[t].kind));

    TrainingSample s;
    s.scene_index = si;
    s.agents = n;
    std::vector<Vec2> frame_pos(scene.agents.size());
    std::vector<std::uint8_t> frame_present(scene.agents.size());
    bool any_loss = false;
    for (int f = 1; f + 1 < used; ++f) {
      for (std::size_t j = 0; j < scene.agents.size(); ++j) {
        frame_pos[j] = scene.agents[j].points[std::size_t(f)];
        frame_present[j] = scene.agents[j].mask[std::size_t(f)];
      }
      Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(hp.input_dim(), n);
      Eigen::Matrix2Xd base = Eigen::Matrix2Xd::Zero(2, n), target = Eigen::Matrix2Xd::Zero(2, n);
      Eigen::ArrayXd mask = Eigen::ArrayXd::Zero(n);
      for (Eigen::Index c = 0; c < n; ++c) {
        const std::size_t idx = targets[std::size_t(c)];
        const auto& a = scene.agents[idx];
        if (!a.present(f) || !a.present(f - 1)) continue;
        const Vec2 p = a.points[std::size_t(f)];
        const Vec2 goal = hp.mode == Supervision::None
                              ? p
                              : goal_for(priors[std::size_t(c)], agent_age(scene, a, f), hp.mode, hp.pred_len, hp.dt);
        raw.col(c) = assemble_input(hp, p - a.points[std::size_t(f - 1)], goal - p,
                                    pool_neighbors(frame_pos, frame_present, idx, hp.grid), a.kind);
        base.col(c) << p.x, p.y;
        if (f + 1 >= hp.obs_len && a.present(f + 1)) {
          const Vec2 q = a.points[std::size_t(f + 1)];
          target.col(c) << q.x, q.y;
          mask(c) = 1.0;
          any_loss = true;
        }
      }
      s.inputs.push_back(scale_inputs(model, raw));
      s.base.push_back(std::move(base));
      s.target.push_back(std::move(target));
      s.loss_mask.push_back(std::move(mask));
    }
    if (any_loss) samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Gradients

namespace {

void accumulate_sample(const ForecastModel& m, const TrainingSample& s, LossGrad& out, bool with_grad) {
  const int hd = m.hyper().hidden;
  const auto n = s.agents;
  const std::size_t steps = s.inputs.size();
  std::vector<StepCache> cache(steps);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(hd, n), c = Eigen::MatrixXd::Zero(hd, n);
  std::vector<Eigen::Matrix2Xd> dy(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    step_cached(m, s.inputs[t], h, c, cache[t], false);
    h = cache[t].h;
    c = cache[t].c;
    const Eigen::Matrix2Xd r = s.base[t] + cache[t].y - s.target[t];
    dy[t].resize(2, n);
    for (Eigen::Index a = 0; a < n; ++a) {
      const double w = s.loss_mask[t](a);
      if (w == 0.0) {
        dy[t].col(a).setZero();
        continue;
      }
      out.loss_sum += smooth_l1(r(0, a)) + smooth_l1(r(1, a));
      out.count += 2.0;
      dy[t](0, a) = smooth_l1_grad(r(0, a));
      dy[t](1, a) = smooth_l1_grad(r(1, a));
    }
  }
  if (!with_grad) return;

  const auto& l = m.layout();
  auto& g = out.grad_sum;
  Eigen::Map<Eigen::MatrixXd> g_we(g.data() + l.embed_w, m.hyper().embed, m.hyper().input_dim());
  Eigen::Map<Eigen::VectorXd> g_be(g.data() + l.embed_b, m.hyper().embed);
  Eigen::Map<Eigen::MatrixXd> g_wx(g.data() + l.gate_wx, 4 * hd, m.hyper().embed);
  Eigen::Map<Eigen::MatrixXd> g_wh(g.data() + l.gate_wh, 4 * hd, hd);
  Eigen::Map<Eigen::VectorXd> g_b(g.data() + l.gate_b, 4 * hd);
  Eigen::Map<Eigen::MatrixXd> g_wd(g.data() + l.dec_w, 2, hd);
  Eigen::Map<Eigen::VectorXd> g_bd(g.data() + l.dec_b, 2);

  Eigen::MatrixXd dh_next = Eigen::MatrixXd::Zero(hd, n), dc_next = Eigen::MatrixXd::Zero(hd, n);
  Eigen::MatrixXd dz(4 * hd, n);
  for (std::size_t t = steps; t-- > 0;) {
    const StepCache& k = cache[t];
    const Eigen::Matrix2Xd dy_raw = (dy[t].array().colwise() * m.output_scale().array()).matrix();
    g_wd.noalias() += dy_raw * k.h.transpose();
    g_bd += dy_raw.rowwise().sum();
    const Eigen::ArrayXXd dh = (m.dec_w().transpose() * dy_raw + dh_next).array();
    const Eigen::ArrayXXd tc = k.tc.array();
    const Eigen::ArrayXXd dc = dh * k.o * (1.0 - tc.square()) + dc_next.array();
    dz.topRows(hd) = (dc * k.g * k.i * (1.0 - k.i)).matrix();
    dz.middleRows(hd, hd) = (dc * k.c_prev.array() * k.f * (1.0 - k.f)).matrix();
    dz.middleRows(2 * hd, hd) = (dc * k.i * (1.0 - k.g.square())).matrix();
    dz.bottomRows(hd) = (dh * tc * k.o * (1.0 - k.o)).matrix();
    dc_next = (dc * k.f).matrix();
    g_wx.noalias() += dz * k.e.transpose();
    g_wh.noalias() += dz * k.h_prev.transpose();
    g_b += dz.rowwise().sum();
    dh_next.noalias() = m.gate_wh().transpose() * dz;
    const Eigen::MatrixXd da = ((m.gate_wx().transpose() * dz).array() * (1.0 - k.e.array().square())).matrix();
    g_we.noalias() += da * k.u.transpose();
    g_be += da.rowwise().sum();
  }
}

}  // namespace

LossGrad loss_and_gradient(const ForecastModel& model, std::span<const TrainingSample* const> samples) {
  LossGrad out;
  out.grad_sum = Eigen::VectorXd::Zero(model.params().size());
  for (const auto* s : samples) accumulate_sample(model, *s, out, true);
  return out;
}

double training_loss(const ForecastModel& model, std::span<const TrainingSample* const> samples) {
  LossGrad out;
  for (const auto* s : samples) accumulate_sample(model, *s, out, false);
  if (out.count == 0.0) throw Error(Errc::EmptyBatch, "no present entries in training batch");
  return out.mean_loss();
}

Trainer::Trainer(ForecastModel& model, TrainOptions opts)
    : model_(model), opts_(opts), velocity_(Eigen::VectorXd::Zero(model.params().size())) {
  if (opts_.batch < 1) throw Error(Errc::InvalidInput, "batch size must be >= 1");
}

double Trainer::epoch(std::span<const TrainingSample> samples) {
  if (samples.empty()) throw Error(Errc::EmptyBatch, "no training samples");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::mix(opts_.seed, std::uint64_t(epochs_)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  double loss_sum = 0.0, count = 0.0;
  std::vector<const TrainingSample*> batch;
  for (std::size_t start = 0; start < order.size(); start += std::size_t(opts_.batch)) {
    batch.clear();
    for (std::size_t k = start; k < std::min(order.size(), start + std::size_t(opts_.batch)); ++k)
      batch.push_back(&samples[order[k]]);
    LossGrad lg = loss_and_gradient(model_, batch);
    if (!std::isfinite(lg.loss_sum) || !lg.grad_sum.allFinite()) {
      for (const auto* s : batch) {
        const TrainingSample* one[] = {s};
        LossGrad single = loss_and_gradient(model_, one);
        if (!std::isfinite(single.loss_sum) || !single.grad_sum.allFinite())
          throw Error(Errc::NumericalFault, "non-finite loss on scene " + std::to_string(s->scene_index));
      }
      throw Error(Errc::NumericalFault, "non-finite loss in batch starting at " + std::to_string(start));
    }
    if (lg.count == 0.0) continue;
    loss_sum += lg.loss_sum;
    count += lg.count;
    Eigen::VectorXd grad = lg.grad_sum / lg.count;
    const double norm = grad.norm();
    if (opts_.clip > 0.0 && norm > opts_.clip) grad *= opts_.clip / norm;
    velocity_ = opts_.momentum * velocity_ + grad;
    model_.params() -= opts_.lr * velocity_;
  }
  ++epochs_;
  return count > 0.0 ? loss_sum / count : 0.0;
}

namespace {

// Extended-precision forward pass used for the finite-difference probes, so
// their roundoff stays well below the smallest gradients being checked.
using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using ArrL = Eigen::Array<long double, Eigen::Dynamic, Eigen::Dynamic>;

long double smooth_l1_ld(long double r) {
  const long double a = std::fabs(r);
  return a <= 1.0L ? 0.5L * r * r : a - 0.5L;
}

long double reference_loss(const ForecastModel& m, const TrainingSample& s) {
  const int hd = m.hyper().hidden;
  const auto n = s.agents;
  const MatL we = m.embed_w().cast<long double>(), wx = m.gate_wx().cast<long double>();
  const MatL wh = m.gate_wh().cast<long double>(), wd = m.dec_w().cast<long double>();
  const Eigen::Matrix<long double, Eigen::Dynamic, 1> be = m.embed_b().cast<long double>(),
                                                      bg = m.gate_b().cast<long double>(),
                                                      bd = m.dec_b().cast<long double>(),
                                                      os = m.output_scale().cast<long double>();
  auto sig = [](const ArrL& x) -> ArrL { return 1.0L / (1.0L + (-x).exp()); };
  MatL h = MatL::Zero(hd, n), c = MatL::Zero(hd, n);
  long double sum = 0.0L, count = 0.0L;
  for (std::size_t t = 0; t < s.inputs.size(); ++t) {
    const MatL e = ((we * s.inputs[t].cast<long double>()).colwise() + be).array().tanh().matrix();
    const MatL z = (wx * e + wh * h).colwise() + bg;
    const ArrL i = sig(z.topRows(hd).array()), f = sig(z.middleRows(hd, hd).array());
    const ArrL g = z.middleRows(2 * hd, hd).array().tanh(), o = sig(z.bottomRows(hd).array());
    c = (f * c.array() + i * g).matrix();
    h = (o * c.array().tanh()).matrix();
    const MatL y = (((wd * h).colwise() + bd).array().colwise() * os.array()).matrix();
    for (Eigen::Index a = 0; a < n; ++a) {
      if (s.loss_mask[t](a) == 0.0) continue;
      for (int k = 0; k < 2; ++k)
        sum += smooth_l1_ld(static_cast<long double>(s.base[t](k, a)) + y(k, a) -
                            static_cast<long double>(s.target[t](k, a)));
      count += 2.0L;
    }
  }
  return sum / count;
}

}  // namespace

GradientCheck gradient_check(const ForecastModel& model, const TrainingSample& sample, double epsilon) {
  const TrainingSample* one[] = {&sample};
  const LossGrad lg = loss_and_gradient(model, one);
  if (lg.count == 0.0) throw Error(Errc::EmptyBatch, "gradient check sample has no loss entries");
  const Eigen::VectorXd analytic = lg.grad_sum / lg.count;
  ForecastModel probe = model;
  GradientCheck result;
  for (Eigen::Index i = 0; i < probe.params().size(); ++i) {
    const double orig = probe.params()(i);
    const double hi = orig + epsilon, lo = orig - epsilon;
    probe.params()(i) = hi;
    const long double up = reference_loss(probe, sample);
    probe.params()(i) = lo;
    const long double down = reference_loss(probe, sample);
    probe.params()(i) = orig;
    const double numeric = double((up - down) / (static_cast<long double>(hi) - lo));
    const double err = std::abs(analytic(i) - numeric) / std::max(1e-8, std::abs(analytic(i)) + std::abs(numeric));
    if (i == 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = std::size_t(i);
      result.analytic = analytic(i);
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace isim
