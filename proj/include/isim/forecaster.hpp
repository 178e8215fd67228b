#pragma once

// Goal-supervised recurrent trajectory refinement with occupancy-grid
// social pooling. Training gradients are derived by hand (BPTT).

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "isim/core.hpp"
#include "isim/rng.hpp"
#include "isim/spline.hpp"

namespace isim {

enum class Supervision { None, Destination, Waypoint };

std::string_view supervision_tag(Supervision s) noexcept;  // "none" / "dest" / "wpts"
Supervision parse_supervision(std::string_view tag);

struct GridParams {
  int cells = 6;
  double cell_size = 1.0;  // meters

  double half_extent() const { return 0.5 * cells * cell_size; }
};

struct ForecastHyper {
  int embed = 32;
  int hidden = 32;
  GridParams grid;
  int obs_len = 8;
  int pred_len = 12;
  double dt = kDefaultPriorDt;
  Supervision mode = Supervision::Waypoint;

  // displacement (2) + goal offset (2) + occupancy (G^2) + kind flag (1)
  int input_dim() const { return 5 + grid.cells * grid.cells; }
};

std::size_t parameter_count(const ForecastHyper& hp);

// Occupancy counts of neighbours around positions[self], row-major with the
// row index along y, both measured from the window's minimum corner.
std::vector<double> pool_neighbors(std::span<const Vec2> positions, std::size_t self, const GridParams& grid);
std::vector<double> pool_neighbors(std::span<const Vec2> positions, std::span<const std::uint8_t> present,
                                   std::size_t self, const GridParams& grid);

class ForecastModel {
 public:
  struct Layout {
    std::size_t embed_w, embed_b, gate_wx, gate_wh, gate_b, dec_w, dec_b, total;
  };

  ForecastModel() = default;
  explicit ForecastModel(const ForecastHyper& hp);  // all-zero parameters, unit scales

  static ForecastModel initialize(const ForecastHyper& hp, std::uint64_t seed);

  const ForecastHyper& hyper() const { return hp_; }
  ForecastHyper& hyper() { return hp_; }
  const Layout& layout() const { return layout_; }

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }
  Eigen::VectorXd& input_scale() { return input_scale_; }
  const Eigen::VectorXd& input_scale() const { return input_scale_; }
  Eigen::Vector2d& output_scale() { return output_scale_; }
  const Eigen::Vector2d& output_scale() const { return output_scale_; }

  // Column-major views into the flat parameter vector.
  Eigen::Map<const Eigen::MatrixXd> embed_w() const { return block(layout_.embed_w, hp_.embed, hp_.input_dim()); }
  Eigen::Map<const Eigen::VectorXd> embed_b() const { return vec(layout_.embed_b, hp_.embed); }
  Eigen::Map<const Eigen::MatrixXd> gate_wx() const { return block(layout_.gate_wx, 4 * hp_.hidden, hp_.embed); }
  Eigen::Map<const Eigen::MatrixXd> gate_wh() const { return block(layout_.gate_wh, 4 * hp_.hidden, hp_.hidden); }
  Eigen::Map<const Eigen::VectorXd> gate_b() const { return vec(layout_.gate_b, 4 * hp_.hidden); }
  Eigen::Map<const Eigen::MatrixXd> dec_w() const { return block(layout_.dec_w, 2, hp_.hidden); }
  Eigen::Map<const Eigen::VectorXd> dec_b() const { return vec(layout_.dec_b, 2); }

 private:
  Eigen::Map<const Eigen::MatrixXd> block(std::size_t off, int r, int c) const {
    return {params_.data() + off, r, c};
  }
  Eigen::Map<const Eigen::VectorXd> vec(std::size_t off, int n) const { return {params_.data() + off, n}; }

  ForecastHyper hp_;
  Layout layout_{};
  Eigen::VectorXd params_;
  Eigen::VectorXd input_scale_;
  Eigen::Vector2d output_scale_ = Eigen::Vector2d::Ones();
};

ForecastModel::Layout make_layout(const ForecastHyper& hp);

// Recurrent state for a batch of agents (one column each).
struct RecurrentState {
  Eigen::MatrixXd h, c;

  static RecurrentState zeros(const ForecastModel& m, Eigen::Index agents) {
    return {Eigen::MatrixXd::Zero(m.hyper().hidden, agents), Eigen::MatrixXd::Zero(m.hyper().hidden, agents)};
  }
};

// Raw (unscaled) input column for one agent.
Eigen::VectorXd assemble_input(const ForecastHyper& hp, Vec2 displacement, Vec2 goal_offset,
                               std::span<const double> occupancy, AgentKind kind);

struct StepOutput {
  RecurrentState state;
  Eigen::Matrix2Xd displacement;
};

// One recurrent step for a batch; `inputs` is input_dim x agents, unscaled.
// Throws NumericalFault naming the layer that produced a non-finite value.
StepOutput forward_step(const ForecastModel& model, const RecurrentState& state, const Eigen::MatrixXd& inputs);

// Selects the model that refines each agent kind.
struct ModelSet {
  const ForecastModel* shared = nullptr;
  const ForecastModel* pedestrian = nullptr;
  const ForecastModel* vehicle = nullptr;

  static ModelSet single(const ForecastModel& m) { return {&m, nullptr, nullptr}; }
  const ForecastModel& for_kind(AgentKind k) const;
  const ForecastHyper& hyper() const;
};

struct RolloutAgent {
  AgentKind kind = AgentKind::Pedestrian;
  std::vector<Vec2> observed;              // oldest first; last is the current position
  const PriorTrajectory* prior = nullptr;  // goal source and pseudo-history
  double age = 0.0;                        // seconds since prior start at the current position
};

// Goal location for an agent that is `age` seconds into its prior.
Vec2 goal_for(const PriorTrajectory& prior, double age, Supervision mode, int pred_len, double dt);

// The `obs_len` positions ending at the current one, padded in front from
// the prior (constant-velocity extension before entry) for young agents.
std::vector<Vec2> observation_window(const RolloutAgent& agent, int obs_len, double dt);

// Iterative prediction: chunks of at most pred_len steps, each chunk
// re-observing the last obs_len positions. Result is [agent][step].
std::vector<std::vector<Vec2>> rollout(const ModelSet& models, std::span<const RolloutAgent> agents, int horizon);

std::vector<std::vector<Vec2>> rollout_constant_velocity(std::span<const RolloutAgent> agents, int horizon,
                                                         double dt);

double smooth_l1(double residual);
double smooth_l1_grad(double residual);

// Mean smooth-L1 over present (agent, step, coordinate) entries;
// pred/target are [agent][step].
double loss_smooth_l1(const std::vector<std::vector<Vec2>>& pred, const std::vector<std::vector<Vec2>>& target,
                      const std::vector<std::vector<std::uint8_t>>& mask);

// Teacher-forced training data for one scene, inputs already scaled.
struct TrainingSample {
  std::size_t scene_index = 0;
  Eigen::Index agents = 0;
  std::vector<Eigen::MatrixXd> inputs;   // per step, input_dim x agents
  std::vector<Eigen::Matrix2Xd> base;    // position the step starts from
  std::vector<Eigen::Matrix2Xd> target;  // position one step later
  std::vector<Eigen::ArrayXd> loss_mask;  // 1 where the target enters the loss
};

// Agents present over the whole observation window and carrying a feature.
std::vector<std::size_t> forecast_targets(const Scene& scene, int obs_len);

// Sets per-dimension input scales and the output scale from scene statistics.
void fit_normalization(ForecastModel& model, std::span<const Scene> scenes);

std::vector<TrainingSample> build_training_samples(const ForecastModel& model, std::span<const Scene> scenes);

struct LossGrad {
  double loss_sum = 0.0;
  double count = 0.0;
  Eigen::VectorXd grad_sum;

  double mean_loss() const { return count > 0.0 ? loss_sum / count : 0.0; }
};

// Sums (not means) over the samples so batches can be merged.
LossGrad loss_and_gradient(const ForecastModel& model, std::span<const TrainingSample* const> samples);
double training_loss(const ForecastModel& model, std::span<const TrainingSample* const> samples);

struct TrainOptions {
  double lr = 1e-2;
  double momentum = 0.9;
  int batch = 8;
  double clip = 5.0;
  std::uint64_t seed = 0;
};

class Trainer {
 public:
  Trainer(ForecastModel& model, TrainOptions opts);

  // One pass over `samples` in a seeded shuffled order; returns the mean
  // loss accumulated before each update.
  double epoch(std::span<const TrainingSample> samples);
  int epochs_done() const { return epochs_; }

 private:
  ForecastModel& model_;
  TrainOptions opts_;
  Eigen::VectorXd velocity_;
  int epochs_ = 0;
};

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

GradientCheck gradient_check(const ForecastModel& model, const TrainingSample& sample, double epsilon = 1e-5);

}  // namespace isim
