#pragma once

// Full-covariance Gaussian mixture over trajectory feature vectors.

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

#include "isim/core.hpp"
#include "isim/rng.hpp"

namespace isim {

struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  // strictly positive

  static Standardizer fit(const Eigen::MatrixXd& data);  // rows = samples
  Eigen::VectorXd forward(const Eigen::VectorXd& z) const;
  Eigen::VectorXd inverse(const Eigen::VectorXd& u) const;
  double log_jacobian() const;  // sum of log scale
};

// Component indices are 0-based.
using ComponentSet = std::vector<int>;

struct GmmFitOptions {
  int max_iter = 200;
  double tol = 1e-6;  // per-sample log-likelihood improvement
  double reg = 1e-6;
  int restarts = 3;
  int max_collapse_restarts = 5;
};

// Means and covariances live in standardized coordinates.
class GmmModel {
 public:
  GmmModel() = default;
  GmmModel(AgentKind kind, Eigen::VectorXd weights, std::vector<Eigen::VectorXd> means,
           std::vector<Eigen::MatrixXd> covariances, Standardizer standardizer);

  AgentKind kind() const { return kind_; }
  int components() const { return static_cast<int>(weights_.size()); }
  int dimension() const { return static_cast<int>(standardizer_.mean.size()); }
  const Eigen::VectorXd& weights() const { return weights_; }
  const std::vector<Eigen::VectorXd>& means() const { return means_; }
  const std::vector<Eigen::MatrixXd>& covariances() const { return covs_; }
  const Standardizer& standardizer() const { return standardizer_; }
  const Eigen::MatrixXd& cholesky(int m) const { return chol_[std::size_t(m)]; }

  // Component mean mapped back to feature space.
  Eigen::VectorXd feature_mean(int m) const { return standardizer_.inverse(means_[std::size_t(m)]); }

  // log N(u; mu_m, Sigma_m) in standardized coordinates.
  double component_log_density(int m, const Eigen::VectorXd& u) const;

  void check_condition(const ComponentSet& c) const;

 private:
  AgentKind kind_ = AgentKind::Pedestrian;
  Eigen::VectorXd weights_;
  std::vector<Eigen::VectorXd> means_;
  std::vector<Eigen::MatrixXd> covs_;
  std::vector<Eigen::MatrixXd> chol_;  // lower factors
  std::vector<double> log_norm_;       // -0.5 (D log 2pi + log det)
  Standardizer standardizer_;
};

struct GmmFitReport {
  std::vector<double> log_likelihood;  // total, one per EM iteration of the kept restart
  int iterations = 0;
  int collapse_restarts = 0;
  bool converged = false;
};

GmmModel fit_em(std::span<const std::vector<double>> features, AgentKind kind, int components,
                std::uint64_t seed, const GmmFitOptions& opts = {}, GmmFitReport* report = nullptr);

double log_pdf(const GmmModel& model, std::span<const double> z);

// Total log-likelihood of standardized samples (rows) under the model's
// standardized mixture; used by the EM monotonicity checks.
double standardized_log_likelihood(const GmmModel& model, const Eigen::MatrixXd& standardized);

struct GmmDraw {
  std::vector<double> z;
  int component = 0;
};

std::vector<GmmDraw> sample(const GmmModel& model, std::size_t n, Rng& rng);
std::vector<GmmDraw> sample_conditional(const GmmModel& model, const ComponentSet& c, std::size_t n,
                                        Rng& rng);

struct Outlier {
  std::size_t index;
  double zscore;
  double log_likelihood;
};

std::vector<Outlier> zscore_outliers(const GmmModel& model, std::span<const std::vector<double>> features,
                                     double threshold = 20.0);

// Index of the component with the highest posterior responsibility.
int most_likely_component(const GmmModel& model, std::span<const double> z);

// Fixed-order pairwise sum.
double pairwise_sum(std::span<const double> v);

}  // namespace isim
