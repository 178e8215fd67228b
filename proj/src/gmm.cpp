#include "isim/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace isim {

namespace {

constexpr double kCollapseWeight = 1e-8;

double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

Eigen::MatrixXd to_matrix(std::span<const std::vector<double>> features) {
  const auto n = static_cast<Eigen::Index>(features.size());
  const auto d = static_cast<Eigen::Index>(features.front().size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& f = features[std::size_t(i)];
    if (static_cast<Eigen::Index>(f.size()) != d)
      throw Error(Errc::InvalidInput, "feature " + std::to_string(i) + " has dimension " +
                                          std::to_string(f.size()) + ", expected " + std::to_string(d));
    for (Eigen::Index j = 0; j < d; ++j) {
      if (!std::isfinite(f[std::size_t(j)]))
        throw Error(Errc::InvalidInput, "feature " + std::to_string(i) + " has a non-finite entry");
      x(i, j) = f[std::size_t(j)];
    }
  }
  return x;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& u) {
  const Eigen::RowVectorXd mu = u.colwise().mean();
  const Eigen::MatrixXd c = u.rowwise() - mu;
  return (c.transpose() * c) / double(u.rows());
}

struct EmState {
  Eigen::VectorXd weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covs;
};

// Per-sample log of w_m N(u_i | m), shape N x M.
Eigen::MatrixXd joint_log_density(const EmState& st, const Eigen::MatrixXd& u) {
  const auto n = u.rows();
  const auto d = u.cols();
  const auto m = static_cast<Eigen::Index>(st.weights.size());
  Eigen::MatrixXd out(n, m);
  const Eigen::MatrixXd ut = u.transpose();
  for (Eigen::Index k = 0; k < m; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(st.covs[std::size_t(k)]);
    if (llt.info() != Eigen::Success)
      throw Error(Errc::NumericalFault, "covariance of component " + std::to_string(k) + " is not SPD");
    const Eigen::MatrixXd l = llt.matrixL();
    const Eigen::MatrixXd centered = ut.colwise() - st.means[std::size_t(k)];
    const Eigen::MatrixXd y = l.triangularView<Eigen::Lower>().solve(centered);
    const double logdet = 2.0 * l.diagonal().array().log().sum();
    const double base = std::log(st.weights(k)) - 0.5 * (double(d) * std::log(2.0 * std::numbers::pi) + logdet);
    out.col(k) = (base - 0.5 * y.colwise().squaredNorm().array()).matrix().transpose();
  }
  return out;
}

struct EStep {
  Eigen::MatrixXd resp;          // N x M
  std::vector<double> sample_ll;  // N
  double total = 0.0;
};

EStep expectation(const EmState& st, const Eigen::MatrixXd& u) {
  EStep e;
  const Eigen::MatrixXd lj = joint_log_density(st, u);
  const auto n = lj.rows();
  e.resp.resize(n, lj.cols());
  e.sample_ll.resize(std::size_t(n));
  std::vector<double> row(std::size_t(lj.cols()));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < lj.cols(); ++k) row[std::size_t(k)] = lj(i, k);
    const double l = log_sum_exp(row);
    e.sample_ll[std::size_t(i)] = l;
    e.resp.row(i) = (lj.row(i).array() - l).exp().matrix();
  }
  e.total = pairwise_sum(e.sample_ll);
  return e;
}

void maximization(EmState& st, const Eigen::MatrixXd& u, const Eigen::MatrixXd& resp, double reg) {
  const auto n = u.rows();
  const auto m = resp.cols();
  for (Eigen::Index k = 0; k < m; ++k) {
    const double nk = resp.col(k).sum();
    st.weights(k) = nk / double(n);
    if (nk <= 0.0) continue;
    Eigen::VectorXd mu = (u.transpose() * resp.col(k)) / nk;
    const Eigen::MatrixXd c = u.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = (c.transpose() * resp.col(k).asDiagonal() * c) / nk;
    cov = 0.5 * (cov + cov.transpose());
    cov.diagonal().array() += reg;
    st.means[std::size_t(k)] = std::move(mu);
    st.covs[std::size_t(k)] = std::move(cov);
  }
}

// Greedy k-means++ seeding on standardized data: each new center is the best
// of a few D^2-weighted candidates by the resulting potential.
std::vector<Eigen::Index> seed_centers(const Eigen::MatrixXd& u, int m, Rng& rng) {
  const auto n = u.rows();
  const int trials = 2 + int(std::log(double(m)));
  std::vector<Eigen::Index> centers;
  centers.push_back(static_cast<Eigen::Index>(rng.below(std::uint64_t(n))));
  Eigen::VectorXd d2 = (u.rowwise() - u.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < m) {
    const double total = d2.sum();
    Eigen::Index best = -1;
    double best_pot = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_d2;
    for (int t = 0; t < trials; ++t) {
      Eigen::Index pick = 0;
      if (total <= 0.0) {
        pick = static_cast<Eigen::Index>(rng.below(std::uint64_t(n)));
      } else {
        double r = rng.uniform() * total;
        for (pick = 0; pick < n - 1; ++pick) {
          r -= d2(pick);
          if (r < 0.0) break;
        }
      }
      Eigen::VectorXd nd2 = d2.cwiseMin((u.rowwise() - u.row(pick)).rowwise().squaredNorm());
      const double pot = nd2.sum();
      if (pot < best_pot) {
        best_pot = pot;
        best = pick;
        best_d2 = std::move(nd2);
      }
    }
    centers.push_back(best);
    d2 = std::move(best_d2);
  }
  return centers;
}

// Lloyd iterations from the seeded centers; returns hard responsibilities.
Eigen::MatrixXd kmeans_resp(const Eigen::MatrixXd& u, const std::vector<Eigen::Index>& seeds, int max_iter = 50) {
  const auto n = u.rows();
  const auto m = Eigen::Index(seeds.size());
  Eigen::MatrixXd centers(m, u.cols());
  for (Eigen::Index k = 0; k < m; ++k) centers.row(k) = u.row(seeds[std::size_t(k)]);
  std::vector<Eigen::Index> label(std::size_t(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centers.rowwise() - u.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (label[std::size_t(i)] != best) {
        label[std::size_t(i)] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(m, u.cols());
    Eigen::VectorXd cnt = Eigen::VectorXd::Zero(m);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(label[std::size_t(i)]) += u.row(i);
      cnt(label[std::size_t(i)]) += 1.0;
    }
    for (Eigen::Index k = 0; k < m; ++k) {
      if (cnt(k) > 0.0) {
        centers.row(k) = sum.row(k) / cnt(k);
        continue;
      }
      // Empty cluster: move it to the sample worst served by its center.
      Eigen::Index far = 0;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double d = (u.row(i) - centers.row(label[std::size_t(i)])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      centers.row(k) = u.row(far);
      changed = true;
    }
  }
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) resp(i, label[std::size_t(i)]) = 1.0;
  return resp;
}

struct RunResult {
  EmState state;
  GmmFitReport report;
  double final_ll = -std::numeric_limits<double>::infinity();
};

RunResult run_em(const Eigen::MatrixXd& u, int m, Rng& rng, const GmmFitOptions& opts) {
  const auto n = u.rows();
  const auto d = u.cols();
  Eigen::MatrixXd global = covariance(u);
  global.diagonal().array() += opts.reg;

  RunResult run;
  EmState& st = run.state;
  st.weights = Eigen::VectorXd::Constant(m, 1.0 / m);
  st.means.assign(std::size_t(m), Eigen::VectorXd::Zero(d));
  st.covs.assign(std::size_t(m), global);
  maximization(st, u, kmeans_resp(u, seed_centers(u, m, rng)), opts.reg);

  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < opts.max_iter; ++it) {
    EStep e = expectation(st, u);
    run.report.log_likelihood.push_back(e.total);
    run.report.iterations = it + 1;
    run.final_ll = e.total;
    if (std::isfinite(prev) && (e.total - prev) / double(n) < opts.tol) {
      run.report.converged = true;
      break;
    }
    prev = e.total;
    maximization(st, u, e.resp, opts.reg);

    bool restarted = false;
    for (Eigen::Index k = 0; k < m; ++k) {
      if (st.weights(k) >= kCollapseWeight) continue;
      if (++run.report.collapse_restarts > opts.max_collapse_restarts)
        throw Error(Errc::ComponentCollapse,
                    "component " + std::to_string(k) + " collapsed after " +
                        std::to_string(opts.max_collapse_restarts) + " restarts");
      const auto worst = std::distance(e.sample_ll.begin(),
                                       std::min_element(e.sample_ll.begin(), e.sample_ll.end()));
      st.means[std::size_t(k)] = u.row(worst).transpose();
      st.covs[std::size_t(k)] = global;
      st.weights(k) = 1.0 / double(n);
      restarted = true;
    }
    if (restarted) {
      st.weights /= st.weights.sum();
      // Restarting breaks monotonicity; the likelihood history starts over.
      run.report.log_likelihood.clear();
      prev = -std::numeric_limits<double>::infinity();
    }
  }
  return run;
}

}  // namespace

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& data) {
  Standardizer s;
  s.mean = data.colwise().mean().transpose();
  s.scale.resize(data.cols());
  for (Eigen::Index j = 0; j < data.cols(); ++j) {
    const double var = (data.col(j).array() - s.mean(j)).square().mean();
    const double sd = std::sqrt(var);
    s.scale(j) = sd > 1e-12 * std::max(1.0, std::abs(s.mean(j))) ? sd : 1.0;
  }
  return s;
}

Eigen::VectorXd Standardizer::forward(const Eigen::VectorXd& z) const {
  return ((z - mean).array() / scale.array()).matrix();
}

Eigen::VectorXd Standardizer::inverse(const Eigen::VectorXd& u) const {
  return (u.array() * scale.array()).matrix() + mean;
}

double Standardizer::log_jacobian() const { return scale.array().log().sum(); }

GmmModel::GmmModel(AgentKind kind, Eigen::VectorXd weights, std::vector<Eigen::VectorXd> means,
                   std::vector<Eigen::MatrixXd> covariances, Standardizer standardizer)
    : kind_(kind),
      weights_(std::move(weights)),
      means_(std::move(means)),
      covs_(std::move(covariances)),
      standardizer_(std::move(standardizer)) {
  const auto m = weights_.size();
  const auto d = standardizer_.mean.size();
  if (m == 0 || static_cast<Eigen::Index>(means_.size()) != m || static_cast<Eigen::Index>(covs_.size()) != m)
    throw Error(Errc::InvalidInput, "GMM component arrays have inconsistent sizes");
  if (standardizer_.scale.size() != d) throw Error(Errc::InvalidInput, "standardizer size mismatch");
  const double wsum = weights_.sum();
  if (std::abs(wsum - 1.0) > 1e-9 || (weights_.array() <= 0.0).any())
    throw Error(Errc::InvalidInput, "GMM weights must be positive and sum to 1");
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto& mu = means_[std::size_t(k)];
    auto& cov = covs_[std::size_t(k)];
    if (mu.size() != d || cov.rows() != d || cov.cols() != d)
      throw Error(Errc::InvalidInput, "component " + std::to_string(k) + " has wrong dimension");
    cov = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
      throw Error(Errc::InvalidInput, "covariance of component " + std::to_string(k) + " is not SPD");
    Eigen::MatrixXd l = llt.matrixL();
    const double logdet = 2.0 * l.diagonal().array().log().sum();
    log_norm_.push_back(-0.5 * (double(d) * std::log(2.0 * std::numbers::pi) + logdet));
    chol_.push_back(std::move(l));
  }
}

double GmmModel::component_log_density(int m, const Eigen::VectorXd& u) const {
  const auto k = std::size_t(m);
  const Eigen::VectorXd y = chol_[k].triangularView<Eigen::Lower>().solve(u - means_[k]);
  return log_norm_[k] - 0.5 * y.squaredNorm();
}

void GmmModel::check_condition(const ComponentSet& c) const {
  if (c.empty()) throw Error(Errc::InvalidCondition, "component set is empty");
  std::vector<int> sorted = c;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] < 0 || sorted[i] >= components())
      throw Error(Errc::InvalidCondition, "component index " + std::to_string(sorted[i]) + " out of range [0, " +
                                              std::to_string(components()) + ")");
    if (i > 0 && sorted[i] == sorted[i - 1])
      throw Error(Errc::InvalidCondition, "duplicate component index " + std::to_string(sorted[i]));
  }
}

GmmModel fit_em(std::span<const std::vector<double>> features, AgentKind kind, int components,
                std::uint64_t seed, const GmmFitOptions& opts, GmmFitReport* report) {
  if (components < 1) throw Error(Errc::InvalidInput, "component count must be >= 1");
  if (features.size() < 10 * std::size_t(components))
    throw Error(Errc::InsufficientData, std::to_string(features.size()) + " samples for " +
                                            std::to_string(components) + " components (need 10 per component)");
  const Eigen::MatrixXd x = to_matrix(features);
  Standardizer stdz = Standardizer::fit(x);
  Eigen::MatrixXd u(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) u.row(i) = stdz.forward(x.row(i).transpose()).transpose();

  RunResult best;
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    Rng rng(Rng::mix(seed, std::uint64_t(r)));
    RunResult run = run_em(u, components, rng, opts);
    if (run.final_ll > best.final_ll) best = std::move(run);
  }
  if (report) *report = best.report;
  Eigen::VectorXd w = best.state.weights / best.state.weights.sum();
  return GmmModel(kind, std::move(w), std::move(best.state.means), std::move(best.state.covs), std::move(stdz));
}

namespace {

std::vector<double> component_terms(const GmmModel& model, const Eigen::VectorXd& u) {
  std::vector<double> terms(std::size_t(model.components()));
  for (int m = 0; m < model.components(); ++m)
    terms[std::size_t(m)] = std::log(model.weights()(m)) + model.component_log_density(m, u);
  return terms;
}

Eigen::VectorXd as_vector(std::span<const double> z, int d) {
  if (static_cast<int>(z.size()) != d)
    throw Error(Errc::InvalidInput, "feature dimension " + std::to_string(z.size()) + " != model dimension " +
                                        std::to_string(d));
  return Eigen::Map<const Eigen::VectorXd>(z.data(), d);
}

}  // namespace

double log_pdf(const GmmModel& model, std::span<const double> z) {
  const Eigen::VectorXd u = model.standardizer().forward(as_vector(z, model.dimension()));
  return log_sum_exp(component_terms(model, u)) - model.standardizer().log_jacobian();
}

double standardized_log_likelihood(const GmmModel& model, const Eigen::MatrixXd& standardized) {
  std::vector<double> ll(std::size_t(standardized.rows()));
  for (Eigen::Index i = 0; i < standardized.rows(); ++i)
    ll[std::size_t(i)] = log_sum_exp(component_terms(model, standardized.row(i).transpose()));
  return pairwise_sum(ll);
}

int most_likely_component(const GmmModel& model, std::span<const double> z) {
  const Eigen::VectorXd u = model.standardizer().forward(as_vector(z, model.dimension()));
  const auto terms = component_terms(model, u);
  return static_cast<int>(std::distance(terms.begin(), std::max_element(terms.begin(), terms.end())));
}

std::vector<GmmDraw> sample_conditional(const GmmModel& model, const ComponentSet& c, std::size_t n, Rng& rng) {
  model.check_condition(c);
  std::vector<int> comps = c;
  std::sort(comps.begin(), comps.end());
  double total = 0.0;
  for (int m : comps) total += model.weights()(m);

  const int d = model.dimension();
  std::vector<GmmDraw> out;
  out.reserve(n);
  Eigen::VectorXd noise(d);
  for (std::size_t s = 0; s < n; ++s) {
    double r = rng.uniform() * total;
    int chosen = comps.back();
    for (int m : comps) {
      r -= model.weights()(m);
      if (r < 0.0) {
        chosen = m;
        break;
      }
    }
    for (int j = 0; j < d; ++j) noise(j) = rng.normal();
    const Eigen::VectorXd u = model.means()[std::size_t(chosen)] +
                              model.cholesky(chosen).triangularView<Eigen::Lower>() * noise;
    const Eigen::VectorXd z = model.standardizer().inverse(u);
    out.push_back({std::vector<double>(z.data(), z.data() + d), chosen});
  }
  return out;
}

std::vector<GmmDraw> sample(const GmmModel& model, std::size_t n, Rng& rng) {
  ComponentSet all(std::size_t(model.components()));
  std::iota(all.begin(), all.end(), 0);
  return sample_conditional(model, all, n, rng);
}

std::vector<Outlier> zscore_outliers(const GmmModel& model, std::span<const std::vector<double>> features,
                                     double threshold) {
  if (features.size() < 2) throw Error(Errc::InvalidInput, "outlier mining needs at least 2 features");
  std::vector<double> ll(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) ll[i] = log_pdf(model, features[i]);
  const double mean = pairwise_sum(ll) / double(ll.size());
  std::vector<double> sq(ll.size());
  for (std::size_t i = 0; i < ll.size(); ++i) sq[i] = (ll[i] - mean) * (ll[i] - mean);
  const double sd = std::sqrt(pairwise_sum(sq) / double(ll.size()));
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean))))
    throw Error(Errc::DegenerateLikelihoods, "log-likelihood standard deviation is zero");
  std::vector<Outlier> out;
  for (std::size_t i = 0; i < ll.size(); ++i) {
    const double z = (ll[i] - mean) / sd;
    if (std::abs(z) > threshold) out.push_back({i, z, ll[i]});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Outlier& a, const Outlier& b) { return std::abs(a.zscore) > std::abs(b.zscore); });
  return out;
}

}  // namespace isim
