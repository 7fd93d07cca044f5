#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "fbcp/errors.hpp"

// Split-conformal machinery: augmented empirical quantiles, likelihood-ratio
// weighted quantiles, prediction-region radii, posterior violation risk and
// its weighted form, deterministic risk lower bounds, and the finite-sample
// expectation bound on the posterior risk.
namespace fbcp::conformal {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// One nonconformity score. R-type scores (prediction-error norms) are >= 0;
/// S-type scores (signed constraint margins) may be any real.
struct ScoreSample {
  double value = 0.0;
  std::int64_t source_index = -1;
};

struct QuantileSpec {
  double level = 0.0;      // the 1-alpha target, strictly inside (0,1)
  bool augmented = true;   // append the +infinity atom

  void validate() const {
    if (!(level > 0.0 && level < 1.0)) throw InvalidInput("quantile level must be in (0,1)");
  }
};

/// Level-q quantile of the empirical distribution of {scores} (optionally
/// augmented with a +infinity atom). With augmentation over K scores this is
/// the k-th smallest score for k = ceil((K+1)*level), or +infinity when
/// k > K. Ties are kept as duplicates, so the result is deterministic.
inline double empirical_quantile(std::span<const double> scores, const QuantileSpec& spec) {
  spec.validate();
  const std::size_t n = scores.size();
  if (!spec.augmented && n == 0) throw InvalidInput("empirical_quantile: empty score list");
  const std::size_t atoms = spec.augmented ? n + 1 : n;
  const auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(atoms) * spec.level));
  if (k > n) return kInfinity;  // only reachable when augmented
  std::vector<double> sorted(scores.begin(), scores.end());
  std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end());
  return sorted[k - 1];
}

inline double empirical_quantile(std::span<const ScoreSample> scores, const QuantileSpec& spec) {
  std::vector<double> values(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) values[i] = scores[i].value;
  return empirical_quantile(std::span<const double>(values), spec);
}

/// Normalized likelihood-ratio weights: calib_weights over the calibration
/// points plus test_weight on the (+infinity) test atom; sums to one.
struct LikelihoodWeights {
  std::vector<double> calib_weights;
  double test_weight = 0.0;

  void validate() const {
    double sum = test_weight;
    if (!(test_weight >= 0.0)) throw InvalidInput("LikelihoodWeights: negative test weight");
    for (double w : calib_weights) {
      if (!(w >= 0.0)) throw InvalidInput("LikelihoodWeights: negative calibration weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw InvalidInput("LikelihoodWeights: weights must sum to 1");
  }

  static LikelihoodWeights uniform(std::size_t n_calib) {
    LikelihoodWeights w;
    w.calib_weights.assign(n_calib, 1.0 / static_cast<double>(n_calib + 1));
    w.test_weight = 1.0 / static_cast<double>(n_calib + 1);
    return w;
  }
};

/// Builds LikelihoodWeights from raw likelihood ratios v(Y^(i)) and the test
/// point's ratio v(Y): w_i = v_i / (sum_j v_j + v_test).
inline LikelihoodWeights likelihood_weights(std::span<const double> ratio_values,
                                            double test_ratio) {
  auto check = [](double v) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw InvalidInput("likelihood_weights: ratios must be positive and finite");
  };
  check(test_ratio);
  double total = test_ratio;
  for (double v : ratio_values) {
    check(v);
    total += v;
  }
  LikelihoodWeights w;
  w.calib_weights.resize(ratio_values.size());
  for (std::size_t i = 0; i < ratio_values.size(); ++i) w.calib_weights[i] = ratio_values[i] / total;
  w.test_weight = test_ratio / total;
  return w;
}

/// Weighted augmented quantile: inf{ z : sum_{i: score_i <= z} w_i >= level },
/// with the test weight sitting on the +infinity atom. Returns +infinity when
/// no finite z accumulates enough mass.
inline double weighted_quantile(std::span<const double> scores, const LikelihoodWeights& weights,
                                double level) {
  if (!(level > 0.0 && level < 1.0)) throw InvalidInput("weighted_quantile: level must be in (0,1)");
  if (scores.size() != weights.calib_weights.size())
    throw InvalidInput("weighted_quantile: scores/weights length mismatch");
  weights.validate();
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double cum = 0.0;
  for (std::size_t idx : order) {
    cum += weights.calib_weights[idx];
    if (cum >= level) return scores[idx];
  }
  return kInfinity;
}

/// Conformal prediction-region radius at miscoverage alpha_tau: the augmented
/// (1-alpha_tau)-quantile of the calibration R-scores. +infinity is a legal
/// radius (the requested confidence is unattainable with K scores).
inline double region_radius(std::span<const double> calib_scores, double alpha_tau) {
  if (!(alpha_tau > 0.0 && alpha_tau < 1.0))
    throw InvalidInput("region_radius: alpha must be in (0,1)");
  for (double s : calib_scores)
    if (s < 0.0) throw InvalidInput("region_radius: R-scores must be nonnegative");
  return empirical_quantile(calib_scores, QuantileSpec{1.0 - alpha_tau, true});
}

/// Region radius from presorted (ascending) scores; O(1). Same contract as
/// region_radius.
inline double region_radius_sorted(std::span<const double> sorted_scores, double alpha_tau) {
  if (!(alpha_tau > 0.0 && alpha_tau < 1.0))
    throw InvalidInput("region_radius: alpha must be in (0,1)");
  const std::size_t n = sorted_scores.size();
  const auto k =
      static_cast<std::size_t>(std::ceil(static_cast<double>(n + 1) * (1.0 - alpha_tau)));
  if (k > n) return kInfinity;
  return sorted_scores[k - 1];
}

/// Per-(t, tau) prediction-region centers (stacked joint obstacle positions)
/// and radii. Radii are nonnegative; +infinity marks an unattainable level.
struct PredictionRegionTable {
  std::map<std::pair<int, int>, Eigen::VectorXd> centers;
  std::map<std::pair<int, int>, double> radii;

  void set(int t, int tau, Eigen::VectorXd center, double radius) {
    if (!(radius >= 0.0)) throw InvalidInput("PredictionRegionTable: negative radius");
    centers[{t, tau}] = std::move(center);
    radii[{t, tau}] = radius;
  }
  double radius(int t, int tau) const { return radii.at({t, tau}); }
  const Eigen::VectorXd& center(int t, int tau) const { return centers.at({t, tau}); }
};

/// Posterior violation risk from realized state: (1 + #violations) / (1 + L)
/// where violation i means margin(ego, center + error_i) < 0. The errors must
/// come from the second calibration split so the count is independent of the
/// optimizer that produced the realized state.
template <class ConstraintFn>
double posterior_risk(const Eigen::Vector2d& realized_ego_pos,
                      const Eigen::VectorXd& predicted_center,
                      std::span<const Eigen::VectorXd> calib_errors, ConstraintFn&& margin) {
  if (calib_errors.empty()) throw InvalidInput("posterior_risk: empty calibration errors");
  long violations = 0;
  Eigen::VectorXd shifted(predicted_center.size());
  for (const Eigen::VectorXd& err : calib_errors) {
    if (err.size() != predicted_center.size())
      throw InvalidInput("posterior_risk: error/center dimension mismatch");
    shifted = predicted_center + err;
    if (margin(realized_ego_pos, shifted) < 0.0) ++violations;
  }
  const auto L = static_cast<double>(calib_errors.size());
  return (1.0 + static_cast<double>(violations)) / (1.0 + L);
}

/// Weighted posterior risk: test_weight + sum_i w_i * 1(margin_i < 0).
/// Degenerates to posterior_risk under uniform weights.
template <class ConstraintFn>
double weighted_posterior_risk(const Eigen::Vector2d& realized_ego_pos,
                               const Eigen::VectorXd& predicted_center,
                               std::span<const Eigen::VectorXd> calib_errors,
                               const LikelihoodWeights& weights, ConstraintFn&& margin) {
  if (calib_errors.empty()) throw InvalidInput("weighted_posterior_risk: empty calibration errors");
  if (calib_errors.size() != weights.calib_weights.size())
    throw InvalidInput("weighted_posterior_risk: errors/weights length mismatch");
  weights.validate();
  double beta = weights.test_weight;
  Eigen::VectorXd shifted(predicted_center.size());
  for (std::size_t i = 0; i < calib_errors.size(); ++i) {
    shifted = predicted_center + calib_errors[i];
    if (margin(realized_ego_pos, shifted) < 0.0) beta += weights.calib_weights[i];
  }
  return beta;
}

/// Deterministic lower bound on the risk a plan's clearance supports:
/// (1 + #{i : margin < L * R_i}) / (1 + K). Whenever the plan is feasible for
/// the current allocation this is <= the current alpha.
inline double risk_lower_bound(double margin, std::span<const double> calib_scores,
                               double lipschitz) {
  if (calib_scores.empty()) throw InvalidInput("risk_lower_bound: empty calibration scores");
  if (!(lipschitz > 0.0)) throw InvalidInput("risk_lower_bound: lipschitz must be positive");
  long count = 0;
  for (double r : calib_scores)
    if (margin < lipschitz * r) ++count;
  const auto K = static_cast<double>(calib_scores.size());
  return (1.0 + static_cast<double>(count)) / (1.0 + K);
}

/// Convenience overload evaluating the margin from the planned position and
/// region center.
template <class ConstraintFn>
double risk_lower_bound(const Eigen::Vector2d& planned_ego_pos, const Eigen::VectorXd& center,
                        std::span<const double> calib_scores, double lipschitz,
                        ConstraintFn&& margin) {
  return risk_lower_bound(margin(planned_ego_pos, center), calib_scores, lipschitz);
}

/// High-probability upper bound on E[beta_tau]:
/// (1 + L*(alpha + sqrt(-ln(delta) / (2K)))) / (1 + L), valid when
/// K > -ln(delta) / (2 alpha^2). Throws PreconditionError carrying the
/// minimal admissible K otherwise.
inline double expected_beta_bound(double alpha_tau, long K, long L, double delta) {
  if (!(alpha_tau > 0.0 && alpha_tau < 1.0))
    throw InvalidInput("expected_beta_bound: alpha must be in (0,1)");
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidInput("expected_beta_bound: delta must be in (0,1)");
  if (K <= 0 || L <= 0) throw InvalidInput("expected_beta_bound: K and L must be positive");
  const double threshold = -std::log(delta) / (2.0 * alpha_tau * alpha_tau);
  if (!(static_cast<double>(K) > threshold)) {
    const long min_k = static_cast<long>(std::floor(threshold)) + 1;
    throw PreconditionError("expected_beta_bound: K too small for requested delta", min_k);
  }
  const double slack = std::sqrt(-std::log(delta) / (2.0 * static_cast<double>(K)));
  return (1.0 + static_cast<double>(L) * (alpha_tau + slack)) / (1.0 + static_cast<double>(L));
}

}  // namespace fbcp::conformal
