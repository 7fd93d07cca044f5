#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "fbcp/dynamics.hpp"
#include "fbcp/errors.hpp"

// Linear autoregressive obstacle-trajectory predictor: ridge fit, multi-step
// rollout, one-step modeling errors, and calibration score matrices.
namespace fbcp::predictor {

using dynamics::JointObstacleTrajectory;

/// Ridge-regularized linear AR(window) model of the joint obstacle state.
/// coefficients is (d) x (window*d) with d = 2*M; the input is the window of
/// preceding states stacked oldest-first, plus an intercept.
struct PredictorModel {
  int window = 2;
  double ridge = 1e-6;
  Eigen::MatrixXd coefficients;
  Eigen::VectorXd intercept;
  std::string trained_on = "train";
  std::vector<std::int64_t> train_ids;  // split hygiene is asserted, not assumed

  int state_dim() const { return static_cast<int>(coefficients.rows()); }

  Eigen::VectorXd predict_next(std::span<const Eigen::VectorXd> history) const {
    const int d = state_dim();
    Eigen::VectorXd input(window * d);
    const std::size_t n = history.size();
    for (int k = 0; k < window; ++k)
      input.segment(k * d, d) = history[n - static_cast<std::size_t>(window - k)];
    return coefficients * input + intercept;
  }
};

/// Pooled ridge least-squares fit of Y_{t+1} against the preceding window,
/// over all trajectories and times. Deterministic given inputs.
inline PredictorModel fit(const std::vector<JointObstacleTrajectory>& train, int window,
                          double ridge) {
  if (train.empty()) throw InvalidInput("fit: empty training set");
  if (window < 1) throw InvalidInput("fit: window must be >= 1");
  if (ridge < 0.0) throw InvalidInput("fit: ridge must be nonnegative");
  const int d = static_cast<int>(train.front().states.front().size());
  const int p = window * d;

  std::size_t rows = 0;
  for (const auto& traj : train) {
    if (static_cast<int>(traj.states.size()) < window + 1)
      throw InvalidInput("fit: trajectory shorter than window+1");
    rows += traj.states.size() - static_cast<std::size_t>(window);
  }

  Eigen::MatrixXd X(rows, p + 1);
  Eigen::MatrixXd Y(rows, d);
  std::size_t r = 0;
  for (const auto& traj : train) {
    for (std::size_t t = static_cast<std::size_t>(window); t < traj.states.size(); ++t) {
      for (int k = 0; k < window; ++k)
        X.block(r, k * d, 1, d) =
            traj.states[t - static_cast<std::size_t>(window - k)].transpose();
      X(r, p) = 1.0;
      Y.row(r) = traj.states[t].transpose();
      ++r;
    }
  }

  Eigen::MatrixXd gram = X.transpose() * X;
  // Penalize the linear map only, not the intercept.
  for (int i = 0; i < p; ++i) gram(i, i) += ridge;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ridge == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < p + 1) throw SingularFit("fit: degenerate design with ridge=0");
  }
  Eigen::MatrixXd W = ldlt.solve(X.transpose() * Y);  // (p+1) x d

  PredictorModel model;
  model.window = window;
  model.ridge = ridge;
  model.coefficients = W.topRows(p).transpose();
  model.intercept = W.row(p).transpose();
  model.trained_on = "train";
  model.train_ids.reserve(train.size());
  for (const auto& traj : train) model.train_ids.push_back(traj.id);
  return model;
}

/// Autoregressive rollout from an observed prefix: predictions for
/// tau = t+1..horizon_end, feeding predictions back as inputs. The history
/// must hold at least `window` states.
inline std::vector<Eigen::VectorXd> rollout(const PredictorModel& model,
                                            std::span<const Eigen::VectorXd> history,
                                            int horizon_end) {
  if (static_cast<int>(history.size()) < model.window)
    throw InvalidInput("rollout: history shorter than window");
  const int t = static_cast<int>(history.size()) - 1;
  std::vector<Eigen::VectorXd> buf(history.begin(), history.end());
  std::vector<Eigen::VectorXd> out;
  out.reserve(static_cast<std::size_t>(std::max(0, horizon_end - t)));
  for (int tau = t + 1; tau <= horizon_end; ++tau) {
    buf.push_back(model.predict_next(buf));
    out.push_back(buf.back());
  }
  return out;
}

/// Rollout from the prefix Y_{0:t} of a trajectory, front-padding with Y_0
/// when fewer than `window` states have been observed. The same map is
/// applied to test and calibration trajectories, preserving exchangeability
/// of the resulting scores.
inline std::vector<Eigen::VectorXd> predict_from_prefix(const PredictorModel& model,
                                                        const JointObstacleTrajectory& traj,
                                                        int t, int horizon_end) {
  if (t < 0 || t >= static_cast<int>(traj.states.size()))
    throw InvalidInput("predict_from_prefix: t out of range");
  const int pad = std::max(0, model.window - (t + 1));
  std::vector<Eigen::VectorXd> history;
  history.reserve(static_cast<std::size_t>(t + 1 + pad));
  for (int k = 0; k < pad; ++k) history.push_back(traj.states.front());
  for (int k = 0; k <= t; ++k) history.push_back(traj.states[static_cast<std::size_t>(k)]);
  // rollout counts time by history length; padding shifts it by `pad`.
  return rollout(model, history, horizon_end + pad);
}

/// One-step modeling errors w_tau = Y_tau - g(true history), tau = window..T.
inline std::vector<Eigen::VectorXd> residuals(const PredictorModel& model,
                                              const JointObstacleTrajectory& traj) {
  if (static_cast<int>(traj.states.size()) < model.window + 1)
    throw InvalidInput("residuals: trajectory shorter than window+1");
  std::vector<Eigen::VectorXd> out;
  out.reserve(traj.states.size() - static_cast<std::size_t>(model.window));
  for (std::size_t tau = static_cast<std::size_t>(model.window); tau < traj.states.size(); ++tau) {
    std::span<const Eigen::VectorXd> history(traj.states.data(), tau);
    out.push_back(traj.states[tau] - model.predict_next(history));
  }
  return out;
}

/// Calibration score matrix R[tau - (t+1)][i] = |Y_tau^(i) - Yhat_{tau|t}^(i)|
/// (stacked Euclidean norm), rolled out from each calibration trajectory's
/// own prefix. Refuses calibration sets overlapping the training split.
inline std::vector<std::vector<double>> calib_scores(
    const PredictorModel& model, const std::vector<JointObstacleTrajectory>& cal1, int t, int T) {
  if (t < 0 || t >= T) throw InvalidInput("calib_scores: need 0 <= t < T");
  std::unordered_set<std::int64_t> train_ids(model.train_ids.begin(), model.train_ids.end());
  for (const auto& traj : cal1)
    if (train_ids.count(traj.id))
      throw SplitViolation("calib_scores: calibration trajectory appears in the training split");
  std::vector<std::vector<double>> scores(static_cast<std::size_t>(T - t),
                                          std::vector<double>(cal1.size()));
  for (std::size_t i = 0; i < cal1.size(); ++i) {
    if (cal1[i].horizon() < T) throw InvalidInput("calib_scores: trajectory shorter than T");
    const auto preds = predict_from_prefix(model, cal1[i], t, T);
    for (int tau = t + 1; tau <= T; ++tau)
      scores[static_cast<std::size_t>(tau - t - 1)][i] =
          (cal1[i].states[static_cast<std::size_t>(tau)] -
           preds[static_cast<std::size_t>(tau - t - 1)])
              .norm();
  }
  return scores;
}

}  // namespace fbcp::predictor
