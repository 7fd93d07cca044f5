#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "fbcp/predictor.hpp"
#include "fbcp/rng.hpp"

using namespace fbcp;
using namespace fbcp::predictor;
using dynamics::JointObstacleTrajectory;

namespace {

// Constant-velocity joint trajectories: exact AR(2) data.
std::vector<JointObstacleTrajectory> constant_velocity_set(int n, int m, int T,
                                                           std::uint64_t seed) {
  std::vector<JointObstacleTrajectory> out;
  for (int i = 0; i < n; ++i) {
    CounterRng rng = CounterRng::stream(seed, {static_cast<std::uint64_t>(i)});
    JointObstacleTrajectory traj;
    traj.id = i;
    traj.num_obstacles = m;
    Eigen::VectorXd pos(2 * m), vel(2 * m);
    for (int k = 0; k < 2 * m; ++k) {
      pos[k] = 4.0 * rng.normal();
      vel[k] = rng.normal();
    }
    for (int t = 0; t <= T; ++t) traj.states.push_back(pos + t * vel);
    out.push_back(std::move(traj));
  }
  return out;
}

}  // namespace

TEST_CASE("constant-velocity data yields the exact AR(2) extrapolator") {
  const auto train = constant_velocity_set(30, 2, 12, 3);
  const PredictorModel model = fit(train, 2, 0.0);
  for (const auto& traj : train) {
    const auto errs = residuals(model, traj);
    for (const auto& e : errs) CHECK(e.lpNorm<Eigen::Infinity>() < 1e-9);
  }
  // The rollout reproduces the ground-truth future exactly.
  const auto preds = predict_from_prefix(model, train[0], 4, 12);
  for (int tau = 5; tau <= 12; ++tau)
    CHECK((preds[static_cast<std::size_t>(tau - 5)] - train[0].states[static_cast<std::size_t>(tau)])
              .lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("stationary trajectory fits the constant with zero residuals") {
  std::vector<JointObstacleTrajectory> train(1);
  train[0].id = 0;
  train[0].num_obstacles = 1;
  Eigen::VectorXd p(2);
  p << 1.5, -0.5;
  // A second, distinct stationary trajectory avoids a degenerate design.
  JointObstacleTrajectory other;
  other.id = 1;
  other.num_obstacles = 1;
  Eigen::VectorXd q(2);
  q << -2.0, 3.0;
  for (int t = 0; t <= 8; ++t) {
    train[0].states.push_back(p);
    other.states.push_back(q);
  }
  train.push_back(other);
  const PredictorModel model = fit(train, 2, 1e-10);
  for (const auto& traj : train) {
    const auto errs = residuals(model, traj);
    for (const auto& e : errs) CHECK(e.lpNorm<Eigen::Infinity>() < 1e-6);
  }
  const auto preds = rollout(model, train[0].states, 12);
  for (const auto& y : preds) CHECK((y - p).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("fit recovers a known linear map") {
  // Y_{t+1} = A1 Y_t + A0 Y_{t-1} + b with known coefficients.
  const int d = 2;
  Eigen::Matrix2d A1, A0;
  A1 << 1.4, 0.1, -0.2, 0.9;
  A0 << -0.5, 0.0, 0.1, -0.3;
  Eigen::Vector2d b(0.2, -0.1);
  std::vector<JointObstacleTrajectory> train;
  CounterRng rng = CounterRng::stream(17, {0});
  for (int i = 0; i < 40; ++i) {
    JointObstacleTrajectory traj;
    traj.id = i;
    traj.num_obstacles = 1;
    Eigen::Vector2d y0(rng.normal(), rng.normal()), y1(rng.normal(), rng.normal());
    traj.states.push_back(y0);
    traj.states.push_back(y1);
    for (int t = 2; t <= 10; ++t) {
      const Eigen::Vector2d next = A1 * traj.states.back().head<2>() +
                                   A0 * traj.states[traj.states.size() - 2].head<2>() + b;
      traj.states.push_back(next);
    }
    train.push_back(std::move(traj));
  }
  const PredictorModel model = fit(train, 2, 0.0);
  // Input layout is oldest-first: [Y_{t-1}; Y_t].
  CHECK((model.coefficients.block(0, 0, d, d) - A0).lpNorm<Eigen::Infinity>() < 1e-6);
  CHECK((model.coefficients.block(0, d, d, d) - A1).lpNorm<Eigen::Infinity>() < 1e-6);
  CHECK((model.intercept - b).lpNorm<Eigen::Infinity>() < 1e-6);

  // Cross-check against an independent normal-equations solve.
  std::size_t rows = 0;
  for (const auto& t : train) rows += t.states.size() - 2;
  Eigen::MatrixXd X(rows, 5), Y(rows, 2);
  std::size_t r = 0;
  for (const auto& t : train)
    for (std::size_t k = 2; k < t.states.size(); ++k) {
      X(r, 0) = t.states[k - 2][0];
      X(r, 1) = t.states[k - 2][1];
      X(r, 2) = t.states[k - 1][0];
      X(r, 3) = t.states[k - 1][1];
      X(r, 4) = 1.0;
      Y.row(r) = t.states[k].transpose();
      ++r;
    }
  const Eigen::MatrixXd W = (X.transpose() * X).ldlt().solve(X.transpose() * Y);
  CHECK((model.coefficients - W.topRows(4).transpose()).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("degenerate design with zero ridge is a singular fit") {
  std::vector<JointObstacleTrajectory> train(1);
  train[0].id = 0;
  train[0].num_obstacles = 1;
  Eigen::VectorXd p = Eigen::VectorXd::Zero(2);
  for (int t = 0; t <= 6; ++t) train[0].states.push_back(p);
  CHECK_THROWS_AS(fit(train, 2, 0.0), SingularFit);
  CHECK_NOTHROW(fit(train, 2, 1e-6));
}

TEST_CASE("fit validates inputs") {
  CHECK_THROWS_AS(fit({}, 2, 0.0), InvalidInput);
  auto short_traj = constant_velocity_set(1, 1, 1, 5);
  CHECK_THROWS_AS(fit(short_traj, 2, 0.0), InvalidInput);
}

TEST_CASE("rollout edge cases") {
  const auto train = constant_velocity_set(10, 1, 10, 21);
  const PredictorModel model = fit(train, 2, 0.0);
  // Zero-length rollout.
  CHECK(rollout(model, train[0].states, 10).empty());
  // History shorter than the window.
  std::vector<Eigen::VectorXd> tiny{train[0].states[0]};
  CHECK_THROWS_AS(rollout(model, tiny, 5), InvalidInput);
  // One-step rollout equals the one-step prediction residuals use.
  const auto one = rollout(model, std::span<const Eigen::VectorXd>(train[0].states.data(), 5), 5);
  const auto res = residuals(model, train[0]);
  const Eigen::VectorXd recon = train[0].states[5] - res[3];  // residual index tau=5 -> 5-window
  CHECK((one[0] - recon).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("residuals match a re-implemented loop on random data") {
  CounterRng rng = CounterRng::stream(31, {0});
  auto train = constant_velocity_set(20, 2, 12, 8);
  // Perturb into generic trajectories.
  for (auto& traj : train)
    for (auto& y : traj.states)
      for (int i = 0; i < y.size(); ++i) y[i] += 0.3 * rng.normal();
  const PredictorModel model = fit(train, 2, 1e-8);

  JointObstacleTrajectory probe = train[7];
  const auto errs = residuals(model, probe);
  REQUIRE(static_cast<int>(errs.size()) == probe.horizon() - model.window + 1);
  for (std::size_t tau = 2; tau < probe.states.size(); ++tau) {
    Eigen::VectorXd input(8);
    input << probe.states[tau - 2], probe.states[tau - 1];
    const Eigen::VectorXd pred = model.coefficients * input + model.intercept;
    CHECK((errs[tau - 2] - (probe.states[tau] - pred)).lpNorm<Eigen::Infinity>() < 1e-12);
  }

  // Known constant offset shifts every residual by exactly that offset.
  JointObstacleTrajectory shifted = probe;
  Eigen::VectorXd c(4);
  c << 0.3, -0.2, 0.15, 0.4;
  // Build data equal to model prediction + c at each step.
  for (std::size_t tau = 2; tau < shifted.states.size(); ++tau) {
    Eigen::VectorXd input(8);
    input << shifted.states[tau - 2], shifted.states[tau - 1];
    shifted.states[tau] = model.coefficients * input + model.intercept + c;
  }
  for (const auto& e : residuals(model, shifted))
    CHECK((e - c).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("calibration scores respect split hygiene and ordering") {
  const auto all = constant_velocity_set(30, 1, 10, 99);
  std::vector<JointObstacleTrajectory> train(all.begin(), all.begin() + 10);
  std::vector<JointObstacleTrajectory> cal(all.begin() + 10, all.begin() + 30);
  const PredictorModel model = fit(train, 2, 1e-9);

  const auto scores = calib_scores(model, cal, 3, 10);
  REQUIRE(scores.size() == 7);  // tau = 4..10
  // Exact model on noise-free data: all scores ~ 0.
  for (const auto& row : scores)
    for (double s : row) CHECK(s < 1e-7);

  // Constant offset of norm d at every step -> every score equals d.
  std::vector<JointObstacleTrajectory> offset_cal = cal;
  Eigen::VectorXd off(2);
  off << 3.0, 4.0;  // norm 5
  for (auto& traj : offset_cal)
    for (std::size_t t = 4; t < traj.states.size(); ++t) traj.states[t] += off;
  // Only future states are offset; the prefix (t<=3) matches the rollout input.
  const auto offset_scores = calib_scores(model, offset_cal, 3, 10);
  for (const auto& row : offset_scores)
    for (double s : row) CHECK(s == Catch::Approx(5.0).margin(1e-6));

  // Row permutation equals trajectory permutation.
  std::vector<JointObstacleTrajectory> reversed(cal.rbegin(), cal.rend());
  const auto rev_scores = calib_scores(model, reversed, 3, 10);
  for (std::size_t r = 0; r < scores.size(); ++r)
    for (std::size_t i = 0; i < cal.size(); ++i)
      CHECK(rev_scores[r][i] == scores[r][cal.size() - 1 - i]);

  // Overlap with the training split is refused.
  std::vector<JointObstacleTrajectory> tainted = cal;
  tainted.push_back(train[0]);
  CHECK_THROWS_AS(calib_scores(model, tainted, 3, 10), SplitViolation);
}

TEST_CASE("prefix padding matches rollout once enough history exists") {
  const auto all = constant_velocity_set(5, 1, 10, 123);
  const PredictorModel model = fit(all, 2, 1e-9);
  // At t=0 only one state is observed; the padded prefix repeats it.
  const auto padded = predict_from_prefix(model, all[0], 0, 10);
  CHECK(padded.size() == 10);
  // At t >= window-1 the padded prefix is the plain prefix.
  const auto direct = rollout(model, std::span<const Eigen::VectorXd>(all[0].states.data(), 4), 10);
  const auto via_prefix = predict_from_prefix(model, all[0], 3, 10);
  for (std::size_t i = 0; i < direct.size(); ++i)
    CHECK((direct[i] - via_prefix[i]).lpNorm<Eigen::Infinity>() == 0.0);
}
