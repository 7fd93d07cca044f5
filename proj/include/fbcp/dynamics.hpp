#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "fbcp/errors.hpp"
#include "fbcp/rng.hpp"

// Ego dynamics (kinematic vehicle, double integrator), synthetic obstacle
// worlds, covariate-shift scenario generation, and dataset splitting.
namespace fbcp::dynamics {

enum class Model { kKinematicVehicle, kDoubleIntegrator };

inline std::string to_string(Model m) {
  return m == Model::kKinematicVehicle ? "kinematic_vehicle" : "double_integrator";
}
inline Model model_from_string(const std::string& s) {
  if (s == "kinematic_vehicle") return Model::kKinematicVehicle;
  if (s == "double_integrator") return Model::kDoubleIntegrator;
  throw InvalidInput("unknown dynamics model: " + s);
}

// Kinematic vehicle state (px, py, theta, v); double integrator (px, py, vx, vy).
using State = Eigen::Vector4d;
// Vehicle controls (steering phi, acceleration a); integrator (ax, ay).
using Control = Eigen::Vector2d;

inline constexpr double kVehicleLength = 0.2;
inline constexpr double kMaxSteer = std::numbers::pi / 6.0;
inline constexpr double kMaxAccel = 5.0;

struct ControlBounds {
  Control lo;
  Control hi;
};

inline ControlBounds control_bounds(Model m) {
  if (m == Model::kKinematicVehicle) return {{-kMaxSteer, -kMaxAccel}, {kMaxSteer, kMaxAccel}};
  return {{-kMaxAccel, -kMaxAccel}, {kMaxAccel, kMaxAccel}};
}

inline double wrap_angle(double theta) {
  // Wrap to (-pi, pi].
  theta = std::fmod(theta, 2.0 * std::numbers::pi);
  if (theta <= -std::numbers::pi) theta += 2.0 * std::numbers::pi;
  if (theta > std::numbers::pi) theta -= 2.0 * std::numbers::pi;
  return theta;
}

inline void validate_control(Model m, const Control& u) {
  const ControlBounds b = control_bounds(m);
  for (int i = 0; i < 2; ++i)
    if (!(u[i] >= b.lo[i] - 1e-9 && u[i] <= b.hi[i] + 1e-9))
      throw InvalidInput("control outside admissible box");
}

/// One exact discrete dynamics step x_{t+1} = f(x_t, u_t).
inline State step(Model m, const State& x, const Control& u, double dt) {
  if (!(dt > 0.0)) throw InvalidInput("step: dt must be positive");
  validate_control(m, u);
  State next;
  if (m == Model::kKinematicVehicle) {
    const double theta = x[2];
    const double v = x[3];
    next[0] = x[0] + dt * v * std::cos(theta);
    next[1] = x[1] + dt * v * std::sin(theta);
    next[2] = wrap_angle(theta + dt * (v / kVehicleLength) * std::tan(u[0]));
    next[3] = v + dt * u[1];
  } else {
    next[0] = x[0] + dt * x[2] + 0.5 * dt * dt * u[0];
    next[1] = x[1] + dt * x[3] + 0.5 * dt * dt * u[1];
    next[2] = x[2] + dt * u[0];
    next[3] = x[3] + dt * u[1];
  }
  return next;
}

/// Jacobians of step() at (x, u); used by the sequential-convexification solver.
inline void linearize(Model m, const State& x, const Control& u, double dt, Eigen::Matrix4d& A,
                      Eigen::Matrix<double, 4, 2>& B) {
  if (m == Model::kKinematicVehicle) {
    const double theta = x[2];
    const double v = x[3];
    const double tan_phi = std::tan(u[0]);
    const double sec2_phi = 1.0 + tan_phi * tan_phi;
    A.setIdentity();
    A(0, 2) = -dt * v * std::sin(theta);
    A(0, 3) = dt * std::cos(theta);
    A(1, 2) = dt * v * std::cos(theta);
    A(1, 3) = dt * std::sin(theta);
    A(2, 3) = dt * tan_phi / kVehicleLength;
    B.setZero();
    B(2, 0) = dt * (v / kVehicleLength) * sec2_phi;
    B(3, 1) = dt;
  } else {
    A.setIdentity();
    A(0, 2) = dt;
    A(1, 3) = dt;
    B.setZero();
    B(0, 0) = 0.5 * dt * dt;
    B(1, 1) = 0.5 * dt * dt;
    B(2, 0) = dt;
    B(3, 1) = dt;
  }
}

/// Joint obstacle trajectory: states[t] stacks the M obstacle positions
/// (dimension 2M), t = 0..T. Fixed length and M across a dataset.
struct JointObstacleTrajectory {
  std::int64_t id = 0;
  int num_obstacles = 0;
  std::vector<Eigen::VectorXd> states;

  int horizon() const { return static_cast<int>(states.size()) - 1; }
};

/// Per-obstacle generator parameters. Obstacles follow a double-integrator
/// kernel with clipped proportional (plus damping) waypoint seeking and
/// additive Gaussian noise.
struct ObstacleParams {
  Eigen::Vector4d init_mean = Eigen::Vector4d::Zero();   // (px, py, vx, vy)
  Eigen::Vector4d init_std = Eigen::Vector4d::Zero();    // componentwise std dev
  Eigen::Vector2d waypoint = Eigen::Vector2d::Zero();
};

struct ScenarioConfig {
  Model model = Model::kKinematicVehicle;
  double dt = 0.125;
  int horizon = 20;  // mission length T
  std::vector<ObstacleParams> obstacles;

  // Obstacle kernel.
  double pursuit_gain = 0.5;      // proportional gain toward the waypoint
  double damping_gain = 0.9;      // velocity damping
  double obstacle_accel_limit = 2.0;
  double noise_pos = 0.02;        // per-step position noise std (meters)
  double noise_vel = 0.06;        // per-step velocity noise std (m/s)
  bool state_dependent_noise = false;  // scale noise by (1 + kappa*|v|)
  double noise_kappa = 0.0;

  std::uint64_t seed = 1;

  // Collision geometry (r_r robot, r_o obstacle, r_s safety margin).
  double radius_robot = 0.1;
  double radius_obstacle = 0.15;
  double radius_safety = 0.05;

  // Ego mission.
  State ego_init = State::Zero();
  Eigen::Vector2d ego_target = Eigen::Vector2d::Zero();
  double target_tolerance = 0.2;
  Eigen::Vector2d control_cost_weights = Eigen::Vector2d(100.0, 1.0);

  int num_obstacles() const { return static_cast<int>(obstacles.size()); }
  double radius_sum() const { return radius_robot + radius_obstacle + radius_safety; }

  void validate() const {
    if (!(dt > 0.0)) throw InvalidInput("scenario: dt must be positive");
    if (horizon < 1) throw InvalidInput("scenario: horizon must be >= 1");
    if (obstacles.empty()) throw InvalidInput("scenario: at least one obstacle");
    for (const auto& o : obstacles)
      for (int i = 0; i < 4; ++i)
        if (o.init_std[i] < 0.0) throw InvalidInput("scenario: negative init std");
  }
};

/// Generates `count` joint obstacle trajectories, ids first_id..first_id+count-1.
/// Deterministic in (config.seed, id); each trajectory owns a derived RNG
/// stream, so generation order (and worker count) never changes the data.
inline std::vector<JointObstacleTrajectory> generate_obstacles(const ScenarioConfig& config,
                                                               int count,
                                                               std::int64_t first_id = 0) {
  config.validate();
  if (count < 1) throw InvalidInput("generate_obstacles: count must be >= 1");
  const int M = config.num_obstacles();
  std::vector<JointObstacleTrajectory> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int n = 0; n < count; ++n) {
    const std::int64_t id = first_id + n;
    JointObstacleTrajectory traj;
    traj.id = id;
    traj.num_obstacles = M;
    traj.states.reserve(static_cast<std::size_t>(config.horizon) + 1);

    std::vector<Eigen::Vector4d> obs(M);
    CounterRng rng = CounterRng::stream(config.seed, {0x0b57ac1eull, static_cast<std::uint64_t>(id)});
    for (int j = 0; j < M; ++j) {
      const ObstacleParams& p = config.obstacles[static_cast<std::size_t>(j)];
      for (int i = 0; i < 4; ++i) obs[j][i] = p.init_mean[i] + p.init_std[i] * rng.normal();
    }
    auto emit = [&] {
      Eigen::VectorXd joint(2 * M);
      for (int j = 0; j < M; ++j) joint.segment<2>(2 * j) = obs[j].head<2>();
      traj.states.push_back(std::move(joint));
    };
    emit();
    for (int t = 0; t < config.horizon; ++t) {
      for (int j = 0; j < M; ++j) {
        const ObstacleParams& p = config.obstacles[static_cast<std::size_t>(j)];
        Eigen::Vector2d accel = config.pursuit_gain * (p.waypoint - obs[j].head<2>()) -
                                config.damping_gain * obs[j].tail<2>();
        accel = accel.cwiseMax(-config.obstacle_accel_limit).cwiseMin(config.obstacle_accel_limit);
        double scale = 1.0;
        if (config.state_dependent_noise)
          scale = 1.0 + config.noise_kappa * obs[j].tail<2>().norm();
        Eigen::Vector4d next;
        next[0] = obs[j][0] + config.dt * obs[j][2] + 0.5 * config.dt * config.dt * accel[0];
        next[1] = obs[j][1] + config.dt * obs[j][3] + 0.5 * config.dt * config.dt * accel[1];
        next[2] = obs[j][2] + config.dt * accel[0];
        next[3] = obs[j][3] + config.dt * accel[1];
        next[0] += scale * config.noise_pos * rng.normal();
        next[1] += scale * config.noise_pos * rng.normal();
        next[2] += scale * config.noise_vel * rng.normal();
        next[3] += scale * config.noise_vel * rng.normal();
        obs[j] = next;
      }
      emit();
    }
    out.push_back(std::move(traj));
  }
  return out;
}

/// Log density of the joint initial obstacle *position* vector under the
/// scenario's initial-state Gaussians (position marginals). Used as the
/// oracle for covariate-shift likelihood ratios.
inline double initial_position_log_density(const ScenarioConfig& config,
                                           const Eigen::VectorXd& joint_y0) {
  const int M = config.num_obstacles();
  if (joint_y0.size() != 2 * M) throw InvalidInput("initial_position_log_density: bad dimension");
  double log_p = 0.0;
  for (int j = 0; j < M; ++j) {
    const ObstacleParams& p = config.obstacles[static_cast<std::size_t>(j)];
    for (int i = 0; i < 2; ++i) {
      const double sd = p.init_std[i];
      if (!(sd > 0.0)) throw InvalidInput("initial_position_log_density: degenerate init std");
      const double z = (joint_y0[2 * j + i] - p.init_mean[i]) / sd;
      log_p += -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
  }
  return log_p;
}

enum class SplitRole { kTrain, kCal1, kCal2, kTest };

struct SplitSizes {
  int n_train = 0;
  int n_cal1 = 0;
  int n_cal2 = 0;
  int n_test = 0;
  int total() const { return n_train + n_cal1 + n_cal2 + n_test; }
};

struct TrajectoryDataset {
  std::vector<JointObstacleTrajectory> train;
  std::vector<JointObstacleTrajectory> cal1;
  std::vector<JointObstacleTrajectory> cal2;
  std::vector<JointObstacleTrajectory> test;
};

/// Disjoint, exhaustive, seed-deterministic partition into role-labeled splits.
inline TrajectoryDataset split_dataset(std::vector<JointObstacleTrajectory> trajs,
                                       const SplitSizes& sizes, std::uint64_t seed) {
  if (sizes.total() != static_cast<int>(trajs.size()))
    throw InvalidInput("split_dataset: sizes do not sum to the dataset size");
  std::vector<std::size_t> order(trajs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  CounterRng rng = CounterRng::stream(seed, {0x5B117ull, 0xda7a5e7ull});
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(order[i - 1], order[j]);
  }
  TrajectoryDataset ds;
  std::size_t pos = 0;
  auto take = [&](int n, std::vector<JointObstacleTrajectory>& dst) {
    dst.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) dst.push_back(std::move(trajs[order[pos++]]));
  };
  take(sizes.n_train, ds.train);
  take(sizes.n_cal1, ds.cal1);
  take(sizes.n_cal2, ds.cal2);
  take(sizes.n_test, ds.test);
  return ds;
}

}  // namespace fbcp::dynamics
