#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "fbcp/optimizer.hpp"
#include "fbcp/rng.hpp"

using namespace fbcp;
using namespace fbcp::optimizer;
using dynamics::Control;
using dynamics::Model;
using dynamics::State;

namespace {

RegionRow far_regions(int steps, int m_obstacles) {
  RegionRow row;
  for (int k = 0; k < steps; ++k) {
    Eigen::VectorXd c(2 * m_obstacles);
    for (int j = 0; j < m_obstacles; ++j) c.segment<2>(2 * j) << 100.0 + j, 100.0;
    row.centers.push_back(c);
    row.radii.push_back(0.0);
  }
  return row;
}

}  // namespace

TEST_CASE("constraint margin selects the closest obstacle") {
  ConstraintSpec spec;
  spec.radius_sum = 1.0;
  Eigen::VectorXd one(2);
  one << 3.0, 4.0;
  CHECK(constraint_margin(spec, {0.0, 0.0}, one) == Catch::Approx(4.0));

  Eigen::VectorXd coincident(2);
  coincident << 0.0, 0.0;
  CHECK(constraint_margin(spec, {0.0, 0.0}, coincident) == Catch::Approx(-1.0));

  ConstraintSpec half;
  half.radius_sum = 0.5;
  Eigen::VectorXd two(4);
  two << 2.0, 0.0, 0.0, 7.0;
  CHECK(constraint_margin(half, {0.0, 0.0}, two) == Catch::Approx(1.5));

  Eigen::VectorXd bad(3);
  CHECK_THROWS_AS(constraint_margin(spec, {0.0, 0.0}, bad), InvalidInput);
}

TEST_CASE("margin is 1-Lipschitz in the stacked obstacle vector") {
  ConstraintSpec spec;
  spec.radius_sum = 0.4;
  CounterRng rng = CounterRng::stream(3, {11});
  for (int trial = 0; trial < 1000; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(4));
    const Eigen::Vector2d x(2.0 * rng.normal(), 2.0 * rng.normal());
    Eigen::VectorXd y(2 * m), yhat(2 * m);
    for (int i = 0; i < 2 * m; ++i) {
      y[i] = 3.0 * rng.normal();
      yhat[i] = y[i] + 0.5 * rng.normal();
    }
    const double lhs = std::abs(constraint_margin(spec, x, y) - constraint_margin(spec, x, yhat));
    CHECK(lhs <= (y - yhat).norm() + 1e-12);
  }
}

TEST_CASE("unobstructed double integrator matches the minimum-energy oracle") {
  const int H = 16;
  const double dt = 0.125;
  State x0 = State::Zero();
  TerminalSpec terminal;
  terminal.target << 1.0, 0.5;
  terminal.tolerance = 0.2;
  CostWeights cost;
  cost.control_weights << 1.0, 1.0;
  ConstraintSpec constraint;
  constraint.radius_sum = 0.3;

  const EgoTrajectoryPlan plan = solve_lower_stage(Model::kDoubleIntegrator, x0, 0, H,
                                                   far_regions(H, 1), cost, terminal, constraint, dt);
  REQUIRE(plan.feasible);

  // Minimum-energy reach of the ball: p_H = p_free + sum_k c_k u_k with
  // c_k = dt^2 (H-k-1/2); the optimum aims at the nearest ball point, so
  // J* = max(0, |target - p_free| - tol)^2 / sum c_k^2.
  double sum_c2 = 0.0;
  for (int k = 0; k < H; ++k) {
    const double c = dt * dt * (H - k - 0.5);
    sum_c2 += c * c;
  }
  const Eigen::Vector2d p_free = x0.head<2>() + H * dt * x0.tail<2>();
  const double reach = std::max(0.0, (terminal.target - p_free).norm() - terminal.tolerance);
  const double j_oracle = reach * reach / sum_c2;
  CHECK(plan.cost == Catch::Approx(j_oracle).epsilon(1e-4));

  // Dynamics recursion holds exactly on the returned plan.
  State x = x0;
  for (std::size_t k = 0; k < plan.controls.size(); ++k) {
    x = dynamics::step(Model::kDoubleIntegrator, x, plan.controls[k], dt);
    CHECK((x - plan.states[k]).lpNorm<Eigen::Infinity>() < 1e-12);
  }
  CHECK((plan.states.back().head<2>() - terminal.target).norm() <= terminal.tolerance + 1e-6);
}

TEST_CASE("blocked target is infeasible") {
  const int H = 8;
  TerminalSpec terminal;
  terminal.target << 1.0, 0.0;
  terminal.tolerance = 0.2;
  ConstraintSpec constraint;
  constraint.radius_sum = 0.3;
  CostWeights cost;
  cost.control_weights << 1.0, 1.0;
  RegionRow row;
  for (int k = 0; k < H; ++k) {
    Eigen::VectorXd c(2);
    c << 1.0, 0.0;  // obstacle parked on the target
    row.centers.push_back(c);
    row.radii.push_back(0.5);  // required clearance 0.8 > reachable ball
  }
  CHECK_THROWS_AS(solve_lower_stage(Model::kDoubleIntegrator, State::Zero(), 0, H, row, cost,
                                    terminal, constraint, 0.125),
                  Infeasible);
}

TEST_CASE("infinite radius is immediately infeasible") {
  RegionRow row = far_regions(4, 1);
  row.radii[2] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(solve_lower_stage(Model::kDoubleIntegrator, State::Zero(), 0, 4, row,
                                    CostWeights{}, TerminalSpec{}, ConstraintSpec{}, 0.125),
                  Infeasible);
}

TEST_CASE("warm starting an optimum is idempotent") {
  const int H = 12;
  const double dt = 0.125;
  State x0;
  x0 << -1.0, 0.0, 0.0, 1.2;
  TerminalSpec terminal;
  terminal.target << 1.0, 0.3;
  terminal.tolerance = 0.2;
  CostWeights cost;
  ConstraintSpec constraint;
  constraint.radius_sum = 0.3;
  RegionRow row;
  for (int k = 0; k < H; ++k) {
    Eigen::VectorXd c(2);
    c << 0.2, -0.4;
    row.centers.push_back(c);
    row.radii.push_back(0.15);
  }

  const EgoTrajectoryPlan first =
      solve_lower_stage(Model::kKinematicVehicle, x0, 0, H, row, cost, terminal, constraint, dt);
  REQUIRE(first.feasible);
  const EgoTrajectoryPlan second = solve_lower_stage(Model::kKinematicVehicle, x0, 0, H, row, cost,
                                                     terminal, constraint, dt, &first);
  REQUIRE(second.feasible);
  CHECK(second.solver_iterations <= 2);
  CHECK(second.cost == Catch::Approx(first.cost).margin(1e-8));
}

TEST_CASE("vehicle solve clears an obstacle on the path") {
  const int H = 20;
  const double dt = 0.125;
  State x0;
  x0 << -1.5, 0.0, 0.0, 1.4;
  TerminalSpec terminal;
  terminal.target << 1.6, 0.0;
  terminal.tolerance = 0.2;
  CostWeights cost;
  ConstraintSpec constraint;
  constraint.radius_sum = 0.3;
  RegionRow row;
  for (int k = 0; k < H; ++k) {
    Eigen::VectorXd c(4);
    c << 0.0, 0.05, 0.6, -0.9;
    row.centers.push_back(c);
    row.radii.push_back(0.1);
  }
  std::vector<SolveTraceEntry> trace;
  const EgoTrajectoryPlan plan = solve_lower_stage(Model::kKinematicVehicle, x0, 0, H, row, cost,
                                                   terminal, constraint, dt, nullptr,
                                                   SolverOptions(), &trace);
  REQUIRE(plan.feasible);
  CHECK_FALSE(trace.empty());
  for (int k = 0; k < H; ++k) {
    const double margin =
        constraint_margin(constraint, plan.states[static_cast<std::size_t>(k)].head<2>(),
                          row.centers[static_cast<std::size_t>(k)]);
    CHECK(margin >= constraint.lipschitz * row.radii[static_cast<std::size_t>(k)] - 1e-6);
  }
  CHECK((plan.states.back().head<2>() - terminal.target).norm() <= terminal.tolerance + 1e-6);
  CHECK(plan.cost > 0.0);
}

TEST_CASE("larger allocations never cost more (shared warm starts)") {
  CounterRng rng = CounterRng::stream(17, {21});
  const double dt = 0.125;
  int violations = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int H = 6 + static_cast<int>(rng.below(5));
    State x0;
    x0 << -1.2, 0.2 * rng.normal(), 0.0, 0.0;
    TerminalSpec terminal;
    terminal.target << 1.0 + 0.3 * rng.uniform01(), 0.3 * rng.normal();
    terminal.tolerance = 0.25;
    CostWeights cost;
    cost.control_weights << 1.0, 1.0;
    ConstraintSpec constraint;
    constraint.radius_sum = 0.25;
    RegionRow loose, tight;
    for (int k = 0; k < H; ++k) {
      Eigen::VectorXd c(2);
      c << -0.2 + 1.2 * rng.uniform01(), -0.35 + 0.7 * rng.uniform01();
      const double r_small = 0.05 + 0.1 * rng.uniform01();
      const double shrink = 0.5 + 0.4 * rng.uniform01();
      tight.centers.push_back(c);
      tight.radii.push_back(r_small / shrink);  // smaller alpha -> larger radius
      loose.centers.push_back(c);
      loose.radii.push_back(r_small);
    }
    EgoTrajectoryPlan plan_tight;
    try {
      plan_tight = solve_lower_stage(Model::kDoubleIntegrator, x0, 0, H, tight, cost, terminal,
                                     constraint, dt);
    } catch (const Infeasible&) {
      continue;  // instance not feasible under the smaller allocation
    }
    // The tight-allocation optimum is feasible for the loose allocation.
    const EgoTrajectoryPlan plan_loose = solve_lower_stage(
        Model::kDoubleIntegrator, x0, 0, H, loose, cost, terminal, constraint, dt, &plan_tight);
    if (plan_tight.cost < plan_loose.cost - 1e-5) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("active set partition follows the margin rule") {
  const int H = 10;
  const double dt = 0.125;
  State x0;
  x0 << -1.0, 0.0, 0.0, 1.2;
  TerminalSpec terminal;
  terminal.target << 1.0, 0.0;
  terminal.tolerance = 0.2;
  ConstraintSpec constraint;
  constraint.radius_sum = 0.3;
  const RegionRow row = far_regions(H, 1);
  const EgoTrajectoryPlan plan = solve_lower_stage(Model::kKinematicVehicle, x0, 0, H, row,
                                                   CostWeights{}, terminal, constraint, dt);

  // Obstacles are far: nothing active at a sane tolerance.
  const ActiveSetPartition none = identify_active_set(plan, row, constraint, 1e-5);
  CHECK(none.n_active == 0);
  CHECK(none.inactive.size() == static_cast<std::size_t>(H));

  // Infinite tolerance: everything active.
  const ActiveSetPartition all =
      identify_active_set(plan, row, constraint, std::numeric_limits<double>::infinity());
  CHECK(all.n_active == H);
  CHECK(all.active.front() == 1);
  CHECK(all.active.back() == H);

  // A step sitting exactly on the inflated boundary is active.
  EgoTrajectoryPlan probe = plan;
  RegionRow near = row;
  const Eigen::Vector2d p3 = probe.states[3].head<2>();
  near.centers[3].segment<2>(0) = p3 - Eigen::Vector2d(constraint.radius_sum + 0.1, 0.0);
  near.radii[3] = 0.1;  // margin - L*C = 0 exactly
  const ActiveSetPartition one = identify_active_set(probe, near, constraint, 1e-9);
  REQUIRE(one.n_active == 1);
  CHECK(one.active[0] == 4);  // tau = start_time + 1 + 3

  EgoTrajectoryPlan bad = plan;
  bad.feasible = false;
  CHECK_THROWS_AS(identify_active_set(bad, row, constraint, 1e-5), InvalidInput);
}
