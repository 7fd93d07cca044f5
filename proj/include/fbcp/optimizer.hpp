#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "fbcp/dynamics.hpp"
#include "fbcp/errors.hpp"
#include "fbcp/qp.hpp"

// Lower-stage shrinking-horizon trajectory optimization for a fixed risk
// allocation: direct transcription, sequential convexification with a trust
// region, Lipschitz-inflated collision constraints, terminal-ball constraint,
// and active-constraint identification.
namespace fbcp::optimizer {

using dynamics::Control;
using dynamics::Model;
using dynamics::State;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Collision constraint c(p, Y) = min_j |p - Y_j| - r with r the summed
/// robot/obstacle/safety radii. Under the stacked Euclidean norm this c is
/// 1-Lipschitz in Y, so lipschitz defaults to 1.
struct ConstraintSpec {
  double radius_sum = 0.3;
  double lipschitz = 1.0;
};

inline double constraint_margin(const ConstraintSpec& spec, const Eigen::Vector2d& ego_pos,
                                const Eigen::VectorXd& joint_obs) {
  if (joint_obs.size() % 2 != 0 || joint_obs.size() == 0)
    throw InvalidInput("constraint_margin: joint obstacle vector must stack 2D positions");
  double best = kInf;
  for (int j = 0; 2 * j < joint_obs.size(); ++j)
    best = std::min(best, (ego_pos - joint_obs.segment<2>(2 * j)).norm());
  return best - spec.radius_sum;
}

struct CostWeights {
  Eigen::Vector2d control_weights = Eigen::Vector2d(100.0, 1.0);
};

struct TerminalSpec {
  Eigen::Vector2d target = Eigen::Vector2d::Zero();
  double tolerance = 0.2;
};

/// Prediction-region row for one planning time t: centers and radii for
/// tau = t+1..T.
struct RegionRow {
  std::vector<Eigen::VectorXd> centers;
  std::vector<double> radii;

  int horizon_len() const { return static_cast<int>(radii.size()); }
};

struct EgoTrajectoryPlan {
  int start_time = 0;                 // t; states cover t+1..T, controls t..T-1
  std::vector<State> states;
  std::vector<Control> controls;
  double cost = kInf;                 // sum of stage control costs
  bool feasible = false;
  int solver_iterations = 0;
  double kkt_residual = kInf;         // stationarity residual at the returned point
};

struct ActiveSetPartition {
  std::vector<int> active;    // future times tau with (near-)tight inflated constraints
  std::vector<int> inactive;
  int n_active = 0;
};

struct SolverOptions {
  int max_scp_iter = 60;
  double trust_init = 0.8;
  double trust_min = 1e-6;
  double trust_max = 4.0;
  double constraint_tol = 1e-6;
  double slack_penalty = 50.0;   // initial exact-penalty weight, dual-adapted upward
  double cost_tol = 1e-7;        // relative model-reduction stationarity threshold
  double step_tol = 1e-8;        // control step infinity norm
  double kkt_tol = 1e-3;
  qp::Settings qp;
  SolverOptions() {
    // Loose splitting tolerance; precision comes from the active-set polish,
    // with a tightened re-solve as fallback.
    qp.eps_abs = 3e-4;
    qp.eps_rel = 3e-4;
    qp.max_iter = 4000;
  }
};

struct SolveTraceEntry {
  int iter = 0;
  double cost = 0.0;
  double violation = 0.0;
  double trust = 0.0;
  int qp_iterations = 0;
  bool accepted = false;
};

namespace detail {

inline std::vector<State> roll_states(Model model, const State& x_t,
                                      const std::vector<Control>& controls, double dt) {
  std::vector<State> states;
  states.reserve(controls.size());
  State x = x_t;
  for (const Control& u : controls) {
    x = dynamics::step(model, x, u, dt);
    states.push_back(x);
  }
  return states;
}

inline double control_cost(const std::vector<Control>& controls, const CostWeights& w) {
  double j = 0.0;
  for (const Control& u : controls)
    j += w.control_weights[0] * u[0] * u[0] + w.control_weights[1] * u[1] * u[1];
  return j;
}

// Total inflated-constraint violation of a candidate trajectory.
inline double total_violation(const std::vector<State>& states, const RegionRow& regions,
                              const ConstraintSpec& constraint, const TerminalSpec& terminal) {
  double v = 0.0;
  for (std::size_t k = 0; k < states.size(); ++k) {
    const Eigen::Vector2d p = states[k].head<2>();
    const double margin = constraint_margin(constraint, p, regions.centers[k]);
    v += std::max(0.0, constraint.lipschitz * regions.radii[k] - margin);
  }
  const Eigen::Vector2d p_final = states.back().head<2>();
  v += std::max(0.0, (p_final - terminal.target).norm() - terminal.tolerance);
  return v;
}

// Dynamics-projected initialization: greedy tracking of the straight line
// from x_t to the target, detouring around the deepest inflated incursion
// when the straight line would collide.
inline std::vector<Control> initial_controls(Model model, const State& x_t,
                                             const TerminalSpec& terminal,
                                             const RegionRow& regions,
                                             const ConstraintSpec& constraint, int steps,
                                             double dt) {
  const dynamics::ControlBounds bounds = dynamics::control_bounds(model);
  const Eigen::Vector2d p0 = x_t.head<2>();
  const Eigen::Vector2d pT = terminal.target;

  // Probe the straight line for the worst inflated-constraint incursion.
  double worst = 0.0;
  int k_worst = -1;
  Eigen::Vector2d obs_worst = Eigen::Vector2d::Zero();
  double req_worst = 0.0;
  for (int k = 0; k < steps && k < regions.horizon_len(); ++k) {
    const Eigen::Vector2d p = p0 + (pT - p0) * static_cast<double>(k + 1) / steps;
    const Eigen::VectorXd& centers = regions.centers[static_cast<std::size_t>(k)];
    const double required = constraint.radius_sum +
                            constraint.lipschitz * regions.radii[static_cast<std::size_t>(k)];
    for (int j = 0; 2 * j < centers.size(); ++j) {
      const Eigen::Vector2d c = centers.segment<2>(2 * j);
      const double slack = (p - c).norm() - required;
      if (slack < worst) {
        worst = slack;
        k_worst = k;
        obs_worst = c;
        req_worst = required;
      }
    }
  }
  int via_until = -1;
  Eigen::Vector2d via = pT;
  if (k_worst >= 0) {
    Eigen::Vector2d dir = pT - p0;
    dir = dir.norm() > 1e-9 ? Eigen::Vector2d(dir.normalized()) : Eigen::Vector2d(1.0, 0.0);
    const Eigen::Vector2d perp(-dir[1], dir[0]);
    const Eigen::Vector2d p_at = p0 + (pT - p0) * static_cast<double>(k_worst + 1) / steps;
    double side = perp.dot(p_at - obs_worst);
    if (std::abs(side) < 1e-9) side = 1.0;
    via = obs_worst + (side > 0.0 ? 1.0 : -1.0) * (req_worst + 0.15) * perp;
    via_until = k_worst;
  }

  std::vector<Control> controls;
  controls.reserve(static_cast<std::size_t>(steps));
  State x = x_t;
  for (int k = 0; k < steps; ++k) {
    const int remaining = steps - k;
    const Eigen::Vector2d goal = k <= via_until ? via : terminal.target;
    const Eigen::Vector2d to_target = goal - x.head<2>();
    Control u;
    if (model == Model::kKinematicVehicle) {
      const double dist = to_target.norm();
      const double v_des = dist / (std::max(remaining, 1) * dt);
      const double heading_des = dist > 1e-9 ? std::atan2(to_target[1], to_target[0]) : x[2];
      const double heading_err = dynamics::wrap_angle(heading_des - x[2]);
      // phi from desired heading rate: theta_dot = v/l tan(phi).
      const double theta_rate = heading_err / dt * 0.5;
      const double v_safe = std::max(std::abs(x[3]), 0.2);
      u[0] = std::clamp(std::atan(theta_rate * dynamics::kVehicleLength / v_safe), bounds.lo[0],
                        bounds.hi[0]);
      u[1] = std::clamp((v_des - x[3]) / dt * 0.5, bounds.lo[1], bounds.hi[1]);
    } else {
      const Eigen::Vector2d v(x[2], x[3]);
      const double horizon_s = std::max(remaining, 1) * dt;
      const Eigen::Vector2d accel = 2.0 * (to_target - v * horizon_s) / (horizon_s * horizon_s);
      u[0] = std::clamp(accel[0], bounds.lo[0], bounds.hi[0]);
      u[1] = std::clamp(accel[1], bounds.lo[1], bounds.hi[1]);
    }
    controls.push_back(u);
    x = dynamics::step(model, x, u, dt);
  }
  return controls;
}

}  // namespace detail

/// Solves the lower-stage problem at time t for fixed regions:
///   min sum u'diag(w)u  s.t. dynamics, control box,
///       c(x_tau, center_tau) >= L * C_tau  for tau = t+1..T,
///       |p_T - target| <= tolerance.
/// Returns a plan whose states satisfy the dynamics recursion exactly (they
/// are re-rolled from the controls) and whose constraints hold within
/// constraint_tol. Throws Infeasible when no such plan is found and
/// SolverDiverged on numerical failure.
inline EgoTrajectoryPlan solve_lower_stage(Model model, const State& x_t, int t, int T,
                                           const RegionRow& regions, const CostWeights& cost,
                                           const TerminalSpec& terminal,
                                           const ConstraintSpec& constraint, double dt,
                                           const EgoTrajectoryPlan* warm_start = nullptr,
                                           const SolverOptions& options = SolverOptions(),
                                           std::vector<SolveTraceEntry>* trace = nullptr) {
  const int H = T - t;
  if (H < 1) throw InvalidInput("solve_lower_stage: empty horizon");
  if (regions.horizon_len() != H) throw InvalidInput("solve_lower_stage: region row length != T-t");
  for (double r : regions.radii) {
    if (!(r >= 0.0)) throw InvalidInput("solve_lower_stage: negative region radius");
    if (std::isinf(r)) throw Infeasible("solve_lower_stage: infinite region radius");
  }
  const int M = static_cast<int>(regions.centers.front().size()) / 2;
  const dynamics::ControlBounds bounds = dynamics::control_bounds(model);

  // Reference trajectory.
  std::vector<Control> ref_u;
  if (warm_start && static_cast<int>(warm_start->controls.size()) == H) {
    ref_u = warm_start->controls;
    for (Control& u : ref_u)
      u = u.cwiseMax(bounds.lo).cwiseMin(bounds.hi);
  } else {
    ref_u = detail::initial_controls(model, x_t, terminal, regions, constraint, H, dt);
  }
  std::vector<State> ref_x = detail::roll_states(model, x_t, ref_u, dt);

  // Multiple-shooting transcription: states, controls, collision/terminal
  // slacks, and split virtual controls on the dynamics defects. The L1
  // virtual-control penalty is exact, so defects vanish at convergence.
  const int nx = 4 * H, nu = 2 * H, ns = H + 1, nv = 4 * H;
  const int n = nx + nu + ns + 2 * nv;
  auto xi = [&](int k) { return 4 * k; };             // state index, k = tau-(t+1)
  auto ui = [&](int k) { return nx + 2 * k; };        // control index, k = tau-t
  auto si = [&](int k) { return nx + nu + k; };       // collision slack per step
  const int s_term = nx + nu + H;
  const int vp0 = nx + nu + ns;                       // positive defect part
  const int vn0 = vp0 + nv;                           // negative defect part

  const int m = 4 * H + M * H + 1 + 2 * H + 4 * H + ns + 2 * nv;

  double slack_penalty = options.slack_penalty;
  auto build_cost = [&](double mu, Eigen::SparseMatrix<double>& P_out, Eigen::VectorXd& q_out) {
    std::vector<Eigen::Triplet<double>> p_trip;
    for (int k = 0; k < H; ++k) {
      p_trip.emplace_back(ui(k), ui(k), 2.0 * cost.control_weights[0]);
      p_trip.emplace_back(ui(k) + 1, ui(k) + 1, 2.0 * cost.control_weights[1]);
    }
    // Quadratic curvature on the penalty variables conditions the subproblem
    // without breaking exactness of the L1 term.
    for (int k = nx + nu; k < n; ++k) p_trip.emplace_back(k, k, 2.0 * mu);
    P_out.resize(n, n);
    P_out.setFromTriplets(p_trip.begin(), p_trip.end());
    q_out = Eigen::VectorXd::Zero(n);
    for (int k = nx + nu; k < n; ++k) q_out[k] = mu;
  };
  Eigen::SparseMatrix<double> P;
  Eigen::VectorXd q;
  build_cost(slack_penalty, P, q);

  // Reference violation measured the way the merit function sees it: the
  // inflated-constraint and terminal violation at the reference states plus
  // the L1 dynamics defect.
  auto eval_viol = [&](const std::vector<State>& xs, const std::vector<Control>& us) {
    double v = detail::total_violation(xs, regions, constraint, terminal);
    State prev = x_t;
    for (int k = 0; k < H; ++k) {
      const Control u = us[static_cast<std::size_t>(k)].cwiseMax(bounds.lo).cwiseMin(bounds.hi);
      v += (xs[static_cast<std::size_t>(k)] - dynamics::step(model, prev, u, dt))
               .lpNorm<1>();
      prev = xs[static_cast<std::size_t>(k)];
    }
    return v;
  };

  double trust = options.trust_init;
  double ref_cost = detail::control_cost(ref_u, cost);
  double ref_viol = eval_viol(ref_x, ref_u);
  double best_kkt = kInf;
  qp::Result last_qp;
  bool have_qp_warm = false;
  Eigen::VectorXd warm_x, warm_y;

  // Best dynamics-exact feasible trajectory seen so far; the returned plan.
  bool have_incumbent = detail::total_violation(ref_x, regions, constraint, terminal) <=
                            options.constraint_tol &&
                        ref_viol <= options.constraint_tol;
  std::vector<Control> inc_u = ref_u;
  std::vector<State> inc_x = ref_x;
  double inc_cost = have_incumbent ? ref_cost : kInf;
  double inc_kkt = kInf;

  int iter = 0;
  int stalled = 0;
  for (iter = 1; iter <= options.max_scp_iter; ++iter) {
    // Assemble the linearized QP around (ref_x, ref_u).
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>((24 + 3 * M) * H + 8));
    Eigen::VectorXd lo = Eigen::VectorXd::Constant(m, -kInf);
    Eigen::VectorXd hi = Eigen::VectorXd::Constant(m, kInf);

    int row = 0;
    Eigen::Matrix4d A;
    Eigen::Matrix<double, 4, 2> B;
    for (int k = 0; k < H; ++k) {  // dynamics rows for tau = t+k, with defects
      const State& xk = k == 0 ? x_t : ref_x[static_cast<std::size_t>(k - 1)];
      const Control uk =
          ref_u[static_cast<std::size_t>(k)].cwiseMax(bounds.lo).cwiseMin(bounds.hi);
      dynamics::linearize(model, xk, uk, dt, A, B);
      const State fk = dynamics::step(model, xk, uk, dt);
      Eigen::Vector4d rhs = fk - B * uk;
      if (k > 0) rhs -= A * xk;
      for (int r = 0; r < 4; ++r) {
        trip.emplace_back(row + r, xi(k) + r, 1.0);
        if (k > 0)
          for (int c = 0; c < 4; ++c)
            if (A(r, c) != 0.0) trip.emplace_back(row + r, xi(k - 1) + c, -A(r, c));
        for (int c = 0; c < 2; ++c)
          if (B(r, c) != 0.0) trip.emplace_back(row + r, ui(k) + c, -B(r, c));
        trip.emplace_back(row + r, vp0 + 4 * k + r, -1.0);
        trip.emplace_back(row + r, vn0 + 4 * k + r, 1.0);
        lo[row + r] = rhs[r];
        hi[row + r] = rhs[r];
      }
      row += 4;
    }

    for (int k = 0; k < H; ++k) {  // collision hyperplanes, one per obstacle
      const Eigen::Vector2d p_ref = ref_x[static_cast<std::size_t>(k)].head<2>();
      const double required =
          constraint.radius_sum + constraint.lipschitz * regions.radii[static_cast<std::size_t>(k)];
      for (int j = 0; j < M; ++j) {
        const Eigen::Vector2d obs =
            regions.centers[static_cast<std::size_t>(k)].segment<2>(2 * j);
        Eigen::Vector2d normal = p_ref - obs;
        const double dist = normal.norm();
        if (dist > 1e-9) {
          normal /= dist;
        } else {
          // Reference sits on the obstacle: push perpendicular to the motion.
          const Eigen::Vector2d prev =
              k > 0 ? Eigen::Vector2d(ref_x[static_cast<std::size_t>(k - 1)].head<2>())
                    : Eigen::Vector2d(x_t.head<2>());
          Eigen::Vector2d dir = p_ref - prev;
          dir = dir.norm() > 1e-9 ? Eigen::Vector2d(dir.normalized()) : Eigen::Vector2d(1.0, 0.0);
          normal = Eigen::Vector2d(-dir[1], dir[0]);
        }
        trip.emplace_back(row, xi(k), normal[0]);
        trip.emplace_back(row, xi(k) + 1, normal[1]);
        trip.emplace_back(row, si(k), 1.0);
        lo[row] = normal.dot(obs) + required;
        ++row;
      }
    }

    {  // terminal ball, linearized (outer approximation of a convex set)
      const Eigen::Vector2d p_ref = ref_x.back().head<2>();
      Eigen::Vector2d d = p_ref - terminal.target;
      const double dist = d.norm();
      d = dist > 1e-9 ? Eigen::Vector2d(d / dist) : Eigen::Vector2d(1.0, 0.0);
      trip.emplace_back(row, xi(H - 1), d[0]);
      trip.emplace_back(row, xi(H - 1) + 1, d[1]);
      trip.emplace_back(row, s_term, -1.0);
      hi[row] = d.dot(terminal.target) + terminal.tolerance;
      ++row;
    }

    for (int k = 0; k < H; ++k) {  // control box intersected with the trust region
      for (int c = 0; c < 2; ++c) {
        trip.emplace_back(row, ui(k) + c, 1.0);
        const double u_ref = ref_u[static_cast<std::size_t>(k)][c];
        lo[row] = std::max(bounds.lo[c], u_ref - trust);
        hi[row] = std::min(bounds.hi[c], u_ref + trust);
        ++row;
      }
    }

    for (int k = 0; k < H; ++k) {  // trust region on states
      for (int c = 0; c < 4; ++c) {
        trip.emplace_back(row, xi(k) + c, 1.0);
        lo[row] = ref_x[static_cast<std::size_t>(k)][c] - 4.0 * trust;
        hi[row] = ref_x[static_cast<std::size_t>(k)][c] + 4.0 * trust;
        ++row;
      }
    }

    for (int k = nx + nu; k < n; ++k) {  // slack and defect nonnegativity
      trip.emplace_back(row, k, 1.0);
      lo[row] = 0.0;
      ++row;
    }

    auto make_problem = [&]() {
      qp::Problem prob;
      prob.P = P;
      prob.q = q;
      prob.A.resize(m, n);
      prob.A.setFromTriplets(trip.begin(), trip.end());
      prob.lo = lo;
      prob.hi = hi;
      return prob;
    };

    qp::Solver qp_solver(make_problem(), options.qp);
    if (have_qp_warm) {
      qp_solver.warm_start(warm_x, warm_y);
    } else {
      // Start the splitting solver at the reference point itself.
      Eigen::VectorXd w0 = Eigen::VectorXd::Zero(n);
      for (int k = 0; k < H; ++k) {
        w0.segment<4>(xi(k)) = ref_x[static_cast<std::size_t>(k)];
        w0.segment<2>(ui(k)) = ref_u[static_cast<std::size_t>(k)];
      }
      for (int k = 0; k < H; ++k) {
        const double margin =
            constraint_margin(constraint, ref_x[static_cast<std::size_t>(k)].head<2>(),
                              regions.centers[static_cast<std::size_t>(k)]);
        w0[si(k)] = std::max(
            0.0, constraint.lipschitz * regions.radii[static_cast<std::size_t>(k)] - margin);
      }
      w0[s_term] = std::max(0.0, (ref_x.back().head<2>() - terminal.target).norm() -
                                     terminal.tolerance);
      qp_solver.warm_start(w0, Eigen::VectorXd::Zero(m));
    }
    last_qp = qp_solver.solve();
    if (!last_qp.polished && (last_qp.prim_res > 1e-6 || last_qp.dual_res > 1e-5)) {
      qp::Settings tight = options.qp;
      tight.eps_abs = std::max(options.qp.eps_abs * 1e-3, 1e-9);
      tight.eps_rel = std::max(options.qp.eps_rel * 1e-3, 1e-9);
      tight.max_iter = 4 * options.qp.max_iter;
      qp::Solver retry(make_problem(), tight);
      retry.warm_start(last_qp.x, last_qp.y);
      last_qp = retry.solve();
    }
    if (last_qp.status == qp::Status::kDiverged || !last_qp.x.allFinite())
      throw SolverDiverged("solve_lower_stage: QP diverged");
    warm_x = last_qp.x;
    warm_y = last_qp.y;
    have_qp_warm = true;

    // Exactness of the L1 penalty needs mu to dominate the constraint duals.
    const double dual_max =
        last_qp.y.head(4 * H + M * H + 1).lpNorm<Eigen::Infinity>();
    if (slack_penalty < 1.5 * dual_max && slack_penalty < 1e6) {
      slack_penalty = std::min(3.0 * dual_max, 1e6);
      build_cost(slack_penalty, P, q);
    }

    // Candidate: take the QP states and controls directly.
    std::vector<Control> cand_u(static_cast<std::size_t>(H));
    std::vector<State> cand_x(static_cast<std::size_t>(H));
    for (int k = 0; k < H; ++k) {
      cand_u[static_cast<std::size_t>(k)] =
          Control(last_qp.x.segment<2>(ui(k))).cwiseMax(bounds.lo).cwiseMin(bounds.hi);
      cand_x[static_cast<std::size_t>(k)] = last_qp.x.segment<4>(xi(k));
    }
    const double cand_cost = detail::control_cost(cand_u, cost);
    const double cand_viol = eval_viol(cand_x, cand_u);

    // Merit of reference and candidate, and the reduction the linearized
    // model predicts (the model is exact at the reference, so a vanishing
    // predicted reduction certifies approximate stationarity).
    const double merit_ref = ref_cost + slack_penalty * ref_viol;
    const double merit_cand = cand_cost + slack_penalty * cand_viol;
    double qp_u_cost = 0.0;
    for (int k = 0; k < H; ++k) {
      const Eigen::Vector2d uq = last_qp.x.segment<2>(ui(k));
      qp_u_cost += cost.control_weights[0] * uq[0] * uq[0] + cost.control_weights[1] * uq[1] * uq[1];
    }
    const Eigen::VectorXd qp_pen = last_qp.x.tail(ns + 2 * nv).cwiseMax(0.0);
    const double model_merit =
        qp_u_cost + slack_penalty * (qp_pen.sum() + qp_pen.squaredNorm());
    const double pred_reduction = merit_ref - model_merit;
    const double actual_reduction = merit_ref - merit_cand;

    double step = 0.0;
    for (int k = 0; k < H; ++k) {
      step = std::max(step, (cand_u[static_cast<std::size_t>(k)] -
                             ref_u[static_cast<std::size_t>(k)]).lpNorm<Eigen::Infinity>());
      step = std::max(step, (cand_x[static_cast<std::size_t>(k)] -
                             ref_x[static_cast<std::size_t>(k)]).lpNorm<Eigen::Infinity>() / 4.0);
    }

    // Any candidate whose *rolled* trajectory is feasible updates the
    // incumbent; the incumbent is what the caller receives.
    {
      const std::vector<State> rolled = detail::roll_states(model, x_t, cand_u, dt);
      const double rolled_viol = detail::total_violation(rolled, regions, constraint, terminal);
      if (rolled_viol <= options.constraint_tol && cand_cost < inc_cost) {
        have_incumbent = true;
        inc_u = cand_u;
        inc_x = rolled;
        inc_cost = cand_cost;
        inc_kkt = last_qp.dual_res;
      }
    }

    const bool accepted = actual_reduction >= 0.0 ||
                          (pred_reduction > 0.0 && actual_reduction >= 0.1 * pred_reduction);
    if (trace)
      trace->push_back({iter, cand_cost, cand_viol, trust, last_qp.iterations, accepted});

    if (accepted) {
      ref_u = std::move(cand_u);
      ref_x = std::move(cand_x);
      ref_cost = cand_cost;
      ref_viol = cand_viol;
      best_kkt = last_qp.dual_res;
      if (pred_reduction > 0.0 && actual_reduction >= 0.7 * pred_reduction)
        trust = std::min(trust * 1.6, options.trust_max);
      // Stationary only if the model has nothing to gain with an interior
      // step; a trust-limited step grows the region instead.
      if (ref_viol <= options.constraint_tol &&
          (pred_reduction <= options.cost_tol * std::max(1.0, std::abs(merit_ref)) ||
           step <= options.step_tol)) {
        if (step <= 0.7 * trust || trust >= options.trust_max) break;
        trust = std::min(trust * 1.6, options.trust_max);
      }
      stalled = 0;
    } else {
      trust *= 0.5;
      if (trust < options.trust_min) break;
      // Repeated rejections without measurable change mean the splitting
      // solver's resolution floor has been reached.
      if (ref_viol <= options.constraint_tol &&
          std::abs(actual_reduction) <= 1e-6 * std::max(1.0, std::abs(merit_ref)) &&
          ++stalled >= 3)
        break;
    }
  }

  EgoTrajectoryPlan plan;
  plan.start_time = t;
  if (have_incumbent) {
    plan.states = inc_x;
    plan.controls = inc_u;
    plan.cost = inc_cost;
    plan.kkt_residual = inc_kkt == kInf ? best_kkt : inc_kkt;
  } else {
    // Last resort: roll the reference controls and let the certificate decide.
    plan.controls = ref_u;
    for (Control& u : plan.controls) u = u.cwiseMax(bounds.lo).cwiseMin(bounds.hi);
    plan.states = detail::roll_states(model, x_t, plan.controls, dt);
    plan.cost = detail::control_cost(plan.controls, cost);
    plan.kkt_residual = best_kkt;
  }
  plan.solver_iterations = std::min(iter, options.max_scp_iter);

  // Independent feasibility certificate: re-evaluate every constraint on the
  // dynamics-exact returned trajectory.
  bool ok = true;
  for (int k = 0; k < H; ++k) {
    const Eigen::Vector2d p = plan.states[static_cast<std::size_t>(k)].head<2>();
    const double margin = constraint_margin(constraint, p, regions.centers[static_cast<std::size_t>(k)]);
    if (margin < constraint.lipschitz * regions.radii[static_cast<std::size_t>(k)] -
                     options.constraint_tol)
      ok = false;
  }
  if ((plan.states.back().head<2>() - terminal.target).norm() >
      terminal.tolerance + options.constraint_tol)
    ok = false;
  for (const Control& u : plan.controls)
    if ((u - u.cwiseMax(bounds.lo).cwiseMin(bounds.hi)).lpNorm<Eigen::Infinity>() > 0.0) ok = false;
  plan.feasible = ok;
  if (!ok) throw Infeasible("solve_lower_stage: no feasible plan within iteration budget");
  return plan;
}

/// Splits future times into active / inactive inflated constraints at a
/// feasible plan: tau is active iff margin - L*C_tau <= tol_act.
inline ActiveSetPartition identify_active_set(const EgoTrajectoryPlan& plan,
                                              const RegionRow& regions,
                                              const ConstraintSpec& constraint, double tol_act) {
  if (!plan.feasible) throw InvalidInput("identify_active_set: plan must be feasible");
  if (static_cast<int>(plan.states.size()) != regions.horizon_len())
    throw InvalidInput("identify_active_set: plan/regions length mismatch");
  ActiveSetPartition part;
  for (std::size_t k = 0; k < plan.states.size(); ++k) {
    const int tau = plan.start_time + 1 + static_cast<int>(k);
    const Eigen::Vector2d p = plan.states[k].head<2>();
    const double slack =
        constraint_margin(constraint, p, regions.centers[k]) - constraint.lipschitz * regions.radii[k];
    if (slack <= tol_act)
      part.active.push_back(tau);
    else
      part.inactive.push_back(tau);
  }
  part.n_active = static_cast<int>(part.active.size());
  return part;
}

}  // namespace fbcp::optimizer
