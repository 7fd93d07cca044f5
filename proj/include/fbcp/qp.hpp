#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fbcp/errors.hpp"

// Dense-P / sparse-A operator-splitting (ADMM) solver for box-constrained QPs
//
//   min 1/2 x'Px + q'x   s.t.  lo <= Ax <= hi
//
// with Ruiz equilibration, over-relaxation, adaptive penalty, warm starting,
// and an active-set polish step. Sized for the small, highly sparse
// trajectory subproblems produced by the sequential-convexification solver.
namespace fbcp::qp {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct Problem {
  Eigen::SparseMatrix<double> P;   // n x n, symmetric PSD
  Eigen::VectorXd q;               // n
  Eigen::SparseMatrix<double> A;   // m x n
  Eigen::VectorXd lo;              // m, may contain -inf
  Eigen::VectorXd hi;              // m, may contain +inf
};

struct Settings {
  double rho = 0.1;
  double sigma = 1e-6;
  double alpha_relax = 1.6;
  int max_iter = 4000;
  int check_interval = 10;
  double eps_abs = 1e-7;
  double eps_rel = 1e-7;
  bool adaptive_rho = true;
  bool polish = true;
  double equality_rho_scale = 1e3;
};

enum class Status { kSolved, kMaxIter, kDiverged };

struct Result {
  Eigen::VectorXd x;
  Eigen::VectorXd z;
  Eigen::VectorXd y;  // duals for lo <= Ax <= hi
  Status status = Status::kMaxIter;
  int iterations = 0;
  double prim_res = kInf;
  double dual_res = kInf;
  bool polished = false;
};

class Solver {
 public:
  Solver(Problem problem, Settings settings = {})
      : prob_(std::move(problem)), settings_(settings) {
    n_ = static_cast<int>(prob_.P.rows());
    m_ = static_cast<int>(prob_.A.rows());
    if (prob_.q.size() != n_ || prob_.A.cols() != n_ || prob_.lo.size() != m_ ||
        prob_.hi.size() != m_)
      throw InvalidInput("qp: inconsistent problem dimensions");
    prob_.P.makeCompressed();
    prob_.A.makeCompressed();
    equilibrate();
    rho_vec_.resize(m_);
    set_rho(settings_.rho);
  }

  /// Optional warm start in *unscaled* coordinates.
  void warm_start(const Eigen::VectorXd& x0, const Eigen::VectorXd& y0) {
    if (x0.size() == n_) x_ = d_.cwiseInverse().cwiseProduct(x0);
    if (y0.size() == m_) y_ = cost_scale_ * e_.cwiseInverse().cwiseProduct(y0);
    if (x_.size() == n_ && y_.size() != m_) y_ = Eigen::VectorXd::Zero(m_);
    if (x_.size() == n_) z_ = As_ * x_;
  }

  Result solve() {
    if (x_.size() != n_) {
      x_ = Eigen::VectorXd::Zero(n_);
      y_ = Eigen::VectorXd::Zero(m_);
      z_ = Eigen::VectorXd::Zero(m_);
    }
    factorize();
    Result res;
    Eigen::VectorXd rhs(n_), ax(m_), ax_relaxed(m_), z_next(m_);
    int rho_updates = 0;
    for (int iter = 1; iter <= settings_.max_iter; ++iter) {
      rhs = settings_.sigma * x_ - qs_;
      rhs.noalias() += Ast_ * (rho_vec_.cwiseProduct(z_) - y_);
      x_ = kkt_.solve(rhs);
      ax.noalias() = As_ * x_;
      const double a = settings_.alpha_relax;
      ax_relaxed = a * ax + (1.0 - a) * z_;
      z_next = (ax_relaxed + y_.cwiseQuotient(rho_vec_)).cwiseMax(lo_s_).cwiseMin(hi_s_);
      y_ += rho_vec_.cwiseProduct(ax_relaxed - z_next);
      z_ = z_next;

      if (iter % settings_.check_interval == 0 || iter == settings_.max_iter) {
        if (!x_.allFinite()) {
          res.status = Status::kDiverged;
          res.iterations = iter;
          return finalize(res);
        }
        double eps_prim, eps_dual;
        compute_residuals(res.prim_res, res.dual_res, eps_prim, eps_dual);
        if (res.prim_res <= eps_prim && res.dual_res <= eps_dual) {
          res.status = Status::kSolved;
          res.iterations = iter;
          return finalize(res);
        }
        if (settings_.adaptive_rho && rho_updates < 40 && iter % (settings_.check_interval * 3) == 0) {
          const double ratio = std::sqrt((res.prim_res / std::max(eps_prim, 1e-30)) /
                                         std::max(res.dual_res / std::max(eps_dual, 1e-30), 1e-30));
          if (ratio > 5.0 || ratio < 0.2) {
            set_rho(std::clamp(rho_ * ratio, 1e-6, 1e6));
            factorize();
            ++rho_updates;
          }
        }
      }
    }
    res.status = Status::kMaxIter;
    res.iterations = settings_.max_iter;
    return finalize(res);
  }

 private:
  void equilibrate() {
    d_ = Eigen::VectorXd::Ones(n_);
    e_ = Eigen::VectorXd::Ones(m_);
    Ps_ = prob_.P;
    As_ = prob_.A;
    auto scale_of = [](double norm) {
      const double s = 1.0 / std::sqrt(std::max(norm, 1e-8));
      return std::clamp(s, 1e-4, 1e4);
    };
    Eigen::VectorXd dx(n_), de(m_);
    Eigen::VectorXd p_col(n_), a_col(n_), a_row(m_);
    for (int pass = 0; pass < 10; ++pass) {
      p_col.setZero();
      a_col.setZero();
      a_row.setZero();
      for (int k = 0; k < Ps_.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(Ps_, k); it; ++it)
          p_col[it.col()] = std::max(p_col[it.col()], std::abs(it.value()));
      for (int k = 0; k < As_.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(As_, k); it; ++it) {
          const double a = std::abs(it.value());
          a_col[it.col()] = std::max(a_col[it.col()], a);
          a_row[it.row()] = std::max(a_row[it.row()], a);
        }
      for (int j = 0; j < n_; ++j) dx[j] = scale_of(std::max(p_col[j], a_col[j]));
      for (int i = 0; i < m_; ++i) de[i] = scale_of(a_row[i]);
      Ps_ = dx.asDiagonal() * Ps_ * dx.asDiagonal();
      As_ = de.asDiagonal() * As_ * dx.asDiagonal();
      d_ = d_.cwiseProduct(dx);
      e_ = e_.cwiseProduct(de);
    }
    qs_ = d_.cwiseProduct(prob_.q);
    p_col.setZero();
    for (int k = 0; k < Ps_.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(Ps_, k); it; ++it)
        p_col[it.col()] = std::max(p_col[it.col()], std::abs(it.value()));
    double mean_col = n_ > 0 ? p_col.sum() / n_ : 0.0;
    cost_scale_ = 1.0 / std::max({mean_col, qs_.lpNorm<Eigen::Infinity>(), 1e-6});
    Ps_ *= cost_scale_;
    qs_ *= cost_scale_;
    As_.makeCompressed();
    Ast_ = As_.transpose();
    Ast_.makeCompressed();
    lo_s_.resize(m_);
    hi_s_.resize(m_);
    for (int i = 0; i < m_; ++i) {
      lo_s_[i] = std::isfinite(prob_.lo[i]) ? e_[i] * prob_.lo[i] : -kInf;
      hi_s_[i] = std::isfinite(prob_.hi[i]) ? e_[i] * prob_.hi[i] : kInf;
    }
  }

  void set_rho(double rho) {
    rho_ = rho;
    for (int i = 0; i < m_; ++i) {
      const bool eq = std::isfinite(prob_.lo[i]) && std::isfinite(prob_.hi[i]) &&
                      prob_.hi[i] - prob_.lo[i] < 1e-12;
      rho_vec_[i] = eq ? settings_.equality_rho_scale * rho : rho;
    }
  }

  void factorize() {
    Eigen::SparseMatrix<double> eye(n_, n_);
    eye.setIdentity();
    const Eigen::SparseMatrix<double> weighted = rho_vec_.asDiagonal() * As_;
    Eigen::SparseMatrix<double> kkt = Ps_ + settings_.sigma * eye;
    kkt = kkt + Eigen::SparseMatrix<double>(Ast_ * weighted);
    kkt.makeCompressed();
    kkt_.compute(kkt);
    if (kkt_.info() != Eigen::Success) throw SolverDiverged("qp: KKT factorization failed");
  }

  // Residuals in unscaled coordinates.
  void compute_residuals(double& prim, double& dual, double& eps_prim, double& eps_dual) const {
    Eigen::VectorXd x_u = d_.cwiseProduct(x_);
    Eigen::VectorXd z_u = e_.cwiseInverse().cwiseProduct(z_);
    Eigen::VectorXd y_u = e_.cwiseProduct(y_) / cost_scale_;
    Eigen::VectorXd ax = prob_.A * x_u;
    Eigen::VectorXd px = prob_.P * x_u;
    Eigen::VectorXd aty = prob_.A.transpose() * y_u;
    prim = m_ > 0 ? (ax - z_u).lpNorm<Eigen::Infinity>() : 0.0;
    dual = (px + prob_.q + aty).lpNorm<Eigen::Infinity>();
    eps_prim = settings_.eps_abs +
               settings_.eps_rel * std::max(m_ > 0 ? ax.lpNorm<Eigen::Infinity>() : 0.0,
                                            m_ > 0 ? z_u.lpNorm<Eigen::Infinity>() : 0.0);
    eps_dual = settings_.eps_abs +
               settings_.eps_rel * std::max({px.lpNorm<Eigen::Infinity>(),
                                             aty.lpNorm<Eigen::Infinity>(),
                                             prob_.q.lpNorm<Eigen::Infinity>()});
  }

  Result finalize(Result res) {
    res.x = d_.cwiseProduct(x_);
    res.z = e_.cwiseInverse().cwiseProduct(z_);
    res.y = e_.cwiseProduct(y_) / cost_scale_;
    if (res.status == Status::kSolved && settings_.polish) polish(res);
    double ep, ed;
    evaluate_unscaled(res, res.prim_res, res.dual_res, ep, ed);
    return res;
  }

  void evaluate_unscaled(const Result& res, double& prim, double& dual, double& eps_prim,
                         double& eps_dual) const {
    Eigen::VectorXd ax = prob_.A * res.x;
    double worst = 0.0;
    for (int i = 0; i < m_; ++i) {
      if (std::isfinite(prob_.hi[i])) worst = std::max(worst, ax[i] - prob_.hi[i]);
      if (std::isfinite(prob_.lo[i])) worst = std::max(worst, prob_.lo[i] - ax[i]);
    }
    prim = worst;
    dual = (prob_.P * res.x + prob_.q + prob_.A.transpose() * res.y).lpNorm<Eigen::Infinity>();
    eps_prim = settings_.eps_abs;
    eps_dual = settings_.eps_abs;
  }

  /// Solves the equality-constrained KKT system on the detected active set and
  /// keeps the refined point if it improves the worst residual.
  void polish(Result& res) {
    std::vector<int> act;
    std::vector<double> rhs_b;
    const double ytol = 1e-10;
    for (int i = 0; i < m_; ++i) {
      const bool eq = std::isfinite(prob_.lo[i]) && std::isfinite(prob_.hi[i]) &&
                      prob_.hi[i] - prob_.lo[i] < 1e-12;
      if (eq) {
        act.push_back(i);
        rhs_b.push_back(prob_.lo[i]);
      } else if (res.y[i] < -ytol && std::isfinite(prob_.lo[i])) {
        act.push_back(i);
        rhs_b.push_back(prob_.lo[i]);
      } else if (res.y[i] > ytol && std::isfinite(prob_.hi[i])) {
        act.push_back(i);
        rhs_b.push_back(prob_.hi[i]);
      }
    }
    const int k = static_cast<int>(act.size());
    // Quasi-definite KKT system, factorized sparsely.
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(prob_.P.nonZeros() + 2 * prob_.A.nonZeros() + n_ + k));
    for (int c = 0; c < prob_.P.outerSize(); ++c)
      for (Eigen::SparseMatrix<double>::InnerIterator it(prob_.P, c); it; ++it)
        trip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
    for (int j = 0; j < n_; ++j) trip.emplace_back(j, j, 1e-9);
    const Eigen::SparseMatrix<double, Eigen::RowMajor> a_rm(prob_.A);
    for (int r = 0; r < k; ++r) {
      const int row = act[static_cast<std::size_t>(r)];
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(a_rm, row); it; ++it) {
        trip.emplace_back(n_ + r, static_cast<int>(it.col()), it.value());
        trip.emplace_back(static_cast<int>(it.col()), n_ + r, it.value());
      }
      trip.emplace_back(n_ + r, n_ + r, -1e-9);
    }
    Eigen::SparseMatrix<double> kkt(n_ + k, n_ + k);
    kkt.setFromTriplets(trip.begin(), trip.end());
    Eigen::VectorXd rhs(n_ + k);
    rhs.head(n_) = -prob_.q;
    for (int r = 0; r < k; ++r) rhs[n_ + r] = rhs_b[static_cast<std::size_t>(r)];
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldl(kkt);
    if (ldl.info() != Eigen::Success) return;
    Eigen::VectorXd sol = ldl.solve(rhs);
    sol += ldl.solve(rhs - kkt * sol);  // one round of iterative refinement
    if (!sol.allFinite()) return;

    Result cand = res;
    cand.x = sol.head(n_);
    cand.y.setZero();
    for (int r = 0; r < k; ++r) cand.y[act[static_cast<std::size_t>(r)]] = sol[n_ + r];
    cand.z = prob_.A * cand.x;
    double p0, d0, p1, d1, ep, ed;
    evaluate_unscaled(res, p0, d0, ep, ed);
    evaluate_unscaled(cand, p1, d1, ep, ed);
    if (std::max(p1, d1) <= std::max(p0, d0)) {
      cand.polished = true;
      res = cand;
    }
  }

  Problem prob_;
  Settings settings_;
  int n_ = 0;
  int m_ = 0;

  // Scaled data.
  Eigen::SparseMatrix<double> Ps_;
  Eigen::SparseMatrix<double> As_, Ast_;
  Eigen::VectorXd qs_, lo_s_, hi_s_;
  Eigen::VectorXd d_, e_;
  double cost_scale_ = 1.0;

  double rho_ = 0.1;
  Eigen::VectorXd rho_vec_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> kkt_;
  Eigen::VectorXd x_, y_, z_;
};

inline Result solve(Problem problem, const Settings& settings = {}) {
  Solver solver(std::move(problem), settings);
  return solver.solve();
}

}  // namespace fbcp::qp
