#pragma once

// Dense convex QP
//
//   min  1/2 x'Hx + f'x
//   s.t. Aeq x  = beq
//        Ain x <= bin
//        lb <= x <= ub
//
// solved by an ADMM operator splitting (OSQP style) with active-set polishing.

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace langmpc::qp {

struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd f;
  Eigen::MatrixXd Aeq;
  Eigen::VectorXd beq;
  Eigen::MatrixXd Ain;
  Eigen::VectorXd bin;
  Eigen::VectorXd lb;  // empty, or n entries (may be -inf)
  Eigen::VectorXd ub;  // empty, or n entries (may be +inf)

  int n() const { return static_cast<int>(f.size()); }
};

enum class QpStatus { Solved, MaxIter, Infeasible };

const char* to_string(QpStatus s);

struct QpSettings {
  double eps = 1e-8;        // primal and dual residual tolerance
  int max_iter = 5000;
  double sigma = 1e-6;
  double alpha = 1.6;
  double rho = 0.1;
  int adapt_every = 25;
  double eq_rho_scale = 1e3;
  double hessian_reg = 1e-8;
  double eps_infeasible = 1e-6;
  bool polish = true;
  double polish_tol = 1e-9;
};

/// Row activity codes carried between solves: -1 lower bound active,
/// +1 upper bound active, 0 inactive. Layout matches the internal row order
/// [equalities, inequalities, variable bounds].
using ActiveSet = std::vector<signed char>;

struct QpWarmStart {
  Eigen::VectorXd x;
  ActiveSet active;
};

struct QpSolution {
  QpStatus status = QpStatus::MaxIter;
  Eigen::VectorXd x;
  Eigen::VectorXd lambda;  // equality multipliers
  Eigen::VectorXd mu;      // inequality multipliers, >= 0
  Eigen::VectorXd nu;      // bound multipliers: > 0 upper bound active, < 0 lower
  int iterations = 0;
  bool polished = false;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  ActiveSet active;
};

/// Stationarity: Hx + f + Aeq'lambda + Ain'mu + nu.
Eigen::VectorXd kkt_stationarity(const QpProblem& p, const QpSolution& s);

QpSolution solve_qp(const QpProblem& p, const QpSettings& settings = {}, const QpWarmStart* warm = nullptr);

}  // namespace langmpc::qp
