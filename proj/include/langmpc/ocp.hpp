#pragma once

// Receding-horizon optimal control problem over the single-integrator gripper
// model x_{k+1} = x_k + dt * u_k, solved by SQP. States are eliminated, so the
// decision vector is U = [u_0, ..., u_{N-1}].

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "langmpc/autodiff.hpp"
#include "langmpc/expr.hpp"
#include "langmpc/qp.hpp"

namespace langmpc::ocp {

struct OptimizationSpec {
  expr::ExprPtr objective;
  std::vector<expr::ExprPtr> equalities;    // h(x, u) = 0
  std::vector<expr::ExprPtr> inequalities;  // g(x, u) <= 0
  std::string source_subtask;
};

struct OcpConfig {
  int horizon = 15;
  double dt = 0.1;
  double u_max_pos = 0.5;  // m/s
  double u_max_yaw = 1.0;  // rad/s
  double input_reg = 1e-3;
  double table_z = 0.0;
  double tol_stat = 1e-6;
  double tol_feas = 1e-6;
  int max_iter = 50;
  double elastic_weight = 1e4;
  int stall_iters = 5;
  bool shift_warm_start = true;
  qp::QpSettings qp;
};

enum class SolveStatus { Optimal, MaxIter, InfeasibleRelaxed, NumericFailure };

const char* to_string(SolveStatus s);

class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a solve needs; immutable once assembled.
struct OcpProblem {
  OcpConfig cfg;
  std::shared_ptr<const expr::SymbolTable> symbols;
  std::vector<double> frame;  // parameter frame matching `symbols`
  Eigen::VectorXd x0;         // stacked robot poses, yaw wrapped
  double t_now = 0.0;

  std::shared_ptr<const ad::CostModel> objective;
  std::vector<std::shared_ptr<const ad::Program>> equalities;
  std::vector<std::shared_ptr<const ad::Program>> inequalities;

  int robots() const { return symbols->robot_count(); }
  int nx() const { return expr::kPoseDim * robots(); }
  int nu() const { return nx(); }
  int horizon() const { return cfg.horizon; }
  int n_vars() const { return cfg.horizon * nu(); }

  /// Per-stage row counts. Input bounds count two rows per input component.
  int n_h_stage() const { return static_cast<int>(equalities.size()); }
  int n_g_stage() const { return static_cast<int>(inequalities.size()) + robots() + 2 * nu(); }
};

/// Compiles `spec` against `symbols` and snapshots the numeric inputs. Throws
/// expr::ExprError (UnknownSymbol, ShapeError) when the problem does not fit.
OcpProblem assemble(const OptimizationSpec& spec, std::shared_ptr<const expr::SymbolTable> symbols,
                    std::vector<double> frame, const Eigen::VectorXd& x0, double t_now, const OcpConfig& cfg = {});

struct OcpSolution {
  SolveStatus status = SolveStatus::MaxIter;
  Eigen::MatrixXd states;  // nx x (N+1); column 0 is x0, columns 1..N are x_1..x_N
  Eigen::MatrixXd inputs;  // nu x N; u_0..u_{N-1}
  double objective = 0.0;  // designer objective summed over stages (no regularisation)
  double total_cost = 0.0;
  double violation = 0.0;       // max over h, g and bounds
  double stationarity = 0.0;    // inf-norm of the Lagrangian gradient
  double complementarity = 0.0;
  double dynamics_residual = 0.0;
  int iterations = 0;
  bool elastic = false;
  double max_slack = 0.0;

  // Multipliers, stage-major: equalities (N x n_h), inequalities including the
  // table rows (N x (n_g_user + robots)), input bounds (signed, per variable).
  Eigen::VectorXd lambda, mu, nu;
  qp::ActiveSet qp_active;

  /// Merit value before and after every accepted line-search step (same
  /// penalty parameter on both sides).
  std::vector<std::pair<double, double>> merit_steps;

  Eigen::VectorXd first_input() const { return inputs.col(0); }
};

OcpSolution solve(const OcpProblem& p, const OcpSolution* warm = nullptr);

/// Forward substitution of the dynamics.
Eigen::MatrixXd rollout(const Eigen::VectorXd& x0, const Eigen::MatrixXd& inputs, double dt);

/// KKT quantities of `sol` re-evaluated from scratch; used by tests and the
/// acceptance checks.
struct KktReport {
  double stationarity = 0.0;
  double violation = 0.0;
  double complementarity = 0.0;
  double dynamics_residual = 0.0;
  double min_table_z = 0.0;
};
KktReport kkt_report(const OcpProblem& p, const OcpSolution& sol);

double wrap_angle(double a);

}  // namespace langmpc::ocp
