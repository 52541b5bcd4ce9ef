#include "langmpc/ocp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace langmpc::ocp {

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::MaxIter: return "max_iter";
    case SolveStatus::InfeasibleRelaxed: return "infeasible_relaxed";
    case SolveStatus::NumericFailure: return "numeric_failure";
  }
  return "?";
}

double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::remainder(a, 2 * pi);  // [-pi, pi]
  if (a <= -pi) a += 2 * pi;
  return a;
}

OcpProblem assemble(const OptimizationSpec& spec, std::shared_ptr<const expr::SymbolTable> symbols,
                    std::vector<double> frame, const Eigen::VectorXd& x0, double t_now, const OcpConfig& cfg) {
  if (cfg.horizon < 2 || !(cfg.dt > 0)) throw std::invalid_argument("horizon must be >= 2 and dt > 0");
  if (!spec.objective) throw std::invalid_argument("optimization spec has no objective");
  OcpProblem p;
  p.cfg = cfg;
  p.symbols = std::move(symbols);
  if (static_cast<int>(frame.size()) != p.symbols->frame_size())
    throw std::invalid_argument("parameter frame does not match the symbol table");
  p.frame = std::move(frame);
  if (x0.size() != p.nx() || !x0.allFinite()) throw std::invalid_argument("initial state must be finite with nx entries");
  p.x0 = x0;
  for (int r = 0; r < p.robots(); ++r) p.x0(4 * r + 3) = wrap_angle(p.x0(4 * r + 3));
  p.t_now = t_now;

  p.objective = std::make_shared<ad::CostModel>(ad::CostModel::compile(*spec.objective, *p.symbols));
  for (const auto& h : spec.equalities) {
    expr::typecheck_scalar(*h, *p.symbols);
    p.equalities.push_back(std::make_shared<ad::Program>(ad::Program::compile(*h, *p.symbols)));
  }
  for (const auto& g : spec.inequalities) {
    expr::typecheck_scalar(*g, *p.symbols);
    p.inequalities.push_back(std::make_shared<ad::Program>(ad::Program::compile(*g, *p.symbols)));
  }
  return p;
}

Eigen::MatrixXd rollout(const Eigen::VectorXd& x0, const Eigen::MatrixXd& inputs, double dt) {
  Eigen::MatrixXd X(x0.size(), inputs.cols() + 1);
  X.col(0) = x0;
  for (int k = 0; k < inputs.cols(); ++k) X.col(k + 1) = X.col(k) + dt * inputs.col(k);
  return X;
}

namespace {

struct Eval {
  double f = 0.0;    // total cost including regularisation
  double obj = 0.0;  // designer objective only
  Eigen::VectorXd h, g;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess, Jh, Jg;
  bool kink = false;

  double violation() const {
    double v = 0.0;
    if (h.size()) v = std::max(v, h.lpNorm<Eigen::Infinity>());
    if (g.size()) v = std::max(v, g.maxCoeff());
    return v;
  }
  double l1_violation() const { return h.lpNorm<1>() + g.cwiseMax(0.0).sum(); }
};

// Accumulates second-order blocks over (x_kx, u_ku) into the condensed
// Hessian in U. Since x_kx = x0 + dt * sum_{j<kx} u_j, the xx part of a block
// lands on every (j, l) pair with j, l < kx; it is collected as suffix sums.
struct StageHessian {
  int N, m;
  double dt;
  std::vector<Eigen::MatrixXd> xx;  // indexed by kx
  Eigen::MatrixXd H;

  StageHessian(int N_, int m_, double dt_)
      : N(N_), m(m_), dt(dt_), xx(N_ + 1, Eigen::MatrixXd::Zero(m_, m_)), H(Eigen::MatrixXd::Zero(N_ * m_, N_ * m_)) {}

  void add(int kx, int ku, const Eigen::MatrixXd& B, double w = 1.0) {
    xx[kx] += w * B.topLeftCorner(m, m);
    const Eigen::MatrixXd Bxu = w * dt * B.topRightCorner(m, m);
    for (int j = 0; j < kx; ++j) {
      H.block(j * m, ku * m, m, m) += Bxu;
      H.block(ku * m, j * m, m, m) += Bxu.transpose();
    }
    H.block(ku * m, ku * m, m, m) += w * B.bottomRightCorner(m, m);
  }

  Eigen::MatrixXd finish() {
    Eigen::MatrixXd suffix = Eigen::MatrixXd::Zero(m, m);
    std::vector<Eigen::MatrixXd> S(N + 1, suffix);
    for (int k = N; k >= 1; --k) {
      suffix += xx[k];
      S[k] = suffix;
    }
    for (int j = 0; j < N; ++j)
      for (int l = 0; l < N; ++l) H.block(j * m, l * m, m, m) += dt * dt * S[std::max(j, l) + 1];
    return std::move(H);
  }
};

class Evaluator {
 public:
  explicit Evaluator(const OcpProblem& p)
      : p_(p), N_(p.horizon()), m_(p.nx()), n_(p.n_vars()), ctx_(*p.symbols) {
    ctx_.frame = p.frame;
    n_gu_ = static_cast<int>(p.inequalities.size());
    n_h_ = static_cast<int>(p.equalities.size());
    rows_g_ = n_gu_ + p.robots();
  }

  int n_eq() const { return N_ * n_h_; }
  int n_in() const { return N_ * rows_g_; }

  void bounds(Eigen::VectorXd& lb, Eigen::VectorXd& ub) const {
    lb.resize(n_);
    ub.resize(n_);
    for (int k = 0; k < N_; ++k)
      for (int r = 0; r < p_.robots(); ++r)
        for (int c = 0; c < 4; ++c) {
          const double b = c == 3 ? p_.cfg.u_max_yaw : p_.cfg.u_max_pos;
          lb(k * m_ + 4 * r + c) = -b;
          ub(k * m_ + 4 * r + c) = b;
        }
  }

  Eigen::MatrixXd inputs(const Eigen::VectorXd& U) const {
    return Eigen::Map<const Eigen::MatrixXd>(U.data(), m_, N_);
  }

  // Values always; derivatives when `derivs`.
  Eval operator()(const Eigen::VectorXd& U, bool derivs) {
    Eval e;
    const double dt = p_.cfg.dt;
    const Eigen::MatrixXd X = rollout(p_.x0, inputs(U), dt);
    e.h.resize(n_eq());
    e.g.resize(n_in());
    if (derivs) {
      e.grad.setZero(n_);
      e.hess.setZero(n_, n_);
      e.Jh.setZero(n_eq(), n_);
      e.Jg.setZero(n_in(), n_);
    }

    auto load = [&](int kx, int ku, double t) {
      for (int i = 0; i < m_; ++i) {
        ctx_.stage[i] = X(i, kx);
        ctx_.stage[m_ + i] = U(ku * m_ + i);
      }
      ctx_.t = t;
    };

    // Cost over stages 0..N-1.
    StageHessian sh(N_, m_, dt);
    for (int k = 0; k < N_; ++k) {
      load(k, k, p_.t_now + k * dt);
      const auto u = U.segment(k * m_, m_);
      const double reg = p_.cfg.input_reg * u.squaredNorm();
      if (!derivs) {
        const double c = p_.objective->value(ctx_);
        e.obj += c;
        e.f += c + reg;
        continue;
      }
      const ad::GaussNewtonBlock b = p_.objective->evaluate(ctx_);
      e.kink |= b.kink;
      e.obj += b.value;
      e.f += b.value + reg;
      const auto gx = b.grad.head(m_), gu = b.grad.tail(m_);
      for (int j = 0; j < k; ++j) e.grad.segment(j * m_, m_) += dt * gx;
      e.grad.segment(k * m_, m_) += gu + 2 * p_.cfg.input_reg * u;
      sh.add(k, k, b.hessian);
      sh.H.block(k * m_, k * m_, m_, m_).diagonal().array() += 2 * p_.cfg.input_reg;
    }
    if (derivs) e.hess = sh.finish();

    // Constraints on stages 1..N at (x_k, u_{k-1}).
    std::vector<double> val;
    Eigen::MatrixXd J;
    for (int k = 1; k <= N_; ++k) {
      load(k, k - 1, p_.t_now + k * dt);
      auto put = [&](const ad::Program& prog, Eigen::VectorXd& vals, Eigen::MatrixXd& jac, int row) {
        if (derivs) {
          bool kink = false;
          prog.jacobian(ctx_, val, J, &kink);
          e.kink |= kink;
          vals(row) = val[0];
          for (int j = 0; j < k; ++j) jac.block(row, j * m_, 1, m_) += dt * J.block(0, 0, 1, m_);
          jac.block(row, (k - 1) * m_, 1, m_) += J.block(0, m_, 1, m_);
        } else {
          vals(row) = prog.eval_scalar(ctx_);
        }
      };
      for (int i = 0; i < n_h_; ++i) put(*p_.equalities[i], e.h, e.Jh, (k - 1) * n_h_ + i);
      for (int i = 0; i < n_gu_; ++i) put(*p_.inequalities[i], e.g, e.Jg, (k - 1) * rows_g_ + i);
      for (int r = 0; r < p_.robots(); ++r) {
        const int row = (k - 1) * rows_g_ + n_gu_ + r;
        e.g(row) = p_.cfg.table_z - X(4 * r + 2, k);
        if (derivs)
          for (int j = 0; j < k; ++j) e.Jg(row, j * m_ + 4 * r + 2) = -dt;
      }
    }
    return e;
  }

  // Sum of multiplier-weighted constraint Hessians in U, each stage block
  // obtained by central differences of the analytic gradient.
  Eigen::MatrixXd constraint_curvature(const Eigen::VectorXd& U, const Eigen::VectorXd& lam, const Eigen::VectorXd& mu) {
    const double dt = p_.cfg.dt;
    const Eigen::MatrixXd X = rollout(p_.x0, inputs(U), dt);
    StageHessian sh(N_, m_, dt);
    const int dim = 2 * m_;
    std::vector<double> gp(dim), gm(dim);
    Eigen::MatrixXd B(dim, dim);
    auto fd = [&](const ad::Program& prog) {
      constexpr double h = 1e-5;
      bool kink = false;
      prog.gradient(ctx_, gp, &kink);
      if (kink) return false;
      for (int j = 0; j < dim; ++j) {
        const double s0 = ctx_.stage[j];
        ctx_.stage[j] = s0 + h;
        prog.gradient(ctx_, gp);
        ctx_.stage[j] = s0 - h;
        prog.gradient(ctx_, gm);
        ctx_.stage[j] = s0;
        for (int i = 0; i < dim; ++i) B(i, j) = (gp[i] - gm[i]) / (2 * h);
      }
      B = 0.5 * (B + B.transpose()).eval();
      return B.allFinite();
    };
    for (int k = 1; k <= N_; ++k) {
      for (int i = 0; i < m_; ++i) {
        ctx_.stage[i] = X(i, k);
        ctx_.stage[m_ + i] = U((k - 1) * m_ + i);
      }
      ctx_.t = p_.t_now + k * dt;
      for (int i = 0; i < n_h_; ++i) {
        const double w = lam((k - 1) * n_h_ + i);
        if (w != 0.0 && fd(*p_.equalities[i])) sh.add(k, k - 1, B, w);
      }
      for (int i = 0; i < n_gu_; ++i) {
        const double w = mu((k - 1) * rows_g_ + i);
        if (w > 0.0 && fd(*p_.inequalities[i])) sh.add(k, k - 1, B, w);
      }
    }
    return sh.finish();
  }

 private:
  const OcpProblem& p_;
  int N_, m_, n_;
  int n_h_ = 0, n_gu_ = 0, rows_g_ = 0;
  ad::EvalContext ctx_;
};

bool finite(const Eval& e) {
  return std::isfinite(e.f) && e.h.allFinite() && e.g.allFinite() && e.grad.allFinite() && e.hess.allFinite() &&
         e.Jh.allFinite() && e.Jg.allFinite();
}

struct Kkt {
  double stat = 0.0, viol = 0.0, comp = 0.0;
};

Kkt kkt(const Eval& e, const Eigen::VectorXd& U, const Eigen::VectorXd& lb, const Eigen::VectorXd& ub,
        const Eigen::VectorXd& lam, const Eigen::VectorXd& mu, const Eigen::VectorXd& nu) {
  Kkt k;
  Eigen::VectorXd r = e.grad + nu;
  if (lam.size()) r += e.Jh.transpose() * lam;
  if (mu.size()) r += e.Jg.transpose() * mu;
  k.stat = r.lpNorm<Eigen::Infinity>();
  k.viol = e.violation();
  for (int i = 0; i < U.size(); ++i) k.viol = std::max({k.viol, U(i) - ub(i), lb(i) - U(i)});
  for (int i = 0; i < mu.size(); ++i) k.comp = std::max(k.comp, std::fabs(mu(i) * e.g(i)));
  for (int i = 0; i < nu.size(); ++i) {
    const double gap = nu(i) > 0 ? ub(i) - U(i) : U(i) - lb(i);
    k.comp = std::max(k.comp, std::fabs(nu(i)) * std::fabs(gap));
  }
  return k;
}

Eigen::VectorXd shift_stages(const Eigen::VectorXd& v, int N) {
  if (v.size() == 0) return v;
  const int per = static_cast<int>(v.size()) / N;
  Eigen::VectorXd out(v.size());
  for (int k = 0; k < N; ++k) out.segment(k * per, per) = v.segment(std::min(k + 1, N - 1) * per, per);
  return out;
}

// Makes the QP Hessian positive semidefinite when constraint curvature has
// pushed it indefinite.
Eigen::MatrixXd convexify(Eigen::MatrixXd B) {
  Eigen::LLT<Eigen::MatrixXd> llt(B);
  if (llt.info() == Eigen::Success) return B;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-8);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

qp::ActiveSet shift_active(const qp::ActiveSet& a, int N, int per_eq, int per_in, int per_bd) {
  qp::ActiveSet out(a.size(), 0);
  int base = 0;
  for (int per : {per_eq, per_in, per_bd}) {
    for (int k = 0; k < N; ++k)
      for (int i = 0; i < per; ++i) out[base + k * per + i] = a[base + std::min(k + 1, N - 1) * per + i];
    base += N * per;
  }
  return out;
}

}  // namespace

OcpSolution solve(const OcpProblem& p, const OcpSolution* warm) {
  const OcpConfig& cfg = p.cfg;
  const int N = p.horizon(), m = p.nu(), n = p.n_vars();
  Evaluator evaluate(p);
  Eigen::VectorXd lb, ub;
  evaluate.bounds(lb, ub);

  Eigen::VectorXd U = Eigen::VectorXd::Zero(n);
  qp::ActiveSet active;
  Eigen::VectorXd warm_lam, warm_mu;
  const int n_eq = evaluate.n_eq(), n_in = evaluate.n_in();
  const int qp_rows = n_eq + n_in + n;
  if (warm && warm->inputs.rows() == m && warm->inputs.cols() == N) {
    for (int k = 0; k < N; ++k) {
      const int src = cfg.shift_warm_start ? std::min(k + 1, N - 1) : k;
      U.segment(k * m, m) = warm->inputs.col(src);
    }
    U = U.cwiseMax(lb).cwiseMin(ub);
    if (static_cast<int>(warm->qp_active.size()) == qp_rows)
      active = cfg.shift_warm_start ? shift_active(warm->qp_active, N, n_eq / N, n_in / N, m) : warm->qp_active;
    if (warm->lambda.size() == n_eq && warm->mu.size() == n_in) {
      warm_lam = cfg.shift_warm_start ? shift_stages(warm->lambda, N) : warm->lambda;
      warm_mu = cfg.shift_warm_start ? shift_stages(warm->mu, N) : warm->mu;
    }
  }

  OcpSolution sol;
  Eigen::VectorXd lam = Eigen::VectorXd::Zero(n_eq), mu = Eigen::VectorXd::Zero(n_in), nu = Eigen::VectorXd::Zero(n);
  if (warm_lam.size()) lam = warm_lam;
  if (warm_mu.size()) mu = warm_mu;
  double rho = 1.0;
  bool elastic = false;
  double best_viol = std::numeric_limits<double>::infinity();
  int stall = 0;
  double damping = 0.0;
  double slack_max = 0.0;

  Eval cur = evaluate(U, true);
  if (!finite(cur)) throw NumericFailure("non-finite cost or constraint at the initial iterate");

  auto finish = [&](SolveStatus st, int iters) {
    sol.status = st;
    sol.iterations = iters;
    sol.inputs = evaluate.inputs(U);
    sol.states = rollout(p.x0, sol.inputs, cfg.dt);
    sol.objective = cur.obj;
    sol.total_cost = cur.f;
    const Kkt k = kkt(cur, U, lb, ub, lam, mu, nu);
    sol.violation = k.viol;
    sol.stationarity = k.stat;
    sol.complementarity = k.comp;
    sol.dynamics_residual = 0.0;
    for (int c = 0; c < N; ++c)
      sol.dynamics_residual = std::max(
          sol.dynamics_residual,
          (sol.states.col(c + 1) - sol.states.col(c) - cfg.dt * sol.inputs.col(c)).lpNorm<Eigen::Infinity>());
    sol.lambda = lam;
    sol.mu = mu;
    sol.nu = nu;
    sol.qp_active = active;
    sol.elastic = elastic;
    sol.max_slack = slack_max;
    return sol;
  };

  for (int it = 1; it <= cfg.max_iter; ++it) {
    // Build and solve the QP subproblem in the step d.
    qp::QpProblem q;
    qp::QpSolution qs;
    Eigen::VectorXd d;
    const int ns = elastic ? 2 * n_eq + n_in : 0;
    Eigen::MatrixXd B = cur.hess;
    if ((lam.size() && lam.lpNorm<Eigen::Infinity>() > 0) || (mu.size() && mu.maxCoeff() > 0))
      B = convexify(B + evaluate.constraint_curvature(U, lam, mu));
    if (damping > 0.0) B.diagonal().array() += damping;
    if (!elastic) {
      q.H = B;
      q.f = cur.grad;
      q.Aeq = cur.Jh;
      q.beq = -cur.h;
      q.Ain = cur.Jg;
      q.bin = -cur.g;
      q.lb = lb - U;
      q.ub = ub - U;
      qp::QpWarmStart ws{Eigen::VectorXd::Zero(n), active};
      qs = qp::solve_qp(q, cfg.qp, active.empty() ? nullptr : &ws);
      if (qs.status == qp::QpStatus::Infeasible) {
        elastic = true;
        rho = std::max(rho, cfg.elastic_weight);
        --it;
        continue;
      }
      active = qs.active;
      d = qs.x;
      lam = qs.lambda;
      mu = qs.mu;
      nu = qs.nu;
    } else {
      // Slack columns: equality rows get s+ and s-, inequality rows one s.
      const int nv = n + ns;
      q.H = Eigen::MatrixXd::Zero(nv, nv);
      q.H.topLeftCorner(n, n) = B;
      q.f = Eigen::VectorXd::Constant(nv, cfg.elastic_weight);
      q.f.head(n) = cur.grad;
      q.Aeq = Eigen::MatrixXd::Zero(n_eq, nv);
      q.Aeq.leftCols(n) = cur.Jh;
      for (int i = 0; i < n_eq; ++i) {
        q.Aeq(i, n + 2 * i) = -1.0;
        q.Aeq(i, n + 2 * i + 1) = 1.0;
      }
      q.beq = -cur.h;
      q.Ain = Eigen::MatrixXd::Zero(n_in, nv);
      q.Ain.leftCols(n) = cur.Jg;
      for (int i = 0; i < n_in; ++i) q.Ain(i, n + 2 * n_eq + i) = -1.0;
      q.bin = -cur.g;
      q.lb = Eigen::VectorXd::Zero(nv);
      q.lb.head(n) = lb - U;
      q.ub = Eigen::VectorXd::Constant(nv, std::numeric_limits<double>::infinity());
      q.ub.head(n) = ub - U;
      qs = qp::solve_qp(q, cfg.qp);
      if (qs.status == qp::QpStatus::Infeasible) return finish(SolveStatus::NumericFailure, it);
      d = qs.x.head(n);
      slack_max = ns ? qs.x.tail(ns).maxCoeff() : 0.0;
      lam = qs.lambda;
      mu = qs.mu;
      nu = qs.nu.head(n);
    }
    if (!d.allFinite()) throw NumericFailure("non-finite QP step");

    // Convergence is judged at the current iterate with the fresh multipliers.
    const Kkt k = kkt(cur, U, lb, ub, lam, mu, nu);
    if (k.stat <= cfg.tol_stat && k.comp <= cfg.tol_stat) {
      if (k.viol <= cfg.tol_feas) return finish(SolveStatus::Optimal, it);
      if (elastic && d.lpNorm<Eigen::Infinity>() <= 1e-9) return finish(SolveStatus::InfeasibleRelaxed, it);
    }

    // Penalty parameter never decreases.
    double ymax = 0.0;
    if (lam.size()) ymax = std::max(ymax, lam.lpNorm<Eigen::Infinity>());
    if (mu.size()) ymax = std::max(ymax, mu.lpNorm<Eigen::Infinity>());
    rho = std::max(rho, 1.1 * ymax + 1.0);

    const double phi0 = cur.f + rho * cur.l1_violation();
    const double D = cur.grad.dot(d) - rho * cur.l1_violation();
    double alpha = 1.0;
    bool accepted = false;
    Eigen::VectorXd U_try;
    int kink_retries = 0;
    bool soc_tried = false;
    for (int ls = 0; ls < 60 && alpha > 1e-12; ++ls) {
      U_try = (U + alpha * d).cwiseMax(lb).cwiseMin(ub);
      Eval trial;
      try {
        trial = evaluate(U_try, false);
      } catch (const ad::DomainError&) {
        alpha *= 0.5;
        continue;
      }
      if (!std::isfinite(trial.f) || !trial.h.allFinite() || !trial.g.allFinite()) {
        alpha *= 0.5;
        continue;
      }
      const double phi = trial.f + rho * trial.l1_violation();
      if (phi <= phi0 + 1e-4 * alpha * std::min(D, 0.0) && phi <= phi0) {
        Eval full = evaluate(U_try, true);
        if (full.kink && kink_retries < 3) {
          // Never stop exactly on a nondifferentiable point.
          ++kink_retries;
          alpha *= 1.0 - 1e-6;
          continue;
        }
        if (!finite(full)) throw NumericFailure("non-finite derivatives after a step");
        sol.merit_steps.emplace_back(phi0, full.f + rho * full.l1_violation());
        cur = std::move(full);
        accepted = true;
        break;
      }
      if (ls == 0 && !elastic && !soc_tried) {
        // Second-order correction: re-solve with the constraint values seen at
        // the trial point so the step follows curved constraint boundaries.
        soc_tried = true;
        qp::QpProblem qc = q;
        qc.beq = -(trial.h - cur.Jh * d);
        qc.bin = -(trial.g - cur.Jg * d);
        qp::QpWarmStart ws{d, active};
        const qp::QpSolution qsc = qp::solve_qp(qc, cfg.qp, &ws);
        if (qsc.status == qp::QpStatus::Solved && qsc.x.allFinite()) {
          const Eigen::VectorXd U_soc = (U + qsc.x).cwiseMax(lb).cwiseMin(ub);
          try {
            Eval full = evaluate(U_soc, true);
            const double phi_soc = full.f + rho * full.l1_violation();
            if (finite(full) && !full.kink && phi_soc <= phi0 + 1e-4 * std::min(D, 0.0)) {
              sol.merit_steps.emplace_back(phi0, phi_soc);
              cur = std::move(full);
              U_try = U_soc;
              accepted = true;
              break;
            }
          } catch (const ad::DomainError&) {
          }
        }
      }
      alpha *= 0.5;
    }
    if (!accepted) return finish(elastic ? SolveStatus::InfeasibleRelaxed : SolveStatus::MaxIter, it);
    U = U_try;
    // Levenberg damping: grows while steps get cut back, fades on full steps.
    damping = alpha < 0.5 ? std::max(10.0 * damping, 1e-5) : (damping < 1e-9 ? 0.0 : 0.1 * damping);

    if (!elastic) {
      const double v = cur.violation();
      if (v > cfg.tol_feas && v >= 0.999 * best_viol) {
        if (++stall >= cfg.stall_iters) {
          elastic = true;
          rho = std::max(rho, cfg.elastic_weight);
        }
      } else {
        stall = 0;
      }
      best_viol = std::min(best_viol, v);
    }
  }
  // Final KKT numbers at the last iterate, multipliers from the last QP.
  return finish(elastic ? SolveStatus::InfeasibleRelaxed : SolveStatus::MaxIter, cfg.max_iter);
}

KktReport kkt_report(const OcpProblem& p, const OcpSolution& sol) {
  Evaluator evaluate(p);
  Eigen::VectorXd lb, ub;
  evaluate.bounds(lb, ub);
  const Eigen::VectorXd U = Eigen::Map<const Eigen::VectorXd>(sol.inputs.data(), sol.inputs.size());
  const Eval e = evaluate(U, true);
  const Kkt k = kkt(e, U, lb, ub, sol.lambda, sol.mu, sol.nu);
  KktReport r;
  r.stationarity = k.stat;
  r.violation = k.viol;
  r.complementarity = k.comp;
  const Eigen::MatrixXd X = rollout(p.x0, sol.inputs, p.cfg.dt);
  r.dynamics_residual = 0.0;
  for (int c = 0; c < sol.inputs.cols(); ++c)
    r.dynamics_residual = std::max(r.dynamics_residual,
                                   (sol.states.col(c + 1) - X.col(c) - p.cfg.dt * sol.inputs.col(c)).lpNorm<Eigen::Infinity>());
  r.min_table_z = std::numeric_limits<double>::infinity();
  for (int c = 1; c < sol.states.cols(); ++c)
    for (int rb = 0; rb < p.robots(); ++rb) r.min_table_z = std::min(r.min_table_z, sol.states(4 * rb + 2, c));
  return r;
}

}  // namespace langmpc::ocp
