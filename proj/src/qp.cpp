#include "langmpc/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace langmpc::qp {

const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Solved: return "solved";
    case QpStatus::MaxIter: return "max_iter";
    case QpStatus::Infeasible: return "infeasible";
  }
  return "?";
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// All constraints as l <= C x <= u.
struct Stacked {
  Eigen::MatrixXd C;
  Eigen::VectorXd l, u;
  int m_eq = 0, m_in = 0;
  std::vector<int> bound_var;  // variable index for each bound row
  bool is_eq(int i) const { return i < m_eq; }
};

Stacked stack(const QpProblem& p) {
  const int n = p.n();
  Stacked s;
  s.m_eq = static_cast<int>(p.beq.size());
  s.m_in = static_cast<int>(p.bin.size());
  for (int j = 0; j < n; ++j) {
    const double lo = p.lb.size() ? p.lb(j) : -kInf;
    const double hi = p.ub.size() ? p.ub(j) : kInf;
    if (std::isfinite(lo) || std::isfinite(hi)) s.bound_var.push_back(j);
  }
  const int m = s.m_eq + s.m_in + static_cast<int>(s.bound_var.size());
  s.C.setZero(m, n);
  s.l.resize(m);
  s.u.resize(m);
  if (s.m_eq) {
    s.C.topRows(s.m_eq) = p.Aeq;
    s.l.head(s.m_eq) = p.beq;
    s.u.head(s.m_eq) = p.beq;
  }
  if (s.m_in) {
    s.C.middleRows(s.m_eq, s.m_in) = p.Ain;
    s.l.segment(s.m_eq, s.m_in).setConstant(-kInf);
    s.u.segment(s.m_eq, s.m_in) = p.bin;
  }
  for (std::size_t k = 0; k < s.bound_var.size(); ++k) {
    const int i = s.m_eq + s.m_in + static_cast<int>(k), j = s.bound_var[k];
    s.C(i, j) = 1.0;
    s.l(i) = p.lb.size() ? p.lb(j) : -kInf;
    s.u(i) = p.ub.size() ? p.ub(j) : kInf;
  }
  return s;
}

struct Polished {
  bool ok = false;
  Eigen::VectorXd x, y;
};

// Solves the equality-constrained QP given by an active-set guess and checks
// that the result is a KKT point of the full problem.
Polished polish(const Eigen::MatrixXd& H, const Eigen::VectorXd& f, const Stacked& s, const ActiveSet& act,
                double tol) {
  const int n = static_cast<int>(f.size()), m = static_cast<int>(s.l.size());
  std::vector<int> rows;
  for (int i = 0; i < m; ++i)
    if (s.is_eq(i) || act[i] != 0) rows.push_back(i);
  const int k = static_cast<int>(rows.size());

  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + k, n + k);
  Eigen::VectorXd rhs(n + k);
  K.topLeftCorner(n, n) = H;
  rhs.head(n) = -f;
  for (int r = 0; r < k; ++r) {
    const int i = rows[r];
    K.block(n + r, 0, 1, n) = s.C.row(i);
    K.block(0, n + r, n, 1) = s.C.row(i).transpose();
    rhs(n + r) = s.is_eq(i) ? s.u(i) : (act[i] > 0 ? s.u(i) : s.l(i));
    if (!std::isfinite(rhs(n + r))) return {};
  }
  constexpr double delta = 1e-9;
  Eigen::MatrixXd Kd = K;
  Kd.diagonal().head(n).array() += delta;
  Kd.diagonal().tail(k).array() -= delta;
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(Kd);
  Eigen::VectorXd sol = lu.solve(rhs);
  for (int it = 0; it < 25; ++it) {
    const Eigen::VectorXd res = rhs - K * sol;
    if (res.lpNorm<Eigen::Infinity>() < 1e-14) break;
    sol += lu.solve(res);
  }
  if (!sol.allFinite()) return {};

  Polished out;
  out.x = sol.head(n);
  out.y = Eigen::VectorXd::Zero(m);
  for (int r = 0; r < k; ++r) out.y(rows[r]) = sol(n + r);

  const Eigen::VectorXd cx = s.C * out.x;
  for (int i = 0; i < m; ++i) {
    const double lt = tol * std::max(1.0, std::isfinite(s.l(i)) ? std::fabs(s.l(i)) : 0.0);
    const double ut = tol * std::max(1.0, std::isfinite(s.u(i)) ? std::fabs(s.u(i)) : 0.0);
    if (cx(i) < s.l(i) - lt || cx(i) > s.u(i) + ut) return {};
    if (!s.is_eq(i)) {
      if (act[i] > 0 && out.y(i) < -tol) return {};
      if (act[i] < 0 && out.y(i) > tol) return {};
    }
  }
  const Eigen::VectorXd stat = H * out.x + f + s.C.transpose() * out.y;
  if (stat.lpNorm<Eigen::Infinity>() > tol * std::max(1.0, f.lpNorm<Eigen::Infinity>())) return {};
  out.ok = true;
  return out;
}

ActiveSet guess_active(const Stacked& s, const Eigen::VectorXd& z, const Eigen::VectorXd& y) {
  const int m = static_cast<int>(z.size());
  ActiveSet a(m, 0);
  for (int i = 0; i < m; ++i) {
    if (s.is_eq(i)) {
      a[i] = 1;
      continue;
    }
    if (std::isfinite(s.u(i)) && s.u(i) - z(i) < y(i)) a[i] = 1;
    else if (std::isfinite(s.l(i)) && z(i) - s.l(i) < -y(i)) a[i] = -1;
  }
  return a;
}

void fill_solution(QpSolution& out, const Stacked& s, const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                   const QpProblem& p) {
  out.x = x;
  out.lambda = y.head(s.m_eq);
  out.mu = y.segment(s.m_eq, s.m_in).cwiseMax(0.0);
  out.nu = Eigen::VectorXd::Zero(p.n());
  for (std::size_t k = 0; k < s.bound_var.size(); ++k) out.nu(s.bound_var[k]) = y(s.m_eq + s.m_in + k);
}

}  // namespace

Eigen::VectorXd kkt_stationarity(const QpProblem& p, const QpSolution& s) {
  Eigen::VectorXd r = p.H * s.x + p.f;
  if (p.beq.size()) r += p.Aeq.transpose() * s.lambda;
  if (p.bin.size()) r += p.Ain.transpose() * s.mu;
  if (s.nu.size()) r += s.nu;
  return r;
}

QpSolution solve_qp(const QpProblem& p, const QpSettings& cfg, const QpWarmStart* warm) {
  const int n = p.n();
  const Stacked s = stack(p);
  const int m = static_cast<int>(s.l.size());
  Eigen::MatrixXd H = p.H;
  H.diagonal().array() += cfg.hessian_reg;

  QpSolution out;
  auto finish_polished = [&](const Polished& pol, const ActiveSet& act, int iters) {
    out.status = QpStatus::Solved;
    out.polished = true;
    out.iterations = iters;
    out.active = act;
    fill_solution(out, s, pol.x, pol.y, p);
    out.primal_residual = 0.0;
    const Eigen::VectorXd cx = s.C * pol.x;
    for (int i = 0; i < m; ++i)
      out.primal_residual = std::max({out.primal_residual, cx(i) - s.u(i), s.l(i) - cx(i)});
    out.dual_residual = (p.H * pol.x + p.f + s.C.transpose() * pol.y).lpNorm<Eigen::Infinity>();
    return out;
  };

  ActiveSet tried;
  if (cfg.polish && warm && static_cast<int>(warm->active.size()) == m) {
    tried = warm->active;
    const Polished pol = polish(p.H, p.f, s, tried, cfg.polish_tol);
    if (pol.ok) return finish_polished(pol, tried, 0);
  }
  if (cfg.polish && m > 0) {
    ActiveSet none(m, 0);
    if (none != tried) {
      const Polished pol = polish(p.H, p.f, s, none, cfg.polish_tol);
      if (pol.ok) return finish_polished(pol, none, 0);
    }
  }

  Eigen::VectorXd x = Eigen::VectorXd::Zero(n), z = Eigen::VectorXd::Zero(m), y = Eigen::VectorXd::Zero(m);
  if (warm && warm->x.size() == n) x = warm->x;
  if (m > 0) z = (s.C * x).cwiseMax(s.l).cwiseMin(s.u);

  double rho = cfg.rho;
  Eigen::VectorXd rho_vec(m);
  Eigen::LLT<Eigen::MatrixXd> llt;
  auto factor = [&] {
    for (int i = 0; i < m; ++i) rho_vec(i) = s.is_eq(i) ? rho * cfg.eq_rho_scale : rho;
    Eigen::MatrixXd M = H;
    M.diagonal().array() += cfg.sigma;
    if (m) M.noalias() += s.C.transpose() * rho_vec.asDiagonal() * s.C;
    llt.compute(M);
  };
  factor();

  for (int k = 1; k <= cfg.max_iter; ++k) {
    const Eigen::VectorXd rhs = cfg.sigma * x - p.f + s.C.transpose() * (rho_vec.cwiseProduct(z) - y);
    const Eigen::VectorXd xt = llt.solve(rhs);
    const Eigen::VectorXd zt = s.C * xt;
    const Eigen::VectorXd x_new = cfg.alpha * xt + (1 - cfg.alpha) * x;
    const Eigen::VectorXd z_relax = cfg.alpha * zt + (1 - cfg.alpha) * z;
    const Eigen::VectorXd z_new = (z_relax + y.cwiseQuotient(rho_vec)).cwiseMax(s.l).cwiseMin(s.u);
    const Eigen::VectorXd y_new = y + rho_vec.cwiseProduct(z_relax - z_new);
    const Eigen::VectorXd dy = y_new - y;
    x = x_new;
    z = z_new;
    y = y_new;
    if (!x.allFinite() || !y.allFinite()) break;

    // Primal infeasibility certificate.
    const double dy_norm = m ? dy.lpNorm<Eigen::Infinity>() : 0.0;
    if (dy_norm > 1e-12) {
      const double eps = cfg.eps_infeasible * dy_norm;
      if ((s.C.transpose() * dy).lpNorm<Eigen::Infinity>() <= eps) {
        double support = 0.0;
        bool valid = true;
        for (int i = 0; i < m && valid; ++i) {
          if (dy(i) > eps) {
            if (!std::isfinite(s.u(i))) valid = false;
            else support += s.u(i) * dy(i);
          } else if (dy(i) < -eps) {
            if (!std::isfinite(s.l(i))) valid = false;
            else support += s.l(i) * dy(i);
          }
        }
        if (valid && support < -eps) {
          out.status = QpStatus::Infeasible;
          out.iterations = k;
          fill_solution(out, s, x, y, p);
          return out;
        }
      }
    }

    const Eigen::VectorXd cx = s.C * x;
    const Eigen::VectorXd hx = H * x;
    const Eigen::VectorXd cty = s.C.transpose() * y;
    const double r_prim = m ? (cx - z).lpNorm<Eigen::Infinity>() : 0.0;
    const double r_dual = (hx + p.f + cty).lpNorm<Eigen::Infinity>();
    const double prim_scale = m ? std::max(cx.lpNorm<Eigen::Infinity>(), z.lpNorm<Eigen::Infinity>()) : 0.0;
    const double dual_scale = std::max({hx.lpNorm<Eigen::Infinity>(), cty.lpNorm<Eigen::Infinity>(),
                                        p.f.lpNorm<Eigen::Infinity>()});
    const bool converged = r_prim <= cfg.eps * (1 + prim_scale) && r_dual <= cfg.eps * (1 + dual_scale);

    if (cfg.polish && (converged || k % 5 == 0)) {
      const ActiveSet guess = guess_active(s, z, y);
      if (guess != tried || converged) {
        tried = guess;
        const Polished pol = polish(p.H, p.f, s, guess, cfg.polish_tol);
        if (pol.ok) return finish_polished(pol, guess, k);
      }
    }
    if (converged) {
      out.status = QpStatus::Solved;
      out.iterations = k;
      out.primal_residual = r_prim;
      out.dual_residual = r_dual;
      out.active = guess_active(s, z, y);
      fill_solution(out, s, x, y, p);
      return out;
    }

    if (k % cfg.adapt_every == 0 && m > 0) {
      const double pr = r_prim / std::max(prim_scale, 1e-12);
      const double du = r_dual / std::max(dual_scale, 1e-12);
      const double r_new = std::clamp(rho * std::sqrt(pr / std::max(du, 1e-30)), 1e-6, 1e6);
      if (r_new > 5 * rho || r_new < rho / 5) {
        rho = r_new;
        factor();
      }
    }
    out.iterations = k;
  }
  out.status = QpStatus::MaxIter;
  out.active = m ? guess_active(s, z, y) : ActiveSet{};
  fill_solution(out, s, x, y, p);
  return out;
}

}  // namespace langmpc::qp
