#include <doctest.h>

#include <random>

#include "langmpc/qp.hpp"

using namespace langmpc::qp;

namespace {

struct Oracle {
  bool feasible = false;
  Eigen::VectorXd x;
  double obj = 0.0;
};

// Enumerates every subset of active inequalities, solves the equality system
// and keeps the feasible point with nonnegative multipliers and least cost.
Oracle brute_force(const QpProblem& p) {
  const int n = p.n(), me = static_cast<int>(p.beq.size()), mi = static_cast<int>(p.bin.size());
  Oracle best;
  for (int mask = 0; mask < (1 << mi); ++mask) {
    std::vector<int> act;
    for (int i = 0; i < mi; ++i)
      if (mask & (1 << i)) act.push_back(i);
    const int k = me + static_cast<int>(act.size());
    if (k > n) continue;
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + k, n + k);
    Eigen::VectorXd rhs(n + k);
    K.topLeftCorner(n, n) = p.H;
    rhs.head(n) = -p.f;
    for (int r = 0; r < me; ++r) {
      K.block(n + r, 0, 1, n) = p.Aeq.row(r);
      K.block(0, n + r, n, 1) = p.Aeq.row(r).transpose();
      rhs(n + r) = p.beq(r);
    }
    for (std::size_t r = 0; r < act.size(); ++r) {
      K.block(n + me + r, 0, 1, n) = p.Ain.row(act[r]);
      K.block(0, n + me + r, n, 1) = p.Ain.row(act[r]).transpose();
      rhs(n + me + r) = p.bin(act[r]);
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
    if (lu.rank() < n + k) continue;
    const Eigen::VectorXd sol = lu.solve(rhs);
    const Eigen::VectorXd x = sol.head(n);
    if (((p.Ain * x - p.bin).array() > 1e-9).any()) continue;
    if ((sol.tail(act.size()).array() < -1e-9).any()) continue;
    const double obj = 0.5 * x.dot(p.H * x) + p.f.dot(x);
    if (!best.feasible || obj < best.obj) best = {true, x, obj};
  }
  return best;
}

// Feasibility without regard to optimality: used to classify infeasible draws.
bool any_feasible(const QpProblem& p) {
  QpProblem q = p;
  q.H = Eigen::MatrixXd::Identity(p.n(), p.n());
  q.f.setZero();
  return brute_force(q).feasible;
}

}  // namespace

TEST_CASE("textbook bound") {
  QpProblem p;
  p.H = Eigen::MatrixXd::Identity(1, 1);
  p.f = Eigen::VectorXd::Zero(1);
  p.Ain = -Eigen::MatrixXd::Identity(1, 1);
  p.bin = -Eigen::VectorXd::Ones(1);
  const auto s = solve_qp(p);
  REQUIRE(s.status == QpStatus::Solved);
  CHECK(s.x(0) == doctest::Approx(1).epsilon(1e-9));
  CHECK(s.mu(0) == doctest::Approx(1).epsilon(1e-9));

  QpProblem b;
  b.H = Eigen::MatrixXd::Identity(1, 1);
  b.f = Eigen::VectorXd::Zero(1);
  b.lb = Eigen::VectorXd::Ones(1);
  b.ub = Eigen::VectorXd::Constant(1, 5.0);
  const auto t = solve_qp(b);
  REQUIRE(t.status == QpStatus::Solved);
  CHECK(t.x(0) == doctest::Approx(1));
  CHECK(t.nu(0) == doctest::Approx(-1));
  CHECK(kkt_stationarity(b, t).norm() < 1e-7);
}

TEST_CASE("random small QPs match active-set enumeration") {
  std::mt19937 rng(2024);
  std::uniform_real_distribution<double> U(-1, 1);
  std::uniform_int_distribution<int> dim(1, 3);
  int solved = 0, infeasible = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = dim(rng);
    const int m = std::uniform_int_distribution<int>(0, 3)(rng);
    const int me = (m > 0 && trial % 4 == 0) ? 1 : 0;
    QpProblem p;
    Eigen::MatrixXd L = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return U(rng); });
    p.H = L * L.transpose() + 0.1 * Eigen::MatrixXd::Identity(n, n);
    p.f = Eigen::VectorXd::NullaryExpr(n, [&] { return 2 * U(rng); });
    p.Aeq = Eigen::MatrixXd::NullaryExpr(me, n, [&] { return U(rng); });
    p.beq = Eigen::VectorXd::NullaryExpr(me, [&] { return U(rng); });
    p.Ain = Eigen::MatrixXd::NullaryExpr(m - me, n, [&] { return U(rng); });
    p.bin = Eigen::VectorXd::NullaryExpr(m - me, [&] { return U(rng); });
    CAPTURE(trial);
    const Oracle o = brute_force(p);
    const QpSolution s = solve_qp(p);
    if (o.feasible) {
      ++solved;
      REQUIRE(s.status == QpStatus::Solved);
      CHECK((s.x - o.x).lpNorm<Eigen::Infinity>() <= 1e-6);
      CHECK((s.mu.array() >= -1e-9).all());
      CHECK(kkt_stationarity(p, s).lpNorm<Eigen::Infinity>() <= 1e-6);
    } else if (!any_feasible(p)) {
      ++infeasible;
      CHECK(s.status == QpStatus::Infeasible);
    }
  }
  CHECK(solved > 400);
  MESSAGE("feasible: " << solved << ", infeasible: " << infeasible);
}

TEST_CASE("equality-only QP matches a direct KKT solve") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 6, me = 3;
    QpProblem p;
    Eigen::MatrixXd L = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return U(rng); });
    p.H = L * L.transpose() + Eigen::MatrixXd::Identity(n, n);
    p.f = Eigen::VectorXd::NullaryExpr(n, [&] { return U(rng); });
    p.Aeq = Eigen::MatrixXd::NullaryExpr(me, n, [&] { return U(rng); });
    p.beq = Eigen::VectorXd::NullaryExpr(me, [&] { return U(rng); });
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + me, n + me);
    K.topLeftCorner(n, n) = p.H;
    K.topRightCorner(n, me) = p.Aeq.transpose();
    K.bottomLeftCorner(me, n) = p.Aeq;
    Eigen::VectorXd rhs(n + me);
    rhs << -p.f, p.beq;
    const Eigen::VectorXd want = K.fullPivLu().solve(rhs);
    const auto s = solve_qp(p);
    REQUIRE(s.status == QpStatus::Solved);
    CHECK((s.x - want.head(n)).lpNorm<Eigen::Infinity>() <= 1e-9);
    CHECK((s.lambda - want.tail(me)).lpNorm<Eigen::Infinity>() <= 1e-9);
  }
}

TEST_CASE("warm active set short-circuits the iteration") {
  QpProblem p;
  p.H = Eigen::MatrixXd::Identity(2, 2);
  p.f = Eigen::Vector2d(-3, -3);
  p.lb = Eigen::Vector2d(-1, -1);
  p.ub = Eigen::Vector2d(1, 1);
  const auto cold = solve_qp(p);
  REQUIRE(cold.status == QpStatus::Solved);
  CHECK(cold.x(0) == doctest::Approx(1));
  QpWarmStart w{cold.x, cold.active};
  const auto hot = solve_qp(p, {}, &w);
  CHECK(hot.iterations == 0);
  CHECK((hot.x - cold.x).norm() < 1e-12);
}

TEST_CASE("iteration cap reports max_iter") {
  QpProblem p;
  p.H = Eigen::MatrixXd::Identity(2, 2);
  p.f = Eigen::Vector2d(-3, 1);
  p.Ain = Eigen::RowVector2d(1, 1);
  p.bin = Eigen::VectorXd::Constant(1, 0.5);
  QpSettings cfg;
  cfg.max_iter = 3;
  cfg.polish = false;
  CHECK(solve_qp(p, cfg).status == QpStatus::MaxIter);
}
