#include <doctest.h>

#include <numbers>

#include "langmpc/ocp.hpp"

using namespace langmpc;
using namespace langmpc::ocp;

namespace {

struct Setup {
  std::shared_ptr<expr::SymbolTable> st;
  std::vector<double> frame;

  explicit Setup(std::vector<std::string> robots = {""}) : st(std::make_shared<expr::SymbolTable>(robots)) {}
  void object(const std::string& name, Eigen::Vector4d pose, int held_by = -1) {
    st->add_object(name, held_by);
    frame.resize(st->frame_size());
    const int slot = st->find(name)->slot;
    for (int i = 0; i < 4; ++i) frame[slot + i] = pose(i);
  }
  void param(const std::string& name, double v) {
    st->add_param(name);
    frame.resize(st->frame_size());
    frame[st->find(name)->slot] = v;
  }
  OcpProblem problem(const std::string& obj, std::vector<std::string> eq, std::vector<std::string> in,
                     Eigen::VectorXd x0, OcpConfig cfg = {}) {
    frame.resize(st->frame_size());
    OptimizationSpec spec;
    spec.objective = expr::parse(obj);
    for (auto& s : eq) spec.equalities.push_back(expr::parse(s));
    for (auto& s : in) spec.inequalities.push_back(expr::parse(s));
    return assemble(spec, st, frame, x0, 0.0, cfg);
  }
};

void check_optimal(const OcpProblem& p, const OcpSolution& s) {
  REQUIRE(s.status == SolveStatus::Optimal);
  const KktReport k = kkt_report(p, s);
  CHECK(k.stationarity <= 1e-6);
  CHECK(k.violation <= 1e-6);
  CHECK(k.complementarity <= 1e-6);
  CHECK(k.dynamics_residual <= 1e-9);
  CHECK(k.min_table_z >= -1e-6);
}

}  // namespace

TEST_CASE("already at the goal") {
  Setup s;
  s.object("g", {0.4, 0.1, 0.2, 0});
  auto p = s.problem("ca.norm_2(x - g)**2", {}, {}, Eigen::Vector4d(0.4, 0.1, 0.2, 0));
  auto sol = solve(p);
  check_optimal(p, sol);
  CHECK(sol.inputs.lpNorm<Eigen::Infinity>() < 1e-9);
  CHECK(sol.objective < 1e-18);
}

TEST_CASE("saturated first input toward a distant goal") {
  Setup s;
  s.object("g", {0.9, -0.6, 0.3, 0.5});
  const Eigen::Vector4d x0(0.1, 0.2, 0.25, 0.0);
  auto p = s.problem("ca.norm_2(x - g)**2", {}, {}, x0);
  auto sol = solve(p);
  check_optimal(p, sol);
  const Eigen::Vector4d u0 = sol.first_input();
  CHECK(u0(0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(u0(1) == doctest::Approx(-0.5).epsilon(1e-6));
  CHECK(u0(3) == doctest::Approx(1.0).epsilon(1e-6));

  // The z component stays inside its bounds; compare it against the
  // unconstrained one-dimensional least-squares optimum.
  const int N = 15;
  const double dt = 0.1, reg = 1e-3;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(N, N);  // z_k - z_0 = A u
  for (int k = 0; k < N; ++k)
    for (int j = 0; j < k; ++j) A(k, j) = dt;
  const Eigen::VectorXd r = Eigen::VectorXd::Constant(N, 0.3 - 0.25);
  const Eigen::MatrixXd M = A.transpose() * A + reg * Eigen::MatrixXd::Identity(N, N);
  const Eigen::VectorXd uz = M.ldlt().solve(A.transpose() * r);
  REQUIRE(uz.cwiseAbs().maxCoeff() < 0.5);
  for (int k = 0; k < N; ++k) CHECK(sol.inputs(2, k) == doctest::Approx(uz(k)).epsilon(1e-6));
}

TEST_CASE("row counts") {
  Setup s;
  for (const char* c : {"cube_1", "cube_2", "cube_3"}) s.object(c, {0.3, 0, 0.025, 0});
  s.param("d", 0.05);
  s.param("d_min", 0.025);
  auto p = s.problem("ca.norm_2(diag(1,1,1,0)*(x - cube_1 + array([0,0,d,0])))**2", {},
                     {"d_min - ca.norm_2(x - cube_2)", "d_min - ca.norm_2(x - cube_3)"}, Eigen::Vector4d(0, 0, 0.2, 0));
  CHECK(p.n_g_stage() == 2 + 1 + 8);
  CHECK(p.n_h_stage() == 0);
  auto q = s.problem("ca.norm_2(x - cube_1)**2", {}, {}, Eigen::Vector4d(0, 0, 0.2, 0));
  CHECK(q.n_g_stage() == 1 + 8);
  CHECK_THROWS_AS(s.problem("ca.norm_2(x - sponge)**2", {}, {}, Eigen::Vector4d::Zero()), expr::UnknownSymbol);
}

TEST_CASE("table constraint holds when the goal is below the table") {
  Setup s;
  s.object("g", {0.3, 0, -0.2, 0});
  auto p = s.problem("ca.norm_2(x - g)**2", {}, {}, Eigen::Vector4d(0.3, 0, 0.05, 0));
  auto sol = solve(p);
  check_optimal(p, sol);
  CHECK(sol.states.row(2).minCoeff() >= -1e-6);
  CHECK(sol.mu.maxCoeff() > 0);
}

TEST_CASE("detour around a cube keeps the clearance") {
  Setup s;
  s.object("g", {0.5, 0.0, 0.025, 0});
  s.object("cube", {0.4, 0.0, 0.025, 0});
  s.param("d_min", 0.025);
  const Eigen::Vector4d x0(0.3, 0.0, 0.025, 0);
  OcpConfig cfg;
  auto free = solve(s.problem("ca.norm_2(x - g)**2", {}, {}, x0, cfg));
  // Start slightly off the symmetry line: exactly on it, the point in front of
  // the cube is a (saddle) KKT point that a local method cannot leave.
  auto p1 = s.problem("ca.norm_2(x - g)**2", {}, {"d_min - ca.norm_2(x - cube)"}, Eigen::Vector4d(0.3, 0.001, 0.025, 0), cfg);
  auto p2 = s.problem("ca.norm_2(x - g)**2", {}, {"d_min - ca.norm_2(x - cube)"}, Eigen::Vector4d(0.3, -0.004, 0.03, 0), cfg);
  for (auto* prob : {&p1, &p2}) {
    auto sol = solve(*prob);
    check_optimal(*prob, sol);
    const Eigen::Vector4d c(0.4, 0, 0.025, 0);
    for (int k = 0; k < sol.states.cols(); ++k) CHECK((sol.states.col(k) - c).norm() >= 0.025 - 1e-4);
    CHECK(sol.objective >= free.objective - 1e-9);

    // Oracle: the best single-waypoint detour, each leg traversed at the
    // largest admissible speed, found by grid search, bounds the optimum.
    double best = 1e9;
    for (double wy = -0.06; wy <= 0.06; wy += 0.0025)
      for (double wx = 0.32; wx <= 0.48; wx += 0.0025) {
        Eigen::MatrixXd U = Eigen::MatrixXd::Zero(4, 15);
        Eigen::Vector4d x = prob->x0;
        bool ok = true;
        double J = 0;
        bool reached = false;
        for (int k = 0; k < 15; ++k) {
          J += (x - Eigen::Vector4d(0.5, 0, 0.025, 0)).squaredNorm();
          const Eigen::Vector4d tgt = reached ? Eigen::Vector4d(0.5, 0, 0.025, 0) : Eigen::Vector4d(wx, wy, 0.025, 0);
          Eigen::Vector4d u = ((tgt - x) / 0.1).cwiseMax(-0.5).cwiseMin(0.5);
          u(3) = 0;
          x += 0.1 * u;
          if ((x - tgt).norm() < 1e-12) reached = true;
          if ((x - c).norm() < 0.025) ok = false;
          J += 1e-3 * u.squaredNorm();
        }
        if (ok) best = std::min(best, J);
      }
    CHECK(sol.total_cost <= best + 1e-9);
  }
}

TEST_CASE("warm start of an unchanged problem converges immediately") {
  Setup s;
  s.object("g", {0.5, 0.05, 0.025, 0});
  s.object("cube", {0.4, 0.0, 0.025, 0});
  s.param("d_min", 0.025);
  OcpConfig cfg;
  cfg.shift_warm_start = false;
  auto p = s.problem("ca.norm_2(x - g)**2", {}, {"d_min - ca.norm_2(x - cube)"}, Eigen::Vector4d(0.3, 0.0, 0.03, 0), cfg);
  auto cold = solve(p);
  check_optimal(p, cold);
  auto hot = solve(p, &cold);
  check_optimal(p, hot);
  CHECK(hot.iterations <= 2);
}

TEST_CASE("merit never increases on accepted steps") {
  Setup s;
  s.object("g", {0.5, 0.05, 0.1, 0});
  s.object("cube", {0.4, 0.02, 0.05, 0});
  s.param("d_min", 0.025);
  auto p = s.problem("ca.norm_2(x - g)**2 + (x[3] - 0.3)**2", {"x[3] - 0.1*x[0]"}, {"d_min - ca.norm_2(x - cube)"},
                     Eigen::Vector4d(0.3, 0.0, 0.03, 0));
  auto sol = solve(p);
  check_optimal(p, sol);
  REQUIRE(!sol.merit_steps.empty());
  for (auto [before, after] : sol.merit_steps) CHECK(after <= before);
}

TEST_CASE("dual-arm distance equality") {
  Setup s({"left", "right"});
  s.object("target", {0.4, 0.3, 0.2, 0});
  auto p = s.problem("ca.norm_2((x_left + x_right)/2 - target)**2",
                     {"ca.norm_2(x_left - x_right) - ca.norm_2(x_left_start - x_right_start)"}, {},
                     (Eigen::VectorXd(8) << 0.4, -0.1, 0.1, 0, 0.4, 0.1, 0.1, 0).finished());
  // bind the start poses to the initial state
  auto frame = p.frame;
  const int sl = s.st->find("x_left_start")->slot, sr = s.st->find("x_right_start")->slot;
  for (int i = 0; i < 4; ++i) {
    frame[sl + i] = p.x0(i);
    frame[sr + i] = p.x0(4 + i);
  }
  OptimizationSpec spec;
  spec.objective = expr::parse("ca.norm_2((x_left + x_right)/2 - target)**2");
  spec.equalities.push_back(expr::parse("ca.norm_2(x_left - x_right) - ca.norm_2(x_left_start - x_right_start)"));
  auto q = assemble(spec, s.st, frame, p.x0, 0.0);
  CHECK(q.nx() == 8);
  auto sol = solve(q);
  check_optimal(q, sol);
  for (int k = 1; k < sol.states.cols(); ++k) {
    const double dist = (sol.states.col(k).head(4) - sol.states.col(k).tail(4)).norm();
    CHECK(dist == doctest::Approx(0.2).epsilon(1e-6));
  }
}

TEST_CASE("contradictory constraints fall back to the relaxed problem") {
  Setup s;
  s.object("g", {0.5, 0.0, 0.1, 0});
  auto p = s.problem("ca.norm_2(x - g)**2", {}, {"x[0] - 0.2", "0.4 - x[0]"}, Eigen::Vector4d(0.3, 0, 0.1, 0));
  auto sol = solve(p);
  CHECK(sol.status == SolveStatus::InfeasibleRelaxed);
  CHECK(sol.elastic);
  CHECK(sol.max_slack > 1e-6);
}

TEST_CASE("yaw is wrapped before solving") {
  CHECK(wrap_angle(3 * std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(0.5) == 0.5);
  Setup s;
  s.object("g", {0.3, 0, 0.1, 0});
  auto p = s.problem("ca.norm_2(x - g)**2", {}, {}, Eigen::Vector4d(0.3, 0, 0.1, 7.0));
  CHECK(p.x0(3) == doctest::Approx(7.0 - 2 * std::numbers::pi));
}
