#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cstring>
#include <random>

#include "langmpc/autodiff.hpp"

using namespace langmpc;
using namespace langmpc::ad;

namespace {

expr::SymbolTable cube_table() {
  expr::SymbolTable st;
  for (const char* n : {"cube_1", "cube_2", "cube_3", "cube_4", "g", "plate"}) st.add_object(n);
  for (const char* n : {"d_min", "d", "radius"}) st.add_param(n);
  return st;
}

void bind4(EvalContext& c, const expr::SymbolTable& st, const char* name, std::array<double, 4> v) {
  c.bind(st, name, std::span<const double>(v.data(), 4));
}

}  // namespace

TEST_CASE("eval of the clearance constraint") {
  auto st = cube_table();
  EvalContext c(st);
  c.bind(st, "d_min", 0.025);
  bind4(c, st, "x", {0.3, 0, 0.2, 0});
  bind4(c, st, "cube_2", {0.3, 0, 0.1, 0});
  const auto v = eval(*expr::parse("d_min - ca.norm_2(x - cube_2)"), st, c);
  CHECK(v[0] == doctest::Approx(-0.075).epsilon(1e-12));
  CHECK(eval(*expr::parse("ca.norm_2(x - x)**2"), st, c)[0] == 0.0);
}

TEST_CASE("cost is zero on top of the target cube") {
  auto st = cube_table();
  EvalContext c(st);
  c.bind(st, "d", 0.05);
  bind4(c, st, "g", {0.4, 0.1, 0.025, 0.3});
  bind4(c, st, "x", {0.4, 0.1, -0.025, 0.9});
  const auto e = expr::parse("ca.norm_2(diag(1,1,1,0)*(x - g + array([0,0,d,0])))**2");
  CHECK(eval(*e, st, c)[0] == doctest::Approx(0.0));
}

TEST_CASE("domain errors carry the offending span") {
  auto st = cube_table();
  EvalContext c(st);
  CHECK_THROWS_AS(eval(*expr::parse("1 / d"), st, c), DomainError);
  CHECK_THROWS_AS(eval(*expr::parse("log(d)"), st, c), DomainError);
  c.bind(st, "d", -1.0);
  CHECK_THROWS_AS(eval(*expr::parse("sqrt(d)"), st, c), DomainError);
  try {
    eval(*expr::parse("x[0] + 1/d_min"), st, c);
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(e.span().begin == 7);
  }
}

TEST_CASE("gradients of norms") {
  auto st = cube_table();
  EvalContext c(st);
  bind4(c, st, "x", {1, 2, 3, 0.5});
  bind4(c, st, "g", {0, 1, 1, 0});
  auto sq = diff(*expr::parse("ca.norm_2(x - g)**2"), st, c);
  CHECK(sq.grad_x(0) == doctest::Approx(2));
  CHECK(sq.grad_x(1) == doctest::Approx(2));
  CHECK(sq.grad_x(2) == doctest::Approx(4));
  CHECK(sq.grad_x(3) == doctest::Approx(1));
  CHECK(sq.grad_u.norm() == 0.0);

  auto n = diff(*expr::parse("ca.norm_2(x - g)"), st, c);
  const Eigen::Vector4d r(1, 1, 2, 0.5);
  for (int i = 0; i < 4; ++i) CHECK(n.grad_x(i) == doctest::Approx(r(i) / r.norm()));
  CHECK_FALSE(n.kink);

  bind4(c, st, "x", {0, 1, 1, 0});
  auto k = diff(*expr::parse("ca.norm_2(x - g)"), st, c);
  CHECK(k.kink);
  CHECK(k.grad_x.norm() == 0.0);
}

TEST_CASE("Gauss-Newton blocks") {
  auto st = cube_table();
  EvalContext c(st);
  bind4(c, st, "x", {0.1, 0.2, 0.3, 0.4});
  auto gn = gauss_newton_block(*expr::parse("ca.norm_2(x - g)**2"), st, c);
  Eigen::MatrixXd want = Eigen::MatrixXd::Zero(8, 8);
  want.topLeftCorner(4, 4) = 2 * Eigen::Matrix4d::Identity();
  CHECK((gn.hessian - want).norm() < 1e-14);

  auto w = gauss_newton_block(*expr::parse("ca.norm_2(diag(1,1,1,0)*(x - g))**2"), st, c);
  want.setZero();
  want.diagonal().head(3).setConstant(2);
  CHECK((w.hessian - want).norm() < 1e-14);

  auto f = gauss_newton_block(*expr::parse("x[2]"), st, c);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(8);
  g(2) = 1;
  CHECK((f.grad - g).norm() == 0.0);
  CHECK((f.hessian - kFallbackCurvature * Eigen::MatrixXd::Identity(8, 8)).norm() < 1e-15);

  // sums of residual terms, scaled
  auto s = gauss_newton_block(*expr::parse("3*norm_2(x - g)**2 + (x[0] - 1)**2 / 2"), st, c);
  want.setZero();
  want.topLeftCorner(4, 4) = 6 * Eigen::Matrix4d::Identity();
  want(0, 0) += 1;
  CHECK((s.hessian - want).norm() < 1e-14);
}

TEST_CASE("held objects follow the holder's state") {
  expr::SymbolTable st({"left", "right"});
  st.add_object("pan", 1);
  EvalContext c(st);
  bind4(c, st, "pan", {0.0, 0.1, -0.05, 0});  // grasp offset
  bind4(c, st, "x_right", {0.5, 0.2, 0.3, 0});
  auto v = eval(*expr::parse("pan"), st, c);
  CHECK(v[1] == doctest::Approx(0.3));
  auto d = diff(*expr::parse("norm_2(pan - x_left)**2"), st, c);
  CHECK(d.grad_x.segment(4, 4).norm() > 0);
  CHECK((d.grad_x.segment(4, 4) + d.grad_x.segment(0, 4)).norm() < 1e-15);
}

TEST_CASE("gradients match central differences on random contexts") {
  auto st = cube_table();
  const char* exprs[] = {
      "ca.norm_2(x - cube_1)**2",
      "d_min - ca.norm_2(x - cube_2)",
      "ca.norm_2(x - plate + np.array([radius*np.cos(t), radius*np.sin(t), 0]))**2",
      "ca.norm_2(diag(1,1,1,0)*(x - g + array([0,0,d,0])))**2",
      "dot(u, x) + exp(x[0]/4) * sin(u[1]) - tan(x[3]/3)",
      "sqrt(x[0]**2 + 1) + abs(u[2] - 0.3) + log(2 + cos(x[1]))",
      "norm_2(x[2] - cube_1[2]) + norm_2(x[:2] - plate[:2])**3 / (1 + u[0]**2)",
      "-x[2]**2 + (x - g)[1] * 0.5 - 2**u[0]",
  };
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> U(-1, 1);
  for (const char* s : exprs) {
    CAPTURE(s);
    const auto e = expr::parse(s);
    const Program p = Program::compile(*e, st);
    EvalContext c(st);
    std::vector<double> g(8);
    for (int trial = 0; trial < 200; ++trial) {
      for (auto& v : c.frame) v = U(rng);
      for (auto& v : c.stage) v = U(rng);
      c.t = 3 * U(rng);
      p.gradient(c, g);
      for (int i = 0; i < 8; ++i) {
        EvalContext a = c, b = c;
        a.stage[i] += 1e-6;
        b.stage[i] -= 1e-6;
        const double fd = (p.eval_scalar(a) - p.eval_scalar(b)) / 2e-6;
        CHECK(std::fabs(fd - g[i]) <= 1e-5);
      }
    }
  }
}

TEST_CASE("Gauss-Newton Hessians are symmetric PSD") {
  auto st = cube_table();
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> U(-1, 1);
  const auto cm = CostModel::compile(
      *expr::parse("norm_2(x - cube_1 + [0, 0, 0.1])**2 + 2*(x[1]*u[0])**2 + norm_2(u)**2"), st);
  CHECK(cm.pure_residual());
  EvalContext c(st);
  for (int trial = 0; trial < 100; ++trial) {
    for (auto& v : c.frame) v = U(rng);
    for (auto& v : c.stage) v = U(rng);
    const auto b = cm.evaluate(c);
    CHECK((b.hessian - b.hessian.transpose()).norm() == 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b.hessian);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10);
  }
}

TEST_CASE("evaluation is bit-deterministic") {
  auto st = cube_table();
  EvalContext c(st);
  for (std::size_t i = 0; i < c.frame.size(); ++i) c.frame[i] = 0.1 * i + 0.3;
  for (std::size_t i = 0; i < c.stage.size(); ++i) c.stage[i] = 0.05 * i - 0.2;
  const auto p = Program::compile(*expr::parse("norm_2(x - plate + [radius*cos(t), radius*sin(t), 0])**2"), st);
  std::vector<double> g1(8), g2(8);
  const double v1 = p.gradient(c, g1), v2 = p.gradient(c, g2);
  CHECK(std::memcmp(&v1, &v2, sizeof v1) == 0);
  CHECK(g1 == g2);
}
