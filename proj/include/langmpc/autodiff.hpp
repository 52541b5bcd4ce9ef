#pragma once

// Numeric evaluation of designer expressions and their first derivatives with
// respect to one MPC stage's decision variables [x, u].

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "langmpc/expr.hpp"

namespace langmpc::ad {

class DomainError : public expr::ExprError {
 public:
  using ExprError::ExprError;
};

/// Numeric bindings for one stage. `frame` holds object poses, start poses and
/// scalar parameters at the slots assigned by the SymbolTable; `stage` holds the
/// stage variables [x..., u...].
struct EvalContext {
  std::vector<double> frame;
  std::vector<double> stage;
  double t = 0.0;

  EvalContext() = default;
  explicit EvalContext(const expr::SymbolTable& symbols);

  /// Binds a symbol by name. State/input names write into `stage`, "t" sets the
  /// time, everything else writes into `frame`.
  void bind(const expr::SymbolTable& symbols, std::string_view name, std::span<const double> values);
  void bind(const expr::SymbolTable& symbols, std::string_view name, double value) {
    bind(symbols, name, std::span<const double>(&value, 1));
  }
};

struct DiffResult {
  double value = 0.0;
  Eigen::VectorXd grad_x;
  Eigen::VectorXd grad_u;
  /// A nonsmooth point (norm of a zero vector, abs at 0) was hit; the
  /// derivative there is the zero subgradient.
  bool kink = false;
};

struct GaussNewtonBlock {
  double value = 0.0;
  Eigen::VectorXd grad;     // w.r.t. the full stage vector
  Eigen::MatrixXd hessian;  // symmetric PSD
  bool kink = false;
};

inline constexpr double kFallbackCurvature = 1e-3;

/// Flattened, symbol-resolved form of an expression. Immutable and shareable
/// between threads; evaluation uses thread-local scratch space.
class Program {
 public:
  static Program compile(const expr::Expr& e, const expr::SymbolTable& symbols, const expr::TypeOptions& opts = {});

  expr::Shape shape() const { return shape_; }
  int output_size() const { return nodes_.empty() ? 0 : nodes_.back().n; }
  int stage_dim() const { return stage_dim_; }

  void eval(const EvalContext& ctx, std::vector<double>& out) const;
  double eval_scalar(const EvalContext& ctx) const;

  /// Value and gradient of a scalar program; `grad` has stage_dim entries.
  double gradient(const EvalContext& ctx, std::span<double> grad, bool* kink = nullptr) const;

  /// Value and Jacobian (output_size x stage_dim) of a program.
  void jacobian(const EvalContext& ctx, std::vector<double>& value, Eigen::MatrixXd& jac, bool* kink = nullptr) const;

  enum class Op {
    Const, Frame, Var, Held, Time, Pad, Neg, Add, Sub, MulSV, MulVS, MulElem, Div, Pow, Index, Slice,
    Norm2, Dot, Cos, Sin, Tan, Exp, Log, Sqrt, Abs, Pack,
  };

  struct Node {
    Op op = Op::Const;
    int n = 1;    // output length
    int off = 0;  // offset of this node's output in the value buffer
    int a = -1, b = -1;
    int k = 0;         // Var/Held/Frame offset, Index position, Slice start, Held robot
    int k2 = 0;        // Held: frame slot
    double c = 0.0;    // Const value
    int args_begin = 0, args_count = 0;  // Pack
    expr::Span span;
  };

 private:
  int build(const expr::Expr& e, const expr::SymbolTable& symbols, const expr::ShapeInfo& info);
  int push(Node n);
  void forward(const EvalContext& ctx, std::vector<double>& val, bool* kink) const;
  void backward(const std::vector<double>& val, std::vector<double>& adj, std::span<double> grad) const;

  std::vector<Node> nodes_;
  std::vector<int> pack_args_;
  std::vector<double> vec_consts_;
  int buffer_size_ = 0;
  int stage_dim_ = 0;
  expr::Shape shape_;
};

/// Scalar cost compiled for Gauss-Newton curvature: the root is split into a
/// weighted sum of squared residuals (norm_2(r)**2, s**2) plus other terms.
class CostModel {
 public:
  static CostModel compile(const expr::Expr& e, const expr::SymbolTable& symbols, const expr::TypeOptions& opts = {});

  GaussNewtonBlock evaluate(const EvalContext& ctx) const;
  double value(const EvalContext& ctx) const { return whole_.eval_scalar(ctx); }
  const Program& program() const { return whole_; }
  /// True when every term has residual form, so no fallback curvature is used.
  bool pure_residual() const { return !has_other_; }

 private:
  struct Residual {
    double weight;
    Program r;
  };
  Program whole_;
  std::vector<Residual> residuals_;
  bool has_other_ = false;
};

// Convenience entry points that compile on every call.
std::vector<double> eval(const expr::Expr& e, const expr::SymbolTable& symbols, const EvalContext& ctx);
DiffResult diff(const expr::Expr& e, const expr::SymbolTable& symbols, const EvalContext& ctx);
GaussNewtonBlock gauss_newton_block(const expr::Expr& e, const expr::SymbolTable& symbols, const EvalContext& ctx);

}  // namespace langmpc::ad
