#include "langmpc/autodiff.hpp"

#include <cmath>

namespace langmpc::ad {

using expr::Expr;
using expr::Shape;
using expr::SymbolKind;
using expr::SymbolTable;

EvalContext::EvalContext(const SymbolTable& symbols)
    : frame(symbols.frame_size(), 0.0), stage(symbols.stage_dim(), 0.0) {}

void EvalContext::bind(const SymbolTable& symbols, std::string_view name, std::span<const double> values) {
  const expr::SymbolInfo* s = symbols.find(name);
  if (!s) throw std::invalid_argument("cannot bind unknown symbol '" + std::string(name) + "'");
  if (static_cast<int>(values.size()) != s->size)
    throw std::invalid_argument("binding for '" + std::string(name) + "' has " + std::to_string(values.size()) +
                                " values, expected " + std::to_string(s->size));
  switch (s->kind) {
    case SymbolKind::Time:
      t = values[0];
      return;
    case SymbolKind::State:
    case SymbolKind::Input: {
      if (stage.size() != static_cast<std::size_t>(symbols.stage_dim())) stage.assign(symbols.stage_dim(), 0.0);
      const int off = s->kind == SymbolKind::State ? symbols.state_offset(s->robot) : symbols.input_offset(s->robot);
      std::copy(values.begin(), values.end(), stage.begin() + off);
      return;
    }
    default:
      if (frame.size() != static_cast<std::size_t>(symbols.frame_size())) frame.assign(symbols.frame_size(), 0.0);
      std::copy(values.begin(), values.end(), frame.begin() + s->slot);
      return;
  }
}

// ---------------------------------------------------------------------------

int Program::push(Node n) {
  n.off = buffer_size_;
  buffer_size_ += n.n;
  nodes_.push_back(n);
  return static_cast<int>(nodes_.size()) - 1;
}

namespace {
Program::Op unary_op(expr::Builtin fn) {
  switch (fn) {
    case expr::Builtin::Cos: return Program::Op::Cos;
    case expr::Builtin::Sin: return Program::Op::Sin;
    case expr::Builtin::Tan: return Program::Op::Tan;
    case expr::Builtin::Exp: return Program::Op::Exp;
    case expr::Builtin::Log: return Program::Op::Log;
    case expr::Builtin::Sqrt: return Program::Op::Sqrt;
    default: return Program::Op::Abs;
  }
}
}  // namespace

int Program::build(const Expr& e, const SymbolTable& symbols, const expr::ShapeInfo& info) {
  using K = Expr::Kind;
  const Shape shape = info.nodes.at(&e);
  const int n = shape.n;
  Node node;
  node.n = n;
  node.span = e.span;

  auto child = [&](int i) {
    int idx = build(*e.args[i], symbols, info);
    auto pad = info.padded.find(&e);
    if (pad != info.padded.end() && pad->second == i) {
      Node p;
      p.op = Op::Pad;
      p.n = expr::kPoseDim;
      p.a = idx;
      p.span = e.args[i]->span;
      idx = push(p);
    }
    return idx;
  };

  switch (e.kind) {
    case K::Const:
      node.op = Op::Const;
      node.c = e.value;
      node.k = -1;
      return push(node);
    case K::VecConst:
      node.op = Op::Const;
      node.k = static_cast<int>(vec_consts_.size());
      vec_consts_.insert(vec_consts_.end(), e.values.begin(), e.values.end());
      return push(node);
    case K::Sym: {
      const expr::SymbolInfo* s = symbols.find(e.name);
      switch (s->kind) {
        case SymbolKind::Time:
          node.op = Op::Time;
          break;
        case SymbolKind::State:
          node.op = Op::Var;
          node.k = symbols.state_offset(s->robot);
          break;
        case SymbolKind::Input:
          node.op = Op::Var;
          node.k = symbols.input_offset(s->robot);
          break;
        case SymbolKind::Object:
          if (s->robot >= 0) {
            node.op = Op::Held;
            node.k = symbols.state_offset(s->robot);
            node.k2 = s->slot;
          } else {
            node.op = Op::Frame;
            node.k = s->slot;
          }
          break;
        default:
          node.op = Op::Frame;
          node.k = s->slot;
          break;
      }
      return push(node);
    }
    case K::Neg:
      node.op = Op::Neg;
      node.a = child(0);
      return push(node);
    case K::Add:
    case K::Sub:
      node.op = e.kind == K::Add ? Op::Add : Op::Sub;
      node.a = child(0);
      node.b = child(1);
      return push(node);
    case K::Mul: {
      node.a = child(0);
      node.b = child(1);
      const Shape sa = info.nodes.at(e.args[0].get()), sb = info.nodes.at(e.args[1].get());
      if (sa.is_scalar() && !sb.is_scalar()) node.op = Op::MulSV;
      else if (sb.is_scalar() && !sa.is_scalar()) node.op = Op::MulVS;
      else node.op = Op::MulElem;
      return push(node);
    }
    case K::Div:
      node.op = Op::Div;
      node.a = child(0);
      node.b = child(1);
      return push(node);
    case K::Pow:
      node.op = Op::Pow;
      node.a = child(0);
      node.b = child(1);
      return push(node);
    case K::Index: {
      node.op = Op::Index;
      node.a = child(0);
      const int len = nodes_[node.a].n;
      node.k = static_cast<int>(e.index < 0 ? e.index + len : e.index);
      return push(node);
    }
    case K::Slice: {
      node.op = Op::Slice;
      node.a = child(0);
      const int len = nodes_[node.a].n;
      long lo = e.lo.value_or(0);
      if (lo < 0) lo += len;
      node.k = static_cast<int>(lo);
      return push(node);
    }
    case K::Call: {
      switch (e.fn) {
        case expr::Builtin::Norm2:
          node.op = Op::Norm2;
          node.a = child(0);
          return push(node);
        case expr::Builtin::Dot:
          node.op = Op::Dot;
          node.a = child(0);
          node.b = child(1);
          return push(node);
        case expr::Builtin::Diag:
        case expr::Builtin::Array: {
          std::vector<int> idx;
          for (std::size_t i = 0; i < e.args.size(); ++i) idx.push_back(child(static_cast<int>(i)));
          node.op = Op::Pack;
          node.args_begin = static_cast<int>(pack_args_.size());
          node.args_count = static_cast<int>(idx.size());
          pack_args_.insert(pack_args_.end(), idx.begin(), idx.end());
          return push(node);
        }
        default:
          node.op = unary_op(e.fn);
          node.a = child(0);
          return push(node);
      }
    }
    case K::ArrayLit: {
      std::vector<int> idx;
      for (std::size_t i = 0; i < e.args.size(); ++i) idx.push_back(child(static_cast<int>(i)));
      node.op = Op::Pack;
      node.args_begin = static_cast<int>(pack_args_.size());
      node.args_count = static_cast<int>(idx.size());
      pack_args_.insert(pack_args_.end(), idx.begin(), idx.end());
      return push(node);
    }
  }
  throw std::logic_error("unhandled expression node");
}

Program Program::compile(const Expr& e, const SymbolTable& symbols, const expr::TypeOptions& opts) {
  const expr::ShapeInfo info = expr::typecheck(e, symbols, opts);
  Program p;
  p.stage_dim_ = symbols.stage_dim();
  p.shape_ = info.root;
  p.build(e, symbols, info);
  return p;
}

namespace {

thread_local std::vector<double> tl_val;
thread_local std::vector<double> tl_adj;

[[noreturn]] void domain(const std::string& msg, expr::Span s) { throw DomainError(msg, s); }

}  // namespace

void Program::forward(const EvalContext& ctx, std::vector<double>& val, bool* kink) const {
  val.resize(buffer_size_);
  double* v = val.data();
  for (const Node& nd : nodes_) {
    double* out = v + nd.off;
    const double* a = nd.a >= 0 ? v + nodes_[nd.a].off : nullptr;
    const double* b = nd.b >= 0 ? v + nodes_[nd.b].off : nullptr;
    const int n = nd.n;
    switch (nd.op) {
      case Op::Const:
        if (nd.k < 0) out[0] = nd.c;
        else for (int j = 0; j < n; ++j) out[j] = vec_consts_[nd.k + j];
        break;
      case Op::Frame:
        for (int j = 0; j < n; ++j) out[j] = ctx.frame[nd.k + j];
        break;
      case Op::Var:
        for (int j = 0; j < n; ++j) out[j] = ctx.stage[nd.k + j];
        break;
      case Op::Held:
        for (int j = 0; j < n; ++j) out[j] = ctx.stage[nd.k + j] + ctx.frame[nd.k2 + j];
        break;
      case Op::Time:
        out[0] = ctx.t;
        break;
      case Op::Pad:
        for (int j = 0; j < n; ++j) out[j] = j < nodes_[nd.a].n ? a[j] : 0.0;
        break;
      case Op::Neg:
        for (int j = 0; j < n; ++j) out[j] = -a[j];
        break;
      case Op::Add:
        for (int j = 0; j < n; ++j) out[j] = a[j] + b[j];
        break;
      case Op::Sub:
        for (int j = 0; j < n; ++j) out[j] = a[j] - b[j];
        break;
      case Op::MulSV:
        for (int j = 0; j < n; ++j) out[j] = a[0] * b[j];
        break;
      case Op::MulVS:
        for (int j = 0; j < n; ++j) out[j] = a[j] * b[0];
        break;
      case Op::MulElem:
        for (int j = 0; j < n; ++j) out[j] = a[j] * b[j];
        break;
      case Op::Div:
        if (b[0] == 0.0) domain("division by zero", nd.span);
        for (int j = 0; j < n; ++j) out[j] = a[j] / b[0];
        break;
      case Op::Pow: {
        const double p = b[0];
        for (int j = 0; j < n; ++j) {
          if (p == 2.0) {
            out[j] = a[j] * a[j];
            continue;
          }
          if (a[j] == 0.0 && p < 0.0) domain("zero raised to a negative power", nd.span);
          if (a[j] < 0.0 && p != std::floor(p)) domain("negative base with non-integer exponent", nd.span);
          out[j] = std::pow(a[j], p);
        }
        break;
      }
      case Op::Index:
        out[0] = a[nd.k];
        break;
      case Op::Slice:
        for (int j = 0; j < n; ++j) out[j] = a[nd.k + j];
        break;
      case Op::Norm2: {
        const int m = nodes_[nd.a].n;
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += a[j] * a[j];
        out[0] = std::sqrt(s);
        if (s == 0.0 && kink) *kink = true;
        break;
      }
      case Op::Dot: {
        const int m = nodes_[nd.a].n;
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += a[j] * b[j];
        out[0] = s;
        break;
      }
      case Op::Cos: for (int j = 0; j < n; ++j) out[j] = std::cos(a[j]); break;
      case Op::Sin: for (int j = 0; j < n; ++j) out[j] = std::sin(a[j]); break;
      case Op::Tan: for (int j = 0; j < n; ++j) out[j] = std::tan(a[j]); break;
      case Op::Exp: for (int j = 0; j < n; ++j) out[j] = std::exp(a[j]); break;
      case Op::Log:
        for (int j = 0; j < n; ++j) {
          if (a[j] <= 0.0) domain("log of a non-positive value", nd.span);
          out[j] = std::log(a[j]);
        }
        break;
      case Op::Sqrt:
        for (int j = 0; j < n; ++j) {
          if (a[j] < 0.0) domain("sqrt of a negative value", nd.span);
          out[j] = std::sqrt(a[j]);
          if (a[j] == 0.0 && kink) *kink = true;
        }
        break;
      case Op::Abs:
        for (int j = 0; j < n; ++j) {
          out[j] = std::fabs(a[j]);
          if (a[j] == 0.0 && kink) *kink = true;
        }
        break;
      case Op::Pack:
        for (int j = 0; j < nd.args_count; ++j) out[j] = v[nodes_[pack_args_[nd.args_begin + j]].off];
        break;
    }
  }
}

void Program::backward(const std::vector<double>& val, std::vector<double>& adj, std::span<double> grad) const {
  const double* v = val.data();
  double* ad = adj.data();
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    const Node& nd = nodes_[i];
    const double* g = ad + nd.off;
    const int n = nd.n;
    double* da = nd.a >= 0 ? ad + nodes_[nd.a].off : nullptr;
    double* db = nd.b >= 0 ? ad + nodes_[nd.b].off : nullptr;
    const double* a = nd.a >= 0 ? v + nodes_[nd.a].off : nullptr;
    const double* b = nd.b >= 0 ? v + nodes_[nd.b].off : nullptr;
    bool any = false;
    for (int j = 0; j < n; ++j) any |= g[j] != 0.0;
    if (!any) continue;
    switch (nd.op) {
      case Op::Const:
      case Op::Frame:
      case Op::Time:
        break;
      case Op::Var:
      case Op::Held:
        for (int j = 0; j < n; ++j) grad[nd.k + j] += g[j];
        break;
      case Op::Pad:
        for (int j = 0; j < nodes_[nd.a].n; ++j) da[j] += g[j];
        break;
      case Op::Neg:
        for (int j = 0; j < n; ++j) da[j] -= g[j];
        break;
      case Op::Add:
        for (int j = 0; j < n; ++j) {
          da[j] += g[j];
          db[j] += g[j];
        }
        break;
      case Op::Sub:
        for (int j = 0; j < n; ++j) {
          da[j] += g[j];
          db[j] -= g[j];
        }
        break;
      case Op::MulSV:
        for (int j = 0; j < n; ++j) {
          da[0] += g[j] * b[j];
          db[j] += g[j] * a[0];
        }
        break;
      case Op::MulVS:
        for (int j = 0; j < n; ++j) {
          da[j] += g[j] * b[0];
          db[0] += g[j] * a[j];
        }
        break;
      case Op::MulElem:
        for (int j = 0; j < n; ++j) {
          da[j] += g[j] * b[j];
          db[j] += g[j] * a[j];
        }
        break;
      case Op::Div:
        for (int j = 0; j < n; ++j) {
          da[j] += g[j] / b[0];
          db[0] -= g[j] * a[j] / (b[0] * b[0]);
        }
        break;
      case Op::Pow: {
        const double p = b[0];
        const double* out = v + nd.off;
        for (int j = 0; j < n; ++j) {
          if (p == 2.0) {
            da[j] += g[j] * 2.0 * a[j];
          } else if (p != 0.0) {
            da[j] += g[j] * p * (a[j] == 0.0 ? (p == 1.0 ? 1.0 : (p > 1.0 ? 0.0 : 0.0)) : out[j] / a[j]);
          }
          if (a[j] > 0.0) db[0] += g[j] * out[j] * std::log(a[j]);
        }
        break;
      }
      case Op::Index:
        da[nd.k] += g[0];
        break;
      case Op::Slice:
        for (int j = 0; j < n; ++j) da[nd.k + j] += g[j];
        break;
      case Op::Norm2: {
        const double r = v[nd.off];
        if (r > 0.0)
          for (int j = 0; j < nodes_[nd.a].n; ++j) da[j] += g[0] * a[j] / r;
        break;
      }
      case Op::Dot:
        for (int j = 0; j < nodes_[nd.a].n; ++j) {
          da[j] += g[0] * b[j];
          db[j] += g[0] * a[j];
        }
        break;
      case Op::Cos: for (int j = 0; j < n; ++j) da[j] -= g[j] * std::sin(a[j]); break;
      case Op::Sin: for (int j = 0; j < n; ++j) da[j] += g[j] * std::cos(a[j]); break;
      case Op::Tan:
        for (int j = 0; j < n; ++j) {
          const double c = std::cos(a[j]);
          da[j] += g[j] / (c * c);
        }
        break;
      case Op::Exp: for (int j = 0; j < n; ++j) da[j] += g[j] * v[nd.off + j]; break;
      case Op::Log: for (int j = 0; j < n; ++j) da[j] += g[j] / a[j]; break;
      case Op::Sqrt:
        for (int j = 0; j < n; ++j)
          if (a[j] > 0.0) da[j] += g[j] * 0.5 / v[nd.off + j];
        break;
      case Op::Abs:
        for (int j = 0; j < n; ++j) da[j] += g[j] * (a[j] > 0.0 ? 1.0 : a[j] < 0.0 ? -1.0 : 0.0);
        break;
      case Op::Pack:
        for (int j = 0; j < nd.args_count; ++j) ad[nodes_[pack_args_[nd.args_begin + j]].off] += g[j];
        break;
    }
  }
}

void Program::eval(const EvalContext& ctx, std::vector<double>& out) const {
  forward(ctx, tl_val, nullptr);
  const Node& root = nodes_.back();
  out.assign(tl_val.begin() + root.off, tl_val.begin() + root.off + root.n);
}

double Program::eval_scalar(const EvalContext& ctx) const {
  forward(ctx, tl_val, nullptr);
  return tl_val[nodes_.back().off];
}

double Program::gradient(const EvalContext& ctx, std::span<double> grad, bool* kink) const {
  forward(ctx, tl_val, kink);
  std::fill(grad.begin(), grad.end(), 0.0);
  tl_adj.assign(buffer_size_, 0.0);
  const Node& root = nodes_.back();
  tl_adj[root.off] = 1.0;
  backward(tl_val, tl_adj, grad);
  return tl_val[root.off];
}

void Program::jacobian(const EvalContext& ctx, std::vector<double>& value, Eigen::MatrixXd& jac, bool* kink) const {
  forward(ctx, tl_val, kink);
  const Node& root = nodes_.back();
  value.assign(tl_val.begin() + root.off, tl_val.begin() + root.off + root.n);
  jac.setZero(root.n, stage_dim_);
  std::vector<double> row(stage_dim_);
  for (int i = 0; i < root.n; ++i) {
    tl_adj.assign(buffer_size_, 0.0);
    tl_adj[root.off + i] = 1.0;
    std::fill(row.begin(), row.end(), 0.0);
    backward(tl_val, tl_adj, row);
    for (int j = 0; j < stage_dim_; ++j) jac(i, j) = row[j];
  }
}

// ---------------------------------------------------------------------------

namespace {

struct Term {
  double weight;
  const Expr* residual;  // nullptr: not a squared residual
};

bool constant_value(const Expr& e, double& out) {
  if (e.kind == Expr::Kind::Const) {
    out = e.value;
    return true;
  }
  if (e.kind == Expr::Kind::Neg && constant_value(*e.args[0], out)) {
    out = -out;
    return true;
  }
  return false;
}

void split_terms(const Expr& e, double w, std::vector<Term>& out) {
  using K = Expr::Kind;
  double c = 0.0;
  switch (e.kind) {
    case K::Add:
      split_terms(*e.args[0], w, out);
      split_terms(*e.args[1], w, out);
      return;
    case K::Sub:
      split_terms(*e.args[0], w, out);
      split_terms(*e.args[1], -w, out);
      return;
    case K::Neg:
      split_terms(*e.args[0], -w, out);
      return;
    case K::Mul:
      if (constant_value(*e.args[0], c)) return split_terms(*e.args[1], w * c, out);
      if (constant_value(*e.args[1], c)) return split_terms(*e.args[0], w * c, out);
      break;
    case K::Div:
      if (constant_value(*e.args[1], c) && c != 0.0) return split_terms(*e.args[0], w / c, out);
      break;
    case K::Pow:
      if (constant_value(*e.args[1], c) && c == 2.0) {
        const Expr& base = *e.args[0];
        if (base.kind == K::Call && base.fn == expr::Builtin::Norm2) {
          out.push_back({w, base.args[0].get()});
          return;
        }
        out.push_back({w, &base});  // scalar squared
        return;
      }
      break;
    case K::Const:
      return;  // constants carry no curvature
    default:
      break;
  }
  out.push_back({w, nullptr});
}

}  // namespace

CostModel CostModel::compile(const Expr& e, const SymbolTable& symbols, const expr::TypeOptions& opts) {
  expr::typecheck_scalar(e, symbols, opts);
  CostModel m;
  m.whole_ = Program::compile(e, symbols, opts);
  std::vector<Term> terms;
  split_terms(e, 1.0, terms);
  for (const Term& t : terms) {
    if (t.residual == nullptr || t.weight < 0.0) {
      m.has_other_ = true;
      continue;
    }
    if (t.weight == 0.0) continue;
    m.residuals_.push_back({t.weight, Program::compile(*t.residual, symbols, opts)});
  }
  return m;
}

GaussNewtonBlock CostModel::evaluate(const EvalContext& ctx) const {
  GaussNewtonBlock out;
  const int nv = whole_.stage_dim();
  out.grad.setZero(nv);
  out.value = whole_.gradient(ctx, std::span<double>(out.grad.data(), nv), &out.kink);
  out.hessian.setZero(nv, nv);
  std::vector<double> r;
  Eigen::MatrixXd J;
  for (const Residual& res : residuals_) {
    res.r.jacobian(ctx, r, J, nullptr);
    out.hessian.noalias() += 2.0 * res.weight * J.transpose() * J;
  }
  if (has_other_) out.hessian.diagonal().array() += kFallbackCurvature;
  return out;
}

std::vector<double> eval(const Expr& e, const SymbolTable& symbols, const EvalContext& ctx) {
  std::vector<double> out;
  Program::compile(e, symbols).eval(ctx, out);
  return out;
}

DiffResult diff(const Expr& e, const SymbolTable& symbols, const EvalContext& ctx) {
  expr::typecheck_scalar(e, symbols);
  const Program p = Program::compile(e, symbols);
  const int nv = symbols.stage_dim(), nx = nv / 2;
  std::vector<double> g(nv);
  DiffResult out;
  out.value = p.gradient(ctx, g, &out.kink);
  out.grad_x = Eigen::Map<Eigen::VectorXd>(g.data(), nx);
  out.grad_u = Eigen::Map<Eigen::VectorXd>(g.data() + nx, nx);
  return out;
}

GaussNewtonBlock gauss_newton_block(const Expr& e, const SymbolTable& symbols, const EvalContext& ctx) {
  return CostModel::compile(e, symbols).evaluate(ctx);
}

}  // namespace langmpc::ad
