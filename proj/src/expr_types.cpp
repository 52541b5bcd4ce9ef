#include "langmpc/expr.hpp"

namespace langmpc::expr {

SymbolTable::SymbolTable(std::vector<std::string> robot_names) : robots_(std::move(robot_names)) {
  if (robots_.empty()) robots_.push_back("");
  const int r = robot_count();
  for (int i = 0; i < r; ++i) {
    const std::string suffix = robots_[i].empty() ? "" : "_" + robots_[i];
    states_.push_back("x" + suffix);
    inputs_.push_back("u" + suffix);
    starts_.push_back("x" + suffix + "_start");
    insert(states_.back(), {SymbolKind::State, kPoseDim, i, -1});
    insert(inputs_.back(), {SymbolKind::Input, kPoseDim, i, -1});
    insert(starts_.back(), {SymbolKind::StartPose, kPoseDim, i, frame_size_});
    frame_size_ += kPoseDim;
  }
  insert("t", {SymbolKind::Time, 1, -1, -1});
}

void SymbolTable::insert(const std::string& name, SymbolInfo info) {
  if (!table_.emplace(name, info).second) throw std::invalid_argument("duplicate symbol '" + name + "'");
}

void SymbolTable::add_object(const std::string& name, int held_by) {
  if (held_by >= robot_count()) throw std::invalid_argument("object '" + name + "' held by unknown robot");
  insert(name, {SymbolKind::Object, kPoseDim, held_by, frame_size_});
  frame_size_ += kPoseDim;
}

void SymbolTable::add_param(const std::string& name) {
  insert(name, {SymbolKind::Param, 1, -1, frame_size_});
  frame_size_ += 1;
}

const SymbolInfo* SymbolTable::find(std::string_view name) const {
  auto it = table_.find(name);
  return it == table_.end() ? nullptr : &it->second;
}

std::string to_string(const Shape& s) {
  switch (s.kind) {
    case Shape::Kind::Scalar: return "scalar";
    case Shape::Kind::Vector: return "vector(" + std::to_string(s.n) + ")";
    case Shape::Kind::Diag: return "diag(" + std::to_string(s.n) + ")";
  }
  return "?";
}

namespace {

class Checker {
 public:
  Checker(const SymbolTable& st, const TypeOptions& o, ShapeInfo& info) : st_(st), opts_(o), info_(info) {}

  Shape visit(const Expr& e) {
    Shape s = compute(e);
    info_.nodes[&e] = s;
    return s;
  }

 private:
  [[noreturn]] static void shape_fail(const Expr& e, const std::string& msg) { throw ShapeError(msg, e.span); }

  // Resolves Add/Sub operand shapes, padding a 3-vector against a pose when allowed.
  Shape elementwise_sum(const Expr& e, Shape a, Shape b) {
    if (a.is_scalar() && b.is_scalar()) return a;
    if (a.kind == Shape::Kind::Diag && b.kind == Shape::Kind::Diag && a.n == b.n) return a;
    const bool av = a.kind == Shape::Kind::Vector, bv = b.kind == Shape::Kind::Vector;
    if (av && bv) {
      if (a.n == b.n) return a;
      if (opts_.pad_to_pose && a.n == kPoseDim && b.n == kPoseDim - 1) {
        info_.padded[&e] = 1;
        return a;
      }
      if (opts_.pad_to_pose && b.n == kPoseDim && a.n == kPoseDim - 1) {
        info_.padded[&e] = 0;
        return b;
      }
    }
    const char* op = e.kind == Expr::Kind::Add ? "add" : "subtract";
    shape_fail(e, std::string("cannot ") + op + " " + to_string(a) + " and " + to_string(b));
  }

  Shape compute(const Expr& e) {
    using K = Expr::Kind;
    switch (e.kind) {
      case K::Const:
        return Shape::scalar();
      case K::VecConst:
        return Shape::vector(static_cast<int>(e.values.size()));
      case K::Sym: {
        const SymbolInfo* s = st_.find(e.name);
        if (!s) throw UnknownSymbol(e.name, e.span);
        return s->size == 1 ? Shape::scalar() : Shape::vector(s->size);
      }
      case K::Neg:
        return visit(*e.args[0]);
      case K::Add:
      case K::Sub: {
        const Shape a = visit(*e.args[0]);
        const Shape b = visit(*e.args[1]);
        return elementwise_sum(e, a, b);
      }
      case K::Mul: {
        const Shape a = visit(*e.args[0]);
        const Shape b = visit(*e.args[1]);
        if (a.is_scalar()) return b;
        if (b.is_scalar()) return a;
        if (a.n == b.n) {
          if (a.kind == Shape::Kind::Diag && b.kind == Shape::Kind::Diag) return a;
          if (a.kind == Shape::Kind::Diag || b.kind == Shape::Kind::Diag) return Shape::vector(a.n);
        }
        shape_fail(e, "cannot multiply " + to_string(a) + " by " + to_string(b) + " (use dot() or diag())");
      }
      case K::Div: {
        const Shape a = visit(*e.args[0]);
        const Shape b = visit(*e.args[1]);
        if (!b.is_scalar()) shape_fail(e, "divisor must be scalar, got " + to_string(b));
        return a;
      }
      case K::Pow: {
        const Shape a = visit(*e.args[0]);
        const Shape b = visit(*e.args[1]);
        if (!b.is_scalar()) shape_fail(*e.args[1], "exponent must be scalar, got " + to_string(b));
        return a.kind == Shape::Kind::Diag ? Shape::vector(a.n) : a;
      }
      case K::Index: {
        const Shape a = visit(*e.args[0]);
        if (a.is_scalar()) shape_fail(e, "cannot index a scalar");
        const long i = e.index < 0 ? e.index + a.n : e.index;
        if (i < 0 || i >= a.n) shape_fail(e, "index " + std::to_string(e.index) + " out of range for " + to_string(a));
        return Shape::scalar();
      }
      case K::Slice: {
        const Shape a = visit(*e.args[0]);
        if (a.is_scalar()) shape_fail(e, "cannot slice a scalar");
        long lo = e.lo.value_or(0), hi = e.hi.value_or(a.n);
        if (lo < 0) lo += a.n;
        if (hi < 0) hi += a.n;
        if (lo < 0 || hi > a.n || lo >= hi) shape_fail(e, "slice out of range for " + to_string(a));
        return Shape::vector(static_cast<int>(hi - lo));
      }
      case K::Call:
        return call(e);
      case K::ArrayLit: {
        for (const auto& c : e.args) {
          const Shape s = visit(*c);
          if (!s.is_scalar()) shape_fail(*c, "vector literal elements must be scalar, got " + to_string(s));
        }
        return Shape::vector(static_cast<int>(e.args.size()));
      }
    }
    shape_fail(e, "unknown node");
  }

  Shape call(const Expr& e) {
    std::vector<Shape> a;
    for (const auto& c : e.args) a.push_back(visit(*c));
    switch (e.fn) {
      case Builtin::Norm2:
        // A scalar argument is treated as a length-1 vector.
        return Shape::scalar();
      case Builtin::Dot:
        if (a[0].is_scalar() || a[1].is_scalar() || a[0].n != a[1].n)
          shape_fail(e, "dot() needs two vectors of equal length, got " + to_string(a[0]) + " and " + to_string(a[1]));
        return Shape::scalar();
      case Builtin::Diag:
        for (std::size_t i = 0; i < a.size(); ++i)
          if (!a[i].is_scalar()) shape_fail(*e.args[i], "diag() entries must be scalar");
        return Shape::diag(static_cast<int>(a.size()));
      case Builtin::Array:
        shape_fail(e, "array() outside a literal");
      default:
        return a[0].kind == Shape::Kind::Diag ? Shape::vector(a[0].n) : a[0];
    }
  }

  const SymbolTable& st_;
  const TypeOptions& opts_;
  ShapeInfo& info_;
};

}  // namespace

ShapeInfo typecheck(const Expr& e, const SymbolTable& symbols, const TypeOptions& opts) {
  ShapeInfo info;
  Checker c(symbols, opts, info);
  info.root = c.visit(e);
  return info;
}

ShapeInfo typecheck_scalar(const Expr& e, const SymbolTable& symbols, const TypeOptions& opts) {
  ShapeInfo info = typecheck(e, symbols, opts);
  if (!info.root.is_scalar()) throw ShapeError("expression must be scalar, got " + to_string(info.root), e.span);
  return info;
}

}  // namespace langmpc::expr
