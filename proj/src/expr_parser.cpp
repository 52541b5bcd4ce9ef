#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "langmpc/expr.hpp"

namespace langmpc::expr {

namespace {

Span join(Span a, Span b) { return {std::min(a.begin, b.begin), std::max(a.end, b.end)}; }

ExprPtr make(Expr e) { return std::make_shared<const Expr>(std::move(e)); }

}  // namespace

ExprPtr Expr::constant(double v, Span s) {
  Expr e;
  e.kind = Kind::Const;
  e.value = v;
  e.span = s;
  return make(std::move(e));
}

ExprPtr Expr::vec_constant(std::vector<double> v, Span s) {
  Expr e;
  e.kind = Kind::VecConst;
  e.values = std::move(v);
  e.span = s;
  return make(std::move(e));
}

ExprPtr Expr::symbol(std::string name, Span s) {
  Expr e;
  e.kind = Kind::Sym;
  e.name = std::move(name);
  e.span = s;
  return make(std::move(e));
}

ExprPtr Expr::unary(Kind k, ExprPtr a, Span s) {
  Expr e;
  e.kind = k;
  e.args = {std::move(a)};
  e.span = s;
  return make(std::move(e));
}

ExprPtr Expr::binary(Kind k, ExprPtr a, ExprPtr b, Span s) {
  Expr e;
  e.kind = k;
  e.args = {std::move(a), std::move(b)};
  e.span = s;
  return make(std::move(e));
}

ExprPtr Expr::call(Builtin fn, std::vector<ExprPtr> args, Span s) {
  Expr e;
  e.kind = Kind::Call;
  e.fn = fn;
  e.args = std::move(args);
  e.span = s;
  return make(std::move(e));
}

ExprPtr Expr::array(std::vector<ExprPtr> elems, Span s) {
  Expr e;
  e.kind = Kind::ArrayLit;
  e.args = std::move(elems);
  e.span = s;
  return make(std::move(e));
}

ExprPtr Expr::index_of(ExprPtr base, long i, Span s) {
  Expr e;
  e.kind = Kind::Index;
  e.args = {std::move(base)};
  e.index = i;
  e.span = s;
  return make(std::move(e));
}

ExprPtr Expr::slice_of(ExprPtr base, std::optional<long> lo, std::optional<long> hi, Span s) {
  Expr e;
  e.kind = Kind::Slice;
  e.args = {std::move(base)};
  e.lo = lo;
  e.hi = hi;
  e.span = s;
  return make(std::move(e));
}

const char* builtin_name(Builtin fn) {
  switch (fn) {
    case Builtin::Norm2: return "norm_2";
    case Builtin::Dot: return "dot";
    case Builtin::Cos: return "cos";
    case Builtin::Sin: return "sin";
    case Builtin::Tan: return "tan";
    case Builtin::Exp: return "exp";
    case Builtin::Log: return "log";
    case Builtin::Sqrt: return "sqrt";
    case Builtin::Abs: return "abs";
    case Builtin::Diag: return "diag";
    case Builtin::Array: return "array";
  }
  return "?";
}

std::optional<Builtin> lookup_builtin(std::string_view name) {
  static constexpr std::pair<std::string_view, Builtin> kTable[] = {
      {"norm_2", Builtin::Norm2}, {"dot", Builtin::Dot},   {"cos", Builtin::Cos},   {"sin", Builtin::Sin},
      {"tan", Builtin::Tan},      {"exp", Builtin::Exp},   {"log", Builtin::Log},   {"sqrt", Builtin::Sqrt},
      {"abs", Builtin::Abs},      {"fabs", Builtin::Abs},  {"diag", Builtin::Diag}, {"array", Builtin::Array},
  };
  for (const auto& [k, v] : kTable)
    if (k == name) return v;
  return std::nullopt;
}

namespace {

class Parser {
 public:
  explicit Parser(const std::vector<Token>& toks) : toks_(toks) {}

  ExprPtr run() {
    if (toks_.empty()) throw ParseError("empty expression", {0, 0}, {"expression"});
    ExprPtr e = additive();
    if (!at_end()) fail("unexpected " + describe(peek()), {"operator", "end of input"});
    return e;
  }

 private:
  bool at_end() const { return pos_ >= toks_.size(); }
  const Token& peek() const { return toks_[pos_]; }
  bool check(TokenKind k) const { return !at_end() && peek().kind == k; }
  bool check_op(std::string_view op) const { return check(TokenKind::Op) && peek().lexeme == op; }

  Span here() const {
    if (!at_end()) return peek().span;
    const std::size_t e = toks_.back().span.end;
    return {e, e};
  }

  static std::string describe(const Token& t) { return std::string(to_string(t.kind)) + " '" + t.lexeme + "'"; }

  [[noreturn]] void fail(const std::string& msg, std::vector<std::string> expected) const {
    throw ParseError(msg, here(), std::move(expected));
  }

  const Token& expect(TokenKind k) {
    if (!check(k)) fail(std::string("expected ") + to_string(k) + (at_end() ? " before end of input" : ", found " + describe(peek())),
                        {to_string(k)});
    return toks_[pos_++];
  }

  // A dangling '+' directly before a closing token is ignored ("x - a + )").
  bool dangling_plus() const {
    return at_end() || check(TokenKind::RParen) || check(TokenKind::RBracket) || check(TokenKind::Comma);
  }

  ExprPtr additive() {
    ExprPtr lhs = term();
    while (check_op("+") || check_op("-")) {
      const bool plus = peek().lexeme == "+";
      ++pos_;
      if (plus && dangling_plus()) break;
      ExprPtr rhs = term();
      lhs = Expr::binary(plus ? Expr::Kind::Add : Expr::Kind::Sub, lhs, rhs, join(lhs->span, rhs->span));
    }
    return lhs;
  }

  ExprPtr term() {
    ExprPtr lhs = unary();
    while (check_op("*") || check_op("/")) {
      const bool mul = peek().lexeme == "*";
      ++pos_;
      ExprPtr rhs = unary();
      lhs = Expr::binary(mul ? Expr::Kind::Mul : Expr::Kind::Div, lhs, rhs, join(lhs->span, rhs->span));
    }
    return lhs;
  }

  ExprPtr unary() {
    if (check_op("-")) {
      const Span s = peek().span;
      ++pos_;
      ExprPtr a = unary();
      return Expr::unary(Expr::Kind::Neg, a, join(s, a->span));
    }
    if (check_op("+")) {
      ++pos_;
      return unary();
    }
    return power();
  }

  ExprPtr power() {
    ExprPtr base = postfix();
    if (check_op("**")) {
      ++pos_;
      ExprPtr ex = unary();  // right-associative; allows x**-1
      return Expr::binary(Expr::Kind::Pow, base, ex, join(base->span, ex->span));
    }
    return base;
  }

  long integer_literal() {
    bool neg = false;
    const Span s = here();
    if (check_op("-")) {
      neg = true;
      ++pos_;
    }
    if (!check(TokenKind::Number)) fail("index must be an integer literal", {"integer"});
    const Token& t = toks_[pos_++];
    char* end = nullptr;
    const long v = std::strtol(t.lexeme.c_str(), &end, 10);
    if (end == nullptr || *end != '\0') throw ParseError("index must be an integer literal", join(s, t.span), {"integer"});
    return neg ? -v : v;
  }

  ExprPtr postfix() {
    ExprPtr e = primary();
    while (check(TokenKind::LBracket)) {
      ++pos_;
      std::optional<long> lo, hi;
      bool is_slice = false;
      if (!check(TokenKind::Colon)) lo = integer_literal();
      if (check(TokenKind::Colon)) {
        is_slice = true;
        ++pos_;
        if (!check(TokenKind::RBracket)) hi = integer_literal();
      }
      const Token& close = expect(TokenKind::RBracket);
      const Span s = join(e->span, close.span);
      if (is_slice) {
        e = Expr::slice_of(e, lo, hi, s);
      } else {
        if (!lo) fail("empty index", {"integer", "':'"});
        e = Expr::index_of(e, *lo, s);
      }
    }
    return e;
  }

  ExprPtr bracket_list() {
    const Token& open = expect(TokenKind::LBracket);
    std::vector<ExprPtr> elems;
    if (!check(TokenKind::RBracket)) {
      elems.push_back(additive());
      while (check(TokenKind::Comma)) {
        ++pos_;
        if (check(TokenKind::RBracket)) break;  // trailing comma
        elems.push_back(additive());
      }
    }
    const Token& close = expect(TokenKind::RBracket);
    if (elems.empty()) throw ParseError("empty vector literal", join(open.span, close.span), {"expression"});
    return Expr::array(std::move(elems), join(open.span, close.span));
  }

  ExprPtr primary() {
    if (at_end()) fail("unexpected end of input", {"number", "identifier", "'('", "'['", "'-'"});
    const Token& t = peek();
    switch (t.kind) {
      case TokenKind::Number:
        ++pos_;
        return Expr::constant(std::strtod(t.lexeme.c_str(), nullptr), t.span);
      case TokenKind::LParen: {
        ++pos_;
        ExprPtr inner = additive();
        expect(TokenKind::RParen);
        return inner;
      }
      case TokenKind::LBracket:
        return bracket_list();
      case TokenKind::Ident: {
        ++pos_;
        if (!check(TokenKind::LParen)) return Expr::symbol(t.lexeme, t.span);
        auto fn = lookup_builtin(t.lexeme);
        if (!fn) throw ParseError("unknown function '" + t.lexeme + "'", t.span, {"builtin function"});
        return call(*fn, t);
      }
      default:
        fail("unexpected " + describe(t), {"number", "identifier", "'('", "'['", "'-'"});
    }
  }

  ExprPtr call(Builtin fn, const Token& name) {
    expect(TokenKind::LParen);
    std::vector<ExprPtr> args;
    if (!check(TokenKind::RParen)) {
      args.push_back(additive());
      while (check(TokenKind::Comma)) {
        ++pos_;
        if (check(TokenKind::RParen)) break;
        args.push_back(additive());
      }
    }
    const Token& close = expect(TokenKind::RParen);
    const Span s = join(name.span, close.span);
    auto arity = [&](std::size_t lo, std::size_t hi) {
      if (args.size() < lo || args.size() > hi) {
        std::ostringstream msg;
        msg << builtin_name(fn) << "() takes ";
        if (lo == hi) msg << lo; else msg << "at least " << lo;
        msg << " argument" << (lo == 1 && hi == 1 ? "" : "s") << ", got " << args.size();
        throw ArityError(msg.str(), s);
      }
    };
    switch (fn) {
      case Builtin::Array: {
        arity(1, 1);
        if (args[0]->kind != Expr::Kind::ArrayLit) throw ParseError("array() expects a bracketed list", args[0]->span, {"'['"});
        Expr copy = *args[0];
        copy.span = s;
        return std::make_shared<const Expr>(std::move(copy));
      }
      case Builtin::Dot: arity(2, 2); break;
      case Builtin::Diag: arity(1, 64); break;
      default: arity(1, 1); break;
    }
    return Expr::call(fn, std::move(args), s);
  }

  const std::vector<Token>& toks_;
  std::size_t pos_ = 0;
};

}  // namespace

ExprPtr parse(const std::vector<Token>& tokens) { return Parser(tokens).run(); }

ExprPtr parse(std::string_view source) { return parse(tokenize(source)); }

// ---------------------------------------------------------------------------

namespace {

std::string number(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  std::string s = buf;
  return s;
}

int precedence(const Expr& e) {
  switch (e.kind) {
    case Expr::Kind::Add:
    case Expr::Kind::Sub: return 1;
    case Expr::Kind::Mul:
    case Expr::Kind::Div: return 2;
    case Expr::Kind::Neg: return 3;
    case Expr::Kind::Pow: return 4;
    case Expr::Kind::Const: return e.value < 0 ? 3 : 5;
    default: return 5;
  }
}

void print(const Expr& e, int min_prec, std::string& out);

void print_child(const Expr& e, int min_prec, std::string& out) {
  if (precedence(e) < min_prec) {
    out += '(';
    print(e, 0, out);
    out += ')';
  } else {
    print(e, min_prec, out);
  }
}

void print(const Expr& e, int, std::string& out) {
  using K = Expr::Kind;
  switch (e.kind) {
    case K::Const:
      out += number(e.value);
      return;
    case K::VecConst:
      out += "array([";
      for (std::size_t i = 0; i < e.values.size(); ++i) {
        if (i) out += ", ";
        out += number(e.values[i]);
      }
      out += "])";
      return;
    case K::Sym:
      out += e.name;
      return;
    case K::Neg:
      out += '-';
      print_child(*e.args[0], 3, out);
      return;
    case K::Add:
    case K::Sub:
    case K::Mul:
    case K::Div: {
      const int p = precedence(e);
      print_child(*e.args[0], p, out);
      out += e.kind == K::Add ? " + " : e.kind == K::Sub ? " - " : e.kind == K::Mul ? "*" : "/";
      print_child(*e.args[1], p + 1, out);
      return;
    }
    case K::Pow:
      print_child(*e.args[0], 5, out);
      out += "**";
      print_child(*e.args[1], 3, out);
      return;
    case K::Index:
      print_child(*e.args[0], 5, out);
      out += '[' + std::to_string(e.index) + ']';
      return;
    case K::Slice:
      print_child(*e.args[0], 5, out);
      out += '[';
      if (e.lo) out += std::to_string(*e.lo);
      out += ':';
      if (e.hi) out += std::to_string(*e.hi);
      out += ']';
      return;
    case K::Call:
      out += builtin_name(e.fn);
      out += '(';
      for (std::size_t i = 0; i < e.args.size(); ++i) {
        if (i) out += ", ";
        print(*e.args[i], 0, out);
      }
      out += ')';
      return;
    case K::ArrayLit:
      out += "array([";
      for (std::size_t i = 0; i < e.args.size(); ++i) {
        if (i) out += ", ";
        print(*e.args[i], 0, out);
      }
      out += "])";
      return;
  }
}

}  // namespace

std::string pretty(const Expr& e) {
  std::string out;
  print(e, 0, out);
  return out;
}

bool same_structure(const Expr& a, const Expr& b) {
  if (a.kind != b.kind || a.args.size() != b.args.size()) return false;
  switch (a.kind) {
    case Expr::Kind::Const:
      if (a.value != b.value) return false;
      break;
    case Expr::Kind::VecConst:
      if (a.values != b.values) return false;
      break;
    case Expr::Kind::Sym:
      if (a.name != b.name) return false;
      break;
    case Expr::Kind::Call:
      if (a.fn != b.fn) return false;
      break;
    case Expr::Kind::Index:
      if (a.index != b.index) return false;
      break;
    case Expr::Kind::Slice:
      if (a.lo != b.lo || a.hi != b.hi) return false;
      break;
    default:
      break;
  }
  for (std::size_t i = 0; i < a.args.size(); ++i)
    if (!same_structure(*a.args[i], *b.args[i])) return false;
  return true;
}

namespace {
void collect(const Expr& e, std::set<std::string>& out) {
  if (e.kind == Expr::Kind::Sym) out.insert(e.name);
  for (const auto& c : e.args) collect(*c, out);
}
}  // namespace

std::set<std::string> free_symbols(const Expr& e) {
  std::set<std::string> out;
  collect(e, out);
  return out;
}

bool references(const Expr& e, std::string_view name) {
  if (e.kind == Expr::Kind::Sym && e.name == name) return true;
  for (const auto& c : e.args)
    if (references(*c, name)) return true;
  return false;
}

}  // namespace langmpc::expr
