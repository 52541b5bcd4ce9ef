#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <string>

#include "langmpc/expr.hpp"

using namespace langmpc::expr;

namespace {

std::vector<std::string> kinds_and_lexemes(const std::vector<Token>& toks) {
  std::vector<std::string> out;
  for (const auto& t : toks) out.push_back(std::string(to_string(t.kind)) + ":" + t.lexeme);
  return out;
}

// Tiny Python-precedence evaluator working directly on the text; shares no
// code with the library parser.
class RefEval {
 public:
  explicit RefEval(const std::string& s) : s_(s) {}
  double run() {
    const double v = sum();
    skip();
    REQUIRE(i_ == s_.size());
    return v;
  }

 private:
  void skip() {
    while (i_ < s_.size() && s_[i_] == ' ') ++i_;
  }
  bool eat(const char* tok) {
    skip();
    const std::size_t n = std::strlen(tok);
    if (s_.compare(i_, n, tok) != 0) return false;
    // '*' must not swallow the first half of '**'
    if (n == 1 && tok[0] == '*' && i_ + 1 < s_.size() && s_[i_ + 1] == '*') return false;
    i_ += n;
    return true;
  }
  double sum() {
    double v = product();
    for (;;) {
      if (eat("+")) v += product();
      else if (eat("-")) v -= product();
      else return v;
    }
  }
  double product() {
    double v = unary();
    for (;;) {
      if (eat("*")) v *= unary();
      else if (eat("/")) v /= unary();
      else return v;
    }
  }
  double unary() {
    if (eat("-")) return -unary();
    if (eat("+")) return unary();
    return power();
  }
  double power() {
    const double base = atom();
    if (eat("**")) return std::pow(base, unary());
    return base;
  }
  double atom() {
    skip();
    if (eat("(")) {
      const double v = sum();
      REQUIRE(eat(")"));
      return v;
    }
    std::size_t used = 0;
    const double v = std::stod(s_.substr(i_), &used);
    i_ += used;
    return v;
  }
  std::string s_;
  std::size_t i_ = 0;
};

std::string random_expr(std::mt19937& rng, int depth) {
  std::uniform_int_distribution<int> pick(0, 7);
  std::uniform_real_distribution<double> val(0.5, 3.0);
  if (depth == 0) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", val(rng));
    return buf;
  }
  const std::string a = random_expr(rng, depth - 1), b = random_expr(rng, depth - 1);
  switch (pick(rng)) {
    case 0: return a + " + " + b;
    case 1: return a + " - " + b;
    case 2: return a + " * " + b;
    case 3: return a + " / " + b;
    case 4: return "-" + a;
    case 5: return "(" + a + ")";
    case 6: return "(" + a + ") ** 2";
    default: return a + " ** -1";
  }
}

double eval_scalar_ast(const Expr& e) {
  switch (e.kind) {
    case Expr::Kind::Const: return e.value;
    case Expr::Kind::Neg: return -eval_scalar_ast(*e.args[0]);
    case Expr::Kind::Add: return eval_scalar_ast(*e.args[0]) + eval_scalar_ast(*e.args[1]);
    case Expr::Kind::Sub: return eval_scalar_ast(*e.args[0]) - eval_scalar_ast(*e.args[1]);
    case Expr::Kind::Mul: return eval_scalar_ast(*e.args[0]) * eval_scalar_ast(*e.args[1]);
    case Expr::Kind::Div: return eval_scalar_ast(*e.args[0]) / eval_scalar_ast(*e.args[1]);
    case Expr::Kind::Pow: return std::pow(eval_scalar_ast(*e.args[0]), eval_scalar_ast(*e.args[1]));
    default: FAIL("unexpected node"); return 0;
  }
}

}  // namespace

TEST_CASE("tokenize strips namespaces and keeps ** as one operator") {
  const auto toks = tokenize("ca.norm_2(x - cube_1)**2");
  const std::vector<std::string> want = {"identifier:norm_2", "'(':(", "identifier:x", "operator:-",
                                         "identifier:cube_1", "')':)", "operator:**", "number:2"};
  CHECK(kinds_and_lexemes(toks) == want);
  CHECK(toks[0].span.begin == 0);
  CHECK(toks[0].span.end == 9);
}

TEST_CASE("tokenize literal and slice") {
  CHECK(kinds_and_lexemes(tokenize("0")) == std::vector<std::string>{"number:0"});
  CHECK(kinds_and_lexemes(tokenize("x_left[:1]")) ==
        std::vector<std::string>{"identifier:x_left", "'[':[", "':'::", "number:1", "']':]"});
}

TEST_CASE("tokens reproduce the source when whitespace is restored") {
  const std::string src = "  np.cos( t )*radius + 1.5e-3 -x[2] ";
  std::string rebuilt = src;
  std::string joined(src.size(), ' ');
  for (const auto& t : tokenize(src))
    for (std::size_t i = t.span.begin; i < t.span.end; ++i) joined[i] = src[i];
  CHECK(joined == rebuilt);
}

TEST_CASE("lex errors carry spans") {
  try {
    tokenize("x $ 2");
    FAIL("expected LexError");
  } catch (const LexError& e) {
    CHECK(e.span().begin == 2);
    CHECK(e.span().end == 3);
  }
  CHECK_THROWS_AS(tokenize("1e+"), LexError);
  CHECK_THROWS_AS(tokenize("x → y"), LexError);
}

TEST_CASE("parse shapes from the designer's strings") {
  auto e = parse("d_min - ca.norm_2(x - cube_2)");
  REQUIRE(e->kind == Expr::Kind::Sub);
  CHECK(e->args[0]->name == "d_min");
  CHECK(e->args[1]->kind == Expr::Kind::Call);
  CHECK(e->args[1]->fn == Builtin::Norm2);

  auto c = parse("ca.norm_2(x - plate + np.array([radius*np.cos(t), radius*np.sin(t), 0]))**2");
  REQUIRE(c->kind == Expr::Kind::Pow);
  const Expr& inner = *c->args[0]->args[0];
  CHECK(inner.kind == Expr::Kind::Add);
  CHECK(inner.args[1]->kind == Expr::Kind::ArrayLit);
  CHECK(inner.args[1]->args.size() == 3);

  auto n = parse("-x[2]**2");
  REQUIRE(n->kind == Expr::Kind::Neg);
  CHECK(n->args[0]->kind == Expr::Kind::Pow);
  CHECK(n->args[0]->args[0]->kind == Expr::Kind::Index);
}

TEST_CASE("power is right associative and binds tighter than unary minus") {
  CHECK(eval_scalar_ast(*parse("2**3**2")) == doctest::Approx(512));
  CHECK(eval_scalar_ast(*parse("-2**2")) == doctest::Approx(-4));
  CHECK(eval_scalar_ast(*parse("2**-1")) == doctest::Approx(0.5));
  CHECK(eval_scalar_ast(*parse("1 - 2 - 3")) == doctest::Approx(-4));
  CHECK(eval_scalar_ast(*parse("8 / 2 / 2")) == doctest::Approx(2));
}

TEST_CASE("parse errors") {
  CHECK_THROWS_AS(parse("norm_2(x"), ParseError);
  CHECK_THROWS_AS(parse("x +* 2"), ParseError);
  CHECK_THROWS_AS(parse("nrm2(x)"), ParseError);
  CHECK_THROWS_AS(parse("cos(x, y)"), ArityError);
  CHECK_THROWS_AS(parse("dot(x)"), ArityError);
  CHECK_THROWS_AS(parse(""), ParseError);
  try {
    parse("ca.nrm2(x)");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.span().begin == 0);
  }
}

TEST_CASE("dangling plus before a closer is tolerated") {
  auto e = parse("ca.norm_2(x - cube_1 + )**2");
  CHECK(same_structure(*e, *parse("norm_2(x - cube_1)**2")));
  CHECK_THROWS_AS(parse("x - + "), ParseError);
}

TEST_CASE("pretty print round-trips structurally") {
  for (const char* s : {"ca.norm_2(x - cube_2 + np.array([0, 0, 0.468]))**2", "-x[2]**2", "(-x[2])**2",
                        "2**3**2", "(2**3)**2", "a - (b - c)", "a / (b * c)", "x_left[:1] - container[:1]",
                        "diag(1, 1, 1, 0)*(x - g)", "x[1:3]", "x[-1]", "-(-a)", "1e-07 * t", "[1, 2, 3]"}) {
    auto e = parse(s);
    const std::string p = pretty(*e);
    CAPTURE(s);
    CAPTURE(p);
    CHECK(same_structure(*e, *parse(p)));
  }
}

TEST_CASE("random scalar expressions agree with a reference precedence evaluator") {
  std::mt19937 rng(7);
  for (int i = 0; i < 2000; ++i) {
    const std::string s = random_expr(rng, 1 + i % 4);
    CAPTURE(s);
    const double want = RefEval(s).run();
    const double got = eval_scalar_ast(*parse(s));
    if (!std::isfinite(want)) continue;
    CHECK(std::fabs(got - want) <= 1e-12 * std::max(1.0, std::fabs(want)));
    CHECK(same_structure(*parse(s), *parse(pretty(*parse(s)))));
  }
}

TEST_CASE("typecheck") {
  SymbolTable st;
  st.add_object("cube_1");
  st.add_object("g");
  st.add_param("d");
  CHECK(typecheck(*parse("x - cube_1"), st).root == Shape::vector(4));
  CHECK(typecheck_scalar(*parse("ca.norm_2(diag(1,1,1,0)*(x - g + array([0,0,d,0])))**2"), st).root.is_scalar());
  CHECK(typecheck(*parse("x - np.array([0,0,0.05])"), st).root == Shape::vector(4));
  CHECK_THROWS_AS(typecheck(*parse("x - np.array([0,0,0.05])"), st, TypeOptions{false}), ShapeError);
  CHECK_THROWS_AS(typecheck(*parse("x - [1, 2]"), st), ShapeError);
  CHECK_THROWS_AS(typecheck(*parse("x * cube_1"), st), ShapeError);
  CHECK_THROWS_AS(typecheck(*parse("x / x"), st), ShapeError);
  CHECK_THROWS_AS(typecheck(*parse("x[4]"), st), ShapeError);
  CHECK_THROWS_AS(typecheck(*parse("d[0]"), st), ShapeError);
  CHECK_THROWS_AS(typecheck(*parse("x ** x"), st), ShapeError);
  CHECK_THROWS_AS(typecheck_scalar(*parse("x"), st), ShapeError);
  CHECK_THROWS_AS(typecheck(*parse("x - sponge"), st), UnknownSymbol);
  CHECK(typecheck(*parse("x[-1]"), st).root.is_scalar());
  CHECK(typecheck(*parse("x[:2]"), st).root == Shape::vector(2));
  CHECK(typecheck(*parse("norm_2(x[2] - g[2])"), st).root.is_scalar());
}

TEST_CASE("dual-arm symbol table layout") {
  SymbolTable st({"left", "right"});
  CHECK(st.stage_dim() == 16);
  CHECK(st.find("x_right")->robot == 1);
  CHECK(st.input_offset(1) == 12);
  CHECK(st.contains("x_left_start"));
  CHECK_FALSE(st.contains("x"));
  CHECK_THROWS(st.add_object("x_left"));
}
