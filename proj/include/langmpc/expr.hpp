#pragma once

// Expression language used by the optimization designer: a small, CasADi/NumPy
// flavoured arithmetic language over robot states, object poses and scalars.
//
//   tokenize -> parse -> typecheck
//
// The grammar is documented in docs/grammar.md.

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace langmpc::expr {

/// Half-open byte range [begin, end) into the source string.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
};

enum class TokenKind { Ident, Number, Op, LParen, RParen, LBracket, RBracket, Comma, Colon };

const char* to_string(TokenKind kind);

/// `lexeme` is the token text with any `ca.`/`np.` namespace prefix removed;
/// `span` always covers the full source text of the token, prefix included.
struct Token {
  TokenKind kind;
  std::string lexeme;
  Span span;
};

class ExprError : public std::runtime_error {
 public:
  ExprError(const std::string& what, Span span) : std::runtime_error(what), span_(span) {}
  Span span() const { return span_; }

 private:
  Span span_;
};

class LexError : public ExprError {
 public:
  using ExprError::ExprError;
};

class ParseError : public ExprError {
 public:
  ParseError(const std::string& what, Span span, std::vector<std::string> expected)
      : ExprError(what, span), expected_(std::move(expected)) {}
  const std::vector<std::string>& expected() const { return expected_; }

 private:
  std::vector<std::string> expected_;
};

class ArityError : public ExprError {
 public:
  using ExprError::ExprError;
};

class ShapeError : public ExprError {
 public:
  using ExprError::ExprError;
};

class UnknownSymbol : public ExprError {
 public:
  UnknownSymbol(const std::string& name, Span span)
      : ExprError("unknown symbol '" + name + "'", span), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

std::vector<Token> tokenize(std::string_view input);

enum class Builtin { Norm2, Dot, Cos, Sin, Tan, Exp, Log, Sqrt, Abs, Diag, Array };

const char* builtin_name(Builtin fn);
std::optional<Builtin> lookup_builtin(std::string_view name);

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

/// Immutable AST node. Children are shared, so trees can be reused freely
/// across threads once built.
struct Expr {
  enum class Kind { Const, VecConst, Sym, Neg, Add, Sub, Mul, Div, Pow, Index, Slice, Call, ArrayLit };

  Kind kind = Kind::Const;
  double value = 0.0;                // Const
  std::vector<double> values;        // VecConst
  std::string name;                  // Sym
  Builtin fn = Builtin::Norm2;       // Call
  std::vector<ExprPtr> args;         // operands / call arguments / array elements / Index+Slice base
  long index = 0;                    // Index
  std::optional<long> lo, hi;        // Slice
  Span span;

  static ExprPtr constant(double v, Span s = {});
  static ExprPtr vec_constant(std::vector<double> v, Span s = {});
  static ExprPtr symbol(std::string name, Span s = {});
  static ExprPtr unary(Kind k, ExprPtr a, Span s = {});
  static ExprPtr binary(Kind k, ExprPtr a, ExprPtr b, Span s = {});
  static ExprPtr call(Builtin fn, std::vector<ExprPtr> args, Span s = {});
  static ExprPtr array(std::vector<ExprPtr> elems, Span s = {});
  static ExprPtr index_of(ExprPtr base, long i, Span s = {});
  static ExprPtr slice_of(ExprPtr base, std::optional<long> lo, std::optional<long> hi, Span s = {});
};

/// Parses a complete token stream. `source` is only used for error messages.
ExprPtr parse(const std::vector<Token>& tokens);

/// tokenize + parse.
ExprPtr parse(std::string_view source);

/// Canonical text form; re-parses to a structurally identical tree.
std::string pretty(const Expr& e);

/// Structural equality (spans ignored).
bool same_structure(const Expr& a, const Expr& b);

/// Names of every symbol referenced in `e`.
std::set<std::string> free_symbols(const Expr& e);

/// True when `e` references the symbol `name`.
bool references(const Expr& e, std::string_view name);

// ---------------------------------------------------------------------------
// Symbols and shapes

enum class SymbolKind {
  State,      // robot gripper pose, decision variable
  Input,      // robot gripper velocity, decision variable
  Time,       // stage time in seconds
  Object,     // object pose [px, py, pz, yaw]; may be held by a robot
  StartPose,  // robot pose captured when the current subtask became active
  Param,      // named scalar parameter
};

struct SymbolInfo {
  SymbolKind kind = SymbolKind::Param;
  int size = 1;
  int robot = -1;       // State / Input / StartPose, and Object when held
  int slot = -1;        // offset into the parameter frame (Object, StartPose, Param)
};

inline constexpr int kPoseDim = 4;

/// Name -> symbol mapping for one task. Decision variables of a stage are laid
/// out as [x_robot0, ..., x_robotR-1, u_robot0, ..., u_robotR-1].
class SymbolTable {
 public:
  /// Robot names are used to form `x_<name>` / `u_<name>`; a single robot with
  /// an empty name yields plain `x` and `u`.
  explicit SymbolTable(std::vector<std::string> robot_names = {""});

  int robot_count() const { return static_cast<int>(robots_.size()); }
  int stage_dim() const { return 2 * kPoseDim * robot_count(); }
  int state_offset(int robot) const { return kPoseDim * robot; }
  int input_offset(int robot) const { return kPoseDim * (robot_count() + robot); }

  const std::string& state_name(int robot) const { return states_.at(robot); }
  const std::string& input_name(int robot) const { return inputs_.at(robot); }
  const std::string& start_name(int robot) const { return starts_.at(robot); }
  const std::vector<std::string>& robot_names() const { return robots_; }

  /// Registers an object pose symbol. `held_by` >= 0 makes the object move
  /// with that robot's state (its frame slot then stores the grasp offset).
  void add_object(const std::string& name, int held_by = -1);
  void add_param(const std::string& name);

  const SymbolInfo* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  /// Total number of doubles in a parameter frame for this table.
  int frame_size() const { return frame_size_; }
  const std::map<std::string, SymbolInfo, std::less<>>& symbols() const { return table_; }

 private:
  void insert(const std::string& name, SymbolInfo info);

  std::vector<std::string> robots_, states_, inputs_, starts_;
  std::map<std::string, SymbolInfo, std::less<>> table_;
  int frame_size_ = 0;
};

struct Shape {
  enum class Kind { Scalar, Vector, Diag };
  Kind kind = Kind::Scalar;
  int n = 1;

  bool is_scalar() const { return kind == Kind::Scalar; }
  static Shape scalar() { return {}; }
  static Shape vector(int n) { return {Kind::Vector, n}; }
  static Shape diag(int n) { return {Kind::Diag, n}; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

struct TypeOptions {
  /// Zero-pad 3-element vectors to pose length when combined with a pose.
  bool pad_to_pose = true;
};

/// Per-node shapes, keyed by node address.
struct ShapeInfo {
  Shape root;
  std::map<const Expr*, Shape> nodes;
  /// Nodes whose 3-vector operand was padded to 4 (operand index 0 or 1).
  std::map<const Expr*, int> padded;
};

ShapeInfo typecheck(const Expr& e, const SymbolTable& symbols, const TypeOptions& opts = {});

/// typecheck + require a scalar root.
ShapeInfo typecheck_scalar(const Expr& e, const SymbolTable& symbols, const TypeOptions& opts = {});

}  // namespace langmpc::expr
