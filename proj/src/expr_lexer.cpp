#include <cctype>
#include <cmath>
#include <cstdlib>
#include <string>

#include "langmpc/expr.hpp"

namespace langmpc::expr {

const char* to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::Ident: return "identifier";
    case TokenKind::Number: return "number";
    case TokenKind::Op: return "operator";
    case TokenKind::LParen: return "'('";
    case TokenKind::RParen: return "')'";
    case TokenKind::LBracket: return "'['";
    case TokenKind::RBracket: return "']'";
    case TokenKind::Comma: return "','";
    case TokenKind::Colon: return "':'";
  }
  return "?";
}

namespace {

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }
bool digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

// Namespaces the designer habitually writes in front of builtins.
constexpr std::string_view kNamespaces[] = {"ca", "np", "casadi", "numpy"};

}  // namespace

std::vector<Token> tokenize(std::string_view in) {
  std::vector<Token> out;
  std::size_t i = 0;
  const std::size_t n = in.size();
  while (i < n) {
    const char c = in[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    if (ident_start(c)) {
      while (i < n && ident_char(in[i])) ++i;
      std::string_view word = in.substr(start, i - start);
      // `ca.norm_2` -> norm_2; the prefix only counts when an identifier follows.
      for (auto ns : kNamespaces) {
        if (word == ns && i + 1 < n && in[i] == '.' && ident_start(in[i + 1])) {
          ++i;
          const std::size_t name_start = i;
          while (i < n && ident_char(in[i])) ++i;
          word = in.substr(name_start, i - name_start);
          break;
        }
      }
      out.push_back({TokenKind::Ident, std::string(word), {start, i}});
      continue;
    }
    if (digit(c) || (c == '.' && i + 1 < n && digit(in[i + 1]))) {
      while (i < n && digit(in[i])) ++i;
      if (i < n && in[i] == '.') {
        ++i;
        while (i < n && digit(in[i])) ++i;
      }
      if (i < n && (in[i] == 'e' || in[i] == 'E')) {
        std::size_t j = i + 1;
        if (j < n && (in[j] == '+' || in[j] == '-')) ++j;
        if (j < n && digit(in[j])) {
          i = j;
          while (i < n && digit(in[i])) ++i;
        } else {
          throw LexError("malformed exponent in number literal", {start, j});
        }
      }
      std::string text(in.substr(start, i - start));
      const double v = std::strtod(text.c_str(), nullptr);
      if (!std::isfinite(v)) throw LexError("number literal is not finite: " + text, {start, i});
      out.push_back({TokenKind::Number, std::move(text), {start, i}});
      continue;
    }
    switch (c) {
      case '+':
      case '-':
      case '/':
        out.push_back({TokenKind::Op, std::string(1, c), {start, start + 1}});
        ++i;
        continue;
      case '*':
        if (i + 1 < n && in[i + 1] == '*') {
          out.push_back({TokenKind::Op, "**", {start, start + 2}});
          i += 2;
        } else {
          out.push_back({TokenKind::Op, "*", {start, start + 1}});
          ++i;
        }
        continue;
      case '(': out.push_back({TokenKind::LParen, "(", {start, start + 1}}); ++i; continue;
      case ')': out.push_back({TokenKind::RParen, ")", {start, start + 1}}); ++i; continue;
      case '[': out.push_back({TokenKind::LBracket, "[", {start, start + 1}}); ++i; continue;
      case ']': out.push_back({TokenKind::RBracket, "]", {start, start + 1}}); ++i; continue;
      case ',': out.push_back({TokenKind::Comma, ",", {start, start + 1}}); ++i; continue;
      case ':': out.push_back({TokenKind::Colon, ":", {start, start + 1}}); ++i; continue;
      default: break;
    }
    // Report the whole UTF-8 sequence, not a single byte of it.
    std::size_t end = start + 1;
    while (end < n && (static_cast<unsigned char>(in[end]) & 0xC0) == 0x80) ++end;
    throw LexError("unexpected character '" + std::string(in.substr(start, end - start)) + "'", {start, end});
  }
  return out;
}

}  // namespace langmpc::expr
