// Arithmetic expressions in one variable x, compiled to a postfix program.
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := ('-' | '+') unary | power
//   power   := primary ('^' unary)?
//   primary := number | 'x' | 'pi' | 'e' | func '(' args ')' | '(' expr ')'
//
// Functions: sin cos tan exp log sqrt abs, and indicator(v, lo, hi), which is
// 1 when lo <= v <= hi and 0 otherwise.
#pragma once

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <string>
#include <vector>

#include "obsfit/error.hpp"

namespace obsfit {

class Expression {
 public:
  Expression() = default;

  static Expression parse(const std::string& text) {
    Expression e;
    e.source_ = text;
    Parser p{text, 0, e.code_};
    p.expr();
    p.skip_space();
    if (p.pos != text.size()) p.fail("unexpected '" + std::string(1, text[p.pos]) + "'");
    // Check the stack discipline once so evaluation needs no checks.
    int depth = 0, max_depth = 0;
    for (const auto& op : e.code_) {
      depth += op.stack_effect();
      max_depth = std::max(max_depth, depth);
    }
    if (depth != 1) throw ValidationError("malformed expression: " + text);
    e.max_depth_ = max_depth;
    return e;
  }

  const std::string& source() const noexcept { return source_; }

  double operator()(double x) const {
    double stack_small[32] = {};
    std::vector<double> stack_big;
    double* s = stack_small;
    if (max_depth_ > 32) {
      stack_big.resize(static_cast<std::size_t>(max_depth_));
      s = stack_big.data();
    }
    int top = -1;
    for (const auto& op : code_) {
      switch (op.code) {
        case Op::kConst: s[++top] = op.value; break;
        case Op::kVar: s[++top] = x; break;
        case Op::kAdd: s[top - 1] += s[top]; --top; break;
        case Op::kSub: s[top - 1] -= s[top]; --top; break;
        case Op::kMul: s[top - 1] *= s[top]; --top; break;
        case Op::kDiv: s[top - 1] /= s[top]; --top; break;
        case Op::kPow: s[top - 1] = std::pow(s[top - 1], s[top]); --top; break;
        case Op::kNeg: s[top] = -s[top]; break;
        case Op::kSin: s[top] = std::sin(s[top]); break;
        case Op::kCos: s[top] = std::cos(s[top]); break;
        case Op::kTan: s[top] = std::tan(s[top]); break;
        case Op::kExp: s[top] = std::exp(s[top]); break;
        case Op::kLog: s[top] = std::log(s[top]); break;
        case Op::kSqrt: s[top] = std::sqrt(s[top]); break;
        case Op::kAbs: s[top] = std::abs(s[top]); break;
        case Op::kIndicator:
          s[top - 2] = (s[top - 2] >= s[top - 1] && s[top - 2] <= s[top]) ? 1.0 : 0.0;
          top -= 2;
          break;
      }
    }
    return s[0];
  }

 private:
  struct Op {
    enum Code { kConst, kVar, kAdd, kSub, kMul, kDiv, kPow, kNeg, kSin, kCos, kTan, kExp, kLog, kSqrt, kAbs, kIndicator };
    Code code;
    double value = 0.0;
    int stack_effect() const noexcept {
      switch (code) {
        case kConst:
        case kVar: return 1;
        case kAdd:
        case kSub:
        case kMul:
        case kDiv:
        case kPow: return -1;
        case kIndicator: return -2;
        default: return 0;
      }
    }
  };

  struct Parser {
    const std::string& s;
    std::size_t pos;
    std::vector<Op>& out;

    [[noreturn]] void fail(const std::string& msg) const {
      throw ValidationError("expression error at column " + std::to_string(pos + 1) + ": " + msg + " in '" + s + "'");
    }
    void skip_space() {
      while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    }
    bool accept(char c) {
      skip_space();
      if (pos < s.size() && s[pos] == c) {
        ++pos;
        return true;
      }
      return false;
    }
    void expect(char c) {
      if (!accept(c)) fail(std::string("expected '") + c + "'");
    }

    void expr() {
      term();
      for (;;) {
        if (accept('+')) { term(); out.push_back({Op::kAdd}); }
        else if (accept('-')) { term(); out.push_back({Op::kSub}); }
        else return;
      }
    }
    void term() {
      unary();
      for (;;) {
        if (accept('*')) { unary(); out.push_back({Op::kMul}); }
        else if (accept('/')) { unary(); out.push_back({Op::kDiv}); }
        else return;
      }
    }
    void unary() {
      if (accept('-')) { unary(); out.push_back({Op::kNeg}); return; }
      if (accept('+')) { unary(); return; }
      power();
    }
    void power() {
      primary();
      if (accept('^')) { unary(); out.push_back({Op::kPow}); }
    }
    void primary() {
      skip_space();
      if (pos >= s.size()) fail("unexpected end of input");
      const char c = s[pos];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        const char* begin = s.c_str() + pos;
        char* end = nullptr;
        const double v = std::strtod(begin, &end);
        if (end == begin) fail("bad number");
        pos += static_cast<std::size_t>(end - begin);
        out.push_back({Op::kConst, v});
        return;
      }
      if (accept('(')) {
        expr();
        expect(')');
        return;
      }
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        const std::size_t start = pos;
        while (pos < s.size() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_')) ++pos;
        const std::string name = s.substr(start, pos - start);
        if (name == "x") { out.push_back({Op::kVar}); return; }
        if (name == "pi") { out.push_back({Op::kConst, std::numbers::pi}); return; }
        if (name == "e") { out.push_back({Op::kConst, std::numbers::e}); return; }
        Op::Code code;
        int arity = 1;
        if (name == "sin") code = Op::kSin;
        else if (name == "cos") code = Op::kCos;
        else if (name == "tan") code = Op::kTan;
        else if (name == "exp") code = Op::kExp;
        else if (name == "log") code = Op::kLog;
        else if (name == "sqrt") code = Op::kSqrt;
        else if (name == "abs") code = Op::kAbs;
        else if (name == "indicator") { code = Op::kIndicator; arity = 3; }
        else { pos = start; fail("unknown identifier '" + name + "'"); }
        expect('(');
        for (int a = 0; a < arity; ++a) {
          if (a > 0) expect(',');
          expr();
        }
        expect(')');
        out.push_back({code});
        return;
      }
      fail("unexpected '" + std::string(1, c) + "'");
    }
  };

  std::string source_;
  std::vector<Op> code_;
  int max_depth_ = 1;
};

}  // namespace obsfit
