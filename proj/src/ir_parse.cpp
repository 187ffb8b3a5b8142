#include <cctype>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <unordered_set>

#include "tgrad/error.hpp"
#include "tgrad/ir.hpp"

namespace tgrad::ir {

namespace {

bool isIdentChar(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '$';
}

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  Module parseModule() {
    Module m;
    skipSpace();
    while (!atEnd()) {
      Function f = parseFunction();
      if (m.find(f.name)) fail("duplicate function @" + f.name);
      m.add(std::move(f));
      skipSpace();
    }
    for (const auto& [name, pos] : callees_) {
      if (!m.find(name)) failAt(pos, ErrorKind::UnresolvedReference, "unknown function @" + name);
    }
    return m;
  }

 private:
  [[noreturn]] void failAt(size_t pos, ErrorKind kind, const std::string& message) {
    size_t line = 1, col = 1;
    for (size_t i = 0; i < pos && i < text_.size(); ++i) {
      if (text_[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw Error(kind, std::to_string(line) + ":" + std::to_string(col) + ": " + message);
  }
  [[noreturn]] void fail(const std::string& message) { failAt(pos_, ErrorKind::Syntax, message); }

  bool atEnd() const { return pos_ >= text_.size(); }

  void skipSpace() {
    while (!atEnd()) {
      char c = text_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '/' && pos_ + 1 < text_.size() && text_[pos_ + 1] == '/') {
        while (!atEnd() && text_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  char peek() {
    skipSpace();
    return atEnd() ? '\0' : text_[pos_];
  }

  bool accept(std::string_view token) {
    skipSpace();
    if (text_.substr(pos_, token.size()) != token) return false;
    // Keywords must not run into a following identifier character.
    if (isIdentChar(token.back()) && pos_ + token.size() < text_.size() &&
        isIdentChar(text_[pos_ + token.size()])) {
      return false;
    }
    pos_ += token.size();
    return true;
  }

  void expect(std::string_view token) {
    if (!accept(token)) fail("expected '" + std::string(token) + "'");
  }

  std::string ident() {
    skipSpace();
    size_t start = pos_;
    while (!atEnd() && isIdentChar(text_[pos_])) ++pos_;
    if (start == pos_) fail("expected identifier");
    return std::string(text_.substr(start, pos_ - start));
  }

  std::string sigilName(char sigil) {
    skipSpace();
    if (atEnd() || text_[pos_] != sigil) fail(std::string("expected '") + sigil + "'");
    ++pos_;
    size_t start = pos_;
    while (!atEnd() && isIdentChar(text_[pos_])) ++pos_;
    if (start == pos_) fail(std::string("expected name after '") + sigil + "'");
    return std::string(text_.substr(start, pos_ - start));
  }

  Type parseType() {
    skipSpace();
    if (accept("(")) {
      std::vector<Type> elements;
      while (peek() != ')') {
        elements.push_back(parseType());
        accept(",");
      }
      expect(")");
      return Type::tuple(std::move(elements));
    }
    std::string word = ident();
    if (word == "f32") return Type::f32();
    if (word == "i64") return Type::i64();
    if (word == "bool") return Type::boolean();
    if (word == "record") return Type::record();
    if (word != "tensor") fail("unknown type '" + word + "'");
    expect("<");
    if (accept("*")) {
      expect("xf32");
      expect(">");
      return Type::unrankedTensor();
    }
    std::vector<int64_t> dims;
    while (true) {
      skipSpace();
      if (accept("f32")) break;
      if (accept("?")) {
        dims.push_back(-1);
      } else {
        size_t start = pos_;
        while (!atEnd() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
        if (start == pos_) fail("expected tensor extent");
        dims.push_back(std::stoll(std::string(text_.substr(start, pos_ - start))));
      }
      if (atEnd() || text_[pos_] != 'x') fail("expected 'x' in tensor type");
      ++pos_;
    }
    expect(">");
    return Type::tensor(std::move(dims));
  }

  std::vector<NamedType> parseNamedList() {
    expect("(");
    std::vector<NamedType> out;
    while (peek() != ')') {
      std::string name = sigilName('%');
      expect(":");
      out.push_back({name, parseType()});
      if (!accept(",")) break;
    }
    expect(")");
    return out;
  }

  double parseNumber(bool* isInt) {
    skipSpace();
    size_t start = pos_;
    if (!atEnd() && (text_[pos_] == '-' || text_[pos_] == '+')) ++pos_;
    if (accept("inf")) {
      *isInt = false;
      return text_[start] == '-' ? -std::numeric_limits<double>::infinity()
                                 : std::numeric_limits<double>::infinity();
    }
    if (accept("nan")) {
      *isInt = false;
      return std::numeric_limits<double>::quiet_NaN();
    }
    *isInt = true;
    while (!atEnd()) {
      char c = text_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '.' || c == 'e' || c == 'E') {
        *isInt = false;
        ++pos_;
        if ((c == 'e' || c == 'E') && !atEnd() && (text_[pos_] == '-' || text_[pos_] == '+')) ++pos_;
      } else {
        break;
      }
    }
    std::string token(text_.substr(start, pos_ - start));
    char* end = nullptr;
    double v = std::strtod(token.c_str(), &end);
    if (token.empty() || end != token.c_str() + token.size()) failAt(start, ErrorKind::Syntax, "bad number '" + token + "'");
    return v;
  }

  AttrValue parseLiteral() {
    char c = peek();
    if (c == '"') {
      ++pos_;
      std::string s;
      while (!atEnd() && text_[pos_] != '"') {
        if (text_[pos_] == '\\' && pos_ + 1 < text_.size()) ++pos_;
        s += text_[pos_++];
      }
      if (atEnd()) fail("unterminated string");
      ++pos_;
      return s;
    }
    if (c == '[') {
      ++pos_;
      std::vector<double> values;
      bool allInt = true;
      while (peek() != ']') {
        bool isInt = false;
        values.push_back(parseNumber(&isInt));
        allInt = allInt && isInt;
        if (!accept(",")) break;
      }
      expect("]");
      if (allInt) return std::vector<int64_t>(values.begin(), values.end());
      return values;
    }
    bool isInt = false;
    size_t start = pos_;
    double v = parseNumber(&isInt);
    if (isInt) {
      std::string token(text_.substr(start, pos_ - start));
      return static_cast<int64_t>(std::stoll(token));
    }
    return v;
  }

  BranchTarget parseTarget() {
    BranchTarget t;
    size_t at = (skipSpace(), pos_);
    t.label = sigilName('^');
    labelRefs_.push_back({t.label, at});
    expect("(");
    while (peek() != ')') {
      t.args.push_back(useName());
      accept(",");
    }
    expect(")");
    return t;
  }

  std::string useName() {
    skipSpace();
    size_t at = pos_;
    std::string name = sigilName('%');
    uses_.push_back({name, at});
    return name;
  }

  void define(const std::string& name, size_t at) {
    defined_.insert(name);
    (void)at;
  }

  Function parseFunction() {
    expect("func");
    Function f;
    f.name = sigilName('@');
    f.params = parseNamedList();
    expect("->");
    f.resultType = parseType();
    expect("{");
    defined_.clear();
    uses_.clear();
    labelRefs_.clear();
    for (const auto& p : f.params) define(p.name, pos_);
    while (peek() == '^') f.blocks.push_back(parseBlock());
    if (f.blocks.empty()) fail("function @" + f.name + " has no blocks");
    expect("}");
    for (const auto& [name, at] : uses_) {
      if (!defined_.count(name)) failAt(at, ErrorKind::UnresolvedReference, "undefined value %" + name);
    }
    for (const auto& [label, at] : labelRefs_) {
      if (f.blockIndex(label) < 0) failAt(at, ErrorKind::UnresolvedReference, "undefined block ^" + label);
    }
    return f;
  }

  BasicBlock parseBlock() {
    BasicBlock b;
    b.label = sigilName('^');
    b.args = parseNamedList();
    for (const auto& a : b.args) define(a.name, pos_);
    expect(":");
    while (true) {
      char c = peek();
      if (c == '%') {
        b.body.push_back(parseInstruction());
        continue;
      }
      if (accept("return")) {
        b.term.kind = Terminator::Kind::Return;
        b.term.value = useName();
      } else if (accept("br")) {
        b.term.kind = Terminator::Kind::Br;
        b.term.target = parseTarget();
      } else if (accept("cond_br")) {
        b.term.kind = Terminator::Kind::CondBr;
        b.term.value = useName();
        expect(",");
        b.term.target = parseTarget();
        expect(",");
        b.term.elseTarget = parseTarget();
      } else {
        fail("expected instruction or terminator in block ^" + b.label);
      }
      return b;
    }
  }

  Instruction parseInstruction() {
    Instruction inst;
    size_t at = (skipSpace(), pos_);
    inst.result = sigilName('%');
    define(inst.result, at);
    expect("=");
    size_t opAt = (skipSpace(), pos_);
    inst.opcode = ident();
    if (!isKnownOpcode(inst.opcode)) failAt(opAt, ErrorKind::UnknownOpcode, "unknown opcode '" + inst.opcode + "'");
    if (inst.opcode == "call") {
      size_t calleeAt = (skipSpace(), pos_);
      inst.callee = sigilName('@');
      callees_.push_back({inst.callee, calleeAt});
    }
    while (peek() == '%') {
      inst.operands.push_back(useName());
      if (!accept(",")) break;
    }
    if (accept("{")) {
      while (peek() != '}') {
        std::string key = ident();
        expect("=");
        inst.attrs[key] = parseLiteral();
        if (!accept(",")) break;
      }
      expect("}");
    }
    expect(":");
    inst.type = parseType();
    return inst;
  }

  std::string_view text_;
  size_t pos_ = 0;
  std::unordered_set<std::string> defined_;
  std::vector<std::pair<std::string, size_t>> uses_;
  std::vector<std::pair<std::string, size_t>> labelRefs_;
  std::vector<std::pair<std::string, size_t>> callees_;
};

}  // namespace

Module parse(std::string_view text) { return Parser(text).parseModule(); }

}  // namespace tgrad::ir
