#include "oasis/ast.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <unordered_set>

#include "oasis/common.hpp"

namespace oasis {

namespace {

const std::unordered_set<std::string_view>& keyword_set() {
  static const std::unordered_set<std::string_view> kWords = {
      // python
      "def", "class", "return", "if", "elif", "else", "for", "while", "in",
      "not", "and", "or", "is", "import", "from", "as", "with", "try",
      "except", "finally", "raise", "pass", "break", "continue", "lambda",
      "yield", "global", "nonlocal", "assert", "del", "async", "await",
      "None", "True", "False",
      // c family / js / go / rust / java
      "function", "func", "fn", "let", "var", "const", "static", "struct",
      "enum", "union", "typedef", "switch", "case", "default", "do", "goto",
      "new", "delete", "this", "throw", "catch", "public", "private",
      "protected", "virtual", "override", "template", "typename", "namespace",
      "using", "void", "int", "long", "short", "char", "bool", "float",
      "double", "unsigned", "signed", "auto", "true", "false", "null",
      "nullptr", "sizeof", "package", "interface", "extends", "implements",
      "impl", "mut", "pub", "trait", "where", "self", "super", "defer",
      "chan", "export", "typeof", "instanceof", "undefined", "final",
      "abstract", "synchronized", "throws", "noexcept", "inline", "extern",
      "volatile", "register", "operator", "friend", "explicit", "constexpr",
  };
  return kWords;
}

constexpr std::array<std::string_view, 25> kMultiPunct = {
    "**=", "//=", ">>=", "<<=", "...", "==", "!=", "<=", ">=", "->", "=>",
    "::", "&&", "||", "+=", "-=", "*=", "/=", "%=", "**", "<<", ">>", "++",
    ":=", "//"};

bool ident_start(unsigned char c) { return std::isalpha(c) || c == '_' || c >= 0x80; }
bool ident_char(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

}  // namespace

std::string_view to_string(TokenKind kind) noexcept {
  switch (kind) {
    case TokenKind::keyword: return "keyword";
    case TokenKind::identifier: return "identifier";
    case TokenKind::literal: return "literal";
    case TokenKind::punct: return "punct";
  }
  return "punct";
}

bool is_keyword(std::string_view word) noexcept {
  return keyword_set().contains(word);
}

Syntax syntax_for_language(std::string_view language) noexcept {
  return language == "python" ? Syntax::indentation : Syntax::braces;
}

std::string language_for_path(std::string_view path) {
  const auto dot = path.rfind('.');
  if (dot == std::string_view::npos) return "unknown";
  const std::string_view ext = path.substr(dot + 1);
  if (ext == "py") return "python";
  if (ext == "js" || ext == "ts" || ext == "jsx" || ext == "tsx") return "javascript";
  if (ext == "go") return "go";
  if (ext == "rs") return "rust";
  if (ext == "java") return "java";
  if (ext == "c" || ext == "h") return "c";
  if (ext == "cc" || ext == "cpp" || ext == "cxx" || ext == "hpp" || ext == "hh") return "cpp";
  return "unknown";
}

std::vector<CodeToken> lex_code(std::string_view src, Syntax syntax) {
  std::vector<CodeToken> out;
  std::size_t i = 0, line = 0, line_begin = 0;
  std::size_t last_token_line = static_cast<std::size_t>(-1);
  int depth = 0;
  const bool py = syntax == Syntax::indentation;

  auto push = [&](TokenKind kind, std::size_t start, std::size_t start_line,
                  std::size_t start_col) {
    CodeToken t{kind, std::string(src.substr(start, i - start)), start, start_line,
                start_col, start_line != last_token_line, depth};
    last_token_line = start_line;
    out.push_back(std::move(t));
  };
  auto advance_newlines = [&](std::size_t from, std::size_t to) {
    for (std::size_t k = from; k < to; ++k) {
      if (src[k] == '\n') {
        ++line;
        line_begin = k + 1;
      }
    }
  };

  while (i < src.size()) {
    const unsigned char c = static_cast<unsigned char>(src[i]);
    if (c == '\n') {
      ++line;
      line_begin = ++i;
      continue;
    }
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    // comments
    if (py && c == '#') {
      while (i < src.size() && src[i] != '\n') ++i;
      continue;
    }
    if (!py && c == '/' && i + 1 < src.size() && src[i + 1] == '/') {
      while (i < src.size() && src[i] != '\n') ++i;
      continue;
    }
    if (!py && c == '/' && i + 1 < src.size() && src[i + 1] == '*') {
      const auto end = src.find("*/", i + 2);
      const std::size_t stop = end == std::string_view::npos ? src.size() : end + 2;
      advance_newlines(i, stop);
      i = stop;
      continue;
    }

    const std::size_t start = i, start_line = line, start_col = i - line_begin;

    // string literals, with optional python prefixes (r, b, f, u, rb, ...)
    std::size_t q = i;
    if (py) {
      while (q < src.size() && q - i < 2 && std::string_view("rRbBfFuU").find(src[q]) != std::string_view::npos)
        ++q;
      if (q == src.size() || (src[q] != '"' && src[q] != '\'')) q = i;
    }
    if (src[q] == '"' || src[q] == '\'' || (!py && src[q] == '`')) {
      const char quote = src[q];
      const bool triple = py && q + 2 < src.size() && src[q + 1] == quote && src[q + 2] == quote;
      std::size_t k = q + (triple ? 3 : 1);
      while (k < src.size()) {
        if (src[k] == '\\') {
          k += 2;
          continue;
        }
        if (triple) {
          if (src[k] == quote && k + 2 < src.size() && src[k + 1] == quote && src[k + 2] == quote) {
            k += 3;
            break;
          }
        } else if (src[k] == quote) {
          ++k;
          break;
        } else if (src[k] == '\n' && quote != '`') {
          break;  // unterminated single-line string
        }
        ++k;
      }
      k = std::min(k, src.size());
      advance_newlines(q, k);
      i = k;
      push(TokenKind::literal, start, start_line, start_col);
      continue;
    }

    if (std::isdigit(c) || (c == '.' && i + 1 < src.size() &&
                            std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
      ++i;
      while (i < src.size()) {
        const unsigned char d = static_cast<unsigned char>(src[i]);
        if (std::isalnum(d) || d == '.' || d == '_') {
          ++i;
        } else if ((d == '+' || d == '-') && (src[i - 1] == 'e' || src[i - 1] == 'E')) {
          ++i;
        } else {
          break;
        }
      }
      push(TokenKind::literal, start, start_line, start_col);
      continue;
    }

    if (ident_start(c)) {
      while (i < src.size() && ident_char(static_cast<unsigned char>(src[i]))) ++i;
      const std::string_view word = src.substr(start, i - start);
      push(is_keyword(word) ? TokenKind::keyword : TokenKind::identifier, start,
           start_line, start_col);
      continue;
    }

    std::size_t len = 1;
    for (std::string_view op : kMultiPunct) {
      if (src.substr(i, op.size()) == op) {
        len = op.size();
        break;
      }
    }
    i += len;
    push(TokenKind::punct, start, start_line, start_col);
    if (c == '(' || c == '[' || c == '{') ++depth;
    if (c == ')' || c == ']' || c == '}') depth = std::max(0, depth - 1);
  }
  return out;
}

AstTree::AstTree(std::string root_label) {
  labels_.push_back(std::move(root_label));
  children_.emplace_back();
}

int AstTree::add_child(int parent, std::string label) {
  const int id = static_cast<int>(labels_.size());
  labels_.push_back(std::move(label));
  children_.emplace_back();
  children_.at(parent).push_back(id);
  return id;
}

std::vector<int> AstTree::postorder() const {
  std::vector<int> order;
  order.reserve(labels_.size());
  // iterative to survive deep trees
  std::vector<std::pair<int, std::size_t>> stack{{0, 0}};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < children_[node].size()) {
      const int child = children_[node][next++];
      stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

std::string AstTree::to_sexpr() const {
  std::string out;
  auto rec = [&](auto&& self, int node) -> void {
    if (children_[node].empty()) {
      out += labels_[node];
      return;
    }
    out += '(';
    out += labels_[node];
    for (int c : children_[node]) {
      out += ' ';
      self(self, c);
    }
    out += ')';
  };
  rec(rec, 0);
  return out;
}

namespace {

std::string leaf_label(const CodeToken& t) {
  switch (t.kind) {
    case TokenKind::keyword: return "keyword:" + t.text;
    case TokenKind::punct: return "punct:" + t.text;
    default: return std::string(to_string(t.kind));
  }
}

char closer_for(std::string_view open) {
  return open == "(" ? ')' : open == "[" ? ']' : '}';
}

bool is_open(const CodeToken& t) {
  return t.kind == TokenKind::punct && (t.text == "(" || t.text == "[" || t.text == "{");
}
bool is_close(const CodeToken& t) {
  return t.kind == TokenKind::punct && (t.text == ")" || t.text == "]" || t.text == "}");
}

struct Frame {
  int node;
  char closer;   // '\0' for the root
  bool block;    // holds statements rather than bare tokens
  int stmt = -1;
};

AstTree parse_braces(const std::vector<CodeToken>& toks) {
  AstTree tree;
  std::vector<Frame> stack{{tree.root(), '\0', true}};
  auto container = [&]() -> int {
    Frame& f = stack.back();
    if (!f.block) return f.node;
    if (f.stmt < 0) f.stmt = tree.add_child(f.node, "stmt");
    return f.stmt;
  };
  for (const auto& t : toks) {
    if (is_open(t)) {
      const int parent = container();
      const bool block = t.text == "{";
      const int node = tree.add_child(parent, block ? "block" : "group:" + t.text);
      stack.push_back({node, closer_for(t.text), block});
    } else if (is_close(t)) {
      if (stack.size() == 1 || stack.back().closer != t.text[0])
        throw Error("parse_error", "unbalanced '" + t.text + "' at offset " + std::to_string(t.offset));
      const bool was_block = stack.back().block;
      stack.pop_back();
      if (was_block && stack.back().block) stack.back().stmt = -1;
    } else {
      tree.add_child(container(), leaf_label(t));
      if (t.text == ";" && t.kind == TokenKind::punct && stack.back().block) stack.back().stmt = -1;
    }
  }
  if (stack.size() != 1) throw Error("parse_error", "unclosed bracket");
  return tree;
}

AstTree parse_indentation(const std::vector<CodeToken>& toks) {
  AstTree tree;
  struct Block {
    int node;
    long indent;  // lines must be indented deeper than this
  };
  std::vector<Block> blocks{{tree.root(), -1}};
  int pending_owner = -1;  // stmt ending in ':' awaiting an indented body
  long pending_indent = 0;

  std::size_t i = 0;
  while (i < toks.size()) {
    // one logical line: starts at a line-start token with depth 0
    std::size_t j = i + 1;
    while (j < toks.size() && !(toks[j].line_start && toks[j].depth == 0)) ++j;
    const long col = static_cast<long>(toks[i].column);

    if (pending_owner >= 0 && col > pending_indent) {
      blocks.push_back({tree.add_child(pending_owner, "block"), pending_indent});
    } else {
      while (blocks.size() > 1 && col <= blocks.back().indent) blocks.pop_back();
    }
    pending_owner = -1;

    const int stmt = tree.add_child(blocks.back().node, "stmt");
    std::vector<Frame> stack{{stmt, '\0', false}};
    for (std::size_t k = i; k < j; ++k) {
      const auto& t = toks[k];
      if (is_open(t)) {
        const int node = tree.add_child(stack.back().node, "group:" + t.text);
        stack.push_back({node, closer_for(t.text), false});
      } else if (is_close(t)) {
        if (stack.size() == 1 || stack.back().closer != t.text[0])
          throw Error("parse_error", "unbalanced '" + t.text + "' at offset " + std::to_string(t.offset));
        stack.pop_back();
      } else {
        tree.add_child(stack.back().node, leaf_label(t));
      }
    }
    if (stack.size() != 1) throw Error("parse_error", "unclosed bracket");
    const auto& last = toks[j - 1];
    if (last.kind == TokenKind::punct && last.text == ":") {
      pending_owner = stmt;
      pending_indent = col;
    }
    i = j;
  }
  return tree;
}

}  // namespace

namespace {

bool is_punct(const CodeToken& t, std::string_view text) {
  return t.kind == TokenKind::punct && t.text == text;
}

std::size_t token_end(const CodeToken& t) { return t.offset + t.text.size(); }

// Index of the bracket closing the one at `open`, or npos.
std::size_t matching_close(const std::vector<CodeToken>& toks, std::size_t open) {
  int level = 0;
  for (std::size_t k = open; k < toks.size(); ++k) {
    if (is_open(toks[k])) ++level;
    if (is_close(toks[k]) && --level == 0) return k;
  }
  return std::string_view::npos;
}

std::vector<FunctionSpan> find_python(const std::vector<CodeToken>& toks) {
  std::vector<FunctionSpan> out;
  for (std::size_t k = 0; k + 2 < toks.size(); ++k) {
    const auto& def = toks[k];
    if (def.kind != TokenKind::keyword || def.text != "def") continue;
    if (toks[k + 1].kind != TokenKind::identifier || !is_punct(toks[k + 2], "(")) continue;
    std::size_t head = k;
    if (k > 0 && toks[k - 1].kind == TokenKind::keyword && toks[k - 1].text == "async" &&
        toks[k - 1].line == def.line)
      head = k - 1;
    const long def_col = static_cast<long>(toks[head].column);

    std::size_t colon = k + 3;
    while (colon < toks.size() && !(is_punct(toks[colon], ":") && toks[colon].depth == def.depth))
      ++colon;
    if (colon + 1 >= toks.size()) continue;  // header without a body

    std::size_t last = colon + 1;
    if (toks[colon + 1].line == toks[colon].line) {
      // single-line body: rest of the logical line
      while (last + 1 < toks.size() &&
             !(toks[last + 1].line_start && toks[last + 1].depth == def.depth))
        ++last;
    } else {
      if (static_cast<long>(toks[colon + 1].column) <= def_col) continue;
      while (last + 1 < toks.size()) {
        const auto& nxt = toks[last + 1];
        if (nxt.line_start && nxt.depth == def.depth && static_cast<long>(nxt.column) <= def_col)
          break;
        ++last;
      }
    }
    out.push_back({toks[k + 1].text, toks[head].offset, token_end(toks[last]),
                   toks[colon + 1].offset});
  }
  return out;
}

std::vector<FunctionSpan> find_braces(const std::vector<CodeToken>& toks) {
  constexpr std::size_t kMaxQualifiers = 12;
  std::vector<FunctionSpan> out;
  for (std::size_t k = 0; k + 1 < toks.size(); ++k) {
    const auto& name = toks[k];
    if (name.kind != TokenKind::identifier || !is_punct(toks[k + 1], "(")) continue;
    if (k > 0 && (is_punct(toks[k - 1], ".") || is_punct(toks[k - 1], "->") ||
                  (toks[k - 1].kind == TokenKind::keyword &&
                   (toks[k - 1].text == "new" || toks[k - 1].text == "return"))))
      continue;
    const std::size_t close = matching_close(toks, k + 1);
    if (close == std::string_view::npos) continue;
    std::size_t brace = std::string_view::npos;
    for (std::size_t q = close + 1; q < toks.size() && q <= close + kMaxQualifiers; ++q) {
      const auto& t = toks[q];
      if (is_punct(t, "{")) {
        brace = q;
        break;
      }
      if (is_punct(t, ";") || is_punct(t, "=") || is_punct(t, "}") || is_punct(t, ",") ||
          is_punct(t, "=>") || t.kind == TokenKind::literal)
        break;
      if (t.kind == TokenKind::identifier && is_punct(toks[q + 1 < toks.size() ? q + 1 : q], "("))
        break;  // another call: `a(b) c(d) {` is not a header
    }
    if (brace == std::string_view::npos) continue;
    const std::size_t end = matching_close(toks, brace);
    if (end == std::string_view::npos) continue;
    std::size_t s = k;
    while (s > 0 && toks[s - 1].line == name.line && !is_punct(toks[s - 1], ";") &&
           !is_punct(toks[s - 1], "{") && !is_punct(toks[s - 1], "}"))
      --s;
    out.push_back({name.text, toks[s].offset, token_end(toks[end]),
                   brace + 1 < toks.size() ? toks[brace + 1].offset : token_end(toks[brace])});
  }
  return out;
}

}  // namespace

std::vector<FunctionSpan> find_functions_lexical(std::string_view source, Syntax syntax) {
  const auto toks = lex_code(source, syntax);
  auto spans = syntax == Syntax::indentation ? find_python(toks) : find_braces(toks);
  std::stable_sort(spans.begin(), spans.end(),
                   [](const FunctionSpan& a, const FunctionSpan& b) { return a.start < b.start; });
  return spans;
}

AstTree NestingAstProvider::parse(std::string_view source, std::string_view language) const {
  const Syntax syntax = syntax_for_language(language);
  const auto toks = lex_code(source, syntax);
  if (toks.empty()) throw Error("parse_error", "no tokens");
  return syntax == Syntax::indentation ? parse_indentation(toks) : parse_braces(toks);
}

std::unique_ptr<AstProvider> make_default_ast_provider() {
  return std::make_unique<NestingAstProvider>();
}

}  // namespace oasis
