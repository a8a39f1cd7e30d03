#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace oasis {

enum class TokenKind { keyword, identifier, literal, punct };

std::string_view to_string(TokenKind kind) noexcept;

struct CodeToken {
  TokenKind kind;
  std::string text;
  std::size_t offset;   // byte offset into the lexed text
  std::size_t line;     // 0-based physical line
  std::size_t column;   // byte column within the line
  bool line_start;      // first token on its physical line
  int depth;            // bracket depth before this token
};

/// Coarse language families understood by the built-in lexer.
enum class Syntax { indentation, braces };

/// "python" (and ".py" paths) map to indentation syntax; everything else is
/// treated as a C-family brace language.
Syntax syntax_for_language(std::string_view language) noexcept;
std::string language_for_path(std::string_view path);

/// Comments and whitespace are dropped; string and numeric literals become
/// single `literal` tokens. Never throws: unterminated strings run to EOF.
std::vector<CodeToken> lex_code(std::string_view source, Syntax syntax);

bool is_keyword(std::string_view word) noexcept;

/// Ordered labeled rooted tree. Node 0 is the root; children are kept in
/// source order.
class AstTree {
 public:
  explicit AstTree(std::string root_label = "unit");

  int add_child(int parent, std::string label);

  std::size_t node_count() const noexcept { return labels_.size(); }
  const std::string& label(int node) const { return labels_.at(node); }
  const std::vector<int>& children(int node) const { return children_.at(node); }
  int root() const noexcept { return 0; }

  /// Post-order node sequence (children left to right, then parent).
  std::vector<int> postorder() const;

  /// S-expression dump, e.g. "(unit (stmt keyword:def identifier))".
  std::string to_sexpr() const;

  bool operator==(const AstTree& other) const = default;

 private:
  std::vector<std::string> labels_;
  std::vector<std::vector<int>> children_;
};

/// A named function located inside a source file. [start, end) are byte
/// offsets; `body_start` is the offset of the first body token.
struct FunctionSpan {
  std::string name;
  std::size_t start;
  std::size_t end;
  std::size_t body_start;
};

/// Lexical function finder shared by the built-in provider. Python: `def`
/// headers with an indented body. Brace languages: `name(...) ... {...}`
/// where `name` is not a keyword and at most a short qualifier run sits
/// between ')' and '{'. Nested definitions are reported too. Sorted by start.
std::vector<FunctionSpan> find_functions_lexical(std::string_view source, Syntax syntax);

/// Produces ordered labeled trees for code fragments. Implementations must
/// throw Error("parse_error") on input they cannot structure.
class AstProvider {
 public:
  virtual ~AstProvider() = default;
  virtual bool supports(std::string_view language) const = 0;
  virtual AstTree parse(std::string_view source, std::string_view language) const = 0;
  virtual std::vector<FunctionSpan> find_functions(std::string_view source,
                                                   std::string_view language) const {
    return find_functions_lexical(source, syntax_for_language(language));
  }
};

/// Built-in provider: nests tokens by brackets and (for indentation
/// languages) by statement/indent blocks. Leaf labels are token kinds;
/// keywords and punctuation keep their text ("keyword:def", "punct:=")
/// while identifiers and literals collapse to their kind, so renaming
/// variables does not change the tree.
class NestingAstProvider final : public AstProvider {
 public:
  bool supports(std::string_view) const override { return true; }
  AstTree parse(std::string_view source, std::string_view language) const override;
};

std::unique_ptr<AstProvider> make_default_ast_provider();

}  // namespace oasis
