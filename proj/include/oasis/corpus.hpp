#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "oasis/ast.hpp"
#include "oasis/common.hpp"
#include "oasis/http.hpp"

namespace oasis {

struct Repository {
  std::string repo_id;
  std::filesystem::path root_path;
  std::string language_tag = "auto";  // "auto" infers per file from its extension
};

struct FunctionUnit {
  std::string func_id;
  std::string repo_id;
  std::string name;
  std::string source;
  std::vector<std::string> callers;
  std::vector<std::string> callees;
  std::optional<std::string> docstring;  // docstring already present in the source

  // Location; not part of the functions.jsonl record.
  std::string path;  // relative to the repository root, '/' separated
  std::size_t start = 0;
  std::size_t end = 0;
  std::string language;
};

struct DocQuery {
  std::string query_id;
  std::string func_id;
  std::string text;
};

using UnitIndex = std::map<std::string, const FunctionUnit*, std::less<>>;

UnitIndex index_units(const std::vector<FunctionUnit>& units);

/// Language of a unit, recovered from its func_id path when the unit was
/// loaded from disk without location fields.
std::string unit_language(const FunctionUnit& unit);

/// Lists the repositories of a corpus: one per immediate subdirectory of
/// `corpus_root`, sorted by name.
std::vector<Repository> discover_repositories(const std::filesystem::path& corpus_root,
                                              const std::string& language_tag = "auto");

/// Every named function (top-level and nested) of the source files in a
/// repository, ordered by (file path, start offset). func_ids are
/// "<repo_id>/<path>::<name>@<offset>", stable across reruns.
std::vector<FunctionUnit> extract_functions(const Repository& repo, const AstProvider& parser);

/// Same extraction applied to one in-memory file.
std::vector<FunctionUnit> extract_functions_from_text(std::string_view text,
                                                      std::string_view language,
                                                      const std::string& repo_id,
                                                      const std::string& path);

/// Identifiers used in call position (identifier token directly followed by
/// '('), excluding definition headers.
std::vector<std::string> called_names(std::string_view source, std::string_view language);

/// Name-based caller/callee resolution within one repository. Callees are
/// listed in unit order; callers are the exact transpose.
std::vector<FunctionUnit> resolve_call_graph(std::vector<FunctionUnit> units);

/// Builds the docstring-generation prompt:
///
///   Write a concise docstring for the target function .
///   ### Target function
///   <source>
///   ### Callers
///   --- <name>
///   <caller source>
///   ### Callees
///   --- <name>
///   <callee source>
///   ### Docstring
///
/// `budget` counts whitespace-delimited tokens of the entire prompt. Callers
/// are added before callees, each neighbour whole; the first neighbour that
/// does not fit ends the context. Throws Error("budget_too_small") when the
/// template plus the unit's own source exceeds the budget.
std::string build_docgen_prompt(const FunctionUnit& unit, const UnitIndex& units,
                                std::size_t budget);

class DocstringGenerator {
 public:
  virtual ~DocstringGenerator() = default;
  /// Returns the docstring text or throws on failure.
  virtual std::string generate(const FunctionUnit& unit, const std::string& prompt) = 0;
  virtual bool remote() const noexcept { return false; }
};

/// Deterministic offline generator: a sentence built from the function name
/// words followed by its most frequent identifier words.
class TemplateDocstringGenerator final : public DocstringGenerator {
 public:
  std::string generate(const FunctionUnit& unit, const std::string& prompt) override;
};

/// POST {"prompt": ...} -> {"text": ...}
class HttpDocstringGenerator final : public DocstringGenerator {
 public:
  explicit HttpDocstringGenerator(Endpoint endpoint) : client_(std::move(endpoint)) {}
  std::string generate(const FunctionUnit& unit, const std::string& prompt) override;
  bool remote() const noexcept override { return true; }

 private:
  JsonHttpClient client_;
};

struct DocgenOptions {
  std::size_t budget = 1024;
  RetryPolicy retry;
};

/// One DocQuery per unit whose generation succeeded, in unit order. Units
/// whose generation still fails after the configured retries are logged and
/// left out. Query ids are "q:<func_id>".
std::vector<DocQuery> generate_docstrings(const std::vector<FunctionUnit>& units,
                                          DocstringGenerator& gen,
                                          const DocgenOptions& options = {});

// ---- functions.jsonl / queries.jsonl ----

Json to_json(const FunctionUnit& unit);
FunctionUnit function_unit_from_json(const Json& j);
Json to_json(const DocQuery& query);
DocQuery doc_query_from_json(const Json& j);

std::string to_jsonl(const std::vector<FunctionUnit>& units);
std::string to_jsonl(const std::vector<DocQuery>& queries);
std::vector<FunctionUnit> load_functions(const std::filesystem::path& path);
std::vector<DocQuery> load_queries(const std::filesystem::path& path);

/// Parses a JSON-lines document; blank lines are ignored.
std::vector<Json> parse_jsonl(std::string_view text);

}  // namespace oasis
