#include "oasis/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <unordered_map>

#include <spdlog/spdlog.h>

namespace oasis {

namespace fs = std::filesystem;

UnitIndex index_units(const std::vector<FunctionUnit>& units) {
  UnitIndex index;
  for (const auto& u : units) index.emplace(u.func_id, &u);
  return index;
}

std::string unit_language(const FunctionUnit& unit) {
  if (!unit.language.empty()) return unit.language;
  const auto sep = unit.func_id.rfind("::");
  const std::string path = sep == std::string::npos ? unit.func_id : unit.func_id.substr(0, sep);
  auto lang = language_for_path(path);
  if (lang != "unknown") return lang;
  const auto first = unit.source.find_first_not_of(" \t\r\n");
  if (first != std::string::npos &&
      (unit.source.compare(first, 4, "def ") == 0 || unit.source.compare(first, 10, "async def ") == 0))
    return "python";
  return "unknown";
}

std::vector<Repository> discover_repositories(const fs::path& corpus_root,
                                              const std::string& language_tag) {
  if (!fs::is_directory(corpus_root)) throw Error("missing_input:" + corpus_root.string());
  std::vector<Repository> repos;
  for (const auto& entry : fs::directory_iterator(corpus_root)) {
    if (!entry.is_directory()) continue;
    repos.push_back({entry.path().filename().string(), entry.path(), language_tag});
  }
  std::sort(repos.begin(), repos.end(),
            [](const Repository& a, const Repository& b) { return a.repo_id < b.repo_id; });
  return repos;
}

namespace {

std::optional<std::string> leading_docstring(std::string_view text, std::size_t body_start,
                                             std::string_view language) {
  if (syntax_for_language(language) != Syntax::indentation || body_start >= text.size())
    return std::nullopt;
  const auto toks = lex_code(text.substr(body_start), Syntax::indentation);
  if (toks.empty() || toks.front().kind != TokenKind::literal) return std::nullopt;
  std::string_view lit = toks.front().text;
  while (!lit.empty() && lit.front() != '"' && lit.front() != '\'') lit.remove_prefix(1);
  if (lit.empty()) return std::nullopt;  // numeric literal
  const std::size_t q = (lit.size() >= 6 && lit[1] == lit[0] && lit[2] == lit[0]) ? 3 : 1;
  if (lit.size() < 2 * q) return std::nullopt;
  std::string doc(lit.substr(q, lit.size() - 2 * q));
  const auto b = doc.find_first_not_of(" \t\r\n");
  const auto e = doc.find_last_not_of(" \t\r\n");
  if (b == std::string::npos) return std::nullopt;
  return doc.substr(b, e - b + 1);
}

std::vector<FunctionUnit> units_from_spans(std::string_view text, std::string_view language,
                                           const std::vector<FunctionSpan>& spans,
                                           const std::string& repo_id, const std::string& path) {
  std::vector<FunctionUnit> out;
  out.reserve(spans.size());
  for (const auto& span : spans) {
    FunctionUnit u;
    u.func_id = repo_id + "/" + path + "::" + span.name + "@" + std::to_string(span.start);
    u.repo_id = repo_id;
    u.name = span.name;
    u.source = std::string(text.substr(span.start, span.end - span.start));
    u.docstring = leading_docstring(text, span.body_start, language);
    u.path = path;
    u.start = span.start;
    u.end = span.end;
    u.language = std::string(language);
    if (u.source.empty()) continue;
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace

std::vector<FunctionUnit> extract_functions_from_text(std::string_view text,
                                                      std::string_view language,
                                                      const std::string& repo_id,
                                                      const std::string& path) {
  NestingAstProvider builtin;
  return units_from_spans(text, language, builtin.find_functions(text, language), repo_id, path);
}

std::vector<FunctionUnit> extract_functions(const Repository& repo, const AstProvider& parser) {
  std::vector<std::pair<std::string, std::string>> files;  // (relative path, language)
  std::error_code ec;
  for (fs::recursive_directory_iterator it(repo.root_path, ec), end; it != end; it.increment(ec)) {
    if (ec) {
      spdlog::warn("{}: directory walk error: {}", repo.repo_id, ec.message());
      break;
    }
    if (!it->is_regular_file()) continue;
    const std::string rel = fs::relative(it->path(), repo.root_path).generic_string();
    const std::string lang = language_for_path(rel);
    if (lang == "unknown") continue;
    if (repo.language_tag != "auto" && lang != repo.language_tag) continue;
    files.emplace_back(rel, lang);
  }
  std::sort(files.begin(), files.end());

  NestingAstProvider builtin;
  std::vector<FunctionUnit> units;
  for (const auto& [rel, lang] : files) {
    std::string text;
    try {
      text = read_file(repo.root_path / rel);
    } catch (const std::exception& e) {
      spdlog::warn("{}: skipping unreadable file {}: {}", repo.repo_id, rel, e.what());
      continue;
    }
    const AstProvider& provider = parser.supports(lang) ? parser : builtin;
    auto found = units_from_spans(text, lang, provider.find_functions(text, lang), repo.repo_id, rel);
    units.insert(units.end(), std::make_move_iterator(found.begin()),
                 std::make_move_iterator(found.end()));
  }
  return units;
}

std::vector<std::string> called_names(std::string_view source, std::string_view language) {
  const auto toks = lex_code(source, syntax_for_language(language));
  std::vector<std::string> names;
  for (std::size_t k = 0; k + 1 < toks.size(); ++k) {
    const auto& t = toks[k];
    if (t.kind != TokenKind::identifier) continue;
    const auto& nxt = toks[k + 1];
    if (nxt.kind != TokenKind::punct || nxt.text != "(" || nxt.offset != t.offset + t.text.size())
      continue;
    if (k > 0 && toks[k - 1].kind == TokenKind::keyword &&
        (toks[k - 1].text == "def" || toks[k - 1].text == "function" ||
         toks[k - 1].text == "fn" || toks[k - 1].text == "func"))
      continue;
    names.push_back(t.text);
  }
  return names;
}

std::vector<FunctionUnit> resolve_call_graph(std::vector<FunctionUnit> units) {
  // name -> unit indices, scoped per repository
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> by_name;
  for (std::size_t i = 0; i < units.size(); ++i) {
    units[i].callers.clear();
    units[i].callees.clear();
    by_name[{units[i].repo_id, units[i].name}].push_back(i);
  }
  std::set<std::pair<std::string, std::string>> warned;
  std::vector<std::vector<std::size_t>> callee_idx(units.size());
  for (std::size_t i = 0; i < units.size(); ++i) {
    std::set<std::size_t> targets;
    for (const auto& name : called_names(units[i].source, unit_language(units[i]))) {
      auto it = by_name.find({units[i].repo_id, name});
      if (it == by_name.end()) continue;
      if (it->second.size() > 1 && warned.insert(it->first).second) {
        spdlog::info("{}: ambiguous function name '{}' ({} definitions); linking all",
                     units[i].repo_id, name, it->second.size());
      }
      for (std::size_t j : it->second)
        if (j != i) targets.insert(j);
    }
    callee_idx[i].assign(targets.begin(), targets.end());
  }
  for (std::size_t i = 0; i < units.size(); ++i) {
    for (std::size_t j : callee_idx[i]) {
      units[i].callees.push_back(units[j].func_id);
      units[j].callers.push_back(units[i].func_id);
    }
  }
  return units;
}

namespace {

constexpr std::string_view kPromptIntro = "Write a concise docstring for the target function .";

struct PromptPart {
  std::string text;
  std::size_t tokens;
};

PromptPart neighbour_part(const FunctionUnit& u) {
  std::string text = "--- " + u.name + "\n" + u.source + "\n";
  return {text, count_whitespace_tokens(text)};
}

}  // namespace

std::string build_docgen_prompt(const FunctionUnit& unit, const UnitIndex& units,
                                std::size_t budget) {
  std::string head = std::string(kPromptIntro) + "\n### Target function\n" + unit.source + "\n";
  const std::string callers_hdr = "### Callers\n";
  const std::string callees_hdr = "### Callees\n";
  const std::string tail = "### Docstring\n";
  std::size_t used = count_whitespace_tokens(head) + count_whitespace_tokens(callers_hdr) +
                     count_whitespace_tokens(callees_hdr) + count_whitespace_tokens(tail);
  if (used > budget) {
    throw Error("budget_too_small", "prompt for " + unit.func_id + " needs " +
                                        std::to_string(used) + " tokens, budget " +
                                        std::to_string(budget));
  }

  std::string callers_text, callees_text;
  bool full = false;
  auto take = [&](const std::vector<std::string>& ids, std::string& sink) {
    for (const auto& id : ids) {
      if (full) return;
      auto it = units.find(id);
      if (it == units.end()) continue;
      auto part = neighbour_part(*it->second);
      if (used + part.tokens > budget) {
        full = true;
        return;
      }
      used += part.tokens;
      sink += part.text;
    }
  };
  take(unit.callers, callers_text);
  take(unit.callees, callees_text);
  return head + callers_hdr + callers_text + callees_hdr + callees_text + tail;
}

namespace {

std::vector<std::string> split_identifier(std::string_view ident) {
  std::vector<std::string> words;
  std::string cur;
  for (std::size_t i = 0; i < ident.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(ident[i]);
    if (!std::isalnum(c)) {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
      continue;
    }
    if (std::isupper(c) && !cur.empty() && std::islower(static_cast<unsigned char>(cur.back()))) {
      words.push_back(std::move(cur));
      cur.clear();
    }
    cur.push_back(static_cast<char>(std::tolower(c)));
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += (i + 1 == items.size()) ? " and " : ", ";
    out += items[i];
  }
  return out;
}

std::string callee_name(const std::string& func_id) {
  const auto a = func_id.rfind("::");
  const auto b = func_id.rfind('@');
  if (a == std::string::npos || b == std::string::npos || b < a) return func_id;
  return func_id.substr(a + 2, b - a - 2);
}

}  // namespace

std::string TemplateDocstringGenerator::generate(const FunctionUnit& unit, const std::string&) {
  constexpr std::size_t kMaxWords = 6;
  const auto toks = lex_code(unit.source, syntax_for_language(unit_language(unit)));
  std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> freq;  // word -> (count, first)
  std::size_t order = 0;
  bool skipped_name = false;
  const auto own_words = split_identifier(unit.name);
  for (const auto& t : toks) {
    if (t.kind != TokenKind::identifier) continue;
    if (!skipped_name && t.text == unit.name) {
      skipped_name = true;
      continue;
    }
    for (auto& w : split_identifier(t.text)) {
      if (std::find(own_words.begin(), own_words.end(), w) != own_words.end()) continue;
      auto [it, inserted] = freq.try_emplace(w, 0, order++);
      ++it->second.first;
    }
  }
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.first != b.second.first) return a.second.first > b.second.first;
    return a.second.second < b.second.second;
  });
  std::vector<std::string> words;
  for (std::size_t i = 0; i < ranked.size() && i < kMaxWords; ++i) words.push_back(ranked[i].first);

  std::string name_phrase;
  for (const auto& w : own_words) name_phrase += (name_phrase.empty() ? "" : " ") + w;
  std::string text = "Implements " + unit.name;
  if (name_phrase != unit.name) text += " (" + name_phrase + ")";
  if (!words.empty()) text += ", working with " + join_list(words);
  text += ".";
  if (!unit.callees.empty()) {
    std::vector<std::string> names;
    for (const auto& id : unit.callees) names.push_back(callee_name(id));
    text += " Calls " + join_list(names) + ".";
  }
  return text;
}

std::string HttpDocstringGenerator::generate(const FunctionUnit&, const std::string& prompt) {
  const Json reply = client_.post(Json{{"prompt", prompt}});
  if (!reply.contains("text") || !reply["text"].is_string())
    throw Error("http_error", "generator reply lacks a string 'text' field");
  return reply["text"].get<std::string>();
}

std::vector<DocQuery> generate_docstrings(const std::vector<FunctionUnit>& units,
                                          DocstringGenerator& gen,
                                          const DocgenOptions& options) {
  const auto index = index_units(units);
  std::vector<std::optional<std::string>> texts(units.size());
  const std::size_t workers = gen.remote() ? options.retry.max_in_flight : 1;
  parallel_for(units.size(), workers, [&](std::size_t i) {
    const auto& unit = units[i];
    std::string prompt;
    try {
      prompt = build_docgen_prompt(unit, index, options.budget);
    } catch (const Error& e) {
      spdlog::warn("{}: {}; left undocumented", unit.func_id, e.what());
      return;
    }
    try {
      auto text = with_retries(options.retry, unit.func_id, [&] {
        auto t = gen.generate(unit, prompt);
        if (t.find_first_not_of(" \t\r\n") == std::string::npos)
          throw Error("empty_docstring", "generator returned blank text");
        return t;
      });
      texts[i] = std::move(text);
    } catch (const std::exception& e) {
      spdlog::warn("{}: docstring generation failed: {}; left undocumented", unit.func_id, e.what());
    }
  });
  std::vector<DocQuery> out;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (!texts[i]) continue;
    out.push_back({"q:" + units[i].func_id, units[i].func_id, std::move(*texts[i])});
  }
  return out;
}

// ---- serialization ----

Json to_json(const FunctionUnit& u) {
  Json j;
  j["func_id"] = u.func_id;
  j["repo_id"] = u.repo_id;
  j["name"] = u.name;
  j["source"] = u.source;
  j["callers"] = u.callers;
  j["callees"] = u.callees;
  j["docstring"] = u.docstring ? Json(*u.docstring) : Json(nullptr);
  return j;
}

FunctionUnit function_unit_from_json(const Json& j) {
  FunctionUnit u;
  u.func_id = j.at("func_id").get<std::string>();
  u.repo_id = j.at("repo_id").get<std::string>();
  u.name = j.at("name").get<std::string>();
  u.source = j.at("source").get<std::string>();
  u.callers = j.at("callers").get<std::vector<std::string>>();
  u.callees = j.at("callees").get<std::vector<std::string>>();
  if (j.contains("docstring") && j["docstring"].is_string()) u.docstring = j["docstring"].get<std::string>();
  if (u.source.empty()) throw Error("schema_error", "empty source for " + u.func_id);
  u.language = unit_language(u);
  return u;
}

Json to_json(const DocQuery& q) {
  Json j;
  j["query_id"] = q.query_id;
  j["func_id"] = q.func_id;
  j["text"] = q.text;
  return j;
}

DocQuery doc_query_from_json(const Json& j) {
  return {j.at("query_id").get<std::string>(), j.at("func_id").get<std::string>(),
          j.at("text").get<std::string>()};
}

namespace {
template <class T>
std::string jsonl_of(const std::vector<T>& items) {
  std::string out;
  for (const auto& it : items) {
    out += to_json(it).dump();
    out += '\n';
  }
  return out;
}
}  // namespace

std::string to_jsonl(const std::vector<FunctionUnit>& units) { return jsonl_of(units); }
std::string to_jsonl(const std::vector<DocQuery>& queries) { return jsonl_of(queries); }

std::vector<Json> parse_jsonl(std::string_view text) {
  std::vector<Json> out;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    ++line_no;
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::exception& e) {
      throw Error("schema_error", "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<FunctionUnit> load_functions(const fs::path& path) {
  std::vector<FunctionUnit> out;
  for (const auto& j : parse_jsonl(read_file(path))) out.push_back(function_unit_from_json(j));
  return out;
}

std::vector<DocQuery> load_queries(const fs::path& path) {
  std::vector<DocQuery> out;
  for (const auto& j : parse_jsonl(read_file(path))) out.push_back(doc_query_from_json(j));
  return out;
}

}  // namespace oasis
