#include <doctest.h>

#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "oasis/synth.hpp"

using namespace oasis;

namespace {

FunctionUnit unit(const std::string& repo, int i, const std::string& body) {
  FunctionUnit u;
  u.repo_id = repo;
  u.name = "f" + std::to_string(i);
  u.func_id = repo + "/m.py::" + u.name + "@" + std::to_string(i * 100);
  u.source = "def " + u.name + "():\n    " + body + "\n";
  return u;
}

std::vector<FunctionUnit> repo_of(const std::string& repo, int n) {
  std::vector<FunctionUnit> out;
  for (int i = 0; i < n; ++i) out.push_back(unit(repo, i, "return value_" + std::to_string(i) + " + shared"));
  return out;
}

std::vector<const FunctionUnit*> ptrs(const std::vector<FunctionUnit>& v) {
  std::vector<const FunctionUnit*> out;
  for (const auto& u : v) out.push_back(&u);
  return out;
}

DocQuery query_for(const FunctionUnit& u, const std::string& text = "returns the shared value") {
  return {"q:" + u.func_id, u.func_id, text};
}

// Independent hashed-bag cosine: own tokenizer, own FNV-1a, sparse maps.
std::uint64_t oracle_fnv(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::map<std::uint64_t, double> oracle_bag(const std::string& text, std::uint64_t dim) {
  std::map<std::uint64_t, double> bag;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) bag[oracle_fnv(cur) % dim] += 1.0;
    cur.clear();
  };
  for (char c : text) {
    unsigned char uc = static_cast<unsigned char>(c);
    if (uc < 128 && std::isalnum(uc))
      cur += static_cast<char>(std::tolower(uc));
    else
      flush();
  }
  flush();
  return bag;
}

double oracle_label(const std::string& a, const std::string& b, std::uint64_t dim = 4096) {
  auto x = oracle_bag(a, dim), y = oracle_bag(b, dim);
  double dot = 0, nx = 0, ny = 0;
  for (auto& [k, v] : x) {
    nx += v * v;
    if (auto it = y.find(k); it != y.end()) dot += v * it->second;
  }
  for (auto& [k, v] : y) ny += v * v;
  double cos = (nx > 0 && ny > 0) ? dot / std::sqrt(nx * ny) : 0.0;
  double s = (1 + cos) / 2;
  return s >= 1.0 ? std::nextafter(1.0, 0.0) : s;
}

class FailingEmbedder : public TextEmbedder {
 public:
  int calls = 0;
  std::vector<Vec> embed(const std::vector<std::string>&) override {
    ++calls;
    throw std::runtime_error("backend down");
  }
};

// Fails for any batch whose first text contains "bad".
class SelectiveEmbedder : public TextEmbedder {
 public:
  HashedBagEmbedder inner;
  std::vector<Vec> embed(const std::vector<std::string>& texts) override {
    if (texts.front().find("bad") != std::string::npos) throw std::runtime_error("refused");
    return inner.embed(texts);
  }
};

RetryPolicy fast_retry(int retries = 2) {
  RetryPolicy r;
  r.retries = retries;
  r.backoff_ms = 0;
  return r;
}

}  // namespace

TEST_CASE("mine_negatives: repo of 8, K=5 gives 5 distinct non-origin ids") {
  auto units = repo_of("r", 8);
  auto q = query_for(units[3]);
  auto ids = mine_negatives(q, ptrs(units), 5, 42);
  CHECK(ids.size() == 5);
  std::set<std::string> uniq(ids.begin(), ids.end());
  CHECK(uniq.size() == 5);
  CHECK(uniq.count(units[3].func_id) == 0);
}

TEST_CASE("mine_negatives: degenerate repositories") {
  auto one = repo_of("r", 1);
  CHECK(mine_negatives(query_for(one[0]), ptrs(one), 5, 1).empty());
  auto three = repo_of("r", 3);
  auto ids = mine_negatives(query_for(three[0]), ptrs(three), 5, 1);
  CHECK(ids.size() == 2);
  CHECK(std::set<std::string>(ids.begin(), ids.end()) ==
        std::set<std::string>{three[1].func_id, three[2].func_id});
  CHECK_THROWS_AS(mine_negatives(query_for(three[0]), ptrs(three), 0, 1), Error);
}

TEST_CASE("mine_negatives: reproducible and seed-sensitive") {
  auto units = repo_of("r", 30);
  auto q = query_for(units[0]);
  auto a = mine_negatives(q, ptrs(units), 5, 7);
  CHECK(a == mine_negatives(q, ptrs(units), 5, 7));
  bool differs = false;
  for (std::uint64_t s = 8; s < 20 && !differs; ++s) differs = mine_negatives(q, ptrs(units), 5, s) != a;
  CHECK(differs);
}

TEST_CASE("mine_negatives: sampling is uniform over non-origin functions") {
  // 6 candidates, K=2: each appears with probability 1/3.
  auto units = repo_of("r", 7);
  auto q = query_for(units[0]);
  std::map<std::string, int> hits;
  const int trials = 30000;
  for (int t = 0; t < trials; ++t)
    for (const auto& id : mine_negatives(q, ptrs(units), 2, derive_seed(99, std::to_string(t)))) ++hits[id];
  CHECK(hits.size() == 6);
  for (auto& [id, n] : hits) {
    // sd of a binomial(30000, 1/3) count is ~82; allow ~5 sd.
    CHECK(std::abs(n - trials / 3.0) < 420);
  }
}

TEST_CASE("label_from_cosine maps into [0,1)") {
  CHECK(label_from_cosine(0.0) == 0.5);
  CHECK(label_from_cosine(-1.0) == 0.0);
  CHECK(label_from_cosine(1.0) == std::nextafter(1.0, 0.0));
  CHECK(label_from_cosine(1.0 + 1e-12) < 1.0);
  CHECK(label_from_cosine(0.2) == doctest::Approx(0.6));
}

TEST_CASE("hashed bag: self-similarity and disjoint tokens") {
  HashedBagEmbedder emb;
  SimilarityAnnotator ann(emb);
  auto s = ann.annotate("def load(path): return open(path).read()",
                        {"def load(path): return open(path).read()", "alpha beta gamma"});
  CHECK(s[0] == std::nextafter(1.0, 0.0));
  CHECK(s[1] == 0.5);
}

TEST_CASE("hashed bag agrees with brute-force cosine oracle") {
  const std::vector<std::pair<std::string, std::string>> fixture = {
      {"Parse the config file and return a dict", "def parse_config(path):\n    return json.load(open(path))"},
      {"Add two numbers", "function add(a, b) { return a + b; }"},
      {"compute the square of x", "int square(int x) { return x * x; }"},
      {"Read Read read lines LINES", "def read_lines(f): return [l for l in f.read().split('\\n')]"},
  };
  HashedBagEmbedder emb;
  SimilarityAnnotator ann(emb);
  for (const auto& [q, c] : fixture) {
    double got = ann.annotate(q, {c})[0];
    CHECK(got == doctest::Approx(oracle_label(q, c)).epsilon(1e-12));
  }
  // Small bucket count forces collisions; the oracle must still agree.
  HashedBagEmbedder tiny(7);
  SimilarityAnnotator ann7(tiny);
  for (const auto& [q, c] : fixture)
    CHECK(ann7.annotate(q, {c})[0] == doctest::Approx(oracle_label(q, c, 7)).epsilon(1e-12));
}

TEST_CASE("build_groups: single query in repo of 6") {
  auto units = repo_of("r", 6);
  HashedBagEmbedder emb;
  SimilarityAnnotator ann(emb);
  auto pairs = build_groups({query_for(units[2])}, units, 5, 3, ann);
  REQUIRE(pairs.size() == 6);
  int positives = 0;
  for (const auto& p : pairs) {
    CHECK(p.group_id == "q:" + units[2].func_id);
    if (p.role == Role::positive) {
      ++positives;
      CHECK(p.code_id == units[2].func_id);
      CHECK(p.sim_train == 1.0);
    } else {
      CHECK(p.code_id != units[2].func_id);
      CHECK(p.sim_train == p.sim_annotated);
      CHECK(p.sim_train < 1.0);
    }
    CHECK(p.sim_annotated >= 0.0);
    CHECK(p.sim_annotated < 1.0);
    CHECK(p.refinement == kRefineNone);
  }
  CHECK(positives == 1);
}

TEST_CASE("build_groups: empty and counted fixtures") {
  HashedBagEmbedder emb;
  SimilarityAnnotator ann(emb);
  auto a = repo_of("a", 6), b = repo_of("b", 9);
  std::vector<FunctionUnit> all = a;
  all.insert(all.end(), b.begin(), b.end());
  CHECK(build_groups({}, all, 5, 1, ann).empty());

  std::vector<DocQuery> qs;
  for (int i = 0; i < 5; ++i) qs.push_back(query_for(a[i]));
  for (int i = 0; i < 5; ++i) qs.push_back(query_for(b[i]));
  auto pairs = build_groups(qs, all, 5, 1, ann);
  // Σ(1 + min(K, |repo| - 1)) = 10 * 6
  CHECK(pairs.size() == 60);
  int pos = 0;
  for (const auto& p : pairs) pos += p.role == Role::positive;
  CHECK(pos == 10);

  // Negatives never cross repositories.
  auto idx = index_units(all);
  for (const auto& p : pairs)
    CHECK(idx.at(p.code_id)->repo_id == idx.at(p.query_id.substr(2))->repo_id);

  // Small repo clamps.
  auto c = repo_of("c", 3);
  CHECK(build_groups({query_for(c[0])}, c, 5, 1, ann).size() == 3);
}

TEST_CASE("build_groups: query with missing origin is skipped") {
  auto units = repo_of("r", 4);
  HashedBagEmbedder emb;
  SimilarityAnnotator ann(emb);
  DocQuery ghost{"q:ghost", "r/m.py::ghost@0", "nothing"};
  auto pairs = build_groups({ghost, query_for(units[0])}, units, 5, 1, ann);
  CHECK(pairs.size() == 4);
  for (const auto& p : pairs) CHECK(p.query_id != "q:ghost");
}

TEST_CASE("annotate_pairs: order independence") {
  auto units = repo_of("r", 8);
  std::vector<DocQuery> qs;
  for (int i = 0; i < 8; ++i) qs.push_back(query_for(units[i], "shared value number " + std::to_string(i)));
  HashedBagEmbedder emb;
  SimilarityAnnotator ann(emb);
  auto mined = mine_groups(qs, units, 5, 11);
  auto texts = make_text_sources(qs, units);
  auto forward = annotate_pairs(mined, texts, ann);
  std::vector<PairRecord> reversed(mined.rbegin(), mined.rend());
  // Reversing keeps groups contiguous.
  auto backward = annotate_pairs(reversed, texts, ann);
  std::map<std::string, double> f, b;
  for (const auto& p : forward) f[p.pair_id] = p.sim_annotated;
  for (const auto& p : backward) b[p.pair_id] = p.sim_annotated;
  CHECK(f == b);
}

TEST_CASE("annotate_pairs: annotator failure drops the group after retries") {
  auto units = repo_of("r", 4);
  FailingEmbedder emb;
  SimilarityAnnotator ann(emb);
  auto qs = std::vector<DocQuery>{query_for(units[0])};
  auto out = annotate_pairs(mine_groups(qs, units, 5, 1), make_text_sources(qs, units), ann, fast_retry(2));
  CHECK(out.empty());
  CHECK(emb.calls == 3);

  SelectiveEmbedder sel;
  SimilarityAnnotator ann2(sel);
  std::vector<DocQuery> two{query_for(units[0], "bad text"), query_for(units[1], "good text")};
  auto kept = annotate_pairs(mine_groups(two, units, 5, 1), make_text_sources(two, units), ann2, fast_retry(0));
  REQUIRE(kept.size() == 4);
  for (const auto& p : kept) CHECK(p.query_id == two[1].query_id);
}

TEST_CASE("pairs.jsonl: schema and round trip") {
  auto units = repo_of("r", 6);
  HashedBagEmbedder emb;
  SimilarityAnnotator ann(emb);
  auto pairs = build_groups({query_for(units[0]), query_for(units[1])}, units, 5, 5, ann);
  pairs[1].refinement = kThresholdSelected | kAstSelected;
  auto text = to_jsonl(pairs);
  auto rows = parse_jsonl(text);
  std::vector<std::string> keys;
  for (auto it = rows[0].begin(); it != rows[0].end(); ++it) keys.push_back(it.key());
  CHECK(keys == std::vector<std::string>{"pair_id", "group_id", "query_id", "code_id", "role",
                                         "sim_annotated", "sim_train", "refinement"});
  CHECK(rows[1]["refinement"] == "threshold_selected");
  std::vector<PairRecord> back;
  for (const auto& r : rows) back.push_back(pair_record_from_json(r));
  CHECK(to_jsonl(back) == text);
  for (std::size_t i = 0; i < pairs.size(); ++i) CHECK(back[i].sim_annotated == pairs[i].sim_annotated);

  // Rebuilding from the same seed is byte-identical.
  CHECK(to_jsonl(build_groups({query_for(units[0]), query_for(units[1])}, units, 5, 5, ann)) ==
        to_jsonl(build_groups({query_for(units[0]), query_for(units[1])}, units, 5, 5, ann)));

  Json bad = rows[0];
  bad["role"] = "neutral";
  CHECK_THROWS_AS(pair_record_from_json(bad), Error);
}

TEST_CASE("every group has exactly one positive (random corpora)") {
  std::mt19937_64 rng(123);
  HashedBagEmbedder emb;
  SimilarityAnnotator ann(emb);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<FunctionUnit> units;
    std::vector<DocQuery> qs;
    std::size_t expected = 0;
    const int repos = 1 + static_cast<int>(uniform_index(rng, 4));
    for (int r = 0; r < repos; ++r) {
      const int n = 1 + static_cast<int>(uniform_index(rng, 9));
      auto rep = repo_of("repo" + std::to_string(r), n);
      for (const auto& u : rep)
        if (uniform_index(rng, 2)) {
          qs.push_back(query_for(u, "value " + u.name));
          expected += 1 + std::min(5, n - 1);
        }
      units.insert(units.end(), rep.begin(), rep.end());
    }
    auto pairs = build_groups(qs, units, 5, trial, ann);
    CHECK(pairs.size() == expected);
    for (auto [b, e] : group_ranges(pairs)) {
      int pos = 0;
      for (auto i = b; i < e; ++i) pos += pairs[i].role == Role::positive;
      CHECK(pos == 1);
    }
  }
}
