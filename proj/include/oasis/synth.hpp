#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "oasis/common.hpp"
#include "oasis/corpus.hpp"
#include "oasis/http.hpp"

namespace oasis {

enum class Role { positive, negative };

/// Refinement provenance. A pair may be selected by both strategies; the
/// serialized label keeps the strongest one (adjusted > threshold > ast).
enum RefineFlag : unsigned {
  kRefineNone = 0,
  kThresholdSelected = 1u << 0,
  kAstSelected = 1u << 1,
  kAdjusted = 1u << 2,
};

std::string refinement_label(unsigned flags);
unsigned refinement_from_label(const std::string& label);

struct PairRecord {
  std::string pair_id;
  std::string group_id;
  std::string query_id;
  std::string code_id;
  Role role = Role::negative;
  double sim_annotated = 0.0;
  double sim_train = 0.0;
  unsigned refinement = kRefineNone;
};

/// Largest label below 1.0.
inline constexpr double kMaxLabel = 0x1.fffffffffffffp-1;

/// Maps a cosine in [-1, 1] to a label in [0, 1): (1 + cos) / 2, clamped.
double label_from_cosine(double cosine) noexcept;

/// Text -> unit vector. All vectors returned by one embedder share a
/// dimension; similarity is their dot product.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual std::vector<Vec> embed(const std::vector<std::string>& texts) = 0;
  virtual bool remote() const noexcept { return false; }
};

/// Feature-hashed bag of tokens: term counts over `dim` buckets
/// (bucket = fnv1a64(token) mod dim), L2-normalised. A text without tokens
/// maps to the zero vector.
class HashedBagEmbedder final : public TextEmbedder {
 public:
  explicit HashedBagEmbedder(std::size_t dim = 4096) : dim_(dim) {}
  std::vector<Vec> embed(const std::vector<std::string>& texts) override;
  Vec embed_one(std::string_view text) const;
  std::size_t dim() const noexcept { return dim_; }

 private:
  std::size_t dim_;
};

/// POST {"texts": [...]} -> {"vectors": [[...], ...]}; vectors are
/// re-normalised on receipt.
class HttpEmbedder final : public TextEmbedder {
 public:
  explicit HttpEmbedder(Endpoint endpoint) : client_(std::move(endpoint)) {}
  std::vector<Vec> embed(const std::vector<std::string>& texts) override;
  bool remote() const noexcept override { return true; }

 private:
  JsonHttpClient client_;
};

/// Labels (query, code) text pairs with label_from_cosine of their
/// embeddings.
class SimilarityAnnotator {
 public:
  explicit SimilarityAnnotator(TextEmbedder& embedder) : embedder_(embedder) {}
  /// Labels of codes[i] against one query.
  std::vector<double> annotate(const std::string& query, const std::vector<std::string>& codes);
  TextEmbedder& embedder() noexcept { return embedder_; }

 private:
  TextEmbedder& embedder_;
};

/// Uniform sample without replacement of min(K, |repo| - 1) functions of the
/// query's repository other than its origin, reproducible from `seed`.
std::vector<std::string> mine_negatives(const DocQuery& query,
                                        const std::vector<const FunctionUnit*>& repo_units,
                                        int K, std::uint64_t seed);

/// Per-query sampling seed: derive_seed(global_seed, query_id).
std::uint64_t query_seed(std::uint64_t global_seed, const std::string& query_id);

/// Unannotated groups: for each query with a known origin unit, one
/// positive record followed by its mined negatives. group_id = query_id,
/// pair_id = "<group_id>#<index>".
std::vector<PairRecord> mine_groups(const std::vector<DocQuery>& queries,
                                    const std::vector<FunctionUnit>& units, int K,
                                    std::uint64_t global_seed);

struct TextSources {
  std::map<std::string, std::string, std::less<>> query_text;  // query_id -> docstring
  UnitIndex units;                                            // code_id -> unit
};

TextSources make_text_sources(const std::vector<DocQuery>& queries,
                              const std::vector<FunctionUnit>& units);

/// Fills sim_annotated for every pair and sets sim_train (1.0 for
/// positives, sim_annotated for negatives). Each group is annotated
/// independently in one embedding request; a group whose request still
/// fails after retries is dropped whole and logged.
std::vector<PairRecord> annotate_pairs(std::vector<PairRecord> pairs, const TextSources& texts,
                                       SimilarityAnnotator& annotator,
                                       const RetryPolicy& retry = {});

/// mine_groups followed by annotate_pairs.
std::vector<PairRecord> build_groups(const std::vector<DocQuery>& queries,
                                     const std::vector<FunctionUnit>& units, int K,
                                     std::uint64_t global_seed, SimilarityAnnotator& annotator,
                                     const RetryPolicy& retry = {});

/// Contiguous [begin, end) index ranges of records sharing a group_id.
std::vector<std::pair<std::size_t, std::size_t>> group_ranges(const std::vector<PairRecord>& pairs);

// ---- pairs.jsonl ----
Json to_json(const PairRecord& p);
PairRecord pair_record_from_json(const Json& j);
std::string to_jsonl(const std::vector<PairRecord>& pairs);
std::vector<PairRecord> load_pairs(const std::filesystem::path& path);

}  // namespace oasis
