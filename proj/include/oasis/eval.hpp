#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "oasis/common.hpp"
#include "oasis/synth.hpp"
#include "oasis/train.hpp"

namespace oasis {

struct EvalQuery {
  std::string query_id;
  std::string text;
  std::vector<std::string> target_ids;
};

struct EvalCandidate {
  std::string code_id;
  std::string text;
};

struct EvalDataset {
  std::vector<EvalQuery> queries;
  std::vector<EvalCandidate> candidates;

  /// Unique ids, every target among the candidates. Throws Error("schema_error").
  void validate() const;
};

/// eval.jsonl: one record per line, either
///   {"kind":"query","query_id":..,"text":..,"target_ids":[..]} or
///   {"kind":"candidate","code_id":..,"text":..}
std::string to_jsonl(const EvalDataset& ds);
EvalDataset eval_dataset_from_jsonl(std::string_view text);
EvalDataset load_eval_dataset(const std::filesystem::path& path);

/// Batch text encoder producing vectors of one dimension.
using EncodeFn = std::function<std::vector<Vec>(const std::vector<std::string>&)>;

EncodeFn encoder_of(const EncoderModel& model);
EncodeFn encoder_of(TextEmbedder& embedder);

struct Ranking {
  std::string query_id;
  std::vector<std::string> ranked;  // code ids, best first
  std::vector<double> scores;       // cosine, aligned with `ranked`
};

/// Candidates by descending cosine to each query; equal cosines are
/// ordered by code_id. Throws Error("invalid_argument") with no candidates.
std::vector<Ranking> rank_candidates(const EncodeFn& encode, const EvalDataset& ds);

/// 1-based rank of the first target in `ranked`, if any.
std::optional<std::size_t> first_target_rank(const std::vector<std::string>& ranked,
                                             const std::vector<std::string>& targets);

/// Mean of 1/rank over queries, counting ranks beyond k (or absent) as 0.
/// Throws Error("invalid_argument") when there are no queries or k < 1.
double mrr_at_k(const std::vector<std::optional<std::size_t>>& ranks, std::size_t k);

double average_precision(const std::vector<std::string>& ranked, const std::vector<std::string>& relevant);

/// Mean average precision; relevance sets must be non-empty.
double map_metric(const std::vector<std::vector<std::string>>& ranked,
                  const std::vector<std::vector<std::string>>& relevant);

struct EvalReport {
  std::vector<std::string> query_ids;
  std::vector<std::optional<std::size_t>> ranks;  // first-target rank, empty beyond k_cutoff
  double mrr = 0;
  double map = 0;
  std::size_t k_cutoff = 1000;
  std::vector<std::string> hard_subset;

  Json to_json() const;
};

EvalReport evaluate(const EncodeFn& encode, const EvalDataset& ds, std::size_t k = 1000);

/// Queries every report ranks below first. Needs at least two reports over
/// the same query ids (Error("invalid_argument") otherwise).
std::vector<std::string> hard_subset(const std::vector<EvalReport>& reports);

struct GridRow {
  double delta_s = 0;
  std::optional<double> mrr;  // empty when the run failed
  std::string error;
};

struct GridResult {
  std::vector<GridRow> rows;
  std::optional<double> best_delta_s;  // first value reaching the highest MRR
  Json to_json() const;
};

/// Runs `run(delta_s)` for each value; a throwing run marks its row failed
/// and the others continue.
GridResult grid_search_delta_s(const std::vector<double>& values, const std::function<double(double)>& run);

struct MdsResult {
  Mat coords;  // n x 2
  std::array<double, 2> eigenvalues{};
};

/// Classical MDS on distance 1 - cosine: double-centred squared distances,
/// top two eigenpairs by shifted power iteration with deflation.
/// A missing positive eigenvalue leaves a zero column and logs a warning.
MdsResult mds_coords(const std::vector<Vec>& vectors, double tol = 1e-10, int max_iter = 10000);

std::string mds_csv(const std::vector<std::string>& ids, const Mat& coords);

}  // namespace oasis
