#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "oasis/ast.hpp"
#include "oasis/common.hpp"
#include "oasis/corpus.hpp"
#include "oasis/http.hpp"
#include "oasis/synth.hpp"

namespace oasis {

/// Two-component 1-D Gaussian mixture, components ordered so mu1 < mu2.
struct MixtureFit {
  double mu1 = 0, sigma1 = 1, mu2 = 0, sigma2 = 1;
  double weight1 = 0.5;
  double s_star = 0;  // density intersection (see intersection_threshold)
  double log_likelihood = 0;
  int iterations = 0;
  std::vector<double> ll_history;  // initial fit, then one entry per EM step
};

struct GmmOptions {
  int max_iter = 200;
  double tol = 1e-6;
  double sigma_floor = 1e-4;
  bool weighted_intersection = false;
};

/// EM for a two-component mixture. Initialised from a median split of the
/// sorted sample, so the result is a pure function of the data. Stops when
/// an iteration improves the log-likelihood by less than `tol`.
/// Throws Error("degenerate_distribution") on constant data and
/// Error("invalid_argument") on fewer than 10 samples.
MixtureFit fit_gmm_1d(const std::vector<double>& sims, const GmmOptions& options = {});

/// Point in (mu1, mu2) where the component densities are equal. The
/// densities are unweighted unless `weighted`, in which case the mixture
/// weights multiply them. Equal sigmas (unweighted) give the exact midpoint;
/// when no root lies inside the interval the midpoint is returned and a
/// warning logged.
double intersection_threshold(const MixtureFit& fit, bool weighted = false);

/// Negatives whose sim_annotated exceeds s_star or their group positive's
/// sim_annotated. Sets kThresholdSelected on them.
std::vector<std::string> select_threshold_candidates(std::vector<PairRecord>& pairs, double s_star);

/// Ordered-tree edit distance, unit costs (Zhang-Shasha).
int tree_edit_distance(const AstTree& a, const AstTree& b);

/// TED(a, b) / (|a| + |b|).
double ast_distance_ratio(const AstTree& a, const AstTree& b);

/// Returns the parsed tree for a func_id, or nullptr when unavailable.
using AstLookup = std::function<const AstTree*(const std::string& func_id)>;

/// Negatives whose tree is within `ratio_max` of their group positive's
/// tree (strictly below). Sets kAstSelected. Pairs lacking a tree on either
/// side are skipped and logged.
std::vector<std::string> select_ast_candidates(std::vector<PairRecord>& pairs, const AstLookup& asts,
                                               double ratio_max, std::size_t workers = 1);

/// Parses every code referenced by `pairs`; unparseable ones are logged
/// and left out.
std::map<std::string, AstTree, std::less<>> parse_pair_asts(const std::vector<PairRecord>& pairs,
                                                            const UnitIndex& units,
                                                            const AstProvider& provider);

/// Decides whether the candidate code also answers the docstring.
class PreferenceJudge {
 public:
  virtual ~PreferenceJudge() = default;
  virtual bool candidate_satisfies(const std::string& docstring, const std::string& positive_code,
                                   const std::string& candidate_code) = 0;
  virtual bool remote() const noexcept { return false; }
};

/// Accepts iff Jaccard(doc, candidate) > fraction * Jaccard(doc, positive),
/// over alnum token sets.
class OverlapJudge final : public PreferenceJudge {
 public:
  explicit OverlapJudge(double fraction = 0.8) : fraction_(fraction) {}
  bool candidate_satisfies(const std::string& docstring, const std::string& positive_code,
                           const std::string& candidate_code) override;

 private:
  double fraction_;
};

double token_jaccard(std::string_view a, std::string_view b);

/// POST {"docstring", "code_a": positive, "code_b": candidate} ->
/// {"choice": "a" | "b" | "both"}; "b" and "both" accept.
class HttpJudge final : public PreferenceJudge {
 public:
  explicit HttpJudge(Endpoint endpoint) : client_(std::move(endpoint)) {}
  bool candidate_satisfies(const std::string& docstring, const std::string& positive_code,
                           const std::string& candidate_code) override;
  bool remote() const noexcept override { return true; }

 private:
  JsonHttpClient client_;
};

inline constexpr double kAdjustedCap = 0.999;

/// sim * (1 + delta_s), capped at kAdjustedCap.
double adjusted_similarity(double sim_annotated, double delta_s);

/// Asks the judge about every candidate; accepted ones get
/// sim_train = adjusted_similarity(sim_annotated, delta_s) and kAdjusted.
/// Roles never change. A candidate whose judge call fails after retries is
/// left unchanged and logged. Returns the ids that were adjusted.
std::vector<std::string> adjudicate_and_adjust(std::vector<PairRecord>& pairs,
                                               const std::vector<std::string>& candidates,
                                               const TextSources& texts, PreferenceJudge& judge,
                                               double delta_s, const RetryPolicy& retry = {});

/// Mean over groups (size >= 2) of the nDCG of annotator B's ordering,
/// with annotator A's labels as gains (linear gain, log2(rank + 1)
/// discount). Throws Error("invalid_argument") on shape mismatch or when
/// no group qualifies.
double annotator_consistency_ndcg(const std::vector<std::vector<double>>& labels_a,
                                  const std::vector<std::vector<double>>& labels_b);

struct RefineConfig {
  double s_star = 0.4;
  double ast_ratio_max = 0.25;
  double delta_s = 0.1;
  bool threshold_strategy = true;
  bool ast_strategy = true;
  GmmOptions gmm;
};

struct RefineOutcome {
  std::vector<PairRecord> pairs;
  Json report;
};

/// Full refinement pass: GMM fit over all sim_annotated values (reported
/// only; selection uses cfg.s_star), both selection strategies, one
/// adjudication per distinct candidate, adjustment.
RefineOutcome refine_pairs(std::vector<PairRecord> pairs, const std::vector<FunctionUnit>& units,
                           const std::vector<DocQuery>& queries, PreferenceJudge& judge,
                           const AstProvider& provider, const RefineConfig& cfg,
                           const RetryPolicy& retry = {});

}  // namespace oasis
