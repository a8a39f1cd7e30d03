#include "oasis/refine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_map>

#include <spdlog/spdlog.h>

namespace oasis {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

double log_normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - kLogSqrt2Pi;
}

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double mixture_ll(const std::vector<double>& x, double w1, double m1, double s1, double m2, double s2) {
  double ll = 0;
  const double lw1 = std::log(w1), lw2 = std::log(1 - w1);
  for (double v : x) ll += log_sum_exp(lw1 + log_normal_pdf(v, m1, s1), lw2 + log_normal_pdf(v, m2, s2));
  return ll;
}

}  // namespace

MixtureFit fit_gmm_1d(const std::vector<double>& sims, const GmmOptions& opt) {
  if (sims.size() < 10) throw Error("invalid_argument", "GMM needs at least 10 samples");
  const auto [lo, hi] = std::minmax_element(sims.begin(), sims.end());
  if (*lo == *hi) throw Error("degenerate_distribution", "all similarity values are identical");

  std::vector<double> sorted = sims;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t half = sorted.size() / 2;
  auto moments = [&](std::size_t b, std::size_t e) {
    double m = 0;
    for (std::size_t i = b; i < e; ++i) m += sorted[i];
    m /= static_cast<double>(e - b);
    double v = 0;
    for (std::size_t i = b; i < e; ++i) v += (sorted[i] - m) * (sorted[i] - m);
    return std::pair{m, std::max(std::sqrt(v / static_cast<double>(e - b)), opt.sigma_floor)};
  };
  auto [m1, s1] = moments(0, half);
  auto [m2, s2] = moments(half, sorted.size());
  double w1 = 0.5;

  MixtureFit fit;
  double ll = mixture_ll(sims, w1, m1, s1, m2, s2);
  fit.ll_history.push_back(ll);

  const std::size_t n = sims.size();
  std::vector<double> r(n);
  int it = 0;
  while (it < opt.max_iter) {
    // E-step
    const double lw1 = std::log(w1), lw2 = std::log(1 - w1);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = lw1 + log_normal_pdf(sims[i], m1, s1);
      const double b = lw2 + log_normal_pdf(sims[i], m2, s2);
      r[i] = std::exp(a - log_sum_exp(a, b));
    }
    // M-step
    double n1 = 0, sum1 = 0, sum2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      n1 += r[i];
      sum1 += r[i] * sims[i];
      sum2 += (1 - r[i]) * sims[i];
    }
    const double n2 = static_cast<double>(n) - n1;
    if (n1 <= 0 || n2 <= 0) break;  // a component emptied; keep last parameters
    const double nm1 = sum1 / n1, nm2 = sum2 / n2;
    double v1 = 0, v2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      v1 += r[i] * (sims[i] - nm1) * (sims[i] - nm1);
      v2 += (1 - r[i]) * (sims[i] - nm2) * (sims[i] - nm2);
    }
    m1 = nm1;
    m2 = nm2;
    s1 = std::max(std::sqrt(v1 / n1), opt.sigma_floor);
    s2 = std::max(std::sqrt(v2 / n2), opt.sigma_floor);
    w1 = std::clamp(n1 / static_cast<double>(n), 1e-12, 1 - 1e-12);
    ++it;
    const double next = mixture_ll(sims, w1, m1, s1, m2, s2);
    fit.ll_history.push_back(next);
    const double gain = next - ll;
    ll = next;
    if (gain < opt.tol) break;
  }

  if (m1 > m2) {
    std::swap(m1, m2);
    std::swap(s1, s2);
    w1 = 1 - w1;
  }
  fit.mu1 = m1;
  fit.sigma1 = s1;
  fit.mu2 = m2;
  fit.sigma2 = s2;
  fit.weight1 = w1;
  fit.log_likelihood = ll;
  fit.iterations = it;
  fit.s_star = intersection_threshold(fit, opt.weighted_intersection);
  return fit;
}

double intersection_threshold(const MixtureFit& f, bool weighted) {
  const double mid = (f.mu1 + f.mu2) / 2;
  if (f.sigma1 == f.sigma2 && (!weighted || f.weight1 == 0.5)) return mid;

  const double v1 = f.sigma1 * f.sigma1, v2 = f.sigma2 * f.sigma2;
  const double A = 1 / (2 * v2) - 1 / (2 * v1);
  const double B = f.mu1 / v1 - f.mu2 / v2;
  double C = f.mu2 * f.mu2 / (2 * v2) - f.mu1 * f.mu1 / (2 * v1) + std::log(f.sigma2 / f.sigma1);
  if (weighted) C += std::log(f.weight1 / (1 - f.weight1));

  std::vector<double> roots;
  if (A == 0) {
    if (B != 0) roots.push_back(-C / B);
  } else {
    const double disc = B * B - 4 * A * C;
    if (disc >= 0) {
      // numerically stable pair
      const double q = -0.5 * (B + std::copysign(std::sqrt(disc), B));
      if (q != 0) roots.push_back(C / q);
      roots.push_back(q / A);
    }
  }
  double best = mid;
  bool found = false;
  for (double x : roots) {
    if (!(x > f.mu1 && x < f.mu2)) continue;
    if (!found || std::abs(x - mid) < std::abs(best - mid)) best = x;
    found = true;
  }
  if (!found) {
    spdlog::warn("no density intersection inside ({}, {}); using the midpoint", f.mu1, f.mu2);
    return mid;
  }
  return best;
}

std::vector<std::string> select_threshold_candidates(std::vector<PairRecord>& pairs, double s_star) {
  std::vector<std::string> out;
  for (auto [b, e] : group_ranges(pairs)) {
    const PairRecord* pos = nullptr;
    for (auto i = b; i < e; ++i)
      if (pairs[i].role == Role::positive) pos = &pairs[i];
    for (auto i = b; i < e; ++i) {
      auto& p = pairs[i];
      if (p.role != Role::negative) continue;
      if (p.sim_annotated > s_star || (pos && p.sim_annotated > pos->sim_annotated)) {
        p.refinement |= kThresholdSelected;
        out.push_back(p.pair_id);
      }
    }
  }
  return out;
}

namespace {

// Post-order view with 1-based indices, as Zhang-Shasha expects.
struct PostorderTree {
  std::vector<int> label;     // interned
  std::vector<int> leftmost;  // leftmost leaf descendant
  std::vector<int> keyroots;
};

PostorderTree postorder_view(const AstTree& t, std::unordered_map<std::string, int>& intern) {
  const auto order = t.postorder();
  const std::size_t n = order.size();
  std::vector<int> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[static_cast<std::size_t>(order[i])] = static_cast<int>(i + 1);
  PostorderTree v;
  v.label.assign(n + 1, 0);
  v.leftmost.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int node = order[i];
    const int k = static_cast<int>(i + 1);
    auto [it, _] = intern.emplace(t.label(node), static_cast<int>(intern.size()));
    v.label[k] = it->second;
    const auto& ch = t.children(node);
    v.leftmost[k] = ch.empty() ? k : v.leftmost[pos[static_cast<std::size_t>(ch.front())]];
  }
  std::vector<char> seen(n + 2, 0);
  for (int k = static_cast<int>(n); k >= 1; --k) {
    if (!seen[v.leftmost[k]]) {
      seen[v.leftmost[k]] = 1;
      v.keyroots.push_back(k);
    }
  }
  std::reverse(v.keyroots.begin(), v.keyroots.end());
  return v;
}

}  // namespace

int tree_edit_distance(const AstTree& a, const AstTree& b) {
  std::unordered_map<std::string, int> intern;
  const auto A = postorder_view(a, intern);
  const auto B = postorder_view(b, intern);
  const int n = static_cast<int>(A.label.size()) - 1;
  const int m = static_cast<int>(B.label.size()) - 1;
  const auto W = static_cast<std::size_t>(m + 1);
  std::vector<int> td(static_cast<std::size_t>(n + 1) * W, 0);
  std::vector<int> fd(static_cast<std::size_t>(n + 2) * static_cast<std::size_t>(m + 2), 0);
  const auto FW = static_cast<std::size_t>(m + 2);
  auto TD = [&](int i, int j) -> int& { return td[static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j)]; };
  auto FD = [&](int i, int j) -> int& { return fd[static_cast<std::size_t>(i) * FW + static_cast<std::size_t>(j)]; };

  for (int i : A.keyroots) {
    for (int j : B.keyroots) {
      const int li = A.leftmost[i], lj = B.leftmost[j];
      FD(0, 0) = 0;
      for (int di = li; di <= i; ++di) FD(di - li + 1, 0) = FD(di - li, 0) + 1;
      for (int dj = lj; dj <= j; ++dj) FD(0, dj - lj + 1) = FD(0, dj - lj) + 1;
      for (int di = li; di <= i; ++di) {
        for (int dj = lj; dj <= j; ++dj) {
          const int x = di - li + 1, y = dj - lj + 1;
          const int del = FD(x - 1, y) + 1, ins = FD(x, y - 1) + 1;
          if (A.leftmost[di] == li && B.leftmost[dj] == lj) {
            const int rel = FD(x - 1, y - 1) + (A.label[di] != B.label[dj]);
            FD(x, y) = std::min({del, ins, rel});
            TD(di, dj) = FD(x, y);
          } else {
            const int sub = FD(A.leftmost[di] - li, B.leftmost[dj] - lj) + TD(di, dj);
            FD(x, y) = std::min({del, ins, sub});
          }
        }
      }
    }
  }
  return TD(n, m);
}

double ast_distance_ratio(const AstTree& a, const AstTree& b) {
  return static_cast<double>(tree_edit_distance(a, b)) /
         static_cast<double>(a.node_count() + b.node_count());
}

std::vector<std::string> select_ast_candidates(std::vector<PairRecord>& pairs, const AstLookup& asts,
                                               double ratio_max, std::size_t workers) {
  const auto ranges = group_ranges(pairs);
  std::vector<char> hit(pairs.size(), 0);
  parallel_for(ranges.size(), workers, [&](std::size_t g) {
    const auto [b, e] = ranges[g];
    const PairRecord* pos = nullptr;
    for (auto i = b; i < e; ++i)
      if (pairs[i].role == Role::positive) pos = &pairs[i];
    if (!pos) return;
    const AstTree* ref = asts(pos->code_id);
    for (auto i = b; i < e; ++i) {
      const auto& p = pairs[i];
      if (p.role != Role::negative) continue;
      const AstTree* cand = asts(p.code_id);
      if (!ref || !cand) {
        spdlog::info("{}: no syntax tree for one side; skipped by the AST strategy", p.pair_id);
        continue;
      }
      if (ast_distance_ratio(*cand, *ref) < ratio_max) hit[i] = 1;
    }
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!hit[i]) continue;
    pairs[i].refinement |= kAstSelected;
    out.push_back(pairs[i].pair_id);
  }
  return out;
}

std::map<std::string, AstTree, std::less<>> parse_pair_asts(const std::vector<PairRecord>& pairs,
                                                            const UnitIndex& units,
                                                            const AstProvider& provider) {
  std::map<std::string, AstTree, std::less<>> out;
  std::set<std::string> tried;
  for (const auto& p : pairs) {
    if (!tried.insert(p.code_id).second) continue;
    auto it = units.find(p.code_id);
    if (it == units.end()) {
      spdlog::info("{}: source unavailable for AST parsing", p.code_id);
      continue;
    }
    const std::string lang = unit_language(*it->second);
    try {
      out.emplace(p.code_id, provider.parse(it->second->source, lang));
    } catch (const Error& ex) {
      spdlog::info("{}: {}", p.code_id, ex.what());
    }
  }
  return out;
}

double token_jaccard(std::string_view a, std::string_view b) {
  const auto ta = alnum_tokens(a), tb = alnum_tokens(b);
  const std::set<std::string> sa(ta.begin(), ta.end()), sb(tb.begin(), tb.end());
  if (sa.empty() && sb.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& t : sa) inter += sb.count(t);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

bool OverlapJudge::candidate_satisfies(const std::string& docstring, const std::string& positive_code,
                                       const std::string& candidate_code) {
  return token_jaccard(docstring, candidate_code) > fraction_ * token_jaccard(docstring, positive_code);
}

bool HttpJudge::candidate_satisfies(const std::string& docstring, const std::string& positive_code,
                                    const std::string& candidate_code) {
  const Json reply =
      client_.post(Json{{"docstring", docstring}, {"code_a", positive_code}, {"code_b", candidate_code}});
  if (!reply.contains("choice") || !reply["choice"].is_string())
    throw Error("http_error", "judge reply lacks a choice");
  const auto choice = reply["choice"].get<std::string>();
  if (choice == "b" || choice == "both") return true;
  if (choice == "a") return false;
  throw Error("http_error", "unknown judge choice '" + choice + "'");
}

double adjusted_similarity(double sim_annotated, double delta_s) {
  return std::min(sim_annotated * (1 + delta_s), kAdjustedCap);
}

std::vector<std::string> adjudicate_and_adjust(std::vector<PairRecord>& pairs,
                                               const std::vector<std::string>& candidates,
                                               const TextSources& texts, PreferenceJudge& judge,
                                               double delta_s, const RetryPolicy& retry) {
  if (!(delta_s > 0)) throw Error("invalid_argument", "delta_s must be positive");
  std::map<std::string, std::size_t, std::less<>> by_id;
  std::map<std::string, std::size_t, std::less<>> positive_of;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    by_id.emplace(pairs[i].pair_id, i);
    if (pairs[i].role == Role::positive) positive_of.emplace(pairs[i].group_id, i);
  }
  std::vector<std::size_t> todo;
  std::set<std::size_t> seen;
  for (const auto& id : candidates) {
    auto it = by_id.find(id);
    if (it == by_id.end() || pairs[it->second].role != Role::negative) continue;
    if (seen.insert(it->second).second) todo.push_back(it->second);
  }

  std::vector<char> accept(todo.size(), 0);
  const std::size_t workers = judge.remote() ? retry.max_in_flight : 1;
  parallel_for(todo.size(), workers, [&](std::size_t k) {
    const auto& p = pairs[todo[k]];
    auto q = texts.query_text.find(p.query_id);
    auto pos = positive_of.find(p.group_id);
    auto cand = texts.units.find(p.code_id);
    if (q == texts.query_text.end() || pos == positive_of.end() || cand == texts.units.end()) {
      spdlog::warn("{}: texts unavailable for adjudication; unchanged", p.pair_id);
      return;
    }
    auto pos_unit = texts.units.find(pairs[pos->second].code_id);
    if (pos_unit == texts.units.end()) {
      spdlog::warn("{}: positive code unavailable; unchanged", p.pair_id);
      return;
    }
    try {
      accept[k] = with_retries(retry, p.pair_id, [&] {
        return judge.candidate_satisfies(q->second, pos_unit->second->source, cand->second->source);
      });
    } catch (const std::exception& ex) {
      spdlog::warn("{}: judge failed: {}; unchanged", p.pair_id, ex.what());
    }
  });

  std::vector<std::string> adjusted;
  for (std::size_t k = 0; k < todo.size(); ++k) {
    if (!accept[k]) continue;
    auto& p = pairs[todo[k]];
    p.sim_train = adjusted_similarity(p.sim_annotated, delta_s);
    p.refinement |= kAdjusted;
    adjusted.push_back(p.pair_id);
  }
  return adjusted;
}

double annotator_consistency_ndcg(const std::vector<std::vector<double>>& a,
                                  const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) throw Error("invalid_argument", "annotators labeled different groups");
  double total = 0;
  std::size_t used = 0;
  for (std::size_t g = 0; g < a.size(); ++g) {
    const auto& ga = a[g];
    const auto& gb = b[g];
    if (ga.size() != gb.size()) throw Error("invalid_argument", "group sizes differ between annotators");
    if (ga.size() < 2) continue;
    std::vector<std::size_t> order(ga.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return gb[x] > gb[y]; });
    std::vector<double> ideal = ga;
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double dcg = 0, idcg = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      const double disc = std::log2(static_cast<double>(r) + 2);
      dcg += ga[order[r]] / disc;
      idcg += ideal[r] / disc;
    }
    total += idcg > 0 ? dcg / idcg : 1.0;
    ++used;
  }
  if (used == 0) throw Error("invalid_argument", "no group with at least two pairs");
  return total / static_cast<double>(used);
}

RefineOutcome refine_pairs(std::vector<PairRecord> pairs, const std::vector<FunctionUnit>& units,
                           const std::vector<DocQuery>& queries, PreferenceJudge& judge,
                           const AstProvider& provider, const RefineConfig& cfg,
                           const RetryPolicy& retry) {
  Json report;
  report["s_star"] = cfg.s_star;

  std::vector<double> sims;
  sims.reserve(pairs.size());
  for (const auto& p : pairs) sims.push_back(p.sim_annotated);
  try {
    const auto fit = fit_gmm_1d(sims, cfg.gmm);
    report["s_star_gmm"] = fit.s_star;
    report["mixture"] = Json{{"mu1", fit.mu1},          {"sigma1", fit.sigma1},
                             {"mu2", fit.mu2},          {"sigma2", fit.sigma2},
                             {"weight1", fit.weight1},  {"log_likelihood", fit.log_likelihood},
                             {"iterations", fit.iterations}};
    spdlog::info("mixture intersection {:.4f}; selecting with s* = {}", fit.s_star, cfg.s_star);
  } catch (const Error& ex) {
    spdlog::warn("mixture fit skipped: {}", ex.what());
    report["s_star_gmm"] = nullptr;
    report["mixture"] = nullptr;
  }

  std::vector<std::string> by_threshold, by_ast;
  if (cfg.threshold_strategy) by_threshold = select_threshold_candidates(pairs, cfg.s_star);
  if (cfg.ast_strategy) {
    const auto index = index_units(units);
    const auto trees = parse_pair_asts(pairs, index, provider);
    by_ast = select_ast_candidates(
        pairs,
        [&](const std::string& id) -> const AstTree* {
          auto it = trees.find(id);
          return it == trees.end() ? nullptr : &it->second;
        },
        cfg.ast_ratio_max);
  }

  std::vector<std::string> candidates;
  std::size_t both = 0;
  for (const auto& p : pairs) {
    const bool t = p.refinement & kThresholdSelected, a = p.refinement & kAstSelected;
    if (t || a) candidates.push_back(p.pair_id);
    both += t && a;
  }
  const auto adjusted =
      adjudicate_and_adjust(pairs, candidates, make_text_sources(queries, units), judge, cfg.delta_s, retry);

  std::size_t negatives = 0;
  for (const auto& p : pairs) negatives += p.role == Role::negative;
  auto frac = [&](std::size_t k) { return negatives ? static_cast<double>(k) / static_cast<double>(negatives) : 0.0; };
  report["delta_s"] = cfg.delta_s;
  report["ast_ratio_max"] = cfg.ast_ratio_max;
  report["counts"] = Json{{"pairs", pairs.size()},
                          {"negatives", negatives},
                          {"threshold_selected", by_threshold.size()},
                          {"ast_selected", by_ast.size()},
                          {"both_selected", both},
                          {"candidates", candidates.size()},
                          {"adjusted", adjusted.size()}};
  report["fractions"] = Json{{"threshold_selected", frac(by_threshold.size())},
                             {"ast_selected", frac(by_ast.size())},
                             {"adjusted", frac(adjusted.size())}};
  report["selected"] = Json{{"threshold", by_threshold}, {"ast", by_ast}, {"adjusted", adjusted}};
  spdlog::info("refine: {} threshold, {} AST, {} adjusted of {} negatives", by_threshold.size(),
               by_ast.size(), adjusted.size(), negatives);
  return {std::move(pairs), std::move(report)};
}

}  // namespace oasis
