#include "oasis/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <spdlog/spdlog.h>

namespace oasis {

void EvalDataset::validate() const {
  std::set<std::string, std::less<>> codes, qids;
  for (const auto& c : candidates)
    if (!codes.insert(c.code_id).second) throw Error("schema_error", "duplicate candidate " + c.code_id);
  for (const auto& q : queries) {
    if (!qids.insert(q.query_id).second) throw Error("schema_error", "duplicate query " + q.query_id);
    if (q.target_ids.empty()) throw Error("schema_error", q.query_id + " has no targets");
    for (const auto& t : q.target_ids)
      if (!codes.count(t)) throw Error("schema_error", q.query_id + " targets unknown candidate " + t);
  }
}

std::string to_jsonl(const EvalDataset& ds) {
  std::string out;
  for (const auto& q : ds.queries) {
    Json j;
    j["kind"] = "query";
    j["query_id"] = q.query_id;
    j["text"] = q.text;
    j["target_ids"] = q.target_ids;
    out += j.dump() + "\n";
  }
  for (const auto& c : ds.candidates) {
    Json j;
    j["kind"] = "candidate";
    j["code_id"] = c.code_id;
    j["text"] = c.text;
    out += j.dump() + "\n";
  }
  return out;
}

EvalDataset eval_dataset_from_jsonl(std::string_view text) {
  EvalDataset ds;
  for (const auto& j : parse_jsonl(text)) {
    try {
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "query")
        ds.queries.push_back({j.at("query_id").get<std::string>(), j.at("text").get<std::string>(),
                              j.at("target_ids").get<std::vector<std::string>>()});
      else if (kind == "candidate")
        ds.candidates.push_back({j.at("code_id").get<std::string>(), j.at("text").get<std::string>()});
      else
        throw Error("schema_error", "unknown record kind '" + kind + "'");
    } catch (const Json::exception& e) {
      throw Error("schema_error", e.what());
    }
  }
  ds.validate();
  return ds;
}

EvalDataset load_eval_dataset(const std::filesystem::path& path) { return eval_dataset_from_jsonl(read_file(path)); }

EncodeFn encoder_of(const EncoderModel& model) {
  return [model](const std::vector<std::string>& texts) {
    std::vector<Vec> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(model.encode(t));
    return out;
  };
}

EncodeFn encoder_of(TextEmbedder& embedder) {
  return [&embedder](const std::vector<std::string>& texts) { return embedder.embed(texts); };
}

std::vector<Ranking> rank_candidates(const EncodeFn& encode, const EvalDataset& ds) {
  if (ds.candidates.empty()) throw Error("invalid_argument", "no candidates to rank");
  std::vector<std::string> ctext, qtext;
  for (const auto& c : ds.candidates) ctext.push_back(c.text);
  for (const auto& q : ds.queries) qtext.push_back(q.text);
  const auto cv = encode(ctext);
  const auto qv = encode(qtext);

  std::vector<Ranking> out;
  out.reserve(ds.queries.size());
  std::vector<double> score(ds.candidates.size());
  std::vector<std::size_t> order(ds.candidates.size());
  for (std::size_t qi = 0; qi < ds.queries.size(); ++qi) {
    const double qn = qv[qi].norm();
    for (std::size_t ci = 0; ci < cv.size(); ++ci) {
      const double denom = qn * cv[ci].norm();
      score[ci] = denom > 0 ? qv[qi].dot(cv[ci]) / denom : 0.0;
    }
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (score[a] != score[b]) return score[a] > score[b];
      return ds.candidates[a].code_id < ds.candidates[b].code_id;
    });
    Ranking r;
    r.query_id = ds.queries[qi].query_id;
    for (auto i : order) {
      r.ranked.push_back(ds.candidates[i].code_id);
      r.scores.push_back(score[i]);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::optional<std::size_t> first_target_rank(const std::vector<std::string>& ranked,
                                             const std::vector<std::string>& targets) {
  const std::set<std::string, std::less<>> t(targets.begin(), targets.end());
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (t.count(ranked[i])) return i + 1;
  return std::nullopt;
}

double mrr_at_k(const std::vector<std::optional<std::size_t>>& ranks, std::size_t k) {
  if (ranks.empty()) throw Error("invalid_argument", "no queries");
  if (k < 1) throw Error("invalid_argument", "k must be >= 1");
  double sum = 0;
  for (const auto& r : ranks)
    if (r && *r <= k) sum += 1.0 / static_cast<double>(*r);
  return sum / static_cast<double>(ranks.size());
}

double average_precision(const std::vector<std::string>& ranked, const std::vector<std::string>& relevant) {
  if (relevant.empty()) throw Error("invalid_argument", "empty relevance set");
  const std::set<std::string, std::less<>> rel(relevant.begin(), relevant.end());
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (!rel.count(ranked[i])) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(rel.size());
}

double map_metric(const std::vector<std::vector<std::string>>& ranked,
                  const std::vector<std::vector<std::string>>& relevant) {
  if (ranked.size() != relevant.size()) throw Error("invalid_argument", "ranked/relevant size mismatch");
  if (ranked.empty()) throw Error("invalid_argument", "no queries");
  double sum = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) sum += average_precision(ranked[i], relevant[i]);
  return sum / static_cast<double>(ranked.size());
}

Json EvalReport::to_json() const {
  Json j;
  j["mrr"] = mrr;
  j["mrr_percent"] = 100.0 * mrr;
  j["map"] = map;
  j["k_cutoff"] = k_cutoff;
  j["queries"] = query_ids.size();
  Json ranks_j = Json::object();
  for (std::size_t i = 0; i < query_ids.size(); ++i)
    ranks_j[query_ids[i]] = ranks[i] ? Json(*ranks[i]) : Json(nullptr);
  j["per_query_rank"] = std::move(ranks_j);
  j["hard_subset"] = hard_subset;
  return j;
}

EvalReport evaluate(const EncodeFn& encode, const EvalDataset& ds, std::size_t k) {
  const auto rankings = rank_candidates(encode, ds);
  EvalReport rep;
  rep.k_cutoff = k;
  std::vector<std::vector<std::string>> ranked, relevant;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    rep.query_ids.push_back(ds.queries[i].query_id);
    auto r = first_target_rank(rankings[i].ranked, ds.queries[i].target_ids);
    if (r && *r > k) r.reset();
    rep.ranks.push_back(r);
    ranked.push_back(rankings[i].ranked);
    relevant.push_back(ds.queries[i].target_ids);
    if (!r || *r > 1) rep.hard_subset.push_back(ds.queries[i].query_id);
  }
  rep.mrr = mrr_at_k(rep.ranks, k);
  rep.map = map_metric(ranked, relevant);
  return rep;
}

std::vector<std::string> hard_subset(const std::vector<EvalReport>& reports) {
  if (reports.size() < 2) throw Error("invalid_argument", "hard subset needs at least two reports");
  for (const auto& r : reports)
    if (r.query_ids != reports.front().query_ids) throw Error("invalid_argument", "reports cover different queries");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < reports.front().query_ids.size(); ++i) {
    bool all_miss = true;
    for (const auto& r : reports) all_miss = all_miss && !(r.ranks[i] && *r.ranks[i] == 1);
    if (all_miss) out.push_back(reports.front().query_ids[i]);
  }
  return out;
}

Json GridResult::to_json() const {
  Json rows_j = Json::array();
  for (const auto& r : rows) {
    Json j;
    j["delta_s"] = r.delta_s;
    j["mrr"] = r.mrr ? Json(*r.mrr) : Json(nullptr);
    j["mrr_percent"] = r.mrr ? Json(100.0 * *r.mrr) : Json(nullptr);
    j["status"] = r.mrr ? "ok" : "failed";
    if (!r.error.empty()) j["error"] = r.error;
    rows_j.push_back(std::move(j));
  }
  Json j;
  j["rows"] = std::move(rows_j);
  j["best_delta_s"] = best_delta_s ? Json(*best_delta_s) : Json(nullptr);
  return j;
}

GridResult grid_search_delta_s(const std::vector<double>& values, const std::function<double(double)>& run) {
  if (values.empty()) throw Error("invalid_argument", "empty delta_s grid");
  GridResult g;
  double best = -1;
  for (double v : values) {
    GridRow row;
    row.delta_s = v;
    try {
      row.mrr = run(v);
    } catch (const std::exception& e) {
      row.error = e.what();
      spdlog::warn("grid value {} failed: {}", v, e.what());
    }
    if (row.mrr && *row.mrr > best) {
      best = *row.mrr;
      g.best_delta_s = v;
    }
    g.rows.push_back(std::move(row));
  }
  return g;
}

// ---- MDS ----

namespace {

struct Eigenpair {
  double value = 0;
  Vec vector;
  bool converged = false;
};

// Dominant (largest magnitude) eigenpair of a symmetric matrix. Converged
// when the residual |Av - lambda v| falls below tol * max(1, |lambda|).
Eigenpair power_iteration(const Mat& A, double tol, int max_iter, std::mt19937_64& rng) {
  const auto n = A.rows();
  Eigenpair e;
  e.vector.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) e.vector[i] = uniform_unit(rng) - 0.5;
  e.vector.normalize();
  for (int it = 0; it < max_iter; ++it) {
    const Vec w = A * e.vector;
    e.value = e.vector.dot(w);
    if ((w - e.value * e.vector).norm() <= tol * std::max(1.0, std::abs(e.value))) {
      e.converged = true;
      break;
    }
    const double nw = w.norm();
    if (nw == 0) break;
    e.vector = w / nw;
  }
  return e;
}

// Algebraically largest eigenpair. A negative dominant eigenvalue, or a
// stalled iteration (opposite eigenvalues of equal magnitude), calls for a
// spectrum shift that makes the matrix positive semidefinite.
Eigenpair top_eigenpair(const Mat& A, double tol, int max_iter, std::mt19937_64& rng) {
  auto e = power_iteration(A, tol, max_iter, rng);
  if (e.converged && e.value >= 0) return e;
  double shift = e.converged ? -e.value : 0.0;
  if (!e.converged)
    for (Eigen::Index i = 0; i < A.rows(); ++i) shift = std::max(shift, A.row(i).cwiseAbs().sum());
  auto s = power_iteration(A + shift * Mat::Identity(A.rows(), A.cols()), tol, max_iter, rng);
  s.value -= shift;
  return s;
}

}  // namespace

MdsResult mds_coords(const std::vector<Vec>& vectors, double tol, int max_iter) {
  const auto n = static_cast<Eigen::Index>(vectors.size());
  if (n < 3) throw Error("invalid_argument", "MDS needs at least three vectors");
  Mat D2(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& a = vectors[static_cast<std::size_t>(i)];
      const auto& b = vectors[static_cast<std::size_t>(j)];
      const double d = i == j ? 0.0 : 1.0 - a.dot(b) / (a.norm() * b.norm());
      D2(i, j) = d * d;
    }
  const Mat J = Mat::Identity(n, n) - Mat::Constant(n, n, 1.0 / static_cast<double>(n));
  Mat B = -0.5 * J * D2 * J;
  B = 0.5 * (B + B.transpose());

  MdsResult out;
  out.coords = Mat::Zero(n, 2);
  std::mt19937_64 rng(0x6d6473);
  Mat work = B;
  const double scale = std::max(1.0, B.cwiseAbs().maxCoeff());
  for (int k = 0; k < 2; ++k) {
    const auto top = top_eigenpair(work, tol, max_iter, rng);
    const double lambda = top.value;
    const Vec& v = top.vector;
    if (!top.converged) spdlog::warn("MDS: power iteration for component {} did not converge", k + 1);
    out.eigenvalues[static_cast<std::size_t>(k)] = lambda;
    if (lambda <= 1e-12 * scale) {
      spdlog::warn("MDS: eigenvalue {} of component {} is not positive; coordinate set to 0", lambda, k + 1);
      out.eigenvalues[static_cast<std::size_t>(k)] = std::max(lambda, 0.0);
      continue;
    }
    out.coords.col(k) = v * std::sqrt(lambda);
    work -= lambda * v * v.transpose();
  }
  return out;
}

std::string mds_csv(const std::vector<std::string>& ids, const Mat& coords) {
  if (static_cast<Eigen::Index>(ids.size()) != coords.rows()) throw Error("invalid_argument", "id/coordinate count mismatch");
  std::string out = "id,x,y\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::string id = ids[i];
    if (id.find_first_of(",\"\n") != std::string::npos) {
      std::string q = "\"";
      for (char c : id) q += c == '"' ? std::string("\"\"") : std::string(1, c);
      id = q + "\"";
    }
    out += fmt::format("{},{:.17g},{:.17g}\n", id, coords(static_cast<Eigen::Index>(i), 0),
                       coords(static_cast<Eigen::Index>(i), 1));
  }
  return out;
}

}  // namespace oasis
