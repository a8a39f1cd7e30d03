#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "oasis/eval.hpp"
#include "oracles/mds_oracle.hpp"

using namespace oasis;

namespace {

// Fixed vectors by text, so cosines are hand-computable.
EncodeFn table_encoder(std::map<std::string, Vec> table) {
  return [table](const std::vector<std::string>& texts) {
    std::vector<Vec> out;
    for (const auto& t : texts) out.push_back(table.at(t));
    return out;
  };
}

Vec v2(double x, double y) {
  Vec v(2);
  v << x, y;
  return v;
}

double naive_mrr(const std::vector<std::optional<std::size_t>>& ranks, std::size_t k) {
  double s = 0;
  for (auto r : ranks) s += (r.has_value() && r.value() <= k) ? 1.0 / static_cast<double>(r.value()) : 0.0;
  return s / static_cast<double>(ranks.size());
}

double naive_ap(const std::vector<std::string>& ranked, const std::vector<std::string>& rel) {
  double s = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    bool is_rel = false;
    for (const auto& r : rel) is_rel = is_rel || r == ranked[i];
    if (!is_rel) continue;
    int hits = 0;
    for (std::size_t j = 0; j <= i; ++j)
      for (const auto& r : rel)
        if (r == ranked[j]) ++hits;
    s += hits / static_cast<double>(i + 1);
  }
  return s / static_cast<double>(rel.size());
}

EvalReport report_with(std::vector<std::optional<std::size_t>> ranks) {
  EvalReport r;
  for (std::size_t i = 0; i < ranks.size(); ++i) r.query_ids.push_back("q" + std::to_string(i));
  r.ranks = std::move(ranks);
  return r;
}

}  // namespace

TEST_CASE("rank_candidates") {
  EvalDataset ds;
  ds.queries = {{"q1", "query", {"a"}}};
  ds.candidates = {{"a", "A"}};
  auto enc = table_encoder({{"query", v2(1, 0)}, {"A", v2(0, 1)}, {"B", v2(1, 1)}, {"C", v2(1, 1)},
                            {"D", v2(1, -0.2)}});
  CHECK(evaluate(enc, ds).ranks[0] == std::optional<std::size_t>(1));

  ds.candidates = {{"c", "C"}, {"b", "B"}, {"a", "A"}, {"d", "D"}};
  ds.queries[0].target_ids = {"a"};
  const auto r = rank_candidates(enc, ds)[0];
  // cosines: d ~0.981, b = c ~0.707 (tie -> id order), a = 0
  CHECK(r.ranked == std::vector<std::string>{"d", "b", "c", "a"});
  CHECK(r.scores[1] == r.scores[2]);

  ds.candidates.clear();
  CHECK_THROWS_AS(rank_candidates(enc, ds), Error);
}

TEST_CASE("rank_candidates matches a brute-force sort") {
  std::mt19937_64 rng(3);
  std::map<std::string, Vec> table;
  EvalDataset ds;
  for (int i = 0; i < 30; ++i) {
    Vec v(4);
    for (int d = 0; d < 4; ++d) v[d] = uniform_unit(rng) - 0.5;
    table["c" + std::to_string(i)] = v;
    ds.candidates.push_back({"id" + std::to_string(i), "c" + std::to_string(i)});
  }
  Vec q(4);
  q << 0.3, -0.1, 0.5, 0.2;
  table["q"] = q;
  ds.queries = {{"q", "q", {"id0"}}};
  const auto r = rank_candidates(table_encoder(table), ds)[0];
  std::vector<std::pair<double, std::string>> brute;
  for (const auto& c : ds.candidates) {
    const Vec& v = table[c.text];
    brute.push_back({-(q.dot(v) / (q.norm() * v.norm())), c.code_id});
  }
  std::sort(brute.begin(), brute.end());
  for (std::size_t i = 0; i < brute.size(); ++i) CHECK(r.ranked[i] == brute[i].second);
}

TEST_CASE("MRR@k") {
  CHECK(mrr_at_k({1, 1, 1}, 1000) == 1.0);
  CHECK(mrr_at_k({1, 2}, 1000) == 0.75);
  CHECK(mrr_at_k({1001}, 1000) == 0.0);
  CHECK(mrr_at_k({1000}, 1000) == 0.001);
  CHECK(mrr_at_k({std::nullopt, 1}, 10) == 0.5);
  CHECK_THROWS_AS(mrr_at_k({}, 10), Error);
  CHECK_THROWS_AS(mrr_at_k({1}, 0), Error);
}

TEST_CASE("MAP") {
  CHECK(map_metric({{"a", "b", "c"}}, {{"a", "b"}}) == 1.0);
  CHECK(map_metric({{"a", "x", "b"}}, {{"a", "b"}}) == doctest::Approx((1 + 2.0 / 3) / 2));
  CHECK(map_metric({{"x", "y"}}, {{"a"}}) == 0.0);
  CHECK_THROWS_AS(map_metric({{"a"}}, {{}}), Error);
}

TEST_CASE("metrics equal naive implementations on random instances") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const std::size_t nq = 1 + uniform_index(rng, 20);
    std::vector<std::optional<std::size_t>> ranks;
    std::vector<std::vector<std::string>> ranked, rel;
    for (std::size_t q = 0; q < nq; ++q) {
      ranks.push_back(uniform_index(rng, 5) == 0 ? std::nullopt
                                                  : std::optional<std::size_t>(1 + uniform_index(rng, 1500)));
      std::vector<std::string> list;
      const std::size_t len = 1 + uniform_index(rng, 12);
      for (std::size_t i = 0; i < len; ++i) list.push_back("c" + std::to_string(i));
      std::shuffle(list.begin(), list.end(), rng);
      std::vector<std::string> r;
      const std::size_t nr = 1 + uniform_index(rng, 4);
      for (std::size_t i = 0; i < nr; ++i) r.push_back("c" + std::to_string(uniform_index(rng, 15)));
      std::sort(r.begin(), r.end());
      r.erase(std::unique(r.begin(), r.end()), r.end());
      ranked.push_back(list);
      rel.push_back(r);
    }
    const std::size_t k = 1 + uniform_index(rng, 1200);
    CHECK(mrr_at_k(ranks, k) == naive_mrr(ranks, k));
    double s = 0;
    for (std::size_t q = 0; q < nq; ++q) s += naive_ap(ranked[q], rel[q]);
    CHECK(map_metric(ranked, rel) == doctest::Approx(s / static_cast<double>(nq)).epsilon(1e-15));
    // non-decreasing in k
    CHECK(mrr_at_k(ranks, k) <= mrr_at_k(ranks, k + 1));
    // worsening one rank never helps
    auto worse = ranks;
    if (worse[0]) *worse[0] += 1;
    CHECK(mrr_at_k(worse, k) <= mrr_at_k(ranks, k));
  }
}

TEST_CASE("hard subset") {
  auto a = report_with({1, 1, 1}), b = report_with({1, 1, 1});
  CHECK(hard_subset({a, b}).empty());
  auto x = report_with({1, 3, 1}), y = report_with({2, 4, 1}), z = report_with({1, std::nullopt, 1});
  CHECK(hard_subset({x, y, z}) == std::vector<std::string>{"q1"});

  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    std::vector<EvalReport> reps;
    for (int m = 0; m < 3; ++m) {
      std::vector<std::optional<std::size_t>> r;
      for (int q = 0; q < 10; ++q) r.push_back(1 + uniform_index(rng, 3));
      reps.push_back(report_with(r));
    }
    std::set<std::string> manual;
    for (int q = 0; q < 10; ++q) manual.insert("q" + std::to_string(q));
    for (const auto& r : reps)
      for (std::size_t q = 0; q < 10; ++q)
        if (r.ranks[q] == std::optional<std::size_t>(1)) manual.erase("q" + std::to_string(q));
    const auto got = hard_subset(reps);
    CHECK(std::set<std::string>(got.begin(), got.end()) == manual);
    // adding a model can only shrink the subset
    const auto two = hard_subset({reps[0], reps[1]});
    for (const auto& q : got) CHECK(std::find(two.begin(), two.end(), q) != two.end());
  }

  CHECK_THROWS_AS(hard_subset({a}), Error);
  CHECK_THROWS_AS(hard_subset({a, report_with({1, 1})}), Error);
}

TEST_CASE("evaluate report and eval.jsonl round trip") {
  EvalDataset ds;
  ds.queries = {{"q1", "query", {"a"}}, {"q2", "query2", {"b", "c"}}};
  ds.candidates = {{"a", "A"}, {"b", "B"}, {"c", "C"}};
  auto enc = table_encoder({{"query", v2(1, 0)}, {"query2", v2(0, 1)}, {"A", v2(1, 0.1)}, {"B", v2(0.1, 1)},
                            {"C", v2(1, 0)}});
  const auto rep = evaluate(enc, ds, 1000);
  CHECK(rep.ranks[0] == std::optional<std::size_t>(2));  // C (cos 1) beats A
  CHECK(rep.ranks[1] == std::optional<std::size_t>(1));
  CHECK(rep.mrr == 0.75);
  CHECK(rep.hard_subset == std::vector<std::string>{"q1"});
  const auto j = rep.to_json();
  CHECK(j["per_query_rank"]["q1"] == 2);
  CHECK(j["k_cutoff"] == 1000);

  const auto back = eval_dataset_from_jsonl(to_jsonl(ds));
  CHECK(to_jsonl(back) == to_jsonl(ds));
  ds.queries[0].target_ids = {"zz"};
  CHECK_THROWS_AS(eval_dataset_from_jsonl(to_jsonl(ds)), Error);
}

TEST_CASE("grid search over delta_s") {
  auto g = grid_search_delta_s({0.05, 0.1, 0.2}, [](double d) { return d == 0.1 ? 0.6 : 0.5; });
  CHECK(g.rows.size() == 3);
  CHECK(g.best_delta_s == std::optional<double>(0.1));
  auto single = grid_search_delta_s({0.3}, [](double) { return 0.1; });
  CHECK(single.best_delta_s == std::optional<double>(0.3));
  auto failing = grid_search_delta_s({0.05, 0.1}, [](double d) -> double {
    if (d == 0.05) throw std::runtime_error("boom");
    return 0.2;
  });
  CHECK_FALSE(failing.rows[0].mrr.has_value());
  CHECK(failing.rows[0].error == "boom");
  CHECK(failing.best_delta_s == std::optional<double>(0.1));
  CHECK(failing.to_json()["rows"][0]["status"] == "failed");
  CHECK_THROWS_AS(grid_search_delta_s({}, [](double) { return 0.0; }), Error);
}

TEST_CASE("MDS: equilateral triangle and duplicates") {
  std::vector<Vec> e(3, Vec::Zero(3));
  for (int i = 0; i < 3; ++i) e[static_cast<std::size_t>(i)][i] = 1;
  const auto r = mds_coords(e);
  const auto D = oracle::pairwise_distances(r.coords);
  CHECK(std::abs(D(0, 1) / D(1, 2) - 1) < 1e-6);
  CHECK(std::abs(D(0, 2) / D(1, 2) - 1) < 1e-6);
  CHECK(D(0, 1) == doctest::Approx(1.0).epsilon(1e-6));  // input distance 1 - cos = 1

  std::vector<Vec> dup{e[0], e[1], e[0], e[2]};
  const auto rd = mds_coords(dup);
  CHECK((rd.coords.row(0) - rd.coords.row(2)).norm() < 1e-8);

  // Collinear input: second eigenvalue vanishes, y padded with zeros.
  std::vector<Vec> line{v2(1, 0), v2(1, 0), v2(0, 1)};
  const auto rl = mds_coords(line);
  CHECK(rl.coords.col(1).cwiseAbs().maxCoeff() < 1e-8);

  CHECK_THROWS_AS(mds_coords({e[0], e[1]}), Error);
  CHECK(mds_csv({"a", "b,c"}, Mat::Zero(2, 2)) == "id,x,y\na,0,0\n\"b,c\",0,0\n");
}

TEST_CASE("MDS agrees with a dense eigensolver") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 10; ++t) {
    std::vector<Vec> pts;
    for (int i = 0; i < 10; ++i) {
      Vec v(6);
      for (int d = 0; d < 6; ++d) v[d] = uniform_unit(rng) - 0.5;
      pts.push_back(v.normalized());
    }
    const auto ours = mds_coords(pts);
    const auto ref = oracle::dense_mds(pts);
    CHECK((oracle::pairwise_distances(ours.coords) - oracle::pairwise_distances(ref)).cwiseAbs().maxCoeff() < 1e-6);
  }
}
