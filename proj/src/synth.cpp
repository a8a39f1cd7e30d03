#include "oasis/synth.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>

#include <spdlog/spdlog.h>

namespace oasis {

std::string refinement_label(unsigned flags) {
  if (flags & kAdjusted) return "adjusted";
  if (flags & kThresholdSelected) return "threshold_selected";
  if (flags & kAstSelected) return "ast_selected";
  return "none";
}

unsigned refinement_from_label(const std::string& label) {
  if (label == "none") return kRefineNone;
  if (label == "threshold_selected") return kThresholdSelected;
  if (label == "ast_selected") return kAstSelected;
  if (label == "adjusted") return kAdjusted;
  throw Error("schema_error", "unknown refinement '" + label + "'");
}

double label_from_cosine(double cosine) noexcept {
  if (std::isnan(cosine)) return 0.0;
  return std::clamp((1.0 + cosine) / 2.0, 0.0, kMaxLabel);
}

Vec HashedBagEmbedder::embed_one(std::string_view text) const {
  Vec v = Vec::Zero(static_cast<Eigen::Index>(dim_));
  for (const auto& tok : alnum_tokens(text)) v[static_cast<Eigen::Index>(fnv1a64(tok) % dim_)] += 1.0;
  const double n = v.norm();
  if (n > 0) v /= n;
  return v;
}

std::vector<Vec> HashedBagEmbedder::embed(const std::vector<std::string>& texts) {
  std::vector<Vec> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(embed_one(t));
  return out;
}

std::vector<Vec> HttpEmbedder::embed(const std::vector<std::string>& texts) {
  const Json reply = client_.post(Json{{"texts", texts}});
  if (!reply.contains("vectors") || !reply["vectors"].is_array() ||
      reply["vectors"].size() != texts.size())
    throw Error("http_error", "embedding reply lacks one vector per text");
  std::vector<Vec> out;
  for (const auto& row : reply["vectors"]) {
    const auto values = row.get<std::vector<double>>();
    Vec v = Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
    const double n = v.norm();
    if (!(n > 0) || !std::isfinite(n)) throw Error("http_error", "degenerate embedding vector");
    out.push_back(v / n);
  }
  return out;
}

std::vector<double> SimilarityAnnotator::annotate(const std::string& query,
                                                  const std::vector<std::string>& codes) {
  std::vector<std::string> texts;
  texts.reserve(codes.size() + 1);
  texts.push_back(query);
  texts.insert(texts.end(), codes.begin(), codes.end());
  const auto vecs = embedder_.embed(texts);
  if (vecs.size() != texts.size()) throw Error("annotator_error", "embedder returned wrong count");
  std::vector<double> out;
  out.reserve(codes.size());
  for (std::size_t i = 1; i < vecs.size(); ++i) {
    if (vecs[i].size() != vecs[0].size()) throw Error("annotator_error", "dimension mismatch");
    out.push_back(label_from_cosine(vecs[0].dot(vecs[i])));
  }
  return out;
}

std::uint64_t query_seed(std::uint64_t global_seed, const std::string& query_id) {
  return derive_seed(global_seed, query_id);
}

std::vector<std::string> mine_negatives(const DocQuery& query,
                                        const std::vector<const FunctionUnit*>& repo_units, int K,
                                        std::uint64_t seed) {
  if (K < 1) throw Error("invalid_argument", "K must be >= 1");
  std::vector<const FunctionUnit*> pool;
  pool.reserve(repo_units.size());
  for (const auto* u : repo_units)
    if (u->func_id != query.func_id) pool.push_back(u);
  if (pool.empty()) {
    spdlog::info("{}: repository has no other functions; group has no negatives", query.query_id);
    return {};
  }
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(K), pool.size());
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  std::vector<std::string> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(pool[i]->func_id);
  return out;
}

std::vector<PairRecord> mine_groups(const std::vector<DocQuery>& queries,
                                    const std::vector<FunctionUnit>& units, int K,
                                    std::uint64_t global_seed) {
  const auto index = index_units(units);
  std::map<std::string, std::vector<const FunctionUnit*>> by_repo;
  for (const auto& u : units) by_repo[u.repo_id].push_back(&u);

  std::vector<PairRecord> out;
  for (const auto& q : queries) {
    auto it = index.find(q.func_id);
    if (it == index.end()) {
      spdlog::warn("{}: origin function {} not found; skipped", q.query_id, q.func_id);
      continue;
    }
    const FunctionUnit& origin = *it->second;
    const auto negatives = mine_negatives(q, by_repo[origin.repo_id], K, query_seed(global_seed, q.query_id));
    std::size_t idx = 0;
    auto add = [&](const std::string& code_id, Role role) {
      PairRecord p;
      p.group_id = q.query_id;
      p.pair_id = q.query_id + "#" + std::to_string(idx++);
      p.query_id = q.query_id;
      p.code_id = code_id;
      p.role = role;
      p.sim_train = role == Role::positive ? 1.0 : 0.0;
      out.push_back(std::move(p));
    };
    add(origin.func_id, Role::positive);
    for (const auto& id : negatives) add(id, Role::negative);
  }
  return out;
}

TextSources make_text_sources(const std::vector<DocQuery>& queries,
                              const std::vector<FunctionUnit>& units) {
  TextSources t;
  for (const auto& q : queries) t.query_text.emplace(q.query_id, q.text);
  t.units = index_units(units);
  return t;
}

std::vector<std::pair<std::size_t, std::size_t>> group_ranges(const std::vector<PairRecord>& pairs) {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  std::size_t i = 0;
  while (i < pairs.size()) {
    std::size_t j = i + 1;
    while (j < pairs.size() && pairs[j].group_id == pairs[i].group_id) ++j;
    ranges.emplace_back(i, j);
    i = j;
  }
  return ranges;
}

std::vector<PairRecord> annotate_pairs(std::vector<PairRecord> pairs, const TextSources& texts,
                                       SimilarityAnnotator& annotator, const RetryPolicy& retry) {
  const auto ranges = group_ranges(pairs);
  std::vector<char> keep(ranges.size(), 0);
  const std::size_t workers = annotator.embedder().remote() ? retry.max_in_flight : 1;
  parallel_for(ranges.size(), workers, [&](std::size_t g) {
    const auto [b, e] = ranges[g];
    const std::string& group = pairs[b].group_id;
    auto q = texts.query_text.find(pairs[b].query_id);
    if (q == texts.query_text.end()) {
      spdlog::warn("{}: query text unavailable; group dropped", group);
      return;
    }
    std::vector<std::string> codes;
    for (std::size_t i = b; i < e; ++i) {
      auto u = texts.units.find(pairs[i].code_id);
      if (u == texts.units.end()) {
        spdlog::warn("{}: code {} unavailable; group dropped", group, pairs[i].code_id);
        return;
      }
      codes.push_back(u->second->source);
    }
    std::vector<double> sims;
    try {
      sims = with_retries(retry, group, [&] { return annotator.annotate(q->second, codes); });
    } catch (const std::exception& ex) {
      spdlog::warn("{}: annotation failed: {}; group dropped", group, ex.what());
      return;
    }
    for (std::size_t i = b; i < e; ++i) {
      auto& p = pairs[i];
      p.sim_annotated = sims[i - b];
      p.sim_train = p.role == Role::positive ? 1.0 : p.sim_annotated;
    }
    keep[g] = 1;
  });
  std::vector<PairRecord> out;
  out.reserve(pairs.size());
  for (std::size_t g = 0; g < ranges.size(); ++g) {
    if (!keep[g]) continue;
    for (std::size_t i = ranges[g].first; i < ranges[g].second; ++i) out.push_back(std::move(pairs[i]));
  }
  return out;
}

std::vector<PairRecord> build_groups(const std::vector<DocQuery>& queries,
                                     const std::vector<FunctionUnit>& units, int K,
                                     std::uint64_t global_seed, SimilarityAnnotator& annotator,
                                     const RetryPolicy& retry) {
  return annotate_pairs(mine_groups(queries, units, K, global_seed),
                        make_text_sources(queries, units), annotator, retry);
}

Json to_json(const PairRecord& p) {
  Json j;
  j["pair_id"] = p.pair_id;
  j["group_id"] = p.group_id;
  j["query_id"] = p.query_id;
  j["code_id"] = p.code_id;
  j["role"] = p.role == Role::positive ? "positive" : "negative";
  j["sim_annotated"] = p.sim_annotated;
  j["sim_train"] = p.sim_train;
  j["refinement"] = refinement_label(p.refinement);
  return j;
}

PairRecord pair_record_from_json(const Json& j) {
  PairRecord p;
  p.pair_id = j.at("pair_id").get<std::string>();
  p.group_id = j.at("group_id").get<std::string>();
  p.query_id = j.at("query_id").get<std::string>();
  p.code_id = j.at("code_id").get<std::string>();
  const auto role = j.at("role").get<std::string>();
  if (role != "positive" && role != "negative") throw Error("schema_error", "bad role '" + role + "'");
  p.role = role == "positive" ? Role::positive : Role::negative;
  p.sim_annotated = j.at("sim_annotated").get<double>();
  p.sim_train = j.at("sim_train").get<double>();
  p.refinement = refinement_from_label(j.at("refinement").get<std::string>());
  return p;
}

std::string to_jsonl(const std::vector<PairRecord>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += to_json(p).dump();
    out += '\n';
  }
  return out;
}

std::vector<PairRecord> load_pairs(const std::filesystem::path& path) {
  std::vector<PairRecord> out;
  for (const auto& j : parse_jsonl(read_file(path))) out.push_back(pair_record_from_json(j));
  return out;
}

}  // namespace oasis
