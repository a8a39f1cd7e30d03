#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>

#include "oasis/pipeline.hpp"
#include "oasis/synthetic.hpp"
#include "support/temp_dir.hpp"

using namespace oasis;
namespace fs = std::filesystem;
using support::TempDir;

namespace {

PipelineConfig small_config(const TempDir& tmp, int repos = 6, int funcs = 10) {
  make_synthetic_corpus(tmp.path / "corpus", repos, funcs, 7);
  PipelineConfig cfg;
  cfg.corpus_dir = tmp.path / "corpus";
  cfg.work_dir = tmp.path / "work";
  cfg.embed_dim = 16;
  cfg.hash_dim = 1024;
  cfg.train.epochs = 2;
  return cfg;
}

// Relative path -> sha256 for every regular file below `root`.
std::map<std::string, std::string> tree_hashes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = sha256_file(e.path());
  return out;
}

std::size_t count_functions(const fs::path& corpus) {
  const auto provider = make_default_ast_provider();
  std::size_t n = 0;
  for (const auto& r : discover_repositories(corpus)) n += extract_functions(r, *provider).size();
  return n;
}

std::map<std::string, bool> skipped_by_stage(const std::vector<StageManifest>& runs) {
  std::map<std::string, bool> out;
  for (const auto& m : runs) out[m.stage] = m.skipped;
  return out;
}

std::string error_code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

}  // namespace

// ---- synthetic corpus ----

TEST_CASE("synthetic corpus: 20 x 10 gives 200 functions, byte-identical across runs") {
  TempDir a, b;
  CHECK(make_synthetic_corpus(a.path, 20, 10, 7) == 200);
  CHECK(make_synthetic_corpus(b.path, 20, 10, 7) == 200);
  CHECK(count_functions(a.path) == 200);
  CHECK(discover_repositories(a.path).size() == 20);
  CHECK(tree_hashes(a.path) == tree_hashes(b.path));

  TempDir c;
  make_synthetic_corpus(c.path, 20, 10, 8);
  CHECK(tree_hashes(a.path) != tree_hashes(c.path));
}

TEST_CASE("synthetic corpus: degenerate and invalid sizes") {
  TempDir one;
  CHECK(make_synthetic_corpus(one.path, 1, 1, 0) == 1);
  CHECK(count_functions(one.path) == 1);

  TempDir many;
  CHECK(make_synthetic_corpus(many.path, 2, 25, 3) == 50);
  CHECK(count_functions(many.path) == 50);  // names stay unique past one template cycle

  TempDir bad;
  CHECK(error_code_of([&] { make_synthetic_corpus(bad.path, 0, 10, 1); }) == "invalid_argument");
}

TEST_CASE("synthetic corpus: annotated negatives span below 0.55 to above 0.9") {
  TempDir tmp;
  auto cfg = small_config(tmp, 20, 10);
  cfg.heldout_fraction = 0;
  Pipeline p(cfg);
  for (Stage s : {Stage::ingest, Stage::docgen, Stage::mine, Stage::annotate}) p.run_stage(s);
  const auto pairs = load_pairs(cfg.artifact(cfg.artifacts.pairs));
  double lo = 1, hi = 0;
  for (const auto& r : pairs)
    if (r.role == Role::negative) {
      lo = std::min(lo, r.sim_annotated);
      hi = std::max(hi, r.sim_annotated);
    }
  MESSAGE("negative sims span [" << lo << ", " << hi << "]");
  CHECK(lo < 0.55);
  CHECK(hi > 0.9);
}

// ---- configuration ----

TEST_CASE("config: defaults carry the published hyper-parameters") {
  const PipelineConfig c;
  CHECK(c.K == 5);
  CHECK(c.refine.s_star == 0.4);
  CHECK(c.refine.ast_ratio_max == 0.25);
  CHECK(c.refine.delta_s == 0.1);
  CHECK(c.train.tau == 0.05);
  CHECK(c.train.w1 == 0.98);
  CHECK(c.train.w2 == 0.02);
  CHECK(c.train.lr == 5e-4);
  CHECK(c.seed == 3407);
  CHECK(c.prompt_budget == 1024);
  CHECK(c.grid == std::vector<double>{0.05, 0.1, 0.2});
  CHECK(c.k_cutoff == 1000);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config: JSON round trip and partial files") {
  PipelineConfig c;
  c.seed = 11;
  c.train.tau = 0.07;
  c.pooling = Pooling::last;
  c.train.optimizer = Optimizer::sgd;
  c.grid = {0.3};
  c.judge = {"http", "http://localhost:1/judge", "secret"};
  const auto back = PipelineConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.judge.token.empty());  // credentials are never serialised
  CHECK(c.to_json().dump().find("secret") == std::string::npos);

  const auto partial = PipelineConfig::from_json(Json::parse(R"({"train": {"tau": 0.1}})"));
  CHECK(partial.train.tau == 0.1);
  CHECK(partial.train.w1 == 0.98);
}

TEST_CASE("config: unknown keys, wrong types and bad values are rejected") {
  for (const char* text : {R"({"sed": 1})", R"({"train": {"temperature": 0.1}})",
                           R"({"backends": {"judge": {"kind": "builtin", "uri": "x"}}})",
                           R"({"paths": {"checkpoints": "x"}})"}) {
    CAPTURE(text);
    CHECK(error_code_of([&] { PipelineConfig::from_json(Json::parse(text)); }) == "invalid_config");
  }
  for (const char* text : {R"({"seed": "one"})", R"({"synth": {"K": 2.5}})", R"({"train": {"w1": true}})",
                           R"({"eval": {"grid": [0.1, "x"]}})", R"({"train": 3})"}) {
    CAPTURE(text);
    CHECK(error_code_of([&] { PipelineConfig::from_json(Json::parse(text)); }) == "invalid_config");
  }
  for (const char* text : {R"({"synth": {"K": 0}})", R"({"train": {"tau": 0}})", R"({"refine": {"delta_s": -0.1}})",
                           R"({"eval": {"grid": []}})", R"({"corpus": {"heldout_fraction": 1.0}})",
                           R"({"backends": {"annotator": {"kind": "http"}}})", R"({"train": {"pooling": "max"}})"}) {
    CAPTURE(text);
    CHECK(error_code_of([&] { PipelineConfig::from_json(Json::parse(text)); }) == "invalid_config");
  }
}

TEST_CASE("config: load from file, environment credentials, offline") {
  TempDir tmp;
  std::ofstream(tmp.path / "c.json") << R"({"seed": 5, "backends": {"annotator": {"kind": "http", "url": "http://h/e"}}})";
  auto c = PipelineConfig::load(tmp.path / "c.json");
  CHECK(c.seed == 5);
  CHECK(error_code_of([&] { PipelineConfig::load(tmp.path / "absent.json"); }).rfind("missing_input:", 0) == 0);

  ::setenv("OASIS_ANNOTATOR_TOKEN", "tok-a", 1);
  ::setenv("OASIS_JUDGE_TOKEN", "tok-j", 1);
  c.apply_env_credentials();
  ::unsetenv("OASIS_ANNOTATOR_TOKEN");
  ::unsetenv("OASIS_JUDGE_TOKEN");
  CHECK(c.annotator.token == "tok-a");
  CHECK(c.judge.token == "tok-j");
  CHECK(c.generator.token.empty());
  CHECK(c.annotator.url == "http://h/e");  // only credentials come from the environment

  c.force_offline();
  CHECK(c.annotator.kind == "builtin");
  CHECK(c.annotator.token.empty());
}

// ---- split ----

TEST_CASE("held-out split: size, determinism, disjointness") {
  std::vector<std::string> repos;
  for (int i = 0; i < 20; ++i) repos.push_back("repo_" + std::to_string(i));
  const auto h = choose_heldout(repos, 0.2, 1);
  CHECK(h.size() == 4);
  CHECK(std::is_sorted(h.begin(), h.end()));
  CHECK(h == choose_heldout(repos, 0.2, 1));
  CHECK(choose_heldout({"a"}, 0.5, 1).empty());
  CHECK(choose_heldout({"a", "b"}, 0.01, 1).size() == 1);  // at least one
  CHECK(choose_heldout({"a", "b"}, 0.9, 1).size() == 1);   // at least one left to train on
  CHECK(choose_heldout(repos, 0.0, 1).empty());

  std::set<std::vector<std::string>> distinct;
  for (std::uint64_t s = 0; s < 10; ++s) distinct.insert(choose_heldout(repos, 0.2, s));
  CHECK(distinct.size() > 1);
}

// ---- stages ----

TEST_CASE("pipeline: full run, then every stage skipped on rerun") {
  TempDir tmp;
  const auto cfg = small_config(tmp);
  {
    Pipeline p(cfg);
    const auto first = p.run_all();
    REQUIRE(first.size() == 9);
    for (const auto& m : first) {
      CAPTURE(m.stage);
      CHECK_FALSE(m.skipped);
      CHECK_FALSE(m.outputs.empty());
      CHECK(m.config_hash.size() == 64);
      CHECK(fs::exists(p.manifest_path(parse_stage(m.stage))));
    }
    for (const auto& m : p.run_all()) {
      CAPTURE(m.stage);
      CHECK(m.skipped);
    }
  }

  // Mining only sees training repositories; evaluation only held-out ones.
  const Json split = Json::parse(read_file(cfg.artifact(cfg.artifacts.split)));
  const auto held = split["heldout"].get<std::set<std::string>>();
  REQUIRE_FALSE(held.empty());
  const auto units = load_functions(cfg.artifact(cfg.artifacts.functions));
  const auto index = index_units(units);
  for (const auto& r : load_pairs(cfg.artifact(cfg.artifacts.pairs_refined)))
    CHECK_FALSE(held.count(index.at(r.code_id)->repo_id));
  const auto ds = load_eval_dataset(cfg.artifact(cfg.artifacts.eval_data));
  CHECK_FALSE(ds.queries.empty());
  for (const auto& c : ds.candidates) CHECK(held.count(index.at(c.code_id)->repo_id));

  const Json report = Json::parse(read_file(cfg.artifact(cfg.artifacts.report)));
  CHECK(report["model"]["k_cutoff"] == 1000);
  CHECK(report["queries"] == ds.queries.size());
  const Json grid = Json::parse(read_file(cfg.artifact(cfg.artifacts.grid)));
  CHECK(grid["rows"].size() == 3);
  CHECK(grid["best_delta_s"].is_number());
  const auto mds = read_file(cfg.artifact(cfg.artifacts.mds));
  CHECK(mds.rfind("id,x,y\n", 0) == 0);

  // No temp files survive a run.
  for (const auto& e : fs::recursive_directory_iterator(cfg.work_dir))
    CHECK(e.path().extension() != ".tmp");
}

TEST_CASE("pipeline: a temperature change reruns only training and what depends on it") {
  TempDir tmp;
  auto cfg = small_config(tmp);
  { Pipeline(cfg).run_all(); }
  cfg.train.tau = 0.07;
  const auto runs = skipped_by_stage(Pipeline(cfg).run_all());
  for (const char* s : {"ingest", "docgen", "mine", "annotate", "refine"}) {
    CAPTURE(s);
    CHECK(runs.at(s));
  }
  for (const char* s : {"train", "eval", "grid", "mds"}) {
    CAPTURE(s);
    CHECK_FALSE(runs.at(s));
  }
}

TEST_CASE("pipeline: changed corpus file reruns ingest") {
  TempDir tmp;
  const auto cfg = small_config(tmp);
  { Pipeline(cfg).run_all(); }
  const auto file = discover_repositories(cfg.corpus_dir).front().root_path / "compat.py";
  REQUIRE(fs::exists(file));
  std::ofstream(file, std::ios::app) << "\n\ndef extra_helper(value):\n    return value\n";
  Pipeline p(cfg);
  CHECK_FALSE(p.run_stage(Stage::ingest).skipped);
  CHECK_FALSE(p.run_stage(Stage::docgen).skipped);
}

TEST_CASE("pipeline: missing inputs name the absent path") {
  TempDir tmp;
  const auto cfg = small_config(tmp);
  Pipeline p(cfg);
  const auto expected = "missing_input:" + cfg.artifact(cfg.artifacts.pairs_refined).string();
  CHECK(error_code_of([&] { p.run_stage(Stage::train); }) == expected);
  CHECK_FALSE(fs::exists(p.manifest_path(Stage::train)));

  auto no_corpus = cfg;
  no_corpus.corpus_dir = tmp.path / "nowhere";
  no_corpus.work_dir = tmp.path / "work2";
  Pipeline q(no_corpus);
  CHECK(error_code_of([&] { q.run_stage(Stage::ingest); }) == "missing_input:" + no_corpus.corpus_dir.string());
}

TEST_CASE("pipeline: strict mode refuses to skip over a modified output") {
  TempDir tmp;
  const auto cfg = small_config(tmp);
  { Pipeline(cfg).run_all(); }
  const auto report = cfg.artifact(cfg.artifacts.report);
  const auto original = read_file(report);
  std::ofstream(report, std::ios::app) << " ";
  {
    Pipeline lenient(cfg);
    CHECK(lenient.run_stage(Stage::eval).skipped);
  }
  Pipeline strict(cfg, true);
  CHECK_FALSE(strict.run_stage(Stage::eval).skipped);
  CHECK(read_file(report) == original);
  CHECK(strict.run_stage(Stage::eval).skipped);
}

TEST_CASE("pipeline: a deleted output forces a rerun") {
  TempDir tmp;
  const auto cfg = small_config(tmp);
  { Pipeline(cfg).run_all(); }
  fs::remove(cfg.artifact(cfg.artifacts.loss_curve));
  Pipeline p(cfg);
  CHECK_FALSE(p.run_stage(Stage::train).skipped);
  CHECK(fs::exists(cfg.artifact(cfg.artifacts.loss_curve)));
}

TEST_CASE("pipeline: a failing stage leaves neither output nor manifest") {
  TempDir tmp;
  const auto cfg = small_config(tmp);
  { Pipeline(cfg).run_all(); }
  fs::remove(cfg.artifact(cfg.artifacts.mds));
  fs::remove(Pipeline(cfg).manifest_path(Stage::mds));
  write_file_atomic(cfg.artifact(cfg.artifacts.checkpoint), "OASISCK1 truncated");
  Pipeline p(cfg);
  CHECK(error_code_of([&] { p.run_stage(Stage::mds); }) == "corrupt_checkpoint");
  CHECK_FALSE(fs::exists(cfg.artifact(cfg.artifacts.mds)));
  CHECK_FALSE(fs::exists(p.manifest_path(Stage::mds)));
}

TEST_CASE("pipeline: one instance per working directory") {
  TempDir tmp;
  const auto cfg = small_config(tmp);
  {
    Pipeline first(cfg);
    CHECK(error_code_of([&] { Pipeline second(cfg); }) == "locked");
  }
  CHECK(error_code_of([&] { Pipeline again(cfg); }).empty());
}

TEST_CASE("pipeline: same seed gives identical artifacts in separate directories") {
  TempDir tmp;
  auto a = small_config(tmp);
  auto b = a;
  b.work_dir = tmp.path / "work_b";
  auto c = a;
  c.work_dir = tmp.path / "work_c";
  c.seed = a.seed + 1;
  { Pipeline(a).run_all(); }
  { Pipeline(b).run_all(); }
  { Pipeline(c).run_all(); }
  for (const auto& name : {a.artifacts.functions, a.artifacts.queries, a.artifacts.pairs, a.artifacts.pairs_refined,
                           a.artifacts.refine_report, a.artifacts.checkpoint, a.artifacts.loss_curve,
                           a.artifacts.report, a.artifacts.grid, a.artifacts.mds}) {
    CAPTURE(name);
    CHECK(sha256_file(a.artifact(name)) == sha256_file(b.artifact(name)));
  }
  CHECK(sha256_file(a.artifact(a.artifacts.pairs_mined)) != sha256_file(c.artifact(c.artifacts.pairs_mined)));
  CHECK(sha256_file(a.artifact(a.artifacts.checkpoint)) != sha256_file(c.artifact(c.artifacts.checkpoint)));
}

TEST_CASE("pipeline: single-function corpus runs through with zero negatives") {
  TempDir tmp;
  make_synthetic_corpus(tmp.path / "corpus", 1, 1, 0);
  PipelineConfig cfg;
  cfg.corpus_dir = tmp.path / "corpus";
  cfg.work_dir = tmp.path / "work";
  cfg.embed_dim = 8;
  cfg.hash_dim = 64;
  Pipeline p(cfg);
  const auto runs = p.run_all();
  CHECK(runs.size() == 9);
  const auto pairs = load_pairs(cfg.artifact(cfg.artifacts.pairs_refined));
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].role == Role::positive);
  const Json report = Json::parse(read_file(cfg.artifact(cfg.artifacts.report)));
  CHECK(report["queries"] == 0);
  CHECK(report["model"].is_null());
  const Json grid = Json::parse(read_file(cfg.artifact(cfg.artifacts.grid)));
  CHECK(grid["best_delta_s"].is_null());
}

TEST_CASE("pipeline: external evaluation file") {
  TempDir tmp;
  auto cfg = small_config(tmp);
  EvalDataset ds;
  ds.candidates = {{"c1", "def add(a, b): return a + b"}, {"c2", "def read_file(path): return open(path).read()"}};
  ds.queries = {{"q1", "add two numbers a and b", {"c1"}}, {"q2", "read the file at path", {"c2"}}};
  write_file_atomic(tmp.path / "eval.jsonl", to_jsonl(ds));
  cfg.eval_path = tmp.path / "eval.jsonl";
  Pipeline p(cfg);
  for (Stage s : kAllStages) p.run_stage(s);
  CHECK_FALSE(fs::exists(cfg.artifact(cfg.artifacts.eval_data)));
  const Json report = Json::parse(read_file(cfg.artifact(cfg.artifacts.report)));
  CHECK(report["source"] == "file");
  CHECK(report["queries"] == 2);
  CHECK(report["model"]["per_query_rank"].size() == 2);
}

TEST_CASE("stage names round-trip") {
  for (Stage s : kAllStages) CHECK(parse_stage(stage_name(s)) == s);
  CHECK(error_code_of([] { parse_stage("publish"); }) == "invalid_argument");
}
