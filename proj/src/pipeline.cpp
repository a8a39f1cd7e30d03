#include "oasis/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <set>

#include <fmt/format.h>

namespace oasis {
namespace fs = std::filesystem;

namespace {

constexpr std::array<std::string_view, 9> kStageNames{"ingest", "docgen",  "mine", "annotate", "refine",
                                                      "train",  "eval", "grid",     "mds"};

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw Error("invalid_config", where_ + " must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    known_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    const Json& v = *it;
    bool ok;
    if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
    else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) ok = v.is_number_unsigned();
    else if constexpr (std::is_integral_v<T>) ok = v.is_number_integer();
    else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
    else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
    else if constexpr (std::is_same_v<T, std::vector<double>>) {
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const Json& e) { return e.is_number(); });
    }
    if (!ok) throw Error("invalid_config", fmt::format("{}.{} has the wrong type", where_, key));
    out = v.get<T>();
  }

  void read(const char* key, fs::path& out) {
    std::string s = out.string();
    read(key, s);
    out = s;
  }

  ObjectReader child(const char* key) {
    known_.insert(key);
    const auto it = j_.find(key);
    return ObjectReader(it == j_.end() ? empty() : *it, where_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!known_.count(k)) throw Error("invalid_config", fmt::format("unknown key {}.{}", where_, k));
  }

 private:
  static const Json& empty() {
    static const Json e = Json::object();
    return e;
  }
  const Json& j_;
  std::string where_;
  std::set<std::string, std::less<>> known_;
};

void read_backend(ObjectReader& parent, const char* key, BackendConfig& b) {
  auto r = parent.child(key);
  r.read("kind", b.kind);
  r.read("url", b.url);
  r.read("token", b.token);
  r.finish();
}

// Tokens are credentials and stay out of everything that gets written or hashed.
Json backend_json(const BackendConfig& b) { return Json{{"kind", b.kind}, {"url", b.url}}; }

std::string pooling_name(Pooling p) { return p == Pooling::mean ? "mean" : "last"; }

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Endpoint endpoint_of(const BackendConfig& b, const RetryPolicy& retry) {
  return Endpoint{b.url, b.token, retry.timeout_s};
}

std::unique_ptr<TextEmbedder> make_embedder(const PipelineConfig& cfg) {
  if (cfg.annotator.kind == "http") return std::make_unique<HttpEmbedder>(endpoint_of(cfg.annotator, cfg.retry));
  return std::make_unique<HashedBagEmbedder>(cfg.annotator_dim);
}

std::unique_ptr<PreferenceJudge> make_judge(const PipelineConfig& cfg) {
  if (cfg.judge.kind == "http") return std::make_unique<HttpJudge>(endpoint_of(cfg.judge, cfg.retry));
  return std::make_unique<OverlapJudge>(cfg.judge_overlap);
}

std::unique_ptr<DocstringGenerator> make_generator(const PipelineConfig& cfg) {
  if (cfg.generator.kind == "http")
    return std::make_unique<HttpDocstringGenerator>(endpoint_of(cfg.generator, cfg.retry));
  return std::make_unique<TemplateDocstringGenerator>();
}

void write_json(const fs::path& path, const Json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::vector<std::string> heldout_from_split(const fs::path& path) {
  const Json j = Json::parse(read_file(path));
  return j.at("heldout").get<std::vector<std::string>>();
}

TrainConfig train_config_of(const PipelineConfig& cfg) {
  TrainConfig tc = cfg.train;
  tc.K = cfg.K;
  tc.delta_s = cfg.refine.delta_s;
  tc.seed = derive_seed(cfg.seed, "train");
  return tc;
}

}  // namespace

std::string_view stage_name(Stage s) noexcept { return kStageNames[static_cast<std::size_t>(s)]; }

Stage parse_stage(std::string_view name) {
  for (std::size_t i = 0; i < kStageNames.size(); ++i)
    if (kStageNames[i] == name) return kAllStages[i];
  throw Error("invalid_argument", fmt::format("unknown stage '{}'", name));
}

// ---- configuration ----

PipelineConfig PipelineConfig::from_json(const Json& j) {
  PipelineConfig c;
  ObjectReader root(j, "config");
  root.read("seed", c.seed);

  auto paths = root.child("paths");
  paths.read("corpus", c.corpus_dir);
  paths.read("work", c.work_dir);
  paths.read("eval", c.eval_path);
  auto& a = c.artifacts;
  for (auto [key, field] : {std::pair{"functions", &a.functions}, {"queries", &a.queries},
                            {"split", &a.split}, {"pairs_mined", &a.pairs_mined}, {"pairs", &a.pairs},
                            {"pairs_refined", &a.pairs_refined}, {"refine_report", &a.refine_report},
                            {"checkpoint", &a.checkpoint}, {"loss_curve", &a.loss_curve},
                            {"eval_data", &a.eval_data}, {"report", &a.report}, {"grid", &a.grid},
                            {"mds", &a.mds}})
    paths.read(key, *field);
  paths.finish();

  auto corpus = root.child("corpus");
  corpus.read("language", c.language);
  corpus.read("prompt_budget", c.prompt_budget);
  corpus.read("heldout_fraction", c.heldout_fraction);
  corpus.finish();

  auto synth = root.child("synth");
  synth.read("K", c.K);
  synth.read("annotator_dim", c.annotator_dim);
  synth.finish();

  auto refine = root.child("refine");
  refine.read("s_star", c.refine.s_star);
  refine.read("ast_ratio_max", c.refine.ast_ratio_max);
  refine.read("delta_s", c.refine.delta_s);
  refine.read("threshold_strategy", c.refine.threshold_strategy);
  refine.read("ast_strategy", c.refine.ast_strategy);
  refine.read("judge_overlap", c.judge_overlap);
  refine.read("gmm_max_iter", c.refine.gmm.max_iter);
  refine.read("gmm_tol", c.refine.gmm.tol);
  refine.read("gmm_sigma_floor", c.refine.gmm.sigma_floor);
  refine.read("weighted_intersection", c.refine.gmm.weighted_intersection);
  refine.finish();

  auto train = root.child("train");
  train.read("tau", c.train.tau);
  train.read("w1", c.train.w1);
  train.read("w2", c.train.w2);
  train.read("lr", c.train.lr);
  train.read("batch_groups", c.train.batch_groups);
  train.read("epochs", c.train.epochs);
  std::string optimizer = c.train.optimizer == Optimizer::adam ? "adam" : "sgd";
  train.read("optimizer", optimizer);
  if (optimizer != "adam" && optimizer != "sgd")
    throw Error("invalid_config", "train.optimizer must be \"adam\" or \"sgd\"");
  c.train.optimizer = optimizer == "adam" ? Optimizer::adam : Optimizer::sgd;
  train.read("beta1", c.train.beta1);
  train.read("beta2", c.train.beta2);
  train.read("eps", c.train.eps);
  train.read("hash_dim", c.hash_dim);
  train.read("embed_dim", c.embed_dim);
  std::string pooling = pooling_name(c.pooling);
  train.read("pooling", pooling);
  if (pooling != "mean" && pooling != "last")
    throw Error("invalid_config", "train.pooling must be \"mean\" or \"last\"");
  c.pooling = pooling == "mean" ? Pooling::mean : Pooling::last;
  train.finish();

  auto eval = root.child("eval");
  eval.read("k_cutoff", c.k_cutoff);
  eval.read("grid", c.grid);
  eval.read("mds_max_points", c.mds_max_points);
  eval.finish();

  auto backends = root.child("backends");
  backends.read("retries", c.retry.retries);
  backends.read("backoff_ms", c.retry.backoff_ms);
  backends.read("timeout_s", c.retry.timeout_s);
  backends.read("max_in_flight", c.retry.max_in_flight);
  read_backend(backends, "generator", c.generator);
  read_backend(backends, "annotator", c.annotator);
  read_backend(backends, "judge", c.judge);
  backends.finish();

  root.finish();
  c.train.K = c.K;
  c.train.delta_s = c.refine.delta_s;
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw Error("missing_input:" + path.string());
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw Error("invalid_config", fmt::format("{}: {}", path.string(), e.what()));
  }
  return from_json(j);
}

Json PipelineConfig::to_json() const {
  const auto& a = artifacts;
  return Json{
      {"seed", seed},
      {"paths",
       {{"corpus", corpus_dir.string()}, {"work", work_dir.string()}, {"eval", eval_path.string()},
        {"functions", a.functions}, {"queries", a.queries}, {"split", a.split},
        {"pairs_mined", a.pairs_mined}, {"pairs", a.pairs}, {"pairs_refined", a.pairs_refined},
        {"refine_report", a.refine_report}, {"checkpoint", a.checkpoint},
        {"loss_curve", a.loss_curve}, {"eval_data", a.eval_data}, {"report", a.report},
        {"grid", a.grid}, {"mds", a.mds}}},
      {"corpus",
       {{"language", language}, {"prompt_budget", prompt_budget}, {"heldout_fraction", heldout_fraction}}},
      {"synth", {{"K", K}, {"annotator_dim", annotator_dim}}},
      {"refine",
       {{"s_star", refine.s_star}, {"ast_ratio_max", refine.ast_ratio_max}, {"delta_s", refine.delta_s},
        {"threshold_strategy", refine.threshold_strategy}, {"ast_strategy", refine.ast_strategy},
        {"judge_overlap", judge_overlap}, {"gmm_max_iter", refine.gmm.max_iter},
        {"gmm_tol", refine.gmm.tol}, {"gmm_sigma_floor", refine.gmm.sigma_floor},
        {"weighted_intersection", refine.gmm.weighted_intersection}}},
      {"train",
       {{"tau", train.tau}, {"w1", train.w1}, {"w2", train.w2}, {"lr", train.lr},
        {"batch_groups", train.batch_groups}, {"epochs", train.epochs},
        {"optimizer", train.optimizer == Optimizer::adam ? "adam" : "sgd"}, {"beta1", train.beta1},
        {"beta2", train.beta2}, {"eps", train.eps}, {"hash_dim", hash_dim}, {"embed_dim", embed_dim},
        {"pooling", pooling_name(pooling)}}},
      {"eval", {{"k_cutoff", k_cutoff}, {"grid", grid}, {"mds_max_points", mds_max_points}}},
      {"backends",
       {{"retries", retry.retries}, {"backoff_ms", retry.backoff_ms}, {"timeout_s", retry.timeout_s},
        {"max_in_flight", retry.max_in_flight}, {"generator", backend_json(generator)},
        {"annotator", backend_json(annotator)}, {"judge", backend_json(judge)}}},
  };
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("invalid_config", m); };
  if (K < 1) fail("synth.K must be at least 1");
  if (annotator_dim < 1) fail("synth.annotator_dim must be positive");
  if (!(heldout_fraction >= 0 && heldout_fraction < 1)) fail("corpus.heldout_fraction must lie in [0, 1)");
  if (prompt_budget < 1) fail("corpus.prompt_budget must be positive");
  if (!(refine.delta_s > 0)) fail("refine.delta_s must be positive");
  if (!(refine.ast_ratio_max >= 0)) fail("refine.ast_ratio_max must be non-negative");
  if (!(judge_overlap > 0 && judge_overlap <= 1)) fail("refine.judge_overlap must lie in (0, 1]");
  if (hash_dim < 1 || embed_dim < 1) fail("train.hash_dim and train.embed_dim must be positive");
  if (k_cutoff < 1) fail("eval.k_cutoff must be at least 1");
  if (grid.empty()) fail("eval.grid must not be empty");
  for (double v : grid)
    if (!(v > 0)) fail("eval.grid values must be positive");
  if (retry.retries < 0 || retry.backoff_ms < 0 || retry.timeout_s < 1 || retry.max_in_flight < 1)
    fail("backends retry settings out of range");
  for (const auto* b : {&generator, &annotator, &judge}) {
    if (b->kind != "builtin" && b->kind != "http") fail("backend kind must be \"builtin\" or \"http\"");
    if (b->kind == "http" && b->url.empty()) fail("http backend needs a url");
  }
  TrainConfig tc = train;
  tc.K = K;
  tc.delta_s = refine.delta_s;
  tc.validate();
}

void PipelineConfig::apply_env_credentials() {
  for (auto [var, b] : {std::pair{"OASIS_GENERATOR_TOKEN", &generator}, {"OASIS_ANNOTATOR_TOKEN", &annotator},
                        {"OASIS_JUDGE_TOKEN", &judge}})
    if (const char* v = std::getenv(var)) b->token = v;
}

void PipelineConfig::force_offline() {
  for (auto* b : {&generator, &annotator, &judge}) *b = BackendConfig{};
}

// ---- manifests ----

Json StageManifest::to_json() const {
  return Json{{"stage", stage},           {"inputs", inputs},           {"config_hash", config_hash},
              {"outputs", outputs},       {"started_at", started_at}, {"finished_at", finished_at}};
}

StageManifest StageManifest::from_json(const Json& j) {
  StageManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  m.started_at = j.value("started_at", "");
  m.finished_at = j.value("finished_at", "");
  return m;
}

WorkdirLock::WorkdirLock(const fs::path& dir) {
  fs::create_directories(dir);
  const auto path = dir / ".oasis.lock";
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error("io_error", fmt::format("cannot open {}: {}", path.string(), std::strerror(errno)));
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    throw Error("locked", fmt::format("another pipeline is using {}", dir.string()));
  }
}

WorkdirLock::~WorkdirLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

// ---- data helpers ----

std::vector<std::string> choose_heldout(const std::vector<std::string>& repo_ids, double fraction,
                                        std::uint64_t seed) {
  const std::size_t n = repo_ids.size();
  if (n < 2 || fraction <= 0) return {};
  const auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  const std::size_t count = std::clamp<std::size_t>(want, 1, n - 1);
  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  for (const auto& id : repo_ids) keyed.emplace_back(derive_seed(seed, id), id);
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(keyed[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

EvalDataset heldout_dataset(const std::vector<FunctionUnit>& units, const std::vector<DocQuery>& queries,
                            const std::vector<std::string>& repo_ids) {
  const std::set<std::string, std::less<>> repos(repo_ids.begin(), repo_ids.end());
  const auto index = index_units(units);
  EvalDataset ds;
  for (const auto& u : units)
    if (repos.count(u.repo_id)) ds.candidates.push_back({u.func_id, u.source});
  for (const auto& q : queries) {
    const auto it = index.find(q.func_id);
    if (it != index.end() && repos.count(it->second->repo_id)) ds.queries.push_back({q.query_id, q.text, {q.func_id}});
  }
  return ds;
}

EvalReport train_and_evaluate(const std::vector<PairRecord>& refined, const TextSources& texts,
                              const EvalDataset& ds, const PipelineConfig& cfg, const TrainConfig& train_cfg) {
  auto model = EncoderModel::initialise(cfg.hash_dim, cfg.embed_dim, cfg.pooling, derive_seed(cfg.seed, "init"));
  auto result = train(refined, texts, std::move(model), train_cfg);
  return evaluate(encoder_of(result.model), ds, cfg.k_cutoff);
}

// ---- pipeline ----

Pipeline::Pipeline(PipelineConfig cfg, bool strict)
    : cfg_(std::move(cfg)), strict_(strict), lock_(cfg_.work_dir) {
  cfg_.validate();
}

fs::path Pipeline::manifest_path(Stage s) const {
  return cfg_.work_dir / "manifests" / (std::string(stage_name(s)) + ".json");
}

Json Pipeline::stage_config(Stage s) const {
  const Json all = cfg_.to_json();
  const Json& c = all;
  const Json eval_source = cfg_.eval_path.empty() ? Json{{"heldout_fraction", cfg_.heldout_fraction}}
                                                  : Json{{"eval", cfg_.eval_path.string()}};
  switch (s) {
    case Stage::ingest: return Json{{"language", cfg_.language}};
    case Stage::docgen:
      return Json{{"prompt_budget", cfg_.prompt_budget}, {"generator", c["backends"]["generator"]}};
    case Stage::mine:
      return Json{{"seed", cfg_.seed}, {"K", cfg_.K}, {"heldout_fraction", cfg_.heldout_fraction}};
    case Stage::annotate:
      return Json{{"annotator", c["backends"]["annotator"]}, {"annotator_dim", cfg_.annotator_dim}};
    case Stage::refine: return Json{{"refine", c["refine"]}, {"judge", c["backends"]["judge"]}};
    case Stage::train: return Json{{"seed", cfg_.seed}, {"train", c["train"]}};
    case Stage::eval: return Json{{"k_cutoff", cfg_.k_cutoff}, {"source", eval_source}};
    case Stage::grid:
      return Json{{"seed", cfg_.seed},       {"grid", cfg_.grid},
                  {"refine", c["refine"]},   {"judge", c["backends"]["judge"]},
                  {"train", c["train"]},     {"k_cutoff", cfg_.k_cutoff},
                  {"source", eval_source}};
    case Stage::mds: return Json{{"mds_max_points", cfg_.mds_max_points}};
  }
  return {};
}

Pipeline::Io Pipeline::stage_io(Stage s) const {
  const auto& a = cfg_.artifacts;
  auto p = [&](const std::string& name) { return cfg_.artifact(name); };
  const fs::path eval_in = cfg_.eval_path.empty() ? p(a.split) : cfg_.eval_path;
  switch (s) {
    case Stage::ingest: return {{cfg_.corpus_dir}, {p(a.functions)}};
    case Stage::docgen: return {{p(a.functions)}, {p(a.queries)}};
    case Stage::mine: return {{p(a.functions), p(a.queries)}, {p(a.split), p(a.pairs_mined)}};
    case Stage::annotate: return {{p(a.pairs_mined), p(a.functions), p(a.queries)}, {p(a.pairs)}};
    case Stage::refine:
      return {{p(a.pairs), p(a.functions), p(a.queries)}, {p(a.pairs_refined), p(a.refine_report)}};
    case Stage::train:
      return {{p(a.pairs_refined), p(a.functions), p(a.queries)}, {p(a.checkpoint), p(a.loss_curve)}};
    case Stage::eval: {
      Io io{{p(a.checkpoint), p(a.functions), p(a.queries), eval_in}, {p(a.report)}};
      if (cfg_.eval_path.empty()) io.outputs.insert(io.outputs.begin(), p(a.eval_data));
      return io;
    }
    case Stage::grid: return {{p(a.pairs), p(a.functions), p(a.queries), eval_in}, {p(a.grid)}};
    case Stage::mds:
      return {{p(a.checkpoint), cfg_.eval_path.empty() ? p(a.eval_data) : cfg_.eval_path}, {p(a.mds)}};
  }
  return {};
}

namespace {

// A directory input contributes every regular file below it.
void hash_input(const fs::path& path, std::map<std::string, std::string>& out) {
  if (!fs::is_directory(path)) {
    out[path.generic_string()] = sha256_file(path);
    return;
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out[f.generic_string()] = sha256_file(f);
}

}  // namespace

StageManifest Pipeline::run_stage(Stage s) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto io = stage_io(s);
  for (const auto& in : io.inputs)
    if (!fs::exists(in)) throw Error("missing_input:" + in.string());

  StageManifest m;
  m.stage = std::string(stage_name(s));
  for (const auto& in : io.inputs) hash_input(in, m.inputs);
  m.config_hash = sha256_hex(stage_config(s).dump());

  const auto mpath = manifest_path(s);
  if (fs::exists(mpath)) {
    try {
      const auto prev = StageManifest::from_json(Json::parse(read_file(mpath)));
      bool fresh = prev.inputs == m.inputs && prev.config_hash == m.config_hash;
      for (const auto& out : io.outputs) {
        const auto key = out.generic_string();
        const auto it = prev.outputs.find(key);
        if (!fresh || it == prev.outputs.end() || !fs::exists(out)) {
          fresh = false;
          break;
        }
        if (strict_ && sha256_file(out) != it->second) {
          spdlog::warn("{}: {} changed since it was written; refusing to skip", m.stage, key);
          fresh = false;
          break;
        }
      }
      if (fresh) {
        spdlog::info("{}: up to date, skipped", m.stage);
        auto skipped = prev;
        skipped.skipped = true;
        skipped.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return skipped;
      }
    } catch (const Json::exception& e) {
      spdlog::warn("{}: unreadable manifest ({}), rerunning", m.stage, e.what());
    }
  }

  m.started_at = utc_now();
  spdlog::info("{}: running", m.stage);
  execute(s);
  for (const auto& out : io.outputs) m.outputs[out.generic_string()] = sha256_file(out);
  m.finished_at = utc_now();
  fs::create_directories(mpath.parent_path());
  write_json(mpath, m.to_json());
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

std::vector<StageManifest> Pipeline::run_all() {
  std::vector<StageManifest> out;
  for (Stage s : kAllStages) out.push_back(run_stage(s));
  return out;
}

void Pipeline::execute(Stage s) {
  switch (s) {
    case Stage::ingest: return run_ingest();
    case Stage::docgen: return run_docgen();
    case Stage::mine: return run_mine();
    case Stage::annotate: return run_annotate();
    case Stage::refine: return run_refine();
    case Stage::train: return run_train();
    case Stage::eval: return run_eval();
    case Stage::grid: return run_grid();
    case Stage::mds: return run_mds();
  }
}

void Pipeline::run_ingest() {
  const auto provider = make_default_ast_provider();
  std::vector<FunctionUnit> units;
  for (const auto& repo : discover_repositories(cfg_.corpus_dir, cfg_.language)) {
    auto found = resolve_call_graph(extract_functions(repo, *provider));
    units.insert(units.end(), std::make_move_iterator(found.begin()), std::make_move_iterator(found.end()));
  }
  spdlog::info("ingest: {} functions", units.size());
  write_file_atomic(cfg_.artifact(cfg_.artifacts.functions), to_jsonl(units));
}

void Pipeline::run_docgen() {
  const auto units = load_functions(cfg_.artifact(cfg_.artifacts.functions));
  const auto gen = make_generator(cfg_);
  const auto queries = generate_docstrings(units, *gen, DocgenOptions{cfg_.prompt_budget, cfg_.retry});
  spdlog::info("docgen: {} of {} functions documented", queries.size(), units.size());
  write_file_atomic(cfg_.artifact(cfg_.artifacts.queries), to_jsonl(queries));
}

void Pipeline::run_mine() {
  const auto units = load_functions(cfg_.artifact(cfg_.artifacts.functions));
  const auto queries = load_queries(cfg_.artifact(cfg_.artifacts.queries));

  std::set<std::string> repo_set;
  for (const auto& u : units) repo_set.insert(u.repo_id);
  const std::vector<std::string> repos(repo_set.begin(), repo_set.end());
  const auto heldout = choose_heldout(repos, cfg_.heldout_fraction, derive_seed(cfg_.seed, "split"));
  const std::set<std::string> held(heldout.begin(), heldout.end());
  std::vector<std::string> training;
  for (const auto& r : repos)
    if (!held.count(r)) training.push_back(r);

  std::vector<FunctionUnit> train_units;
  for (const auto& u : units)
    if (!held.count(u.repo_id)) train_units.push_back(u);
  const auto index = index_units(train_units);
  std::vector<DocQuery> train_queries;
  for (const auto& q : queries)
    if (index.count(q.func_id)) train_queries.push_back(q);

  const auto pairs = mine_groups(train_queries, train_units, cfg_.K, derive_seed(cfg_.seed, "mine"));
  spdlog::info("mine: {} training / {} held-out repositories, {} pairs", training.size(), heldout.size(),
               pairs.size());
  write_json(cfg_.artifact(cfg_.artifacts.split), Json{{"train", training}, {"heldout", heldout}});
  write_file_atomic(cfg_.artifact(cfg_.artifacts.pairs_mined), to_jsonl(pairs));
}

void Pipeline::run_annotate() {
  const auto units = load_functions(cfg_.artifact(cfg_.artifacts.functions));
  const auto queries = load_queries(cfg_.artifact(cfg_.artifacts.queries));
  auto mined = load_pairs(cfg_.artifact(cfg_.artifacts.pairs_mined));
  const auto embedder = make_embedder(cfg_);
  SimilarityAnnotator annotator(*embedder);
  const auto pairs = annotate_pairs(std::move(mined), make_text_sources(queries, units), annotator, cfg_.retry);
  write_file_atomic(cfg_.artifact(cfg_.artifacts.pairs), to_jsonl(pairs));
}

void Pipeline::run_refine() {
  const auto units = load_functions(cfg_.artifact(cfg_.artifacts.functions));
  const auto queries = load_queries(cfg_.artifact(cfg_.artifacts.queries));
  auto pairs = load_pairs(cfg_.artifact(cfg_.artifacts.pairs));
  const auto judge = make_judge(cfg_);
  const auto provider = make_default_ast_provider();
  auto outcome = refine_pairs(std::move(pairs), units, queries, *judge, *provider, cfg_.refine, cfg_.retry);
  write_file_atomic(cfg_.artifact(cfg_.artifacts.pairs_refined), to_jsonl(outcome.pairs));
  write_json(cfg_.artifact(cfg_.artifacts.refine_report), outcome.report);
}

void Pipeline::run_train() {
  const auto units = load_functions(cfg_.artifact(cfg_.artifacts.functions));
  const auto queries = load_queries(cfg_.artifact(cfg_.artifacts.queries));
  const auto pairs = load_pairs(cfg_.artifact(cfg_.artifacts.pairs_refined));
  auto model = EncoderModel::initialise(cfg_.hash_dim, cfg_.embed_dim, cfg_.pooling, derive_seed(cfg_.seed, "init"));
  const auto result = train(pairs, make_text_sources(queries, units), std::move(model), train_config_of(cfg_));
  save_checkpoint(result.model, cfg_.artifact(cfg_.artifacts.checkpoint));
  write_file_atomic(cfg_.artifact(cfg_.artifacts.loss_curve), loss_curve_csv(result.curve));
}

EvalDataset Pipeline::eval_dataset(const std::vector<FunctionUnit>& units,
                                   const std::vector<DocQuery>& queries) const {
  if (!cfg_.eval_path.empty()) return load_eval_dataset(cfg_.eval_path);
  return heldout_dataset(units, queries, heldout_from_split(cfg_.artifact(cfg_.artifacts.split)));
}

void Pipeline::run_eval() {
  const auto units = load_functions(cfg_.artifact(cfg_.artifacts.functions));
  const auto queries = load_queries(cfg_.artifact(cfg_.artifacts.queries));
  const auto ds = eval_dataset(units, queries);
  if (cfg_.eval_path.empty()) write_file_atomic(cfg_.artifact(cfg_.artifacts.eval_data), to_jsonl(ds));

  Json report{{"source", cfg_.eval_path.empty() ? "heldout" : "file"},
              {"queries", ds.queries.size()},
              {"candidates", ds.candidates.size()}};
  if (ds.queries.empty() || ds.candidates.empty()) {
    spdlog::warn("eval: nothing to evaluate (no held-out queries)");
    report["model"] = nullptr;
    report["lexical_baseline"] = nullptr;
    report["hard_subset"] = Json::array();
  } else {
    const auto model = load_checkpoint(cfg_.artifact(cfg_.artifacts.checkpoint));
    auto trained = evaluate(encoder_of(model), ds, cfg_.k_cutoff);
    HashedBagEmbedder lexical(cfg_.annotator_dim);
    auto baseline = evaluate(encoder_of(lexical), ds, cfg_.k_cutoff);
    const auto hard = hard_subset({trained, baseline});
    trained.hard_subset = baseline.hard_subset = hard;
    spdlog::info("eval: MRR@{} {:.4f} (lexical baseline {:.4f}), {} hard queries", cfg_.k_cutoff, trained.mrr,
                 baseline.mrr, hard.size());
    report["model"] = trained.to_json();
    report["lexical_baseline"] = baseline.to_json();
    report["hard_subset"] = hard;
  }
  write_json(cfg_.artifact(cfg_.artifacts.report), report);
}

void Pipeline::run_grid() {
  const auto units = load_functions(cfg_.artifact(cfg_.artifacts.functions));
  const auto queries = load_queries(cfg_.artifact(cfg_.artifacts.queries));
  const auto pairs = load_pairs(cfg_.artifact(cfg_.artifacts.pairs));
  const auto ds = eval_dataset(units, queries);
  const auto texts = make_text_sources(queries, units);
  const auto judge = make_judge(cfg_);
  const auto provider = make_default_ast_provider();

  const auto result = grid_search_delta_s(cfg_.grid, [&](double delta_s) {
    if (ds.queries.empty()) throw Error("invalid_argument", "no evaluation queries");
    RefineConfig rc = cfg_.refine;
    rc.delta_s = delta_s;
    const auto refined = refine_pairs(pairs, units, queries, *judge, *provider, rc, cfg_.retry);
    TrainConfig tc = train_config_of(cfg_);
    tc.delta_s = delta_s;
    const double mrr = train_and_evaluate(refined.pairs, texts, ds, cfg_, tc).mrr;
    spdlog::info("grid: delta_s {} -> MRR {:.4f}", delta_s, mrr);
    return mrr;
  });
  write_json(cfg_.artifact(cfg_.artifacts.grid), result.to_json());
}

void Pipeline::run_mds() {
  const auto ds = load_eval_dataset(cfg_.eval_path.empty() ? cfg_.artifact(cfg_.artifacts.eval_data) : cfg_.eval_path);
  const auto model = load_checkpoint(cfg_.artifact(cfg_.artifacts.checkpoint));

  // Each query next to its targets, so the plot shows how close pairs land.
  std::map<std::string, const EvalCandidate*, std::less<>> by_id;
  for (const auto& c : ds.candidates) by_id[c.code_id] = &c;
  std::vector<std::string> ids, texts;
  std::set<std::string> taken;
  auto add = [&](const std::string& id, const std::string& text) {
    if (ids.size() < cfg_.mds_max_points && taken.insert(id).second) {
      ids.push_back(id);
      texts.push_back(text);
    }
  };
  for (const auto& q : ds.queries) {
    add(q.query_id, q.text);
    for (const auto& t : q.target_ids)
      if (const auto it = by_id.find(t); it != by_id.end()) add(t, it->second->text);
  }
  for (const auto& c : ds.candidates) add(c.code_id, c.text);

  Mat coords = Mat::Zero(static_cast<Eigen::Index>(ids.size()), 2);
  if (ids.size() >= 2) coords = mds_coords(encoder_of(model)(texts)).coords;
  write_file_atomic(cfg_.artifact(cfg_.artifacts.mds), mds_csv(ids, coords));
}

}  // namespace oasis
