#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "oasis/common.hpp"
#include "oasis/corpus.hpp"
#include "oasis/eval.hpp"
#include "oasis/refine.hpp"
#include "oasis/synth.hpp"
#include "oasis/train.hpp"

namespace oasis {

enum class Stage { ingest, docgen, mine, annotate, refine, train, eval, grid, mds };

inline constexpr std::array<Stage, 9> kAllStages{Stage::ingest, Stage::docgen, Stage::mine,
                                                 Stage::annotate, Stage::refine, Stage::train,
                                                 Stage::eval, Stage::grid, Stage::mds};

std::string_view stage_name(Stage s) noexcept;
/// Throws Error("invalid_argument") for an unknown name.
Stage parse_stage(std::string_view name);

struct BackendConfig {
  std::string kind = "builtin";  // "builtin" or "http"
  std::string url;
  std::string token;
};

/// Artifact file names, relative to the working directory.
struct ArtifactPaths {
  std::string functions = "functions.jsonl";
  std::string queries = "queries.jsonl";
  std::string split = "split.json";
  std::string pairs_mined = "pairs.mined.jsonl";
  std::string pairs = "pairs.jsonl";
  std::string pairs_refined = "pairs.refined.jsonl";
  std::string refine_report = "refine.report.json";
  std::string checkpoint = "model.ckpt";
  std::string loss_curve = "loss.csv";
  std::string eval_data = "eval.jsonl";
  std::string report = "report.json";
  std::string grid = "grid.json";
  std::string mds = "mds.csv";
};

/// Everything a run needs. Loaded from a JSON file whose sections mirror
/// to_json(); missing keys keep their defaults, unknown keys are rejected.
struct PipelineConfig {
  std::uint64_t seed = 3407;
  std::filesystem::path corpus_dir = "corpus";
  std::filesystem::path work_dir = "work";
  std::filesystem::path eval_path;  // external eval.jsonl; empty = built from held-out repositories
  ArtifactPaths artifacts;

  std::string language = "auto";
  std::size_t prompt_budget = 1024;
  double heldout_fraction = 0.2;

  int K = 5;
  std::size_t annotator_dim = 4096;

  RefineConfig refine;
  double judge_overlap = 0.8;

  TrainConfig train;
  int hash_dim = 4096;
  int embed_dim = 64;
  Pooling pooling = Pooling::mean;

  std::size_t k_cutoff = 1000;
  std::vector<double> grid{0.05, 0.1, 0.2};
  std::size_t mds_max_points = 200;

  BackendConfig generator, annotator, judge;
  RetryPolicy retry;

  /// Throws Error("invalid_config") on unknown keys, wrong types or invalid values.
  static PipelineConfig from_json(const Json& j);
  static PipelineConfig load(const std::filesystem::path& path);
  /// Complete configuration; credentials are left out.
  Json to_json() const;
  void validate() const;

  /// OASIS_GENERATOR_TOKEN, OASIS_ANNOTATOR_TOKEN, OASIS_JUDGE_TOKEN.
  void apply_env_credentials();
  /// Every backend becomes the built-in one.
  void force_offline();

  std::filesystem::path artifact(const std::string& name) const { return work_dir / name; }
};

struct StageManifest {
  std::string stage;
  std::map<std::string, std::string> inputs;   // path -> sha256
  std::string config_hash;
  std::map<std::string, std::string> outputs;  // path -> sha256
  std::string started_at;
  std::string finished_at;

  // Run bookkeeping, not persisted.
  bool skipped = false;
  double seconds = 0;

  Json to_json() const;
  static StageManifest from_json(const Json& j);
};

/// Exclusive advisory lock on <dir>/.oasis.lock, released on destruction
/// (or when the process dies). Throws Error("locked") if another pipeline
/// holds it.
class WorkdirLock {
 public:
  explicit WorkdirLock(const std::filesystem::path& dir);
  ~WorkdirLock();
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  int fd_ = -1;
};

/// Held-out repositories: round(fraction * n) of them, at least one and
/// leaving at least one for training, chosen by derive_seed(seed, repo_id).
/// None when there are fewer than two repositories. Sorted.
std::vector<std::string> choose_heldout(const std::vector<std::string>& repo_ids, double fraction,
                                        std::uint64_t seed);

/// Retrieval set over the given repositories: every query whose origin
/// lies in them, against all of their functions.
EvalDataset heldout_dataset(const std::vector<FunctionUnit>& units,
                            const std::vector<DocQuery>& queries,
                            const std::vector<std::string>& repo_ids);

/// Trains a fresh encoder (initialised from the root seed) on refined pairs
/// and evaluates it.
EvalReport train_and_evaluate(const std::vector<PairRecord>& refined, const TextSources& texts,
                              const EvalDataset& ds, const PipelineConfig& cfg,
                              const TrainConfig& train_cfg);

/// Seeds: stage s draws from derive_seed(cfg.seed, <tag>) with tags "split",
/// "mine", "init" and "train".
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg, bool strict = false);

  /// Runs one stage unless its manifest shows identical inputs and
  /// configuration (and, with strict, unchanged outputs). Throws
  /// Error("missing_input:<path>") when an input is absent.
  StageManifest run_stage(Stage s);
  std::vector<StageManifest> run_all();

  /// The configuration subset a stage depends on; its hash goes into the manifest.
  Json stage_config(Stage s) const;
  std::filesystem::path manifest_path(Stage s) const;
  const PipelineConfig& config() const noexcept { return cfg_; }

 private:
  struct Io {
    std::vector<std::filesystem::path> inputs;
    std::vector<std::filesystem::path> outputs;
  };
  Io stage_io(Stage s) const;
  void execute(Stage s);

  void run_ingest();
  void run_docgen();
  void run_mine();
  void run_annotate();
  void run_refine();
  void run_train();
  void run_eval();
  void run_grid();
  void run_mds();

  EvalDataset eval_dataset(const std::vector<FunctionUnit>& units,
                           const std::vector<DocQuery>& queries) const;

  PipelineConfig cfg_;
  bool strict_;
  WorkdirLock lock_;
};

}  // namespace oasis
