// oasis: command-line driver for the pipeline stages.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>

#include "oasis/pipeline.hpp"
#include "oasis/synthetic.hpp"

namespace {

int fail(const std::string& code, const std::string& message) {
  std::fprintf(stdout, "%s\n", oasis::Json{{"error", code}, {"message", message}}.dump().c_str());
  std::fflush(stdout);
  return 1;
}

void print_summary(const std::vector<oasis::StageManifest>& runs) {
  fmt::print("{:<10} {:<8} {:>9}  {}\n", "stage", "status", "seconds", "outputs");
  for (const auto& m : runs) {
    std::string outputs;
    for (const auto& [path, hash] : m.outputs) outputs += (outputs.empty() ? "" : " ") + path;
    fmt::print("{:<10} {:<8} {:>9.2f}  {}\n", m.stage, m.skipped ? "skipped" : "ran", m.seconds, outputs);
  }
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("oasis"));

  CLI::App app{"Order-augmented training pipeline for code-search embeddings"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool strict = false, offline = false, quiet = false;
  app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "root seed (overrides the configuration)");
  app.add_flag("--strict", strict, "also verify output hashes before skipping a stage");
  app.add_flag("--offline", offline, "use the built-in generator, annotator and judge");
  app.add_flag("-q,--quiet", quiet, "only log warnings and errors");

  std::vector<std::pair<std::string, CLI::App*>> stage_cmds;
  for (const auto s : oasis::kAllStages) {
    const std::string name(oasis::stage_name(s));
    stage_cmds.emplace_back(name, app.add_subcommand(name, "run the " + name + " stage"));
  }
  auto* all_cmd = app.add_subcommand("all", "run every stage in order");
  auto* show_cmd = app.add_subcommand("show-config", "print the effective configuration");

  int repos = 20, funcs = 10;
  std::string out_dir;
  auto* synth_cmd = app.add_subcommand("synth-corpus", "write the synthetic Python corpus");
  synth_cmd->add_option("--repos", repos, "number of repositories")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--funcs", funcs, "functions per repository")->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--out", out_dir, "target directory (default: the configured corpus path)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return fail("usage", e.what());
  }
  if (quiet) spdlog::set_level(spdlog::level::warn);

  try {
    auto cfg = config_path.empty() ? oasis::PipelineConfig{} : oasis::PipelineConfig::load(config_path);
    if (seed) cfg.seed = *seed;
    cfg.apply_env_credentials();
    if (offline) cfg.force_offline();

    if (show_cmd->parsed()) {
      fmt::print("{}\n", cfg.to_json().dump(2));
      return 0;
    }
    if (synth_cmd->parsed()) {
      const std::filesystem::path dir = out_dir.empty() ? cfg.corpus_dir : std::filesystem::path(out_dir);
      const auto n = oasis::make_synthetic_corpus(dir, repos, funcs, cfg.seed);
      fmt::print("wrote {} functions in {} repositories to {}\n", n, repos, dir.string());
      return 0;
    }

    oasis::Pipeline pipeline(std::move(cfg), strict);
    std::vector<oasis::StageManifest> runs;
    if (all_cmd->parsed()) {
      runs = pipeline.run_all();
    } else {
      for (const auto& [name, cmd] : stage_cmds)
        if (cmd->parsed()) runs.push_back(pipeline.run_stage(oasis::parse_stage(name)));
    }
    print_summary(runs);
    return 0;
  } catch (const oasis::Error& e) {
    return fail(e.code(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
}
