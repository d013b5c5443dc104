#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "incseg/config.hpp"

namespace incseg {

/// Version string recorded in every manifest.
std::string code_version();

struct CommandOptions {
  bool force = false;
  std::optional<int> parallel;          // overrides experiment.threads for inference stages
  std::optional<int> parallel_methods;  // overrides experiment.parallel_methods
  std::vector<Method> methods;          // empty: experiment.methods
  std::optional<CheckpointSelect> checkpoint;
  std::vector<fs::path> manifests;  // report inputs; empty: every evaluation under the output root
  std::ostream* log = nullptr;
};

struct CommandResult {
  std::string command;
  fs::path manifest_path;
  json manifest;
  bool skipped = false;  // inputs and outputs unchanged since the recorded run
};

/// Artifact locations under <output>/case<k>/.
struct RunLayout {
  fs::path case_dir;
  fs::path data;
  fs::path init;
  fs::path eval;

  explicit RunLayout(const ExperimentConfig& cfg);
  fs::path method_dir(Method m) const;
  fs::path exemplar_dir(Method m) const;
  fs::path checkpoint(const fs::path& stage_dir, CheckpointSelect s) const;
};

/// Corpus generation; an existing corpus is hash-verified and left untouched.
CommandResult cmd_synth(const ExperimentConfig& cfg, const CommandOptions& opts = {});
CommandResult cmd_train_init(const ExperimentConfig& cfg, const CommandOptions& opts = {});
std::vector<CommandResult> cmd_select_exemplars(const ExperimentConfig& cfg, const CommandOptions& opts = {});
std::vector<CommandResult> cmd_train_inc(const ExperimentConfig& cfg, const CommandOptions& opts = {});
/// Scores the initial and every method checkpoint on the test volume.
CommandResult cmd_evaluate(const ExperimentConfig& cfg, const CommandOptions& opts = {});
/// Method-by-case comparison table, retention table and forgetting curves.
CommandResult cmd_report(const ExperimentConfig& cfg, const CommandOptions& opts = {});

/// Loads the corpus and partitions it by the case preset.
ScenarioSplit load_split(const ExperimentConfig& cfg);

/// Exit code for an error category: 2 config, 3 missing artifact, 4 runtime.
int exit_code(ErrorKind kind);

/// Full command-line front end; returns the process exit code.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace incseg
