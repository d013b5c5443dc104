#pragma once

#include <string>
#include <vector>

#include "incseg/synthdata.hpp"
#include "incseg/trainer.hpp"

namespace incseg {

enum class CheckpointSelect { final, best };
std::string to_string(CheckpointSelect s);
CheckpointSelect parse_checkpoint_select(const std::string& s);

struct ExperimentConfig {
  int case_id = 1;
  fs::path output = "runs";
  fs::path data;  // empty: <output>/case<k>/data
  std::uint64_t seed = 7;
  std::vector<Method> methods{Method::finetune, Method::lwfseg, Method::aeiseg, Method::coriseg};
  int init_epochs = -1;  // -1: same as train.epochs
  int threads = 1;
  int parallel_methods = 1;
  CheckpointSelect evaluate_checkpoint = CheckpointSelect::final;
  std::string profile = "desk";
  SynthConfig synth;
  TrainConfig train = TrainConfig::desk();

  fs::path case_dir() const;
  fs::path data_dir() const;
  /// Training configuration of one stage (seed, method and epoch count filled in).
  TrainConfig stage_config(std::optional<Method> method) const;

  void validate() const;
  json to_json() const;
};

using ConfigOverrides = std::vector<std::pair<std::string, std::string>>;

/// Parses INI text (sections experiment, synth, train, network). Unknown keys are rejected.
/// The `profile` key (desk or full) selects the defaults that the remaining keys override.
/// Precedence: file, then the output-root environment variable, then `overrides` ("section.key").
ExperimentConfig parse_experiment_config(const std::string& ini_text, const ConfigOverrides& overrides = {});
ExperimentConfig load_experiment_config(const fs::path& path, const ConfigOverrides& overrides = {});
/// Every key with its resolved value, in INI form.
std::string render_experiment_config(const ExperimentConfig& cfg);

/// Environment variable that overrides experiment.output.
inline constexpr const char* kOutputRootEnv = "INCSEG_OUTPUT_ROOT";

}  // namespace incseg
