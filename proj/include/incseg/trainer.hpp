#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "incseg/exemplar.hpp"
#include "incseg/losses.hpp"
#include "incseg/metrics.hpp"
#include "incseg/network.hpp"
#include "incseg/optimizer.hpp"
#include "incseg/uncertainty.hpp"

namespace incseg {

enum class Method { finetune, lwfseg, aeiseg, coriseg };
std::string to_string(Method m);
Method parse_method(const std::string& s);
SelectionMethod selection_method(Method m);

/// Feature extractor used by CoRiSeg's content distance.
enum class ContentKind { random_conv, identity, self };
std::string to_string(ContentKind k);
ContentKind parse_content_kind(const std::string& s);

struct TrainConfig {
  Real alpha = 0.5;
  int batch_size = 8;
  int epochs = 1000;
  int k_c = 50;
  int k_r = 30;
  int t_mc = 29;
  OptimizerConfig optimizer;
  std::uint64_t seed = 1;
  Method method = Method::lwfseg;
  bool desk_scale = false;

  Real temperature = 1.0;
  ClassificationLossKind classification = ClassificationLossKind::cross_entropy;
  bool freeze_bn = false;  // incremental stages normalize with the stored batch-norm statistics
  bool mixed_batches = false;  // exemplars shuffled into the new-data batches instead of exemplar-only batches
  UncertaintyFunctional uncertainty = UncertaintyFunctional::entropy;
  UncertaintyAggregation aggregation = UncertaintyAggregation::all_pixels;
  CoverageMode coverage = CoverageMode::facility_location;
  Real coverage_threshold = 0.9;
  ContentKind content = ContentKind::random_conv;
  std::uint64_t content_seed = 16;
  int validate_every = 1;  // epochs between validation passes; 0 disables
  int threads = 1;         // used by inference-only stages
  NetworkConfig network;

  /// Desk-scale profile: 64x64 slices, levels 3, base 8, k_c 12, k_r 6, t_MC 8.
  static TrainConfig desk();
  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
};

struct EpochRecord {
  int epoch = 0;
  std::string split;  // "train" or "val"
  std::optional<ClassId> class_id;
  std::optional<Real> dice;
  std::optional<Real> loss_total;
  std::optional<Real> loss_c;
  std::optional<Real> loss_d;
};

struct EpochLog {
  std::vector<EpochRecord> records;
  /// Columns: epoch,split,class,dice,loss_total,loss_c,loss_d (NA for absent values).
  std::string to_csv() const;
  static EpochLog from_csv(const std::string& text);
};

/// Per-branch accounting of the combined objective over a run.
struct LossInstrumentation {
  long batches = 0;
  long incremental_batches = 0;
  long exemplar_batches = 0;
  long mixed_batches = 0;  // batches holding both new-data and exemplar samples, also counted as incremental
  long incremental_samples = 0;
  long exemplar_samples = 0;
  Real incremental_classification_sum = 0;
  Real distillation_sum = 0;
  Real exemplar_classification_sum = 0;     // L_c contributed by exemplar samples
  Real exemplar_new_head_gradient_abs = 0;  // |dL/dlogits| of new heads on exemplar batches
  json to_json() const;
};

struct TrainResult {
  Checkpoint final;
  std::optional<Checkpoint> best;  // best mean validation Dice across heads
  int best_epoch = -1;
  EpochLog log;
  LossInstrumentation instrumentation;
  long optimizer_steps = 0;
};

struct TrainHooks {
  /// Called after every optimizer step.
  std::function<void(long step, const SegmentationNetwork&)> on_step;
  /// Called at the end of every epoch (1-based).
  std::function<void(int epoch)> on_epoch;
};

std::uint64_t body_seed(std::uint64_t master);
std::uint64_t head_seed(std::uint64_t master, ClassId c);

/// Trains a fresh network with one head per class introduced at step 0.
TrainResult train_initial(const LabeledDataset& d_init, const TrainConfig& config,
                          const std::vector<AnnotatedVolume>* validation = nullptr, const TrainHooks& hooks = {});

/// Eval-mode old-head maps for every sample of `data`.
PredictionSnapshot snapshot_predictions(const SegmentationNetwork& old_net, const LabeledDataset& data,
                                        const std::vector<ClassId>& old_classes);

struct IncrementalRun {
  Checkpoint old;
  std::vector<ClassId> new_classes;
  LabeledDataset incremental;                 // D_{i+1}
  ExemplarStore exemplars;                    // empty for finetune and LwfSeg
  std::optional<PredictionSnapshot> snapshot;  // required for every method but finetune

  void validate(Method method) const;
};

/// Snapshot of D_{i+1} and the exemplar images under the old network, refreshing exemplar snapshots.
PredictionSnapshot prepare_snapshot(IncrementalRun& run);

/// Grows the network by the new heads and trains it under the combined objective.
TrainResult train_incremental(const IncrementalRun& run, const TrainConfig& config,
                              const std::vector<AnnotatedVolume>* validation = nullptr, const TrainHooks& hooks = {});

/// Grown copy of the old network (old parameters preserved, new heads seeded from the master seed).
SegmentationNetwork grow_network(const SegmentationNetwork& old_net, const std::vector<ClassId>& new_classes,
                                 std::uint64_t master_seed);

std::unique_ptr<ContentNetwork> make_content_network(const TrainConfig& config, const SegmentationNetwork& net);

/// Runs the method's selector for every old class of the checkpoint and stores the ranked exemplars.
ExemplarStore build_exemplar_store(const Checkpoint& ckpt, const LabeledDataset& old_data, Method method,
                                   const TrainConfig& config, const std::optional<fs::path>& cache_dir = std::nullopt);

}  // namespace incseg
