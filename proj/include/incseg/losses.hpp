#pragma once

#include <map>
#include <span>
#include <vector>

#include "incseg/dataset.hpp"
#include "incseg/network.hpp"

namespace incseg {

struct LossWeights {
  Real alpha = 0.5;
  void validate() const;
};

enum class ClassificationLossKind { cross_entropy, dice };
std::string to_string(ClassificationLossKind k);
ClassificationLossKind parse_classification_loss(const std::string& s);

struct LossOptions {
  LossWeights weights;
  Real temperature = 1.0;
  ClassificationLossKind classification = ClassificationLossKind::cross_entropy;
};

/// Frozen two-channel old-head probabilities keyed by sample provenance and class.
class PredictionSnapshot {
 public:
  /// maps has shape (1, 2, H, W); channels must sum to one per pixel.
  void put(const Provenance& p, ClassId c, Tensor maps);
  const Tensor& get(const Provenance& p, ClassId c) const;
  bool contains(const Provenance& p) const { return entries_.count(p) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::vector<ClassId> classes() const;
  const std::map<Provenance, std::map<ClassId, Tensor>>& entries() const { return entries_; }

  /// Throws unless every sample of `d` is covered for all snapshot classes.
  void require_coverage(const LabeledDataset& d) const;
  std::string hash() const;

  void save(const fs::path& dir) const;
  static PredictionSnapshot load(const fs::path& dir);

 private:
  std::map<Provenance, std::map<ClassId, Tensor>> entries_;
};

/// Entropy of a two-channel probability map, averaged over pixels.
Real mean_entropy(const Tensor& maps, int sample = 0);

/// Two-class loss of one head for one batch sample against a binary mask.
/// Writes d(loss)/d(logits) for that sample into grad (2*H*W values) when non-null.
Real classification_loss(const Tensor& logits, int sample, const Mask2& mask, ClassificationLossKind kind,
                         Real* grad = nullptr);

/// Cross-entropy of old-head outputs against snapshot targets for one sample, averaged over pixels
/// and old classes. logits[i] pairs with targets[i]; grads[i] (2*H*W) is written when non-empty.
Real distillation_loss(std::span<const Tensor* const> logits, int sample, std::span<const Tensor* const> targets,
                       Real temperature = 1.0, std::span<Real* const> grads = {});

/// Which branch of the combined objective a sample falls in.
enum class Membership {
  supervised,   // L_c only (initial training, finetuning)
  incremental,  // alpha * L_c + (1 - alpha) * L_d
  exemplar,     // L_d only
};

struct SampleTargets {
  Membership membership = Membership::supervised;
  std::map<ClassId, const Mask2*> ground_truth;  // heads trained by L_c
  std::map<ClassId, const Tensor*> snapshot;     // heads trained by L_d
};

struct LossBreakdown {
  Real total = 0;
  std::vector<Real> classification;  // per sample, 0 when the branch has no L_c
  std::vector<Real> distillation;    // per sample, 0 when the branch has no L_d
  std::vector<Real> contribution;    // per sample
  std::map<ClassId, Tensor> dlogits;  // d(total)/d(logits)
};

/// Mean over the batch of each sample's contribution, with logit gradients.
LossBreakdown total_loss(const ForwardResult& out, std::span<const SampleTargets> targets, const LossOptions& opts);

}  // namespace incseg
