#pragma once

#include <cstdint>
#include <vector>

#include "incseg/dataset.hpp"
#include "incseg/network.hpp"

namespace incseg {

enum class UncertaintyFunctional {
  entropy,   // predictive entropy of the MC-mean foreground probability
  variance,  // variance of the foreground probability across passes
};

enum class UncertaintyAggregation { all_pixels, foreground_only };

std::string to_string(UncertaintyFunctional f);
UncertaintyFunctional parse_uncertainty_functional(const std::string& s);
std::string to_string(UncertaintyAggregation a);
UncertaintyAggregation parse_uncertainty_aggregation(const std::string& s);

struct McOptions {
  int t_mc = 29;
  std::uint64_t seed = 0;
  UncertaintyFunctional functional = UncertaintyFunctional::entropy;
  UncertaintyAggregation aggregation = UncertaintyAggregation::all_pixels;
  int threads = 1;
};

struct McPrediction {
  int t_mc = 0;
  std::vector<ClassId> heads;
  std::vector<Tensor> mean;             // (1, 2, H, W) per head
  std::vector<Grid2<Real>> uncertainty;  // per head, per pixel

  const Tensor& mean_of(ClassId c) const;
  const Grid2<Real>& uncertainty_of(ClassId c) const;
  bool operator==(const McPrediction&) const = default;
};

/// t_mc stochastic passes with dropout active and running batch-norm statistics.
McPrediction mc_inference(const SegmentationNetwork& net, const Grid2<float>& image, int t_mc, std::uint64_t seed,
                          UncertaintyFunctional functional = UncertaintyFunctional::entropy);

/// Per-pixel binary entropy of a foreground probability, in nats.
Real binary_entropy(Real q);

/// Mean per-pixel uncertainty of head c; restricted to mask pixels when a mask is given.
Real image_uncertainty(const McPrediction& mc, ClassId c, const Mask2* foreground = nullptr);

struct CertaintyEntry {
  Provenance provenance;
  std::size_t sample_index = 0;  // position in the source dataset
  Real uncertainty = 0;
  bool operator==(const CertaintyEntry&) const = default;
};

struct CertaintySet {
  ClassId class_id;
  int capacity = 0;
  std::vector<CertaintyEntry> members;  // ascending uncertainty, ties by provenance
  bool operator==(const CertaintySet&) const = default;
};

/// Seed of the MC pass sequence for one sample; independent of scheduling.
std::uint64_t sample_seed(std::uint64_t master, const Provenance& p);

/// The k_c samples annotated for c, with foreground in the slice, of lowest MC uncertainty.
CertaintySet most_certain_set(const SegmentationNetwork& net, const LabeledDataset& dataset, ClassId c, int k_c,
                              const McOptions& options);

}  // namespace incseg
