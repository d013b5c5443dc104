#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "incseg/dataset.hpp"
#include "incseg/network.hpp"

namespace incseg {

/// 2|P n G| / (|P| + |G|); 1 when both are empty. Throws on non-binary input or size mismatch.
Real dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
Real dice(const Mask2& pred, const Mask2& gt);
Real dice(const Mask3& pred, const Mask3& gt);

/// Foreground voxels with at least one background (or out-of-grid) face neighbour.
Mask3 surface(const Mask3& mask);

/// Average symmetric surface distance in mm; nullopt when either surface is empty.
/// spacing is mm along (height, width, depth).
std::optional<Real> assd(const Mask3& pred, const Mask3& gt, const std::array<double, 3>& spacing);
std::optional<Real> assd(const Mask2& pred, const Mask2& gt, const std::array<double, 2>& spacing);

/// Exact Euclidean distance (mm) from every voxel to the nearest nonzero voxel of `seeds`.
std::vector<Real> distance_transform(const Mask3& seeds, const std::array<double, 3>& spacing);

/// Foreground decision: foreground probability > 0.5.
Mask2 threshold_foreground(const Tensor& probs, int sample = 0);

struct VolumeScore {
  std::string volume_id;
  ClassId class_id;
  Real dice = 0;
  std::optional<Real> assd_mm;
};

/// Slice-wise eval-mode prediction of every head, restacked per volume, scored in 3D against each
/// class annotated in the volume that the network has a head for.
std::vector<VolumeScore> evaluate_volumes(const SegmentationNetwork& net, const std::vector<AnnotatedVolume>& volumes,
                                          int threads = 1, int axis = 2);

struct EvalRow {
  std::string method;
  int case_id = 0;
  ClassId class_id;
  Real dice_percent = 0;
  std::optional<Real> assd_mm;
  int n_volumes = 0;
  bool operator==(const EvalRow&) const = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  const EvalRow& row(const std::string& method, ClassId c) const;
  std::optional<std::reference_wrapper<const EvalRow>> find(const std::string& method, ClassId c) const;
  void validate() const;

  /// Columns: method,case,class,dice_percent,assd_mm,n_volumes. Undefined ASSD is written as NA.
  std::string to_csv() const;
  static EvalReport from_csv(const std::string& text);
  bool operator==(const EvalReport&) const = default;
};

/// Averages per-volume scores into one row per class (ASSD over volumes where it is defined).
EvalReport aggregate(const std::vector<VolumeScore>& scores, const std::string& method, int case_id);

struct RetentionRow {
  std::string method;
  ClassId class_id;
  Real before_percent = 0;
  Real after_percent = 0;
  Real delta_percent = 0;
};

struct RetentionReport {
  std::vector<RetentionRow> rows;
  /// Methods ordered by mean old-class Dice after the step, best first.
  std::vector<std::pair<std::string, Real>> ranking;

  std::string to_csv() const;
};

/// Per-old-class Dice change of every method in `after` relative to the single-method `before` report.
RetentionReport retention_report(const EvalReport& before, const EvalReport& after, const std::vector<ClassId>& old_classes);

}  // namespace incseg
