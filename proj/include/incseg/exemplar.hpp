#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "incseg/dataset.hpp"
#include "incseg/losses.hpp"
#include "incseg/network.hpp"
#include "incseg/uncertainty.hpp"

namespace incseg {

// ---------------------------------------------------------------------------
// Image representations

struct RepresentationVector {
  std::vector<Real> values;
  Provenance provenance;
};

/// Per-channel spatial mean of the abstraction layer, eval mode.
RepresentationVector abstraction_vector(const SegmentationNetwork& net, const ImageSample& sample);
std::vector<Real> abstraction_vector(const SegmentationNetwork& net, const Grid2<float>& image);

/// a.b / (|a| |b|); throws on length mismatch or a zero vector.
Real cosine_similarity(std::span<const Real> a, std::span<const Real> b);

/// A frozen feature extractor: activation maps of each declared layer, shape (1, F_l, h_l, w_l).
class ContentNetwork {
 public:
  virtual ~ContentNetwork() = default;
  virtual std::vector<Tensor> responses(const Grid2<float>& image) const = 0;
  /// Stable identity used for cache keys.
  virtual std::string id() const = 0;
};

/// The image itself as the only layer, one filter.
class IdentityContentNetwork final : public ContentNetwork {
 public:
  std::vector<Tensor> responses(const Grid2<float>& image) const override;
  std::string id() const override { return "identity"; }
};

/// Fixed-seed random convolutional pyramid (conv3x3 + ReLU, 2x2 max-pool between layers);
/// every conv layer is a content layer.
class RandomConvContentNetwork final : public ContentNetwork {
 public:
  explicit RandomConvContentNetwork(std::uint64_t seed = 16, std::vector<int> channels = {8, 16, 32});
  std::vector<Tensor> responses(const Grid2<float>& image) const override;
  std::string id() const override;

 private:
  std::uint64_t seed_;
  std::vector<int> channels_;
  std::vector<Conv2d> convs_;
};

/// The segmentation network's own encoder (last block of every level, eval mode).
class EncoderContentNetwork final : public ContentNetwork {
 public:
  explicit EncoderContentNetwork(SegmentationNetwork net);
  std::vector<Tensor> responses(const Grid2<float>& image) const override;
  std::string id() const override;

 private:
  SegmentationNetwork net_;
  std::string hash_;
};

/// Sum over layers of the mean squared response difference.
Real content_distance(std::span<const Tensor> a, std::span<const Tensor> b);
Real content_distance(const ContentNetwork& net, const Grid2<float>& a, const Grid2<float>& b);

// ---------------------------------------------------------------------------
// Greedy maximum coverage

/// Dense row-major matrix; rows are candidates, columns universe elements.
struct AffinityMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> values;

  AffinityMatrix() = default;
  AffinityMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
  Real& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  /// Header (json text) + raw little-endian float64 payload.
  void save(const fs::path& header_path, const json& key) const;
  static std::optional<AffinityMatrix> load_if_matching(const fs::path& header_path, const json& key);
};

/// Builds the matrix by evaluating affinity(candidate, universe) for every pair in parallel.
AffinityMatrix build_affinity(std::size_t candidates, std::size_t universe,
                              const std::function<Real(std::size_t, std::size_t)>& affinity, int threads = 1);

enum class CoverageMode {
  facility_location,  // C(S) = sum_s max_{e in S} affinity(e, s)
  thresholded,        // C(S) = #{s : max_{e in S} affinity(e, s) >= threshold}
};
std::string to_string(CoverageMode m);
CoverageMode parse_coverage_mode(const std::string& s);

struct CoverageOptions {
  CoverageMode mode = CoverageMode::facility_location;
  Real threshold = 0.9;
  int threads = 1;
};

struct CoverageResult {
  std::vector<std::size_t> order;  // candidate rows in selection order
  std::vector<Real> gains;         // marginal gain of each pick
  std::vector<Real> objective;     // C(S) after each pick
};

/// Objective of an arbitrary selection (used by oracles and audits).
Real coverage_objective(const AffinityMatrix& affinity, std::span<const std::size_t> selected,
                        const CoverageOptions& options = {});

/// Greedy selection of up to k rows. Rows are assumed ordered by key: among equal gains the
/// lowest row wins.
CoverageResult greedy_max_coverage(const AffinityMatrix& affinity, std::size_t k, const CoverageOptions& options = {});

// ---------------------------------------------------------------------------
// Exemplar selection pipelines

enum class SelectionMethod { none, aeiseg, coriseg };
std::string to_string(SelectionMethod m);
SelectionMethod parse_selection_method(const std::string& s);

struct SelectionOptions {
  int k_c = 50;
  int k_r = 30;
  McOptions mc;
  CoverageOptions coverage;
  int threads = 1;
  std::optional<fs::path> cache_dir;  // affinity cache location
};

struct Selection {
  ClassId class_id;
  CertaintySet certain;
  std::vector<std::size_t> selected;  // dataset sample indices in rank order
  CoverageResult coverage;
};

/// Certainty filter, then coverage of the whole dataset by cosine similarity of abstraction vectors.
Selection select_exemplars_aeiseg(const SegmentationNetwork& net, const LabeledDataset& dataset, ClassId c,
                                  const SelectionOptions& options);
/// Certainty filter, then coverage of the whole dataset with affinity = -content distance.
Selection select_exemplars_coriseg(const SegmentationNetwork& net, const ContentNetwork& content,
                                   const LabeledDataset& dataset, ClassId c, const SelectionOptions& options);

// ---------------------------------------------------------------------------
// Exemplar store

struct ExemplarRecord {
  ImageSample sample;
  std::map<ClassId, Tensor> snapshot;  // old-head maps, (1, 2, H, W)
  Real uncertainty = 0;
  Real coverage_gain = 0;
  int rank = 0;
};

class ExemplarStore {
 public:
  ExemplarStore() = default;
  ExemplarStore(SelectionMethod method, int capacity);

  SelectionMethod method() const { return method_; }
  int capacity() const { return capacity_; }
  bool empty() const;
  std::size_t total_records() const;
  std::vector<ClassId> classes() const;

  /// Records must carry rank == position and cover `snapshot_classes`.
  void store(ClassId c, int step, std::vector<ExemplarRecord> records, const std::vector<ClassId>& snapshot_classes);
  /// Keeps the lowest-rank `budget` records of every class; irreversible.
  void trim(int budget);
  const std::vector<ExemplarRecord>& records(ClassId c) const;
  int step_of(ClassId c) const;
  std::optional<int> trimmed_budget() const { return trimmed_to_; }

  /// Distinct exemplar images (a slice chosen for several classes appears once).
  LabeledDataset as_dataset(const ClassRegistry& registry) const;
  PredictionSnapshot snapshot() const;

  json& metadata() { return metadata_; }
  const json& metadata() const { return metadata_; }
  std::string hash() const;

  void save(const fs::path& dir) const;
  static ExemplarStore load(const fs::path& dir);

 private:
  struct Entry {
    int step = 0;
    std::vector<ExemplarRecord> records;
  };
  SelectionMethod method_ = SelectionMethod::none;
  int capacity_ = 0;
  std::optional<int> trimmed_to_;
  std::map<ClassId, Entry> entries_;
  json metadata_ = json::object();
  json history_ = json::array();
};

/// Old-head eval-mode maps for one image.
std::map<ClassId, Tensor> predict_old_heads(const SegmentationNetwork& net, const Grid2<float>& image,
                                            const std::vector<ClassId>& classes);

}  // namespace incseg
