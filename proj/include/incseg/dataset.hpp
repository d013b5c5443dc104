#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "incseg/common.hpp"
#include "incseg/grid.hpp"
#include "incseg/io.hpp"

namespace incseg {

/// Two acquisition contrasts; B emulates an incremental set acquired with a different sequence.
enum class ContrastProfile { A, B };

std::string to_string(ContrastProfile c);
ContrastProfile parse_contrast(const std::string& s);

struct Volume {
  Grid3<float> voxels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm along (height, width, depth)
  std::string volume_id;
  ContrastProfile contrast = ContrastProfile::A;

  void validate() const;
};

/// Per-class binary masks. A class is annotated iff it has a mask.
struct AnnotationSet {
  std::map<ClassId, Mask3> masks;

  std::set<ClassId> annotated_classes() const;
  bool has(ClassId c) const { return masks.count(c) != 0; }
  void validate_against(const Volume& v) const;
};

struct AnnotatedVolume {
  Volume volume;
  AnnotationSet annotations;
};

struct ImageSample {
  Grid2<float> image;
  std::map<ClassId, Mask2> masks;
  Provenance provenance;

  std::set<ClassId> annotated_classes() const;
  bool annotated(ClassId c) const { return masks.count(c) != 0; }
  /// Annotated for c and the structure intersects this slice.
  bool has_foreground(ClassId c) const;
};

struct ClassEntry {
  ClassId id;
  std::string name;
  int introduced_at_step = 0;
  bool operator==(const ClassEntry&) const = default;
};

class ClassRegistry {
 public:
  ClassRegistry() = default;
  explicit ClassRegistry(std::vector<ClassEntry> entries);

  void add(ClassId id, std::string name, int step);
  bool contains(ClassId id) const;
  const ClassEntry& entry(ClassId id) const;
  const std::vector<ClassEntry>& entries() const { return entries_; }
  std::vector<ClassId> ids() const;
  std::vector<ClassId> introduced_at(int step) const;
  std::vector<ClassId> introduced_before(int step) const;
  int latest_step() const;

  json to_json() const;
  static ClassRegistry from_json(const json& j);
  bool operator==(const ClassRegistry&) const = default;

 private:
  std::vector<ClassEntry> entries_;
};

enum class DatasetRole { init, exemplar, incremental, validation, test };
std::string to_string(DatasetRole r);

struct LabeledDataset {
  std::vector<ImageSample> samples;
  ClassRegistry registry;
  DatasetRole role = DatasetRole::init;

  void validate() const;
  std::size_t size() const { return samples.size(); }
  std::optional<std::size_t> find(const Provenance& p) const;
};

/// Splits a volume into 2D samples along `axis` (0 = height, 1 = width, 2 = depth).
std::vector<ImageSample> slice_volume(const Volume& volume, const AnnotationSet& annotations, int axis = 2);

/// Inverse of slicing for a stack of planes taken along `axis`.
template <class T>
Grid3<T> restack(const std::vector<Grid2<T>>& planes, int axis = 2);

std::vector<ImageSample> slice_all(const std::vector<AnnotatedVolume>& volumes, int axis = 2);

/// Declarative partition of volumes into the four experiment roles.
struct PartitionSpec {
  int count = 0;
  std::vector<std::string> volume_ids;  // explicit ids win over count
  std::vector<ClassId> classes;
};

/// A held-out volume scored on `classes` (empty: all classes). A contrast-B rendering of volume
/// `base_id` is stored under the id `base_id` + "b".
struct HeldOutSpec {
  std::string base_id;  // empty: next unassigned volume
  ContrastProfile contrast = ContrastProfile::A;
  std::vector<ClassId> classes;

  std::string volume_id() const { return contrast == ContrastProfile::A ? base_id : base_id + "b"; }
};

struct ScenarioConfig {
  int case_id = 1;
  PartitionSpec init;
  PartitionSpec incremental;
  std::vector<HeldOutSpec> validation;  // empty: one unassigned volume, all classes
  std::vector<HeldOutSpec> test;
  std::vector<ClassEntry> classes;  // registry entries for all classes

  /// Desk analogs of the three published scenarios, keyed by case number.
  static ScenarioConfig preset(int case_id);
};

struct ScenarioSplit {
  std::vector<AnnotatedVolume> init;
  std::vector<AnnotatedVolume> incremental;
  std::vector<AnnotatedVolume> validation;
  std::vector<AnnotatedVolume> test;
  ClassRegistry registry;

  LabeledDataset dataset(DatasetRole role, int axis = 2) const;
};

ScenarioSplit build_scenario(const std::vector<AnnotatedVolume>& volumes, const ScenarioConfig& scenario);

/// On-disk format: one directory per volume with header.json, image.f32 and mask_<id>.u8.
void save_volume(const fs::path& dir, const AnnotatedVolume& v);
AnnotatedVolume load_volume(const fs::path& dir);
/// Loads every volume directory under `dir` sorted by name.
std::vector<AnnotatedVolume> load_volumes(const fs::path& dir);

std::string volume_hash(const AnnotatedVolume& v);
std::string dataset_hash(const LabeledDataset& d);

}  // namespace incseg
