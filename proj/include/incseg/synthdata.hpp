#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "incseg/dataset.hpp"

namespace incseg {

struct IntensityProfile {
  float background = 0.3f;
  float structure_a = 0.9f;
  float structure_b = 0.6f;
  bool operator==(const IntensityProfile&) const = default;
};

struct SynthConfig {
  int height = 64;
  int width = 64;
  int depth = 16;
  std::array<double, 3> spacing{0.91, 0.91, 3.0};
  std::uint64_t seed = 7;

  // Structure A: ellipsoid (voxel radii).
  std::pair<double, double> a_radius_inplane{9.0, 14.0};
  std::pair<double, double> a_radius_depth{4.0, 6.0};
  std::pair<double, double> a_fraction{0.02, 0.08};
  // Structure B: thin curved sheet.
  std::pair<double, double> b_extent{24.0, 40.0};
  std::pair<double, double> b_depth_extent{7.0, 11.0};
  std::pair<double, double> b_thickness{2.0, 3.0};
  double b_curvature = 0.03;
  std::pair<double, double> b_fraction{0.005, 0.03};

  double noise = 0.04;             // white noise std
  double texture = 0.06;           // smoothed-noise std
  double smoothness = 2.0;         // texture blur sigma, in-plane voxels
  double bias = 0.08;              // half-range of the linear intensity gradient
  IntensityProfile contrast_a{0.3f, 0.9f, 0.6f};
  IntensityProfile contrast_b{0.3f, 0.15f, 0.6f};  // structure A drops below the background
  int max_retries = 200;

  void validate() const;
  json to_json() const;
  static SynthConfig from_json(const json& j);
};

/// Class ids used by the generator.
inline constexpr ClassId kStructureA{1};
inline constexpr ClassId kStructureB{2};

std::string synth_volume_id(int index);

/// Deterministic in (seed, index); geometry does not depend on the contrast.
AnnotatedVolume generate_volume(const SynthConfig& cfg, int index, ContrastProfile contrast = ContrastProfile::A);

/// All volumes of a scenario analog with its annotation-hiding pattern applied
/// (case 3: incremental volumes under contrast B, plus contrast-B renderings of the held-out volumes).
std::vector<AnnotatedVolume> generate_scenario_volumes(const SynthConfig& cfg, int case_id, int threads = 1);

/// Writes <dir>/volumes/<id>/ for every volume and <dir>/corpus.json; returns the manifest.
json generate_scenario_corpus(const SynthConfig& cfg, int case_id, const fs::path& dir, int threads = 1);

/// Manifest describing a corpus without writing it.
json corpus_manifest(const SynthConfig& cfg, int case_id, const std::vector<AnnotatedVolume>& volumes);

}  // namespace incseg
