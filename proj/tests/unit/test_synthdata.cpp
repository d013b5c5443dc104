#include <doctest.h>

#include <cmath>

#include "incseg/synthdata.hpp"
#include "support.hpp"

using namespace incseg;

TEST_CASE("volumes are deterministic in seed and index") {
  SynthConfig cfg;
  const auto a = generate_volume(cfg, 3);
  const auto b = generate_volume(cfg, 3);
  CHECK(volume_hash(a) == volume_hash(b));
  CHECK(a.volume.volume_id == "vol03");
  CHECK(volume_hash(generate_volume(cfg, 4)) != volume_hash(a));
  SynthConfig other = cfg;
  other.seed = 8;
  CHECK(volume_hash(generate_volume(other, 3)) != volume_hash(a));
}

TEST_CASE("geometry does not depend on the contrast") {
  SynthConfig cfg;
  const auto a = generate_volume(cfg, 2, ContrastProfile::A);
  const auto b = generate_volume(cfg, 2, ContrastProfile::B);
  CHECK(a.annotations.masks == b.annotations.masks);
  CHECK(a.volume.voxels.data != b.volume.voxels.data);
  CHECK(b.volume.contrast == ContrastProfile::B);
}

TEST_CASE("structures are disjoint, off the border and within their volume fractions") {
  SynthConfig cfg;
  for (int i = 0; i < 20; ++i) {
    const auto v = generate_volume(cfg, i);
    const auto& a = v.annotations.masks.at(kStructureA);
    const auto& b = v.annotations.masks.at(kStructureB);
    const double n = static_cast<double>(a.size());
    const double fa = static_cast<double>(count_nonzero(a.data)) / n;
    const double fb = static_cast<double>(count_nonzero(b.data)) / n;
    CHECK(fa >= cfg.a_fraction.first);
    CHECK(fa <= cfg.a_fraction.second);
    CHECK(fb >= cfg.b_fraction.first);
    CHECK(fb <= cfg.b_fraction.second);
    for (std::size_t k = 0; k < a.size(); ++k) REQUIRE_FALSE((a.data[k] && b.data[k]));
    CHECK(v.volume.spacing == cfg.spacing);
  }
}

TEST_CASE("intensity statistics are stationary across volumes") {
  SynthConfig cfg;
  for (int i = 0; i < 10; ++i) {
    const auto v = generate_volume(cfg, i);
    const auto& a = v.annotations.masks.at(kStructureA);
    const auto& b = v.annotations.masks.at(kStructureB);
    double sa = 0, sb = 0, sg = 0;
    std::size_t na = 0, nb = 0, ng = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double x = v.volume.voxels.data[k];
      if (a.data[k]) {
        sa += x;
        ++na;
      } else if (b.data[k]) {
        sb += x;
        ++nb;
      } else {
        sg += x;
        ++ng;
      }
    }
    CHECK(std::abs(sa / na - cfg.contrast_a.structure_a) < 0.05);
    CHECK(std::abs(sb / nb - cfg.contrast_a.structure_b) < 0.05);
    CHECK(std::abs(sg / ng - cfg.contrast_a.background) < 0.02);
  }
}

TEST_CASE("slicing yields background-only slices for each class") {
  SynthConfig cfg;
  const auto v = generate_volume(cfg, 0);
  const auto samples = slice_volume(v.volume, v.annotations);
  REQUIRE(samples.size() == static_cast<std::size_t>(cfg.depth));
  for (ClassId c : {kStructureA, kStructureB}) {
    int with = 0;
    for (const auto& s : samples) with += s.has_foreground(c) ? 1 : 0;
    CHECK(with > 0);
    CHECK(with < cfg.depth);
  }
}

TEST_CASE("scenario corpora follow the presets") {
  SynthConfig cfg;
  SUBCASE("case 1 hides the other class per role") {
    const auto vols = generate_scenario_volumes(cfg, 1, 2);
    REQUIRE(vols.size() == 10);
    for (int i = 0; i < 4; ++i) CHECK(vols[i].annotations.annotated_classes() == std::set<ClassId>{kStructureA});
    for (int i = 4; i < 8; ++i) CHECK(vols[i].annotations.annotated_classes() == std::set<ClassId>{kStructureB});
    for (int i = 8; i < 10; ++i) CHECK(vols[i].annotations.annotated_classes().size() == 2);
    for (const auto& v : vols) CHECK(v.volume.contrast == ContrastProfile::A);
    const auto split = build_scenario(vols, ScenarioConfig::preset(1));
    CHECK(split.init.size() == 4);
    CHECK(split.incremental.size() == 4);
    CHECK(split.test[0].volume.volume_id == "vol09");
  }
  SUBCASE("case 2 has a single incremental volume") {
    const auto vols = generate_scenario_volumes(cfg, 2);
    REQUIRE(vols.size() == 9);
    const auto split = build_scenario(vols, ScenarioConfig::preset(2));
    CHECK(split.init.size() == 6);
    REQUIRE(split.incremental.size() == 1);
    CHECK(split.incremental[0].annotations.annotated_classes() == std::set<ClassId>{kStructureA});
    CHECK(split.registry.introduced_at(0) == std::vector<ClassId>{kStructureB});
  }
  SUBCASE("case 3 acquires the incremental volumes under contrast B") {
    const auto vols = generate_scenario_volumes(cfg, 3);
    REQUIRE(vols.size() == 11);
    for (int i = 0; i < 9; ++i) CHECK((vols[i].volume.contrast == ContrastProfile::B) == (i >= 4 && i < 7));
    CHECK(vols[9].volume.volume_id == "vol07b");
    CHECK(vols[10].volume.volume_id == "vol08b");
    CHECK(vols[10].volume.contrast == ContrastProfile::B);
    CHECK(vols[10].annotations.masks == vols[8].annotations.masks);
    const auto m = corpus_manifest(cfg, 3, vols);
    CHECK(m["volumes"][5]["role"] == "incremental");
    CHECK(m["volumes"][5]["contrast"] == "B");
    CHECK(m["volumes"][8]["role"] == "test");
    CHECK(m["volumes"][10]["role"] == "test");
    const auto split = build_scenario(vols, ScenarioConfig::preset(3));
    REQUIRE(split.test.size() == 2);
    CHECK(split.test[0].volume.contrast == ContrastProfile::A);
    CHECK(split.test[0].annotations.annotated_classes() == std::set<ClassId>{kStructureA});
    CHECK(split.test[1].volume.contrast == ContrastProfile::B);
    CHECK(split.test[1].annotations.annotated_classes() == std::set<ClassId>{kStructureB});
    CHECK(split.validation.size() == 2);
  }
}

TEST_CASE("corpus writing round-trips through disk") {
  SynthConfig cfg;
  const auto dir = testing::temp_dir("synth_corpus");
  const auto manifest = generate_scenario_corpus(cfg, 2, dir);
  const auto loaded = load_volumes(dir / "volumes");
  REQUIRE(loaded.size() == 9);
  for (std::size_t i = 0; i < loaded.size(); ++i) CHECK(volume_hash(loaded[i]) == manifest["volumes"][i]["sha256"]);
  CHECK(SynthConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
}

TEST_CASE("invalid synthetic configs are rejected") {
  SynthConfig cfg;
  cfg.height = 8;
  CHECK_THROWS_AS(cfg.validate(), Error);
  SynthConfig tight;
  tight.a_fraction = {0.5, 0.6};
  tight.max_retries = 3;
  CHECK_THROWS_AS(generate_volume(tight, 0), Error);
  CHECK_THROWS_AS(generate_scenario_volumes(SynthConfig{}, 4), Error);
}
