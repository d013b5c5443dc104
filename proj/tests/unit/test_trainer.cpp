#include <doctest.h>

#include "incseg/trainer.hpp"
#include "support.hpp"

using namespace incseg;

namespace {

TrainConfig toy_train_config(int size = 16) {
  TrainConfig c;
  c.network = testing::small_config(size);
  c.epochs = 2;
  c.batch_size = 4;
  c.k_c = 4;
  c.k_r = 2;
  c.t_mc = 3;
  c.optimizer.learning_rate = 1e-3;
  c.seed = 11;
  c.validate_every = 1;
  return c;
}

AnnotatedVolume blob_volume(int size, int depth, std::uint64_t seed, const std::string& id, ClassId c = ClassId{1}) {
  AnnotatedVolume v;
  v.volume.volume_id = id;
  v.volume.spacing = {1.0, 1.0, 1.0};
  std::vector<Grid2<float>> images;
  std::vector<Mask2> masks;
  for (int z = 0; z < depth; ++z) {
    const auto s = testing::blob_sample(size, derive_seed(seed, static_cast<std::uint64_t>(z)), id, z);
    images.push_back(s.image);
    masks.push_back(s.masks.at(ClassId{1}));
  }
  v.volume.voxels = restack(images);
  v.annotations.masks[c] = restack(masks);
  return v;
}

// New-class dataset: blobs relabelled as class 2 under distinct provenance.
LabeledDataset class2_dataset(int n, int size, std::uint64_t seed) {
  auto d = testing::blob_dataset(n, size, seed);
  d.registry = ClassRegistry();
  d.registry.add(ClassId{1}, "blob", 0);
  d.registry.add(ClassId{2}, "second", 1);
  d.role = DatasetRole::incremental;
  for (auto& s : d.samples) {
    auto m = s.masks.at(ClassId{1});
    s.masks.clear();
    s.masks[ClassId{2}] = m;
    s.provenance.volume_id = "w" + s.provenance.volume_id;
  }
  return d;
}

struct IncrementalFixture {
  TrainConfig cfg = toy_train_config();
  LabeledDataset old_data = testing::blob_dataset(12, 16, 3);
  LabeledDataset inc_data = class2_dataset(8, 16, 4);
  TrainResult init;

  IncrementalFixture() { init = train_initial(old_data, cfg); }

  IncrementalRun run(Method m, bool with_snapshot = true) {
    IncrementalRun r;
    r.old = init.final;
    r.new_classes = {ClassId{2}};
    r.incremental = inc_data;
    auto c = cfg;
    c.method = m;
    r.exemplars = build_exemplar_store(init.final, old_data, m, c);
    if (with_snapshot && m != Method::finetune) prepare_snapshot(r);
    return r;
  }
};

std::vector<std::string> trajectory(const IncrementalRun& run, const TrainConfig& cfg) {
  std::vector<std::string> hashes;
  TrainHooks h;
  h.on_step = [&](long, const SegmentationNetwork& net) { hashes.push_back(parameter_hash(net)); };
  train_incremental(run, cfg, nullptr, h);
  return hashes;
}

}  // namespace

TEST_CASE("zero epochs return the seeded initialization") {
  auto cfg = toy_train_config();
  cfg.epochs = 0;
  const auto r = train_initial(testing::blob_dataset(4, 16, 1), cfg);
  SegmentationNetwork fresh(cfg.network, body_seed(cfg.seed));
  fresh.add_head(ClassId{1}, head_seed(cfg.seed, ClassId{1}));
  CHECK(parameter_hash(r.final.network) == parameter_hash(fresh));
  CHECK(r.optimizer_steps == 0);
  CHECK(r.log.records.empty());
  CHECK_FALSE(r.best.has_value());
}

TEST_CASE("initial training is deterministic in the seed") {
  const auto d = testing::blob_dataset(10, 16, 2);
  auto cfg = toy_train_config();
  const auto a = train_initial(d, cfg);
  const auto b = train_initial(d, cfg);
  CHECK(parameter_hash(a.final.network) == parameter_hash(b.final.network));
  CHECK(a.optimizer_steps == 2 * 3);
  cfg.seed = 12;
  CHECK(parameter_hash(train_initial(d, cfg).final.network) != parameter_hash(a.final.network));
  CHECK(a.final.metadata["stage"] == "initial");
  CHECK(a.final.registry.ids() == std::vector<ClassId>{ClassId{1}});
}

TEST_CASE("initial training rejects bad inputs") {
  auto cfg = toy_train_config();
  CHECK_THROWS_AS(train_initial(LabeledDataset{}, cfg), Error);
  CHECK_THROWS_AS(train_initial(testing::blob_dataset(4, 8, 1), cfg), Error);
  auto bad = cfg;
  bad.k_r = 9;
  CHECK_THROWS_AS(train_initial(testing::blob_dataset(4, 16, 1), bad), Error);
}

TEST_CASE("desk network reaches 0.85 validation Dice on blobs within 200 epochs") {
  auto cfg = TrainConfig::desk();
  cfg.seed = 5;
  cfg.validate_every = 0;
  const auto d = testing::blob_dataset(20, 64, 21);
  const std::vector<AnnotatedVolume> val{blob_volume(64, 6, 99, "val")};
  struct Reached {};
  const SegmentationNetwork* current = nullptr;
  Real best = 0;
  int reached_at = -1;
  TrainHooks h;
  h.on_step = [&](long, const SegmentationNetwork& net) { current = &net; };
  h.on_epoch = [&](int epoch) {
    if (epoch % 5 != 0) return;
    const auto rep = aggregate(evaluate_volumes(*current, val), "val", 0);
    best = std::max(best, rep.rows.at(0).dice_percent / 100.0);
    if (best >= 0.85) {
      reached_at = epoch;
      throw Reached{};
    }
  };
  cfg.epochs = 200;
  try {
    train_initial(d, cfg, nullptr, h);
  } catch (const Reached&) {
  }
  INFO("best validation Dice " << best);
  CHECK(reached_at > 0);
  CHECK(reached_at <= 200);
}

TEST_CASE("validation log and best checkpoint agree") {
  auto cfg = toy_train_config();
  cfg.epochs = 4;
  cfg.validate_every = 2;
  const std::vector<AnnotatedVolume> val{blob_volume(16, 3, 5, "val")};
  const auto r = train_initial(testing::blob_dataset(8, 16, 2), cfg, &val);
  Real best = -1;
  int best_epoch = -1;
  int n_val = 0;
  for (const auto& rec : r.log.records) {
    if (rec.split != "val") continue;
    ++n_val;
    if (*rec.dice > best) {
      best = *rec.dice;
      best_epoch = rec.epoch;
    }
  }
  CHECK(n_val == 2);
  REQUIRE(r.best.has_value());
  CHECK(r.best_epoch == best_epoch);
  CHECK(r.best->metadata["epoch"] == best_epoch);
  const auto back = EpochLog::from_csv(r.log.to_csv());
  CHECK(back.to_csv() == r.log.to_csv());
}

TEST_CASE("snapshot predictions equal eval-mode old-head outputs") {
  IncrementalFixture f;
  const auto snap = snapshot_predictions(f.init.final.network, f.inc_data, {ClassId{1}});
  CHECK(snap.size() == f.inc_data.size());
  snap.require_coverage(f.inc_data);
  const auto& s = f.inc_data.samples[3];
  const std::vector<const Grid2<float>*> images{&s.image};
  const auto out = f.init.final.network.forward(batch_from_images(images), Mode::eval);
  CHECK(testing::max_abs_diff(snap.get(s.provenance, ClassId{1}), out.probs(ClassId{1})) == 0.0);
  CHECK(snapshot_predictions(f.init.final.network, f.inc_data, {ClassId{1}}).hash() == snap.hash());
  CHECK_THROWS_AS(snapshot_predictions(f.init.final.network, f.inc_data, {ClassId{2}}), Error);
  auto dup = f.inc_data;
  dup.samples.push_back(dup.samples[0]);
  CHECK_THROWS_AS(snapshot_predictions(f.init.final.network, dup, {ClassId{1}}), Error);
}

TEST_CASE("grow_network preserves old parameters and seeds the new head") {
  IncrementalFixture f;
  const auto& old = f.init.final.network;
  const auto grown = grow_network(old, {ClassId{2}}, 77);
  const auto po = old.parameters();
  const auto pg = grown.parameters();
  REQUIRE(pg.size() == po.size() + 2);
  for (std::size_t i = 0; i < po.size(); ++i) {
    CHECK(pg[i]->name == po[i]->name);
    CHECK(pg[i]->value == po[i]->value);
  }
  CHECK(grown.head_seeds().at(ClassId{2}) == head_seed(77, ClassId{2}));
  SegmentationNetwork probe = old;
  probe.add_head(ClassId{2}, head_seed(77, ClassId{2}));
  CHECK(parameter_hash(probe) == parameter_hash(grown));
}

TEST_CASE("alpha = 1 without exemplars reproduces the finetune trajectory bit-exactly") {
  IncrementalFixture f;
  auto cfg = f.cfg;
  cfg.alpha = 1.0;
  cfg.method = Method::finetune;
  const auto ft = trajectory(f.run(Method::finetune), cfg);
  cfg.method = Method::lwfseg;
  const auto lwf = trajectory(f.run(Method::lwfseg), cfg);
  REQUIRE(ft.size() == 4);
  CHECK(ft == lwf);
  cfg.alpha = 0.5;
  CHECK(trajectory(f.run(Method::lwfseg), cfg) != ft);
}

TEST_CASE("exemplar batches contribute no classification loss and no new-head gradient") {
  IncrementalFixture f;
  auto cfg = f.cfg;
  cfg.method = Method::aeiseg;
  const auto run = f.run(Method::aeiseg);
  CHECK(run.exemplars.total_records() == 2);
  const auto r = train_incremental(run, cfg);
  const auto& ins = r.instrumentation;
  CHECK(ins.exemplar_batches > 0);
  CHECK(ins.exemplar_samples > 0);
  CHECK(ins.exemplar_classification_sum == 0.0);
  CHECK(ins.exemplar_new_head_gradient_abs == 0.0);
  CHECK(ins.incremental_classification_sum > 0.0);
  CHECK(ins.distillation_sum > 0.0);
  CHECK(ins.batches == ins.exemplar_batches + ins.incremental_batches);
  CHECK(r.final.network.head_ids() == std::vector<ClassId>{ClassId{1}, ClassId{2}});
  CHECK(r.final.registry.entry(ClassId{2}).introduced_at_step == 1);
  CHECK(r.final.metadata["exemplar_store_sha256"] == run.exemplars.hash());
}

TEST_CASE("incremental runs validate their inputs per method") {
  IncrementalFixture f;
  auto cfg = f.cfg;
  SUBCASE("LwfSeg uses an empty store") {
    auto run = f.run(Method::lwfseg);
    CHECK(run.exemplars.empty());
    run.exemplars = f.run(Method::aeiseg).exemplars;
    cfg.method = Method::lwfseg;
    CHECK_THROWS_AS(train_incremental(run, cfg), Error);
  }
  SUBCASE("exemplar methods need exemplars") {
    auto run = f.run(Method::lwfseg);
    cfg.method = Method::coriseg;
    try {
      train_incremental(run, cfg);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::missing_artifact);
    }
  }
  SUBCASE("distillation needs a snapshot") {
    auto run = f.run(Method::lwfseg, false);
    cfg.method = Method::lwfseg;
    CHECK_THROWS_AS(train_incremental(run, cfg), Error);
  }
  SUBCASE("new classes must be new") {
    auto run = f.run(Method::finetune);
    run.new_classes = {ClassId{1}};
    cfg.method = Method::finetune;
    CHECK_THROWS_AS(train_incremental(run, cfg), Error);
  }
  SUBCASE("network configuration must match") {
    auto run = f.run(Method::finetune);
    cfg.method = Method::finetune;
    cfg.network.base_filters = 2;
    CHECK_THROWS_AS(train_incremental(run, cfg), Error);
  }
}

TEST_CASE("exemplar stores are reproducible and carry refreshed snapshots") {
  IncrementalFixture f;
  for (Method m : {Method::aeiseg, Method::coriseg}) {
    auto cfg = f.cfg;
    cfg.method = m;
    const auto dir = testing::temp_dir("trainer_cache");
    const auto a = build_exemplar_store(f.init.final, f.old_data, m, cfg, dir);
    const auto b = build_exemplar_store(f.init.final, f.old_data, m, cfg, dir);
    const auto c = build_exemplar_store(f.init.final, f.old_data, m, cfg);
    CHECK(a.hash() == b.hash());
    CHECK(a.hash() == c.hash());
    REQUIRE(a.records(ClassId{1}).size() == 2);
    for (const auto& rec : a.records(ClassId{1})) {
      const auto expect = predict_old_heads(f.init.final.network, rec.sample.image, {ClassId{1}});
      CHECK(testing::max_abs_diff(rec.snapshot.at(ClassId{1}), expect.at(ClassId{1})) == 0.0);
    }
  }
  CHECK(build_exemplar_store(f.init.final, f.old_data, Method::lwfseg, f.cfg).empty());
}

TEST_CASE("mixed batches route exemplar samples per sample") {
  IncrementalFixture f;
  auto cfg = f.cfg;
  cfg.method = Method::aeiseg;
  cfg.mixed_batches = true;
  const auto run = f.run(Method::aeiseg);
  const auto r = train_incremental(run, cfg);
  const auto& ins = r.instrumentation;
  // 8 new samples + 2 exemplars per epoch in batches of 4.
  CHECK(ins.batches == 3 * cfg.epochs);
  CHECK(ins.incremental_samples == 8 * cfg.epochs);
  CHECK(ins.exemplar_samples == 2 * cfg.epochs);
  CHECK(ins.mixed_batches > 0);
  CHECK(ins.exemplar_classification_sum == 0.0);
  CHECK(ins.exemplar_new_head_gradient_abs == 0.0);
  CHECK(ins.incremental_classification_sum > 0.0);
  CHECK(ins.batches == ins.exemplar_batches + ins.incremental_batches);

  auto homogeneous = cfg;
  homogeneous.mixed_batches = false;
  const auto h = train_incremental(run, homogeneous);
  CHECK(h.instrumentation.mixed_batches == 0);
  CHECK(parameter_hash(h.final.network) != parameter_hash(r.final.network));
}

TEST_CASE("mixed batching without exemplars matches the homogeneous trajectory") {
  IncrementalFixture f;
  auto cfg = f.cfg;
  cfg.method = Method::lwfseg;
  const auto run = f.run(Method::lwfseg);
  auto mixed = cfg;
  mixed.mixed_batches = true;
  CHECK(trajectory(run, cfg) == trajectory(run, mixed));
}

TEST_CASE("train config serializes and validates") {
  const auto d = TrainConfig::desk();
  CHECK(d.epochs == 60);
  CHECK(d.k_c == 12);
  CHECK(d.k_r == 6);
  CHECK(d.t_mc == 8);
  CHECK(d.network.levels == 3);
  CHECK(TrainConfig::from_json(d.to_json()).to_json() == d.to_json());
  auto mixed = d;
  mixed.mixed_batches = true;
  CHECK(TrainConfig::from_json(mixed.to_json()).mixed_batches);
  CHECK(parse_method("CoRiSeg") == Method::coriseg);
  CHECK(to_string(Method::lwfseg) == "LwfSeg");
  CHECK_THROWS_AS(parse_method("icarl"), Error);
  auto bad = d;
  bad.t_mc = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = d;
  bad.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);
}
