#include "incseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace incseg {

std::string to_string(Method m) {
  switch (m) {
    case Method::finetune: return "finetune";
    case Method::lwfseg: return "LwfSeg";
    case Method::aeiseg: return "AeiSeg";
    case Method::coriseg: return "CoRiSeg";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "finetune") return Method::finetune;
  if (s == "LwfSeg" || s == "lwfseg") return Method::lwfseg;
  if (s == "AeiSeg" || s == "aeiseg") return Method::aeiseg;
  if (s == "CoRiSeg" || s == "coriseg") return Method::coriseg;
  throw Error(ErrorKind::config, "unknown method '" + s + "' (expected finetune, LwfSeg, AeiSeg or CoRiSeg)");
}

SelectionMethod selection_method(Method m) {
  switch (m) {
    case Method::aeiseg: return SelectionMethod::aeiseg;
    case Method::coriseg: return SelectionMethod::coriseg;
    default: return SelectionMethod::none;
  }
}

std::string to_string(ContentKind k) {
  switch (k) {
    case ContentKind::random_conv: return "random_conv";
    case ContentKind::identity: return "identity";
    case ContentKind::self: return "self";
  }
  return "?";
}

ContentKind parse_content_kind(const std::string& s) {
  if (s == "random_conv") return ContentKind::random_conv;
  if (s == "identity") return ContentKind::identity;
  if (s == "self") return ContentKind::self;
  throw Error(ErrorKind::config, "unknown content network '" + s + "' (expected random_conv, identity or self)");
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.desk_scale = true;
  c.epochs = 60;
  c.k_c = 12;
  c.k_r = 6;
  c.t_mc = 8;
  c.optimizer.learning_rate = 1e-3;
  c.validate_every = 5;
  c.network = NetworkConfig{};
  return c;
}

void TrainConfig::validate() const {
  LossWeights{alpha}.validate();
  if (batch_size < 1) throw Error(ErrorKind::config, "batch_size must be >= 1");
  if (epochs < 0) throw Error(ErrorKind::config, "epochs must be >= 0");
  if (k_c < 1 || k_r < 1) throw Error(ErrorKind::config, "k_c and k_r must be >= 1");
  if (k_r > k_c) throw Error(ErrorKind::config, "k_r must not exceed k_c");
  if (t_mc < 2) throw Error(ErrorKind::config, "t_mc must be >= 2");
  if (!(temperature > 0)) throw Error(ErrorKind::config, "temperature must be positive");
  if (!(optimizer.learning_rate > 0)) throw Error(ErrorKind::config, "learning rate must be positive");
  if (validate_every < 0) throw Error(ErrorKind::config, "validate_every must be >= 0");
  if (threads < 1) throw Error(ErrorKind::config, "threads must be >= 1");
  network.validate();
}

json TrainConfig::to_json() const {
  return {{"alpha", alpha},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"k_c", k_c},
          {"k_r", k_r},
          {"t_mc", t_mc},
          {"optimizer", to_string(optimizer.kind)},
          {"learning_rate", optimizer.learning_rate},
          {"beta1", optimizer.beta1},
          {"beta2", optimizer.beta2},
          {"adam_eps", optimizer.eps},
          {"seed", seed},
          {"method", to_string(method)},
          {"desk_scale", desk_scale},
          {"temperature", temperature},
          {"classification_loss", to_string(classification)},
          {"freeze_bn", freeze_bn},
          {"mixed_batches", mixed_batches},
          {"uncertainty", to_string(uncertainty)},
          {"aggregation", to_string(aggregation)},
          {"coverage", to_string(coverage)},
          {"coverage_threshold", coverage_threshold},
          {"content_network", to_string(content)},
          {"content_seed", content_seed},
          {"validate_every", validate_every},
          {"network", network.to_json()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.alpha = j.at("alpha");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.k_c = j.at("k_c");
  c.k_r = j.at("k_r");
  c.t_mc = j.at("t_mc");
  c.optimizer.kind = parse_optimizer(j.at("optimizer"));
  c.optimizer.learning_rate = j.at("learning_rate");
  c.optimizer.beta1 = j.at("beta1");
  c.optimizer.beta2 = j.at("beta2");
  c.optimizer.eps = j.at("adam_eps");
  c.seed = j.at("seed");
  c.method = parse_method(j.at("method"));
  c.desk_scale = j.at("desk_scale");
  c.temperature = j.at("temperature");
  c.classification = parse_classification_loss(j.at("classification_loss"));
  c.freeze_bn = j.at("freeze_bn");
  c.mixed_batches = j.value("mixed_batches", false);
  c.uncertainty = parse_uncertainty_functional(j.at("uncertainty"));
  c.aggregation = parse_uncertainty_aggregation(j.at("aggregation"));
  c.coverage = parse_coverage_mode(j.at("coverage"));
  c.coverage_threshold = j.at("coverage_threshold");
  c.content = parse_content_kind(j.at("content_network"));
  c.content_seed = j.at("content_seed");
  c.validate_every = j.at("validate_every");
  c.network = NetworkConfig::from_json(j.at("network"));
  c.validate();
  return c;
}

namespace {

std::string opt_str(const std::optional<Real>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}

std::optional<Real> opt_real(const std::string& s) {
  if (s == "NA") return std::nullopt;
  return std::stod(s);
}

}  // namespace

std::string EpochLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,split,class,dice,loss_total,loss_c,loss_d\n";
  for (const auto& r : records) {
    os << r.epoch << ',' << r.split << ',' << (r.class_id ? std::to_string(r.class_id->value) : std::string("all")) << ','
       << opt_str(r.dice) << ',' << opt_str(r.loss_total) << ',' << opt_str(r.loss_c) << ',' << opt_str(r.loss_d) << '\n';
  }
  return os.str();
}

EpochLog EpochLog::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "epoch,split,class,dice,loss_total,loss_c,loss_d") {
    throw Error(ErrorKind::runtime, "unexpected epoch log header");
  }
  EpochLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw Error(ErrorKind::runtime, "malformed epoch log row: " + line);
    EpochRecord r;
    r.epoch = std::stoi(f[0]);
    r.split = f[1];
    if (f[2] != "all") r.class_id = ClassId{std::stoi(f[2])};
    r.dice = opt_real(f[3]);
    r.loss_total = opt_real(f[4]);
    r.loss_c = opt_real(f[5]);
    r.loss_d = opt_real(f[6]);
    log.records.push_back(r);
  }
  return log;
}

json LossInstrumentation::to_json() const {
  return {{"batches", batches},
          {"incremental_batches", incremental_batches},
          {"exemplar_batches", exemplar_batches},
          {"mixed_batches", mixed_batches},
          {"incremental_samples", incremental_samples},
          {"exemplar_samples", exemplar_samples},
          {"incremental_classification_sum", incremental_classification_sum},
          {"distillation_sum", distillation_sum},
          {"exemplar_classification_sum", exemplar_classification_sum},
          {"exemplar_new_head_gradient_abs", exemplar_new_head_gradient_abs}};
}

std::uint64_t body_seed(std::uint64_t master) { return derive_seed(master, "body"); }
std::uint64_t head_seed(std::uint64_t master, ClassId c) { return derive_seed(master, "head:" + to_string(c)); }

namespace {

struct Batch {
  std::vector<std::size_t> indices;
  std::vector<bool> from_exemplars;  // per sample
  bool all_exemplar() const {
    return !from_exemplars.empty() && std::all_of(from_exemplars.begin(), from_exemplars.end(), [](bool b) { return b; });
  }
  bool any_exemplar() const { return std::any_of(from_exemplars.begin(), from_exemplars.end(), [](bool b) { return b; }); }
};

// Homogeneous mode: new data in shuffled chunks with exemplar-only batches interleaved at the
// size-proportional rate. Mixed mode: every exemplar joins the shuffled new-data pool once per epoch.
// No random draws are spent on exemplars when there are none.
class BatchPlanner {
 public:
  BatchPlanner(std::size_t n_main, std::size_t n_exemplar, int batch_size, bool mixed, std::uint64_t seed)
      : n_main_(n_main), n_ex_(n_exemplar), batch_(static_cast<std::size_t>(batch_size)), mixed_(mixed), rng_(seed) {
    for (std::size_t i = 0; i < n_ex_; ++i) ex_pool_.push_back(i);
    ex_cursor_ = n_ex_;
  }

  std::vector<Batch> epoch() {
    if (mixed_ && n_ex_ > 0) return mixed_epoch();
    std::vector<std::size_t> order(n_main_);
    for (std::size_t i = 0; i < n_main_; ++i) order[i] = i;
    rng_.shuffle(order.begin(), order.end());
    std::vector<Batch> batches;
    for (std::size_t s = 0; s < n_main_; s += batch_) {
      Batch b;
      b.indices.assign(order.begin() + s, order.begin() + std::min(n_main_, s + batch_));
      b.from_exemplars.assign(b.indices.size(), false);
      batches.push_back(std::move(b));
    }
    if (n_ex_ == 0) return batches;
    const std::size_t n_main_batches = batches.size();
    const auto n_ex_batches = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(static_cast<double>(n_main_batches) * n_ex_ / static_cast<double>(n_main_))));
    for (std::size_t k = 0; k < n_ex_batches; ++k) {
      Batch b;
      const std::size_t size = std::min(batch_, n_ex_);
      while (b.indices.size() < size) {
        if (ex_cursor_ == n_ex_) {
          rng_.shuffle(ex_pool_.begin(), ex_pool_.end());
          ex_cursor_ = 0;
        }
        b.indices.push_back(ex_pool_[ex_cursor_++]);
      }
      b.from_exemplars.assign(b.indices.size(), true);
      batches.push_back(std::move(b));
    }
    rng_.shuffle(batches.begin(), batches.end());
    return batches;
  }

 private:
  std::vector<Batch> mixed_epoch() {
    std::vector<std::pair<bool, std::size_t>> pool;
    for (std::size_t i = 0; i < n_main_; ++i) pool.emplace_back(false, i);
    for (std::size_t i = 0; i < n_ex_; ++i) pool.emplace_back(true, i);
    rng_.shuffle(pool.begin(), pool.end());
    std::vector<Batch> batches;
    for (std::size_t s = 0; s < pool.size(); s += batch_) {
      Batch b;
      for (std::size_t k = s; k < std::min(pool.size(), s + batch_); ++k) {
        b.from_exemplars.push_back(pool[k].first);
        b.indices.push_back(pool[k].second);
      }
      batches.push_back(std::move(b));
    }
    return batches;
  }

  std::size_t n_main_, n_ex_, batch_;
  bool mixed_;
  Rng rng_;
  std::vector<std::size_t> ex_pool_;
  std::size_t ex_cursor_ = 0;
};

using TargetBuilder = std::function<SampleTargets(bool exemplar, const ImageSample&)>;

TrainResult run_training(SegmentationNetwork net, const ClassRegistry& registry, const LabeledDataset& main,
                         const LabeledDataset* exemplars, const TargetBuilder& build_targets,
                         const std::vector<ClassId>& new_heads, const TrainConfig& config,
                         const std::vector<AnnotatedVolume>* validation, const TrainHooks& hooks, json metadata) {
  TrainResult result;
  const std::size_t n_ex = exemplars ? exemplars->size() : 0;
  BatchPlanner planner(main.size(), n_ex, config.batch_size, config.mixed_batches, derive_seed(config.seed, "batches"));
  Rng dropout_rng(derive_seed(config.seed, "dropout"));
  Optimizer opt(config.optimizer, net.parameters());
  LossOptions lopts{{config.alpha}, config.temperature, config.classification};
  Real best_dice = -1;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Real sum_total = 0, sum_c = 0, sum_d = 0;
    long n_samples = 0, n_c = 0, n_d = 0;
    for (const auto& batch : planner.epoch()) {
      std::vector<const Grid2<float>*> images;
      std::vector<SampleTargets> targets;
      for (std::size_t k = 0; k < batch.indices.size(); ++k) {
        const bool ex = batch.from_exemplars[k];
        const auto& sample = (ex ? *exemplars : main).samples[batch.indices[k]];
        images.push_back(&sample.image);
        targets.push_back(build_targets(ex, sample));
      }
      net.zero_grad();
      Tape tape;
      const auto out = net.forward_train(batch_from_images(images), dropout_rng, tape, config.freeze_bn);
      auto loss = total_loss(out, targets, lopts);
      if (!std::isfinite(loss.total)) {
        throw Error(ErrorKind::runtime, "training diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
      }
      auto& ins = result.instrumentation;
      ++ins.batches;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        sum_total += loss.contribution[k];
        ++n_samples;
        if (targets[k].membership != Membership::exemplar) {
          sum_c += loss.classification[k];
          ++n_c;
        }
        if (targets[k].membership != Membership::supervised) {
          sum_d += loss.distillation[k];
          ++n_d;
        }
        ins.distillation_sum += loss.distillation[k];
        if (batch.from_exemplars[k]) {
          ins.exemplar_classification_sum += loss.classification[k];
          ++ins.exemplar_samples;
          for (ClassId c : new_heads) {
            const Tensor& g = loss.dlogits.at(c);
            const Real* begin = g.image(static_cast<int>(k));
            for (const Real* v = begin; v != begin + g.image_size(); ++v) ins.exemplar_new_head_gradient_abs += std::abs(*v);
          }
        } else {
          ins.incremental_classification_sum += loss.classification[k];
          ++ins.incremental_samples;
        }
      }
      if (batch.all_exemplar()) {
        ++ins.exemplar_batches;
      } else {
        ++ins.incremental_batches;
        if (batch.any_exemplar()) ++ins.mixed_batches;
      }
      net.backward(tape, loss.dlogits);
      opt.step();
      if (hooks.on_step) hooks.on_step(opt.steps(), net);
    }
    result.log.records.push_back({epoch, "train", std::nullopt, std::nullopt, sum_total / std::max<long>(1, n_samples),
                                  n_c ? std::optional<Real>(sum_c / n_c) : std::nullopt,
                                  n_d ? std::optional<Real>(sum_d / n_d) : std::nullopt});
    const bool do_val = validation && !validation->empty() && config.validate_every > 0 &&
                        (epoch % config.validate_every == 0 || epoch == config.epochs);
    if (do_val) {
      const auto scores = evaluate_volumes(net, *validation, config.threads);
      const auto rep = aggregate(scores, "val", 0);
      Real mean = 0;
      for (const auto& r : rep.rows) {
        result.log.records.push_back({epoch, "val", r.class_id, r.dice_percent / 100.0, std::nullopt, std::nullopt, std::nullopt});
        mean += r.dice_percent / 100.0;
      }
      if (!rep.rows.empty()) mean /= static_cast<Real>(rep.rows.size());
      if (mean > best_dice) {
        best_dice = mean;
        result.best_epoch = epoch;
        auto meta = metadata;
        meta["epoch"] = epoch;
        meta["selection"] = "best_validation_dice";
        meta["validation_dice"] = mean;
        result.best = Checkpoint{net, registry, meta};
      }
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch);
  }
  result.optimizer_steps = opt.steps();
  metadata["epoch"] = config.epochs;
  metadata["selection"] = "final";
  metadata["optimizer_steps"] = opt.steps();
  result.final = Checkpoint{std::move(net), registry, metadata};
  return result;
}

std::vector<ClassId> require_heads(const SegmentationNetwork& net, const std::vector<ClassId>& classes) {
  for (ClassId c : classes) {
    if (!net.has_head(c)) throw Error("network has no head for class " + to_string(c));
  }
  return classes;
}

}  // namespace

TrainResult train_initial(const LabeledDataset& d_init, const TrainConfig& config,
                          const std::vector<AnnotatedVolume>* validation, const TrainHooks& hooks) {
  config.validate();
  if (d_init.samples.empty()) throw Error("initial training set is empty");
  d_init.validate();
  const auto classes = d_init.registry.introduced_at(0);
  if (classes.empty()) throw Error(ErrorKind::config, "registry has no class introduced at step 0");
  for (const auto& s : d_init.samples) {
    if (s.image.height != config.network.input_height || s.image.width != config.network.input_width) {
      throw Error(ErrorKind::config, "sample " + to_string(s.provenance) + " does not match the network input shape");
    }
  }
  SegmentationNetwork net(config.network, body_seed(config.seed));
  for (ClassId c : classes) net.add_head(c, head_seed(config.seed, c));
  ClassRegistry registry;
  for (ClassId c : classes) {
    const auto& e = d_init.registry.entry(c);
    registry.add(e.id, e.name, e.introduced_at_step);
  }
  auto build = [&](bool, const ImageSample& s) {
    SampleTargets t;
    t.membership = Membership::supervised;
    for (ClassId c : classes) {
      if (s.annotated(c)) t.ground_truth.emplace(c, &s.masks.at(c));
    }
    if (t.ground_truth.empty()) throw Error("initial sample " + to_string(s.provenance) + " carries no initial-class annotation");
    return t;
  };
  json meta = {{"stage", "initial"}, {"seed", config.seed}, {"step", 0}, {"train_config", config.to_json()},
               {"dataset_sha256", dataset_hash(d_init)}};
  auto run_config = config;
  run_config.freeze_bn = false;  // incremental-only option
  return run_training(std::move(net), registry, d_init, nullptr, build, classes, run_config, validation, hooks, meta);
}

PredictionSnapshot snapshot_predictions(const SegmentationNetwork& old_net, const LabeledDataset& data,
                                        const std::vector<ClassId>& old_classes) {
  if (data.samples.empty()) throw Error("cannot snapshot an empty dataset");
  require_heads(old_net, old_classes);
  PredictionSnapshot snap;
  constexpr std::size_t chunk = 16;
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    std::vector<const Grid2<float>*> images;
    const std::size_t e = std::min(data.size(), s + chunk);
    for (std::size_t i = s; i < e; ++i) images.push_back(&data.samples[i].image);
    const auto out = old_net.forward(batch_from_images(images), Mode::eval);
    for (std::size_t i = s; i < e; ++i) {
      if (snap.contains(data.samples[i].provenance)) {
        throw Error("duplicate provenance " + to_string(data.samples[i].provenance) + " in snapshot input");
      }
      for (ClassId c : old_classes) {
        const Tensor& p = out.probs(c);
        Tensor t(1, 2, p.h(), p.w());
        const int k = static_cast<int>(i - s);
        std::copy(p.image(k), p.image(k) + p.image_size(), t.data());
        snap.put(data.samples[i].provenance, c, std::move(t));
      }
    }
  }
  return snap;
}

void IncrementalRun::validate(Method method) const {
  if (incremental.samples.empty()) throw Error("incremental training set is empty");
  if (new_classes.empty()) throw Error("incremental run declares no new class");
  for (ClassId c : new_classes) {
    if (old.network.has_head(c)) throw Error("class " + to_string(c) + " already has a head in the old network");
  }
  const bool wants_exemplars = method == Method::aeiseg || method == Method::coriseg;
  if (!wants_exemplars && !exemplars.empty()) {
    throw Error(ErrorKind::config, to_string(method) + " runs must carry an empty exemplar store");
  }
  if (wants_exemplars && exemplars.empty()) throw Error(ErrorKind::missing_artifact, to_string(method) + " needs exemplars");
  if (method != Method::finetune && !snapshot) throw Error(ErrorKind::missing_artifact, "prediction snapshot missing");
}

PredictionSnapshot prepare_snapshot(IncrementalRun& run) {
  const auto old_classes = run.old.network.head_ids();
  auto snap = snapshot_predictions(run.old.network, run.incremental, old_classes);
  if (!run.exemplars.empty()) {
    const auto ex = run.exemplars.as_dataset(run.incremental.registry);
    const auto ex_snap = snapshot_predictions(run.old.network, ex, old_classes);
    for (const auto& [p, maps] : ex_snap.entries()) {
      if (snap.contains(p)) throw Error("exemplar " + to_string(p) + " also appears in the incremental set");
      for (const auto& [c, t] : maps) snap.put(p, c, t);
    }
  }
  run.snapshot = snap;
  return snap;
}

SegmentationNetwork grow_network(const SegmentationNetwork& old_net, const std::vector<ClassId>& new_classes,
                                 std::uint64_t master_seed) {
  SegmentationNetwork net = old_net;
  for (ClassId c : new_classes) net.add_head(c, head_seed(master_seed, c));
  return net;
}

TrainResult train_incremental(const IncrementalRun& run, const TrainConfig& config,
                              const std::vector<AnnotatedVolume>* validation, const TrainHooks& hooks) {
  config.validate();
  run.validate(config.method);
  run.incremental.validate();
  if (!(run.old.network.config() == config.network)) {
    throw Error(ErrorKind::config, "old checkpoint network configuration differs from the run configuration");
  }
  const auto old_classes = run.old.network.head_ids();
  const bool finetune = config.method == Method::finetune;

  ClassRegistry registry = run.old.registry;
  const int step = registry.latest_step() + 1;
  for (ClassId c : run.new_classes) {
    if (!run.incremental.registry.contains(c)) throw Error(ErrorKind::config, "class " + to_string(c) + " missing from registry");
    registry.add(c, run.incremental.registry.entry(c).name, step);
  }
  SegmentationNetwork net = grow_network(run.old.network, run.new_classes, config.seed);

  std::optional<LabeledDataset> ex_data;
  if (!run.exemplars.empty()) ex_data = run.exemplars.as_dataset(registry);
  if (!finetune) {
    run.snapshot->require_coverage(run.incremental);
    if (ex_data) run.snapshot->require_coverage(*ex_data);
  }

  auto build = [&](bool exemplar, const ImageSample& s) {
    SampleTargets t;
    if (exemplar) {
      t.membership = Membership::exemplar;
    } else {
      t.membership = finetune ? Membership::supervised : Membership::incremental;
      for (ClassId c : run.new_classes) {
        if (s.annotated(c)) t.ground_truth.emplace(c, &s.masks.at(c));
      }
      if (t.ground_truth.empty()) throw Error("incremental sample " + to_string(s.provenance) + " lacks new-class annotation");
    }
    if (t.membership != Membership::supervised) {
      for (ClassId c : old_classes) t.snapshot.emplace(c, &run.snapshot->get(s.provenance, c));
    }
    return t;
  };
  json meta = {{"stage", "incremental"},
               {"method", to_string(config.method)},
               {"seed", config.seed},
               {"step", step},
               {"train_config", config.to_json()},
               {"old_parameters_sha256", parameter_hash(run.old.network)},
               {"dataset_sha256", dataset_hash(run.incremental)},
               {"exemplar_store_sha256", run.exemplars.empty() ? json(nullptr) : json(run.exemplars.hash())}};
  return run_training(std::move(net), registry, run.incremental, ex_data ? &*ex_data : nullptr, build, run.new_classes,
                      config, validation, hooks, meta);
}

std::unique_ptr<ContentNetwork> make_content_network(const TrainConfig& config, const SegmentationNetwork& net) {
  switch (config.content) {
    case ContentKind::random_conv: return std::make_unique<RandomConvContentNetwork>(config.content_seed);
    case ContentKind::identity: return std::make_unique<IdentityContentNetwork>();
    case ContentKind::self: return std::make_unique<EncoderContentNetwork>(net);
  }
  throw Error(ErrorKind::config, "unknown content network");
}

ExemplarStore build_exemplar_store(const Checkpoint& ckpt, const LabeledDataset& old_data, Method method,
                                   const TrainConfig& config, const std::optional<fs::path>& cache_dir) {
  config.validate();
  const auto sel_method = selection_method(method);
  ExemplarStore store(sel_method, config.k_r);
  store.metadata() = {{"method", to_string(method)},
                      {"k_c", config.k_c},
                      {"k_r", config.k_r},
                      {"t_mc", config.t_mc},
                      {"seed", config.seed},
                      {"checkpoint_parameters_sha256", parameter_hash(ckpt.network)},
                      {"dataset_sha256", dataset_hash(old_data)}};
  if (sel_method == SelectionMethod::none) return store;

  SelectionOptions opts;
  opts.k_c = config.k_c;
  opts.k_r = config.k_r;
  opts.mc = {config.t_mc, derive_seed(config.seed, "mc"), config.uncertainty, config.aggregation, config.threads};
  opts.coverage = {config.coverage, config.coverage_threshold, config.threads};
  opts.threads = config.threads;
  opts.cache_dir = cache_dir;
  std::unique_ptr<ContentNetwork> content;
  if (sel_method == SelectionMethod::coriseg) {
    content = make_content_network(config, ckpt.network);
    store.metadata()["content_network"] = content->id();
  }
  const auto old_classes = ckpt.network.head_ids();
  const int step = ckpt.registry.latest_step();
  json per_class = json::object();
  for (ClassId c : old_classes) {
    const Selection sel = sel_method == SelectionMethod::aeiseg
                              ? select_exemplars_aeiseg(ckpt.network, old_data, c, opts)
                              : select_exemplars_coriseg(ckpt.network, *content, old_data, c, opts);
    std::vector<ExemplarRecord> records;
    for (std::size_t r = 0; r < sel.selected.size(); ++r) {
      ExemplarRecord rec;
      rec.sample = old_data.samples[sel.selected[r]];
      rec.snapshot = predict_old_heads(ckpt.network, rec.sample.image, old_classes);
      for (const auto& m : sel.certain.members) {
        if (m.sample_index == sel.selected[r]) rec.uncertainty = m.uncertainty;
      }
      rec.coverage_gain = sel.coverage.gains[r];
      rec.rank = static_cast<int>(r);
      records.push_back(std::move(rec));
    }
    json certain = json::array();
    for (const auto& m : sel.certain.members) certain.push_back({{"provenance", to_string(m.provenance)}, {"uncertainty", m.uncertainty}});
    per_class[to_string(c)] = {{"certain_set", certain}, {"objective", sel.coverage.objective}, {"gains", sel.coverage.gains}};
    store.store(c, step, std::move(records), old_classes);
  }
  store.metadata()["selection"] = per_class;
  return store;
}

}  // namespace incseg
