#include "incseg/app.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "incseg/parallel.hpp"
#include "incseg/plot.hpp"

#ifndef INCSEG_VERSION
#define INCSEG_VERSION "0.0.0"
#endif

namespace incseg {

std::string code_version() { return std::string("incseg ") + INCSEG_VERSION; }

RunLayout::RunLayout(const ExperimentConfig& cfg)
    : case_dir(cfg.case_dir()), data(cfg.data_dir()), init(case_dir / "init"), eval(case_dir / "eval") {}

fs::path RunLayout::method_dir(Method m) const { return case_dir / "methods" / to_string(m); }
fs::path RunLayout::exemplar_dir(Method m) const { return method_dir(m) / "exemplars"; }
fs::path RunLayout::checkpoint(const fs::path& stage_dir, CheckpointSelect s) const {
  return stage_dir / (s == CheckpointSelect::final ? "final.ckpt" : "best.ckpt");
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::missing_artifact: return 3;
    default: return 4;
  }
}

namespace {

std::mutex g_log_mutex;

void say(const CommandOptions& o, const std::string& msg) {
  if (o.log == nullptr) return;
  std::lock_guard lock(g_log_mutex);
  *o.log << msg << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string require_file_hash(const fs::path& p, const std::string& what, const std::string& hint) {
  if (!fs::exists(p)) throw Error(ErrorKind::missing_artifact, what + " not found at " + p.string() + "; " + hint);
  return sha256_file(p);
}

json output_entry(const fs::path& base, const fs::path& file) {
  return {{"path", fs::relative(file, base).generic_string()}, {"sha256", sha256_file(file)}};
}

/// A recorded run is reusable when its fingerprint matches and every output is intact.
std::optional<json> reusable(const fs::path& manifest_path, const std::string& fingerprint, bool force) {
  if (force || !fs::exists(manifest_path)) return std::nullopt;
  json m;
  try {
    m = read_json_file(manifest_path);
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (m.value("fingerprint", "") != fingerprint) return std::nullopt;
  const auto base = manifest_path.parent_path();
  const json outputs = m.value("outputs", json::object());
  for (const auto& [_, o] : outputs.items()) {
    const auto p = base / o.at("path").get<std::string>();
    if (!fs::exists(p) || sha256_file(p) != o.at("sha256").get<std::string>()) return std::nullopt;
  }
  return m;
}

json manifest_header(const std::string& command, const ExperimentConfig& cfg, const std::string& fingerprint) {
  return {{"format", "incseg-manifest"},
          {"version", 1},
          {"command", command},
          {"code_version", code_version()},
          {"fingerprint", fingerprint},
          {"config", cfg.to_json()},
          {"config_ini", render_experiment_config(cfg)}};
}

void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::runtime, "cannot create output directory " + dir.string() + ": " + ec.message());
  const auto probe = dir / ".write-test";
  {
    std::ofstream f(probe);
    if (!f) throw Error(ErrorKind::runtime, "output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

int inference_threads(const ExperimentConfig& cfg, const CommandOptions& o) { return o.parallel.value_or(cfg.threads); }

std::vector<Method> selected_methods(const ExperimentConfig& cfg, const CommandOptions& o) {
  return o.methods.empty() ? cfg.methods : o.methods;
}

std::string corpus_hash(const RunLayout& layout) {
  return require_file_hash(layout.data / "corpus.json", "synthetic corpus", "run `incseg synth` first");
}

json seeds_json(std::uint64_t master, const SegmentationNetwork& net) {
  json heads = json::object();
  for (const auto& [c, s] : net.head_seeds()) heads[to_string(c)] = s;
  return {{"master", master}, {"body", net.body_seed()}, {"heads", heads}};
}

void write_stage_outputs(const fs::path& dir, const TrainResult& res, json& manifest) {
  save_checkpoint(dir / "final.ckpt", res.final);
  json outputs = {{"final_checkpoint", output_entry(dir, dir / "final.ckpt")}};
  json ckpts = {{"final", parameter_hash(res.final.network)}};
  if (res.best) {
    save_checkpoint(dir / "best.ckpt", *res.best);
    outputs["best_checkpoint"] = output_entry(dir, dir / "best.ckpt");
    ckpts["best"] = parameter_hash(res.best->network);
  } else if (fs::exists(dir / "best.ckpt")) {
    fs::remove(dir / "best.ckpt");
  }
  write_text_file(dir / "epochs.csv", res.log.to_csv());
  outputs["epoch_log"] = output_entry(dir, dir / "epochs.csv");
  manifest["outputs"] = outputs;
  manifest["checkpoint_parameters_sha256"] = ckpts;
  manifest["best_epoch"] = res.best_epoch;
  manifest["optimizer_steps"] = res.optimizer_steps;
  manifest["instrumentation"] = res.instrumentation.to_json();
}

}  // namespace

ScenarioSplit load_split(const ExperimentConfig& cfg) {
  const RunLayout layout(cfg);
  corpus_hash(layout);
  const auto corpus = read_json_file(layout.data / "corpus.json");
  if (corpus.value("case", 0) != cfg.case_id) {
    throw Error(ErrorKind::config, "corpus at " + layout.data.string() + " was generated for case " +
                                       std::to_string(corpus.value("case", 0)) + ", not case " + std::to_string(cfg.case_id));
  }
  return build_scenario(load_volumes(layout.data / "volumes"), ScenarioConfig::preset(cfg.case_id));
}

CommandResult cmd_synth(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const RunLayout layout(cfg);
  const auto vols = generate_scenario_volumes(cfg.synth, cfg.case_id, inference_threads(cfg, opts));
  const auto fresh = corpus_manifest(cfg.synth, cfg.case_id, vols);
  const auto manifest_path = layout.data / "manifest.json";
  CommandResult res{"synth", manifest_path, {}, false};

  if (fs::exists(layout.data / "corpus.json") && !opts.force) {
    const auto existing = read_json_file(layout.data / "corpus.json");
    if (existing.at("volumes") != fresh.at("volumes")) {
      throw Error(ErrorKind::runtime, "corpus at " + layout.data.string() +
                                          " differs from the requested configuration (hash conflict); use --force to overwrite");
    }
    for (const auto& v : existing.at("volumes")) {
      const auto dir = layout.data / "volumes" / v.at("volume_id").get<std::string>();
      if (!fs::exists(dir / "header.json") || volume_hash(load_volume(dir)) != v.at("sha256").get<std::string>()) {
        throw Error(ErrorKind::runtime, "volume " + dir.string() + " is missing or corrupt; use --force to regenerate");
      }
    }
    if (fs::exists(manifest_path)) {
      res.manifest = read_json_file(manifest_path);
      res.skipped = true;
      say(opts, "synth: corpus verified, nothing to do");
      return res;
    }
  }
  ensure_writable_dir(layout.data);
  if (opts.force && fs::exists(layout.data / "volumes")) fs::remove_all(layout.data / "volumes");
  for (const auto& v : vols) save_volume(layout.data / "volumes" / v.volume.volume_id, v);
  write_json_file(layout.data / "corpus.json", fresh);
  json m = manifest_header("synth", cfg, sha256_hex(fresh.dump()));
  m["outputs"] = {{"corpus", output_entry(layout.data, layout.data / "corpus.json")}};
  m["volume_count"] = vols.size();
  m["seeds"] = {{"master", cfg.seed}};
  m["wall_seconds"] = seconds_since(t0);
  write_json_file(manifest_path, m);
  res.manifest = m;
  say(opts, "synth: wrote " + std::to_string(vols.size()) + " volumes to " + layout.data.string());
  return res;
}

CommandResult cmd_train_init(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const RunLayout layout(cfg);
  auto tcfg = cfg.stage_config(std::nullopt);
  tcfg.threads = inference_threads(cfg, opts);
  const auto corpus = corpus_hash(layout);
  json fp_in = {{"command", "train-init"}, {"version", code_version()}, {"train", tcfg.to_json()}, {"corpus", corpus}};
  const auto fingerprint = sha256_hex(fp_in.dump());
  const auto manifest_path = layout.init / "manifest.json";
  if (auto m = reusable(manifest_path, fingerprint, opts.force)) {
    say(opts, "train-init: up to date");
    return {"train-init", manifest_path, *m, true};
  }
  const auto split = load_split(cfg);
  const auto d_init = split.dataset(DatasetRole::init);
  ensure_writable_dir(layout.init);
  say(opts, "train-init: " + std::to_string(d_init.size()) + " samples, " + std::to_string(tcfg.epochs) + " epochs");
  TrainHooks hooks;
  hooks.on_epoch = [&](int e) {
    if (e % 10 == 0) say(opts, "train-init: epoch " + std::to_string(e));
  };
  const auto res = train_initial(d_init, tcfg, &split.validation, hooks);
  json m = manifest_header("train-init", cfg, fingerprint);
  m["inputs"] = {{"corpus_sha256", corpus}, {"dataset_sha256", dataset_hash(d_init)}};
  m["seeds"] = seeds_json(tcfg.seed, res.final.network);
  m["train_config"] = tcfg.to_json();
  write_stage_outputs(layout.init, res, m);
  m["wall_seconds"] = seconds_since(t0);
  write_json_file(manifest_path, m);
  say(opts, "train-init: done in " + std::to_string(static_cast<int>(seconds_since(t0))) + " s");
  return {"train-init", manifest_path, m, false};
}

std::vector<CommandResult> cmd_select_exemplars(const ExperimentConfig& cfg, const CommandOptions& opts) {
  cfg.validate();
  const RunLayout layout(cfg);
  const auto ckpt_path = layout.checkpoint(layout.init, CheckpointSelect::final);
  std::vector<CommandResult> results;
  for (Method method : selected_methods(cfg, opts)) {
    const auto t0 = std::chrono::steady_clock::now();
    auto tcfg = cfg.stage_config(method);
    tcfg.threads = inference_threads(cfg, opts);
    const auto ckpt_hash = require_file_hash(ckpt_path, "initial checkpoint", "run `incseg train-init` first");
    const auto corpus = corpus_hash(layout);
    // Thread count does not change the selection, so it stays out of the fingerprint.
    auto tjson = tcfg.to_json();
    json fp_in = {{"command", "select-exemplars"}, {"version", code_version()}, {"train", tjson},
                  {"checkpoint", ckpt_hash}, {"corpus", corpus}};
    const auto fingerprint = sha256_hex(fp_in.dump());
    const auto dir = layout.method_dir(method);
    const auto manifest_path = dir / "selection_manifest.json";
    if (auto m = reusable(manifest_path, fingerprint, opts.force)) {
      say(opts, "select-exemplars: " + to_string(method) + " up to date");
      results.push_back({"select-exemplars", manifest_path, *m, true});
      continue;
    }
    const auto split = load_split(cfg);
    const auto d_init = split.dataset(DatasetRole::init);
    const auto ckpt = load_checkpoint(ckpt_path);
    ensure_writable_dir(dir);
    const auto store = build_exemplar_store(ckpt, d_init, method, tcfg, layout.case_dir / "cache");
    if (fs::exists(layout.exemplar_dir(method))) fs::remove_all(layout.exemplar_dir(method));
    store.save(layout.exemplar_dir(method));
    json m = manifest_header("select-exemplars", cfg, fingerprint);
    m["method"] = to_string(method);
    m["inputs"] = {{"checkpoint_sha256", ckpt_hash}, {"corpus_sha256", corpus}, {"dataset_sha256", dataset_hash(d_init)}};
    m["seeds"] = {{"master", tcfg.seed}, {"mc", derive_seed(tcfg.seed, "mc")}};
    m["k_c"] = tcfg.k_c;
    m["k_r"] = tcfg.k_r;
    m["t_mc"] = tcfg.t_mc;
    m["store_sha256"] = store.hash();
    m["outputs"] = {{"store_manifest", output_entry(dir, layout.exemplar_dir(method) / "manifest.json")}};
    json counts = json::object();
    for (ClassId c : store.classes()) counts[to_string(c)] = store.records(c).size();
    m["exemplars_per_class"] = counts;
    m["wall_seconds"] = seconds_since(t0);
    write_json_file(manifest_path, m);
    say(opts, "select-exemplars: " + to_string(method) + " stored " + std::to_string(store.total_records()) + " exemplars");
    results.push_back({"select-exemplars", manifest_path, m, false});
  }
  return results;
}

std::vector<CommandResult> cmd_train_inc(const ExperimentConfig& cfg, const CommandOptions& opts) {
  cfg.validate();
  const RunLayout layout(cfg);
  const auto methods = selected_methods(cfg, opts);
  const auto ckpt_path = layout.checkpoint(layout.init, CheckpointSelect::final);
  const auto ckpt_hash = require_file_hash(ckpt_path, "initial checkpoint", "run `incseg train-init` first");
  const auto corpus = corpus_hash(layout);
  for (Method method : methods) {
    require_file_hash(layout.exemplar_dir(method) / "manifest.json", to_string(method) + " exemplar store",
                      "run `incseg select-exemplars` first");
  }
  const auto split = load_split(cfg);
  const auto d_inc = split.dataset(DatasetRole::incremental);
  const auto old = load_checkpoint(ckpt_path);

  std::vector<CommandResult> results(methods.size());
  parallel_for(methods.size(), opts.parallel_methods.value_or(cfg.parallel_methods), [&](std::size_t i) {
    const Method method = methods[i];
    const auto t0 = std::chrono::steady_clock::now();
    auto tcfg = cfg.stage_config(method);
    tcfg.threads = 1;
    const auto store_manifest = layout.exemplar_dir(method) / "manifest.json";
    const auto store_hash = sha256_file(store_manifest);
    json fp_in = {{"command", "train-inc"}, {"version", code_version()}, {"train", tcfg.to_json()},
                  {"checkpoint", ckpt_hash}, {"corpus", corpus}, {"store", store_hash}};
    const auto fingerprint = sha256_hex(fp_in.dump());
    const auto dir = layout.method_dir(method);
    const auto manifest_path = dir / "manifest.json";
    if (auto m = reusable(manifest_path, fingerprint, opts.force)) {
      say(opts, "train-inc: " + to_string(method) + " up to date");
      results[i] = {"train-inc", manifest_path, *m, true};
      return;
    }
    IncrementalRun run;
    run.old = old;
    run.new_classes = split.registry.introduced_at(old.registry.latest_step() + 1);
    run.incremental = d_inc;
    run.exemplars = ExemplarStore::load(layout.exemplar_dir(method));
    if (selection_method(method) != run.exemplars.method()) {
      throw Error(ErrorKind::config, "exemplar store for " + to_string(method) + " was built by " +
                                         to_string(run.exemplars.method()));
    }
    if (method != Method::finetune) prepare_snapshot(run);
    ensure_writable_dir(dir);
    TrainHooks hooks;
    hooks.on_epoch = [&](int e) {
      if (e % 10 == 0) say(opts, "train-inc: " + to_string(method) + " epoch " + std::to_string(e));
    };
    const auto res = train_incremental(run, tcfg, &split.validation, hooks);
    json m = manifest_header("train-inc", cfg, fingerprint);
    m["method"] = to_string(method);
    m["inputs"] = {{"checkpoint_sha256", ckpt_hash},
                   {"corpus_sha256", corpus},
                   {"dataset_sha256", dataset_hash(d_inc)},
                   {"store_manifest_sha256", store_hash},
                   {"store_sha256", run.exemplars.hash()},
                   {"snapshot_sha256", run.snapshot ? json(run.snapshot->hash()) : json(nullptr)}};
    m["seeds"] = seeds_json(tcfg.seed, res.final.network);
    m["train_config"] = tcfg.to_json();
    m["new_classes"] = json::array();
    for (ClassId c : run.new_classes) m["new_classes"].push_back(c.value);
    write_stage_outputs(dir, res, m);
    m["wall_seconds"] = seconds_since(t0);
    write_json_file(manifest_path, m);
    say(opts, "train-inc: " + to_string(method) + " done in " + std::to_string(static_cast<int>(seconds_since(t0))) + " s");
    results[i] = {"train-inc", manifest_path, m, false};
  });
  return results;
}

CommandResult cmd_evaluate(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const RunLayout layout(cfg);
  const auto select = opts.checkpoint.value_or(cfg.evaluate_checkpoint);
  const auto methods = selected_methods(cfg, opts);
  std::vector<std::pair<std::string, fs::path>> stages = {{"initial", layout.checkpoint(layout.init, select)}};
  for (Method m : methods) stages.emplace_back(to_string(m), layout.checkpoint(layout.method_dir(m), select));
  json ckpt_hashes = json::object();
  for (const auto& [name, path] : stages) {
    ckpt_hashes[name] = require_file_hash(path, name + " checkpoint (" + to_string(select) + ")",
                                          name == "initial" ? "run `incseg train-init` first" : "run `incseg train-inc` first");
  }
  const auto corpus = corpus_hash(layout);
  json fp_in = {{"command", "evaluate"}, {"version", code_version()}, {"checkpoints", ckpt_hashes}, {"corpus", corpus}};
  const auto fingerprint = sha256_hex(fp_in.dump());
  const auto manifest_path = layout.eval / "manifest.json";
  if (auto m = reusable(manifest_path, fingerprint, opts.force)) {
    say(opts, "evaluate: up to date");
    return {"evaluate", manifest_path, *m, true};
  }
  const auto split = load_split(cfg);
  const int threads = inference_threads(cfg, opts);
  EvalReport report;
  for (const auto& [name, path] : stages) {
    const auto ckpt = load_checkpoint(path);
    auto rep = aggregate(evaluate_volumes(ckpt.network, split.test, threads), name, cfg.case_id);
    report.rows.insert(report.rows.end(), rep.rows.begin(), rep.rows.end());
  }
  const auto old_classes = split.registry.introduced_at(0);
  const auto new_classes = split.registry.introduced_at(1);
  EvalReport before, after;
  for (const auto& r : report.rows) (r.method == "initial" ? before : after).rows.push_back(r);
  ensure_writable_dir(layout.eval);
  write_text_file(layout.eval / "evaluation.csv", report.to_csv());
  json outputs = {{"evaluation", output_entry(layout.eval, layout.eval / "evaluation.csv")}};
  json summary = json::object();
  if (!after.rows.empty()) {
    const auto retention = retention_report(before, after, old_classes);
    write_text_file(layout.eval / "retention.csv", retention.to_csv());
    outputs["retention"] = output_entry(layout.eval, layout.eval / "retention.csv");
    json ranking = json::array();
    for (const auto& [m, d] : retention.ranking) ranking.push_back({{"method", m}, {"old_class_dice_percent", d}});
    summary["ranking"] = ranking;
  }
  json epoch_logs = json::object();
  epoch_logs["initial"] = fs::relative(layout.init / "epochs.csv", layout.eval).generic_string();
  for (Method m : methods) epoch_logs[to_string(m)] = fs::relative(layout.method_dir(m) / "epochs.csv", layout.eval).generic_string();
  auto ids = [](const std::vector<ClassId>& v) {
    json a = json::array();
    for (ClassId c : v) a.push_back(c.value);
    return a;
  };
  json m = manifest_header("evaluate", cfg, fingerprint);
  m["case"] = cfg.case_id;
  m["checkpoint_selection"] = to_string(select);
  m["inputs"] = {{"checkpoint_parameters", ckpt_hashes}, {"corpus_sha256", corpus}};
  m["test_volumes"] = json::array();
  for (const auto& v : split.test) m["test_volumes"].push_back(v.volume.volume_id);
  m["old_classes"] = ids(old_classes);
  m["new_classes"] = ids(new_classes);
  m["methods"] = json::array();
  for (Method mm : methods) m["methods"].push_back(to_string(mm));
  m["epoch_logs"] = epoch_logs;
  m["outputs"] = outputs;
  m["summary"] = summary;
  m["wall_seconds"] = seconds_since(t0);
  write_json_file(manifest_path, m);
  say(opts, "evaluate: wrote " + (layout.eval / "evaluation.csv").string());
  return {"evaluate", manifest_path, m, false};
}

namespace {

std::string cell(const std::optional<Real>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << *v;
  return os.str();
}

std::string cell2(const std::optional<Real>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << *v;
  return os.str();
}

struct ClassSummary {
  std::optional<Real> dice;
  std::optional<Real> assd;
};

ClassSummary summarize(const EvalReport& rep, const std::string& method, const std::vector<ClassId>& classes) {
  Real d = 0, a = 0;
  int nd = 0, na = 0;
  for (ClassId c : classes) {
    if (auto r = rep.find(method, c)) {
      d += r->get().dice_percent;
      ++nd;
      if (r->get().assd_mm) {
        a += *r->get().assd_mm;
        ++na;
      }
    }
  }
  ClassSummary s;
  if (nd) s.dice = d / nd;
  if (na) s.assd = a / na;
  return s;
}

std::vector<ClassId> class_list(const json& a) {
  std::vector<ClassId> out;
  for (const auto& v : a) out.push_back(ClassId{v.get<int>()});
  return out;
}

}  // namespace

CommandResult cmd_report(const ExperimentConfig& cfg, const CommandOptions& opts) {
  std::vector<fs::path> manifests = opts.manifests;
  if (manifests.empty() && fs::exists(cfg.output)) {
    for (const auto& e : fs::directory_iterator(cfg.output)) {
      const auto p = e.path() / "eval" / "manifest.json";
      if (fs::exists(p)) manifests.push_back(p);
    }
    std::sort(manifests.begin(), manifests.end());
  }
  if (manifests.empty()) {
    throw Error(ErrorKind::missing_artifact, "report needs at least one evaluation manifest; run `incseg evaluate` first");
  }
  const auto out_dir = cfg.output / "report";
  json fp_inputs = json::array();
  struct Entry {
    int case_id;
    EvalReport report;
    std::vector<ClassId> old_classes, new_classes;
    std::vector<std::string> methods;
    std::map<std::string, fs::path> logs;
  };
  std::vector<Entry> entries;
  for (const auto& mp : manifests) {
    const auto hash = require_file_hash(mp, "evaluation manifest", "run `incseg evaluate` first");
    fp_inputs.push_back(hash);
    const auto m = read_json_file(mp);
    if (m.value("command", "") != "evaluate") throw Error(ErrorKind::config, mp.string() + " is not an evaluation manifest");
    Entry e;
    e.case_id = m.at("case");
    const auto csv = mp.parent_path() / m.at("outputs").at("evaluation").at("path").get<std::string>();
    e.report = EvalReport::from_csv(read_text_file(csv));
    e.old_classes = class_list(m.at("old_classes"));
    e.new_classes = class_list(m.at("new_classes"));
    e.methods.push_back("initial");
    for (const auto& x : m.at("methods")) e.methods.push_back(x.get<std::string>());
    for (const auto& [k, v] : m.at("epoch_logs").items()) e.logs[k] = mp.parent_path() / v.get<std::string>();
    entries.push_back(std::move(e));
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.case_id < b.case_id; });
  const auto fingerprint = sha256_hex(json({{"command", "report"}, {"version", code_version()}, {"inputs", fp_inputs}}).dump());
  const auto manifest_path = out_dir / "manifest.json";
  if (auto m = reusable(manifest_path, fingerprint, opts.force)) {
    say(opts, "report: up to date");
    return {"report", manifest_path, *m, true};
  }
  ensure_writable_dir(out_dir / "plots");

  std::vector<std::string> methods;
  for (const auto& e : entries) {
    for (const auto& m : e.methods) {
      if (m != "initial" && std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
    }
  }
  std::ostringstream csv, md;
  csv << "method,case,old_dice_percent,old_assd_mm,new_dice_percent,new_assd_mm\n";
  md << "| Method |";
  for (const auto& e : entries) {
    md << " Case " << e.case_id << " old Dice [%] | Case " << e.case_id << " old SurfDist [mm] | Case " << e.case_id
       << " new Dice [%] | Case " << e.case_id << " new SurfDist [mm] |";
  }
  md << "\n|---|";
  for (std::size_t i = 0; i < entries.size(); ++i) md << "---|---|---|---|";
  md << '\n';
  for (const auto& method : methods) {
    md << "| " << method << " |";
    for (const auto& e : entries) {
      const auto o = summarize(e.report, method, e.old_classes);
      const auto n = summarize(e.report, method, e.new_classes);
      const bool present = std::find(e.methods.begin(), e.methods.end(), method) != e.methods.end();
      if (!present) {
        md << " - | - | - | - |";
        continue;
      }
      md << ' ' << cell(o.dice) << " | " << cell2(o.assd) << " | " << cell(n.dice) << " | " << cell2(n.assd) << " |";
      csv << method << ',' << e.case_id << ',' << cell2(o.dice) << ',' << cell2(o.assd) << ',' << cell2(n.dice) << ','
          << cell2(n.assd) << '\n';
    }
    md << '\n';
  }
  write_text_file(out_dir / "table.csv", csv.str());
  write_text_file(out_dir / "table.md", md.str());
  json outputs = {{"table_csv", output_entry(out_dir, out_dir / "table.csv")},
                  {"table_md", output_entry(out_dir, out_dir / "table.md")}};

  std::ostringstream ret;
  ret << "case,method,class,dice_before_percent,dice_after_percent,delta_percent\n";
  for (const auto& e : entries) {
    EvalReport before, after;
    for (const auto& r : e.report.rows) (r.method == "initial" ? before : after).rows.push_back(r);
    if (after.rows.empty()) continue;
    const auto rr = retention_report(before, after, e.old_classes);
    for (const auto& r : rr.rows) {
      ret << e.case_id << ',' << r.method << ',' << r.class_id.value << ',' << cell2(r.before_percent) << ','
          << cell2(r.after_percent) << ',' << cell2(r.delta_percent) << '\n';
    }
  }
  write_text_file(out_dir / "retention.csv", ret.str());
  outputs["retention"] = output_entry(out_dir, out_dir / "retention.csv");

  for (const auto& e : entries) {
    for (const auto& [label, classes] : {std::pair{std::string("old"), e.old_classes}, std::pair{std::string("new"), e.new_classes}}) {
      std::vector<PlotSeries> series;
      for (const auto& method : e.methods) {
        if (method == "initial" && label == "new") continue;
        auto it = e.logs.find(method);
        if (it == e.logs.end() || !fs::exists(it->second)) continue;
        const auto log = EpochLog::from_csv(read_text_file(it->second));
        PlotSeries s{method, {}};
        for (const auto& r : log.records) {
          if (r.split == "val" && r.class_id && std::find(classes.begin(), classes.end(), *r.class_id) != classes.end() && r.dice) {
            s.points.emplace_back(r.epoch, *r.dice);
          }
        }
        if (!s.points.empty()) series.push_back(std::move(s));
      }
      if (series.empty()) continue;
      const auto name = "case" + std::to_string(e.case_id) + "_" + label + "_class_validation_dice.svg";
      write_text_file(out_dir / "plots" / name,
                      svg_line_chart("Case " + std::to_string(e.case_id) + ": " + label + "-class validation Dice", "epoch",
                                     "Dice", series, 0.0, 1.0));
      outputs["plot_" + name] = output_entry(out_dir, out_dir / "plots" / name);
    }
  }
  json m = manifest_header("report", cfg, fingerprint);
  m["inputs"] = json::array();
  for (std::size_t i = 0; i < manifests.size(); ++i) {
    m["inputs"].push_back({{"path", manifests[i].string()}, {"sha256", fp_inputs[i]}});
  }
  m["outputs"] = outputs;
  write_json_file(manifest_path, m);
  say(opts, "report: wrote " + out_dir.string());
  return {"report", manifest_path, m, false};
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Class-incremental segmentation experiments (LwfSeg, AeiSeg, CoRiSeg, finetune)"};
  app.require_subcommand(0, 1);
  std::string config_path;
  std::vector<std::string> sets;
  bool print_config = false, force = false, quiet = false;
  std::optional<int> parallel, parallel_methods, case_id;
  std::optional<std::uint64_t> seed;
  std::string output, checkpoint;
  std::vector<std::string> methods, manifests;

  app.add_option("-c,--config", config_path, "experiment config file (INI)");
  app.add_option("--set", sets, "override a config key, e.g. --set train.epochs=40")->type_name("SECTION.KEY=VALUE");
  app.add_flag("--print-config", print_config, "print the resolved configuration and exit");
  app.add_flag("--force", force, "re-run even if the recorded outputs are up to date");
  app.add_flag("-q,--quiet", quiet, "suppress progress messages");
  app.add_option("--parallel", parallel, "worker threads for inference stages")->check(CLI::PositiveNumber);
  app.add_option("--case", case_id, "scenario case (1, 2 or 3)");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--output", output, "output root");

  auto* synth = app.add_subcommand("synth", "generate the synthetic corpus of a case");
  auto* train_init = app.add_subcommand("train-init", "train the initial network");
  auto* select = app.add_subcommand("select-exemplars", "select and store exemplars per method");
  select->add_option("--method", methods, "method(s); default: experiment.methods");
  auto* train_inc = app.add_subcommand("train-inc", "incremental training per method");
  train_inc->add_option("--method", methods, "method(s); default: experiment.methods");
  train_inc->add_option("--parallel-methods", parallel_methods, "methods trained concurrently")->check(CLI::PositiveNumber);
  auto* evaluate = app.add_subcommand("evaluate", "score checkpoints on the test volume");
  evaluate->add_option("--method", methods, "method(s); default: experiment.methods");
  evaluate->add_option("--checkpoint", checkpoint, "final or best");
  auto* report = app.add_subcommand("report", "comparison table and plots from evaluation manifests");
  report->add_option("manifests", manifests, "evaluation manifest files");
  for (auto* sub : {synth, train_init, select, train_inc, evaluate, report}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    ConfigOverrides overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw Error(ErrorKind::config, "--set expects SECTION.KEY=VALUE, got '" + s + "'");
      overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    if (case_id) overrides.emplace_back("experiment.case", std::to_string(*case_id));
    if (seed) overrides.emplace_back("experiment.seed", std::to_string(*seed));
    if (!output.empty()) overrides.emplace_back("experiment.output", output);
    const auto cfg = config_path.empty() ? parse_experiment_config("", overrides)
                                         : load_experiment_config(config_path, overrides);
    if (print_config) {
      out << render_experiment_config(cfg);
      return 0;
    }
    if (app.get_subcommands().empty()) {
      err << app.help();
      return 2;
    }
    CommandOptions opts;
    opts.force = force;
    opts.parallel = parallel;
    opts.parallel_methods = parallel_methods;
    for (const auto& m : methods) opts.methods.push_back(parse_method(m));
    if (!checkpoint.empty()) opts.checkpoint = parse_checkpoint_select(checkpoint);
    for (const auto& m : manifests) opts.manifests.emplace_back(m);
    opts.log = quiet ? nullptr : &err;

    std::vector<CommandResult> results;
    if (synth->parsed()) results.push_back(cmd_synth(cfg, opts));
    if (train_init->parsed()) results.push_back(cmd_train_init(cfg, opts));
    if (select->parsed()) results = cmd_select_exemplars(cfg, opts);
    if (train_inc->parsed()) results = cmd_train_inc(cfg, opts);
    if (evaluate->parsed()) results.push_back(cmd_evaluate(cfg, opts));
    if (report->parsed()) results.push_back(cmd_report(cfg, opts));
    for (const auto& r : results) out << r.command << ": " << (r.skipped ? "up to date " : "wrote ") << r.manifest_path.string() << '\n';
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 4;
  }
}

}  // namespace incseg
