#include "incseg/exemplar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "incseg/parallel.hpp"

namespace incseg {

RepresentationVector abstraction_vector(const SegmentationNetwork& net, const ImageSample& sample) {
  return {abstraction_vector(net, sample.image), sample.provenance};
}

std::vector<Real> abstraction_vector(const SegmentationNetwork& net, const Grid2<float>& image) {
  const auto out = net.forward(tensor_from_image(image), Mode::eval);
  const Tensor& a = out.abstraction;
  std::vector<Real> v(a.c(), 0.0);
  for (int c = 0; c < a.c(); ++c) {
    const Real* p = a.plane(0, c);
    Real s = 0;
    for (std::size_t k = 0; k < a.plane_size(); ++k) s += p[k];
    v[c] = s / static_cast<Real>(a.plane_size());
  }
  return v;
}

Real cosine_similarity(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size() || a.empty()) throw Error("cosine similarity needs equal-length, non-empty vectors");
  Real sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa = std::max(sa, std::abs(a[i]));
    sb = std::max(sb, std::abs(b[i]));
  }
  if (sa == 0 || sb == 0) throw Error("cosine similarity is undefined for a zero vector");
  Real dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real x = a[i] / sa, y = b[i] / sb;
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 || nb == 0) throw Error("cosine similarity is undefined for a zero vector");
  const Real c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp<Real>(c, -1.0, 1.0);
}

std::vector<Tensor> IdentityContentNetwork::responses(const Grid2<float>& image) const {
  return {tensor_from_image(image)};
}

RandomConvContentNetwork::RandomConvContentNetwork(std::uint64_t seed, std::vector<int> channels)
    : seed_(seed), channels_(std::move(channels)) {
  if (channels_.empty()) throw Error("content network needs at least one layer");
  Rng rng(seed_);
  int in = 1;
  for (std::size_t l = 0; l < channels_.size(); ++l) {
    convs_.emplace_back("content" + std::to_string(l), in, channels_[l], 3, false);
    convs_.back().init(rng, InitScheme::he_uniform);
    in = channels_[l];
  }
}

std::vector<Tensor> RandomConvContentNetwork::responses(const Grid2<float>& image) const {
  std::vector<Tensor> out;
  Tensor h = tensor_from_image(image);
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    if (l > 0) {
      if (h.h() % 2 != 0 || h.w() % 2 != 0) break;
      Tensor pooled;
      maxpool2_forward(h, pooled, nullptr);
      h = std::move(pooled);
    }
    Tensor y;
    convs_[l].forward(h, y);
    relu_forward(y);
    out.push_back(y);
    h = std::move(y);
  }
  return out;
}

std::string RandomConvContentNetwork::id() const {
  std::string s = "randconv:" + std::to_string(seed_);
  for (int c : channels_) s += ":" + std::to_string(c);
  return s;
}

EncoderContentNetwork::EncoderContentNetwork(SegmentationNetwork net)
    : net_(std::move(net)), hash_(parameter_hash(net_)) {}

std::vector<Tensor> EncoderContentNetwork::responses(const Grid2<float>& image) const {
  return net_.forward(tensor_from_image(image), Mode::eval).encoder_features;
}

std::string EncoderContentNetwork::id() const { return "encoder:" + hash_; }

Real content_distance(std::span<const Tensor> a, std::span<const Tensor> b) {
  if (a.size() != b.size() || a.empty()) throw Error("content responses have different layer counts");
  Real d = 0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (!a[l].same_shape(b[l])) throw Error("content responses differ in shape at layer " + std::to_string(l));
    const auto& x = a[l].values();
    const auto& y = b[l].values();
    Real s = 0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const Real diff = x[k] - y[k];
      s += diff * diff;
    }
    d += s / static_cast<Real>(x.size());
  }
  return d;
}

Real content_distance(const ContentNetwork& net, const Grid2<float>& a, const Grid2<float>& b) {
  if (!a.same_shape(b)) throw Error("content distance needs images of equal shape");
  const auto ra = net.responses(a);
  const auto rb = net.responses(b);
  return content_distance(ra, rb);
}

void AffinityMatrix::save(const fs::path& header_path, const json& key) const {
  auto raw = header_path;
  raw.replace_extension(".f64");
  write_raw<double>(raw, values);
  write_json_file(header_path, {{"format", "incseg-affinity"},
                                {"version", 1},
                                {"rows", rows},
                                {"cols", cols},
                                {"key", key},
                                {"payload", raw.filename().string()},
                                {"payload_sha256", sha256_file(raw)}});
}

std::optional<AffinityMatrix> AffinityMatrix::load_if_matching(const fs::path& header_path, const json& key) {
  if (!fs::exists(header_path)) return std::nullopt;
  const auto h = read_json_file(header_path);
  if (h.value("key", json()) != key) return std::nullopt;
  const auto raw = header_path.parent_path() / h.at("payload").get<std::string>();
  if (!fs::exists(raw) || sha256_file(raw) != h.at("payload_sha256").get<std::string>()) return std::nullopt;
  AffinityMatrix m(h.at("rows").get<std::size_t>(), h.at("cols").get<std::size_t>());
  m.values = read_raw<double>(raw, m.rows * m.cols);
  return m;
}

AffinityMatrix build_affinity(std::size_t candidates, std::size_t universe,
                              const std::function<Real(std::size_t, std::size_t)>& affinity, int threads) {
  AffinityMatrix m(candidates, universe);
  parallel_for(candidates, threads, [&](std::size_t r) {
    for (std::size_t s = 0; s < universe; ++s) {
      const Real v = affinity(r, s);
      if (!std::isfinite(v)) throw Error(ErrorKind::runtime, "affinity evaluation produced a non-finite value");
      m(r, s) = v;
    }
  });
  return m;
}

std::string to_string(CoverageMode m) { return m == CoverageMode::facility_location ? "facility_location" : "thresholded"; }

CoverageMode parse_coverage_mode(const std::string& s) {
  if (s == "facility_location") return CoverageMode::facility_location;
  if (s == "thresholded") return CoverageMode::thresholded;
  throw Error(ErrorKind::config, "unknown coverage mode '" + s + "'");
}

Real coverage_objective(const AffinityMatrix& affinity, std::span<const std::size_t> selected, const CoverageOptions& options) {
  if (selected.empty()) return 0.0;
  Real total = 0;
  for (std::size_t s = 0; s < affinity.cols; ++s) {
    Real best = -std::numeric_limits<Real>::infinity();
    for (std::size_t e : selected) best = std::max(best, affinity(e, s));
    if (options.mode == CoverageMode::facility_location) {
      total += best;
    } else {
      total += best >= options.threshold ? 1.0 : 0.0;
    }
  }
  return total;
}

CoverageResult greedy_max_coverage(const AffinityMatrix& affinity, std::size_t k, const CoverageOptions& options) {
  if (affinity.rows == 0) throw Error("greedy coverage needs at least one candidate");
  const std::size_t picks = std::min(k, affinity.rows);
  const bool thresholded = options.mode == CoverageMode::thresholded;
  std::vector<Real> best(affinity.cols, 0.0);
  std::vector<bool> covered(affinity.cols, false);
  std::vector<bool> taken(affinity.rows, false);
  bool any = false;
  CoverageResult result;
  std::vector<Real> gains(affinity.rows);
  for (std::size_t step = 0; step < picks; ++step) {
    parallel_for(affinity.rows, options.threads, [&](std::size_t r) {
      if (taken[r]) return;
      Real g = 0;
      for (std::size_t s = 0; s < affinity.cols; ++s) {
        const Real a = affinity(r, s);
        if (thresholded) {
          if (!covered[s] && a >= options.threshold) g += 1.0;
        } else if (!any) {
          g += a;
        } else if (a > best[s]) {
          g += a - best[s];
        }
      }
      gains[r] = g;
    });
    std::size_t pick = affinity.rows;
    for (std::size_t r = 0; r < affinity.rows; ++r) {
      if (taken[r]) continue;
      if (pick == affinity.rows || gains[r] > gains[pick]) pick = r;
    }
    taken[pick] = true;
    for (std::size_t s = 0; s < affinity.cols; ++s) {
      const Real a = affinity(pick, s);
      if (!any || a > best[s]) best[s] = a;
      if (a >= options.threshold) covered[s] = true;
    }
    any = true;
    Real objective = 0;
    for (std::size_t s = 0; s < affinity.cols; ++s) {
      objective += thresholded ? (covered[s] ? 1.0 : 0.0) : best[s];
    }
    result.order.push_back(pick);
    result.gains.push_back(gains[pick]);
    result.objective.push_back(objective);
  }
  return result;
}

std::string to_string(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::none: return "none";
    case SelectionMethod::aeiseg: return "AeiSeg";
    case SelectionMethod::coriseg: return "CoRiSeg";
  }
  return "?";
}

SelectionMethod parse_selection_method(const std::string& s) {
  if (s == "none") return SelectionMethod::none;
  if (s == "AeiSeg" || s == "aeiseg") return SelectionMethod::aeiseg;
  if (s == "CoRiSeg" || s == "coriseg") return SelectionMethod::coriseg;
  throw Error(ErrorKind::config, "unknown selection method '" + s + "'");
}

namespace {

// Candidate dataset indices sorted by provenance, so greedy ties resolve to the lowest key.
std::vector<std::size_t> candidate_rows(const CertaintySet& certain) {
  std::vector<const CertaintyEntry*> sorted;
  for (const auto& m : certain.members) sorted.push_back(&m);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->provenance < b->provenance; });
  std::vector<std::size_t> rows;
  for (const auto* m : sorted) rows.push_back(m->sample_index);
  return rows;
}

Selection finish(ClassId c, CertaintySet certain, const std::vector<std::size_t>& rows, const AffinityMatrix& affinity,
                 const SelectionOptions& options) {
  if (options.k_r < 1) throw Error(ErrorKind::config, "k_r must be >= 1");
  Selection sel;
  sel.class_id = c;
  sel.certain = std::move(certain);
  auto cov_options = options.coverage;
  cov_options.threads = options.threads;
  sel.coverage = greedy_max_coverage(affinity, static_cast<std::size_t>(options.k_r), cov_options);
  for (std::size_t r : sel.coverage.order) sel.selected.push_back(rows[r]);
  return sel;
}

}  // namespace

Selection select_exemplars_aeiseg(const SegmentationNetwork& net, const LabeledDataset& dataset, ClassId c,
                                  const SelectionOptions& options) {
  auto mc = options.mc;
  mc.threads = options.threads;
  auto certain = most_certain_set(net, dataset, c, options.k_c, mc);
  const auto rows = candidate_rows(certain);
  std::vector<std::vector<Real>> vectors(dataset.size());
  parallel_for(dataset.size(), options.threads,
               [&](std::size_t i) { vectors[i] = abstraction_vector(net, dataset.samples[i].image); });
  const auto affinity = build_affinity(
      rows.size(), dataset.size(), [&](std::size_t r, std::size_t s) { return cosine_similarity(vectors[rows[r]], vectors[s]); },
      options.threads);
  return finish(c, std::move(certain), rows, affinity, options);
}

Selection select_exemplars_coriseg(const SegmentationNetwork& net, const ContentNetwork& content,
                                   const LabeledDataset& dataset, ClassId c, const SelectionOptions& options) {
  auto mc = options.mc;
  mc.threads = options.threads;
  auto certain = most_certain_set(net, dataset, c, options.k_c, mc);
  const auto rows = candidate_rows(certain);

  const json key = {{"kind", "content-distance"}, {"content", content.id()}, {"dataset", dataset_hash(dataset)}};
  std::optional<AffinityMatrix> distances;
  fs::path cache_file;
  if (options.cache_dir) {
    cache_file = *options.cache_dir / ("dcont_" + sha256_hex(key.dump()).substr(0, 16) + ".json");
    distances = AffinityMatrix::load_if_matching(cache_file, key);
  }
  if (!distances) {
    std::vector<std::vector<Tensor>> responses(dataset.size());
    parallel_for(dataset.size(), options.threads,
                 [&](std::size_t i) { responses[i] = content.responses(dataset.samples[i].image); });
    const std::size_t n = dataset.size();
    // Upper triangle only; d is symmetric by construction.
    AffinityMatrix d(n, n);
    parallel_for(n, options.threads, [&](std::size_t i) {
      for (std::size_t j = i + 1; j < n; ++j) d(i, j) = content_distance(responses[i], responses[j]);
    });
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) d(i, j) = d(j, i);
    }
    distances = std::move(d);
    if (options.cache_dir) distances->save(cache_file, key);
  }
  const auto& dist = *distances;
  const auto affinity = build_affinity(
      rows.size(), dataset.size(), [&](std::size_t r, std::size_t s) { return -dist(rows[r], s); }, options.threads);
  return finish(c, std::move(certain), rows, affinity, options);
}

std::map<ClassId, Tensor> predict_old_heads(const SegmentationNetwork& net, const Grid2<float>& image,
                                            const std::vector<ClassId>& classes) {
  const auto out = net.forward(tensor_from_image(image), Mode::eval);
  std::map<ClassId, Tensor> maps;
  for (ClassId c : classes) maps.emplace(c, out.probs(c));
  return maps;
}

ExemplarStore::ExemplarStore(SelectionMethod method, int capacity) : method_(method), capacity_(capacity) {
  if (capacity < 0) throw Error(ErrorKind::config, "exemplar capacity must be >= 0");
}

bool ExemplarStore::empty() const { return total_records() == 0; }

std::size_t ExemplarStore::total_records() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.records.size();
  return n;
}

std::vector<ClassId> ExemplarStore::classes() const {
  std::vector<ClassId> out;
  for (const auto& [c, _] : entries_) out.push_back(c);
  return out;
}

void ExemplarStore::store(ClassId c, int step, std::vector<ExemplarRecord> records,
                          const std::vector<ClassId>& snapshot_classes) {
  if (static_cast<int>(records.size()) > capacity_) {
    throw Error("class " + to_string(c) + ": " + std::to_string(records.size()) + " exemplars exceed capacity " +
                std::to_string(capacity_));
  }
  if (trimmed_to_ && static_cast<int>(records.size()) > *trimmed_to_) {
    throw Error("store was trimmed to " + std::to_string(*trimmed_to_) + " exemplars per class; it cannot be re-expanded");
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].rank != static_cast<int>(i)) throw Error("exemplar ranks must equal list positions");
    for (ClassId s : snapshot_classes) {
      if (!records[i].snapshot.count(s)) {
        throw Error(ErrorKind::missing_artifact,
                    "exemplar " + to_string(records[i].sample.provenance) + " lacks a snapshot for class " + to_string(s));
      }
    }
  }
  history_.push_back({{"op", "store"}, {"class", c.value}, {"step", step}, {"count", records.size()}});
  entries_[c] = Entry{step, std::move(records)};
}

void ExemplarStore::trim(int budget) {
  if (budget < 0) throw Error("trim budget must be >= 0");
  for (auto& [_, e] : entries_) {
    if (static_cast<int>(e.records.size()) > budget) e.records.resize(budget);
  }
  trimmed_to_ = trimmed_to_ ? std::min(*trimmed_to_, budget) : budget;
  history_.push_back({{"op", "trim"}, {"budget", budget}, {"irreversible", true}});
}

const std::vector<ExemplarRecord>& ExemplarStore::records(ClassId c) const {
  auto it = entries_.find(c);
  if (it == entries_.end()) throw Error("exemplar store has no records for class " + to_string(c));
  return it->second.records;
}

int ExemplarStore::step_of(ClassId c) const {
  auto it = entries_.find(c);
  if (it == entries_.end()) throw Error("exemplar store has no records for class " + to_string(c));
  return it->second.step;
}

LabeledDataset ExemplarStore::as_dataset(const ClassRegistry& registry) const {
  LabeledDataset d;
  d.registry = registry;
  d.role = DatasetRole::exemplar;
  std::map<Provenance, std::size_t> index;
  for (const auto& [c, e] : entries_) {
    for (const auto& r : e.records) {
      auto it = index.find(r.sample.provenance);
      if (it == index.end()) {
        index.emplace(r.sample.provenance, d.samples.size());
        d.samples.push_back(r.sample);
      } else {
        for (const auto& [mc, m] : r.sample.masks) d.samples[it->second].masks.emplace(mc, m);
      }
    }
  }
  d.validate();
  return d;
}

PredictionSnapshot ExemplarStore::snapshot() const {
  PredictionSnapshot s;
  for (const auto& [c, e] : entries_) {
    for (const auto& r : e.records) {
      for (const auto& [sc, t] : r.snapshot) s.put(r.sample.provenance, sc, t);
    }
  }
  return s;
}

std::string ExemplarStore::hash() const {
  Sha256 h;
  h.update(to_string(method_));
  h.update(std::to_string(capacity_));
  h.update(trimmed_to_ ? std::to_string(*trimmed_to_) : "-");
  for (const auto& [c, e] : entries_) {
    h.update(to_string(c));
    for (const auto& r : e.records) {
      h.update(to_string(r.sample.provenance) + ":" + std::to_string(r.rank));
      h.update_span<float>(r.sample.image.data);
      for (const auto& [mc, m] : r.sample.masks) h.update_span<std::uint8_t>(m.data);
      for (const auto& [sc, t] : r.snapshot) h.update_span<Real>(t.values());
    }
  }
  return h.hex_digest();
}

void ExemplarStore::save(const fs::path& dir) const {
  fs::create_directories(dir / "records");
  json classes = json::array();
  for (const auto& [c, e] : entries_) {
    json recs = json::array();
    for (const auto& r : e.records) {
      const auto stem = "c" + to_string(c) + "_r" + std::to_string(r.rank);
      json masks = json::object(), snaps = json::object();
      for (const auto& [mc, m] : r.sample.masks) {
        const auto f = stem + "_mask" + to_string(mc) + ".u8";
        write_raw<std::uint8_t>(dir / "records" / f, m.data);
        masks[to_string(mc)] = f;
      }
      for (const auto& [sc, t] : r.snapshot) {
        const auto f = stem + "_snap" + to_string(sc) + ".f64";
        write_raw<double>(dir / "records" / f, t.values());
        snaps[to_string(sc)] = f;
      }
      write_raw<float>(dir / "records" / (stem + ".f32"), r.sample.image.data);
      recs.push_back({{"rank", r.rank},
                      {"volume_id", r.sample.provenance.volume_id},
                      {"slice", r.sample.provenance.slice_index},
                      {"height", r.sample.image.height},
                      {"width", r.sample.image.width},
                      {"uncertainty", r.uncertainty},
                      {"coverage_gain", r.coverage_gain},
                      {"image", stem + ".f32"},
                      {"masks", masks},
                      {"snapshot", snaps}});
    }
    classes.push_back({{"class", c.value}, {"step", e.step}, {"records", recs}});
  }
  json manifest = {{"format", "incseg-exemplar-store"},
                   {"version", 1},
                   {"method", to_string(method_)},
                   {"capacity", capacity_},
                   {"trimmed_to", trimmed_to_ ? json(*trimmed_to_) : json(nullptr)},
                   {"history", history_},
                   {"metadata", metadata_},
                   {"classes", classes},
                   {"store_hash", hash()}};
  write_json_file(dir / "manifest.json", manifest);
}

ExemplarStore ExemplarStore::load(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) throw Error(ErrorKind::missing_artifact, "exemplar store " + dir.string() + " not found");
  const auto m = read_json_file(path);
  try {
    if (m.at("format") != "incseg-exemplar-store") throw Error(ErrorKind::runtime, "not an exemplar store: " + dir.string());
    ExemplarStore s(parse_selection_method(m.at("method")), m.at("capacity").get<int>());
    if (!m.at("trimmed_to").is_null()) s.trimmed_to_ = m.at("trimmed_to").get<int>();
    s.history_ = m.at("history");
    s.metadata_ = m.at("metadata");
    for (const auto& cj : m.at("classes")) {
      Entry e;
      e.step = cj.at("step").get<int>();
      for (const auto& rj : cj.at("records")) {
        ExemplarRecord r;
        r.rank = rj.at("rank").get<int>();
        r.uncertainty = rj.at("uncertainty").get<Real>();
        r.coverage_gain = rj.at("coverage_gain").get<Real>();
        r.sample.provenance = {rj.at("volume_id").get<std::string>(), rj.at("slice").get<int>()};
        const int h = rj.at("height").get<int>(), w = rj.at("width").get<int>();
        r.sample.image = Grid2<float>(h, w);
        r.sample.image.data = read_raw<float>(dir / "records" / rj.at("image").get<std::string>(), r.sample.image.size());
        for (const auto& [k, f] : rj.at("masks").items()) {
          Mask2 mask(h, w);
          mask.data = read_raw<std::uint8_t>(dir / "records" / f.get<std::string>(), mask.size());
          r.sample.masks.emplace(ClassId{std::stoi(k)}, std::move(mask));
        }
        for (const auto& [k, f] : rj.at("snapshot").items()) {
          Tensor t(1, 2, h, w);
          t.values() = read_raw<double>(dir / "records" / f.get<std::string>(), t.size());
          r.snapshot.emplace(ClassId{std::stoi(k)}, std::move(t));
        }
        e.records.push_back(std::move(r));
      }
      s.entries_.emplace(ClassId{cj.at("class").get<int>()}, std::move(e));
    }
    if (s.hash() != m.at("store_hash").get<std::string>()) {
      throw Error(ErrorKind::runtime, "exemplar store " + dir.string() + " failed its integrity check");
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::runtime, "malformed exemplar store manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace incseg
