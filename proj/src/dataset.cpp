#include "incseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace incseg {

std::string to_string(ContrastProfile c) { return c == ContrastProfile::A ? "A" : "B"; }

ContrastProfile parse_contrast(const std::string& s) {
  if (s == "A") return ContrastProfile::A;
  if (s == "B") return ContrastProfile::B;
  throw Error("unknown contrast profile '" + s + "'");
}

std::string to_string(DatasetRole r) {
  switch (r) {
    case DatasetRole::init: return "init";
    case DatasetRole::exemplar: return "exemplar";
    case DatasetRole::incremental: return "incremental";
    case DatasetRole::validation: return "validation";
    case DatasetRole::test: return "test";
  }
  return "?";
}

void Volume::validate() const {
  if (volume_id.empty()) throw Error("volume has empty id");
  if (voxels.size() != static_cast<std::size_t>(voxels.height) * voxels.width * voxels.depth || voxels.size() == 0) {
    throw Error("volume " + volume_id + " has inconsistent voxel storage");
  }
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw Error("volume " + volume_id + " has non-positive spacing");
  }
  for (float v : voxels.data) {
    if (!std::isfinite(v)) throw Error("volume " + volume_id + " contains non-finite voxels");
  }
}

std::set<ClassId> AnnotationSet::annotated_classes() const {
  std::set<ClassId> out;
  for (const auto& [id, _] : masks) out.insert(id);
  return out;
}

void AnnotationSet::validate_against(const Volume& v) const {
  for (const auto& [id, m] : masks) {
    if (!m.same_shape(v.voxels)) {
      throw Error("mask for class " + to_string(id) + " does not match the shape of volume " + v.volume_id);
    }
    for (auto x : m.data) {
      if (x > 1) throw Error("mask for class " + to_string(id) + " in volume " + v.volume_id + " is not binary");
    }
  }
}

std::set<ClassId> ImageSample::annotated_classes() const {
  std::set<ClassId> out;
  for (const auto& [id, _] : masks) out.insert(id);
  return out;
}

bool ImageSample::has_foreground(ClassId c) const {
  auto it = masks.find(c);
  if (it == masks.end()) return false;
  return std::any_of(it->second.data.begin(), it->second.data.end(), [](auto x) { return x != 0; });
}

ClassRegistry::ClassRegistry(std::vector<ClassEntry> entries) {
  for (auto& e : entries) add(e.id, std::move(e.name), e.introduced_at_step);
}

void ClassRegistry::add(ClassId id, std::string name, int step) {
  if (step < 0) throw Error("class step must be >= 0");
  if (contains(id)) throw Error("duplicate class id " + to_string(id));
  if (!entries_.empty() && step < entries_.back().introduced_at_step) {
    throw Error("class registry steps must be non-decreasing");
  }
  entries_.push_back({id, std::move(name), step});
}

bool ClassRegistry::contains(ClassId id) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.id == id; });
}

const ClassEntry& ClassRegistry::entry(ClassId id) const {
  for (const auto& e : entries_) {
    if (e.id == id) return e;
  }
  throw Error("class " + to_string(id) + " not in registry");
}

std::vector<ClassId> ClassRegistry::ids() const {
  std::vector<ClassId> out;
  for (const auto& e : entries_) out.push_back(e.id);
  return out;
}

std::vector<ClassId> ClassRegistry::introduced_at(int step) const {
  std::vector<ClassId> out;
  for (const auto& e : entries_) {
    if (e.introduced_at_step == step) out.push_back(e.id);
  }
  return out;
}

std::vector<ClassId> ClassRegistry::introduced_before(int step) const {
  std::vector<ClassId> out;
  for (const auto& e : entries_) {
    if (e.introduced_at_step < step) out.push_back(e.id);
  }
  return out;
}

int ClassRegistry::latest_step() const { return entries_.empty() ? -1 : entries_.back().introduced_at_step; }

json ClassRegistry::to_json() const {
  json arr = json::array();
  for (const auto& e : entries_) arr.push_back({{"id", e.id.value}, {"name", e.name}, {"step", e.introduced_at_step}});
  return arr;
}

ClassRegistry ClassRegistry::from_json(const json& j) {
  ClassRegistry r;
  for (const auto& e : j) r.add(ClassId{e.at("id").get<int>()}, e.at("name").get<std::string>(), e.at("step").get<int>());
  return r;
}

void LabeledDataset::validate() const {
  std::set<Provenance> seen;
  for (const auto& s : samples) {
    if (!seen.insert(s.provenance).second) throw Error("duplicate sample provenance " + to_string(s.provenance));
    for (const auto& [id, m] : s.masks) {
      if (!registry.contains(id)) {
        throw Error("sample " + to_string(s.provenance) + " annotates class " + to_string(id) + " missing from registry");
      }
      if (!m.same_shape(s.image)) throw Error("mask shape mismatch in sample " + to_string(s.provenance));
    }
  }
}

std::optional<std::size_t> LabeledDataset::find(const Provenance& p) const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].provenance == p) return i;
  }
  return std::nullopt;
}

namespace {

std::array<int, 3> dims_of(const Grid3<float>& g) { return {g.height, g.width, g.depth}; }

// Plane coordinates: for a plane along `axis`, (u, v) index the two remaining axes in order.
template <class T>
Grid2<T> extract_plane(const Grid3<T>& g, int axis, int k) {
  const std::array<int, 3> d{g.height, g.width, g.depth};
  const int a0 = axis == 0 ? 1 : 0;
  const int a1 = axis == 2 ? 1 : 2;
  Grid2<T> out(d[a0], d[a1]);
  for (int u = 0; u < d[a0]; ++u) {
    for (int v = 0; v < d[a1]; ++v) {
      std::array<int, 3> idx{};
      idx[axis] = k;
      idx[a0] = u;
      idx[a1] = v;
      out(u, v) = g(idx[0], idx[1], idx[2]);
    }
  }
  return out;
}

}  // namespace

std::vector<ImageSample> slice_volume(const Volume& volume, const AnnotationSet& annotations, int axis) {
  if (axis < 0 || axis > 2) throw Error("slicing axis must be 0, 1 or 2");
  volume.validate();
  annotations.validate_against(volume);
  const int n = dims_of(volume.voxels)[axis];
  std::vector<ImageSample> out;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    ImageSample s;
    s.image = extract_plane(volume.voxels, axis, k);
    for (const auto& [id, m] : annotations.masks) s.masks.emplace(id, extract_plane(m, axis, k));
    s.provenance = {volume.volume_id, k};
    out.push_back(std::move(s));
  }
  return out;
}

template <class T>
Grid3<T> restack(const std::vector<Grid2<T>>& planes, int axis) {
  if (planes.empty()) throw Error("cannot restack zero planes");
  if (axis < 0 || axis > 2) throw Error("slicing axis must be 0, 1 or 2");
  const int n = static_cast<int>(planes.size());
  const int pu = planes.front().height;
  const int pv = planes.front().width;
  std::array<int, 3> d{};
  const int a0 = axis == 0 ? 1 : 0;
  const int a1 = axis == 2 ? 1 : 2;
  d[axis] = n;
  d[a0] = pu;
  d[a1] = pv;
  Grid3<T> g(d[0], d[1], d[2]);
  for (int k = 0; k < n; ++k) {
    if (planes[k].height != pu || planes[k].width != pv) throw Error("restack: planes differ in shape");
    for (int u = 0; u < pu; ++u) {
      for (int v = 0; v < pv; ++v) {
        std::array<int, 3> idx{};
        idx[axis] = k;
        idx[a0] = u;
        idx[a1] = v;
        g(idx[0], idx[1], idx[2]) = planes[k](u, v);
      }
    }
  }
  return g;
}

template Grid3<float> restack<float>(const std::vector<Grid2<float>>&, int);
template Grid3<std::uint8_t> restack<std::uint8_t>(const std::vector<Grid2<std::uint8_t>>&, int);
template Grid3<double> restack<double>(const std::vector<Grid2<double>>&, int);

std::vector<ImageSample> slice_all(const std::vector<AnnotatedVolume>& volumes, int axis) {
  std::vector<ImageSample> out;
  for (const auto& v : volumes) {
    auto s = slice_volume(v.volume, v.annotations, axis);
    std::move(s.begin(), s.end(), std::back_inserter(out));
  }
  return out;
}

ScenarioConfig ScenarioConfig::preset(int case_id) {
  auto ids = [](int from, int to) {
    std::vector<std::string> out;
    for (int i = from; i < to; ++i) {
      std::ostringstream os;
      os << "vol" << std::setw(2) << std::setfill('0') << i;
      out.push_back(os.str());
    }
    return out;
  };
  const ClassId a{1}, b{2};
  ScenarioConfig s;
  s.case_id = case_id;
  switch (case_id) {
    case 1:
      s.init = {4, ids(0, 4), {a}};
      s.incremental = {4, ids(4, 8), {b}};
      s.validation = {{"vol08"}};
      s.test = {{"vol09"}};
      s.classes = {{a, "A", 0}, {b, "B", 1}};
      break;
    case 2:
      s.init = {6, ids(0, 6), {b}};
      s.incremental = {1, ids(6, 7), {a}};
      s.validation = {{"vol07"}};
      s.test = {{"vol08"}};
      s.classes = {{b, "B", 0}, {a, "A", 1}};
      break;
    case 3:
      s.init = {4, ids(0, 4), {a}};
      s.incremental = {3, ids(4, 7), {b}};
      // Each class is scored in the contrast it was trained on.
      s.validation = {{"vol07", ContrastProfile::A, {a}}, {"vol07", ContrastProfile::B, {b}}};
      s.test = {{"vol08", ContrastProfile::A, {a}}, {"vol08", ContrastProfile::B, {b}}};
      s.classes = {{a, "A", 0}, {b, "B", 1}};
      break;
    default:
      throw Error(ErrorKind::config, "unknown scenario case " + std::to_string(case_id));
  }
  return s;
}

LabeledDataset ScenarioSplit::dataset(DatasetRole role, int axis) const {
  const std::vector<AnnotatedVolume>* src = nullptr;
  switch (role) {
    case DatasetRole::init: src = &init; break;
    case DatasetRole::incremental: src = &incremental; break;
    case DatasetRole::validation: src = &validation; break;
    case DatasetRole::test: src = &test; break;
    case DatasetRole::exemplar: throw Error("exemplar datasets come from an exemplar store");
  }
  LabeledDataset d{slice_all(*src, axis), registry, role};
  d.validate();
  return d;
}

namespace {

AnnotatedVolume restrict_classes(const AnnotatedVolume& v, const std::vector<ClassId>& keep, const std::string& role) {
  AnnotatedVolume out{v.volume, {}};
  for (ClassId c : keep) {
    auto it = v.annotations.masks.find(c);
    if (it == v.annotations.masks.end()) {
      throw Error("class " + to_string(c) + " is not annotated in volume " + v.volume.volume_id + " assigned to " + role);
    }
    out.annotations.masks.emplace(c, it->second);
  }
  return out;
}

}  // namespace

ScenarioSplit build_scenario(const std::vector<AnnotatedVolume>& volumes, const ScenarioConfig& scenario) {
  ScenarioSplit split;
  split.registry = ClassRegistry(scenario.classes);
  std::vector<ClassId> all_classes = split.registry.ids();
  for (const auto& part : {scenario.init, scenario.incremental}) {
    for (ClassId c : part.classes) {
      if (!split.registry.contains(c)) throw Error(ErrorKind::config, "scenario class " + to_string(c) + " not declared");
    }
  }

  auto held_out_or_default = [](const std::vector<HeldOutSpec>& v) {
    return v.empty() ? std::vector<HeldOutSpec>{HeldOutSpec{}} : v;
  };
  const auto validation = held_out_or_default(scenario.validation);
  const auto test = held_out_or_default(scenario.test);
  const int needed = scenario.init.count + scenario.incremental.count + static_cast<int>(validation.size() + test.size());
  if (static_cast<int>(volumes.size()) < needed) {
    throw Error("scenario needs " + std::to_string(needed) + " volumes but only " + std::to_string(volumes.size()) +
                " are available");
  }

  std::map<std::string, const AnnotatedVolume*> by_id;
  for (const auto& v : volumes) {
    if (!by_id.emplace(v.volume.volume_id, &v).second) throw Error("duplicate volume id " + v.volume.volume_id);
  }
  std::set<std::string> used;
  auto take = [&](const std::string& id) -> const AnnotatedVolume& {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw Error("scenario references unknown volume " + id);
    if (!used.insert(id).second) throw Error("volume " + id + " assigned to more than one partition");
    return *it->second;
  };
  // Explicit ids are reserved first so count-based picks never steal them.
  for (const auto* part : {&scenario.init, &scenario.incremental}) {
    for (const auto& id : part->volume_ids) {
      if (!by_id.count(id)) throw Error("scenario references unknown volume " + id);
    }
  }
  std::set<std::string> reserved(scenario.init.volume_ids.begin(), scenario.init.volume_ids.end());
  reserved.insert(scenario.incremental.volume_ids.begin(), scenario.incremental.volume_ids.end());
  for (const auto* held : {&validation, &test}) {
    for (const auto& h : *held) {
      if (!h.base_id.empty()) reserved.insert(h.volume_id());
    }
  }
  auto next_free = [&]() -> std::string {
    for (const auto& v : volumes) {
      const auto& id = v.volume.volume_id;
      if (!used.count(id) && !reserved.count(id)) return id;
    }
    throw Error("not enough unassigned volumes for the requested split");
  };

  auto fill = [&](const PartitionSpec& part, std::vector<AnnotatedVolume>& out, const std::string& role) {
    if (!part.volume_ids.empty()) {
      for (const auto& id : part.volume_ids) out.push_back(restrict_classes(take(id), part.classes, role));
    } else {
      for (int i = 0; i < part.count; ++i) out.push_back(restrict_classes(take(next_free()), part.classes, role));
    }
  };
  fill(scenario.init, split.init, "init");
  fill(scenario.incremental, split.incremental, "incremental");
  auto fill_held_out = [&](const std::vector<HeldOutSpec>& specs, std::vector<AnnotatedVolume>& out, const std::string& role) {
    for (const auto& h : specs) {
      for (ClassId c : h.classes) {
        if (!split.registry.contains(c)) throw Error(ErrorKind::config, "scenario class " + to_string(c) + " not declared");
      }
      const auto id = h.base_id.empty() ? next_free() : h.volume_id();
      out.push_back(restrict_classes(take(id), h.classes.empty() ? all_classes : h.classes, role));
    }
  };
  fill_held_out(validation, split.validation, "validation");
  fill_held_out(test, split.test, "test");
  return split;
}

void save_volume(const fs::path& dir, const AnnotatedVolume& v) {
  v.volume.validate();
  v.annotations.validate_against(v.volume);
  fs::create_directories(dir);
  json header;
  header["format"] = "incseg-volume";
  header["version"] = 1;
  header["volume_id"] = v.volume.volume_id;
  header["shape"] = {v.volume.voxels.height, v.volume.voxels.width, v.volume.voxels.depth};
  header["spacing"] = v.volume.spacing;
  header["contrast"] = to_string(v.volume.contrast);
  header["image"] = "image.f32";
  json masks = json::object();
  for (const auto& [id, m] : v.annotations.masks) {
    const auto name = "mask_" + to_string(id) + ".u8";
    masks[to_string(id)] = name;
    write_raw<std::uint8_t>(dir / name, m.data);
  }
  header["masks"] = masks;
  write_raw<float>(dir / "image.f32", v.volume.voxels.data);
  write_json_file(dir / "header.json", header);
}

AnnotatedVolume load_volume(const fs::path& dir) {
  const auto header = read_json_file(dir / "header.json");
  try {
    if (header.at("format") != "incseg-volume") throw Error(ErrorKind::runtime, "not a volume header: " + dir.string());
    if (header.at("version").get<int>() != 1) throw Error(ErrorKind::runtime, "unsupported volume version in " + dir.string());
    const auto shape = header.at("shape").get<std::array<int, 3>>();
    AnnotatedVolume v;
    v.volume.volume_id = header.at("volume_id").get<std::string>();
    v.volume.spacing = header.at("spacing").get<std::array<double, 3>>();
    v.volume.contrast = parse_contrast(header.at("contrast").get<std::string>());
    v.volume.voxels = Grid3<float>(shape[0], shape[1], shape[2]);
    const auto n = v.volume.voxels.size();
    v.volume.voxels.data = read_raw<float>(dir / header.at("image").get<std::string>(), n);
    for (const auto& [key, file] : header.at("masks").items()) {
      Mask3 m(shape[0], shape[1], shape[2]);
      m.data = read_raw<std::uint8_t>(dir / file.get<std::string>(), n);
      v.annotations.masks.emplace(ClassId{std::stoi(key)}, std::move(m));
    }
    v.volume.validate();
    v.annotations.validate_against(v.volume);
    return v;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::runtime, "malformed volume header in " + dir.string() + ": " + e.what());
  }
}

std::vector<AnnotatedVolume> load_volumes(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::missing_artifact, "dataset directory " + dir.string() + " not found");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "header.json")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<AnnotatedVolume> out;
  for (const auto& d : dirs) out.push_back(load_volume(d));
  return out;
}

std::string volume_hash(const AnnotatedVolume& v) {
  Sha256 h;
  h.update(v.volume.volume_id);
  h.update(to_string(v.volume.contrast));
  h.update_span<double>(v.volume.spacing);
  const std::array<int, 3> shape{v.volume.voxels.height, v.volume.voxels.width, v.volume.voxels.depth};
  h.update_span<int>(shape);
  h.update_span<float>(v.volume.voxels.data);
  for (const auto& [id, m] : v.annotations.masks) {
    h.update(to_string(id));
    h.update_span<std::uint8_t>(m.data);
  }
  return h.hex_digest();
}

std::string dataset_hash(const LabeledDataset& d) {
  Sha256 h;
  h.update(to_string(d.role));
  for (const auto& s : d.samples) {
    h.update(to_string(s.provenance));
    const std::array<int, 2> shape{s.image.height, s.image.width};
    h.update_span<int>(shape);
    h.update_span<float>(s.image.data);
    for (const auto& [id, m] : s.masks) {
      h.update(to_string(id));
      h.update_span<std::uint8_t>(m.data);
    }
  }
  return h.hex_digest();
}

}  // namespace incseg
