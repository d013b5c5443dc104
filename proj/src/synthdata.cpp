#include "incseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "incseg/parallel.hpp"
#include "incseg/rng.hpp"

namespace incseg {

namespace {

void check_range(const std::pair<double, double>& r, const char* name) {
  if (!(r.first > 0) || r.second < r.first) throw Error(ErrorKind::config, std::string("invalid range for ") + name);
}

json range_json(const std::pair<double, double>& r) { return json::array({r.first, r.second}); }
std::pair<double, double> range_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

json profile_json(const IntensityProfile& p) {
  return {{"background", p.background}, {"structure_a", p.structure_a}, {"structure_b", p.structure_b}};
}
IntensityProfile profile_from(const json& j) {
  return {j.at("background").get<float>(), j.at("structure_a").get<float>(), j.at("structure_b").get<float>()};
}

// Separable Gaussian blur with clamped borders.
void blur_axis(std::vector<double>& g, int h, int w, int d, int axis, double sigma) {
  if (sigma <= 0) return;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  const int dims[3] = {h, w, d};
  auto at = [&](int y, int x, int z) { return (static_cast<std::size_t>(z) * h + y) * w + x; };
  std::vector<double> out(g.size());
  for (int z = 0; z < d; ++z) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          int p[3] = {y, x, z};
          p[axis] = std::clamp(p[axis] + i, 0, dims[axis] - 1);
          acc += k[i + r] * g[at(p[0], p[1], p[2])];
        }
        out[at(y, x, z)] = acc;
      }
    }
  }
  g.swap(out);
}

Mask3 ellipsoid(const SynthConfig& cfg, Rng& rng) {
  const double ry = rng.uniform(cfg.a_radius_inplane.first, cfg.a_radius_inplane.second);
  const double rx = rng.uniform(cfg.a_radius_inplane.first, cfg.a_radius_inplane.second);
  const double rz = rng.uniform(cfg.a_radius_depth.first, cfg.a_radius_depth.second);
  const double cy = rng.uniform(ry + 2, cfg.height - ry - 3);
  const double cx = rng.uniform(rx + 2, cfg.width - rx - 3);
  const double cz = rng.uniform(rz + 1, cfg.depth - rz - 2);
  const double theta = rng.uniform(0, 3.141592653589793);
  const double c = std::cos(theta), s = std::sin(theta);
  Mask3 m(cfg.height, cfg.width, cfg.depth);
  for (int z = 0; z < cfg.depth; ++z) {
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        const double dy = y - cy, dx = x - cx, dz = z - cz;
        const double u = c * dy + s * dx, v = -s * dy + c * dx;
        if ((u * u) / (ry * ry) + (v * v) / (rx * rx) + (dz * dz) / (rz * rz) <= 1.0) m(y, x, z) = 1;
      }
    }
  }
  return m;
}

// Parabolic sheet v = v0 + k (u - u0)^2 + tilt (z - z0), swept along u over an extent and a depth range.
Mask3 sheet(const SynthConfig& cfg, Rng& rng) {
  const bool transpose = rng.uniform() < 0.5;
  const int nu = transpose ? cfg.height : cfg.width;
  const int nv = transpose ? cfg.width : cfg.height;
  const double extent = rng.uniform(cfg.b_extent.first, cfg.b_extent.second);
  const double dext = rng.uniform(cfg.b_depth_extent.first, cfg.b_depth_extent.second);
  const double thick = rng.uniform(cfg.b_thickness.first, cfg.b_thickness.second);
  const double k = rng.uniform(-cfg.b_curvature, cfg.b_curvature);
  const double tilt = rng.uniform(-0.5, 0.5);
  const double u0 = rng.uniform(extent / 2 + 2, nu - extent / 2 - 3);
  const double v0 = rng.uniform(6, nv - 7);
  const double z0 = rng.uniform(dext / 2, cfg.depth - dext / 2);
  Mask3 m(cfg.height, cfg.width, cfg.depth);
  for (int z = 0; z < cfg.depth; ++z) {
    if (std::abs(z + 0.5 - z0) > dext / 2) continue;
    for (int u = 0; u < nu; ++u) {
      if (std::abs(u - u0) > extent / 2) continue;
      const double vc = v0 + k * (u - u0) * (u - u0) + tilt * (z - z0);
      for (int v = 0; v < nv; ++v) {
        if (std::abs(v - vc) >= thick / 2) continue;
        if (transpose) {
          m(u, v, z) = 1;
        } else {
          m(v, u, z) = 1;
        }
      }
    }
  }
  return m;
}

bool fraction_ok(const Mask3& m, const std::pair<double, double>& range) {
  const double f = static_cast<double>(count_nonzero(m.data)) / static_cast<double>(m.size());
  return f >= range.first && f <= range.second;
}

bool touches_border(const Mask3& m) {
  for (int z = 0; z < m.depth; ++z) {
    for (int y = 0; y < m.height; ++y) {
      for (int x = 0; x < m.width; ++x) {
        if (m(y, x, z) && (y == 0 || x == 0 || y == m.height - 1 || x == m.width - 1)) return true;
      }
    }
  }
  return false;
}

// True when b comes within `margin` voxels (Chebyshev, in-plane and depth) of a.
bool too_close(const Mask3& a, const Mask3& b, int margin) {
  for (int z = 0; z < a.depth; ++z) {
    for (int y = 0; y < a.height; ++y) {
      for (int x = 0; x < a.width; ++x) {
        if (!b(y, x, z)) continue;
        for (int dz = -margin; dz <= margin; ++dz) {
          for (int dy = -margin; dy <= margin; ++dy) {
            for (int dx = -margin; dx <= margin; ++dx) {
              const int yy = y + dy, xx = x + dx, zz = z + dz;
              if (yy < 0 || xx < 0 || zz < 0 || yy >= a.height || xx >= a.width || zz >= a.depth) continue;
              if (a(yy, xx, zz)) return true;
            }
          }
        }
      }
    }
  }
  return false;
}

}  // namespace

void SynthConfig::validate() const {
  if (height < 16 || width < 16 || depth < 4) throw Error(ErrorKind::config, "synthetic grid too small");
  for (double s : spacing) {
    if (!(s > 0)) throw Error(ErrorKind::config, "synthetic spacing must be positive");
  }
  check_range(a_radius_inplane, "a_radius_inplane");
  check_range(a_radius_depth, "a_radius_depth");
  check_range(a_fraction, "a_fraction");
  check_range(b_extent, "b_extent");
  check_range(b_depth_extent, "b_depth_extent");
  check_range(b_thickness, "b_thickness");
  check_range(b_fraction, "b_fraction");
  if (2 * a_radius_inplane.second + 5 > std::min(height, width) || 2 * a_radius_depth.second + 3 > depth) {
    throw Error(ErrorKind::config, "structure A does not fit inside the grid");
  }
  if (b_extent.second + 5 > std::min(height, width) || b_depth_extent.second > depth) {
    throw Error(ErrorKind::config, "structure B does not fit inside the grid");
  }
  if (noise < 0 || texture < 0 || smoothness < 0 || bias < 0) {
    throw Error(ErrorKind::config, "noise, texture, smoothness and bias must be >= 0");
  }
  if (max_retries < 1) throw Error(ErrorKind::config, "max_retries must be >= 1");
}

json SynthConfig::to_json() const {
  return {{"height", height},
          {"width", width},
          {"depth", depth},
          {"spacing", spacing},
          {"seed", seed},
          {"a_radius_inplane", range_json(a_radius_inplane)},
          {"a_radius_depth", range_json(a_radius_depth)},
          {"a_fraction", range_json(a_fraction)},
          {"b_extent", range_json(b_extent)},
          {"b_depth_extent", range_json(b_depth_extent)},
          {"b_thickness", range_json(b_thickness)},
          {"b_curvature", b_curvature},
          {"b_fraction", range_json(b_fraction)},
          {"noise", noise},
          {"texture", texture},
          {"smoothness", smoothness},
          {"bias", bias},
          {"contrast_a", profile_json(contrast_a)},
          {"contrast_b", profile_json(contrast_b)},
          {"max_retries", max_retries}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  c.height = j.at("height");
  c.width = j.at("width");
  c.depth = j.at("depth");
  c.spacing = j.at("spacing").get<std::array<double, 3>>();
  c.seed = j.at("seed");
  c.a_radius_inplane = range_from(j.at("a_radius_inplane"));
  c.a_radius_depth = range_from(j.at("a_radius_depth"));
  c.a_fraction = range_from(j.at("a_fraction"));
  c.b_extent = range_from(j.at("b_extent"));
  c.b_depth_extent = range_from(j.at("b_depth_extent"));
  c.b_thickness = range_from(j.at("b_thickness"));
  c.b_curvature = j.at("b_curvature");
  c.b_fraction = range_from(j.at("b_fraction"));
  c.noise = j.at("noise");
  c.texture = j.at("texture");
  c.smoothness = j.at("smoothness");
  c.bias = j.at("bias");
  c.contrast_a = profile_from(j.at("contrast_a"));
  c.contrast_b = profile_from(j.at("contrast_b"));
  c.max_retries = j.at("max_retries");
  c.validate();
  return c;
}

std::string synth_volume_id(int index) {
  std::ostringstream os;
  os << "vol" << std::setw(2) << std::setfill('0') << index;
  return os.str();
}

AnnotatedVolume generate_volume(const SynthConfig& cfg, int index, ContrastProfile contrast) {
  cfg.validate();
  if (index < 0) throw Error("volume index must be >= 0");
  Rng geo(derive_seed(derive_seed(cfg.seed, "geometry"), static_cast<std::uint64_t>(index)));
  Mask3 a, b;
  bool ok = false;
  for (int attempt = 0; attempt < cfg.max_retries && !ok; ++attempt) {
    a = ellipsoid(cfg, geo);
    if (!fraction_ok(a, cfg.a_fraction) || touches_border(a)) continue;
    for (int inner = 0; inner < cfg.max_retries && !ok; ++inner) {
      b = sheet(cfg, geo);
      ok = fraction_ok(b, cfg.b_fraction) && !touches_border(b) && !too_close(a, b, 2);
    }
  }
  if (!ok) throw Error("could not place both structures for volume " + std::to_string(index) + " within the retry budget");

  const auto& prof = contrast == ContrastProfile::A ? cfg.contrast_a : cfg.contrast_b;
  Rng tex(derive_seed(derive_seed(cfg.seed, "texture"), static_cast<std::uint64_t>(index)));
  const std::size_t n = a.size();
  std::vector<double> t(n);
  for (auto& v : t) v = tex.normal();
  blur_axis(t, cfg.height, cfg.width, cfg.depth, 0, cfg.smoothness);
  blur_axis(t, cfg.height, cfg.width, cfg.depth, 1, cfg.smoothness);
  blur_axis(t, cfg.height, cfg.width, cfg.depth, 2, cfg.smoothness * cfg.spacing[0] / cfg.spacing[2]);
  double mean = 0, sq = 0;
  for (double v : t) mean += v;
  mean /= static_cast<double>(n);
  for (double v : t) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(n));
  const double angle = tex.uniform(0, 6.283185307179586);
  const double gy = std::cos(angle), gx = std::sin(angle);

  AnnotatedVolume out;
  out.volume.volume_id = synth_volume_id(index);
  out.volume.spacing = cfg.spacing;
  out.volume.contrast = contrast;
  out.volume.voxels = Grid3<float>(cfg.height, cfg.width, cfg.depth);
  for (int z = 0; z < cfg.depth; ++z) {
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        const std::size_t i = a.index(y, x, z);
        double base = a.data[i] ? prof.structure_a : (b.data[i] ? prof.structure_b : prof.background);
        const double ramp = (gy * (y - cfg.height / 2.0) / (cfg.height / 2.0) + gx * (x - cfg.width / 2.0) / (cfg.width / 2.0));
        base += cfg.texture * (sd > 0 ? (t[i] - mean) / sd : 0.0) + cfg.bias * ramp / std::sqrt(2.0) +
                cfg.noise * tex.normal();
        out.volume.voxels.data[i] = static_cast<float>(base);
      }
    }
  }
  out.annotations.masks.emplace(kStructureA, std::move(a));
  out.annotations.masks.emplace(kStructureB, std::move(b));
  out.volume.validate();
  out.annotations.validate_against(out.volume);
  return out;
}

std::vector<AnnotatedVolume> generate_scenario_volumes(const SynthConfig& cfg, int case_id, int threads) {
  const auto sc = ScenarioConfig::preset(case_id);
  const int base = sc.init.count + sc.incremental.count + 2;
  struct Job {
    int index;
    ContrastProfile contrast;
    std::string id;
    const PartitionSpec* part;
  };
  std::vector<Job> jobs;
  auto part_of = [&](const std::string& id) -> const PartitionSpec* {
    for (const auto* p : {&sc.init, &sc.incremental}) {
      if (std::find(p->volume_ids.begin(), p->volume_ids.end(), id) != p->volume_ids.end()) return p;
    }
    return nullptr;
  };
  for (int i = 0; i < base; ++i) {
    const auto id = synth_volume_id(i);
    const auto* part = part_of(id);
    const bool shifted = case_id == 3 && part == &sc.incremental;
    jobs.push_back({i, shifted ? ContrastProfile::B : ContrastProfile::A, id, part});
  }
  for (const auto* held : {&sc.validation, &sc.test}) {
    for (const auto& h : *held) {
      if (h.contrast == ContrastProfile::A) continue;
      int index = -1;
      for (int i = 0; i < base; ++i) {
        if (synth_volume_id(i) == h.base_id) index = i;
      }
      if (index < 0) throw Error(ErrorKind::config, "held-out rendering refers to unknown volume " + h.base_id);
      jobs.push_back({index, h.contrast, h.volume_id(), nullptr});
    }
  }
  std::vector<AnnotatedVolume> vols(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t k) {
    const auto& job = jobs[k];
    auto v = generate_volume(cfg, job.index, job.contrast);
    v.volume.volume_id = job.id;
    if (job.part != nullptr) {
      std::map<ClassId, Mask3> kept;
      for (ClassId c : job.part->classes) kept.emplace(c, std::move(v.annotations.masks.at(c)));
      v.annotations.masks = std::move(kept);
    }
    vols[k] = std::move(v);
  });
  return vols;
}

json corpus_manifest(const SynthConfig& cfg, int case_id, const std::vector<AnnotatedVolume>& volumes) {
  const auto sc = ScenarioConfig::preset(case_id);
  json vols = json::array();
  for (const auto& v : volumes) {
    std::string role = "unused";
    const auto& id = v.volume.volume_id;
    if (std::find(sc.init.volume_ids.begin(), sc.init.volume_ids.end(), id) != sc.init.volume_ids.end()) role = "init";
    if (std::find(sc.incremental.volume_ids.begin(), sc.incremental.volume_ids.end(), id) != sc.incremental.volume_ids.end()) {
      role = "incremental";
    }
    for (const auto& h : sc.validation) {
      if (id == h.volume_id()) role = "validation";
    }
    for (const auto& h : sc.test) {
      if (id == h.volume_id()) role = "test";
    }
    json classes = json::array();
    for (const auto& [c, _] : v.annotations.masks) classes.push_back(c.value);
    vols.push_back({{"volume_id", id},
                    {"role", role},
                    {"contrast", to_string(v.volume.contrast)},
                    {"classes", classes},
                    {"sha256", volume_hash(v)}});
  }
  return {{"format", "incseg-corpus"}, {"version", 1}, {"case", case_id}, {"synth", cfg.to_json()}, {"volumes", vols}};
}

json generate_scenario_corpus(const SynthConfig& cfg, int case_id, const fs::path& dir, int threads) {
  const auto vols = generate_scenario_volumes(cfg, case_id, threads);
  for (const auto& v : vols) save_volume(dir / "volumes" / v.volume.volume_id, v);
  auto manifest = corpus_manifest(cfg, case_id, vols);
  write_json_file(dir / "corpus.json", manifest);
  return manifest;
}

}  // namespace incseg
