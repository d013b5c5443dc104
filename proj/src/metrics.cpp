#include "incseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "incseg/parallel.hpp"

namespace incseg {

Real dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw Error("dice: mask sizes differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || gt[i] > 1) throw Error("dice: masks must be binary");
    p += pred[i];
    g += gt[i];
    both += pred[i] & gt[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<Real>(both) / static_cast<Real>(p + g);
}

Real dice(const Mask2& pred, const Mask2& gt) {
  if (!pred.same_shape(gt)) throw Error("dice: mask shapes differ");
  return dice(std::span<const std::uint8_t>(pred.data), std::span<const std::uint8_t>(gt.data));
}

Real dice(const Mask3& pred, const Mask3& gt) {
  if (!pred.same_shape(gt)) throw Error("dice: mask shapes differ");
  return dice(std::span<const std::uint8_t>(pred.data), std::span<const std::uint8_t>(gt.data));
}

Mask3 surface(const Mask3& mask) {
  Mask3 s(mask.height, mask.width, mask.depth);
  auto fg = [&](int y, int x, int z) {
    if (y < 0 || x < 0 || z < 0 || y >= mask.height || x >= mask.width || z >= mask.depth) return false;
    return mask(y, x, z) != 0;
  };
  for (int z = 0; z < mask.depth; ++z) {
    for (int y = 0; y < mask.height; ++y) {
      for (int x = 0; x < mask.width; ++x) {
        if (!fg(y, x, z)) continue;
        const bool interior = fg(y - 1, x, z) && fg(y + 1, x, z) && fg(y, x - 1, z) && fg(y, x + 1, z) &&
                              fg(y, x, z - 1) && fg(y, x, z + 1);
        s(y, x, z) = interior ? 0 : 1;
      }
    }
  }
  return s;
}

namespace {

constexpr Real kFar = 1e30;

// Lower envelope of parabolas (Felzenszwalb-Huttenlocher) on a line with sample spacing h.
void edt_line(std::vector<Real>& f, Real h, std::vector<Real>& d, std::vector<int>& v, std::vector<Real>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<Real>::infinity();
  z[1] = std::numeric_limits<Real>::infinity();
  auto meet = [&](int q, int p) {
    const Real pq = q * h, pp = p * h;
    return ((f[q] + pq * pq) - (f[p] + pp * pp)) / (2 * (pq - pp));
  };
  for (int q = 1; q < n; ++q) {
    Real s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<Real>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    const Real pq = q * h;
    while (z[k + 1] < pq) ++k;
    const Real diff = pq - v[k] * h;
    d[q] = diff * diff + f[v[k]];
  }
  f.swap(d);
}

}  // namespace

std::vector<Real> distance_transform(const Mask3& seeds, const std::array<double, 3>& spacing) {
  const int dims[3] = {seeds.height, seeds.width, seeds.depth};
  std::vector<Real> g(seeds.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = seeds.data[i] ? 0.0 : kFar;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = dims[axis];
    std::vector<Real> f(n), d(n), z(n + 1);
    std::vector<int> v(n);
    const int o1 = axis == 0 ? 1 : 0;
    const int o2 = axis == 2 ? 1 : 2;
    for (int a = 0; a < dims[o1]; ++a) {
      for (int b = 0; b < dims[o2]; ++b) {
        int idx[3];
        idx[o1] = a;
        idx[o2] = b;
        for (int q = 0; q < n; ++q) {
          idx[axis] = q;
          f[q] = g[seeds.index(idx[0], idx[1], idx[2])];
        }
        edt_line(f, spacing[axis], d, v, z);
        for (int q = 0; q < n; ++q) {
          idx[axis] = q;
          g[seeds.index(idx[0], idx[1], idx[2])] = f[q];
        }
      }
    }
  }
  for (auto& x : g) x = std::sqrt(x);
  return g;
}

std::optional<Real> assd(const Mask3& pred, const Mask3& gt, const std::array<double, 3>& spacing) {
  if (!pred.same_shape(gt)) throw Error("assd: mask shapes differ");
  for (double s : spacing) {
    if (!(s > 0)) throw Error("assd: spacing must be positive");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred.data[i] > 1 || gt.data[i] > 1) throw Error("assd: masks must be binary");
  }
  const Mask3 sp = surface(pred);
  const Mask3 sg = surface(gt);
  const std::size_t np = count_nonzero(sp.data), ng = count_nonzero(sg.data);
  if (np == 0 || ng == 0) return std::nullopt;
  const auto to_g = distance_transform(sg, spacing);
  const auto to_p = distance_transform(sp, spacing);
  Real a = 0, b = 0;
  for (std::size_t i = 0; i < sp.size(); ++i) {
    if (sp.data[i]) a += to_g[i];
    if (sg.data[i]) b += to_p[i];
  }
  return 0.5 * (a / static_cast<Real>(np) + b / static_cast<Real>(ng));
}

std::optional<Real> assd(const Mask2& pred, const Mask2& gt, const std::array<double, 2>& spacing) {
  if (!pred.same_shape(gt)) throw Error("assd: mask shapes differ");
  Mask3 p(pred.height, pred.width, 1), g(gt.height, gt.width, 1);
  p.data = pred.data;
  g.data = gt.data;
  return assd(p, g, {spacing[0], spacing[1], 1.0});
}

Mask2 threshold_foreground(const Tensor& probs, int sample) {
  Mask2 m(probs.h(), probs.w());
  const Real* f = probs.plane(sample, 0);
  for (std::size_t k = 0; k < m.size(); ++k) m.data[k] = f[k] > 0.5 ? 1 : 0;
  return m;
}

std::vector<VolumeScore> evaluate_volumes(const SegmentationNetwork& net, const std::vector<AnnotatedVolume>& volumes,
                                          int threads, int axis) {
  std::vector<std::vector<VolumeScore>> per(volumes.size());
  parallel_for(volumes.size(), threads, [&](std::size_t vi) {
    const auto& v = volumes[vi];
    const auto samples = slice_volume(v.volume, v.annotations, axis);
    std::vector<const Grid2<float>*> images;
    for (const auto& s : samples) images.push_back(&s.image);
    const auto out = net.forward(batch_from_images(images), Mode::eval);
    for (const auto& [c, gt] : v.annotations.masks) {
      if (!net.has_head(c)) continue;
      std::vector<Mask2> planes;
      for (int k = 0; k < static_cast<int>(samples.size()); ++k) planes.push_back(threshold_foreground(out.probs(c), k));
      const Mask3 pred = restack(planes, axis);
      per[vi].push_back({v.volume.volume_id, c, dice(pred, gt), assd(pred, gt, v.volume.spacing)});
    }
  });
  std::vector<VolumeScore> all;
  for (auto& p : per) std::move(p.begin(), p.end(), std::back_inserter(all));
  return all;
}

const EvalRow& EvalReport::row(const std::string& method, ClassId c) const {
  auto r = find(method, c);
  if (!r) throw Error(ErrorKind::missing_artifact, "report has no row for method " + method + ", class " + to_string(c));
  return r->get();
}

std::optional<std::reference_wrapper<const EvalRow>> EvalReport::find(const std::string& method, ClassId c) const {
  for (const auto& r : rows) {
    if (r.method == method && r.class_id == c) return std::cref(r);
  }
  return std::nullopt;
}

void EvalReport::validate() const {
  for (const auto& r : rows) {
    if (r.method.empty() || r.method.find_first_of(",\n") != std::string::npos) {
      throw Error("report method names must be non-empty and free of commas");
    }
    if (!(r.dice_percent >= 0 && r.dice_percent <= 100)) throw Error("Dice percent out of range");
    if (r.assd_mm && !(*r.assd_mm >= 0)) throw Error("ASSD must be non-negative");
  }
}

namespace {
std::string format_real(Real v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
}  // namespace

std::string EvalReport::to_csv() const {
  validate();
  std::ostringstream os;
  os << "method,case,class,dice_percent,assd_mm,n_volumes\n";
  for (const auto& r : rows) {
    os << r.method << ',' << r.case_id << ',' << r.class_id.value << ',' << format_real(r.dice_percent) << ','
       << (r.assd_mm ? format_real(*r.assd_mm) : "NA") << ',' << r.n_volumes << '\n';
  }
  return os.str();
}

EvalReport EvalReport::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "method,case,class,dice_percent,assd_mm,n_volumes") {
    throw Error(ErrorKind::runtime, "unexpected evaluation CSV header");
  }
  EvalReport rep;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw Error(ErrorKind::runtime, "malformed evaluation CSV row: " + line);
    EvalRow r;
    r.method = f[0];
    r.case_id = std::stoi(f[1]);
    r.class_id = ClassId{std::stoi(f[2])};
    r.dice_percent = std::stod(f[3]);
    if (f[4] != "NA") r.assd_mm = std::stod(f[4]);
    r.n_volumes = std::stoi(f[5]);
    rep.rows.push_back(r);
  }
  rep.validate();
  return rep;
}

EvalReport aggregate(const std::vector<VolumeScore>& scores, const std::string& method, int case_id) {
  struct Acc {
    Real dice = 0, assd = 0;
    int n = 0, n_assd = 0;
  };
  std::map<ClassId, Acc> acc;
  for (const auto& s : scores) {
    auto& a = acc[s.class_id];
    a.dice += s.dice;
    ++a.n;
    if (s.assd_mm) {
      a.assd += *s.assd_mm;
      ++a.n_assd;
    }
  }
  EvalReport rep;
  for (const auto& [c, a] : acc) {
    EvalRow r;
    r.method = method;
    r.case_id = case_id;
    r.class_id = c;
    r.dice_percent = 100.0 * a.dice / a.n;
    if (a.n_assd > 0) r.assd_mm = a.assd / a.n_assd;
    r.n_volumes = a.n;
    rep.rows.push_back(r);
  }
  return rep;
}

RetentionReport retention_report(const EvalReport& before, const EvalReport& after, const std::vector<ClassId>& old_classes) {
  if (old_classes.empty()) throw Error("retention report needs at least one old class");
  std::vector<std::string> methods;
  for (const auto& r : after.rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  }
  RetentionReport rep;
  for (const auto& m : methods) {
    Real sum = 0;
    for (ClassId c : old_classes) {
      const EvalRow* b = nullptr;
      for (const auto& r : before.rows) {
        if (r.class_id == c) b = &r;
      }
      const auto a = after.find(m, c);
      if (b == nullptr || !a) throw Error("retention report: class " + to_string(c) + " missing for method " + m);
      const Real delta = a->get().dice_percent - b->dice_percent;
      rep.rows.push_back({m, c, b->dice_percent, a->get().dice_percent, delta});
      sum += a->get().dice_percent;
    }
    rep.ranking.emplace_back(m, sum / static_cast<Real>(old_classes.size()));
  }
  std::stable_sort(rep.ranking.begin(), rep.ranking.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
  return rep;
}

std::string RetentionReport::to_csv() const {
  std::ostringstream os;
  os << "method,class,dice_before_percent,dice_after_percent,delta_percent\n";
  for (const auto& r : rows) {
    os << r.method << ',' << r.class_id.value << ',' << format_real(r.before_percent) << ','
       << format_real(r.after_percent) << ',' << format_real(r.delta_percent) << '\n';
  }
  return os.str();
}

}  // namespace incseg
