#include "incseg/losses.hpp"

#include <cmath>

namespace incseg {

void LossWeights::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::config, "alpha must lie in [0, 1]");
}

std::string to_string(ClassificationLossKind k) { return k == ClassificationLossKind::dice ? "dice" : "cross_entropy"; }

ClassificationLossKind parse_classification_loss(const std::string& s) {
  if (s == "cross_entropy" || s == "ce") return ClassificationLossKind::cross_entropy;
  if (s == "dice") return ClassificationLossKind::dice;
  throw Error(ErrorKind::config, "unknown classification loss '" + s + "'");
}

void PredictionSnapshot::put(const Provenance& p, ClassId c, Tensor maps) {
  if (maps.n() != 1 || maps.c() != 2) throw Error("snapshot maps must have shape (1, 2, H, W)");
  const Real* f = maps.plane(0, 0);
  const Real* b = maps.plane(0, 1);
  for (std::size_t k = 0; k < maps.plane_size(); ++k) {
    if (std::abs(f[k] + b[k] - 1.0) > 1e-6) throw Error("snapshot channels do not sum to one at " + to_string(p));
  }
  entries_[p][c] = std::move(maps);
}

const Tensor& PredictionSnapshot::get(const Provenance& p, ClassId c) const {
  auto it = entries_.find(p);
  if (it == entries_.end()) throw Error(ErrorKind::missing_artifact, "no snapshot for sample " + to_string(p));
  auto jt = it->second.find(c);
  if (jt == it->second.end()) {
    throw Error(ErrorKind::missing_artifact, "snapshot for sample " + to_string(p) + " lacks class " + to_string(c));
  }
  return jt->second;
}

std::vector<ClassId> PredictionSnapshot::classes() const {
  if (entries_.empty()) return {};
  std::vector<ClassId> out;
  for (const auto& [c, _] : entries_.begin()->second) out.push_back(c);
  return out;
}

void PredictionSnapshot::require_coverage(const LabeledDataset& d) const {
  const auto cls = classes();
  for (const auto& s : d.samples) {
    for (ClassId c : cls) (void)get(s.provenance, c);
  }
}

std::string PredictionSnapshot::hash() const {
  Sha256 h;
  for (const auto& [p, per_class] : entries_) {
    h.update(to_string(p));
    for (const auto& [c, t] : per_class) {
      h.update(to_string(c));
      h.update_span<Real>(t.values());
    }
  }
  return h.hex_digest();
}

void PredictionSnapshot::save(const fs::path& dir) const {
  fs::create_directories(dir);
  json index = json::array();
  std::size_t k = 0;
  for (const auto& [p, per_class] : entries_) {
    for (const auto& [c, t] : per_class) {
      const auto file = "snap_" + std::to_string(k++) + ".f64";
      write_raw<double>(dir / file, t.values());
      index.push_back({{"volume_id", p.volume_id},
                       {"slice", p.slice_index},
                       {"class", c.value},
                       {"height", t.h()},
                       {"width", t.w()},
                       {"file", file}});
    }
  }
  write_json_file(dir / "snapshot.json", {{"format", "incseg-snapshot"}, {"version", 1}, {"entries", index}});
}

PredictionSnapshot PredictionSnapshot::load(const fs::path& dir) {
  const auto j = read_json_file(dir / "snapshot.json");
  PredictionSnapshot s;
  for (const auto& e : j.at("entries")) {
    Tensor t(1, 2, e.at("height").get<int>(), e.at("width").get<int>());
    t.values() = read_raw<double>(dir / e.at("file").get<std::string>(), t.size());
    s.put({e.at("volume_id").get<std::string>(), e.at("slice").get<int>()}, ClassId{e.at("class").get<int>()}, std::move(t));
  }
  return s;
}

Real mean_entropy(const Tensor& maps, int sample) {
  const Real* f = maps.plane(sample, 0);
  const Real* b = maps.plane(sample, 1);
  Real h = 0;
  for (std::size_t k = 0; k < maps.plane_size(); ++k) {
    if (f[k] > 0) h -= f[k] * std::log(f[k]);
    if (b[k] > 0) h -= b[k] * std::log(b[k]);
  }
  return h / static_cast<Real>(maps.plane_size());
}

namespace {

struct LogSoftmax2 {
  Real log_f, log_b;
};

inline LogSoftmax2 log_softmax2(Real zf, Real zb) {
  const Real m = std::max(zf, zb);
  const Real lse = m + std::log(std::exp(zf - m) + std::exp(zb - m));
  return {zf - lse, zb - lse};
}

void check_mask(const Tensor& logits, const Mask2& mask) {
  if (logits.c() != 2) throw Error("head logits must have two channels");
  if (mask.height != logits.h() || mask.width != logits.w()) throw Error("mask shape does not match head output");
}

}  // namespace

Real classification_loss(const Tensor& logits, int sample, const Mask2& mask, ClassificationLossKind kind, Real* grad) {
  check_mask(logits, mask);
  const std::size_t hw = logits.plane_size();
  const Real* zf = logits.plane(sample, 0);
  const Real* zb = logits.plane(sample, 1);
  for (auto v : mask.data) {
    if (v > 1) throw Error("ground-truth mask is not binary");
  }
  if (kind == ClassificationLossKind::cross_entropy) {
    const Real inv = 1.0 / static_cast<Real>(hw);
    Real loss = 0;
    for (std::size_t k = 0; k < hw; ++k) {
      const auto ls = log_softmax2(zf[k], zb[k]);
      const Real t = mask.data[k];
      loss -= t * ls.log_f + (1 - t) * ls.log_b;
      if (grad != nullptr) {
        grad[k] = (std::exp(ls.log_f) - t) * inv;
        grad[hw + k] = (std::exp(ls.log_b) - (1 - t)) * inv;
      }
    }
    return loss * inv;
  }
  // Soft Dice on the foreground channel.
  constexpr Real eps = 1.0;
  Real inter = 0, sum_p = 0, sum_g = 0;
  std::vector<Real> p(hw);
  for (std::size_t k = 0; k < hw; ++k) {
    p[k] = std::exp(log_softmax2(zf[k], zb[k]).log_f);
    inter += p[k] * mask.data[k];
    sum_p += p[k];
    sum_g += mask.data[k];
  }
  const Real num = 2 * inter + eps;
  const Real den = sum_p + sum_g + eps;
  if (grad != nullptr) {
    for (std::size_t k = 0; k < hw; ++k) {
      const Real dl_dp = -(2 * mask.data[k] * den - num) / (den * den);
      const Real dp_dz = p[k] * (1 - p[k]);
      grad[k] = dl_dp * dp_dz;
      grad[hw + k] = -dl_dp * dp_dz;
    }
  }
  return 1 - num / den;
}

Real distillation_loss(std::span<const Tensor* const> logits, int sample, std::span<const Tensor* const> targets,
                       Real temperature, std::span<Real* const> grads) {
  if (logits.size() != targets.size() || logits.empty()) throw Error("distillation needs matching, non-empty class sets");
  if (!grads.empty() && grads.size() != logits.size()) throw Error("distillation gradient buffers do not match classes");
  if (!(temperature > 0)) throw Error(ErrorKind::config, "distillation temperature must be positive");
  const std::size_t hw = logits.front()->plane_size();
  const Real inv = 1.0 / (static_cast<Real>(hw) * static_cast<Real>(logits.size()));
  Real loss = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const Tensor& z = *logits[j];
    const Tensor& p = *targets[j];
    if (p.h() != z.h() || p.w() != z.w() || p.c() != 2) throw Error("snapshot shape does not match head output");
    const Real* zf = z.plane(sample, 0);
    const Real* zb = z.plane(sample, 1);
    const Real* pf = p.plane(0, 0);
    const Real* pb = p.plane(0, 1);
    Real* g = grads.empty() ? nullptr : grads[j];
    for (std::size_t k = 0; k < hw; ++k) {
      Real tf = pf[k], tb = pb[k];
      if (temperature != 1.0) {
        const Real a = std::pow(tf, 1.0 / temperature), b = std::pow(tb, 1.0 / temperature);
        tf = a / (a + b);
        tb = b / (a + b);
      }
      const auto ls = log_softmax2(zf[k] / temperature, zb[k] / temperature);
      loss -= tf * ls.log_f + tb * ls.log_b;
      if (g != nullptr) {
        g[k] = (std::exp(ls.log_f) - tf) * inv / temperature;
        g[hw + k] = (std::exp(ls.log_b) - tb) * inv / temperature;
      }
    }
  }
  return loss * inv;
}

LossBreakdown total_loss(const ForwardResult& out, std::span<const SampleTargets> targets, const LossOptions& opts) {
  opts.weights.validate();
  const int n = static_cast<int>(targets.size());
  if (n == 0 || out.logits.empty() || out.logits.front().n() != n) throw Error("loss targets do not match the batch");
  const Real alpha = opts.weights.alpha;
  const Tensor& ref = out.logits.front();
  const std::size_t hw = ref.plane_size();
  const Real inv_n = 1.0 / static_cast<Real>(n);

  LossBreakdown r;
  r.classification.assign(n, 0.0);
  r.distillation.assign(n, 0.0);
  r.contribution.assign(n, 0.0);
  for (ClassId id : out.heads) r.dlogits.emplace(id, Tensor(n, 2, ref.h(), ref.w()));

  std::vector<Real> gc(2 * hw), gd;
  for (int i = 0; i < n; ++i) {
    const auto& t = targets[i];
    const bool use_c = t.membership != Membership::exemplar;
    const bool use_d = t.membership != Membership::supervised;
    if (use_c && t.ground_truth.empty()) throw Error("sample without ground truth in a supervised branch");
    if (use_d && t.snapshot.empty()) throw Error(ErrorKind::missing_artifact, "sample without snapshot in a distillation branch");
    const Real wc = t.membership == Membership::incremental ? alpha : 1.0;
    const Real wd = t.membership == Membership::incremental ? 1.0 - alpha : 1.0;

    // L_c averages over supervised heads.
    Real lc = 0;
    if (use_c) {
      const Real share = 1.0 / static_cast<Real>(t.ground_truth.size());
      for (const auto& [c, mask] : t.ground_truth) {
        lc += share * classification_loss(out.logit(c), i, *mask, opts.classification, gc.data());
        Real* dst = r.dlogits.at(c).image(i);
        const Real s = wc * share * inv_n;
        for (std::size_t k = 0; k < 2 * hw; ++k) dst[k] += s * gc[k];
      }
    }
    Real ld = 0;
    if (use_d) {
      std::vector<const Tensor*> z, p;
      std::vector<std::vector<Real>> g(t.snapshot.size(), std::vector<Real>(2 * hw));
      std::vector<Real*> gp;
      for (std::size_t j = 0; j < g.size(); ++j) gp.push_back(g[j].data());
      for (const auto& [c, snap] : t.snapshot) {
        z.push_back(&out.logit(c));
        p.push_back(snap);
      }
      ld = distillation_loss(z, i, p, opts.temperature, gp);
      std::size_t j = 0;
      for (const auto& [c, _] : t.snapshot) {
        Real* dst = r.dlogits.at(c).image(i);
        const Real s = wd * inv_n;
        for (std::size_t k = 0; k < 2 * hw; ++k) dst[k] += s * g[j][k];
        ++j;
      }
    }
    r.classification[i] = use_c ? lc : 0.0;
    r.distillation[i] = use_d ? ld : 0.0;
    switch (t.membership) {
      case Membership::supervised: r.contribution[i] = lc; break;
      case Membership::incremental: r.contribution[i] = alpha * lc + (1 - alpha) * ld; break;
      case Membership::exemplar: r.contribution[i] = ld; break;
    }
    r.total += r.contribution[i];
  }
  r.total *= inv_n;
  return r;
}

}  // namespace incseg
