#include "incseg/uncertainty.hpp"

#include <algorithm>
#include <cmath>

#include "incseg/parallel.hpp"

namespace incseg {

std::string to_string(UncertaintyFunctional f) { return f == UncertaintyFunctional::entropy ? "entropy" : "variance"; }

UncertaintyFunctional parse_uncertainty_functional(const std::string& s) {
  if (s == "entropy") return UncertaintyFunctional::entropy;
  if (s == "variance") return UncertaintyFunctional::variance;
  throw Error(ErrorKind::config, "unknown uncertainty functional '" + s + "'");
}

std::string to_string(UncertaintyAggregation a) {
  return a == UncertaintyAggregation::all_pixels ? "all_pixels" : "foreground_only";
}

UncertaintyAggregation parse_uncertainty_aggregation(const std::string& s) {
  if (s == "all_pixels") return UncertaintyAggregation::all_pixels;
  if (s == "foreground_only") return UncertaintyAggregation::foreground_only;
  throw Error(ErrorKind::config, "unknown uncertainty aggregation '" + s + "'");
}

const Tensor& McPrediction::mean_of(ClassId c) const {
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i] == c) return mean[i];
  }
  throw Error("MC prediction has no head for class " + to_string(c));
}

const Grid2<Real>& McPrediction::uncertainty_of(ClassId c) const {
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i] == c) return uncertainty[i];
  }
  throw Error("MC prediction has no head for class " + to_string(c));
}

Real binary_entropy(Real q) {
  Real h = 0;
  if (q > 0) h -= q * std::log(q);
  if (q < 1) h -= (1 - q) * std::log(1 - q);
  return h;
}

McPrediction mc_inference(const SegmentationNetwork& net, const Grid2<float>& image, int t_mc, std::uint64_t seed,
                          UncertaintyFunctional functional) {
  if (!(net.config().dropout_rate > 0)) throw Error("MC inference needs a network with dropout_rate > 0");
  if (t_mc < 2) throw Error("MC inference needs t_mc >= 2");
  const Tensor x = tensor_from_image(image);
  Rng rng(seed);
  McPrediction mc;
  mc.t_mc = t_mc;
  mc.heads = net.head_ids();
  const std::size_t n_heads = mc.heads.size();
  std::vector<Tensor> sum(n_heads, Tensor(1, 2, image.height, image.width));
  std::vector<std::vector<Real>> sum_sq(n_heads, std::vector<Real>(x.plane_size(), 0.0));
  for (int pass = 0; pass < t_mc; ++pass) {
    const auto out = net.forward(x, Mode::mc, &rng);
    for (std::size_t h = 0; h < n_heads; ++h) {
      auto& acc = sum[h].values();
      const auto& p = out.probabilities[h].values();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += p[k];
      const Real* f = out.probabilities[h].plane(0, 0);
      for (std::size_t k = 0; k < sum_sq[h].size(); ++k) sum_sq[h][k] += f[k] * f[k];
    }
  }
  const Real inv = 1.0 / t_mc;
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (auto& v : sum[h].values()) v *= inv;
    Grid2<Real> u(image.height, image.width);
    const Real* f = sum[h].plane(0, 0);
    for (std::size_t k = 0; k < u.size(); ++k) {
      if (functional == UncertaintyFunctional::entropy) {
        u.data[k] = binary_entropy(f[k]);
      } else {
        u.data[k] = std::max<Real>(0.0, sum_sq[h][k] * inv - f[k] * f[k]);
      }
    }
    mc.mean.push_back(std::move(sum[h]));
    mc.uncertainty.push_back(std::move(u));
  }
  return mc;
}

Real image_uncertainty(const McPrediction& mc, ClassId c, const Mask2* foreground) {
  const auto& u = mc.uncertainty_of(c);
  if (foreground == nullptr) {
    Real s = 0;
    for (Real v : u.data) s += v;
    return s / static_cast<Real>(u.size());
  }
  if (!foreground->same_shape(u)) throw Error("foreground mask does not match uncertainty map");
  Real s = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    if (foreground->data[k] != 0) {
      s += u.data[k];
      ++n;
    }
  }
  return n == 0 ? 0.0 : s / static_cast<Real>(n);
}

std::uint64_t sample_seed(std::uint64_t master, const Provenance& p) { return derive_seed(master, to_string(p)); }

CertaintySet most_certain_set(const SegmentationNetwork& net, const LabeledDataset& dataset, ClassId c, int k_c,
                              const McOptions& options) {
  if (k_c < 1) throw Error(ErrorKind::config, "k_c must be >= 1");
  if (!net.has_head(c)) throw Error("network has no head for class " + to_string(c));
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    if (dataset.samples[i].has_foreground(c)) candidates.push_back(i);
  }
  if (candidates.empty()) {
    throw Error("no sample annotated with class " + to_string(c) + " (with foreground) to rank by certainty");
  }
  std::vector<CertaintyEntry> entries(candidates.size());
  parallel_for(candidates.size(), options.threads, [&](std::size_t k) {
    const auto& s = dataset.samples[candidates[k]];
    const auto mc = mc_inference(net, s.image, options.t_mc, sample_seed(options.seed, s.provenance), options.functional);
    const Mask2* fg = options.aggregation == UncertaintyAggregation::foreground_only ? &s.masks.at(c) : nullptr;
    entries[k] = {s.provenance, candidates[k], image_uncertainty(mc, c, fg)};
  });
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.uncertainty != b.uncertainty) return a.uncertainty < b.uncertainty;
    return a.provenance < b.provenance;
  });
  if (static_cast<int>(entries.size()) > k_c) entries.resize(k_c);
  return {c, k_c, std::move(entries)};
}

}  // namespace incseg
