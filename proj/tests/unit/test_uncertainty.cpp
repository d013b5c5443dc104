#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "incseg/uncertainty.hpp"
#include "support.hpp"

using namespace incseg;

namespace {

const Real kLn2 = std::log(2.0);

McPrediction constant_prediction(const std::vector<Real>& q, int h, int w) {
  McPrediction mc;
  mc.t_mc = 2;
  mc.heads = {ClassId{1}};
  Tensor mean(1, 2, h, w);
  Grid2<Real> u(h, w);
  for (std::size_t k = 0; k < q.size(); ++k) {
    mean.plane(0, 0)[k] = q[k];
    mean.plane(0, 1)[k] = 1 - q[k];
    u.data[k] = binary_entropy(q[k]);
  }
  mc.mean.push_back(mean);
  mc.uncertainty.push_back(u);
  return mc;
}

SegmentationNetwork blob_net(std::uint64_t seed, int size = 16) {
  SegmentationNetwork net(testing::small_config(size), seed);
  net.add_head(ClassId{1}, derive_seed(seed, "h"));
  return net;
}

}  // namespace

TEST_CASE("binary entropy endpoints") {
  CHECK(binary_entropy(0.5) == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK(binary_entropy(0.0) == 0.0);
  CHECK(binary_entropy(1.0) == 0.0);
  CHECK(binary_entropy(0.2) == doctest::Approx(binary_entropy(0.8)).epsilon(1e-15));
}

TEST_CASE("image uncertainty aggregates the per-pixel map") {
  CHECK(image_uncertainty(constant_prediction(std::vector<Real>(16, 0.5), 4, 4), ClassId{1}) == doctest::Approx(kLn2));
  CHECK(image_uncertainty(constant_prediction(std::vector<Real>(16, 1.0), 4, 4), ClassId{1}) == 0.0);
  std::vector<Real> half(16, 0.5);
  std::fill(half.begin() + 8, half.end(), 0.0);
  const auto mc = constant_prediction(half, 4, 4);
  CHECK(image_uncertainty(mc, ClassId{1}) == doctest::Approx(kLn2 / 2).epsilon(1e-15));
  Mask2 fg(4, 4);
  for (int k = 0; k < 8; ++k) fg.data[k] = 1;
  CHECK(image_uncertainty(mc, ClassId{1}, &fg) == doctest::Approx(kLn2));
  CHECK_THROWS_AS(image_uncertainty(mc, ClassId{2}), Error);
}

TEST_CASE("image uncertainty is invariant to pixel permutation") {
  Rng rng(3);
  std::vector<Real> q(64);
  for (auto& v : q) v = rng.uniform();
  const Real a = image_uncertainty(constant_prediction(q, 8, 8), ClassId{1});
  rng.shuffle(q.begin(), q.end());
  CHECK(image_uncertainty(constant_prediction(q, 8, 8), ClassId{1}) == doctest::Approx(a).epsilon(1e-13));
}

TEST_CASE("mc inference: validation, normalization and determinism") {
  const auto net = blob_net(5);
  const auto img = testing::random_image(16, 16, 2);
  const auto a = mc_inference(net, img, 8, 42);
  const auto b = mc_inference(net, img, 8, 42);
  CHECK(a == b);
  CHECK_FALSE(a == mc_inference(net, img, 8, 43));
  CHECK(a.t_mc == 8);
  const auto& m = a.mean_of(ClassId{1});
  for (std::size_t k = 0; k < m.plane_size(); ++k) {
    CHECK(std::abs(m.plane(0, 0)[k] + m.plane(0, 1)[k] - 1) <= 1e-5);
    CHECK(a.uncertainty_of(ClassId{1}).data[k] >= 0);
    CHECK(a.uncertainty_of(ClassId{1}).data[k] == doctest::Approx(binary_entropy(m.plane(0, 0)[k])).epsilon(1e-12));
  }
  CHECK_THROWS_AS(mc_inference(net, img, 1, 1), Error);
  auto cfg = testing::small_config();
  cfg.dropout_rate = 0;
  SegmentationNetwork nodrop(cfg, 1);
  nodrop.add_head(ClassId{1}, 1);
  CHECK_THROWS_AS(mc_inference(nodrop, img, 8, 1), Error);
}

TEST_CASE("saturated constant output gives zero uncertainty") {
  auto net = blob_net(9);
  auto& h = net.head(ClassId{1});
  std::fill(h.weight().value.begin(), h.weight().value.end(), 0.0);
  h.bias().value = {400.0, -400.0};
  const auto mc = mc_inference(net, testing::random_image(16, 16, 1), 4, 7);
  for (Real u : mc.uncertainty_of(ClassId{1}).data) CHECK(u == 0.0);
  CHECK(image_uncertainty(mc, ClassId{1}) == 0.0);
}

TEST_CASE("most certain set equals an independent sort-and-take oracle") {
  const auto net = blob_net(11);
  auto d = testing::blob_dataset(12, 16, 4);
  // Two samples without foreground and one without annotation are never candidates.
  std::fill(d.samples[2].masks.at(ClassId{1}).data.begin(), d.samples[2].masks.at(ClassId{1}).data.end(), 0);
  std::fill(d.samples[7].masks.at(ClassId{1}).data.begin(), d.samples[7].masks.at(ClassId{1}).data.end(), 0);
  d.samples[9].masks.clear();
  McOptions o;
  o.t_mc = 6;
  o.seed = 99;
  std::vector<std::pair<Real, Provenance>> oracle;
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    if (i == 2 || i == 7 || i == 9) continue;
    const auto mc = mc_inference(net, d.samples[i].image, 6, sample_seed(99, d.samples[i].provenance));
    oracle.emplace_back(image_uncertainty(mc, ClassId{1}), d.samples[i].provenance);
  }
  std::sort(oracle.begin(), oracle.end());
  const auto set = most_certain_set(net, d, ClassId{1}, 4, o);
  REQUIRE(set.members.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(set.members[i].provenance == oracle[i].second);
    CHECK(set.members[i].uncertainty == oracle[i].first);
    CHECK(d.samples[set.members[i].sample_index].provenance == set.members[i].provenance);
  }
  const auto all = most_certain_set(net, d, ClassId{1}, 50, o);
  CHECK(all.members.size() == oracle.size());
  o.threads = 3;
  CHECK(most_certain_set(net, d, ClassId{1}, 4, o) == set);
}

TEST_CASE("most certain set: ties by provenance and error when the class is absent") {
  auto net = blob_net(13);
  auto& h = net.head(ClassId{1});
  std::fill(h.weight().value.begin(), h.weight().value.end(), 0.0);
  const auto d = testing::blob_dataset(5, 16, 8);
  McOptions o;
  o.t_mc = 3;
  const auto s = most_certain_set(net, d, ClassId{1}, 3, o);
  REQUIRE(s.members.size() == 3);
  CHECK(s.members[0].provenance < s.members[1].provenance);
  CHECK(s.members[1].provenance < s.members[2].provenance);
  CHECK_THROWS_AS(most_certain_set(net, d, ClassId{2}, 3, o), Error);
  auto none = d;
  for (auto& x : none.samples) x.masks.clear();
  CHECK_THROWS_AS(most_certain_set(net, none, ClassId{1}, 3, o), Error);
}

TEST_CASE("selected provenances agree between t_MC 16 and 29 on the toy fixture") {
  const auto net = blob_net(17);
  const auto d = testing::blob_dataset(10, 16, 12);
  McOptions o;
  o.seed = 5;
  auto members = [&](int t) {
    o.t_mc = t;
    std::set<Provenance> s;
    for (const auto& m : most_certain_set(net, d, ClassId{1}, 4, o).members) s.insert(m.provenance);
    return s;
  };
  members(8);
  CHECK(members(16) == members(29));
}
