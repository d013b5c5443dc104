#include <doctest.h>

#include <cmath>

#include "incseg/metrics.hpp"
#include "support.hpp"

using namespace incseg;

namespace {

Mask3 random_mask(int h, int w, int d, double p, std::uint64_t seed) {
  Rng rng(seed);
  Mask3 m(h, w, d);
  for (auto& v : m.data) v = rng.uniform() < p ? 1 : 0;
  return m;
}

bool is_surface(const Mask3& m, int y, int x, int z) {
  if (!m(y, x, z)) return false;
  const int dy[] = {1, -1, 0, 0, 0, 0}, dx[] = {0, 0, 1, -1, 0, 0}, dz[] = {0, 0, 0, 0, 1, -1};
  for (int k = 0; k < 6; ++k) {
    const int yy = y + dy[k], xx = x + dx[k], zz = z + dz[k];
    if (yy < 0 || xx < 0 || zz < 0 || yy >= m.height || xx >= m.width || zz >= m.depth) return true;
    if (!m(yy, xx, zz)) return true;
  }
  return false;
}

std::optional<Real> brute_assd(const Mask3& p, const Mask3& g, const std::array<double, 3>& sp) {
  std::vector<std::array<double, 3>> sp_pts, sg_pts;
  for (int z = 0; z < p.depth; ++z) {
    for (int y = 0; y < p.height; ++y) {
      for (int x = 0; x < p.width; ++x) {
        if (is_surface(p, y, x, z)) sp_pts.push_back({y * sp[0], x * sp[1], z * sp[2]});
        if (is_surface(g, y, x, z)) sg_pts.push_back({y * sp[0], x * sp[1], z * sp[2]});
      }
    }
  }
  if (sp_pts.empty() || sg_pts.empty()) return std::nullopt;
  auto directed = [](const auto& a, const auto& b) {
    Real sum = 0;
    for (const auto& u : a) {
      Real best = 1e300;
      for (const auto& v : b) {
        best = std::min(best, std::hypot(u[0] - v[0], u[1] - v[1], u[2] - v[2]));
      }
      sum += best;
    }
    return sum / static_cast<Real>(a.size());
  };
  return 0.5 * (directed(sp_pts, sg_pts) + directed(sg_pts, sp_pts));
}

}  // namespace

TEST_CASE("dice on hand-counted masks") {
  Mask2 a(4, 4), b(4, 4);
  for (int i = 0; i < 8; ++i) a.data[i] = 1;
  for (int i = 4; i < 12; ++i) b.data[i] = 1;
  CHECK(dice(a, b) == 0.5);
  CHECK(dice(b, a) == 0.5);
  CHECK(dice(a, a) == 1.0);
  Mask2 c(4, 4);
  for (int i = 12; i < 16; ++i) c.data[i] = 1;
  CHECK(dice(a, c) == 0.0);
  CHECK(dice(Mask2(4, 4), Mask2(4, 4)) == 1.0);
  CHECK_THROWS_AS(dice(a, Mask2(4, 5)), Error);
  Mask2 nb = a;
  nb.data[0] = 3;
  CHECK_THROWS_AS(dice(nb, a), Error);
}

TEST_CASE("surface of a solid cube is its shell") {
  Mask3 m(5, 5, 5);
  for (int z = 1; z < 4; ++z) {
    for (int y = 1; y < 4; ++y) {
      for (int x = 1; x < 4; ++x) m(y, x, z) = 1;
    }
  }
  const auto s = surface(m);
  CHECK(count_nonzero(s.data) == 26);
  CHECK(s(2, 2, 2) == 0);
  const auto full = surface(Mask3(3, 3, 3, 1));
  CHECK(count_nonzero(full.data) == 26);
}

TEST_CASE("assd hand geometry: single voxels three apart") {
  Mask3 p(1, 8, 1), g(1, 8, 1);
  p(0, 1, 0) = 1;
  g(0, 4, 0) = 1;
  CHECK(std::abs(*assd(p, g, {1.0, 1.0, 1.0}) - 3.0) <= 1e-6);
  CHECK(std::abs(*assd(p, g, {1.0, 0.91, 1.0}) - 2.73) <= 1e-6);
  CHECK(*assd(p, p, {1.0, 0.91, 3.0}) == 0.0);
  Mask2 p2(8, 1), g2(8, 1);
  p2(1, 0) = 1;
  g2(4, 0) = 1;
  CHECK(std::abs(*assd(p2, g2, {0.91, 1.0}) - 2.73) <= 1e-6);
  CHECK_FALSE(assd(p, Mask3(1, 8, 1), {1.0, 1.0, 1.0}).has_value());
  CHECK_FALSE(assd(Mask3(1, 8, 1), Mask3(1, 8, 1), {1.0, 1.0, 1.0}).has_value());
}

TEST_CASE("distance transform equals brute force with anisotropic spacing") {
  const std::array<double, 3> sp{0.91, 0.91, 3.0};
  const auto seeds = random_mask(7, 6, 5, 0.05, 3);
  const auto d = distance_transform(seeds, sp);
  for (int z = 0; z < 5; ++z) {
    for (int y = 0; y < 7; ++y) {
      for (int x = 0; x < 6; ++x) {
        Real best = 1e300;
        for (int zz = 0; zz < 5; ++zz) {
          for (int yy = 0; yy < 7; ++yy) {
            for (int xx = 0; xx < 6; ++xx) {
              if (seeds(yy, xx, zz)) best = std::min(best, std::hypot((y - yy) * sp[0], (x - xx) * sp[1], (z - zz) * sp[2]));
            }
          }
        }
        CHECK(d[seeds.index(y, x, z)] == doctest::Approx(best).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("assd equals the brute-force surface oracle on random masks") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const auto p = random_mask(9, 8, 6, 0.3, 10 + s), g = random_mask(9, 8, 6, 0.3, 20 + s);
    const std::array<double, 3> sp{0.91, 1.2, 3.0};
    const auto a = assd(p, g, sp);
    const auto b = brute_assd(p, g, sp);
    REQUIRE(a.has_value());
    CHECK(*a == doctest::Approx(*b).epsilon(1e-10));
    CHECK(*assd(g, p, sp) == doctest::Approx(*a).epsilon(1e-12));
  }
}

TEST_CASE("assd scales with spacing and is translation invariant") {
  Mask3 p(12, 12, 6), g(12, 12, 6);
  for (int z = 1; z < 4; ++z) {
    for (int y = 2; y < 6; ++y) {
      for (int x = 2; x < 5; ++x) p(y, x, z) = 1;
    }
    for (int y = 3; y < 7; ++y) {
      for (int x = 2; x < 7; ++x) g(y, x, z) = 1;
    }
  }
  const std::array<double, 3> sp{0.91, 0.91, 3.0};
  const Real a = *assd(p, g, sp);
  CHECK(*assd(p, g, {1.82, 1.82, 6.0}) == doctest::Approx(2 * a).epsilon(1e-12));
  Mask3 pt(12, 12, 6), gt(12, 12, 6);
  for (int z = 0; z < 5; ++z) {
    for (int y = 0; y < 10; ++y) {
      for (int x = 0; x < 9; ++x) {
        pt(y + 2, x + 3, z + 1) = p(y, x, z);
        gt(y + 2, x + 3, z + 1) = g(y, x, z);
      }
    }
  }
  CHECK(*assd(pt, gt, sp) == doctest::Approx(a).epsilon(1e-12));
  CHECK(dice(pt, gt) == doctest::Approx(dice(p, g)).epsilon(1e-15));
}

TEST_CASE("foreground threshold is strict") {
  Tensor t(1, 2, 1, 3);
  t.plane(0, 0)[0] = 0.5;
  t.plane(0, 0)[1] = 0.5000001;
  t.plane(0, 0)[2] = 0.2;
  const auto m = threshold_foreground(t);
  CHECK(m.data == std::vector<std::uint8_t>{0, 1, 0});
}

TEST_CASE("evaluate_volumes scores restacked predictions in 3D") {
  SegmentationNetwork net(testing::small_config(8), 1);
  net.add_head(ClassId{1}, 2);
  auto& h = net.head(ClassId{1});
  std::fill(h.weight().value.begin(), h.weight().value.end(), 0.0);
  h.bias().value = {5.0, -5.0};  // everything foreground
  AnnotatedVolume v;
  v.volume.volume_id = "vol00";
  v.volume.voxels = Grid3<float>(8, 8, 3, 0.1f);
  v.volume.spacing = {0.91, 0.91, 3.0};
  v.annotations.masks[ClassId{1}] = random_mask(8, 8, 3, 0.25, 4);
  v.annotations.masks[ClassId{2}] = random_mask(8, 8, 3, 0.25, 5);
  const auto scores = evaluate_volumes(net, {v, v}, 2);
  REQUIRE(scores.size() == 2);
  const Real g = static_cast<Real>(count_nonzero(v.annotations.masks.at(ClassId{1}).data));
  CHECK(scores[0].class_id == ClassId{1});
  CHECK(scores[0].dice == doctest::Approx(2 * g / (192 + g)).epsilon(1e-12));
  CHECK(*scores[0].assd_mm == doctest::Approx(*assd(Mask3(8, 8, 3, 1), v.annotations.masks.at(ClassId{1}), v.volume.spacing)));
  const auto rep = aggregate(scores, "m", 1);
  REQUIRE(rep.rows.size() == 1);
  CHECK(rep.rows[0].n_volumes == 2);
  CHECK(rep.rows[0].dice_percent == doctest::Approx(100 * scores[0].dice));
}

TEST_CASE("evaluation report CSV round-trips, including undefined ASSD") {
  EvalReport r;
  r.rows.push_back({"finetune", 1, ClassId{1}, 0.25, std::nullopt, 1});
  r.rows.push_back({"CoRiSeg", 1, ClassId{2}, 96.125, 0.5, 1});
  const auto csv = r.to_csv();
  CHECK(csv.rfind("method,case,class,dice_percent,assd_mm,n_volumes\n", 0) == 0);
  CHECK(csv.find("NA") != std::string::npos);
  CHECK(EvalReport::from_csv(csv) == r);
  CHECK(r.row("CoRiSeg", ClassId{2}).assd_mm == 0.5);
  CHECK_FALSE(r.find("LwfSeg", ClassId{1}).has_value());
  EvalReport bad = r;
  bad.rows[0].dice_percent = 101;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(EvalReport::from_csv("a,b\n1,2\n"), Error);
}

TEST_CASE("retention report deltas and ranking") {
  EvalReport before, after;
  before.rows.push_back({"initial", 1, ClassId{1}, 95, 0.2, 1});
  after.rows.push_back({"finetune", 1, ClassId{1}, 1, 9.0, 1});
  after.rows.push_back({"finetune", 1, ClassId{2}, 80, 1.0, 1});
  after.rows.push_back({"CoRiSeg", 1, ClassId{1}, 93, 0.3, 1});
  const auto r = retention_report(before, after, {ClassId{1}});
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[0].delta_percent == doctest::Approx(-94));
  CHECK(r.rows[1].delta_percent == doctest::Approx(-2));
  REQUIRE(r.ranking.size() == 2);
  CHECK(r.ranking[0].first == "CoRiSeg");
  CHECK(r.to_csv().rfind("method,class,dice_before_percent,dice_after_percent,delta_percent\n", 0) == 0);
  EvalReport same;
  same.rows.push_back({"x", 1, ClassId{1}, 95, 0.2, 1});
  for (const auto& row : retention_report(before, same, {ClassId{1}}).rows) CHECK(row.delta_percent == 0.0);
  CHECK_THROWS_AS(retention_report(before, after, {ClassId{3}}), Error);
}
