#include <doctest.h>

#include <fstream>

#include "incseg/network.hpp"
#include "support.hpp"

using namespace incseg;
using testing::max_abs_diff;

namespace {

Tensor probe_batch(const NetworkConfig& c, int n, std::uint64_t seed) {
  Tensor x(n, 1, c.input_height, c.input_width);
  Rng rng(seed);
  for (auto& v : x.values()) v = rng.uniform(-1.0, 1.0);
  return x;
}

SegmentationNetwork trained_like(const NetworkConfig& c, std::uint64_t seed) {
  SegmentationNetwork net(c, seed);
  net.add_head(ClassId{1}, derive_seed(seed, "head"));
  // A few train-mode passes move the running statistics away from their defaults.
  Rng rng(seed);
  for (int i = 0; i < 3; ++i) {
    Tape tape;
    net.forward_train(probe_batch(c, 4, seed + i), rng, tape);
  }
  return net;
}

}  // namespace

TEST_CASE("width schedule doubles per level") {
  NetworkConfig c;
  c.levels = 4;
  c.base_filters = 64;
  c.input_height = c.input_width = 16;
  for (int l = 0; l < 4; ++l) CHECK(c.channels(l) == 64 << l);
  CHECK(c.channels(3) == 512);
  SegmentationNetwork net(c, 1);
  net.add_head(ClassId{1}, 2);
  const auto out = net.forward(probe_batch(c, 1, 3), Mode::eval);
  CHECK(out.abstraction.c() == 512);
  CHECK(out.abstraction.h() == 2);
  CHECK(out.abstraction.w() == 2);
  REQUIRE(out.encoder_features.size() == 4);
  for (int l = 0; l < 4; ++l) CHECK(out.encoder_features[l].c() == 64 << l);
}

TEST_CASE("config validation") {
  NetworkConfig c = testing::toy_config();
  CHECK_NOTHROW(c.validate());
  c.input_height = 7;
  CHECK_THROWS_AS(c.validate(), Error);
  c = testing::toy_config();
  c.levels = 1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = testing::toy_config();
  c.dropout_rate = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(NetworkConfig::from_json(testing::small_config().to_json()) == testing::small_config());
}

TEST_CASE("toy network has 77 parameters with one head") {
  SegmentationNetwork net(testing::toy_config(), 5);
  net.add_head(ClassId{1}, 6);
  // conv 9 + 18 + 18 + 18, batch-norm 2 * (1 + 2 + 1 + 1), head 2 * 1 weights + 2 biases
  CHECK(net.parameter_count() == 63 + 10 + 4);
}

TEST_CASE("per-head maps are two-channel softmax of input size") {
  const auto c = testing::small_config();
  SegmentationNetwork net(c, 1);
  net.add_head(ClassId{1}, 2);
  net.add_head(ClassId{2}, 3);
  const auto x = probe_batch(c, 3, 4);
  for (Mode m : {Mode::eval, Mode::mc}) {
    Rng rng(9);
    const auto out = net.forward(x, m, &rng);
    REQUIRE(out.probabilities.size() == 2);
    for (const auto& p : out.probabilities) {
      CHECK(p.n() == 3);
      CHECK(p.c() == 2);
      CHECK(p.h() == c.input_height);
      CHECK(p.w() == c.input_width);
      for (int i = 0; i < 3; ++i) {
        for (std::size_t k = 0; k < p.plane_size(); ++k) {
          CHECK(std::abs(p.plane(i, 0)[k] + p.plane(i, 1)[k] - 1.0) <= 1e-6);
        }
      }
    }
  }
}

TEST_CASE("eval mode is deterministic, mc mode depends only on the generator state") {
  const auto c = testing::small_config();
  const auto net = trained_like(c, 11);
  const auto x = probe_batch(c, 2, 5);
  CHECK(net.forward(x, Mode::eval).probs(ClassId{1}) == net.forward(x, Mode::eval).probs(ClassId{1}));
  Rng a(1), b(1), d(2);
  const auto pa = net.forward(x, Mode::mc, &a).probs(ClassId{1});
  const auto pb = net.forward(x, Mode::mc, &b).probs(ClassId{1});
  const auto pd = net.forward(x, Mode::mc, &d).probs(ClassId{1});
  CHECK(pa == pb);
  CHECK(max_abs_diff(pa, pd) > 0);
  CHECK_THROWS_AS(net.forward(x, Mode::mc, nullptr), Error);
}

TEST_CASE("forward rejects a wrong shape and an empty head set") {
  const auto c = testing::small_config();
  SegmentationNetwork net(c, 1);
  CHECK_THROWS_AS(net.forward(probe_batch(c, 1, 1), Mode::eval), Error);
  net.add_head(ClassId{1}, 2);
  CHECK_THROWS_AS(net.forward(Tensor(1, 1, 8, 16), Mode::eval), Error);
}

TEST_CASE("add_head preserves old outputs exactly and rejects duplicates") {
  const auto c = testing::small_config();
  const auto before = trained_like(c, 21);
  auto grown = before;
  grown.add_head(ClassId{2}, 99);
  CHECK(grown.head_ids() == std::vector<ClassId>{ClassId{1}, ClassId{2}});
  const auto x = probe_batch(c, 10, 8);
  CHECK(max_abs_diff(before.forward(x, Mode::eval).probs(ClassId{1}), grown.forward(x, Mode::eval).probs(ClassId{1})) == 0.0);
  CHECK_THROWS_AS(grown.add_head(ClassId{1}, 3), Error);
}

TEST_CASE("heads are independent") {
  const auto c = testing::small_config();
  auto net = trained_like(c, 31);
  net.add_head(ClassId{2}, 4);
  const auto x = probe_batch(c, 2, 9);
  const auto a = net.forward(x, Mode::eval).probs(ClassId{1});
  auto& h = net.head(ClassId{2});
  std::fill(h.weight().value.begin(), h.weight().value.end(), 0.0);
  std::fill(h.bias().value.begin(), h.bias().value.end(), 0.0);
  CHECK(net.forward(x, Mode::eval).probs(ClassId{1}) == a);
}

TEST_CASE("new heads are seeded reproducibly") {
  const auto c = testing::small_config();
  SegmentationNetwork a(c, 1), b(c, 1);
  a.add_head(ClassId{1}, 77);
  b.add_head(ClassId{1}, 77);
  CHECK(a.head(ClassId{1}).weight().value == b.head(ClassId{1}).weight().value);
  CHECK(a.head_seeds().at(ClassId{1}) == 77);
  // fan-in uniform bound for a 1x1 conv from base_filters channels
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(c.base_filters));
  for (Real w : a.head(ClassId{1}).weight().value) CHECK(std::abs(w) <= bound);
}

TEST_CASE("checkpoint round-trip is bit-exact; truncated files are rejected") {
  const auto dir = testing::temp_dir("network");
  const auto c = testing::small_config();
  Checkpoint ck;
  ck.network = trained_like(c, 41);
  ck.registry.add(ClassId{1}, "A", 0);
  ck.metadata["note"] = "x";
  save_checkpoint(dir / "a.ckpt", ck);
  const auto back = load_checkpoint(dir / "a.ckpt");
  const auto x = probe_batch(c, 3, 1);
  CHECK(max_abs_diff(back.network.forward(x, Mode::eval).probs(ClassId{1}), ck.network.forward(x, Mode::eval).probs(ClassId{1})) == 0.0);
  CHECK(parameter_hash(back.network) == parameter_hash(ck.network));
  CHECK(back.registry == ck.registry);
  CHECK(back.network.config() == c);
  CHECK(back.network.head_seeds() == ck.network.head_seeds());

  const auto bytes = read_text_file(dir / "a.ckpt");
  write_text_file(dir / "t.ckpt", std::string_view(bytes).substr(0, bytes.size() - 9));
  CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);

  SegmentationNetwork other(testing::small_config(32), 1);
  other.add_head(ClassId{1}, 1);
  CHECK_THROWS_AS(load_parameters_into(dir / "a.ckpt", other), Error);
  SegmentationNetwork same(c, 5);
  same.add_head(ClassId{1}, 6);
  load_parameters_into(dir / "a.ckpt", same);
  CHECK(parameter_hash(same) == parameter_hash(ck.network));
}

TEST_CASE("train forward with dropout differs from eval; backward fills gradients") {
  const auto c = testing::small_config();
  auto net = trained_like(c, 51);
  const auto x = probe_batch(c, 2, 2);
  Rng rng(3);
  Tape tape;
  const auto out = net.forward_train(x, rng, tape);
  net.zero_grad();
  std::map<ClassId, Tensor> d;
  d[ClassId{1}] = Tensor(2, 2, c.input_height, c.input_width, 0.01);
  net.backward(tape, d);
  Real norm = 0;
  for (const Param* p : std::as_const(net).parameters()) {
    for (Real g : p->grad) norm += g * g;
  }
  CHECK(norm > 0);
  CHECK(max_abs_diff(out.probs(ClassId{1}), net.forward(x, Mode::eval).probs(ClassId{1})) > 0);
}
