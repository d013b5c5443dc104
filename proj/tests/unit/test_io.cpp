#include <doctest.h>

#include "incseg/io.hpp"
#include "incseg/rng.hpp"
#include "support.hpp"

using namespace incseg;

TEST_CASE("sha256 matches the published test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  Sha256 h;
  h.update("a").update("bc");
  CHECK(h.hex_digest() == sha256_hex("abc"));
}

TEST_CASE("raw arrays round-trip bit-exactly and reject wrong sizes") {
  const auto dir = testing::temp_dir("io");
  std::vector<double> v{0.1, -2.5, 1e-300, 3.0};
  write_raw<double>(dir / "a.f64", v);
  CHECK(read_raw<double>(dir / "a.f64", 4) == v);
  CHECK(sha256_file(dir / "a.f64") == sha256_hex(read_text_file(dir / "a.f64")));
  CHECK_THROWS_AS(read_raw<double>(dir / "a.f64", 5), Error);
}

TEST_CASE("missing and malformed files raise categorized errors") {
  const auto dir = testing::temp_dir("io_err");
  try {
    read_text_file(dir / "nope.txt");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::missing_artifact);
  }
  write_text_file(dir / "bad.json", "{not json");
  CHECK_THROWS_AS(read_json_file(dir / "bad.json"), Error);
  write_json_file(dir / "ok.json", json{{"a", 1}});
  CHECK(read_json_file(dir / "ok.json").at("a") == 1);
}

TEST_CASE("derived seeds are deterministic and label-sensitive") {
  CHECK(derive_seed(7, "body") == derive_seed(7, "body"));
  CHECK(derive_seed(7, "body") != derive_seed(7, "head:1"));
  CHECK(derive_seed(7, "body") != derive_seed(8, "body"));
  Rng a(3), b(3);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    const int k = r.uniform_int(2, 4);
    CHECK(k >= 2);
    CHECK(k <= 4);
  }
}
