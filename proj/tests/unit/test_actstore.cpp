#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <fstream>

#include "doctest.h"
#include "tabprobe/actstore.hpp"
#include "test_util.hpp"

using namespace tabprobe;
using namespace tabprobe::actstore;

namespace {

ActivationRecord make_record(const std::string& run_id, std::uint64_t fit, int layer,
                             TokenSel sel, int n, int t, int k, float fill) {
  ActivationRecord r;
  r.run_id = run_id;
  r.fit_digest = fit;
  r.layer = layer;
  r.token_sel = sel;
  for (int i = 0; i < t; ++i) r.token_roles.push_back(i + 1 == t ? "label" : "feature");
  r.row_roles.assign(n, "test");
  r.n = n;
  r.t = t;
  r.k = k;
  r.values.resize(static_cast<std::size_t>(n) * t * k);
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    r.values[i] = fill + 0.25f * static_cast<float>(i % 97);
  }
  return r;
}

}  // namespace

TEST_CASE("round trip is bit-identical") {
  testutil::TempDir tmp("actstore");
  const ActivationRecord rec = make_record("r1", 0xabcdef01, 5, TokenSel::all, 100, 4, 64, 0.5f);
  std::string key;
  {
    RunWriter writer(tmp.path(), "r1", "{\"backend\":\"toy\"}");
    key = writer.put(rec);
    writer.finalize();
  }
  CHECK(key == record_key(0xabcdef01, 5, TokenSel::all));

  RunReader reader(tmp.path(), "r1");
  const ActivationRecord back = reader.get(key);
  CHECK(back.values == rec.values);
  CHECK(back.layer == 5);
  CHECK(back.n == 100);
  CHECK(back.t == 4);
  CHECK(back.k == 64);
  CHECK(back.token_roles == rec.token_roles);
  CHECK(back.row_roles == rec.row_roles);
}

TEST_CASE("degenerate shapes round trip") {
  testutil::TempDir tmp("actstore");
  const ActivationRecord rec = make_record("r1", 1, 0, TokenSel::answer_only, 1, 1, 1, -3.25f);
  RunWriter writer(tmp.path(), "r1", "{}");
  const std::string key = writer.put(rec);
  writer.finalize();
  RunReader reader(tmp.path(), "r1");
  CHECK(reader.get(key).values == rec.values);
}

TEST_CASE("missing key raises not-found") {
  testutil::TempDir tmp("actstore");
  {
    RunWriter writer(tmp.path(), "r1", "{}");
    writer.put(make_record("r1", 2, 1, TokenSel::all, 4, 2, 8, 0.0f));
  }
  RunReader reader(tmp.path(), "r1");
  CHECK_THROWS_AS(reader.get("0000000000000002/L09_all"), NotFoundError);
  CHECK_THROWS_AS(RunReader(tmp.path(), "nope"), NotFoundError);
}

TEST_CASE("flipping any payload byte is detected") {
  testutil::TempDir tmp("actstore");
  std::string key;
  {
    RunWriter writer(tmp.path(), "r1", "{}");
    key = writer.put(make_record("r1", 3, 2, TokenSel::all, 8, 3, 16, 1.0f));
  }
  const auto payload_path = tmp.path() / "r1" / (key + ".f32");
  {
    std::fstream f(payload_path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(37);
    char b = 0;
    f.read(&b, 1);
    b = static_cast<char>(b ^ 0x10);
    f.seekp(37);
    f.write(&b, 1);
  }
  RunReader reader(tmp.path(), "r1");
  CHECK_THROWS_AS(reader.get(key), CorruptionError);
}

TEST_CASE("manifest lists exactly the stored keys in lexicographic order") {
  testutil::TempDir tmp("actstore");
  {
    RunWriter writer(tmp.path(), "r1", "{\"backend\":\"toy\"}");
    writer.put(make_record("r1", 0xbb, 2, TokenSel::all, 2, 2, 4, 0.0f));
    writer.put(make_record("r1", 0xaa, 10, TokenSel::answer_only, 2, 1, 4, 0.0f));
    writer.put(make_record("r1", 0xaa, 3, TokenSel::all, 2, 2, 4, 0.0f));
    writer.record_dataset(0xaa, 0x111);
    writer.record_dataset(0xbb, 0x222);
    writer.finalize();
  }
  RunReader reader(tmp.path(), "r1");
  const Manifest m = reader.manifest();
  REQUIRE(m.keys.size() == 3);
  CHECK(m.keys[0] == record_key(0xaa, 3, TokenSel::all));
  CHECK(m.keys[1] == record_key(0xaa, 10, TokenSel::answer_only));
  CHECK(m.keys[2] == record_key(0xbb, 2, TokenSel::all));
  CHECK(m.keys == reader.list());
  CHECK(reader.list(hex64(0xaa)).size() == 2);
  REQUIRE(m.fit_to_spec.size() == 2);
  CHECK(m.fit_to_spec[0].second == 0x111);
}

TEST_CASE("one writer per run directory") {
  testutil::TempDir tmp("actstore");
  RunWriter writer(tmp.path(), "r1", "{}");
  CHECK_THROWS_AS(RunWriter(tmp.path(), "r1", "{}"), Error);
}

TEST_CASE("records can be re-put idempotently (resume)") {
  testutil::TempDir tmp("actstore");
  const ActivationRecord rec = make_record("r1", 9, 1, TokenSel::all, 3, 2, 4, 2.0f);
  {
    RunWriter writer(tmp.path(), "r1", "{}");
    writer.put(rec);
  }
  {
    RunWriter writer(tmp.path(), "r1", "{}");
    CHECK(writer.contains(record_key(9, 1, TokenSel::all)));
    writer.put(rec);
    writer.finalize();
  }
  RunReader reader(tmp.path(), "r1");
  CHECK(reader.list().size() == 1);
}
