#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "xmd/embedding.hpp"

using namespace xmd;
namespace fs = std::filesystem;

namespace {
Embedding make(std::initializer_list<float> vals) {
  VectorXf v(static_cast<Eigen::Index>(vals.size()));
  int i = 0;
  for (float x : vals) v[i++] = x;
  return Embedding{v, "test"};
}

fs::path temp_file(const char* name) { return fs::temp_directory_path() / name; }
}  // namespace

TEST_CASE("normalize: analytic case, identity, zero vector") {
  const Embedding n = normalize(make({3.0f, 4.0f}));
  CHECK(n.values[0] == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(n.values[1] == doctest::Approx(0.8).epsilon(1e-6));
  CHECK(std::abs(l2_norm(n) - 1.0) < 1e-6);

  const Embedding unit = make({1.0f, 0.0f, 0.0f});
  const Embedding same = normalize(unit);
  CHECK((same.values.array() == unit.values.array()).all());

  CHECK_THROWS_AS(normalize(make({0.0f, 0.0f})), std::invalid_argument);
}

TEST_CASE("cosine is invariant to normalization") {
  MockHashProvider provider(16, 3);
  const Embedding a = provider.embed("item-a");
  const Embedding b = provider.embed("item-b");
  CHECK(cosine(a, b) == doctest::Approx(cosine(normalize(a), normalize(b))).epsilon(1e-9));
}

TEST_CASE("mock-hash backend: deterministic, seed-sensitive, unit norm") {
  MockHashProvider p1(32, 7);
  MockHashProvider p1b(32, 7);
  MockHashProvider p2(32, 8);
  const Embedding a1 = p1.embed("the same string");
  const Embedding a2 = p1b.embed("the same string");
  CHECK((a1.values.array() == a2.values.array()).all());
  CHECK(std::abs(l2_norm(a1) - 1.0) < 1e-6);

  const Embedding other_seed = p2.embed("the same string");
  CHECK_FALSE((a1.values.array() == other_seed.values.array()).all());
  CHECK(p1.space_id() != p2.space_id());

  const Embedding different = p1.embed("another string");
  CHECK_FALSE((a1.values.array() == different.values.array()).all());
}

TEST_CASE("table backend looks up exactly what was inserted") {
  TableProvider table(3, "synthetic");
  VectorXf e(3);
  e << 0.1f, 0.2f, 0.3f;
  table.insert("a", e);
  const auto got = table.embed_texts({"a"});
  CHECK(got.size() == 1);
  CHECK((got[0].values.array() == e.array()).all());
  CHECK_THROWS(table.embed("missing"));
  VectorXf wrong(2);
  wrong << 1.f, 2.f;
  CHECK_THROWS_AS(table.insert("b", wrong), std::invalid_argument);
}

TEST_CASE("cache: write-then-read round trip is exact") {
  Rng rng(5);
  std::vector<std::pair<std::string, VectorXf>> items;
  for (int i = 0; i < 9; ++i)
    items.emplace_back("key" + std::to_string(i), to_float(rng.normal_vector(12)));
  const auto path = temp_file("xmd_test_cache.bin");
  write_cache(build_cache(items, 12, "space-x"), path);
  const EmbeddingCache back = read_cache(path);
  CHECK(back.dimension == 12);
  CHECK(back.space_id == "space-x");
  CHECK(back.count() == 9);
  for (const auto& [key, values] : items)
    CHECK((back.row(key).array() == values.array()).all());
  fs::remove(path);
}

TEST_CASE("cache: empty cache is valid") {
  const auto path = temp_file("xmd_test_cache_empty.bin");
  write_cache(build_cache({}, 8, "space-e"), path);
  const EmbeddingCache back = read_cache(path);
  CHECK(back.count() == 0);
  CHECK(back.dimension == 8);
  fs::remove(path);
}

TEST_CASE("cache: consumer dimension check and corruption detection") {
  Rng rng(6);
  const auto path = temp_file("xmd_test_cache_dim.bin");
  write_cache(build_cache({{"k", to_float(rng.normal_vector(64))}}, 64, "s"), path);
  CHECK_NOTHROW(read_cache(path, 64));
  CHECK_THROWS(read_cache(path, 32));

  // corrupt the magic
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(0);
  f.write("BOGUS!!!", 8);
  f.close();
  CHECK_THROWS(read_cache(path));
  fs::remove(path);

  CHECK_THROWS(read_cache(temp_file("xmd_missing_cache.bin")));
}

TEST_CASE("cache provider serves rows and reports misses") {
  Rng rng(7);
  const auto path = temp_file("xmd_test_cache_provider.bin");
  MockHashProvider mock(16, 1);
  write_cache({"x", "y"}, mock, path);
  CacheProvider provider(path);
  CHECK(provider.dimension() == 16);
  CHECK(provider.contains("x"));
  CHECK_FALSE(provider.contains("z"));
  CHECK((provider.embed("x").values.array() == mock.embed("x").values.array()).all());
  CHECK_THROWS(provider.embed("z"));
  fs::remove(path);
}

TEST_CASE("provider factory: config round trip and external slot") {
  const ProviderConfig cfg = ProviderConfig::from_json_string(
      R"({"kind":"mock-hash","dimension":24,"seed":9})");
  auto p = make_provider(cfg);
  CHECK(p->dimension() == 24);

  CHECK_THROWS(ProviderConfig::from_json_string(R"({"kind":"bogus","dimension":4})"));
  CHECK_THROWS(ProviderConfig::from_json_string(R"({"kind":"table","dimension":0})"));

  ProviderConfig ext;
  ext.kind = ProviderKind::External;
  ext.dimension = 4;
  CHECK_THROWS(make_provider(ext));  // no adapter registered
  register_external_provider_factory([](const ProviderConfig& c) {
    return std::make_unique<MockHashProvider>(c.dimension, 99);
  });
  CHECK(make_provider(ext)->dimension() == 4);
  register_external_provider_factory(nullptr);
}
