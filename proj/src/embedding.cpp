#include "xmd/embedding.hpp"

#include <fstream>
#include <nlohmann/json.hpp>

namespace xmd {

using nlohmann::json;

double l2_norm(const Embedding& e) { return to_double(e.values).norm(); }

Embedding normalize(const Embedding& e) {
  const VectorXd v = to_double(e.values);
  const double n = v.norm();
  if (n == 0.0) throw std::invalid_argument("normalize: zero vector");
  return Embedding{to_float(v / n), e.space_id};
}

double cosine(const Embedding& a, const Embedding& b) {
  return cosine(to_double(a.values), to_double(b.values));
}

double cosine(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine: zero vector");
  return a.dot(b) / (na * nb);
}

std::vector<Embedding> EmbeddingProvider::embed_images(const std::vector<std::string>& refs) const {
  std::vector<Embedding> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back(embed(r));
  return out;
}

std::vector<Embedding> EmbeddingProvider::embed_texts(const std::vector<std::string>& texts) const {
  return embed_images(texts);
}

// --- ProviderConfig ---------------------------------------------------------

static std::string kind_name(ProviderKind k) {
  switch (k) {
    case ProviderKind::MockHash: return "mock-hash";
    case ProviderKind::Table: return "table";
    case ProviderKind::Cache: return "cache";
    case ProviderKind::External: return "external";
  }
  return "?";
}

static ProviderKind kind_from_name(const std::string& s) {
  if (s == "mock-hash") return ProviderKind::MockHash;
  if (s == "table") return ProviderKind::Table;
  if (s == "cache") return ProviderKind::Cache;
  if (s == "external") return ProviderKind::External;
  throw std::invalid_argument("unknown provider kind: " + s);
}

ProviderConfig ProviderConfig::from_json_string(const std::string& text) {
  json j = json::parse(text);
  ProviderConfig c;
  c.kind = kind_from_name(j.at("kind").get<std::string>());
  c.dimension = j.value("dimension", 0);
  c.seed = j.value("seed", uint64_t{0});
  if (j.contains("cache_path")) c.cache_path = expand_env(j["cache_path"].get<std::string>());
  c.space_id = j.value("space_id", std::string{});
  if (c.kind != ProviderKind::Cache && c.dimension <= 0)
    throw std::invalid_argument("provider config: dimension must be positive");
  return c;
}

std::string ProviderConfig::to_json_string() const {
  json j{{"kind", kind_name(kind)}, {"dimension", dimension}, {"seed", seed}};
  if (!cache_path.empty()) j["cache_path"] = cache_path.string();
  if (!space_id.empty()) j["space_id"] = space_id;
  return j.dump();
}

// --- MockHashProvider --------------------------------------------------------

MockHashProvider::MockHashProvider(int dimension, uint64_t seed)
    : dimension_(dimension), seed_(seed) {
  if (dimension <= 0) throw std::invalid_argument("mock-hash provider: dimension must be positive");
  space_id_ = "mock-hash/d" + std::to_string(dimension) + "/s" + std::to_string(seed);
}

Embedding MockHashProvider::embed(const std::string& key) const {
  Rng rng(fnv1a64(key.data(), key.size(), splitmix64(seed_)));
  VectorXd v = rng.normal_vector(dimension_);
  const double n = v.norm();
  // D standard-normal draws are zero with probability 0; guard anyway
  if (n == 0.0) v[0] = 1.0;
  return Embedding{to_float(v / v.norm()), space_id_};
}

// --- TableProvider -----------------------------------------------------------

TableProvider::TableProvider(int dimension, std::string space_id)
    : dimension_(dimension), space_id_(std::move(space_id)) {
  if (dimension <= 0) throw std::invalid_argument("table provider: dimension must be positive");
}

void TableProvider::insert(const std::string& key, const VectorXf& values) {
  if (values.size() != dimension_)
    throw std::invalid_argument("table provider: row for '" + key + "' has dimension " +
                                std::to_string(values.size()) + ", expected " +
                                std::to_string(dimension_));
  table_[key] = values;
}

Embedding TableProvider::embed(const std::string& key) const {
  auto it = table_.find(key);
  if (it == table_.end()) throw std::runtime_error("table provider: no entry for key '" + key + "'");
  return Embedding{it->second, space_id_};
}

// --- Cache file --------------------------------------------------------------

namespace {

constexpr char kCacheMagic[8] = {'X', 'M', 'D', 'C', 'A', 'C', 'H', 'E'};
constexpr uint32_t kCacheVersion = 1;

template <typename T>
void put_le(std::string& buf, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const char* p) {
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

VectorXf EmbeddingCache::row(const std::string& key) const {
  auto it = index.find(key);
  if (it == index.end()) throw std::runtime_error("embedding cache: missing key '" + key + "'");
  return rows.row(it->second).transpose();
}

EmbeddingCache build_cache(const std::vector<std::pair<std::string, VectorXf>>& items,
                           int dimension, const std::string& space_id) {
  if (dimension <= 0) throw std::invalid_argument("cache: dimension must be positive");
  EmbeddingCache c;
  c.dimension = dimension;
  c.space_id = space_id;
  c.rows.resize(static_cast<Eigen::Index>(items.size()), dimension);
  int r = 0;
  for (const auto& [key, values] : items) {
    if (values.size() != dimension)
      throw std::invalid_argument("cache: row for '" + key + "' has wrong dimension");
    if (!c.index.emplace(key, r).second)
      throw std::invalid_argument("cache: duplicate key '" + key + "'");
    c.keys.push_back(key);
    c.rows.row(r) = values.transpose();
    ++r;
  }
  return c;
}

void write_cache(const EmbeddingCache& cache, const std::filesystem::path& path) {
  std::string buf;
  buf.append(kCacheMagic, sizeof(kCacheMagic));
  put_le<uint32_t>(buf, kCacheVersion);
  put_le<uint32_t>(buf, static_cast<uint32_t>(cache.dimension));
  put_le<uint64_t>(buf, static_cast<uint64_t>(cache.count()));
  put_le<uint64_t>(buf, fnv1a64(cache.space_id));
  for (int r = 0; r < cache.count(); ++r)
    for (int c = 0; c < cache.dimension; ++c) {
      float v = cache.rows(r, c);
      buf.append(reinterpret_cast<const char*>(&v), sizeof(float));
    }
  json footer{{"space_id", cache.space_id}, {"keys", cache.keys}};
  buf += footer.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open cache for writing: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("cache write failed: " + path.string());
}

EmbeddingCache write_cache(const std::vector<std::string>& keys, const EmbeddingProvider& provider,
                           const std::filesystem::path& path) {
  std::vector<std::pair<std::string, VectorXf>> items;
  items.reserve(keys.size());
  for (const auto& k : keys) items.emplace_back(k, provider.embed(k).values);
  EmbeddingCache cache = build_cache(items, provider.dimension(), provider.space_id());
  write_cache(cache, path);
  return cache;
}

EmbeddingCache read_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open cache: " + path.string());
  const auto total = static_cast<size_t>(in.tellg());
  if (total < 32) throw std::runtime_error("cache file too short: " + path.string());
  std::string buf(total, '\0');
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(total));
  if (!in) throw std::runtime_error("cache read failed: " + path.string());

  if (std::memcmp(buf.data(), kCacheMagic, sizeof(kCacheMagic)) != 0)
    throw std::runtime_error("bad cache magic in " + path.string());
  const auto version = get_le<uint32_t>(buf.data() + 8);
  if (version != kCacheVersion)
    throw std::runtime_error("unsupported cache version " + std::to_string(version));
  const auto dim = get_le<uint32_t>(buf.data() + 12);
  const auto count = get_le<uint64_t>(buf.data() + 16);
  const auto space_hash = get_le<uint64_t>(buf.data() + 24);
  if (dim == 0) throw std::runtime_error("cache declares zero dimension: " + path.string());

  const size_t matrix_bytes = sizeof(float) * count * dim;
  if (total < 32 + matrix_bytes)
    throw std::runtime_error("cache truncated (header declares more rows than present): " +
                             path.string());

  EmbeddingCache c;
  c.dimension = static_cast<int>(dim);
  c.rows.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  const char* p = buf.data() + 32;
  for (uint64_t r = 0; r < count; ++r)
    for (uint32_t col = 0; col < dim; ++col) {
      float v;
      std::memcpy(&v, p, sizeof(float));
      p += sizeof(float);
      c.rows(static_cast<Eigen::Index>(r), col) = v;
    }

  json footer = json::parse(buf.substr(32 + matrix_bytes));
  c.space_id = footer.at("space_id").get<std::string>();
  c.keys = footer.at("keys").get<std::vector<std::string>>();
  if (fnv1a64(c.space_id) != space_hash)
    throw std::runtime_error("cache header/footer space_id mismatch in " + path.string());
  if (c.keys.size() != count)
    throw std::runtime_error("cache footer key count does not match header in " + path.string());
  for (size_t i = 0; i < c.keys.size(); ++i)
    if (!c.index.emplace(c.keys[i], static_cast<int>(i)).second)
      throw std::runtime_error("cache contains duplicate key '" + c.keys[i] + "'");
  return c;
}

EmbeddingCache read_cache(const std::filesystem::path& path, int expected_dimension) {
  EmbeddingCache c = read_cache(path);
  if (c.dimension != expected_dimension)
    throw std::runtime_error("cache " + path.string() + " has dimension " +
                             std::to_string(c.dimension) + ", consumer expects " +
                             std::to_string(expected_dimension));
  return c;
}

Embedding CacheProvider::embed(const std::string& key) const {
  return Embedding{cache_.row(key), cache_.space_id};
}

// --- factory -----------------------------------------------------------------

namespace {
ExternalProviderFactory g_external_factory;
}

void register_external_provider_factory(ExternalProviderFactory factory) {
  g_external_factory = std::move(factory);
}

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& config) {
  switch (config.kind) {
    case ProviderKind::MockHash:
      return std::make_unique<MockHashProvider>(config.dimension, config.seed);
    case ProviderKind::Table:
      return std::make_unique<TableProvider>(
          config.dimension, config.space_id.empty() ? "table" : config.space_id);
    case ProviderKind::Cache:
      return std::make_unique<CacheProvider>(config.cache_path);
    case ProviderKind::External:
      if (!g_external_factory)
        throw std::runtime_error(
            "external embedding backend requested but no adapter is registered");
      return g_external_factory(config);
  }
  throw std::logic_error("unreachable provider kind");
}

}  // namespace xmd
