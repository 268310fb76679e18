#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xmd/common.hpp"

namespace xmd {

/// A point in the frozen joint image-text embedding space. Values are kept
/// raw (float32, matching the on-disk formats); normalization happens at the
/// point of use.
struct Embedding {
  VectorXf values;
  std::string space_id;

  int dim() const { return static_cast<int>(values.size()); }
};

double l2_norm(const Embedding& e);

/// Unit-L2 copy. Throws on the zero vector.
Embedding normalize(const Embedding& e);

/// Cosine similarity, computed in double.
double cosine(const Embedding& a, const Embedding& b);
double cosine(const VectorXd& a, const VectorXd& b);

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

enum class ProviderKind { MockHash, Table, Cache, External };

struct ProviderConfig {
  ProviderKind kind = ProviderKind::MockHash;
  int dimension = 0;
  uint64_t seed = 0;                 // mock-hash key
  std::filesystem::path cache_path;  // cache backend
  std::string space_id;              // optional override / external id

  static ProviderConfig from_json_string(const std::string& text);
  std::string to_json_string() const;
};

/// Read-only view of the frozen embedding space. Providers are immutable
/// after construction and safe for concurrent queries.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;

  virtual int dimension() const = 0;
  virtual const std::string& space_id() const = 0;
  virtual bool contains(const std::string& key) const = 0;
  virtual Embedding embed(const std::string& key) const = 0;

  // Image refs and text strings are both plain keys; the split into two
  // entry points mirrors the two frozen encoders.
  Embedding embed_image(const std::string& image_ref) const { return embed(image_ref); }
  Embedding embed_text(const std::string& text) const { return embed(text); }
  std::vector<Embedding> embed_images(const std::vector<std::string>& refs) const;
  std::vector<Embedding> embed_texts(const std::vector<std::string>& texts) const;
};

/// Deterministic stand-in encoder: item bytes -> keyed PRF -> D standard
/// normal draws -> L2 normalize. Distinct seeds give distinct spaces.
class MockHashProvider : public EmbeddingProvider {
 public:
  MockHashProvider(int dimension, uint64_t seed);

  int dimension() const override { return dimension_; }
  const std::string& space_id() const override { return space_id_; }
  bool contains(const std::string&) const override { return true; }
  Embedding embed(const std::string& key) const override;

 private:
  int dimension_;
  uint64_t seed_;
  std::string space_id_;
};

/// Explicit key -> embedding table. The synthetic generator uses this to
/// define ground-truth geometry.
class TableProvider : public EmbeddingProvider {
 public:
  TableProvider(int dimension, std::string space_id);

  void insert(const std::string& key, const VectorXf& values);
  int dimension() const override { return dimension_; }
  const std::string& space_id() const override { return space_id_; }
  bool contains(const std::string& key) const override { return table_.count(key) > 0; }
  Embedding embed(const std::string& key) const override;
  size_t size() const { return table_.size(); }

 private:
  int dimension_;
  std::string space_id_;
  std::map<std::string, VectorXf> table_;
};

// ---------------------------------------------------------------------------
// Precomputed cache file:
//   32-byte header: magic "XMDCACHE" | u32 version | u32 D | u64 count
//                   | u64 fnv1a(space_id)
//   count x D float32 rows (row-major, little-endian)
//   JSON footer {"space_id": ..., "keys": [...]} covering the rest of the file
// ---------------------------------------------------------------------------

struct EmbeddingCache {
  int dimension = 0;
  std::string space_id;
  std::vector<std::string> keys;  // keys[i] -> row i
  MatrixXf rows;                  // count x D
  std::map<std::string, int> index;

  int count() const { return static_cast<int>(keys.size()); }
  bool contains(const std::string& key) const { return index.count(key) > 0; }
  VectorXf row(const std::string& key) const;
};

EmbeddingCache build_cache(const std::vector<std::pair<std::string, VectorXf>>& items,
                           int dimension, const std::string& space_id);

void write_cache(const EmbeddingCache& cache, const std::filesystem::path& path);

/// Embed `keys` with `provider` and write the cache in one pass.
EmbeddingCache write_cache(const std::vector<std::string>& keys, const EmbeddingProvider& provider,
                           const std::filesystem::path& path);

EmbeddingCache read_cache(const std::filesystem::path& path);

/// read_cache plus a dimension check against the consumer's expectation.
EmbeddingCache read_cache(const std::filesystem::path& path, int expected_dimension);

class CacheProvider : public EmbeddingProvider {
 public:
  explicit CacheProvider(EmbeddingCache cache) : cache_(std::move(cache)) {}
  explicit CacheProvider(const std::filesystem::path& path) : cache_(read_cache(path)) {}

  int dimension() const override { return cache_.dimension; }
  const std::string& space_id() const override { return cache_.space_id; }
  bool contains(const std::string& key) const override { return cache_.contains(key); }
  Embedding embed(const std::string& key) const override;
  const EmbeddingCache& cache() const { return cache_; }

 private:
  EmbeddingCache cache_;
};

/// Hook for out-of-process encoder adapters. The core never links against a
/// real encoder; tests and the synthetic pipeline use the backends above.
using ExternalProviderFactory =
    std::function<std::unique_ptr<EmbeddingProvider>(const ProviderConfig&)>;
void register_external_provider_factory(ExternalProviderFactory factory);

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& config);

}  // namespace xmd
