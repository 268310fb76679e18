#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "xmd/data_model.hpp"
#include "xmd/retrieval.hpp"
#include "xmd/synthetic.hpp"
#include "xmd/trainer.hpp"

using namespace xmd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

SyntheticSpec small_spec(uint64_t seed) {
  SyntheticSpec s;
  s.n_train = 40;
  s.n_test = 16;
  s.voxels = 24;
  s.dim = 8;
  s.noise_sigma = 0.0;
  s.n_classes = 5;
  s.image_text_agreement = 1.0;
  s.captions_per_item = 2;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("generate_synthetic: manifest and caches are complete and consistent") {
  TempDir dir("xmd_synth_basic");
  const SyntheticDataset data = generate_synthetic(small_spec(1), dir.path);

  const DatasetManifest m = load_manifest(data.manifest_path);
  CHECK(m.voxel_count == 24);
  CHECK(m.split("train").size() == 40);
  CHECK(m.split("test").size() == 16);

  const EmbeddingCache images = read_cache(data.image_cache_path, 8);
  const EmbeddingCache texts = read_cache(data.text_cache_path, 8);
  CHECK(images.count() == 56);  // one per item
  // every image_ref and caption is covered
  for (const auto& [split, records] : m.splits)
    for (const auto& r : records) {
      CHECK(images.contains(r.image_ref));
      CHECK(r.captions.size() == 2);
      for (const auto& c : r.captions) CHECK(texts.contains(c));
      CHECK(r.category.has_value());
    }
  // filled prompts for every class/template pair are in the text cache
  const auto classes = read_lines(data.classes_path);
  CHECK(classes.size() == 5);
  for (const auto& cls : classes)
    for (const auto& tmpl : default_prompt_templates())
      CHECK(texts.contains(fill_template(tmpl, cls)));
}

TEST_CASE("generate_synthetic: same seed is byte-identical, another seed differs") {
  TempDir a("xmd_synth_det_a"), b("xmd_synth_det_b"), c("xmd_synth_det_c");
  const SyntheticDataset da = generate_synthetic(small_spec(7), a.path);
  const SyntheticDataset db = generate_synthetic(small_spec(7), b.path);
  CHECK(slurp(da.image_cache_path) == slurp(db.image_cache_path));
  CHECK(slurp(da.text_cache_path) == slurp(db.text_cache_path));
  CHECK(slurp(da.manifest_path) == slurp(db.manifest_path));

  const SyntheticDataset dc = generate_synthetic(small_spec(8), c.path);
  CHECK(slurp(da.image_cache_path) != slurp(dc.image_cache_path));
}

TEST_CASE("generate_synthetic: zero noise makes the signal map exactly linear") {
  TempDir dir("xmd_synth_linear");
  const SyntheticDataset data = generate_synthetic(small_spec(3), dir.path);
  const DatasetManifest m = load_manifest(data.manifest_path);
  const EmbeddingCache images = read_cache(data.image_cache_path);

  // least-squares fit of signals from embeddings must be exact up to the
  // float32 storage rounding
  const auto& records = m.split("train");
  MatrixXd e(static_cast<Eigen::Index>(records.size()), 8);
  MatrixXd s(static_cast<Eigen::Index>(records.size()), 24);
  for (size_t i = 0; i < records.size(); ++i) {
    e.row(static_cast<Eigen::Index>(i)) = to_double(images.row(records[i].image_ref)).transpose();
    s.row(static_cast<Eigen::Index>(i)) = to_double(records[i].signal).transpose();
  }
  const MatrixXd w = e.colPivHouseholderQr().solve(s);
  CHECK((e * w - s).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("generate_synthetic: agreement controls the image-text cosine") {
  TempDir dir("xmd_synth_agree");
  SyntheticSpec spec = small_spec(5);
  spec.dim = 32;
  spec.n_train = 150;
  spec.image_text_agreement = 0.7;
  const SyntheticDataset data = generate_synthetic(spec, dir.path);
  const DatasetManifest m = load_manifest(data.manifest_path);
  const EmbeddingCache images = read_cache(data.image_cache_path);
  const EmbeddingCache texts = read_cache(data.text_cache_path);

  double total = 0.0;
  int count = 0;
  for (const auto& r : m.split("train"))
    for (const auto& c : r.captions) {
      total += cosine(to_double(images.row(r.image_ref)), to_double(texts.row(c)));
      ++count;
    }
  CHECK(std::abs(total / count - 0.7) < 0.05);
}

TEST_CASE("generate_synthetic: at full agreement, prompt weights recover the labels") {
  TempDir dir("xmd_synth_classes");
  SyntheticSpec spec = small_spec(9);
  spec.dim = 24;
  spec.n_classes = 4;
  const SyntheticDataset data = generate_synthetic(spec, dir.path);
  const DatasetManifest m = load_manifest(data.manifest_path);
  const EmbeddingCache images = read_cache(data.image_cache_path);
  CacheProvider texts(data.text_cache_path);

  const ClassWeights weights =
      build_class_weights(read_lines(data.classes_path), default_prompt_templates(), texts);
  std::vector<VectorXd> embs;
  std::vector<std::string> labels;
  for (const auto& r : m.split("test")) {
    embs.push_back(to_double(images.row(r.image_ref)));
    labels.push_back(*r.category);
  }
  CHECK(accuracy(embs, labels, weights, 1) == 100.0);
}

TEST_CASE("generate_synthetic: repeats populate the test split for averaging") {
  TempDir dir("xmd_synth_repeats");
  SyntheticSpec spec = small_spec(11);
  spec.test_repeats = 3;
  spec.noise_sigma = 0.2;
  const SyntheticDataset data = generate_synthetic(spec, dir.path);
  const DatasetManifest m = load_manifest(data.manifest_path);
  CHECK(m.split("test").size() == 16 * 3);
  const auto averaged = average_repeats(m.split("test"));
  CHECK(averaged.size() == 16);
}

TEST_CASE("overwhelming signal noise drives retrieval to chance") {
  TempDir dir("xmd_synth_noise");
  SyntheticSpec spec = small_spec(13);
  spec.n_train = 60;
  spec.n_test = 40;
  spec.noise_sigma = 1e6;
  const SyntheticDataset data = generate_synthetic(spec, dir.path);
  const DatasetManifest m = load_manifest(data.manifest_path);
  CacheProvider images(data.image_cache_path);
  CacheProvider texts(data.text_cache_path);

  const VoxelStats stats = fit_standardizer(m.split("train"));
  const auto train_recs = apply_standardizer(m.split("train"), stats);
  const auto test_recs = apply_standardizer(m.split("test"), stats);

  TrainConfig cfg;
  cfg.modality = Modality::V;
  cfg.batch_size = 20;
  cfg.epochs = 10;
  cfg.patience = 20;
  cfg.lr = 1e-3;
  cfg.seed = 1;
  LinearMapper mapper(24, 8, 1, data.space_id);
  train(mapper, train_recs, test_recs, images, texts, cfg);

  // mean normalized rank of the ground truth should hover around 0.5
  std::vector<VectorXd> queries;
  std::vector<std::string> keys;
  std::vector<Embedding> pool_embs;
  for (const auto& r : test_recs) {
    queries.push_back(to_double(map_signal(mapper, r.signal, MapperMode::Infer).values));
    keys.push_back(r.stimulus_id);
    pool_embs.push_back(images.embed(r.image_ref));
  }
  const CandidatePool pool = pool_from_embeddings(keys, pool_embs);
  const RecallReport rr = mean_recall(queries, keys, pool);
  double mean_rank = 0.0;
  for (int r : rr.per_query_rank) mean_rank += r;
  mean_rank /= static_cast<double>(rr.per_query_rank.size()) * pool.size();
  CHECK(mean_rank > 0.3);
  CHECK(mean_rank < 0.7);
}
