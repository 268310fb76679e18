#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "xmd/data_model.hpp"

using namespace xmd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

SignalRecord rec(const std::string& id, std::initializer_list<float> signal, int repeat = 0,
                 const std::string& ref = "", std::vector<std::string> captions = {"c"}) {
  SignalRecord r;
  r.stimulus_id = id;
  r.signal = VectorXf(static_cast<Eigen::Index>(signal.size()));
  int i = 0;
  for (float v : signal) r.signal[i++] = v;
  r.repeat_index = repeat;
  r.image_ref = ref.empty() ? "img/" + id + ".png" : ref;
  r.captions = std::move(captions);
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

/// Write a manifest dir with one signal file per split.
fs::path write_raw_manifest(const fs::path& dir, int voxels,
                            const std::map<std::string, std::vector<SignalRecord>>& splits,
                            int declared_voxels = -1) {
  json j{{"name", "toy"},
         {"subject_id", "s01"},
         {"voxel_count", declared_voxels < 0 ? voxels : declared_voxels},
         {"signal_format", "float32_le"}};
  json out_splits = json::object();
  for (const auto& [split, records] : splits) {
    MatrixXf m(static_cast<Eigen::Index>(records.size()), voxels);
    json arr = json::array();
    for (size_t i = 0; i < records.size(); ++i) {
      m.row(static_cast<Eigen::Index>(i)) = records[i].signal.transpose();
      json r{{"stimulus_id", records[i].stimulus_id},
             {"signal_path", "sig_" + split + ".f32"},
             {"row", i},
             {"image_ref", records[i].image_ref},
             {"captions", records[i].captions},
             {"repeat_index", records[i].repeat_index}};
      if (records[i].category) r["category"] = *records[i].category;
      arr.push_back(r);
    }
    write_f32_matrix(dir / ("sig_" + split + ".f32"), m);
    out_splits[split] = arr;
  }
  j["splits"] = out_splits;
  const fs::path p = dir / "manifest.json";
  std::ofstream(p) << j.dump();
  return p;
}

}  // namespace

TEST_CASE("load_manifest: identity load of a small manifest") {
  TempDir dir("xmd_dm_load");
  const auto path = write_raw_manifest(
      dir.path, 8, {{"train", {rec("a", {1, 2, 3, 4, 5, 6, 7, 8}),
                               rec("b", {8, 7, 6, 5, 4, 3, 2, 1})}}});
  const DatasetManifest m = load_manifest(path);
  CHECK(m.voxel_count == 8);
  CHECK(m.split("train").size() == 2);
  CHECK(m.split("train")[0].signal[2] == 3.0f);
  CHECK_THROWS(m.split("missing"));
}

TEST_CASE("load_manifest: voxel-count mismatch is rejected") {
  TempDir dir("xmd_dm_mismatch");
  // file has 7 columns but the manifest declares 8
  const auto path = write_raw_manifest(
      dir.path, 7, {{"train", {rec("a", {1, 2, 3, 4, 5, 6, 7})}}}, 8);
  CHECK_THROWS(load_manifest(path));
}

TEST_CASE("load_manifest: GOD-shaped manifest loads 1200 + 50x35 records") {
  TempDir dir("xmd_dm_god");
  const int voxels = 4;
  std::vector<SignalRecord> train, test;
  for (int i = 0; i < 1200; ++i)
    train.push_back(rec("trn" + std::to_string(i), {1, 2, 3, 4}));
  for (int s = 0; s < 50; ++s)
    for (int r = 0; r < 35; ++r) {
      auto record = rec("tst" + std::to_string(s), {0, 1, 0, 1}, r,
                        "img/tst" + std::to_string(s) + ".png");
      test.push_back(record);
    }
  const auto path = write_raw_manifest(dir.path, voxels, {{"train", train}, {"test", test}});
  const DatasetManifest m = load_manifest(path);
  CHECK(m.split("train").size() == 1200);
  CHECK(m.split("test").size() == 1750);
  CHECK(average_repeats(m.split("test")).size() == 50);
}

TEST_CASE("load_manifest: parse and schema failures carry context") {
  TempDir dir("xmd_dm_bad");
  const fs::path bad = dir.path / "broken.json";
  std::ofstream(bad) << "{not json";
  CHECK_THROWS(load_manifest(bad));

  // empty split
  std::ofstream(dir.path / "empty.json")
      << R"({"name":"x","subject_id":"s","voxel_count":2,"signal_format":"float32_le","splits":{"train":[]}})";
  CHECK_THROWS(load_manifest(dir.path / "empty.json"));
}

TEST_CASE("load_manifest: duplicate (stimulus, repeat) pairs are rejected") {
  TempDir dir("xmd_dm_dup");
  const auto path = write_raw_manifest(
      dir.path, 2, {{"train", {rec("a", {1, 2}, 0), rec("a", {3, 4}, 0)}}});
  CHECK_THROWS(load_manifest(path));
}

TEST_CASE("average_repeats: identity, arithmetic mean, group checks") {
  const auto single = average_repeats({rec("a", {1, 2})});
  CHECK(single.size() == 1);
  CHECK(single[0].signal[0] == 1.0f);
  CHECK(single[0].repeat_index == 0);

  const auto two = average_repeats({rec("a", {1, 3}, 0), rec("a", {3, 5}, 1)});
  CHECK(two.size() == 1);
  CHECK(two[0].signal[0] == 2.0f);
  CHECK(two[0].signal[1] == 4.0f);

  // mismatched image refs inside a group
  auto r1 = rec("a", {1, 2}, 0, "img/a.png");
  auto r2 = rec("a", {1, 2}, 1, "img/other.png");
  CHECK_THROWS(average_repeats({r1, r2}));
}

TEST_CASE("average_repeats: idempotent and permutation independent") {
  Rng rng(3);
  std::vector<SignalRecord> records;
  for (int s = 0; s < 6; ++s)
    for (int r = 0; r < 4; ++r) {
      SignalRecord x = rec("stim" + std::to_string(s), {0, 0, 0}, r);
      x.signal = to_float(rng.normal_vector(3));
      records.push_back(x);
    }
  const auto once = average_repeats(records);
  const auto twice = average_repeats(once);
  REQUIRE(once.size() == twice.size());
  for (size_t i = 0; i < once.size(); ++i)
    CHECK((once[i].signal.array() == twice[i].signal.array()).all());

  auto shuffled = records;
  rng.shuffle(shuffled);
  const auto permuted = average_repeats(shuffled);
  REQUIRE(permuted.size() == once.size());
  for (size_t i = 0; i < once.size(); ++i) {
    CHECK(permuted[i].stimulus_id == once[i].stimulus_id);
    CHECK((permuted[i].signal.array() == once[i].signal.array()).all());
  }
}

TEST_CASE("standardizer: analytic z-score and zero-variance flooring") {
  const std::vector<SignalRecord> train = {rec("a", {0}), rec("b", {2})};
  const VoxelStats stats = fit_standardizer(train);
  CHECK(stats.mean()[0] == doctest::Approx(1.0));
  CHECK(stats.std_dev()[0] == doctest::Approx(1.0));  // population std
  const SignalRecord out = apply_standardizer(rec("q", {3}), stats);
  CHECK(out.signal[0] == doctest::Approx(2.0));

  // constant voxel maps to zero
  const VoxelStats flat = fit_standardizer({rec("a", {5, 1}), rec("b", {5, 3})});
  const SignalRecord z = apply_standardizer(rec("q", {5, 2}), flat);
  CHECK(z.signal[0] == 0.0f);

  CHECK_THROWS_AS(fit_standardizer({}), std::invalid_argument);
  CHECK_THROWS_AS(fit_standardizer({rec("a", {1})}), std::invalid_argument);
  CHECK_THROWS(apply_standardizer(rec("q", {1, 2, 3}), stats));
}

TEST_CASE("standardizer: train stats match a direct computation and stay frozen") {
  Rng rng(17);
  std::vector<SignalRecord> train;
  for (int i = 0; i < 40; ++i) {
    SignalRecord r = rec("t" + std::to_string(i), {0, 0, 0, 0, 0});
    r.signal = to_float((rng.normal_vector(5) * 3.0).array() + 7.0);
    train.push_back(r);
  }
  const VoxelStats stats = fit_standardizer(train);

  // independent mean/std oracle
  for (int v = 0; v < 5; ++v) {
    double mean = 0.0;
    for (const auto& r : train) mean += r.signal[v];
    mean /= train.size();
    double var = 0.0;
    for (const auto& r : train) var += (r.signal[v] - mean) * (r.signal[v] - mean);
    var /= train.size();
    CHECK(stats.mean()[v] == doctest::Approx(mean).epsilon(1e-9));
    CHECK(stats.std_dev()[v] == doctest::Approx(std::sqrt(var)).epsilon(1e-9));
  }

  // standardized training set: |mean| < 1e-6, std within 1e-6 of 1
  const auto zs = apply_standardizer(train, stats);
  for (int v = 0; v < 5; ++v) {
    double mean = 0.0, var = 0.0;
    for (const auto& r : zs) mean += r.signal[v];
    mean /= zs.size();
    for (const auto& r : zs) var += (r.signal[v] - mean) * (r.signal[v] - mean);
    var /= zs.size();
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
  }

  // applying to held-out data cannot mutate the fitted stats (value type)
  const VectorXd mean_before = stats.mean();
  apply_standardizer(rec("h", {9, 9, 9, 9, 9}), stats);
  CHECK((stats.mean().array() == mean_before.array()).all());
}

TEST_CASE("sample_caption: singleton, membership, determinism, frequency") {
  SignalRecord one = rec("a", {1});
  one.captions = {"only"};
  Rng rng(1);
  for (int i = 0; i < 5; ++i) CHECK(sample_caption(one, rng) == "only");

  SignalRecord two = rec("b", {1});
  two.captions = {"x", "y"};
  Rng r1(42), r2(42);
  for (int i = 0; i < 100; ++i) CHECK(sample_caption(two, r1) == sample_caption(two, r2));

  Rng r3(7);
  int count_x = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const std::string& c = sample_caption(two, r3);
    CHECK((c == "x" || c == "y"));
    if (c == "x") ++count_x;
  }
  CHECK(std::abs(count_x / static_cast<double>(draws) - 0.5) < 0.02);
}

TEST_CASE("write_manifest then load_manifest round-trips records") {
  TempDir dir("xmd_dm_roundtrip");
  DatasetManifest m;
  m.name = "toy";
  m.subject_id = "s01";
  m.voxel_count = 3;
  auto a = rec("a", {1, 2, 3});
  a.category = "cat";
  m.splits["train"] = {a, rec("b", {4, 5, 6})};
  m.splits["test"] = {rec("c", {7, 8, 9})};
  const auto path = write_manifest(m, dir.path / "out");
  const DatasetManifest back = load_manifest(path);
  CHECK(back.voxel_count == 3);
  CHECK(back.split("train")[0].category.value() == "cat");
  CHECK((back.split("test")[0].signal.array() == m.splits["test"][0].signal.array()).all());
}
