#include "xmd/data_model.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>

namespace xmd {

using nlohmann::json;

const std::vector<SignalRecord>& DatasetManifest::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw std::runtime_error("manifest has no split '" + name + "'");
  return it->second;
}

VoxelStats::VoxelStats(VectorXd mean, VectorXd std_dev)
    : mean_(std::move(mean)), std_dev_(std::move(std_dev)) {
  if (mean_.size() != std_dev_.size())
    throw std::invalid_argument("voxel stats: mean/std length mismatch");
  if ((std_dev_.array() <= 0.0).any())
    throw std::invalid_argument("voxel stats: std entries must be positive");
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest parse failure in " + path.string() + ": " + e.what());
  }

  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.subject_id = j.at("subject_id").get<std::string>();
    m.voxel_count = j.at("voxel_count").get<int>();
    const auto signal_format = j.at("signal_format").get<std::string>();
    if (signal_format != "float32_le")
      throw std::runtime_error("unsupported signal_format '" + signal_format + "'");
    if (m.voxel_count <= 0) throw std::runtime_error("voxel_count must be positive");

    const auto base = path.parent_path();
    // signal matrices are shared between records; load each file once
    std::map<std::string, MatrixXf> matrices;

    for (const auto& [split_name, records_json] : j.at("splits").items()) {
      if (records_json.empty())
        throw std::runtime_error("split '" + split_name + "' is empty");
      std::vector<SignalRecord> records;
      std::map<std::string, int> next_repeat;
      for (const auto& rj : records_json) {
        SignalRecord r;
        r.stimulus_id = rj.at("stimulus_id").get<std::string>();
        r.image_ref = rj.at("image_ref").get<std::string>();
        r.captions = rj.at("captions").get<std::vector<std::string>>();
        if (r.captions.empty())
          throw std::runtime_error("record '" + r.stimulus_id + "' has no captions");
        if (rj.contains("category") && !rj["category"].is_null())
          r.category = rj["category"].get<std::string>();
        r.repeat_index = rj.contains("repeat_index") ? rj["repeat_index"].get<int>()
                                                     : next_repeat[r.stimulus_id];
        next_repeat[r.stimulus_id] =
            std::max(next_repeat[r.stimulus_id], r.repeat_index + 1);
        if (r.repeat_index < 0)
          throw std::runtime_error("record '" + r.stimulus_id + "' has negative repeat_index");

        const auto signal_rel = expand_env(rj.at("signal_path").get<std::string>());
        const int row = rj.at("row").get<int>();
        auto mat_it = matrices.find(signal_rel);
        if (mat_it == matrices.end()) {
          std::filesystem::path sp(signal_rel);
          if (sp.is_relative()) sp = base / sp;
          mat_it = matrices.emplace(signal_rel, read_f32_matrix(sp, m.voxel_count)).first;
        }
        const MatrixXf& mat = mat_it->second;
        if (row < 0 || row >= mat.rows())
          throw std::runtime_error("record '" + r.stimulus_id + "' references row " +
                                   std::to_string(row) + " of " + signal_rel + " (rows: " +
                                   std::to_string(mat.rows()) + ")");
        r.signal = mat.row(row).transpose();
        records.push_back(std::move(r));
      }
      m.splits.emplace(split_name, std::move(records));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest schema error in " + path.string() + ": " + e.what());
  }

  // invariant checks
  std::map<std::string, std::map<std::string, bool>> seen_repeats;
  for (const auto& [split_name, records] : m.splits) {
    for (const auto& r : records) {
      if (r.signal.size() != m.voxel_count)
        throw std::runtime_error("record '" + r.stimulus_id + "' in split '" + split_name +
                                 "' has " + std::to_string(r.signal.size()) +
                                 " voxels, manifest declares " + std::to_string(m.voxel_count));
      const std::string rk = r.stimulus_id + "#" + std::to_string(r.repeat_index);
      if (seen_repeats[split_name].count(rk))
        throw std::runtime_error("duplicate (stimulus_id, repeat_index) pair '" + rk +
                                 "' in split '" + split_name + "'");
      seen_repeats[split_name][rk] = true;
    }
  }
  return m;
}

std::vector<SignalRecord> average_repeats(const std::vector<SignalRecord>& records) {
  std::map<std::string, std::vector<const SignalRecord*>> groups;
  for (const auto& r : records) groups[r.stimulus_id].push_back(&r);

  std::vector<SignalRecord> out;
  out.reserve(groups.size());
  for (auto& [stimulus_id, group] : groups) {
    // fixed accumulation order, so the result is permutation independent
    std::sort(group.begin(), group.end(), [](const SignalRecord* a, const SignalRecord* b) {
      return a->repeat_index < b->repeat_index;
    });
    const SignalRecord& first = *group.front();
    for (const SignalRecord* r : group) {
      if (r->image_ref != first.image_ref)
        throw std::runtime_error("repeat group '" + stimulus_id +
                                 "' mixes image refs: '" + first.image_ref + "' vs '" +
                                 r->image_ref + "'");
      if (r->signal.size() != first.signal.size())
        throw std::runtime_error("repeat group '" + stimulus_id + "' mixes signal lengths");
    }
    VectorXd mean = VectorXd::Zero(first.signal.size());
    for (const SignalRecord* r : group) mean += to_double(r->signal);
    mean /= static_cast<double>(group.size());

    SignalRecord avg = first;
    avg.signal = to_float(mean);
    avg.repeat_index = 0;
    out.push_back(std::move(avg));
  }
  return out;
}

VoxelStats fit_standardizer(const std::vector<SignalRecord>& train_records) {
  if (train_records.size() < 2)
    throw std::invalid_argument("fit_standardizer needs at least 2 training records");
  const auto n = static_cast<double>(train_records.size());
  const Eigen::Index voxels = train_records.front().signal.size();

  VectorXd mean = VectorXd::Zero(voxels);
  for (const auto& r : train_records) {
    if (r.signal.size() != voxels)
      throw std::invalid_argument("fit_standardizer: inconsistent signal lengths");
    mean += to_double(r.signal);
  }
  mean /= n;

  VectorXd var = VectorXd::Zero(voxels);
  for (const auto& r : train_records) {
    const VectorXd d = to_double(r.signal) - mean;
    var += d.cwiseProduct(d);
  }
  var /= n;  // population variance

  VectorXd std_dev = var.cwiseSqrt().cwiseMax(1e-8);
  return VoxelStats(std::move(mean), std::move(std_dev));
}

SignalRecord apply_standardizer(const SignalRecord& record, const VoxelStats& stats) {
  if (record.signal.size() != stats.voxel_count())
    throw std::invalid_argument("apply_standardizer: signal length " +
                                std::to_string(record.signal.size()) +
                                " does not match stats length " +
                                std::to_string(stats.voxel_count()));
  SignalRecord out = record;
  const VectorXd z = (to_double(record.signal) - stats.mean()).cwiseQuotient(stats.std_dev());
  out.signal = to_float(z);
  return out;
}

std::vector<SignalRecord> apply_standardizer(const std::vector<SignalRecord>& records,
                                             const VoxelStats& stats) {
  std::vector<SignalRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(apply_standardizer(r, stats));
  return out;
}

const std::string& sample_caption(const SignalRecord& record, Rng& rng) {
  if (record.captions.empty())
    throw std::runtime_error("record '" + record.stimulus_id + "' has no captions");
  return record.captions[static_cast<size_t>(
      rng.uniform_int(static_cast<int>(record.captions.size())))];
}

std::filesystem::path write_manifest(const DatasetManifest& manifest,
                                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json j{{"name", manifest.name},
         {"subject_id", manifest.subject_id},
         {"voxel_count", manifest.voxel_count},
         {"signal_format", "float32_le"}};
  json splits = json::object();
  for (const auto& [split_name, records] : manifest.splits) {
    const std::string signal_file = "signals_" + split_name + ".f32";
    MatrixXf rows(static_cast<Eigen::Index>(records.size()), manifest.voxel_count);
    json arr = json::array();
    for (size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (r.signal.size() != manifest.voxel_count)
        throw std::runtime_error("write_manifest: record '" + r.stimulus_id +
                                 "' signal length mismatch");
      rows.row(static_cast<Eigen::Index>(i)) = r.signal.transpose();
      json rj{{"stimulus_id", r.stimulus_id},
              {"signal_path", signal_file},
              {"row", i},
              {"image_ref", r.image_ref},
              {"captions", r.captions},
              {"repeat_index", r.repeat_index}};
      if (r.category) rj["category"] = *r.category;
      arr.push_back(std::move(rj));
    }
    write_f32_matrix(dir / signal_file, rows);
    splits[split_name] = std::move(arr);
  }
  j["splits"] = std::move(splits);

  const auto manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("cannot write manifest: " + manifest_path.string());
  out << j.dump(2) << "\n";
  return manifest_path;
}

}  // namespace xmd
