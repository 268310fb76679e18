#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xmd/common.hpp"

namespace xmd {

/// One stimulus trial: a voxel vector plus its stimulus metadata.
struct SignalRecord {
  std::string stimulus_id;
  VectorXf signal;
  std::string image_ref;
  std::vector<std::string> captions;
  std::optional<std::string> category;
  int repeat_index = 0;
};

struct DatasetManifest {
  std::string name;
  std::string subject_id;
  int voxel_count = 0;
  std::map<std::string, std::vector<SignalRecord>> splits;

  const std::vector<SignalRecord>& split(const std::string& name) const;
};

/// Per-voxel training-set statistics. Immutable once fitted.
class VoxelStats {
 public:
  VoxelStats(VectorXd mean, VectorXd std_dev);

  const VectorXd& mean() const { return mean_; }
  const VectorXd& std_dev() const { return std_dev_; }
  int voxel_count() const { return static_cast<int>(mean_.size()); }

 private:
  VectorXd mean_;
  VectorXd std_dev_;
};

/// Parse and validate a manifest JSON file, loading every record's signal
/// row from its referenced float32 matrix file. Paths in the manifest are
/// resolved relative to the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Collapse repeated presentations of the same stimulus to their arithmetic
/// mean. Output has one record per stimulus_id with repeat_index 0, ordered
/// by stimulus_id so the result is independent of input permutation.
std::vector<SignalRecord> average_repeats(const std::vector<SignalRecord>& records);

/// Population mean/std per voxel over the training records, std floored at
/// 1e-8 so constant voxels standardize to zero.
VoxelStats fit_standardizer(const std::vector<SignalRecord>& train_records);

SignalRecord apply_standardizer(const SignalRecord& record, const VoxelStats& stats);
std::vector<SignalRecord> apply_standardizer(const std::vector<SignalRecord>& records,
                                             const VoxelStats& stats);

/// Uniform draw from record.captions, deterministic given the rng state.
const std::string& sample_caption(const SignalRecord& record, Rng& rng);

/// Write a manifest (records + one signal matrix file per split) under dir.
/// Returns the manifest path dir/manifest.json.
std::filesystem::path write_manifest(const DatasetManifest& manifest,
                                     const std::filesystem::path& dir);

}  // namespace xmd
