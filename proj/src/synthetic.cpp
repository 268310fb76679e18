#include "xmd/synthetic.hpp"

#include <fstream>

#include "xmd/retrieval.hpp"

namespace xmd {

using nlohmann::json;

void SyntheticSpec::validate() const {
  if (n_train < 2 || n_test < 1) throw std::invalid_argument("synthetic: need n_train >= 2, n_test >= 1");
  if (voxels < 1 || dim < 1) throw std::invalid_argument("synthetic: sizes must be positive");
  if (noise_sigma < 0.0) throw std::invalid_argument("synthetic: noise_sigma must be >= 0");
  if (n_classes < 1) throw std::invalid_argument("synthetic: need at least one class");
  if (image_text_agreement < 0.0 || image_text_agreement > 1.0)
    throw std::invalid_argument("synthetic: image_text_agreement must lie in [0, 1]");
  if (class_concentration < 0.0 || class_concentration >= 1.0)
    throw std::invalid_argument("synthetic: class_concentration must lie in [0, 1)");
  if (modality_balance <= 0.0 || modality_balance >= 1.0)
    throw std::invalid_argument("synthetic: modality_balance must lie in (0, 1)");
  if (nuisance_dim < 0 || nuisance_dim > dim)
    throw std::invalid_argument("synthetic: nuisance_dim must lie in [0, dim]");
  if (captions_per_item < 1) throw std::invalid_argument("synthetic: need >= 1 caption per item");
  if (test_repeats < 1) throw std::invalid_argument("synthetic: need >= 1 test repeat");
}

json SyntheticSpec::to_json() const {
  return {{"n_train", n_train},
          {"n_test", n_test},
          {"voxels", voxels},
          {"dim", dim},
          {"noise_sigma", noise_sigma},
          {"n_classes", n_classes},
          {"image_text_agreement", image_text_agreement},
          {"modality_balance", modality_balance},
          {"class_concentration", class_concentration},
          {"nuisance_dim", nuisance_dim},
          {"captions_per_item", captions_per_item},
          {"test_repeats", test_repeats},
          {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const json& j) {
  SyntheticSpec s;
  s.n_train = j.value("n_train", s.n_train);
  s.n_test = j.value("n_test", s.n_test);
  s.voxels = j.value("voxels", s.voxels);
  s.dim = j.value("dim", s.dim);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.n_classes = j.value("n_classes", s.n_classes);
  s.image_text_agreement = j.value("image_text_agreement", s.image_text_agreement);
  s.modality_balance = j.value("modality_balance", s.modality_balance);
  s.class_concentration = j.value("class_concentration", s.class_concentration);
  s.nuisance_dim = j.value("nuisance_dim", s.nuisance_dim);
  s.captions_per_item = j.value("captions_per_item", s.captions_per_item);
  s.test_repeats = j.value("test_repeats", s.test_repeats);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

namespace {

VectorXd random_unit(int dim, Rng& rng) {
  VectorXd v = rng.normal_vector(dim);
  double n = v.norm();
  while (n == 0.0) {
    v = rng.normal_vector(dim);
    n = v.norm();
  }
  return v / n;
}

/// Rotate the unit vector u by an angle with the given cosine. The rotation
/// direction is random, optionally restricted to the row space of `subspace`.
/// The result is exactly unit norm.
VectorXd rotate_from(const VectorXd& u, double cos_angle, Rng& rng,
                     const MatrixXd* subspace = nullptr) {
  if (cos_angle >= 1.0) return u;
  const int dim = static_cast<int>(u.size());
  auto draw = [&]() -> VectorXd {
    if (!subspace) return rng.normal_vector(dim);
    return subspace->transpose() * rng.normal_vector(static_cast<int>(subspace->rows()));
  };
  VectorXd v = draw();
  v -= v.dot(u) * u;
  double n = v.norm();
  while (n < 1e-12) {
    v = draw();
    v -= v.dot(u) * u;
    n = v.norm();
  }
  const double sin_angle = std::sqrt(std::max(0.0, 1.0 - cos_angle * cos_angle));
  return cos_angle * u + sin_angle * (v / n);
}

std::string stim_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "stim_%05d", i);
  return std::string(buf);
}

std::string class_name(int c) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "class_%03d", c);
  return std::string(buf);
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec,
                                    const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);

  Rng master(spec.seed);
  Rng anchor_rng = master.child(1);
  Rng latent_rng = master.child(2);
  Rng rotation_rng = master.child(3);
  Rng wtrue_rng = master.child(4);
  Rng noise_rng = master.child(5);
  Rng prompt_rng = master.child(6);

  // the two modalities sit at angles whose cosines multiply to the agreement,
  // so independent rotations agree at ~image_text_agreement in expectation
  const double cos_image = std::pow(spec.image_text_agreement, spec.modality_balance);
  const double cos_text = std::pow(spec.image_text_agreement, 1.0 - spec.modality_balance);

  // optional shared low-rank rotation subspace (orthonormal rows)
  std::optional<MatrixXd> nuisance;
  if (spec.nuisance_dim > 0) {
    Rng nuisance_rng = master.child(7);
    MatrixXd raw = nuisance_rng.normal_matrix(spec.nuisance_dim, spec.dim);
    Eigen::HouseholderQR<MatrixXd> qr(raw.transpose());
    MatrixXd q = qr.householderQ() * MatrixXd::Identity(spec.dim, spec.nuisance_dim);
    nuisance = q.transpose();
  }
  const MatrixXd* rotation_subspace = nuisance ? &*nuisance : nullptr;

  std::vector<VectorXd> anchors;
  std::vector<std::string> classes;
  for (int c = 0; c < spec.n_classes; ++c) {
    anchors.push_back(random_unit(spec.dim, anchor_rng));
    classes.push_back(class_name(c));
  }

  const MatrixXd w_true =
      wtrue_rng.normal_matrix(spec.voxels, spec.dim) / std::sqrt(static_cast<double>(spec.dim));

  const std::string space_id = "synthetic/d" + std::to_string(spec.dim) + "/s" +
                               std::to_string(spec.seed);
  std::vector<std::pair<std::string, VectorXf>> image_items;
  std::vector<std::pair<std::string, VectorXf>> text_items;

  DatasetManifest manifest;
  manifest.name = "synthetic";
  manifest.subject_id = "synth01";
  manifest.voxel_count = spec.voxels;

  auto make_items = [&](int count, int id_offset, int repeats) {
    std::vector<SignalRecord> records;
    for (int i = 0; i < count; ++i) {
      const int id = id_offset + i;
      VectorXd latent;
      if (spec.class_concentration > 0.0) {
        // balanced clusters around the anchors: hard negatives share a class
        latent = rotate_from(anchors[static_cast<size_t>(i % spec.n_classes)],
                             spec.class_concentration, latent_rng);
      } else {
        latent = random_unit(spec.dim, latent_rng);
      }

      int label = 0;
      double best = -2.0;
      for (int c = 0; c < spec.n_classes; ++c) {
        const double score = latent.dot(anchors[static_cast<size_t>(c)]);
        if (score > best) {
          best = score;
          label = c;
        }
      }

      const VectorXd image_emb = rotate_from(latent, cos_image, rotation_rng, rotation_subspace);
      const std::string ref = "img/" + stim_id(id) + ".png";
      image_items.emplace_back(ref, to_float(image_emb));

      std::vector<std::string> captions;
      for (int k = 0; k < spec.captions_per_item; ++k) {
        const std::string caption = stim_id(id) + " caption " + std::to_string(k);
        text_items.emplace_back(caption,
                                to_float(rotate_from(latent, cos_text, rotation_rng,
                                                     rotation_subspace)));
        captions.push_back(caption);
      }

      for (int rep = 0; rep < repeats; ++rep) {
        SignalRecord r;
        r.stimulus_id = stim_id(id);
        r.image_ref = ref;
        r.captions = captions;
        r.category = classes[static_cast<size_t>(label)];
        r.repeat_index = rep;
        const VectorXd signal =
            w_true * image_emb + spec.noise_sigma * noise_rng.normal_vector(spec.voxels);
        r.signal = to_float(signal);
        records.push_back(std::move(r));
      }
    }
    return records;
  };

  manifest.splits["train"] = make_items(spec.n_train, 0, 1);
  manifest.splits["test"] = make_items(spec.n_test, spec.n_train, spec.test_repeats);

  // filled class prompts share the text space; weights average back to the anchor
  for (size_t c = 0; c < classes.size(); ++c)
    for (const auto& tmpl : default_prompt_templates())
      text_items.emplace_back(fill_template(tmpl, classes[c]),
                              to_float(rotate_from(anchors[c], cos_text, prompt_rng)));

  SyntheticDataset out;
  out.dir = out_dir;
  out.space_id = space_id;
  out.manifest_path = write_manifest(manifest, out_dir);
  out.image_cache_path = out_dir / "image_embeddings.xmdcache";
  out.text_cache_path = out_dir / "text_embeddings.xmdcache";
  out.classes_path = out_dir / "classes.txt";
  write_cache(build_cache(image_items, spec.dim, space_id), out.image_cache_path);
  write_cache(build_cache(text_items, spec.dim, space_id), out.text_cache_path);
  write_lines(classes, out.classes_path);
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& l : lines) out << l << "\n";
}

}  // namespace xmd
