#include "xmd/pipeline.hpp"

#include <fstream>

#include "xmd/contrastive.hpp"
#include "xmd/retrieval.hpp"

namespace xmd {

using nlohmann::json;

namespace {

std::string init_name(InitKind k) { return k == InitKind::Gaussian ? "gaussian" : "noised_image"; }
InitKind init_from_name(const std::string& s) {
  if (s == "gaussian") return InitKind::Gaussian;
  if (s == "noised_image" || s == "noised-image") return InitKind::NoisedImage;
  throw std::invalid_argument("unknown init kind '" + s + "'");
}
std::string sigma_name(SigmaRule r) { return r == SigmaRule::Beta ? "beta" : "beta_tilde"; }
SigmaRule sigma_from_name(const std::string& s) {
  if (s == "beta") return SigmaRule::Beta;
  if (s == "beta_tilde") return SigmaRule::BetaTilde;
  throw std::invalid_argument("unknown sigma rule '" + s + "'");
}
std::string eta_name(EtaRule r) {
  return r == EtaRule::SqrtOneMinusAlphaBar ? "sqrt_one_minus_alphabar" : "constant";
}
EtaRule eta_from_name(const std::string& s) {
  if (s == "sqrt_one_minus_alphabar") return EtaRule::SqrtOneMinusAlphaBar;
  if (s == "constant") return EtaRule::Constant;
  throw std::invalid_argument("unknown eta rule '" + s + "'");
}

template <typename F>
auto run_stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

json ReconstructionConfig::to_json() const {
  return {{"steps", steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"init", init_name(init)},
          {"scale", scale},
          {"t_start_fraction", t_start_fraction},
          {"sigma_rule", sigma_name(sigma_rule)},
          {"eta_rule", eta_name(eta_rule)}};
}

ReconstructionConfig ReconstructionConfig::from_json(const json& j) {
  ReconstructionConfig c;
  c.steps = j.value("steps", c.steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  if (j.contains("init")) c.init = init_from_name(j["init"].get<std::string>());
  c.scale = j.value("scale", c.scale);
  c.t_start_fraction = j.value("t_start_fraction", c.t_start_fraction);
  if (j.contains("sigma_rule")) c.sigma_rule = sigma_from_name(j["sigma_rule"].get<std::string>());
  if (j.contains("eta_rule")) c.eta_rule = eta_from_name(j["eta_rule"].get<std::string>());
  return c;
}

json MapperSpec::to_json() const {
  return {{"kind", kind},
          {"hidden_dim", hidden_dim},
          {"latent_dim", latent_dim},
          {"activation", activation},
          {"kl_weight", kl_weight},
          {"pretrain_epochs", pretrain_epochs},
          {"pretrain_batch", pretrain_batch},
          {"pretrain_lr", pretrain_lr}};
}

MapperSpec MapperSpec::from_json(const json& j) {
  MapperSpec m;
  m.kind = j.value("kind", m.kind);
  if (m.kind != "linear" && m.kind != "vae")
    throw std::invalid_argument("mapper kind must be linear or vae");
  m.hidden_dim = j.value("hidden_dim", m.hidden_dim);
  m.latent_dim = j.value("latent_dim", m.latent_dim);
  m.activation = j.value("activation", m.activation);
  m.kl_weight = j.value("kl_weight", m.kl_weight);
  m.pretrain_epochs = j.value("pretrain_epochs", m.pretrain_epochs);
  m.pretrain_batch = j.value("pretrain_batch", m.pretrain_batch);
  m.pretrain_lr = j.value("pretrain_lr", m.pretrain_lr);
  return m;
}

json ExperimentConfig::to_json() const {
  json j{{"seed", seed},
         {"out_dir", out_dir.string()},
         {"standardize", standardize},
         {"average_repeats", average_repeats_enabled},
         {"train_split", train_split},
         {"eval_split", eval_split},
         {"mapper", mapper.to_json()},
         {"train", train.to_json()},
         {"tasks",
          {{"retrieval", task_retrieval},
           {"classification", task_classification},
           {"reconstruction", task_reconstruction},
           {"identification_trials", identification_trials}}},
         {"reconstruction", reconstruction.to_json()}};
  if (synthetic) j["synthetic"] = synthetic->to_json();
  if (!manifest_path.empty()) j["manifest"] = manifest_path.string();
  if (!image_cache_path.empty()) j["image_cache"] = image_cache_path.string();
  if (!text_cache_path.empty()) j["text_cache"] = text_cache_path.string();
  if (!classes_path.empty()) j["classes"] = classes_path.string();
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  c.seed = j.value("seed", uint64_t{0});
  c.out_dir = expand_env(j.at("out_dir").get<std::string>());
  if (j.contains("synthetic")) c.synthetic = SyntheticSpec::from_json(j["synthetic"]);
  if (j.contains("manifest")) c.manifest_path = expand_env(j["manifest"].get<std::string>());
  if (j.contains("image_cache")) c.image_cache_path = expand_env(j["image_cache"].get<std::string>());
  if (j.contains("text_cache")) c.text_cache_path = expand_env(j["text_cache"].get<std::string>());
  if (j.contains("classes")) c.classes_path = expand_env(j["classes"].get<std::string>());
  if (!c.synthetic && c.manifest_path.empty())
    throw std::invalid_argument("experiment config needs either a synthetic block or a manifest");
  c.standardize = j.value("standardize", true);
  c.average_repeats_enabled = j.value("average_repeats", true);
  c.train_split = j.value("train_split", std::string("train"));
  c.eval_split = j.value("eval_split", std::string("test"));
  if (j.contains("mapper")) c.mapper = MapperSpec::from_json(j["mapper"]);
  if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
  if (j.contains("tasks")) {
    const auto& t = j["tasks"];
    c.task_retrieval = t.value("retrieval", true);
    c.task_classification = t.value("classification", true);
    c.task_reconstruction = t.value("reconstruction", true);
    c.identification_trials = t.value("identification_trials", 50);
  }
  if (j.contains("reconstruction"))
    c.reconstruction = ReconstructionConfig::from_json(j["reconstruction"]);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_json(read_json(path));
}

PreparedDataset prepare_dataset(const std::filesystem::path& manifest_path, bool average,
                                bool standardize, const std::string& train_split) {
  PreparedDataset out;
  out.manifest = load_manifest(manifest_path);
  if (average)
    for (auto& [name, records] : out.manifest.splits) records = average_repeats(records);
  if (standardize) {
    out.stats = fit_standardizer(out.manifest.split(train_split));
    for (auto& [name, records] : out.manifest.splits)
      records = apply_standardizer(records, *out.stats);
  }
  return out;
}

namespace {

struct EvalViews {
  std::vector<std::string> stimulus_ids;
  std::vector<VectorXd> queries;  // mapped signal embeddings
  CandidatePool image_pool;
  CandidatePool text_pool;
};

EvalViews build_eval_views(TrainableMapper& mapper, const std::vector<SignalRecord>& records,
                           const EmbeddingProvider& images, const EmbeddingProvider& texts) {
  EvalViews v;
  std::vector<Embedding> image_embs, text_embs;
  MatrixXd X(static_cast<Eigen::Index>(records.size()), mapper.input_dim());
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    v.stimulus_ids.push_back(r.stimulus_id);
    X.row(static_cast<Eigen::Index>(i)) = to_double(r.signal).transpose();
    image_embs.push_back(images.embed_image(r.image_ref));
    text_embs.push_back(texts.embed_text(r.captions.front()));
  }
  const MatrixXd F = mapper.forward(X, MapperMode::Infer);
  for (Eigen::Index i = 0; i < F.rows(); ++i) v.queries.push_back(F.row(i).transpose());
  v.image_pool = pool_from_embeddings(v.stimulus_ids, image_embs);
  v.text_pool = pool_from_embeddings(v.stimulus_ids, text_embs);
  return v;
}

json recall_to_json(const RecallReport& r) {
  return {{"recall@1", r.recall_at_1},
          {"recall@5", r.recall_at_5},
          {"recall@10", r.recall_at_10},
          {"mean_recall", r.mean_recall},
          {"per_query_rank", r.per_query_rank}};
}

}  // namespace

std::filesystem::path run_pipeline(const ExperimentConfig& config) {
  namespace fs = std::filesystem;
  const fs::path out = config.out_dir;
  fs::create_directories(out);
  fs::create_directories(out / "reports");
  const std::string config_digest = digest_hex(fnv1a64(config.to_json().dump()));
  Rng master(config.seed);

  // --- inputs -----------------------------------------------------------
  fs::path manifest_path = config.manifest_path;
  fs::path image_cache_path = config.image_cache_path;
  fs::path text_cache_path = config.text_cache_path;
  fs::path classes_path = config.classes_path;
  if (config.synthetic) {
    const SyntheticDataset data = run_stage("synth-gen", [&] {
      return generate_synthetic(*config.synthetic, out / "data");
    });
    manifest_path = data.manifest_path;
    image_cache_path = data.image_cache_path;
    text_cache_path = data.text_cache_path;
    classes_path = data.classes_path;
  }

  // --- ingest -----------------------------------------------------------
  const PreparedDataset data = run_stage("ingest", [&] {
    return prepare_dataset(manifest_path, config.average_repeats_enabled, config.standardize,
                           config.train_split);
  });
  const auto& train_records = data.manifest.split(config.train_split);
  const auto& eval_records = data.manifest.split(config.eval_split);

  const auto [image_provider, text_provider] = run_stage("ingest", [&] {
    if (image_cache_path.empty() || text_cache_path.empty())
      throw std::runtime_error("image_cache and text_cache are required");
    auto img = std::make_unique<CacheProvider>(image_cache_path);
    auto txt = std::make_unique<CacheProvider>(read_cache(text_cache_path, img->dimension()));
    return std::pair{std::move(img), std::move(txt)};
  });
  const int dim = image_provider->dimension();

  // --- pretrain + train ---------------------------------------------------
  std::unique_ptr<TrainableMapper> mapper;
  if (config.mapper.kind == "vae") {
    const MapperCheckpoint decoder = run_stage("pretrain-vae", [&] {
      DecoderPretrainConfig pc;
      pc.embed_dim = dim;
      pc.hidden_dim = config.mapper.hidden_dim;
      pc.latent_dim = config.mapper.latent_dim;
      pc.activation = activation_from_name(config.mapper.activation);
      pc.kl_weight = config.mapper.kl_weight;
      pc.lr = config.mapper.pretrain_lr;
      pc.batch_size = config.mapper.pretrain_batch;
      pc.epochs = config.mapper.pretrain_epochs;
      pc.seed = master.child(1).seed();
      pc.space_id = image_provider->space_id();
      DecoderPretrainResult pr = pretrain_decoder(image_provider->cache().rows, pc);
      pr.checkpoint.metadata["config_digest"] = config_digest;
      save_checkpoint(pr.checkpoint, out / "decoder.xmdckpt");
      return pr.checkpoint;
    });
    run_stage("train", [&] {
      VaeMapperConfig vc;
      vc.voxel_count = data.manifest.voxel_count;
      vc.kl_weight = config.mapper.kl_weight;
      vc.seed = master.child(2).seed();
      vc.space_id = image_provider->space_id();
      mapper = std::make_unique<VaeMapper>(vc, decoder);
      return 0;
    });
  } else {
    mapper = std::make_unique<LinearMapper>(data.manifest.voxel_count, dim,
                                            master.child(2).seed(), image_provider->space_id());
  }

  const TrainResult trained = run_stage("train", [&] {
    TrainConfig tc = config.train;
    tc.selection_split = config.eval_split;
    TrainResult r = train(*mapper, train_records, eval_records, *image_provider, *text_provider, tc);
    r.checkpoint.metadata["config_digest"] = config_digest;
    save_checkpoint(r.checkpoint, out / "mapper.xmdckpt");
    write_train_log(r.log, out / "train_log.jsonl");
    return r;
  });

  // evaluation runs on the selected (best-epoch) parameters
  const auto best_mapper = run_stage("train", [&] {
    return mapper_from_checkpoint(trained.checkpoint, data.manifest.voxel_count);
  });

  const EvalViews views = run_stage("retrieve", [&] {
    return build_eval_views(*best_mapper, eval_records, *image_provider, *text_provider);
  });

  std::optional<json> retrieval_block;
  if (config.task_retrieval) {
    retrieval_block = run_stage("retrieve", [&] {
      const RecallReport to_image = mean_recall(views.queries, views.stimulus_ids, views.image_pool);
      const RecallReport to_text = mean_recall(views.queries, views.stimulus_ids, views.text_pool);
      json block{{"image", recall_to_json(to_image)}, {"text", recall_to_json(to_text)}};
      json file = block;
      file["config_digest"] = config_digest;
      file["seed"] = config.seed;
      write_json(file, out / "reports" / "retrieval.json");
      return block;
    });
  }

  std::optional<json> classification_block;
  if (config.task_classification) {
    classification_block = run_stage("classify", [&] {
      if (classes_path.empty())
        throw std::runtime_error("classification requested but no classes file configured");
      const auto classes = read_lines(classes_path);
      const ClassWeights weights =
          build_class_weights(classes, default_prompt_templates(), *text_provider);
      std::vector<std::string> labels;
      for (const auto& r : eval_records) {
        if (!r.category)
          throw std::runtime_error("record '" + r.stimulus_id + "' has no category label");
        labels.push_back(*r.category);
      }
      const int top5 = std::min<int>(5, static_cast<int>(classes.size()));
      json per_item = json::array();
      for (size_t i = 0; i < views.queries.size(); ++i) {
        const auto top = classify(views.queries[i], weights, top5);
        per_item.push_back({{"stimulus_id", views.stimulus_ids[i]},
                            {"label", labels[i]},
                            {"predicted", top}});
      }
      json block{{"top1", accuracy(views.queries, labels, weights, 1)},
                 {"top5", accuracy(views.queries, labels, weights, top5)},
                 {"per_item", per_item}};
      json file = block;
      file["config_digest"] = config_digest;
      file["seed"] = config.seed;
      write_json(file, out / "reports" / "classification.json");
      return block;
    });
  }

  std::optional<json> identification_block;
  if (config.task_reconstruction) {
    const fs::path recon_dir = out / "reconstruction";
    fs::create_directories(recon_dir);

    const auto gen_cache = run_stage("reconstruct", [&] {
      const DiffusionSchedule schedule = make_schedule(
          config.reconstruction.steps, config.reconstruction.beta_start,
          config.reconstruction.beta_end);
      const auto predictor = toy_gaussian_predictor(schedule);
      const LinearEmbedder embedder = LinearEmbedder::identity(dim);

      GuidanceConfig gc;
      gc.s = config.reconstruction.scale;
      gc.eta_rule = config.reconstruction.eta_rule;
      gc.init = config.reconstruction.init;
      gc.t_start_fraction = config.reconstruction.t_start_fraction;
      gc.sigma_rule = config.reconstruction.sigma_rule;

      // the training-split images act as the prior pool for noised-image init
      std::vector<std::string> prior_keys;
      std::vector<Embedding> prior_embs;
      std::map<std::string, bool> seen;
      for (const auto& r : train_records) {
        if (!seen.emplace(r.image_ref, true).second) continue;
        prior_keys.push_back(r.image_ref);
        prior_embs.push_back(image_provider->embed_image(r.image_ref));
      }
      const CandidatePool prior_pool = pool_from_embeddings(prior_keys, prior_embs);
      auto state_lookup = [&](const std::string& key) {
        return to_double(image_provider->embed_image(key).values);
      };

      std::vector<std::pair<std::string, VectorXf>> gen_rows;
      json log = json::object();
      Rng recon_rng = master.child(3);
      for (size_t i = 0; i < eval_records.size(); ++i) {
        Rng item_rng = recon_rng.child(i);
        const VectorXd& target = views.queries[i];
        GuidanceTarget gt{target, &embedder};
        InitState init = gc.init == InitKind::Gaussian
                             ? gaussian_init(schedule, dim, item_rng)
                             : select_init_image(target, prior_pool, state_lookup, schedule,
                                                 gc.t_start_fraction, item_rng);
        const SampleResult res = sample(*predictor, schedule, &gt, gc, init, item_rng);
        gen_rows.emplace_back(views.stimulus_ids[i], to_float(res.x0));
        json steps = json::array();
        for (const auto& e : res.log) steps.push_back({{"step", e.t}, {"guidance_loss", e.guidance_loss}});
        log[views.stimulus_ids[i]] = {{"init_key", init.key}, {"t_start", init.t_start},
                                      {"steps", std::move(steps)}};
      }
      const EmbeddingCache cache = build_cache(gen_rows, dim, image_provider->space_id());
      write_cache(cache, recon_dir / "generated_states.xmdcache");
      write_json(json{{"config_digest", config_digest}, {"seed", config.seed}, {"runs", log}},
                 recon_dir / "guidance_log.json");
      return cache;
    });

    identification_block = run_stage("evaluate", [&] {
      const LinearEmbedder embedder = LinearEmbedder::identity(dim);
      std::vector<VectorXd> gen, gt;
      for (size_t i = 0; i < views.stimulus_ids.size(); ++i) {
        gen.push_back(embedder.embed(to_double(gen_cache.row(views.stimulus_ids[i]))));
        gt.push_back(views.image_pool.embeddings.row(static_cast<Eigen::Index>(i)).transpose());
      }
      Rng eval_rng = master.child(4);
      const IdentificationResult ident = two_way_identification(
          gen, gt, views.image_pool, config.identification_trials, eval_rng, views.stimulus_ids);
      json block = identification_to_json(ident);
      json file = block;
      file["config_digest"] = config_digest;
      file["seed"] = config.seed;
      write_json(file, out / "reports" / "identification.json");
      return block;
    });
  }

  return run_stage("report", [&] {
    json metadata{{"config", config.to_json()},
                  {"seed", config.seed},
                  {"best_epoch", trained.best_epoch},
                  {"selection_metric", trained.best_metric},
                  {"initial_selection_metric", trained.initial_metric}};
    const json report =
        build_report(retrieval_block, classification_block, identification_block, metadata);
    const fs::path path = out / "reports" / "report.json";
    write_json(report, path);
    return path;
  });
}

}  // namespace xmd
