#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "xmd/pipeline.hpp"

using namespace xmd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json parse_inline_or_file(const std::string& arg) {
  if (!arg.empty() && arg.front() == '{') return json::parse(arg);
  return read_json(expand_env(arg));
}

std::unique_ptr<EmbeddingProvider> provider_from_arg(const std::string& arg) {
  return make_provider(ProviderConfig::from_json_string(parse_inline_or_file(arg).dump()));
}

/// Collect the embedding keys of one split: image refs or all captions.
std::vector<std::string> split_keys(const DatasetManifest& m, const std::string& split,
                                    const std::string& modality) {
  std::vector<std::string> keys;
  std::map<std::string, bool> seen;
  for (const auto& r : m.split(split)) {
    if (modality == "image") {
      if (seen.emplace(r.image_ref, true).second) keys.push_back(r.image_ref);
    } else {
      for (const auto& c : r.captions)
        if (seen.emplace(c, true).second) keys.push_back(c);
    }
  }
  return keys;
}

struct DatasetArgs {
  std::string manifest;
  std::string split = "test";
  bool no_average = false;
  bool no_standardize = false;
  std::string train_split = "train";

  void attach(CLI::App* cmd, bool with_split = true) {
    cmd->add_option("--manifest", manifest, "dataset manifest JSON")->required();
    if (with_split) cmd->add_option("--split", split, "split to evaluate");
    cmd->add_flag("--no-average", no_average, "skip trial averaging");
    cmd->add_flag("--no-standardize", no_standardize, "skip train-set z-scoring");
    cmd->add_option("--train-split", train_split, "split used to fit voxel statistics");
  }

  PreparedDataset prepare() const {
    return prepare_dataset(expand_env(manifest), !no_average, !no_standardize, train_split);
  }
};

struct MappedSplit {
  std::vector<std::string> stimulus_ids;
  std::vector<VectorXd> queries;
  const std::vector<SignalRecord>* records = nullptr;
};

MappedSplit map_split(TrainableMapper& mapper, const std::vector<SignalRecord>& records) {
  MappedSplit out;
  out.records = &records;
  MatrixXd x(static_cast<Eigen::Index>(records.size()), mapper.input_dim());
  for (size_t i = 0; i < records.size(); ++i) {
    out.stimulus_ids.push_back(records[i].stimulus_id);
    x.row(static_cast<Eigen::Index>(i)) = to_double(records[i].signal).transpose();
  }
  const MatrixXd f = mapper.forward(x, MapperMode::Infer);
  for (Eigen::Index i = 0; i < f.rows(); ++i) out.queries.push_back(f.row(i).transpose());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modal signal decoding toolkit"};
  app.require_subcommand(1);

  // --- ingest ---------------------------------------------------------------
  auto* ingest = app.add_subcommand("ingest", "validate a manifest and write processed records");
  DatasetArgs ingest_args;
  std::string ingest_out;
  ingest_args.attach(ingest, false);
  ingest->add_option("--out", ingest_out, "output directory")->required();
  ingest->callback([&] {
    const PreparedDataset data = ingest_args.prepare();
    const fs::path out = expand_env(ingest_out);
    write_manifest(data.manifest, out);
    if (data.stats) {
      json stats{{"mean", std::vector<double>(data.stats->mean().begin(), data.stats->mean().end())},
                 {"std", std::vector<double>(data.stats->std_dev().begin(),
                                             data.stats->std_dev().end())}};
      write_json(stats, out / "voxel_stats.json");
    }
    std::cout << "wrote " << (out / "manifest.json").string() << "\n";
  });

  // --- embed-cache ----------------------------------------------------------
  auto* embed = app.add_subcommand("embed-cache", "embed one split with a provider into a cache");
  std::string ec_manifest, ec_split = "train", ec_modality = "image", ec_provider, ec_out;
  embed->add_option("--manifest", ec_manifest)->required();
  embed->add_option("--split", ec_split);
  embed->add_option("--modality", ec_modality)->check(CLI::IsMember({"image", "text"}));
  embed->add_option("--provider", ec_provider, "provider config JSON (inline or @file)")
      ->required();
  embed->add_option("--out", ec_out, "cache path (default under XMD_CACHE_DIR)");
  embed->callback([&] {
    const DatasetManifest m = load_manifest(expand_env(ec_manifest));
    const auto provider = provider_from_arg(ec_provider);
    fs::path out;
    if (!ec_out.empty()) {
      out = expand_env(ec_out);
    } else {
      const char* cache_dir = std::getenv("XMD_CACHE_DIR");
      if (!cache_dir)
        throw std::runtime_error("no --out given and XMD_CACHE_DIR is not set");
      out = fs::path(cache_dir) / (m.name + "_" + ec_split + "_" + ec_modality + ".xmdcache");
      fs::create_directories(out.parent_path());
    }
    write_cache(split_keys(m, ec_split, ec_modality), *provider, out);
    std::cout << "wrote " << out.string() << "\n";
  });

  // --- pretrain-vae ---------------------------------------------------------
  auto* pretrain = app.add_subcommand("pretrain-vae",
                                      "pretrain the embedding decoder on an unpaired cache");
  std::string pv_cache, pv_out, pv_activation = "tanh";
  DecoderPretrainConfig pv_cfg;
  pretrain->add_option("--cache", pv_cache, "embedding cache with unpaired images")->required();
  pretrain->add_option("--out", pv_out)->required();
  pretrain->add_option("--hidden", pv_cfg.hidden_dim);
  pretrain->add_option("--latent", pv_cfg.latent_dim);
  pretrain->add_option("--epochs", pv_cfg.epochs);
  pretrain->add_option("--batch", pv_cfg.batch_size);
  pretrain->add_option("--lr", pv_cfg.lr);
  pretrain->add_option("--kl-weight", pv_cfg.kl_weight);
  pretrain->add_option("--holdout", pv_cfg.holdout_fraction);
  pretrain->add_option("--seed", pv_cfg.seed);
  pretrain->add_option("--activation", pv_activation)->check(CLI::IsMember({"tanh", "silu"}));
  pretrain->callback([&] {
    const EmbeddingCache cache = read_cache(expand_env(pv_cache));
    pv_cfg.embed_dim = cache.dimension;
    pv_cfg.activation = activation_from_name(pv_activation);
    pv_cfg.space_id = cache.space_id;
    const DecoderPretrainResult result = pretrain_decoder(cache.rows, pv_cfg);
    save_checkpoint(result.checkpoint, expand_env(pv_out));
    std::cout << "holdout reconstruction cosine: " << result.holdout_cosine << "\n";
  });

  // --- train ------------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "contrastive training of a mapping network");
  DatasetArgs tr_data;
  std::string tr_mapper = "linear", tr_modality, tr_config, tr_out, tr_image_cache,
              tr_text_cache, tr_decoder, tr_log;
  int tr_hidden = 2048, tr_latent = 512;
  uint64_t tr_init_seed = 0;
  tr_data.attach(train_cmd, false);
  train_cmd->add_option("--mapper", tr_mapper)->check(CLI::IsMember({"linear", "vae"}));
  train_cmd->add_option("--modality", tr_modality)->check(CLI::IsMember({"V", "T", "V&T"}));
  train_cmd->add_option("--config", tr_config, "train config JSON (inline or @file)");
  train_cmd->add_option("--out", tr_out)->required();
  train_cmd->add_option("--image-cache", tr_image_cache)->required();
  train_cmd->add_option("--text-cache", tr_text_cache)->required();
  train_cmd->add_option("--decoder", tr_decoder, "pretrained decoder checkpoint (vae)");
  train_cmd->add_option("--log", tr_log, "training log path (JSON lines)");
  train_cmd->add_option("--hidden", tr_hidden);
  train_cmd->add_option("--latent", tr_latent);
  train_cmd->add_option("--init-seed", tr_init_seed, "parameter init seed");
  train_cmd->callback([&] {
    const PreparedDataset data = tr_data.prepare();
    CacheProvider images{expand_env(tr_image_cache)};
    CacheProvider texts{read_cache(expand_env(tr_text_cache), images.dimension())};

    TrainConfig cfg;
    if (!tr_config.empty()) cfg = TrainConfig::from_json(parse_inline_or_file(tr_config));
    if (!tr_modality.empty()) cfg.modality = modality_from_name(tr_modality);
    cfg.validate();

    std::unique_ptr<TrainableMapper> mapper;
    if (tr_mapper == "vae") {
      if (tr_decoder.empty())
        throw std::runtime_error("vae training needs --decoder (see pretrain-vae)");
      VaeMapperConfig vc;
      vc.voxel_count = data.manifest.voxel_count;
      vc.hidden_dim = tr_hidden;
      vc.latent_dim = tr_latent;
      vc.seed = tr_init_seed;
      vc.space_id = images.space_id();
      mapper = std::make_unique<VaeMapper>(vc, load_checkpoint(expand_env(tr_decoder)));
    } else {
      mapper = std::make_unique<LinearMapper>(data.manifest.voxel_count, images.dimension(),
                                              tr_init_seed, images.space_id());
    }

    const TrainResult result = train(*mapper, data.manifest.split(tr_data.train_split),
                                     data.manifest.split(cfg.selection_split), images, texts, cfg);
    save_checkpoint(result.checkpoint, expand_env(tr_out));
    if (!tr_log.empty()) write_train_log(result.log, expand_env(tr_log));
    std::cout << "best " << cfg.selection_target << " mean recall " << result.best_metric
              << " at epoch " << result.best_epoch << "\n";
  });

  // --- retrieve ----------------------------------------------------------------
  auto* retrieve = app.add_subcommand("retrieve", "rank candidates for each mapped signal");
  DatasetArgs rt_data;
  std::string rt_ckpt, rt_target = "image", rt_cache, rt_report;
  rt_data.attach(retrieve);
  retrieve->add_option("--ckpt", rt_ckpt)->required();
  retrieve->add_option("--target", rt_target)->check(CLI::IsMember({"image", "text"}));
  retrieve->add_option("--cache", rt_cache, "embedding cache covering the target modality")
      ->required();
  retrieve->add_option("--report", rt_report)->required();
  retrieve->callback([&] {
    const PreparedDataset data = rt_data.prepare();
    auto mapper = mapper_from_checkpoint(load_checkpoint(expand_env(rt_ckpt)),
                                         data.manifest.voxel_count);
    CacheProvider cache{expand_env(rt_cache)};
    const auto& records = data.manifest.split(rt_data.split);
    const MappedSplit mapped = map_split(*mapper, records);

    std::vector<Embedding> pool_embs;
    for (const auto& r : records)
      pool_embs.push_back(rt_target == "image" ? cache.embed_image(r.image_ref)
                                               : cache.embed_text(r.captions.front()));
    const CandidatePool pool = pool_from_embeddings(mapped.stimulus_ids, pool_embs);
    const RecallReport rr = mean_recall(mapped.queries, mapped.stimulus_ids, pool);
    write_json(json{{"recall@1", rr.recall_at_1},
                    {"recall@5", rr.recall_at_5},
                    {"recall@10", rr.recall_at_10},
                    {"mean_recall", rr.mean_recall},
                    {"per_query_rank", rr.per_query_rank},
                    {"target", rt_target},
                    {"split", rt_data.split}},
               expand_env(rt_report));
    std::cout << "mean recall " << rr.mean_recall << "\n";
  });

  // --- classify ------------------------------------------------------------------
  auto* classify_cmd = app.add_subcommand("classify", "zero-shot classification via prompts");
  DatasetArgs cl_data;
  std::string cl_ckpt, cl_classes, cl_templates, cl_text_cache, cl_report;
  cl_data.attach(classify_cmd);
  classify_cmd->add_option("--ckpt", cl_ckpt)->required();
  classify_cmd->add_option("--classes", cl_classes, "class names, one per line")->required();
  classify_cmd->add_option("--templates", cl_templates, "prompt templates, one per line");
  classify_cmd->add_option("--text-cache", cl_text_cache)->required();
  classify_cmd->add_option("--report", cl_report)->required();
  classify_cmd->callback([&] {
    const PreparedDataset data = cl_data.prepare();
    auto mapper = mapper_from_checkpoint(load_checkpoint(expand_env(cl_ckpt)),
                                         data.manifest.voxel_count);
    CacheProvider texts{expand_env(cl_text_cache)};
    const auto classes = read_lines(expand_env(cl_classes));
    const auto templates =
        cl_templates.empty() ? default_prompt_templates() : read_lines(expand_env(cl_templates));
    const ClassWeights weights = build_class_weights(classes, templates, texts);

    const auto& records = data.manifest.split(cl_data.split);
    const MappedSplit mapped = map_split(*mapper, records);
    std::vector<std::string> labels;
    for (const auto& r : records) {
      if (!r.category)
        throw std::runtime_error("record '" + r.stimulus_id + "' has no category label");
      labels.push_back(*r.category);
    }
    const int top5 = std::min<int>(5, static_cast<int>(classes.size()));
    json per_item = json::array();
    for (size_t i = 0; i < mapped.queries.size(); ++i)
      per_item.push_back({{"stimulus_id", mapped.stimulus_ids[i]},
                          {"label", labels[i]},
                          {"predicted", classify(mapped.queries[i], weights, top5)}});
    const double top1 = accuracy(mapped.queries, labels, weights, 1);
    const double top5_acc = accuracy(mapped.queries, labels, weights, top5);
    write_json(json{{"top1", top1}, {"top5", top5_acc}, {"per_item", per_item}},
               expand_env(cl_report));
    std::cout << "top-1 " << top1 << "%, top-5 " << top5_acc << "%\n";
  });

  // --- reconstruct ------------------------------------------------------------
  auto* recon = app.add_subcommand(
      "reconstruct", "embedding-guided reverse diffusion from mapped signals");
  DatasetArgs rc_data;
  std::string rc_ckpt, rc_init = "noised-image", rc_prior, rc_out;
  ReconstructionConfig rc_cfg;
  uint64_t rc_seed = 0;
  rc_data.attach(recon);
  recon->add_option("--ckpt", rc_ckpt)->required();
  recon->add_option("--init", rc_init)->check(CLI::IsMember({"gaussian", "noised-image"}));
  recon->add_option("--prior-cache", rc_prior, "candidate pool for noised-image init");
  recon->add_option("--scale", rc_cfg.scale, "guidance scale s");
  recon->add_option("--steps", rc_cfg.steps);
  recon->add_option("--beta-start", rc_cfg.beta_start);
  recon->add_option("--beta-end", rc_cfg.beta_end);
  recon->add_option("--t-start-fraction", rc_cfg.t_start_fraction);
  recon->add_option("--seed", rc_seed);
  recon->add_option("--out", rc_out, "output directory")->required();
  recon->callback([&] {
    const PreparedDataset data = rc_data.prepare();
    auto mapper = mapper_from_checkpoint(load_checkpoint(expand_env(rc_ckpt)),
                                         data.manifest.voxel_count);
    const int dim = mapper->output_dim();
    const auto& records = data.manifest.split(rc_data.split);
    const MappedSplit mapped = map_split(*mapper, records);

    const DiffusionSchedule schedule =
        make_schedule(rc_cfg.steps, rc_cfg.beta_start, rc_cfg.beta_end);
    const auto predictor = toy_gaussian_predictor(schedule);
    const LinearEmbedder embedder = LinearEmbedder::identity(dim);

    GuidanceConfig gc;
    gc.s = rc_cfg.scale;
    gc.init = rc_init == "gaussian" ? InitKind::Gaussian : InitKind::NoisedImage;
    gc.t_start_fraction = rc_cfg.t_start_fraction;

    std::optional<CandidatePool> prior;
    std::optional<CacheProvider> prior_cache;
    if (gc.init == InitKind::NoisedImage) {
      if (rc_prior.empty()) throw std::runtime_error("noised-image init needs --prior-cache");
      prior_cache.emplace(expand_env(rc_prior));
      prior = pool_from_cache(prior_cache->cache());
    }

    const fs::path out = expand_env(rc_out);
    fs::create_directories(out);
    Rng master(rc_seed);
    std::vector<std::pair<std::string, VectorXf>> rows;
    json log = json::object();
    for (size_t i = 0; i < mapped.queries.size(); ++i) {
      Rng item_rng = master.child(i);
      GuidanceTarget target{mapped.queries[i], &embedder};
      InitState init =
          gc.init == InitKind::Gaussian
              ? gaussian_init(schedule, dim, item_rng)
              : select_init_image(
                    mapped.queries[i], *prior,
                    [&](const std::string& key) { return to_double(prior_cache->embed(key).values); },
                    schedule, gc.t_start_fraction, item_rng);
      const SampleResult res = sample(*predictor, schedule, &target, gc, init, item_rng);
      rows.emplace_back(mapped.stimulus_ids[i], to_float(res.x0));
      json steps = json::array();
      for (const auto& e : res.log)
        steps.push_back({{"step", e.t}, {"guidance_loss", e.guidance_loss}});
      log[mapped.stimulus_ids[i]] = {{"init_key", init.key}, {"t_start", init.t_start},
                                     {"steps", std::move(steps)}};
    }
    write_cache(build_cache(rows, dim, mapper->space_id()), out / "generated_states.xmdcache");
    write_json(json{{"seed", rc_seed}, {"runs", log}}, out / "guidance_log.json");
    std::cout << "wrote " << (out / "generated_states.xmdcache").string() << "\n";
  });

  // --- evaluate -----------------------------------------------------------------
  auto* evaluate = app.add_subcommand("evaluate", "2-way identification of generated embeddings");
  std::string ev_gen, ev_gt, ev_dis, ev_report, ev_manifest, ev_split = "test";
  int ev_trials = 50;
  uint64_t ev_seed = 0;
  evaluate->add_option("--gen-cache", ev_gen)->required();
  evaluate->add_option("--gt-cache", ev_gt)->required();
  evaluate->add_option("--distractors", ev_dis)->required();
  evaluate->add_option("--manifest", ev_manifest,
                       "translate stimulus ids to image refs for the gt lookups");
  evaluate->add_option("--split", ev_split);
  evaluate->add_option("--trials", ev_trials, "0 enumerates the pool exhaustively");
  evaluate->add_option("--seed", ev_seed);
  evaluate->add_option("--report", ev_report)->required();
  evaluate->callback([&] {
    const EmbeddingCache gen_cache = read_cache(expand_env(ev_gen));
    const EmbeddingCache gt_cache = read_cache(expand_env(ev_gt), gen_cache.dimension);
    const EmbeddingCache dis_cache = read_cache(expand_env(ev_dis), gen_cache.dimension);

    std::map<std::string, std::string> stim_to_ref;
    if (!ev_manifest.empty()) {
      const DatasetManifest m = load_manifest(expand_env(ev_manifest));
      for (const auto& r : m.split(ev_split)) stim_to_ref[r.stimulus_id] = r.image_ref;
    }
    auto translate = [&](const std::string& key) {
      auto it = stim_to_ref.find(key);
      return it == stim_to_ref.end() ? key : it->second;
    };

    std::vector<VectorXd> gen, gt;
    std::vector<std::string> gt_keys;
    for (const auto& key : gen_cache.keys) {
      gen.push_back(to_double(gen_cache.row(key)));
      gt.push_back(to_double(gt_cache.row(translate(key))));
      gt_keys.push_back(translate(key));
    }
    Rng rng(ev_seed);
    const IdentificationResult r =
        two_way_identification(gen, gt, pool_from_cache(dis_cache), ev_trials, rng, gt_keys);
    write_json(identification_to_json(r), expand_env(ev_report));
    std::cout << "2-way identification " << r.percent_correct << "%\n";
  });

  // --- synth-gen ---------------------------------------------------------------
  auto* synth = app.add_subcommand("synth-gen", "generate a synthetic benchmark dataset");
  SyntheticSpec sg;
  std::string sg_out;
  synth->add_option("--out", sg_out)->required();
  synth->add_option("--n-train", sg.n_train);
  synth->add_option("--n-test", sg.n_test);
  synth->add_option("--voxels", sg.voxels);
  synth->add_option("--dim", sg.dim);
  synth->add_option("--noise-sigma", sg.noise_sigma);
  synth->add_option("--n-classes", sg.n_classes);
  synth->add_option("--agreement", sg.image_text_agreement);
  synth->add_option("--captions", sg.captions_per_item);
  synth->add_option("--test-repeats", sg.test_repeats);
  synth->add_option("--seed", sg.seed);
  synth->callback([&] {
    const SyntheticDataset data = generate_synthetic(sg, expand_env(sg_out));
    std::cout << "wrote " << data.manifest_path.string() << "\n";
  });

  // --- report -------------------------------------------------------------------
  auto* report_cmd = app.add_subcommand("report", "consolidate metric blocks into one report");
  std::string rp_retrieval, rp_classification, rp_identification, rp_metadata, rp_out;
  report_cmd->add_option("--retrieval", rp_retrieval);
  report_cmd->add_option("--classification", rp_classification);
  report_cmd->add_option("--identification", rp_identification);
  report_cmd->add_option("--metadata", rp_metadata, "run metadata JSON (inline or @file)");
  report_cmd->add_option("--out", rp_out)->required();
  report_cmd->callback([&] {
    auto block = [](const std::string& path) -> std::optional<json> {
      if (path.empty()) return std::nullopt;
      return read_json(expand_env(path));
    };
    const json metadata = rp_metadata.empty() ? json::object() : parse_inline_or_file(rp_metadata);
    write_json(build_report(block(rp_retrieval), block(rp_classification),
                            block(rp_identification), metadata),
               expand_env(rp_out));
  });

  // --- run ----------------------------------------------------------------------
  auto* run = app.add_subcommand("run", "execute a full experiment pipeline");
  std::string run_config;
  run->add_option("--config", run_config, "experiment config JSON")->required();
  run->callback([&] {
    const fs::path report = run_pipeline(ExperimentConfig::load(expand_env(run_config)));
    std::cout << "report: " << report.string() << "\n";
  });

  // subcommand callbacks run inside parse; errors exit nonzero with a stage tag
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const StageError& e) {
    std::cerr << "[" << e.stage() << "] " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    const auto subs = app.get_subcommands();
    std::cerr << "[" << (subs.empty() ? "cli" : subs.front()->get_name()) << "] " << e.what()
              << "\n";
    return 1;
  }
  return 0;
}
