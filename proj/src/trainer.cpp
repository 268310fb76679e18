#include "xmd/trainer.hpp"

#include <fstream>

#include "xmd/retrieval.hpp"

namespace xmd {

using nlohmann::json;

Modality modality_from_name(const std::string& name) {
  if (name == "V") return Modality::V;
  if (name == "T") return Modality::T;
  if (name == "V&T" || name == "VT") return Modality::VT;
  throw std::invalid_argument("unknown modality '" + name + "' (expected V, T, or V&T)");
}

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::V: return "V";
    case Modality::T: return "T";
    case Modality::VT: return "V&T";
  }
  return "?";
}

double TrainConfig::effective_alpha() const {
  if (modality == Modality::V) return 1.0;
  if (modality == Modality::T) return 0.0;
  return alpha;
}

void TrainConfig::validate() const {
  if (tau1 <= 0.0 || tau2 <= 0.0)
    throw std::invalid_argument("train config: temperatures must be positive");
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("train config: alpha must lie in [0, 1]");
  if (batch_size < 2)
    throw std::invalid_argument("train config: batch_size must be >= 2 for a meaningful contrast");
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (selection_target != "image" && selection_target != "text")
    throw std::invalid_argument("train config: selection_target must be image or text");
}

json TrainConfig::to_json() const {
  return {{"alpha", alpha},
          {"tau1", tau1},
          {"tau2", tau2},
          {"batch_size", batch_size},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"weight_decay", weight_decay},
          {"epochs", epochs},
          {"patience", patience},
          {"seed", seed},
          {"modality", modality_name(modality)},
          {"selection_split", selection_split},
          {"selection_target", selection_target}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.tau1 = j.value("tau1", c.tau1);
  c.tau2 = j.value("tau2", c.tau2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  if (j.contains("modality")) c.modality = modality_from_name(j["modality"].get<std::string>());
  c.selection_split = j.value("selection_split", c.selection_split);
  c.selection_target = j.value("selection_target", c.selection_target);
  c.validate();
  return c;
}

namespace {

/// Selection-split retrieval state: one pool row per unique stimulus.
struct SelectionEval {
  CandidatePool pool;
  MatrixXd signals;  // one row per selection record
  std::vector<std::string> gt_keys;
};

SelectionEval build_selection(const std::vector<SignalRecord>& records,
                              const EmbeddingProvider& provider, const std::string& target,
                              Rng caption_rng) {
  SelectionEval s;
  std::vector<std::string> keys;
  std::vector<Embedding> embs;
  std::map<std::string, bool> seen;
  for (const auto& r : records) {
    if (!seen.emplace(r.stimulus_id, true).second) continue;
    keys.push_back(r.stimulus_id);
    if (target == "image") {
      embs.push_back(provider.embed_image(r.image_ref));
    } else {
      embs.push_back(provider.embed_text(sample_caption(r, caption_rng)));
    }
  }
  s.pool = pool_from_embeddings(keys, embs);
  s.signals.resize(static_cast<Eigen::Index>(records.size()), records.front().signal.size());
  for (size_t i = 0; i < records.size(); ++i) {
    s.signals.row(static_cast<Eigen::Index>(i)) = to_double(records[i].signal).transpose();
    s.gt_keys.push_back(records[i].stimulus_id);
  }
  return s;
}

double selection_metric(TrainableMapper& mapper, const SelectionEval& sel) {
  const MatrixXd F = mapper.forward(sel.signals, MapperMode::Infer);
  std::vector<VectorXd> queries;
  queries.reserve(static_cast<size_t>(F.rows()));
  for (Eigen::Index i = 0; i < F.rows(); ++i) queries.push_back(F.row(i).transpose());
  return mean_recall(queries, sel.gt_keys, sel.pool).mean_recall;
}

void check_coverage(const std::vector<SignalRecord>& records, const EmbeddingProvider& images,
                    const EmbeddingProvider& texts, bool need_images, bool need_texts,
                    const char* which) {
  for (const auto& r : records) {
    if (need_images && !images.contains(r.image_ref))
      throw std::runtime_error(std::string("image provider does not cover ") + which +
                               " item '" + r.image_ref + "'");
    if (need_texts)
      for (const auto& c : r.captions)
        if (!texts.contains(c))
          throw std::runtime_error(std::string("text provider does not cover ") + which +
                                   " caption '" + c + "'");
  }
}

}  // namespace

TrainResult train(TrainableMapper& mapper, const std::vector<SignalRecord>& train_records,
                  const std::vector<SignalRecord>& selection_records,
                  const EmbeddingProvider& image_provider, const EmbeddingProvider& text_provider,
                  const TrainConfig& config) {
  config.validate();
  mapper.check_trainable();
  if (train_records.size() < 2)
    throw std::invalid_argument("train: need at least 2 training records");
  if (selection_records.empty())
    throw std::invalid_argument("train: selection split is empty");

  const double alpha = config.effective_alpha();
  const bool use_images = alpha > 0.0;
  const bool use_texts = alpha < 1.0;
  check_coverage(train_records, image_provider, text_provider, use_images, use_texts, "train");
  const bool select_on_images = config.selection_target == "image";
  check_coverage(selection_records, image_provider, text_provider, select_on_images,
                 !select_on_images, "selection");

  const auto n = train_records.size();
  const auto voxels = static_cast<Eigen::Index>(mapper.input_dim());
  for (const auto& r : train_records)
    if (r.signal.size() != voxels)
      throw std::invalid_argument("train: record '" + r.stimulus_id + "' has " +
                                  std::to_string(r.signal.size()) + " voxels, mapper expects " +
                                  std::to_string(voxels));

  // fixed per-record image embeddings; caption embeddings resolved per epoch
  std::vector<VectorXd> image_embs(n);
  if (use_images)
    for (size_t i = 0; i < n; ++i)
      image_embs[i] = to_double(image_provider.embed_image(train_records[i].image_ref).values);

  Rng master(config.seed);
  const SelectionEval sel = build_selection(selection_records,
                                            select_on_images ? image_provider : text_provider,
                                            config.selection_target, master.child(0xCA11));

  AdamW opt(mapper.params(), AdamWConfig{config.lr, config.beta1, config.beta2, config.eps,
                                         config.weight_decay});

  TrainResult result;
  result.initial_metric = selection_metric(mapper, sel);
  result.best_metric = result.initial_metric;
  result.best_epoch = 0;
  json base_meta{{"train_config", config.to_json()},
                 {"selection_metric", result.initial_metric},
                 {"best_epoch", 0}};
  result.checkpoint = mapper.to_checkpoint(base_meta);

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  int epochs_since_best = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng epoch_rng = master.child(static_cast<uint64_t>(epoch));
    Rng caption_rng = epoch_rng.child(0);
    Rng shuffle_rng = epoch_rng.child(1);
    Rng noise_rng = epoch_rng.child(2);

    // per-epoch caption resampling
    std::vector<const std::string*> captions(n, nullptr);
    if (use_texts)
      for (size_t i = 0; i < n; ++i)
        captions[i] = &sample_caption(train_records[i], caption_rng);

    shuffle_rng.shuffle(order);

    double sum_loss = 0.0, sum_fi = 0.0, sum_ft = 0.0;
    int batches = 0;
    for (size_t begin = 0; begin < n; begin += static_cast<size_t>(config.batch_size)) {
      const size_t m = std::min<size_t>(static_cast<size_t>(config.batch_size), n - begin);
      if (m < 2) break;  // a single-sample contrast is degenerate

      MatrixXd X(static_cast<Eigen::Index>(m), voxels);
      MatrixXd I(use_images ? static_cast<Eigen::Index>(m) : 0, mapper.output_dim());
      MatrixXd T(use_texts ? static_cast<Eigen::Index>(m) : 0, mapper.output_dim());
      for (size_t i = 0; i < m; ++i) {
        const size_t rec = order[begin + i];
        X.row(static_cast<Eigen::Index>(i)) = to_double(train_records[rec].signal).transpose();
        if (use_images) I.row(static_cast<Eigen::Index>(i)) = image_embs[rec].transpose();
        if (use_texts)
          T.row(static_cast<Eigen::Index>(i)) =
              to_double(text_provider.embed_text(*captions[rec]).values).transpose();
      }

      const MatrixXd F = mapper.forward(X, MapperMode::Train, &noise_rng);
      const TotalLossGrad g = total_loss_backward(F, I, T, alpha, config.tau1, config.tau2);
      const double loss = g.value.total + mapper.aux_loss();
      if (!std::isfinite(loss))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batches));
      opt.zero_grad();
      mapper.backward(g.dF);
      opt.step();

      sum_loss += loss;
      sum_fi += g.value.fi;
      sum_ft += g.value.ft;
      ++batches;
    }
    if (batches == 0)
      throw std::runtime_error("train: no usable batches (all smaller than 2 records)");

    EpochLog entry;
    entry.epoch = epoch;
    entry.loss = sum_loss / batches;
    if (use_images) entry.l_fi = sum_fi / batches;
    if (use_texts) entry.l_ft = sum_ft / batches;
    entry.selection_metric = selection_metric(mapper, sel);
    result.log.push_back(entry);

    // ties keep the latest epoch, so co-trained objectives keep converging
    // after the selection metric saturates
    if (entry.selection_metric >= result.best_metric) {
      result.best_metric = entry.selection_metric;
      result.best_epoch = epoch;
      json meta{{"train_config", config.to_json()},
                {"selection_metric", entry.selection_metric},
                {"best_epoch", epoch}};
      result.checkpoint = mapper.to_checkpoint(meta);
      epochs_since_best = 0;
    } else if (++epochs_since_best > config.patience) {
      break;
    }
  }
  return result;
}

void write_train_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open training log for writing: " + path.string());
  for (const auto& e : log) {
    json j{{"epoch", e.epoch}, {"loss", e.loss}, {"selection_metric", e.selection_metric}};
    j["L_FI"] = e.l_fi ? json(*e.l_fi) : json(nullptr);
    j["L_FT"] = e.l_ft ? json(*e.l_ft) : json(nullptr);
    out << j.dump() << "\n";
  }
}

}  // namespace xmd
